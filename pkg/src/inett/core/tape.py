"""Define-by-run reverse-mode differentiation.

A :class:`GradTape` records every differentiable operation whose inputs
depend on a watched leaf. Values flowing through the tape are wrapped in
:class:`Var`; everything else stays a plain ``numpy.ndarray`` so untracked
computation pays no bookkeeping cost.
"""
from __future__ import annotations

import weakref
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

VJP = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]


class Var:
    """A value recorded on a tape.

    The back-reference to the tape is weak so a finished tape (and every
    intermediate it holds) is freed as soon as the caller drops it.
    """

    __slots__ = ("value", "_tape", "index", "parents", "vjp", "name")

    def __init__(self, value, tape, index, parents=(), vjp=None, name=None):
        self.value = value
        self._tape = weakref.ref(tape)
        self.index = index
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @property
    def tape(self) -> Optional["GradTape"]:
        return self._tape()

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def is_leaf(self):
        return self.vjp is None

    def __repr__(self):
        kind = f"leaf {self.name!r}" if self.is_leaf else "node"
        return f"Var({kind}, shape={self.value.shape})"

    # arithmetic sugar; the heavy lifting lives in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, key):
        from . import ops
        return ops.getitem(self, key)


class GradTape:
    """Ordered record of executed operations plus the set of tracked leaves."""

    __slots__ = ("nodes", "leaves", "__weakref__")

    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: Dict[str, Var] = {}

    def watch(self, value, name: Optional[str] = None) -> Var:
        """Register ``value`` as a tracked leaf and return its handle."""
        value = np.asarray(value, dtype=np.float64)
        if name is None:
            name = f"leaf{len(self.leaves)}"
        if name in self.leaves:
            raise ValueError(f"leaf {name!r} already tracked on this tape")
        var = Var(value, self, len(self.nodes), name=name)
        self.nodes.append(var)
        self.leaves[name] = var
        return var

    def record(self, value, parents, vjp: VJP) -> Var:
        var = Var(value, self, len(self.nodes), tuple(parents), vjp)
        self.nodes.append(var)
        return var

    def __len__(self):
        return len(self.nodes)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def tape_of(*xs) -> Optional[GradTape]:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
    return tape


def wrap(value, parents, vjp: VJP):
    """Record ``value`` if any parent is tracked, else return it untouched."""
    tape = tape_of(*parents)
    if tape is None:
        return value
    return tape.record(value, parents, vjp)


def grad(tape: GradTape, output, wrt: Optional[Iterable] = None) -> Dict[str, np.ndarray]:
    """Gradient of the scalar ``output`` with respect to tracked leaves.

    ``wrt`` selects leaves by name or handle; by default every leaf on the
    tape is returned. Leaves the output does not depend on get zero
    gradients.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise ValueError("output is not reachable from this tape")
    if output.value.size != 1:
        raise ValueError(f"output must be scalar, got shape {output.value.shape}")

    if wrt is None:
        targets = list(tape.leaves.values())
    else:
        targets = []
        for w in wrt:
            key = w.name if isinstance(w, Var) else w
            if key not in tape.leaves or (isinstance(w, Var) and tape.leaves[key] is not w):
                raise KeyError(f"{key!r} is not a tracked leaf of this tape")
            targets.append(tape.leaves[key])

    grads: Dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
    for node in reversed(tape.nodes[: output.index + 1]):
        g = grads.pop(node.index, None) if not node.is_leaf else grads.get(node.index)
        if g is None or node.is_leaf:
            continue
        needs = [isinstance(p, Var) for p in node.parents]
        pgrads = node.vjp(g, needs)
        for p, pg, need in zip(node.parents, pgrads, needs):
            if not need or pg is None:
                continue
            prev = grads.get(p.index)
            grads[p.index] = pg if prev is None else prev + pg

    return {
        leaf.name: grads.get(leaf.index, np.zeros_like(leaf.value)) for leaf in targets
    }

"""Layered networks with skip connections, convexity constraints and certifiers.

A network is a sequence of layers. Layer ``k`` (1-based) reads the feature
``z[k]`` (``z[1]`` is the input), optionally concatenates an earlier feature
in front of it, applies a weight operator, adds a bias and an optional
skip term ``A @ z[j]``, and finishes with an activation:

    z[k+1] = act(b + A z[j] + W C(z[i], z[k]))

Parameters live in a :class:`ParamSet` keyed ``"<layer>.<slot>"`` with slots
``W`` (weight), ``b`` (bias), ``A`` (skip operator) and, after batch-norm
finalization, ``mean`` / ``var``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import core
from .core import PadSpec, NO_PAD, GradTape, Var, value_of
from .core import nimg

WEIGHT_KINDS = ("identity", "conv", "dense", "diagonal")
ACTIVATIONS = ("identity", "relu", "maxpool", "batchnorm", "terminal")
BIAS_KINDS = ("none", "channel", "scalar")


class NotFinalizedError(RuntimeError):
    """Inference requested before batch-norm statistics were fixed."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    weight: str = "identity"
    activation: str = "identity"
    shape: Tuple[int, ...] = ()  # conv: f1,f2,cin,cout; dense: din,dout; diagonal: (c,)
    pad: PadSpec = NO_PAD
    upsample: bool = False  # frozen 2x nearest-neighbour enlargement before the weight op
    bias: str = "none"
    concat_from: Optional[int] = None
    skip_from: Optional[int] = None
    skip_shape: Tuple[int, ...] = ()
    bn_eps: float = 1e-5
    terminal: Optional[Tuple[float, float, float]] = None  # (a, p, q)

    def __post_init__(self):
        if self.weight not in WEIGHT_KINDS:
            raise ValueError(f"{self.name}: unknown weight kind {self.weight!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")
        if self.bias not in BIAS_KINDS:
            raise ValueError(f"{self.name}: unknown bias kind {self.bias!r}")
        if self.activation == "terminal" and self.terminal is None:
            raise ValueError(f"{self.name}: terminal activation needs (a, p, q)")
        if self.upsample and self.weight != "conv":
            raise ValueError(f"{self.name}: upsampling only precedes a convolution")

    @property
    def has_weight(self):
        return self.weight != "identity"


@dataclass(frozen=True)
class NetworkSpec:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, ...]

    def __post_init__(self):
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        for k, layer in enumerate(self.layers, start=1):
            for src in (layer.concat_from, layer.skip_from):
                if src is not None and not 1 <= src <= k:
                    raise ValueError(f"layer {k} ({layer.name}) references z[{src}]; allowed 1..{k}")
        object.__setattr__(self, "_shapes", _propagate_shapes(self))

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def feature_shapes(self) -> Tuple[Tuple[int, ...], ...]:
        """Per-sample shapes of z[1] .. z[L+1]."""
        return self._shapes

    @property
    def output_shape(self) -> Tuple[int, ...]:
        return self._shapes[-1]

    def layer_index(self, name: str) -> int:
        for k, layer in enumerate(self.layers, start=1):
            if layer.name == name:
                return k
        raise KeyError(name)

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        out = {}
        for k, layer in enumerate(self.layers, start=1):
            if layer.has_weight:
                out[f"{layer.name}.W"] = layer.shape
            if layer.bias == "channel":
                out[f"{layer.name}.b"] = (self._shapes[k][-1],)
            elif layer.bias == "scalar":
                out[f"{layer.name}.b"] = (1,)
            if layer.skip_from is not None:
                out[f"{layer.name}.A"] = layer.skip_shape
        return out

    def batchnorm_layers(self):
        return [layer for layer in self.layers if layer.activation == "batchnorm"]


def _propagate_shapes(net: NetworkSpec):
    shapes = [tuple(net.input_shape)]
    for k, layer in enumerate(net.layers, start=1):
        s = shapes[k - 1]
        if layer.concat_from is not None:
            other = shapes[layer.concat_from - 1]
            if other[:-1] != s[:-1]:
                raise core.ShapeError("concat", f"layer {layer.name} spatial mismatch", z=other, x=s)
            s = s[:-1] + (other[-1] + s[-1],)
        if layer.weight == "conv":
            f1, f2, cin, cout = layer.shape
            h, w, c = s
            if layer.upsample:
                h, w = 2 * h, 2 * w
            if c != cin:
                raise core.ShapeError("conv", f"layer {layer.name} channel mismatch", input_channels=c, kernel_channels=cin)
            s = (h + layer.pad.rows - f1 + 1, w + layer.pad.cols - f2 + 1, cout)
        elif layer.weight == "dense":
            din, dout = layer.shape
            if s != (din,):
                raise core.ShapeError("dense", f"layer {layer.name} input mismatch", input=s, weight=layer.shape)
            s = (dout,)
        elif layer.weight == "diagonal":
            if layer.shape != (s[-1],):
                raise core.ShapeError("diagonal", f"layer {layer.name} size mismatch", input=s, weight=layer.shape)
        if layer.skip_from is not None:
            src = shapes[layer.skip_from - 1]
            expect = _skip_out_shape(layer, src)
            if expect != s:
                raise core.ShapeError("skip", f"layer {layer.name} skip output mismatch", skip=expect, main=s)
        if layer.activation == "maxpool":
            if s[0] % 2 or s[1] % 2:
                raise core.ShapeError("maxpool2", f"layer {layer.name} needs even dims", shape=s)
            s = (s[0] // 2, s[1] // 2, s[2])
        elif layer.activation == "terminal":
            s = ()
        shapes.append(s)
    return tuple(shapes)


def _skip_out_shape(layer, src):
    if len(src) == 3:
        f1, f2, cin, cout = layer.skip_shape
        return (src[0] - f1 + 1 + 2 * (f1 // 2), src[1] - f2 + 1 + 2 * (f2 // 2), cout)
    din, dout = layer.skip_shape
    return (dout,)


# ---------------------------------------------------------------- parameters


@dataclass
class ParamSet:
    """Named tensors partitioned into free (trainable) and frozen entries."""

    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: frozenset = frozenset()

    def __post_init__(self):
        unknown = set(self.frozen) - set(self.tensors)
        if unknown:
            raise KeyError(f"frozen ids without tensors: {sorted(unknown)}")
        self.frozen = frozenset(self.frozen)

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @property
    def free_names(self):
        return [n for n in self.tensors if n not in self.frozen]

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.tensors.items()}, self.frozen)

    def update_free(self, updates: Mapping[str, np.ndarray]) -> None:
        for name, value in updates.items():
            if name in self.frozen:
                raise PermissionError(f"parameter {name!r} is frozen")
            self.tensors[name] = value

    def with_frozen(self, extra: Mapping[str, np.ndarray]) -> "ParamSet":
        tensors = dict(self.tensors)
        tensors.update(extra)
        return ParamSet(tensors, self.frozen | set(extra))

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def free_sq_norm(self) -> float:
        return float(sum(np.sum(self.tensors[n] ** 2) for n in self.free_names))


def init_params(net: NetworkSpec, rng: np.random.Generator) -> ParamSet:
    """Uniform(+-sqrt(1/fan_in)) weights, unit diagonals, zero biases."""
    tensors = {}
    for name, shape in net.param_shapes().items():
        slot = name.rsplit(".", 1)[1]
        if slot == "b":
            tensors[name] = np.zeros(shape)
        elif len(shape) == 1:
            tensors[name] = np.ones(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = np.sqrt(1.0 / fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ParamSet(tensors)


@dataclass(frozen=True)
class ConstraintPlan:
    """Parameter ids that must stay entrywise nonnegative."""

    nonnegative: Tuple[str, ...] = ()

    def __contains__(self, name):
        return name in self.nonnegative

    def __len__(self):
        return len(self.nonnegative)


def convexity_plan(net: NetworkSpec, extras: Iterable[str] = ()) -> ConstraintPlan:
    """Weights of layers 2..L and skip operators fed by z[j], j >= 2."""
    names = []
    for k, layer in enumerate(net.layers, start=1):
        if layer.has_weight and k >= 2:
            names.append(f"{layer.name}.W")
        if layer.skip_from is not None and layer.skip_from >= 2:
            names.append(f"{layer.name}.A")
    names.extend(e for e in extras if e not in names)
    return ConstraintPlan(tuple(names))


def project_convex(params: ParamSet, plan: ConstraintPlan) -> ParamSet:
    unknown = [n for n in plan.nonnegative if n not in params]
    if unknown:
        raise KeyError(f"constraint plan references unknown parameters: {unknown}")
    out = params.copy()
    for name in plan.nonnegative:
        out.tensors[name] = np.maximum(out.tensors[name], 0.0)
    return out


def plan_violation(params: ParamSet, plan: ConstraintPlan) -> float:
    """Most negative constrained entry (0.0 when feasible)."""
    worst = 0.0
    for name in plan.nonnegative:
        worst = min(worst, float(params[name].min()))
    return worst


# ---------------------------------------------------------------- evaluation


def _apply_layer(layer, zs, k, p, mode, stats):
    zin = zs[k - 1]
    zhat = zin if layer.concat_from is None else core.concat(zs[layer.concat_from - 1], zin)

    if layer.weight == "conv":
        if layer.upsample:
            zhat = core.upsample_nn(zhat)
        u = core.conv2d(zhat, p[f"{layer.name}.W"], layer.pad)
    elif layer.weight == "dense":
        u = core.dense(zhat, p[f"{layer.name}.W"])
    elif layer.weight == "diagonal":
        u = core.mul(zhat, p[f"{layer.name}.W"])
    else:
        u = zhat

    if layer.bias != "none":
        u = core.add(u, p[f"{layer.name}.b"])
    if layer.skip_from is not None:
        src = zs[layer.skip_from - 1]
        a = p[f"{layer.name}.A"]
        if value_of(src).ndim == 4:
            f1, f2 = value_of(a).shape[:2]
            skip = core.conv2d(src, a, PadSpec(f1 // 2, f1 // 2, f2 // 2, f2 // 2))
        else:
            skip = core.dense(src, a)
        u = core.add(u, skip)

    act = layer.activation
    if act == "relu":
        return core.relu(u)
    if act == "maxpool":
        return core.maxpool2(u)
    if act == "batchnorm":
        if mode == "train":
            out, mean, var = core.batch_normalize(u, layer.bn_eps)
            if stats is not None:
                stats[layer.name] = (mean, var)
            return out
        mean_key, var_key = f"{layer.name}.mean", f"{layer.name}.var"
        if mean_key not in p or var_key not in p:
            raise NotFinalizedError(f"batch-norm layer {layer.name!r} has no population statistics")
        return core.normalize_frozen(u, value_of(p[mean_key]), value_of(p[var_key]), layer.bn_eps)
    if act == "terminal":
        a, pw, qw = layer.terminal
        split = value_of(zs[0]).shape[-1]
        axes = tuple(range(1, value_of(u).ndim))
        head = core.abs_power(u[..., :split], pw, axis=axes)
        tail = core.abs_power(u[..., split:], qw, axis=axes)
        return core.add(core.mul(head, a), tail)
    return u


def forward(
    net: NetworkSpec,
    params,
    x,
    mode: str = "infer",
    tape: Optional[GradTape] = None,
    watch: Optional[Iterable[str]] = None,
    stats: Optional[dict] = None,
):
    """Evaluate the network on a single sample or a batch.

    With ``tape`` the input is tracked as leaf ``"x"`` and every parameter in
    ``watch`` (default: the free ones) under its own id. ``stats`` collects
    the batch statistics of each batch-norm layer in train mode.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    p = params.tensors if isinstance(params, ParamSet) else dict(params)
    xv = value_of(x)
    single = tuple(xv.shape) == tuple(net.input_shape)
    if not single and tuple(xv.shape[1:]) != tuple(net.input_shape):
        raise core.ShapeError("forward", "input does not match network", input=xv.shape, expected=net.input_shape)

    if tape is not None:
        if not isinstance(x, Var):
            x = tape.watch(xv, "x")
        names = params.free_names if (watch is None and isinstance(params, ParamSet)) else (watch or [])
        p = dict(p)
        for name in names:
            if not isinstance(p[name], Var):
                p[name] = tape.watch(p[name], name)

    z = core.reshape(x, (1,) + tuple(net.input_shape)) if single else x
    zs = [z]
    for k, layer in enumerate(net.layers, start=1):
        zs.append(_apply_layer(layer, zs, k, p, mode, stats))
    out = zs[-1]
    if single:
        out = core.reshape(out, tuple(net.output_shape))
    return out


def evaluate(net: NetworkSpec, params: ParamSet, xs: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Inference-mode outputs for a batch, evaluated in chunks."""
    outs = [forward(net, params, xs[i : i + chunk], "infer") for i in range(0, len(xs), chunk)]
    return np.concatenate(outs) if outs else np.zeros((0,) + tuple(net.output_shape))


def population_statistics(net: NetworkSpec, params: ParamSet, xs: np.ndarray, chunk: int = 20) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
    """Batch-norm statistics of a train-mode pass over all of ``xs`` at once.

    Runs layer by layer over the whole set in chunks, so the numbers match
    one full-batch forward while only the features still needed are held.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[1:] != tuple(net.input_shape):
        raise core.ShapeError("population_statistics", "input does not match network", input=xs.shape, expected=net.input_shape)
    last_use = {}
    for k, layer in enumerate(net.layers, start=1):
        for j in (k, layer.concat_from, layer.skip_from):
            if j is not None:
                last_use[j] = k
    p = dict(params.tensors)
    zs: Dict[int, np.ndarray] = {1: xs}
    stats = {}
    starts = range(0, len(xs), chunk)
    for k, layer in enumerate(net.layers, start=1):
        bn = layer.activation == "batchnorm"
        step = replace(layer, activation="identity") if bn else layer
        parts = []
        for s in starts:
            local = [zs.get(j, None) for j in range(1, k + 1)]
            local = [None if z is None else z[s : s + chunk] for z in local]
            parts.append(_apply_layer(step, local, k, p, "infer", None))
        z = np.concatenate(parts)
        if bn:
            axes = tuple(range(z.ndim - 1))
            mean, var = z.mean(axis=axes), z.var(axis=axes)
            stats[layer.name] = (mean, var)
            z = core.normalize_frozen(z, mean, var, layer.bn_eps)
        zs[k + 1] = z
        for j in [j for j in zs if last_use.get(j, 0) <= k]:
            del zs[j]
    return stats


# ---------------------------------------------------------------- uniform convexity


class Regularizer:
    """``R(x) = a * ||x||_p^p + ||net(x)||_q^q`` evaluated through a terminal layer."""

    def __init__(self, net: NetworkSpec, params: ParamSet, a: float, p: float, q: float):
        self.net = net
        self.params = params
        self.a = a
        self.p = p
        self.q = q

    @property
    def image_shape(self):
        return tuple(self.net.input_shape)

    def _as_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.image_shape:
            return x, True
        if x.size == int(np.prod(self.image_shape)) and x.ndim < len(self.image_shape) + 1:
            return x.reshape(self.image_shape), True
        return x.reshape((-1,) + self.image_shape), False

    def value(self, x):
        xin, single = self._as_input(x)
        out = forward(self.net, self.params, xin, "infer")
        return float(out) if single else out

    __call__ = value

    def value_and_grad(self, x):
        """``R(x)`` and one subgradient (ReLU kink slope 0), shaped like ``x``."""
        x = np.asarray(x, dtype=np.float64)
        xin, single = self._as_input(x)
        tape = GradTape()
        out = forward(self.net, self.params, xin, "infer", tape=tape, watch=())
        total = out if single else core.total(out)
        g = core.grad(tape, total, wrt=["x"])["x"]
        val = float(value_of(out)) if single else value_of(out)
        return val, g.reshape(x.shape)

    def subgrad(self, x):
        return self.value_and_grad(x)[1]


def terminal_layer(name: str, a: float, p: float, q: float) -> LayerSpec:
    return LayerSpec(name=name, activation="terminal", concat_from=1, terminal=(a, p, q))


def make_uniformly_convex(net_c: NetworkSpec, params: ParamSet, a: float, p: float = 2.0, q: float = 2.0) -> Regularizer:
    """Append the depth L+1 layer ``a||x||_p^p + ||z||_q^q`` acting on ``C(x, z)``."""
    if a <= 0:
        raise ValueError(f"a must be positive, got {a}")
    if p < 2:
        raise ValueError(f"p must be >= 2 for uniform convexity, got {p}")
    if q < 1:
        raise ValueError(f"q must be >= 1 for a monotone outer map, got {q}")
    if net_c.output_shape[:-1] != tuple(net_c.input_shape)[:-1]:
        raise core.ShapeError("make_uniformly_convex", "network output must match input layout",
                              input=net_c.input_shape, output=net_c.output_shape)
    uc = NetworkSpec(net_c.layers + (terminal_layer("uc", a, p, q),), net_c.input_shape)
    return Regularizer(uc, params, a, p, q)


# ---------------------------------------------------------------- certifiers


@dataclass
class ConvexityReport:
    trials: int
    violations: int
    worst: float  # largest amount by which the convexity inequality failed (<= 0 when none)
    witness: Optional[Tuple[np.ndarray, np.ndarray, float]] = None

    @property
    def passed(self) -> bool:
        return self.violations == 0


Sampler = Callable[[np.random.Generator, Tuple[int, ...], int], np.ndarray]


def range_sampler(max_value: float = 1.0, outlier_fraction: float = 0.1, outlier_scale: float = 10.0) -> Sampler:
    """Gaussian draws mapped into ``[0, 1.5 * max_value]`` plus wide-scale outliers.

    A standard normal ``g`` is sent to ``1.5 * max_value * clip((g + 3) / 6, 0, 1)``;
    a fraction of draws are instead ``outlier_scale * max_value * g`` (mixed sign).
    """
    hi = 1.5 * max_value

    def sample(rng, shape, count):
        g = rng.standard_normal((count,) + tuple(shape))
        out = hi * np.clip((g + 3.0) / 6.0, 0.0, 1.0)
        wide = rng.random(count) < outlier_fraction
        out[wide] = outlier_scale * max_value * g[wide]
        return out

    return sample


def check_componentwise_convex(
    net: NetworkSpec,
    params: ParamSet,
    trials: int = 1000,
    tol: float = 1e-9,
    sampler: Optional[Sampler] = None,
    seed: int = 0,
    chunk: int = 32,
) -> ConvexityReport:
    """Randomized midpoint test ``f(tx + (1-t)w) <= t f(x) + (1-t) f(w) + tol``."""
    sampler = sampler or range_sampler()
    rng = np.random.default_rng(seed)
    shape = tuple(net.input_shape)
    violations, worst, witness = 0, -np.inf, None
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        xs = sampler(rng, shape, m)
        ws = sampler(rng, shape, m)
        ts = rng.random(m)
        tb = ts.reshape((m,) + (1,) * len(shape))
        mids = tb * xs + (1 - tb) * ws
        fx, fw, fm = (forward(net, params, v, "infer") for v in (xs, ws, mids))
        tf = ts.reshape((m,) + (1,) * (fx.ndim - 1))
        gap = (fm - (tf * fx + (1 - tf) * fw)).reshape(m, -1)
        per_trial = gap.max(axis=1)
        violations += int(np.sum(per_trial > tol))
        i = int(np.argmax(per_trial))
        if per_trial[i] > worst:
            worst = float(per_trial[i])
            witness = (xs[i], ws[i], float(ts[i]))
        done += m
    return ConvexityReport(trials, violations, worst, witness)


def check_uniformly_convex(
    reg: Regularizer,
    a: float,
    trials: int = 1000,
    tol: float = 1e-9,
    sampler: Optional[Sampler] = None,
    seed: int = 0,
    chunk: int = 32,
) -> ConvexityReport:
    """Midpoint test with quadratic modulus ``a * t (1-t) ||x - xh||_2^2``."""
    if reg.p != 2:
        raise ValueError("the quadratic modulus is only exact for p = 2")
    sampler = sampler or range_sampler()
    rng = np.random.default_rng(seed)
    shape = reg.image_shape
    violations, worst, witness = 0, -np.inf, None
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        xs = sampler(rng, shape, m)
        hs = sampler(rng, shape, m)
        ts = rng.random(m)
        tb = ts.reshape((m,) + (1,) * len(shape))
        mids = tb * xs + (1 - tb) * hs
        rx, rh, rm = (np.atleast_1d(reg.value(v)) for v in (xs, hs, mids))
        dist2 = ((xs - hs) ** 2).reshape(m, -1).sum(axis=1)
        gap = rm - (ts * rx + (1 - ts) * rh - a * ts * (1 - ts) * dist2)
        violations += int(np.sum(gap > tol))
        i = int(np.argmax(gap))
        if gap[i] > worst:
            worst = float(gap[i])
            witness = (xs[i], hs[i], float(ts[i]))
        done += m
    return ConvexityReport(trials, violations, worst, witness)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"NCKP"
CKPT_VERSION = 1


def save_checkpoint(path, params: ParamSet) -> None:
    chunks = [CKPT_MAGIC, struct.pack("<BI", CKPT_VERSION, len(params))]
    for name, value in params.tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", name in params.frozen))
        chunks.append(nimg.encode(value))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> ParamSet:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise nimg.FormatError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", 0)
    if len(buf) < 9:
        raise nimg.FormatError("truncated checkpoint header", len(buf))
    version, count = struct.unpack_from("<BI", buf, 4)
    if version != CKPT_VERSION:
        raise nimg.FormatError(f"unsupported checkpoint version {version}", 4)
    pos = 9
    tensors, frozen = {}, set()
    for _ in range(count):
        if len(buf) < pos + 2:
            raise nimg.FormatError("truncated parameter entry", len(buf))
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        if len(buf) < pos + 1:
            raise nimg.FormatError("truncated parameter entry", len(buf))
        if buf[pos]:
            frozen.add(name)
        pos += 1
        tensors[name], pos = nimg.decode_from(buf, pos)
    if pos != len(buf):
        raise nimg.FormatError("trailing bytes after last parameter", pos)
    return ParamSet(tensors, frozenset(frozen))

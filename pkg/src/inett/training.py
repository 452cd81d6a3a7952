"""Residual-learning dataset, regularized loss, Adam and the projected training loop."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tomo
from .core import GradTape, grad, sub, total, value_of
from .network import ConstraintPlan, NetworkSpec, ParamSet, evaluate, forward, population_statistics, project_convex
from .tomo import ProjectionOperator

log = logging.getLogger(__name__)

ARTIFACT, CLEAN = "artifact", "clean"


@dataclass
class Sample:
    z: np.ndarray  # network input
    r: np.ndarray  # label |x* - z|
    kind: str
    noise_level: float = 0.0
    delta: float = 0.0
    sinogram: Optional[np.ndarray] = None


@dataclass
class Dataset:
    samples: List[Sample]
    train: List[int]
    val: List[int]
    test: List[int]

    def __post_init__(self):
        seen = sorted(self.train + self.val + self.test)
        if seen != list(range(len(self.samples))):
            raise ValueError("splits must be disjoint and cover every sample")

    def inputs(self, idx: Sequence[int]) -> np.ndarray:
        return np.stack([self.samples[i].z for i in idx])[..., None]

    def labels(self, idx: Sequence[int]) -> np.ndarray:
        return np.stack([self.samples[i].r for i in idx])[..., None]


def split_counts(count: int, fractions=(10, 2, 1)) -> Tuple[int, int, int]:
    """Train / validation / test sizes in the ratio 10:2:1, rounding into the training share."""
    whole = sum(fractions)
    val = count * fractions[1] // whole
    test = count * fractions[2] // whole
    return count - val - test, val, test


def build_dataset(phantoms: Sequence[np.ndarray], op: ProjectionOperator, N1: int, N2: int,
                  noise_range: Tuple[float, float] = (0.0, 0.10), seed: int = 0) -> Dataset:
    """The first ``N1`` phantoms become artifact samples, the last ``N2`` clean ones.

    Splits are drawn per kind so both kinds appear in every split.
    """
    if len(phantoms) != N1 + N2:
        raise ValueError(f"expected N1 + N2 = {N1 + N2} phantoms, got {len(phantoms)}")
    lo, hi = noise_range
    if not 0 <= lo <= hi:
        raise ValueError(f"bad noise range {noise_range}")
    rng = np.random.default_rng(seed)
    samples = []
    for x in phantoms[:N1]:
        level = float(rng.uniform(lo, hi))
        noisy = tomo.add_noise(tomo.apply(op, x), level, rng)
        z = tomo.pseudo_inverse(op, noisy.data)
        samples.append(Sample(z, np.abs(x - z), ARTIFACT, level, noisy.delta, noisy.data))
    for x in phantoms[N1:]:
        x = np.asarray(x, dtype=np.float64)
        samples.append(Sample(x.copy(), np.zeros_like(x), CLEAN))

    train, val, test = [], [], []
    for offset, count in ((0, N1), (N1, N2)):
        order = offset + rng.permutation(count)
        a, b, _ = split_counts(count)
        train += order[:a].tolist()
        val += order[a:a + b].tolist()
        test += order[a + b:].tolist()
    return Dataset(samples, sorted(train), sorted(val), sorted(test))


# ---------------------------------------------------------------- loss


def loss_batch(net: NetworkSpec, params: ParamSet, plan: ConstraintPlan, batch, lam: float,
               mode: str = "train") -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean squared residual over the batch plus ``lam * ||free params||^2``.

    ``batch`` is a pair ``(inputs, labels)`` of stacked arrays. ``plan`` is
    accepted for symmetry with ``train``; the loss itself is unconstrained.
    """
    inputs, labels = batch
    if len(inputs) == 0:
        raise ValueError("empty batch")
    tape = GradTape()
    out = forward(net, params, inputs, mode, tape=tape)
    diff = sub(out, labels)
    data = total(diff * diff) * (1.0 / len(inputs))
    free = params.free_names
    leaves = tape.leaves
    decay = None
    for name in free:
        v = leaves[name]
        term = total(v * v)
        decay = term if decay is None else decay + term
    loss = data if decay is None else data + decay * lam
    grads = grad(tape, loss, wrt=free)
    return float(value_of(loss)), grads


def validation_loss(net, params, ds: Dataset, lam: float, chunk: int = 20) -> float:
    """Loss on the validation split with batch-norm statistics of the whole split.

    Equal to one train-mode pass over the split, evaluated in chunks.
    """
    if not ds.val:
        return float("nan")
    frozen = finalize_bn(net, params, ds.inputs(ds.val), chunk)
    out = evaluate(net, frozen, ds.inputs(ds.val), chunk)
    d = out - ds.labels(ds.val)
    return float(np.sum(d * d) / len(ds.val) + lam * params.free_sq_norm())


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Bias-corrected Adam step; returns the new values of the updated tensors."""
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        out = {}
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            out[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# ---------------------------------------------------------------- training loop


@dataclass
class History:
    batches: List[Tuple[int, int, float]] = field(default_factory=list)  # epoch, batch, train loss
    epochs: List[Tuple[int, float]] = field(default_factory=list)  # epoch, validation loss
    permutations: List[np.ndarray] = field(default_factory=list)

    def epoch_train_loss(self, epoch: int) -> float:
        vals = [loss for e, _, loss in self.batches if e == epoch]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path) -> None:
        val = dict(self.epochs)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "batch", "train_loss", "val_loss"])
            last = {}
            for e, b, _ in self.batches:
                last[e] = b
            for e, b, loss in self.batches:
                w.writerow([e, b, repr(loss), repr(val[e]) if b == last[e] and e in val else ""])


def train(net: NetworkSpec, params: ParamSet, plan: ConstraintPlan, ds: Dataset, epochs: int,
          batch_size: int = 10, lr: float = 5e-4, lam: float = 5e-4, seed: int = 0,
          on_epoch: Optional[Callable[[int, ParamSet], None]] = None) -> Tuple[ParamSet, History]:
    """Mini-batch Adam on the free parameters, projecting onto the plan after every step."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    params = project_convex(params.copy(), plan)
    rng = np.random.default_rng(seed)
    adam = AdamState(lr=lr)
    history = History()
    train_idx = np.asarray(ds.train)
    for epoch in range(1, epochs + 1):
        perm = train_idx[rng.permutation(len(train_idx))]
        history.permutations.append(perm)
        for b, start in enumerate(range(0, len(perm), batch_size), start=1):
            idx = perm[start:start + batch_size]
            loss, grads = loss_batch(net, params, plan, (ds.inputs(idx), ds.labels(idx)), lam)
            params.update_free(adam.update(params.tensors, grads))
            params = project_convex(params, plan)
            history.batches.append((epoch, b, loss))
        val = validation_loss(net, params, ds, lam)
        history.epochs.append((epoch, val))
        log.info("epoch %d train %.6g val %.6g", epoch, history.epoch_train_loss(epoch), val)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params, history


def finalize_bn(net: NetworkSpec, params: ParamSet, inputs: np.ndarray, chunk: int = 20) -> ParamSet:
    """Freeze batch-norm statistics of the whole of ``inputs`` as frozen parameters."""
    stats = population_statistics(net, params, np.asarray(inputs, dtype=np.float64), chunk)
    frozen = {}
    for name, (mean, var) in stats.items():
        frozen[f"{name}.mean"] = np.asarray(mean, dtype=np.float64)
        frozen[f"{name}.var"] = np.asarray(var, dtype=np.float64)
    return params.with_frozen(frozen)


def per_sample_mse(net: NetworkSpec, params: ParamSet, ds: Dataset, idx: Sequence[int]) -> np.ndarray:
    """``(1/N) ||net(z_s) - r_s||^2`` for each sample in ``idx``."""
    if len(idx) == 0:
        return np.zeros(0)
    out = forward(net, params, ds.inputs(idx), "infer")
    d = (out - ds.labels(idx)).reshape(len(idx), -1)
    return np.mean(d * d, axis=1)

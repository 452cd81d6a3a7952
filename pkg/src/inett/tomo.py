"""Parallel-beam projection matrix, ART (Kaczmarz) and the measurement noise model.

Geometry: an ``n x n`` image with unit pixels centred on the origin, so it
covers ``[-n/2, n/2]^2``. Row ``r`` of the image sits at
``y = n/2 - r - 1/2``, column ``c`` at ``x = c - n/2 + 1/2``. The line with
detector offset ``s`` and angle ``phi`` is
``{(s cos phi - t sin phi, s sin phi + t cos phi) : t real}``. Sinograms
are stored ``n_det x n_views``; measurement ``i = det * n_views + view``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import scipy.sparse as sp

from .core.ops import ShapeError

_EPS = 1e-12


def ray_intersections(n: int, s: float, phi: float) -> Tuple[np.ndarray, np.ndarray]:
    """Pixels crossed by one line and the chord length inside each.

    Siddon-style traversal: every crossing with a grid line is a breakpoint;
    consecutive breakpoints bound a segment lying in a single pixel.
    """
    half = n / 2.0
    c, si = math.cos(phi), math.sin(phi)
    x0, y0 = s * c, s * si
    dx, dy = -si, c

    tlo, thi = -math.inf, math.inf
    for p0, d in ((x0, dx), (y0, dy)):
        if abs(d) < _EPS:
            if not -half <= p0 <= half:
                return np.empty(0, dtype=np.int64), np.empty(0)
        else:
            t1, t2 = (-half - p0) / d, (half - p0) / d
            tlo, thi = max(tlo, min(t1, t2)), min(thi, max(t1, t2))
    if not thi - tlo > _EPS:
        return np.empty(0, dtype=np.int64), np.empty(0)

    grid = np.arange(n + 1) - half
    ts = [np.array([tlo, thi])]
    if abs(dx) >= _EPS:
        ts.append((grid - x0) / dx)
    if abs(dy) >= _EPS:
        ts.append((grid - y0) / dy)
    t = np.concatenate(ts)
    t = np.unique(t[(t >= tlo) & (t <= thi)])
    lengths = np.diff(t)
    keep = lengths > _EPS
    tm = 0.5 * (t[:-1] + t[1:])[keep]
    lengths = lengths[keep]
    col = np.floor(x0 + tm * dx + half).astype(np.int64)
    row = np.floor(half - (y0 + tm * dy)).astype(np.int64)
    inside = (col >= 0) & (col < n) & (row >= 0) & (row < n)
    return (row * n + col)[inside], lengths[inside]


@dataclass(frozen=True, eq=False)
class ProjectionOperator:
    matrix: sp.csr_matrix  # M x N intersection lengths
    n: int
    n_det: int
    n_views: int
    offsets: np.ndarray
    angles: np.ndarray

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    @property
    def N(self) -> int:
        return self.matrix.shape[1]

    @property
    def sinogram_shape(self):
        return (self.n_det, self.n_views)

    @property
    def row_sq_norms(self) -> np.ndarray:
        m = self.matrix
        return np.asarray(m.multiply(m).sum(axis=1)).ravel()


def build_projector(n: int, n_det: int, n_views: int, det_spacing: Optional[float] = None) -> ProjectionOperator:
    """Projection matrix for ``n_views`` angles uniform on ``[0, pi)``.

    Detectors are centred on the origin; by default they span the image
    diagonal ``n * sqrt(2)``.
    """
    if min(n, n_det, n_views) < 1:
        raise ValueError("n, n_det and n_views must be >= 1")
    if det_spacing is None:
        det_spacing = n * math.sqrt(2.0) / n_det
    offsets = (np.arange(n_det) - (n_det - 1) / 2.0) * det_spacing
    angles = np.arange(n_views) * math.pi / n_views
    indptr, indices, data = [0], [], []
    for s in offsets:
        for phi in angles:
            idx, length = ray_intersections(n, float(s), float(phi))
            order = np.argsort(idx, kind="stable")
            indices.append(idx[order])
            data.append(length[order])
            indptr.append(indptr[-1] + len(idx))
    matrix = sp.csr_matrix(
        (np.concatenate(data), np.concatenate(indices), np.array(indptr)),
        shape=(n_det * n_views, n * n),
    )
    return ProjectionOperator(matrix, n, n_det, n_views, offsets, angles)


def apply(op: ProjectionOperator, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size != op.N:
        raise ShapeError("apply", "image size does not match operator", image=x.shape, pixels=op.N)
    return (op.matrix @ x.ravel()).reshape(op.sinogram_shape)


def apply_adjoint(op: ProjectionOperator, y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.size != op.M:
        raise ShapeError("apply_adjoint", "sinogram size does not match operator", sinogram=y.shape, rows=op.M)
    return (op.matrix.T @ y.ravel()).reshape(op.n, op.n)


def norm_Y(y) -> float:
    """Normalized data norm ``||y||_2 / sqrt(M)``."""
    y = np.asarray(y, dtype=np.float64)
    return float(np.linalg.norm(y.ravel()) / math.sqrt(y.size))


@dataclass
class Sinogram:
    data: np.ndarray
    delta: Optional[float] = None  # ||noise||_Y when known


def add_noise(y_clean, level: float, seed=None) -> Sinogram:
    """Relative Gaussian noise ``y_i (1 + level * g_i)``; records the exact noise norm."""
    if level < 0:
        raise ValueError(f"noise level must be nonnegative, got {level}")
    y = np.asarray(y_clean, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    g = rng.standard_normal(y.shape)
    noisy = y * (1.0 + level * g) if level > 0 else y.copy()
    return Sinogram(noisy, norm_Y(noisy - y))


def art_sweep(op: ProjectionOperator, y, x) -> np.ndarray:
    """One Kaczmarz pass over every measurement in order; empty rows are skipped."""
    m = op.matrix
    indptr, indices, data = m.indptr, m.indices, m.data
    norms = op.row_sq_norms
    yv = np.asarray(y, dtype=np.float64).ravel()
    xv = np.array(x, dtype=np.float64).ravel()
    for i in range(op.M):
        lo, hi = indptr[i], indptr[i + 1]
        if lo == hi or norms[i] == 0.0:
            continue
        idx = indices[lo:hi]
        a = data[lo:hi]
        xv[idx] += ((yv[i] - a @ xv[idx]) / norms[i]) * a
    return xv.reshape(np.shape(x))


def pseudo_inverse(op: ProjectionOperator, y, rounds: int = 5, x0=None) -> np.ndarray:
    """``rounds`` ART sweeps started from the constant image ``1/N``."""
    x = np.full((op.n, op.n), 1.0 / op.N) if x0 is None else np.array(x0, dtype=np.float64).reshape(op.n, op.n)
    for _ in range(rounds):
        x = art_sweep(op, y, x)
    return x

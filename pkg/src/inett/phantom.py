"""Random piecewise-constant ellipse phantoms and external image loading."""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from .core import nimg


@dataclass(frozen=True)
class EllipseSpec:
    cx: float
    cy: float
    ra: float
    rb: float
    angle: float
    value: float

    def __post_init__(self):
        if self.ra <= 0 or self.rb <= 0:
            raise ValueError(f"semi-axes must be positive, got {self.ra}, {self.rb}")


@dataclass(frozen=True)
class PhantomParams:
    """Sampling ranges for ellipse parameters (unit-disk coordinates)."""

    k_range: Tuple[int, int] = (3, 8)
    center_radius: float = 0.6
    axis_range: Tuple[float, float] = (0.05, 0.4)
    value_range: Tuple[float, float] = (0.2, 1.0)


def pixel_centers(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Coordinates in ``[-1, 1]`` of pixel centres; row 0 is the top (y = +1 side)."""
    c = -1.0 + (2 * np.arange(n) + 1) / n
    return c[None, :], -c[:, None]  # x varies along columns, y decreases down rows


def ellipse_mask(n: int, e: EllipseSpec) -> np.ndarray:
    x, y = pixel_centers(n)
    ca, sa = np.cos(e.angle), np.sin(e.angle)
    u = (x - e.cx) * ca + (y - e.cy) * sa
    v = -(x - e.cx) * sa + (y - e.cy) * ca
    return (u / e.ra) ** 2 + (v / e.rb) ** 2 <= 1.0


def rasterize(n: int, ellipses: Sequence[EllipseSpec], normalize: bool = True) -> np.ndarray:
    img = np.zeros((n, n))
    for e in ellipses:
        img[ellipse_mask(n, e)] += e.value
    img = np.maximum(img, 0.0)
    peak = img.max()
    if normalize and peak > 0:
        img /= peak
    return img


def random_ellipses(rng: np.random.Generator, params: PhantomParams = PhantomParams()) -> List[EllipseSpec]:
    lo, hi = params.k_range
    k = int(rng.integers(lo, hi + 1))
    out = []
    for _ in range(k):
        r = params.center_radius * np.sqrt(rng.random())
        theta = rng.uniform(0.0, 2 * np.pi)
        ra, rb = rng.uniform(*params.axis_range, size=2)
        out.append(EllipseSpec(r * np.cos(theta), r * np.sin(theta), ra, rb,
                               rng.uniform(0.0, np.pi), rng.uniform(*params.value_range)))
    return out


def random_phantom(n: int, k_range: Tuple[int, int] = (3, 8), seed=None, params: PhantomParams = None) -> np.ndarray:
    """Sum of ``k`` random ellipses, clipped at 0 and rescaled to peak 1."""
    if n < 1:
        raise ValueError("n must be >= 1")
    params = replace(params or PhantomParams(), k_range=tuple(k_range))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rasterize(n, random_ellipses(rng, params))


def phantom_seeds(master_seed: int, count: int) -> List[int]:
    """Per-sample seeds derived from one master seed."""
    ss = np.random.SeedSequence(master_seed)
    return [int(child.generate_state(1, dtype=np.uint64)[0]) for child in ss.spawn(count)]


def phantom_set(n: int, count: int, master_seed: int, k_range=(3, 8)) -> List[np.ndarray]:
    return [random_phantom(n, k_range, seed) for seed in phantom_seeds(master_seed, count)]


def load_image(path) -> np.ndarray:
    """Load an NIMG tensor or an 8-bit P5 PGM as an image with values in ``[0, 1]``."""
    path = Path(path)
    head = path.read_bytes()[:4]
    if head == nimg.MAGIC:
        img = nimg.load(path)
        if img.ndim == 3 and img.shape[-1] == 1:
            img = img[..., 0]
        lo, hi = float(img.min()), float(img.max())
        if lo < 0.0 or hi > 1.0:
            img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
        return img
    if head[:2] == b"P5":
        return nimg.load_pgm(path)
    raise nimg.FormatError(f"unrecognized image magic {head!r}, expected {nimg.MAGIC!r} or b'P5'", 0)

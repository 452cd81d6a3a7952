import math

import numpy as np
import pytest

from inett import tomo
from inett.core import ShapeError
from inett.phantom import EllipseSpec, rasterize
from oracles import radon_matrix

RNG = np.random.default_rng(11)


def test_axis_aligned_ray_crosses_each_pixel_once():
    n = 6
    # phi = pi/2: the line is horizontal at height s; s = 0.5 runs through the middle of row 2
    idx, lengths = tomo.ray_intersections(n, 0.5, math.pi / 2)
    assert sorted(idx.tolist()) == [2 * n + c for c in range(n)]
    np.testing.assert_allclose(lengths, 1.0)
    idx, lengths = tomo.ray_intersections(n, -1.5, 0.0)
    assert sorted(idx.tolist()) == [r * n + 1 for r in range(n)]
    np.testing.assert_allclose(lengths, 1.0)


def test_missing_ray_is_empty():
    idx, lengths = tomo.ray_intersections(4, 10.0, 0.3)
    assert idx.size == 0 and lengths.size == 0


def test_desk_and_paper_row_counts():
    assert tomo.build_projector(64, 64, 30).M == 1920
    op = tomo.build_projector(8, 256, 60)
    assert op.M == 15360


@pytest.mark.parametrize("n,n_det,n_views", [(8, 8, 5), (7, 9, 4), (6, 12, 7)])
def test_projector_matches_dense_clipping_oracle(n, n_det, n_views):
    op = tomo.build_projector(n, n_det, n_views)
    A = radon_matrix(n, op.offsets, op.angles)
    assert np.max(np.abs(op.matrix.toarray() - A)) < 1e-12
    x = RNG.random((n, n))
    assert np.max(np.abs(tomo.apply(op, x).ravel() - A @ x.ravel())) < 1e-12


def test_operator_invariants():
    n = 16
    op = tomo.build_projector(n, 20, 9)
    assert op.matrix.data.min() >= 0.0
    assert np.diff(op.matrix.indptr).max() <= 2 * n
    x = RNG.random((n, n))
    assert tomo.apply(op, x).min() >= 0.0
    np.testing.assert_array_equal(tomo.apply(op, np.zeros((n, n))), 0.0)


def test_adjoint_identity():
    op = tomo.build_projector(16, 20, 9)
    for _ in range(5):
        x = RNG.standard_normal((16, 16))
        y = RNG.standard_normal(op.sinogram_shape)
        lhs = np.sum(tomo.apply(op, x) * y)
        rhs = np.sum(x * tomo.apply_adjoint(op, y))
        assert abs(lhs - rhs) < 1e-10


def test_dimension_errors():
    op = tomo.build_projector(8, 8, 4)
    with pytest.raises(ShapeError):
        tomo.apply(op, np.ones((9, 9)))
    with pytest.raises(ShapeError):
        tomo.apply_adjoint(op, np.ones(5))
    with pytest.raises(ValueError):
        tomo.build_projector(0, 4, 4)


def test_centered_disk_matches_chord_lengths():
    n, n_det, n_views = 64, 64, 30
    R = 0.6
    op = tomo.build_projector(n, n_det, n_views)
    disk = rasterize(n, [EllipseSpec(0.0, 0.0, R, R, 0.0, 1.0)])
    sino = tomo.apply(op, disk)
    r_pix = R * n / 2
    s = op.offsets[:, None]
    analytic = np.broadcast_to(2 * np.sqrt(np.maximum(r_pix**2 - s**2, 0.0)), sino.shape)
    rel = np.linalg.norm(sino - analytic) / np.linalg.norm(analytic)
    assert rel < 0.02, rel


def test_mass_consistency_for_axis_aligned_views():
    n = 32
    op = tomo.build_projector(n, n, 2, det_spacing=1.0)
    x = RNG.random((n, n))
    sino = tomo.apply(op, x)
    for v in range(2):
        assert abs(sino[:, v].sum() - x.sum()) / x.sum() < 0.01


def test_norm_Y():
    assert tomo.norm_Y(np.ones(1920)) == 1.0
    y = RNG.standard_normal(1920)
    assert math.isclose(tomo.norm_Y(-3 * y), 3 * tomo.norm_Y(y))
    assert math.isclose(tomo.norm_Y(y), np.linalg.norm(y) / math.sqrt(1920))


def test_add_noise_contract():
    y = RNG.random((64, 30)) + 1.0
    s0 = tomo.add_noise(y, 0.0, seed=0)
    assert s0.delta == 0.0
    np.testing.assert_array_equal(s0.data, y)
    s = tomo.add_noise(y, 0.05, seed=1)
    assert math.isclose(s.delta, tomo.norm_Y(s.data - y))
    big = tomo.add_noise(np.ones(200_000), 0.05, seed=2)
    assert abs(np.std(big.data - 1.0) / 0.05 - 1.0) < 0.1
    again = tomo.add_noise(y, 0.05, seed=1)
    assert again.data.tobytes() == s.data.tobytes()
    with pytest.raises(ValueError):
        tomo.add_noise(y, -0.1)


def test_single_kaczmarz_update_lands_on_hyperplane():
    op = tomo.build_projector(4, 1, 1)
    a = op.matrix.toarray()[0]
    x = RNG.standard_normal((4, 4))
    y = np.array([[3.0]])
    out = tomo.art_sweep(op, y, x)
    assert abs(a @ out.ravel() - 3.0) < 1e-12
    # the move is along a only
    d = out.ravel() - x.ravel()
    assert np.linalg.norm(d - (d @ a) / (a @ a) * a) < 1e-12


def test_kaczmarz_converges_on_consistent_system():
    n = 16
    op = tomo.build_projector(n, 32, 32)
    assert op.M > op.N
    x_true = rasterize(n, [EllipseSpec(0.1, -0.2, 0.5, 0.3, 0.4, 1.0), EllipseSpec(-0.3, 0.2, 0.2, 0.2, 0.0, 0.5)])
    y = tomo.apply(op, x_true)
    x = np.full((n, n), 1.0 / op.N)
    errors = [np.linalg.norm(x - x_true)]
    for sweep in range(500):
        x = tomo.art_sweep(op, y, x)
        errors.append(np.linalg.norm(x - x_true))
        if tomo.norm_Y(tomo.apply(op, x) - y) < 1e-6:
            break
    assert tomo.norm_Y(tomo.apply(op, x) - y) < 1e-6
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))


def test_pseudo_inverse_defaults():
    op = tomo.build_projector(8, 8, 4)
    y = tomo.apply(op, RNG.random((8, 8)))
    x = np.full((8, 8), 1 / 64)
    for _ in range(5):
        x = tomo.art_sweep(op, y, x)
    np.testing.assert_array_equal(tomo.pseudo_inverse(op, y), x)


def test_art_skips_empty_rows():
    op = tomo.build_projector(4, 9, 2, det_spacing=2.0)
    assert (op.row_sq_norms == 0).any()
    x = tomo.pseudo_inverse(op, np.ones(op.sinogram_shape))
    assert np.all(np.isfinite(x))

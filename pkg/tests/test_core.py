import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from inett import core
from inett.core import GradTape, PadSpec, ShapeError, grad, nimg, value_of
from oracles import central_fd, conv_matrix

RNG = np.random.default_rng(1234)
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def _grad_of(fn, *inputs):
    tape = GradTape()
    leaves = [tape.watch(np.array(v, dtype=np.float64), f"in{i}") for i, v in enumerate(inputs)]
    out = fn(*leaves)
    return grad(tape, out)


def _check_fd(fn, *inputs, tol=1e-6):
    """Autodiff gradient of a scalar fn against central differences for every input."""
    g = _grad_of(fn, *inputs)
    for i, v in enumerate(inputs):
        def f(x, i=i):
            args = list(inputs)
            args[i] = x
            return float(value_of(fn(*args)))
        fd = central_fd(f, v)
        err = np.max(np.abs(g[f"in{i}"] - fd) / (1 + np.abs(fd)))
        assert err < tol, f"input {i}: {err}"


# ---------------------------------------------------------------- conv2d


def test_conv_unit_kernel_is_identity():
    x = RNG.standard_normal((3, 3, 1))
    out = core.conv2d(x, np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(out, x)


def test_conv_ones_hand_values():
    out = core.conv2d(np.ones((4, 4, 1)), np.ones((3, 3, 1, 1)), PadSpec.same(1))[..., 0]
    assert out.shape == (4, 4)
    assert out[0, 0] == 4 and out[0, 3] == 4 and out[3, 3] == 4
    assert out[0, 1] == 6 and out[2, 0] == 6
    assert out[1, 1] == 9 and out[2, 2] == 9


@pytest.mark.parametrize("pad", [PadSpec(), PadSpec.same(1), PadSpec(0, 1, 0, 1)])
def test_conv_matches_dense_operator(pad):
    x = RNG.standard_normal((8, 8, 2))
    k = RNG.standard_normal((3, 3, 2, 4)) if pad != PadSpec(0, 1, 0, 1) else RNG.standard_normal((2, 2, 2, 4))
    A = conv_matrix(8, 8, k, (pad.top, pad.bottom, pad.left, pad.right))
    out = core.conv2d(x, k, pad)
    assert np.max(np.abs(out.ravel() - A @ x.ravel())) < 1e-12


def test_conv_stride_two():
    x = RNG.standard_normal((6, 6, 1))
    k = RNG.standard_normal((2, 2, 1, 1))
    full = core.conv2d(x, k)
    np.testing.assert_allclose(core.conv2d(x, k, stride=2), full[::2, ::2], atol=1e-14)


def test_conv_shape_errors():
    with pytest.raises(ShapeError) as exc:
        core.conv2d(np.ones((4, 4, 2)), np.ones((3, 3, 3, 1)))
    assert exc.value.dims == {"input_channels": 2, "kernel_channels": 3}
    with pytest.raises(ShapeError, match="integral"):
        core.conv2d(np.ones((6, 6, 1)), np.ones((3, 3, 1, 1)), stride=2)
    with pytest.raises(ShapeError, match="smaller"):
        core.conv2d(np.ones((2, 2, 1)), np.ones((3, 3, 1, 1)))


def test_conv_batch_equals_per_sample():
    xs = RNG.standard_normal((3, 5, 5, 2))
    k = RNG.standard_normal((3, 3, 2, 3))
    batch = core.conv2d(xs, k, PadSpec.same(1))
    for i in range(3):
        np.testing.assert_allclose(batch[i], core.conv2d(xs[i], k, PadSpec.same(1)), atol=1e-13)


# ---------------------------------------------------------------- pad / relu / pool / upsample / concat


def test_zero_pad():
    out = core.zero_pad(np.ones((1, 1, 1)), PadSpec.same(1))[..., 0]
    expected = np.zeros((3, 3))
    expected[1, 1] = 1
    np.testing.assert_array_equal(out, expected)
    x = RNG.standard_normal((4, 3, 2))
    np.testing.assert_array_equal(core.zero_pad(x, PadSpec()), x)
    out = core.zero_pad(x, PadSpec(1, 2, 0, 3))
    assert out.shape == (7, 6, 2)
    assert np.isclose(out.sum(), x.sum())
    np.testing.assert_array_equal(out[1:5, 0:3], x)


def test_relu_examples():
    np.testing.assert_array_equal(core.relu(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    x = np.abs(RNG.standard_normal(10))
    np.testing.assert_array_equal(core.relu(x), x)
    x = RNG.standard_normal(50)
    np.testing.assert_array_equal(core.relu(x) - core.relu(-x), x)


def test_maxpool_examples():
    assert core.maxpool2(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])[0, 0, 0] == 4
    np.testing.assert_array_equal(core.maxpool2(np.full((4, 6, 2), 2.5)), np.full((2, 3, 2), 2.5))
    x = RNG.standard_normal((6, 8, 3))
    avg = x.reshape(3, 2, 4, 2, 3).mean(axis=(1, 3))
    assert np.all(core.maxpool2(x) >= avg)
    with pytest.raises(ShapeError):
        core.maxpool2(np.ones((3, 4, 1)))


def test_maxpool_tie_goes_to_first_entry():
    tape = GradTape()
    x = tape.watch(np.ones((2, 2, 1)), "x")
    g = grad(tape, core.total(core.maxpool2(x)))["x"][..., 0]
    np.testing.assert_array_equal(g, [[1, 0], [0, 0]])


def test_upsample_examples():
    np.testing.assert_array_equal(core.upsample_nn(np.ones((1, 1, 1)))[..., 0], np.ones((2, 2)))
    x = RNG.standard_normal((3, 4, 2))
    up = core.upsample_nn(x)
    assert up.shape == (6, 8, 2)
    np.testing.assert_array_equal(core.maxpool2(up), x)
    assert np.isclose(up.sum(), 4 * x.sum())


def test_concat_examples():
    np.testing.assert_array_equal(core.concat(np.array([1.0, 2.0]), np.array([3.0])), [1, 2, 3])
    x = RNG.standard_normal((3, 3, 2))
    np.testing.assert_array_equal(core.concat(x, np.zeros((3, 3, 0))), x)
    z = RNG.standard_normal((3, 3, 4))
    out = core.concat(z, x)
    assert out.shape == (3, 3, 6)
    np.testing.assert_array_equal(out[..., :4], z)
    np.testing.assert_array_equal(out[..., 4:], x)
    with pytest.raises(ShapeError):
        core.concat(np.ones((2, 2, 1)), np.ones((3, 3, 1)))


# ---------------------------------------------------------------- batch norm


def test_batchnorm_train_identical_batch_is_zero():
    # statistics are per channel over batch and space, so the shared sample is channel-constant
    x = np.broadcast_to(RNG.standard_normal(3), (4, 4, 3))
    out, mean, var = core.batchnorm_train([x, x, x], np.ones(3), np.zeros(3))
    np.testing.assert_array_equal(var, 0.0)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_batchnorm_statistics_span_batch_and_space():
    batch = RNG.standard_normal((3, 4, 4, 2))
    _, mean, var = core.batchnorm_train(batch, np.ones(2), np.zeros(2))
    np.testing.assert_allclose(mean, batch.reshape(-1, 2).mean(axis=0))
    np.testing.assert_allclose(var, batch.reshape(-1, 2).var(axis=0))


def test_batchnorm_train_zero_gamma_gives_beta():
    batch = [RNG.standard_normal((4, 4, 2)) for _ in range(3)]
    beta = np.array([0.5, -2.0])
    out, _, _ = core.batchnorm_train(batch, np.zeros(2), beta)
    np.testing.assert_array_equal(out, np.broadcast_to(beta, (3, 4, 4, 2)))


def test_batchnorm_train_output_statistics():
    batch = 3.0 + 2.0 * RNG.standard_normal((8, 5, 5, 3))
    gamma, beta, eps = np.array([1.0, 2.0, 0.5]), np.array([0.0, 1.0, -1.0]), 1e-5
    out, mean, var = core.batchnorm_train(list(batch), gamma, beta, eps)
    np.testing.assert_allclose(mean, batch.mean(axis=(0, 1, 2)))
    np.testing.assert_allclose(var, batch.var(axis=(0, 1, 2)))
    np.testing.assert_allclose(out.mean(axis=(0, 1, 2)), beta, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 1, 2)), gamma**2 * var / (var + eps), rtol=1e-10)


def test_batchnorm_train_empty_batch():
    with pytest.raises(ValueError):
        core.batchnorm_train([], np.ones(1), np.zeros(1))


def test_batchnorm_infer_identity_and_affine():
    eps = 1e-5
    u = RNG.standard_normal((4, 4, 2))
    out = core.batchnorm_infer(u, np.ones(2), np.zeros(2), np.zeros(2), np.full(2, 1 - eps), eps)
    np.testing.assert_allclose(out, u, atol=1e-15)
    gamma, beta = RNG.random(2), RNG.standard_normal(2)
    mean, var = RNG.standard_normal(2), RNG.random(2) + 0.1
    v = RNG.standard_normal((4, 4, 2))
    t = RNG.random()
    bn = lambda w: core.batchnorm_infer(w, gamma, beta, mean, var, eps)
    assert np.max(np.abs(bn(t * u + (1 - t) * v) - (t * bn(u) + (1 - t) * bn(v)))) < 1e-12


def test_batchnorm_infer_monotone_for_nonnegative_gamma():
    gamma, beta = RNG.random(3), RNG.standard_normal(3)
    mean, var = RNG.standard_normal(3), RNG.random(3) + 0.1
    for _ in range(20):
        u = RNG.standard_normal((3, 3, 3))
        v = u + RNG.random((3, 3, 3))
        assert np.all(core.batchnorm_infer(u, gamma, beta, mean, var) <= core.batchnorm_infer(v, gamma, beta, mean, var))


# ---------------------------------------------------------------- linearity, convexity, monotonicity


@pytest.mark.parametrize("op", [
    lambda x: core.conv2d(x, np.linspace(-1, 1, 18).reshape(3, 3, 2, 1), PadSpec.same(1)),
    lambda x: core.zero_pad(x, PadSpec(1, 0, 2, 1)),
    core.upsample_nn,
    lambda x: core.concat(x, 2 * x),
])
def test_linear_ops(op):
    u, v = RNG.standard_normal((2, 4, 4, 2))
    t = RNG.random()
    assert np.max(np.abs(op(t * u + (1 - t) * v) - (t * op(u) + (1 - t) * op(v)))) < 1e-12


@pytest.mark.parametrize("op", [core.relu, core.maxpool2])
def test_convex_monotone_ops(op):
    for _ in range(50):
        u, v = RNG.standard_normal((2, 4, 4, 2))
        t = RNG.random()
        assert np.all(op(t * u + (1 - t) * v) <= t * op(u) + (1 - t) * op(v) + 1e-15)
        w = u + RNG.random(u.shape)
        assert np.all(op(u) <= op(w))


# ---------------------------------------------------------------- gradients


def test_grad_squared_norm():
    x = RNG.standard_normal((3, 4))
    g = _grad_of(lambda v: core.total(v * v), x)["in0"]
    np.testing.assert_allclose(g, 2 * x)


def test_grad_relu_sum_is_indicator():
    x = RNG.standard_normal(20)
    g = _grad_of(lambda v: core.total(core.relu(v)), x)["in0"]
    np.testing.assert_array_equal(g, (x > 0).astype(float))


def test_relu_kink_gradient_is_zero():
    g = _grad_of(lambda v: core.total(core.relu(v)), np.zeros(3))["in0"]
    np.testing.assert_array_equal(g, 0.0)


def test_grad_errors():
    tape = GradTape()
    x = tape.watch(np.ones(3), "x")
    y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        grad(tape, y)
    with pytest.raises(KeyError):
        grad(tape, core.total(y), wrt=["missing"])
    with pytest.raises(ValueError):
        tape.watch(np.ones(1), "x")
    other = GradTape()
    z = other.watch(np.ones(2), "z")
    with pytest.raises(ValueError):
        grad(tape, core.total(z))


def test_unused_leaf_gets_zero_gradient():
    tape = GradTape()
    x = tape.watch(np.ones(3), "x")
    w = tape.watch(np.ones((2, 2)), "w")
    g = grad(tape, core.total(x * x))
    np.testing.assert_array_equal(g["w"], np.zeros((2, 2)))


GRAD_CASES = {
    "conv_pad": (lambda x, k: core.abs_power(core.conv2d(x, k, PadSpec(1, 0, 0, 1)), 2),
                 (RNG.standard_normal((5, 4, 2)), RNG.standard_normal((2, 3, 2, 3)))),
    "conv_stride": (lambda x, k: core.abs_power(core.conv2d(x, k, stride=2), 2),
                    (RNG.standard_normal((2, 5, 5, 1)), RNG.standard_normal((3, 3, 1, 2)))),
    "maxpool": (lambda x: core.abs_power(core.maxpool2(x), 2), (RNG.standard_normal((4, 6, 2)),)),
    "upsample": (lambda x: core.abs_power(core.upsample_nn(x), 3), (RNG.standard_normal((2, 3, 2)),)),
    "concat": (lambda a, b: core.total(core.mul(core.concat(a, b), np.arange(15.0).reshape(3, 5))),
               (RNG.standard_normal((3, 2)), RNG.standard_normal((3, 3)))),
    "batchnorm": (lambda u, g, b: core.abs_power(core.batchnorm_train(u, g, b)[0] * np.linspace(0.5, 2, 3), 3),
                  (RNG.standard_normal((4, 3, 3, 3)), RNG.random(3) + 0.5, RNG.standard_normal(3))),
    "normalize_frozen": (lambda u: core.abs_power(core.normalize_frozen(u, np.array([0.3]), np.array([2.0])), 2),
                         (RNG.standard_normal((3, 3, 1)),)),
    "dense": (lambda x, w: core.abs_power(core.dense(x, w), 2), (RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2)))),
    "relu_away_from_kink": (lambda x: core.total(core.relu(x) * x), (RNG.standard_normal(10) + 0.1,)),
    "broadcast_arith": (lambda a, b: core.total(core.mul(core.sub(a, b), core.add(a, b))),
                        (RNG.standard_normal((3, 4)), RNG.standard_normal(4))),
    "getitem_reshape": (lambda x: core.abs_power(core.reshape(x[1:, ::2], (-1,)), 2),
                        (RNG.standard_normal((3, 4)),)),
    "abs_power_axis": (lambda x: core.total(core.abs_power(x, 1.5, axis=1)), (RNG.standard_normal((3, 4)) + 3,)),
    "dot": (lambda a, b: core.dot(a, b), (RNG.standard_normal(5), RNG.standard_normal(5))),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradient_matches_finite_differences(name):
    fn, inputs = GRAD_CASES[name]
    _check_fd(fn, *inputs)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 4)), elements=finite))
def test_total_gradient_is_ones(x):
    g = _grad_of(core.total, x)["in0"]
    np.testing.assert_array_equal(g, np.ones_like(x))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3)), elements=finite))
def test_upsample_then_pool_roundtrip(x):
    np.testing.assert_array_equal(core.maxpool2(core.upsample_nn(x)), x)


# ---------------------------------------------------------------- NIMG / PGM


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple),
              elements=st.floats(allow_nan=False)))
def test_nimg_roundtrip_bit_exact(a):
    back, end = nimg.decode_from(nimg.encode(a))
    assert back.shape == a.shape
    assert back.tobytes() == a.tobytes()


def test_nimg_layout():
    buf = nimg.encode(np.array([[1.0, 2.0, 3.0]]))
    assert buf[:4] == b"NIMG" and buf[4] == 1 and buf[5] == 2
    assert int.from_bytes(buf[6:10], "little") == 1 and int.from_bytes(buf[10:14], "little") == 3
    assert np.frombuffer(buf[14:], "<f8").tolist() == [1.0, 2.0, 3.0]
    stream = io.BytesIO()
    nimg.write_to(stream, np.ones(2))
    assert stream.getvalue() == nimg.encode(np.ones(2))


def test_nimg_errors_carry_offsets():
    good = nimg.encode(np.ones((2, 2)))
    with pytest.raises(nimg.FormatError) as exc:
        nimg.decode_from(b"XIMG" + good[4:])
    assert exc.value.offset == 0 and "NIMG" in str(exc.value)
    with pytest.raises(nimg.FormatError) as exc:
        nimg.decode_from(good[:-3])
    assert exc.value.offset > 0
    with pytest.raises(nimg.FormatError):
        nimg.decode_from(good[:4] + bytes([9]) + good[5:])


def test_pgm_roundtrip_within_quantization(tmp_path):
    img = RNG.random((7, 5))
    nimg.save_pgm(tmp_path / "a.pgm", img, 0.0, 1.0)
    back = nimg.load_pgm(tmp_path / "a.pgm")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_pgm_bad_magic(tmp_path):
    (tmp_path / "bad.pgm").write_bytes(b"P2\n1 1\n255\n\x00")
    with pytest.raises(nimg.FormatError, match="P5"):
        nimg.load_pgm(tmp_path / "bad.pgm")

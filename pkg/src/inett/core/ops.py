"""Differentiable tensor operations on channel-last float64 arrays.

Image tensors are ``H x W x C`` for a single sample or ``N x H x W x C`` for
a batch. Every op accepts plain arrays or :class:`~inett.core.tape.Var` and
only records onto a tape when one of its inputs is tracked.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tape import value_of, wrap


class ShapeError(ValueError):
    """Incompatible operand shapes."""

    def __init__(self, op, message, **dims):
        self.op = op
        self.dims = dims
        detail = ", ".join(f"{k}={v}" for k, v in dims.items())
        super().__init__(f"{op}: {message}" + (f" ({detail})" if detail else ""))


@dataclass(frozen=True)
class PadSpec:
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    def __post_init__(self):
        if min(self.top, self.bottom, self.left, self.right) < 0:
            raise ValueError(f"pad widths must be nonnegative: {self}")

    @classmethod
    def same(cls, width: int) -> "PadSpec":
        return cls(width, width, width, width)

    @property
    def rows(self):
        return self.top + self.bottom

    @property
    def cols(self):
        return self.left + self.right


NO_PAD = PadSpec()


def _as_batch(x):
    """View a single H x W x C sample as a batch of one."""
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError("image op", "expected H x W x C or N x H x W x C", shape=x.shape)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            _unbroadcast(g, sb) if needs[1] else None,
        )

    return wrap(out, (a, b), vjp)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g, needs):
        return (
            _unbroadcast(g, sa) if needs[0] else None,
            -_unbroadcast(g, sb) if needs[1] else None,
        )

    return wrap(out, (a, b), vjp)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g, needs):
        return (
            _unbroadcast(g * bv, sa) if needs[0] else None,
            _unbroadcast(g * av, sb) if needs[1] else None,
        )

    return wrap(out, (a, b), vjp)


def getitem(x, key):
    xv = value_of(x)
    out = xv[key]

    def vjp(g, needs):
        gx = np.zeros_like(xv)
        gx[key] = g  # basic slicing only: no repeated indices
        return (gx,)

    return wrap(out, (x,), vjp)


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    return wrap(out, (x,), lambda g, needs: (g.reshape(xv.shape),))


def total(x, axis=None):
    """Sum over ``axis`` (all entries by default)."""
    xv = value_of(x)
    out = np.asarray(xv.sum(axis=axis))

    def vjp(g, needs):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy(),)

    return wrap(out, (x,), vjp)


def dot(a, b):
    """Full contraction ``sum(a * b)``."""
    return total(mul(a, b))


def abs_power(x, p: float, axis=None):
    """``sum |x|**p`` over ``axis``."""
    xv = value_of(x)
    ax = np.abs(xv)
    out = np.asarray((ax**p).sum(axis=axis))

    def vjp(g, needs):
        if p == 2:
            d = 2.0 * xv
        elif p == 1:
            d = np.sign(xv)
        else:
            d = p * np.sign(xv) * ax ** (p - 1)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * d,)

    return wrap(out, (x,), vjp)


def relu(x):
    xv = value_of(x)
    mask = xv > 0
    out = np.where(mask, xv, 0.0)
    # derivative at the kink is taken as 0
    return wrap(out, (x,), lambda g, needs: (g * mask,))


def dense(x, w):
    """Row-vector map ``x @ w`` for ``x`` of shape ``N x D``."""
    xv, wv = value_of(x), value_of(w)
    if xv.shape[-1] != wv.shape[0]:
        raise ShapeError("dense", "inner dimensions differ", x=xv.shape, w=wv.shape)
    out = xv @ wv

    def vjp(g, needs):
        return (
            g @ wv.T if needs[0] else None,
            xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if needs[1] else None,
        )

    return wrap(out, (x, w), vjp)


# ---------------------------------------------------------------- spatial


def zero_pad(x, pad: PadSpec):
    xv = value_of(x)
    if pad == NO_PAD:
        return x
    xb, single = _as_batch(xv)
    n, h, w, c = xb.shape
    out = np.zeros((n, h + pad.rows, w + pad.cols, c))
    out[:, pad.top : pad.top + h, pad.left : pad.left + w, :] = xb
    if single:
        out = out[0]

    def vjp(g, needs):
        gb = g[None] if single else g
        gx = gb[:, pad.top : pad.top + h, pad.left : pad.left + w, :]
        return (gx[0] if single else gx,)

    return wrap(out, (x,), vjp)


def conv2d(x, kernel, pad: PadSpec = NO_PAD, stride: int = 1):
    """Zero-padded cross-correlation with an ``f1 x f2 x Cin x Cout`` kernel."""
    xv, kv = value_of(x), value_of(kernel)
    xb, single = _as_batch(xv)
    if kv.ndim != 4:
        raise ShapeError("conv2d", "kernel must be f1 x f2 x Cin x Cout", kernel=kv.shape)
    f1, f2, cin, cout = kv.shape
    n, h, w, c = xb.shape
    if c != cin:
        raise ShapeError("conv2d", "kernel input channels differ from input", input_channels=c, kernel_channels=cin)
    hp, wp = h + pad.rows, w + pad.cols
    if hp < f1 or wp < f2:
        raise ShapeError("conv2d", "padded input smaller than kernel", padded=(hp, wp), kernel=(f1, f2))
    if stride < 1 or (hp - f1) % stride or (wp - f2) % stride:
        raise ShapeError("conv2d", "output size is not integral", padded=(hp, wp), kernel=(f1, f2), stride=stride)
    ho, wo = (hp - f1) // stride + 1, (wp - f2) // stride + 1

    xp = np.zeros((n, hp, wp, c))
    xp[:, pad.top : pad.top + h, pad.left : pad.left + w, :] = xb
    win = sliding_window_view(xp, (f1, f2), axis=(1, 2))[:, ::stride, ::stride]
    # n, ho, wo, c, f1, f2 -> n*ho*wo, f1*f2*c with (i, j, c) ordering to match kernel
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * ho * wo, f1 * f2 * c)
    kmat = kv.reshape(f1 * f2 * cin, cout)
    out = (cols @ kmat).reshape(n, ho, wo, cout)
    if single:
        out = out[0]

    def vjp(g, needs):
        gb = (g[None] if single else g).reshape(n * ho * wo, cout)
        gx = gk = None
        if needs[1]:
            gk = (cols.T @ gb).reshape(kv.shape)
        if needs[0]:
            gcols = (gb @ kmat.T).reshape(n, ho, wo, f1, f2, c)
            gxp = np.zeros_like(xp)
            for i in range(f1):
                for j in range(f2):
                    gxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad.top : pad.top + h, pad.left : pad.left + w, :]
            if single:
                gx = gx[0]
        return gx, gk

    return wrap(out, (x, kernel), vjp)


def maxpool2(x):
    """Non-overlapping 2x2 max pooling; ties resolve to the first entry in row-major order."""
    xv = value_of(x)
    xb, single = _as_batch(xv)
    n, h, w, c = xb.shape
    if h % 2 or w % 2:
        raise ShapeError("maxpool2", "spatial dims must be even", height=h, width=w)
    blocks = xb.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    if single:
        out = out[0]

    def vjp(g, needs):
        gb = g[None] if single else g
        gblocks = np.zeros((n, h // 2, w // 2, c, 4))
        np.put_along_axis(gblocks, arg[..., None], gb[..., None], axis=-1)
        gx = gblocks.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx[0] if single else gx,)

    return wrap(out, (x,), vjp)


def upsample_nn(x, factor: int = 2):
    """Nearest-neighbour enlargement: each pixel becomes a ``factor x factor`` block."""
    xv = value_of(x)
    xb, single = _as_batch(xv)
    n, h, w, c = xb.shape
    out = np.repeat(np.repeat(xb, factor, axis=1), factor, axis=2)
    if single:
        out = out[0]

    def vjp(g, needs):
        gb = g[None] if single else g
        gx = gb.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4))
        return (gx[0] if single else gx,)

    return wrap(out, (x,), vjp)


def concat(z, x):
    """Stack ``z`` then ``x`` along the last (channel / feature) axis."""
    zv, xv = value_of(z), value_of(x)
    if zv.shape[:-1] != xv.shape[:-1]:
        raise ShapeError("concat", "leading dims differ", z=zv.shape, x=xv.shape)
    split = zv.shape[-1]
    out = np.concatenate([zv, xv], axis=-1)

    def vjp(g, needs):
        return (g[..., :split] if needs[0] else None, g[..., split:] if needs[1] else None)

    return wrap(out, (z, x), vjp)


# ---------------------------------------------------------------- batch normalization


def _channel_axes(ndim):
    return tuple(range(ndim - 1))


def batch_normalize(u, eps: float = 1e-5):
    """Normalize ``u`` per channel with its own batch statistics.

    Returns ``(normalized, mean, var)``; only ``normalized`` is differentiable.
    Statistics are taken over every axis but the last, so ``u`` carries the
    batch along axis 0.
    """
    uv = value_of(u)
    axes = _channel_axes(uv.ndim)
    m = int(np.prod([uv.shape[a] for a in axes]))
    mean = uv.mean(axis=axes)
    centered = uv - mean
    var = (centered**2).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def vjp(g, needs):
        gsum = g.sum(axis=axes)
        gxsum = (g * xhat).sum(axis=axes)
        return (inv * (g - gsum / m - xhat * gxsum / m),)

    return wrap(xhat, (u,), vjp), mean, var


def normalize_frozen(u, mean, var, eps: float = 1e-5):
    """Affine normalization with fixed statistics."""
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    return mul(sub(u, np.asarray(mean)), inv)


def batchnorm_train(batch, gamma, beta, eps: float = 1e-5):
    """Training-mode batch normalization of a sequence of samples.

    Returns the normalized batch (stacked along axis 0) together with the
    per-channel mean and variance used.
    """
    if isinstance(batch, (list, tuple)):
        if not batch:
            raise ValueError("batchnorm_train: empty batch")
        batch = np.stack([np.asarray(b, dtype=np.float64) for b in batch])
    elif value_of(batch).shape[0] == 0:
        raise ValueError("batchnorm_train: empty batch")
    xhat, mean, var = batch_normalize(batch, eps)
    return add(mul(xhat, gamma), beta), mean, var


def batchnorm_infer(u, gamma, beta, pop_mean, pop_var, eps: float = 1e-5):
    return add(mul(normalize_frozen(u, pop_mean, pop_var, eps), gamma), beta)

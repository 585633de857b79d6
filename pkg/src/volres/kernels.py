"""Forward/backward kernels for the differentiable layer primitives.

Every forward returns ``(output, ctx)``; the matching backward takes
``(ctx, grad_output)`` and returns input gradients in argument order. These
functions are pure numpy and know nothing about the tape in
:mod:`volres.autodiff`, which keeps them directly checkable against finite
differences.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DegenerateBatchError, DimensionError, LabelError


# -- convolution --------------------------------------------------------------

def _conv_geometry(x, w, stride, pad):
    if x.ndim != 5:
        raise DimensionError(f"conv3d expects (n, c, d, h, w) input, got {x.shape}")
    if w.ndim != 5:
        raise DimensionError(f"conv3d expects (co, ci, kd, kh, kw) weight, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"conv3d channel mismatch: input has {x.shape[1]} channels, weight expects {w.shape[1]}"
        )
    ks = w.shape[2:]
    if ks not in ((3, 3, 3), (1, 1, 1)):
        raise DimensionError(f"conv3d supports 3x3x3 and 1x1x1 kernels, got {ks}")
    T._check_window(x.shape, ks, stride, pad)
    out = tuple(T.conv_out_size(s, k, stride, pad) for s, k in zip(x.shape[2:], ks))
    return ks, out


def _pad(x, pad):
    if not pad:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _tap(xp, kd, kh, kw, stride, out):
    od, oh, ow = out
    return xp[
        :,
        :,
        kd : kd + stride * (od - 1) + 1 : stride,
        kh : kh + stride * (oh - 1) + 1 : stride,
        kw : kw + stride * (ow - 1) + 1 : stride,
    ]


def conv3d_im2col(x, w, stride=1, pad=0):
    """Cross-correlation via patch lowering and a matrix product (no bias)."""
    ks, (od, oh, ow) = _conv_geometry(x, w, stride, pad)
    T.check_dtypes(x, w)
    n, co = x.shape[0], w.shape[0]
    cols = T.im2col3d(x, ks, stride, pad)
    wmat = np.ascontiguousarray(w.reshape(co, -1).T)
    y = T.gemm(cols, wmat)
    return np.ascontiguousarray(y.reshape(n, od, oh, ow, co).transpose(0, 4, 1, 2, 3))


def conv3d_direct(x, w, stride=1, pad=0):
    """Cross-correlation by direct accumulation over kernel taps (no bias).

    In ordered mode the accumulation order over (ci, kd, kh, kw) matches the
    column order of :func:`volres.tensor.im2col3d`, so both lowerings agree
    bitwise.
    """
    ks, out = _conv_geometry(x, w, stride, pad)
    T.check_dtypes(x, w)
    n, ci = x.shape[:2]
    co = w.shape[0]
    xp = _pad(x, pad)
    y = np.zeros((n, co) + out, dtype=x.dtype)
    if T.is_ordered():
        tmp = np.empty_like(y)
        for c in range(ci):
            for kd in range(ks[0]):
                for kh in range(ks[1]):
                    for kw in range(ks[2]):
                        xs = _tap(xp, kd, kh, kw, stride, out)[:, c : c + 1]
                        np.multiply(xs, w[None, :, c, kd, kh, kw, None, None, None], out=tmp)
                        y += tmp
        return y
    for kd in range(ks[0]):
        for kh in range(ks[1]):
            for kw in range(ks[2]):
                xs = _tap(xp, kd, kh, kw, stride, out)
                # (co, ci) . (n, ci, ...) -> (co, n, ...)
                y += np.moveaxis(np.tensordot(w[:, :, kd, kh, kw], xs, axes=([1], [1])), 0, 1)
    return y


def conv3d_forward(x, w, b, stride=1, pad=0, method="direct"):
    if method == "im2col":
        y = conv3d_im2col(x, w, stride, pad)
    elif method == "direct":
        y = conv3d_direct(x, w, stride, pad)
    else:
        raise ValueError(f"unknown conv3d method {method!r}")
    if b is not None:
        T.check_dtypes(y, b)
        if b.shape != (w.shape[0],):
            raise DimensionError(f"conv3d bias shape {b.shape} != ({w.shape[0]},)")
        y += b[None, :, None, None, None]
    return y, (x, w, stride, pad, b is not None)


def conv3d_backward(ctx, gy):
    x, w, stride, pad, has_bias = ctx
    ks, out = _conv_geometry(x, w, stride, pad)
    xp = _pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for kd in range(ks[0]):
        for kh in range(ks[1]):
            for kw in range(ks[2]):
                xs = _tap(xp, kd, kh, kw, stride, out)
                gw[:, :, kd, kh, kw] = np.tensordot(gy, xs, axes=([0, 2, 3, 4], [0, 2, 3, 4]))
                gxs = np.tensordot(w[:, :, kd, kh, kw], gy, axes=([0], [1]))
                _tap(gxp, kd, kh, kw, stride, out)[...] += np.moveaxis(gxs, 0, 1)
    gx = gxp[:, :, pad:-pad, pad:-pad, pad:-pad] if pad else gxp
    gb = gy.sum(axis=(0, 2, 3, 4)) if has_bias else None
    return np.ascontiguousarray(gx), gw, gb


# -- batch normalization ------------------------------------------------------

def batchnorm3d_forward(x, gamma, beta, running_mean, running_var, *, train, momentum=0.99, eps=1e-5):
    """Returns ``(y, ctx, new_running_mean, new_running_var)``.

    In eval mode the running statistics are returned unchanged.
    """
    if x.ndim != 5:
        raise DimensionError(f"batchnorm3d expects (n, c, d, h, w) input, got {x.shape}")
    c = x.shape[1]
    for name, p in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if p.shape != (c,):
            raise DimensionError(f"batchnorm3d {name} shape {p.shape} != ({c},)")
    T.check_dtypes(x, gamma, beta)
    bc = (None, slice(None), None, None, None)
    if train:
        count = x.size // c
        if count < 2:
            raise DegenerateBatchError(
                f"batchnorm3d in train mode needs >= 2 values per channel, got {count}"
            )
        mean, var = T.channel_moments(x)
        new_rm = momentum * running_mean + (1.0 - momentum) * mean
        new_rv = momentum * running_var + (1.0 - momentum) * var
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[bc]) * inv_std[bc]
    y = gamma[bc] * xhat + beta[bc]
    return y, (xhat, gamma, inv_std, train), new_rm, new_rv


def batchnorm3d_backward(ctx, gy):
    xhat, gamma, inv_std, train = ctx
    bc = (None, slice(None), None, None, None)
    axes = (0, 2, 3, 4)
    gbeta = gy.sum(axis=axes)
    ggamma = (gy * xhat).sum(axis=axes)
    gxhat = gy * gamma[bc]
    if not train:
        return gxhat * inv_std[bc], ggamma, gbeta
    count = xhat.size // xhat.shape[1]
    gx = (inv_std[bc] / count) * (
        count * gxhat - gxhat.sum(axis=axes)[bc] - xhat * (gxhat * xhat).sum(axis=axes)[bc]
    )
    return gx, ggamma, gbeta


# -- elementwise / pooling ----------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, np.zeros((), x.dtype)), mask


def relu_backward(mask, gy):
    return (np.where(mask, gy, np.zeros((), gy.dtype)),)


def pool_out_size(size, window, stride, ceil_pad):
    if ceil_pad:
        return -(-max(size - window, 0) // stride) + 1
    return (size - window) // stride + 1


def maxpool3d_forward(x, window, stride=None, ceil_pad=False):
    """Windowed maximum; with ``ceil_pad`` the high side is zero-padded so no
    input voxel is dropped. Ties go to the lowest linear index."""
    if window < 1:
        raise DimensionError(f"maxpool3d window must be >= 1, got {window}")
    stride = window if stride is None else stride
    if x.ndim != 5:
        raise DimensionError(f"maxpool3d expects (n, c, d, h, w) input, got {x.shape}")
    n, c = x.shape[:2]
    out = tuple(pool_out_size(s, window, stride, ceil_pad) for s in x.shape[2:])
    if min(out) < 1:
        raise DimensionError(f"maxpool3d window {window} larger than input {x.shape[2:]}")
    need = tuple((o - 1) * stride + window for o in out)
    hi = tuple(max(nd - s, 0) for nd, s in zip(need, x.shape[2:]))
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple((0, h) for h in hi)) if any(hi) else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (window,) * 3, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride][:, :, : out[0], : out[1], : out[2]]
    flat = win.reshape(n, c, *out, window**3)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(y), (x.shape, xp.shape, arg, window, stride)


def maxpool3d_backward(ctx, gy):
    x_shape, xp_shape, arg, window, stride = ctx
    n, c, od, oh, ow = arg.shape
    kd, rem = np.divmod(arg, window * window)
    kh, kw = np.divmod(rem, window)
    pd = np.arange(od)[:, None, None] * stride + kd
    ph = np.arange(oh)[None, :, None] * stride + kh
    pw = np.arange(ow)[None, None, :] * stride + kw
    ni = np.arange(n)[:, None, None, None, None]
    ci = np.arange(c)[None, :, None, None, None]
    gxp = np.zeros(xp_shape, dtype=gy.dtype)
    np.add.at(gxp, (ni, ci, pd, ph, pw), gy)
    d, h, w = x_shape[2:]
    return (np.ascontiguousarray(gxp[:, :, :d, :h, :w]),)


def avgpool3d_global_forward(x):
    if x.ndim != 5:
        raise DimensionError(f"avgpool3d_global expects (n, c, d, h, w) input, got {x.shape}")
    return x.mean(axis=(2, 3, 4)), x.shape


def avgpool3d_global_backward(x_shape, gy):
    vol = x_shape[2] * x_shape[3] * x_shape[4]
    g = np.broadcast_to((gy / vol)[:, :, None, None, None], x_shape)
    return (np.ascontiguousarray(g),)


# -- dense / dropout / loss ---------------------------------------------------

def dense_forward(x, w, b):
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense shape mismatch: x {x.shape}, weight {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense bias shape {b.shape} != ({w.shape[1]},)")
    T.check_dtypes(x, w, b)
    return T.gemm(x, w) + b, (x, w)


def dense_backward(ctx, gy):
    x, w = ctx
    return gy @ w.T, x.T @ gy, gy.sum(axis=0)


def dropout_forward(x, rate, *, train, rng=None):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None for identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(mask, gy):
    return (gy if mask is None else gy * mask,)


def softmax_xent_forward(logits, labels):
    """Mean cross-entropy. Returns ``(loss, probs, ctx)``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_xent expects (n, classes) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} != ({n},)")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelError(f"labels must be integer class indices, got dtype {labels.dtype}")
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        r = int(bad[0])
        raise LabelError(f"label {int(labels[r])} in row {r} outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    probs = np.exp(logp)
    loss = -logp[np.arange(n), labels].mean()
    return loss, probs, (probs, labels)


def softmax_xent_backward(ctx, gloss=1.0):
    probs, labels = ctx
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    return (g * (gloss / n),)


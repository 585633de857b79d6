"""Dense tensor storage conventions and bulk numeric primitives.

Tensors are plain C-contiguous ``numpy.ndarray`` objects of dtype float32 or
float64. Activations use the (n, c, d, h, w) layout.

Two accumulation policies exist for the products that dominate convolution:

* ``ordered``: every dot product is accumulated in a fixed, ascending order
  over the contraction index. Slow, but two different lowerings of the same
  convolution give bitwise-identical results.
* ``blas`` (default): hand contractions to BLAS. Repeated calls on identical
  inputs are still bitwise reproducible on a given machine and thread count.
"""
from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

from .errors import DimensionError, DTypeError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ordered = False


def is_ordered() -> bool:
    return _ordered


def set_ordered(enabled: bool) -> None:
    global _ordered
    _ordered = bool(enabled)


@contextlib.contextmanager
def ordered(enabled: bool = True) -> Iterator[None]:
    """Temporarily switch the accumulation policy."""
    global _ordered
    prev = _ordered
    _ordered = bool(enabled)
    try:
        yield
    finally:
        _ordered = prev


def as_tensor(x, dtype=None) -> np.ndarray:
    """Return ``x`` as a contiguous float32/float64 array (copying only if needed)."""
    arr = np.asarray(x, dtype=dtype)
    if arr.dtype not in DTYPES:
        if dtype is None and np.issubdtype(arr.dtype, np.number):
            arr = arr.astype(np.float64)
        else:
            raise DTypeError(f"unsupported tensor dtype {arr.dtype}; use float32 or float64")
    if arr.ndim > 5:
        raise DimensionError(f"tensor rank {arr.ndim} exceeds 5")
    return np.ascontiguousarray(arr)


def check_dtypes(*arrays: np.ndarray) -> np.dtype:
    """All operands must share one dtype; mixed precision is never cast silently."""
    dt = arrays[0].dtype
    for a in arrays[1:]:
        if a.dtype != dt:
            raise DTypeError(f"dtype mismatch: {dt} vs {a.dtype}")
    if dt not in DTYPES:
        raise DTypeError(f"unsupported tensor dtype {dt}")
    return dt


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in ascending order of the inner index.

    ``c[i, j] = (((a[i,0] b[0,j]) + a[i,1] b[1,j]) + ...)`` evaluated in the
    operands' dtype.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    dt = check_dtypes(a, b)
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=dt)
    tmp = np.empty((m, n), dtype=dt)
    for p in range(k):
        np.multiply(a[:, p : p + 1], b[p : p + 1, :], out=tmp)
        out += tmp
    return out


def gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product under the active accumulation policy."""
    if _ordered:
        return matmul(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    check_dtypes(a, b)
    return a @ b


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(e) for e in v)
    if len(t) != 3:
        raise DimensionError(f"expected 3 extents, got {v!r}")
    return t  # type: ignore[return-value]


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _check_window(shape: Sequence[int], kernel, stride: int, pad: int):
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise DimensionError(f"pad must be >= 0, got {pad}")
    if len(shape) != 5:
        raise DimensionError(f"expected (n, c, d, h, w) input, got shape {tuple(shape)}")
    ks = _triple(kernel)
    for size, k in zip(shape[2:], ks):
        if size + 2 * pad < k:
            raise DimensionError(
                f"kernel {ks} larger than padded input {tuple(shape[2:])} (pad {pad})"
            )
    return ks


def im2col3d(x: np.ndarray, kernel=3, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Lower a (n, c, d, h, w) volume to a patch matrix.

    Rows enumerate (batch, od, oh, ow); columns enumerate (c, kd, kh, kw).
    Reads outside the volume are zero.
    """
    ks = _check_window(x.shape, kernel, stride, pad)
    n, c = x.shape[:2]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, ks, axis=(2, 3, 4))
    win = win[:, :, ::stride, ::stride, ::stride]
    od, oh, ow = win.shape[2:5]
    # (n, c, od, oh, ow, kd, kh, kw) -> (n, od, oh, ow, c, kd, kh, kw)
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * od * oh * ow, c * ks[0] * ks[1] * ks[2])
    return np.ascontiguousarray(cols)


def col2im3d(cols: np.ndarray, x_shape: Sequence[int], kernel=3, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col3d`: scatter-add patch entries back into a volume."""
    ks = _check_window(x_shape, kernel, stride, pad)
    n, c, d, h, w = x_shape
    od, oh, ow = (conv_out_size(s, k, stride, pad) for s, k in zip((d, h, w), ks))
    expect = (n * od * oh * ow, c * ks[0] * ks[1] * ks[2])
    if cols.shape != expect:
        raise DimensionError(f"col2im3d: cols shape {cols.shape} != expected {expect}")
    patches = cols.reshape(n, od, oh, ow, c, *ks).transpose(0, 4, 5, 6, 7, 1, 2, 3)
    out = np.zeros((n, c, d + 2 * pad, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for kd in range(ks[0]):
        for kh in range(ks[1]):
            for kw in range(ks[2]):
                out[
                    :,
                    :,
                    kd : kd + stride * od : stride,
                    kh : kh + stride * oh : stride,
                    kw : kw + stride * ow : stride,
                ] += patches[:, :, kd, kh, kw]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad, pad:-pad]
    return np.ascontiguousarray(out)


def channel_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance over every non-channel axis."""
    if x.ndim != 5:
        raise DimensionError(f"expected (n, c, d, h, w) input, got shape {x.shape}")
    if x.size == 0:
        raise DimensionError("channel_moments of an empty tensor")
    axes = (0, 2, 3, 4)
    mean = x.mean(axis=axes)
    centered = x - mean[None, :, None, None, None]
    var = (centered * centered).mean(axis=axes)
    return mean, var

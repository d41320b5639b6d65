"""Dense FP32 tensors and the linear-algebra primitives everything else composes.

A "tensor" here is a plain ``numpy.ndarray`` with ``dtype=float32``; shapes
carry at least one element per dimension.  All operations are pure -- inputs
are never mutated -- and matmul fixes its accumulation order so results are
reproducible bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError


def as_tensor(values) -> np.ndarray:
    """Convert nested sequences / arrays to a float32 ndarray."""
    return np.asarray(values, dtype=np.float32)


def _require_f32(x: np.ndarray, name: str) -> None:
    if not isinstance(x, np.ndarray) or x.dtype != np.float32:
        got = getattr(x, "dtype", type(x).__name__)
        raise TypeError(f"{name} must be a float32 ndarray, got {got}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """FP32 matrix product with a fixed left-to-right accumulation order."""
    _require_f32(a, "a")
    _require_f32(b, "b")
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}"
        )
    return kernels.matmul_f32(
        np.ascontiguousarray(a), np.ascontiguousarray(b.T)
    )


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold sliding windows of an (N, C, H, W) array into patch rows.

    Returns ``(cols, out_h, out_w)`` where ``cols`` has shape
    (N*out_h*out_w, C*kh*kw) and column index ``c*(kh*kw) + i*kw + j``
    walks channels first, then kernel rows, then kernel columns.  Works
    for any dtype (the integer evaluation path reuses it on codes);
    padding inserts zeros.
    """
    n, c, h, w = x.shape
    out_h, rem_h = divmod(h + 2 * padding - kh, stride)
    out_w, rem_w = divmod(w + 2 * padding - kw, stride)
    out_h += 1
    out_w += 1
    if rem_h != 0 or rem_w != 0 or out_h < 1 or out_w < 1:
        raise ConfigError(
            f"conv2d output size is not a positive integer for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    if padding > 0:
        padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        padded[:, :, padding : padding + h, padding : padding + w] = x
    else:
        padded = x

    ki = np.repeat(np.arange(kh), kw)
    kj = np.tile(np.arange(kw), kh)
    oi = stride * np.repeat(np.arange(out_h), out_w)
    oj = stride * np.tile(np.arange(out_w), out_h)
    rows = oi[:, None] + ki[None, :]  # (out_h*out_w, kh*kw)
    cols_ix = oj[:, None] + kj[None, :]

    patches = padded[:, :, rows, cols_ix]  # (n, c, out_h*out_w, kh*kw)
    cols = np.ascontiguousarray(patches.transpose(0, 2, 1, 3)).reshape(
        n * out_h * out_w, c * kh * kw
    )
    return cols, out_h, out_w


def col2im(
    dcols: np.ndarray,
    x_shape: tuple,
    kh: int,
    kw: int,
    stride: int,
    padding: int,
) -> np.ndarray:
    """Scatter-add patch-row gradients back to the (N, C, H, W) layout.

    Exact adjoint of :func:`im2col`; accumulation runs in a fixed index
    order so results are deterministic.
    """
    n, c, h, w = x_shape
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    dpadded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)

    ki = np.repeat(np.arange(kh), kw)
    kj = np.tile(np.arange(kw), kh)
    oi = stride * np.repeat(np.arange(out_h), out_w)
    oj = stride * np.tile(np.arange(out_w), out_h)
    rows = oi[:, None] + ki[None, :]
    cols_ix = oj[:, None] + kj[None, :]

    patches = dcols.reshape(n, out_h * out_w, c, kh * kw).transpose(0, 2, 1, 3)
    np.add.at(dpadded, (slice(None), slice(None), rows, cols_ix), patches)
    if padding > 0:
        return np.ascontiguousarray(
            dpadded[:, :, padding : padding + h, padding : padding + w]
        )
    return dpadded


def conv2d(
    x: np.ndarray, kernel: np.ndarray, stride: int = 1, padding: int = 0
) -> np.ndarray:
    """2-D cross-correlation via im2col + matmul.

    ``x`` is (N, C, H, W), ``kernel`` is (O, C, kh, kw); output is
    (N, O, H', W').  Bit-identical to the explicit nested-loop definition
    because the patch columns preserve the channel-major accumulation
    order of the FP32 matmul.
    """
    _require_f32(x, "x")
    _require_f32(kernel, "kernel")
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}"
        )
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]} channels, "
            f"kernel expects {kernel.shape[1]}"
        )
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    n = x.shape[0]
    o = kernel.shape[0]
    cols, out_h, out_w = im2col(x, kernel.shape[2], kernel.shape[3], stride, padding)
    w_mat = kernel.reshape(o, -1)
    out = matmul(cols, np.ascontiguousarray(w_mat.T))  # (n*out_h*out_w, o)
    out = out.reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out)


def relu(x: np.ndarray) -> np.ndarray:
    _require_f32(x, "x")
    return np.maximum(x, np.float32(0.0))


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_f32(a, "a")
    _require_f32(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def scale(x: np.ndarray, c: float) -> np.ndarray:
    _require_f32(x, "x")
    return x * np.float32(c)


def minmax(x: np.ndarray) -> tuple[float, float]:
    """Smallest and largest element of a non-empty tensor."""
    _require_f32(x, "x")
    if x.size == 0:
        raise ValueError("minmax of an empty tensor")
    return float(x.min()), float(x.max())

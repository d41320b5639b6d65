"""Uniform quantization core: step computation, quantize/dequantize,
fused fake-quantization, sign binarization, and range calibration.

Given a range (lower, upper) and a bit-width ``b``, the range splits into
``2**b - 1`` intervals of length ``step = (upper - lower) / (2**b - 1)``.
Three reconstruction schemes are supported:

* ``scale-only``  -- code = round(clamp(x) / step),        x_out = code * step
* ``affine``      -- code = round((clamp(x) - lower)/step), x_out = code * step + lower
* ``symmetric``   -- affine constrained to lower == -upper, x_out = code * step - upper

Rounding is half-away-from-zero everywhere (kernels and oracles must
match).  Codes are clamped to the representable grid so at most ``2**b``
distinct levels exist.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CalibrationError, ShapeError

SCHEMES = ("scale-only", "affine", "symmetric")

_MAX_BITS = 8


def quant_step(lower: float, upper: float, bits: int) -> float:
    """Interval length (upper - lower) / (2**bits - 1)."""
    if not 1 <= bits <= _MAX_BITS:
        raise ValueError(f"bits must be in [1, {_MAX_BITS}], got {bits}")
    if not lower < upper:
        raise ValueError(f"range requires lower < upper, got ({lower}, {upper})")
    return (upper - lower) / (2**bits - 1)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round to nearest with ties away from zero (float64 in, float64 out)."""
    return np.trunc(x + np.copysign(0.5, x))


def _as_param_array(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim not in (0, 1):
        raise ValueError(f"{name} must be a scalar or 1-D per-channel array")
    return arr


@dataclass(frozen=True)
class QuantParams:
    """Bit-width, range, derived step, scheme and granularity of a quantizer.

    ``lower``/``upper`` are scalars for per-tensor granularity or 1-D
    arrays (one entry per channel along ``axis``) for per-channel.
    ``step`` is always derived from the stored range, never supplied.
    """

    bits: int
    lower: np.ndarray
    upper: np.ndarray
    scheme: str = "scale-only"
    axis: int | None = None
    step: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if isinstance(self.bits, bool) or not isinstance(self.bits, (int, np.integer)):
            raise ValueError(f"bits must be an integer, got {self.bits!r}")
        if not 1 <= self.bits <= _MAX_BITS:
            raise ValueError(f"bits must be in [1, {_MAX_BITS}], got {self.bits}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}, expected one of {SCHEMES}")
        lower = _as_param_array(self.lower, "lower")
        upper = _as_param_array(self.upper, "upper")
        if lower.shape != upper.shape:
            raise ValueError("lower and upper must have matching shapes")
        if self.axis is None:
            if lower.ndim != 0:
                raise ValueError("per-tensor params require scalar lower/upper")
        else:
            if lower.ndim != 1:
                raise ValueError("per-channel params require 1-D lower/upper")
            if self.axis < 0:
                raise ValueError(f"axis must be >= 0, got {self.axis}")
        if not np.all(lower < upper):
            raise ValueError("range requires lower < upper in every slice")
        if self.scheme == "symmetric" and not np.all(lower == -upper):
            raise ValueError("symmetric scheme requires lower == -upper")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "step", (upper - lower) / (2**self.bits - 1))

    @property
    def per_channel(self) -> bool:
        return self.axis is not None

    @property
    def channels(self) -> int:
        return 1 if self.axis is None else self.lower.shape[0]

    def code_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Smallest and largest representable code for this scheme.

        For the offset schemes these are always (0, 2**bits - 1).  For
        scale-only the grid is the integers inside [lower/step, upper/step];
        when float error yields more than 2**bits of them, the excess is
        trimmed symmetrically (extra level off the top).
        """
        levels = 2**self.bits
        if self.scheme in ("affine", "symmetric"):
            zeros = np.zeros_like(self.lower)
            return zeros, zeros + (levels - 1)
        qmin = np.ceil(self.lower / self.step)
        qmax = np.floor(self.upper / self.step)
        excess = (qmax - qmin + 1) - levels
        excess = np.maximum(excess, 0)
        qmin = qmin + excess // 2
        qmax = qmax - (excess - excess // 2)
        return qmin, qmax

    def broadcast_shape(self, ndim: int) -> tuple:
        """Shape that broadcasts per-channel params against an ndim-D tensor."""
        if self.axis is None:
            return ()
        if self.axis >= ndim:
            raise ShapeError(
                f"per-channel axis {self.axis} out of range for {ndim}-D tensor"
            )
        shape = [1] * ndim
        shape[self.axis] = self.lower.shape[0]
        return tuple(shape)

    def _spread(self, v: np.ndarray, ndim: int) -> np.ndarray:
        shape = self.broadcast_shape(ndim)
        return v.reshape(shape) if shape else v

    def check_tensor(self, x: np.ndarray) -> None:
        if self.axis is not None:
            if self.axis >= x.ndim or x.shape[self.axis] != self.lower.shape[0]:
                raise ShapeError(
                    f"tensor shape {x.shape} incompatible with {self.channels} "
                    f"channels along axis {self.axis}"
                )


@dataclass(frozen=True)
class QTensor:
    """Integer codes plus the parameters that produced them."""

    codes: np.ndarray
    params: QuantParams

    def __post_init__(self):
        if self.codes.dtype != np.int32:
            raise TypeError(f"codes must be int32, got {self.codes.dtype}")
        self.params.check_tensor(self.codes)
        qmin, qmax = self.params.code_bounds()
        ndim = self.codes.ndim
        lo = self.params._spread(qmin, ndim)
        hi = self.params._spread(qmax, ndim)
        if not (np.all(self.codes >= lo) and np.all(self.codes <= hi)):
            raise ValueError("codes fall outside the representable grid")

    @property
    def shape(self) -> tuple:
        return self.codes.shape


def quantize(x: np.ndarray, params: QuantParams) -> QTensor:
    """Map FP32 values onto the integer grid defined by ``params``.

    Values are clamped to [lower, upper] first; codes are clamped to the
    grid so the output never exceeds 2**bits distinct levels.
    """
    params.check_tensor(x)
    ndim = x.ndim
    lo = params._spread(params.lower, ndim)
    hi = params._spread(params.upper, ndim)
    step = params._spread(params.step, ndim)
    clamped = np.clip(x.astype(np.float64), lo, hi)
    if params.scheme == "scale-only":
        raw = round_half_away(clamped / step)
    else:  # affine / symmetric
        raw = round_half_away((clamped - lo) / step)
    qmin, qmax = params.code_bounds()
    raw = np.clip(raw, params._spread(qmin, ndim), params._spread(qmax, ndim))
    if np.any(np.abs(raw) > np.iinfo(np.int32).max):
        raise ValueError("quantized codes overflow int32; range is too far from zero")
    return QTensor(raw.astype(np.int32), params)


def dequantize(q: QTensor) -> np.ndarray:
    """Reconstruct an FP32 tensor from integer codes: x_out = code * step (+ offset)."""
    p = q.params
    ndim = q.codes.ndim
    step = p._spread(p.step, ndim)
    vals = q.codes.astype(np.float64) * step
    if p.scheme == "affine":
        vals = vals + p._spread(p.lower, ndim)
    elif p.scheme == "symmetric":
        vals = vals - p._spread(p.upper, ndim)
    return vals.astype(np.float32)


def fake_quantize(x: np.ndarray, params: QuantParams) -> np.ndarray:
    """Quantize-then-dequantize in one step (the QAT forward transform)."""
    return dequantize(quantize(x, params))


def binarize(x: np.ndarray) -> np.ndarray:
    """Sign binarization to {-1, +1} with sign(0) = +1."""
    return np.where(x >= 0, np.float32(1.0), np.float32(-1.0))


def transpose_qtensor(q: QTensor) -> QTensor:
    """Transpose a 2-D QTensor, flipping a per-channel axis with it."""
    if q.codes.ndim != 2:
        raise ShapeError(f"transpose_qtensor expects 2-D codes, got {q.codes.shape}")
    p = q.params
    axis = None if p.axis is None else 1 - p.axis
    params = QuantParams(bits=p.bits, lower=p.lower, upper=p.upper, scheme=p.scheme, axis=axis)
    return QTensor(np.ascontiguousarray(q.codes.T), params)


def _slice_minmax(samples, axis: int | None):
    """Running (min, max) over samples, globally or per channel."""
    lo = hi = None
    for s in samples:
        arr = np.asarray(s)
        if axis is None:
            s_lo = arr.min()
            s_hi = arr.max()
        else:
            if axis >= arr.ndim:
                raise ShapeError(f"axis {axis} out of range for shape {arr.shape}")
            moved = np.moveaxis(arr, axis, 0).reshape(arr.shape[axis], -1)
            s_lo = moved.min(axis=1)
            s_hi = moved.max(axis=1)
        lo = s_lo if lo is None else np.minimum(lo, s_lo)
        hi = s_hi if hi is None else np.maximum(hi, s_hi)
    if lo is None:
        raise ValueError("calibration requires at least one sample")
    return np.asarray(lo, np.float64), np.asarray(hi, np.float64)


def calibrate_minmax(
    samples,
    bits: int,
    scheme: str = "scale-only",
    axis: int | None = None,
) -> QuantParams:
    """Derive QuantParams from the observed min/max of one or more tensors.

    Constant slices are rejected: a degenerate range has no usable step,
    so callers must supply an explicit range instead.
    """
    lo, hi = _slice_minmax(samples, axis)
    if not np.all(lo < hi):
        raise CalibrationError(
            "calibration saw a constant slice (min == max); "
            "pass an explicit range instead"
        )
    if scheme == "symmetric":
        hi = np.maximum(np.abs(lo), np.abs(hi))
        lo = -hi
    return QuantParams(bits=bits, lower=lo, upper=hi, scheme=scheme, axis=axis)


def calibrate_ema(
    current: QuantParams, batch: np.ndarray, momentum: float
) -> QuantParams:
    """Exponential-moving-average update of a running activation range.

    lower' = momentum * lower + (1 - momentum) * min(batch), and the same
    for upper; the step is recomputed from the new range.  For the
    symmetric scheme the magnitude is averaged instead (the per-endpoint
    recurrence would break lower == -upper).
    """
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must be in [0, 1), got {momentum}")
    lo, hi = _slice_minmax([batch], current.axis)
    m = np.float64(momentum)
    if current.scheme == "symmetric":
        mag = np.maximum(np.abs(lo), np.abs(hi))
        new_hi = m * current.upper + (1 - m) * mag
        new_lo = -new_hi
    else:
        new_lo = m * current.lower + (1 - m) * lo
        new_hi = m * current.upper + (1 - m) * hi
    return QuantParams(
        bits=current.bits,
        lower=new_lo,
        upper=new_hi,
        scheme=current.scheme,
        axis=current.axis,
    )

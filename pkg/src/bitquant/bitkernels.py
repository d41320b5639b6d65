"""Bit-packed sign tensors and the integer/bitwise GEMM kernels.

This is the performance payload: FP32 multiply-accumulate is replaced by
XNOR + popcount over 64-bit words (1-bit operands) or by an int32
accumulation over small integer codes with an FP32 dequantization
epilogue (2-8 bit operands).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ShapeError, UnsupportedSchemeError
from .quant import QTensor, QuantParams, binarize

WORD_BITS = 64


@dataclass(frozen=True)
class BitTensor:
    """Sign matrix packed 64 values per word.

    Encoding: +1 -> bit 1, -1 -> bit 0, LSB-first within each word;
    ``words`` has shape (rows, ceil(cols/64)) and padding bits past
    ``cols`` are always zero.
    """

    rows: int
    cols: int
    words: np.ndarray

    def __post_init__(self):
        if self.words.dtype != np.uint64 or self.words.ndim != 2:
            raise TypeError("words must be a 2-D uint64 array")
        expect = (self.rows, (self.cols + WORD_BITS - 1) // WORD_BITS)
        if self.words.shape != expect:
            raise ShapeError(
                f"words shape {self.words.shape} does not match {expect} "
                f"for {self.rows}x{self.cols}"
            )
        tail = self.cols % WORD_BITS
        if tail and self.words.shape[1]:
            mask = np.uint64((1 << tail) - 1)
            if np.any(self.words[:, -1] & ~mask):
                raise ValueError("padding bits beyond cols must be zero")

    @property
    def words_per_row(self) -> int:
        return self.words.shape[1]

    @property
    def nbytes(self) -> int:
        return self.words.nbytes


def pack_bits(x: np.ndarray) -> BitTensor:
    """Pack the signs of a 2-D tensor: bit i of row word j is 1 iff
    x[row][64*j + i] >= 0."""
    if not isinstance(x, np.ndarray) or x.ndim != 2:
        raise ShapeError(f"pack_bits expects a 2-D array, got shape {getattr(x, 'shape', None)}")
    rows, cols = x.shape
    bits = (x >= 0).astype(np.uint8)
    padded_cols = ((cols + WORD_BITS - 1) // WORD_BITS) * WORD_BITS
    if padded_cols != cols:
        padded = np.zeros((rows, padded_cols), np.uint8)
        padded[:, :cols] = bits
        bits = padded
    packed = np.packbits(bits, axis=1, bitorder="little")
    words = packed.view("<u8").astype(np.uint64, copy=False)
    return BitTensor(rows=rows, cols=cols, words=np.ascontiguousarray(words))


def unpack_bits(bt: BitTensor) -> np.ndarray:
    """Exact inverse of :func:`pack_bits` on the valid region: {-1, +1} float32."""
    raw = bt.words.astype("<u8", copy=False).view(np.uint8).reshape(bt.rows, -1)
    bits = np.unpackbits(raw, axis=1, bitorder="little", count=bt.cols)
    return np.where(bits == 1, np.float32(1.0), np.float32(-1.0))


def pack_signs(x: np.ndarray) -> BitTensor:
    """Binarize-then-pack convenience (equivalent to pack_bits(binarize(x)))."""
    return pack_bits(binarize(x))


def xnor_gemm(a: BitTensor, b_t: BitTensor) -> np.ndarray:
    """Sign GEMM: int32 result equal to the FP32 dot products of the
    corresponding +/-1 vectors.

    ``b_t`` holds the logical right operand pre-transposed, so row j of
    ``b_t`` is column j of B and both operands stream row-wise.
    """
    if a.cols != b_t.cols:
        raise ShapeError(
            f"xnor_gemm shared dimension mismatch: {a.rows}x{a.cols} "
            f"vs transposed {b_t.rows}x{b_t.cols}"
        )
    return kernels.xnor_popcount_gemm(a.words, b_t.words, a.cols)


def _gemm_scheme_offset(params: QuantParams):
    """Reconstruction offset per scheme: x_out = code*step + offset."""
    if params.scheme == "scale-only":
        return np.zeros_like(params.upper)
    if params.scheme == "symmetric":
        return -params.upper
    raise UnsupportedSchemeError(
        "int8_gemm supports scale-only and symmetric operands only; "
        "dequantize affine tensors and use matmul instead"
    )


def int8_gemm(a: QTensor, b: QTensor) -> np.ndarray:
    """Low-bit GEMM: integer accumulation plus an FP32 dequantization epilogue.

    ``a`` is (m x k) per-tensor quantized; ``b`` is (k x n), per-tensor or
    per-channel along axis 1 (one scale per output column).  Both operands
    must use a zero-point-free scheme (scale-only or symmetric).  The
    accumulator is int32; the shared dimension must satisfy
    k * max|code_a| * max|code_b| < 2**31.
    """
    off_a = _gemm_scheme_offset(a.params)
    off_b = _gemm_scheme_offset(b.params)
    if a.codes.ndim != 2 or b.codes.ndim != 2:
        raise ShapeError("int8_gemm expects 2-D operands")
    if a.codes.shape[1] != b.codes.shape[0]:
        raise ShapeError(
            f"int8_gemm inner dimensions disagree: {a.codes.shape} x {b.codes.shape}"
        )
    if a.params.axis is not None:
        raise UnsupportedSchemeError("int8_gemm requires a per-tensor left operand")
    if b.params.axis not in (None, 1):
        raise UnsupportedSchemeError(
            "int8_gemm right operand must be per-tensor or per-channel along axis 1"
        )
    k = a.codes.shape[1]
    max_a = int(np.abs(a.codes).max(initial=0))
    max_b = int(np.abs(b.codes).max(initial=0))
    if k * max_a * max_b >= 2**31:
        raise ValueError(
            f"int32 accumulator would overflow: k={k}, max codes {max_a}*{max_b}"
        )

    acc = kernels.gemm_i32(
        np.ascontiguousarray(a.codes), np.ascontiguousarray(b.codes)
    )

    step_a = np.float32(a.params.step)
    step_b = b.params.step.astype(np.float32)  # scalar or per-column
    out = acc.astype(np.float32) * (step_a * step_b)
    off_b32 = off_b.astype(np.float32)
    if np.any(off_b32 != 0):
        row_sums = a.codes.sum(axis=1, dtype=np.int64).astype(np.float32)
        out = out + (step_a * off_b32) * row_sums[:, None]
    off_a32 = np.float32(off_a)
    if off_a32 != 0:
        col_sums = b.codes.sum(axis=0, dtype=np.int64).astype(np.float32)
        out = out + (off_a32 * step_b) * col_sums[None, :]
        if np.any(off_b32 != 0):
            out = out + np.float32(k) * off_a32 * off_b32
    return out

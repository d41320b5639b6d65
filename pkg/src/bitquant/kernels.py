"""JIT-compiled inner loops shared by the tensor and bit-packed paths.

Three GEMM flavours live here:

* ``matmul_f32``  -- scalar FP32 multiply-accumulate, the baseline every
  other kernel is benchmarked against.  Each output element accumulates
  over the shared dimension in ascending index order, entirely in FP32,
  so results are reproducible bit-for-bit.
* ``gemm_i32``    -- integer-code GEMM with 32-bit accumulation.
* ``xnor_popcount_gemm`` -- sign GEMM over 64-bit packed words: the +/-1
  dot product is recovered as ``k - 2 * mismatches`` where mismatches are
  counted by XOR + population count.
"""

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic


@intrinsic
def _popcount_u64(typingctx, value):
    """Population count of a uint64 via the LLVM ctpop intrinsic."""
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        ctpop = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(ctpop, [args[0]])

    return sig, codegen


@njit(cache=True)
def matmul_f32(a, b_t):
    """FP32 GEMM; ``b_t`` is the right operand stored transposed (n x k).

    out[i, j] = sum_p a[i, p] * b_t[j, p], accumulated left-to-right in
    FP32.  No fused multiply-add, no reassociation: the compiled loop is
    bit-identical to the scalar definition.
    """
    m, k = a.shape
    n = b_t.shape[0]
    out = np.empty((m, n), np.float32)
    for i in range(m):
        for j in range(n):
            acc = np.float32(0.0)
            for p in range(k):
                acc += a[i, p] * b_t[j, p]
            out[i, j] = acc
    return out


@njit(cache=True)
def gemm_i32(a, b):
    """Integer GEMM over int32 codes with int32 accumulation.

    Integer addition is associative, so the cache-friendly loop order is
    free to differ from the FP32 kernel without changing results.
    """
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.int32)
    for i in range(m):
        for p in range(k):
            a_ip = a[i, p]
            for j in range(n):
                out[i, j] += a_ip * b[p, j]
    return out


@njit(cache=True)
def xnor_popcount_gemm(a_words, b_words, k):
    """Sign GEMM over packed words; both operands stream row-wise.

    ``a_words`` is (m x words), ``b_words`` is (n x words) holding the
    logical right operand pre-transposed.  Padding bits are zero in both
    operands, so XOR over the tail contributes no mismatches and the
    k - 2*d identity needs no masking.
    """
    m = a_words.shape[0]
    n = b_words.shape[0]
    nw = a_words.shape[1]
    out = np.empty((m, n), np.int32)
    for i in range(m):
        for j in range(n):
            mismatches = np.uint64(0)
            for w in range(nw):
                mismatches += _popcount_u64(a_words[i, w] ^ b_words[j, w])
            out[i, j] = np.int32(k - np.int64(2) * np.int64(mismatches))
    return out

"""Micro-benchmarks for the GEMM kernels and checkpoint size reporting.

Every timed kernel is validated against an independent oracle on a 64^3
sub-problem immediately before timing; a report is never produced for an
incorrect kernel.  Medians over >= 5 repetitions (plus one untimed
warm-up) keep the numbers robust to scheduler noise.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import bitkernels as bk
from . import quant, tensor
from .checkpoint import read_manifest
from .errors import BenchError
from .model import LayerSpec

KERNELS = ("fp32", "int8", "xnor")

CSV_HEADER = "op,m,k,n,reps,threads,median_s,gops,speedup_vs_fp32"

_CHECK_DIM = 64


@dataclass(frozen=True)
class BenchReport:
    op: str
    m: int
    k: int
    n: int
    reps: int
    threads: int
    times: tuple[float, ...]  # per-rep wall seconds
    median_s: float
    gops: float
    speedup_vs_fp32: float | None

    def __post_init__(self):
        if self.reps < 5:
            raise ValueError(f"reps must be >= 5, got {self.reps}")
        if len(self.times) != self.reps or any(t <= 0 for t in self.times):
            raise ValueError("times must hold one positive entry per rep")


def stepwise_matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent FP32 matmul oracle: accumulates partial products one
    shared-dimension index at a time, matching the scalar kernel's
    left-to-right rounding sequence without sharing any code with it."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), np.float32)
    for p in range(k):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def _pow2_int8_params() -> quant.QuantParams:
    # Power-of-two step so the integer path and the FP32 oracle round
    # identically (both sides stay exactly representable).
    step = 2.0**-7
    hi = 127.5 * step
    return quant.QuantParams(bits=8, lower=-hi, upper=hi, scheme="scale-only")


def _check_fp32(a: np.ndarray, b: np.ndarray) -> None:
    got = tensor.matmul(a, b)
    want = stepwise_matmul_f32(a, b)
    if not np.array_equal(got, want):
        raise BenchError("fp32 kernel failed its oracle cross-check")


def _check_xnor(a: np.ndarray, b: np.ndarray) -> None:
    got = bk.xnor_gemm(bk.pack_bits(a), bk.pack_bits(np.ascontiguousarray(b.T)))
    want = stepwise_matmul_f32(quant.binarize(a), quant.binarize(b))
    if not np.array_equal(got.astype(np.float32), want):
        raise BenchError("xnor kernel failed its oracle cross-check")


def _check_int8(qa: quant.QTensor, qb: quant.QTensor) -> None:
    got = bk.int8_gemm(qa, qb)
    want = stepwise_matmul_f32(quant.dequantize(qa), quant.dequantize(qb))
    if not np.array_equal(got, want):
        raise BenchError("int8 kernel failed its oracle cross-check")


def bench_gemm(
    size: tuple[int, int, int],
    reps: int,
    kernels=KERNELS,
    seed: int = 0,
    threads: int = 1,
) -> list[BenchReport]:
    """Time the requested GEMM kernels at (m, k, n).

    Inputs are seeded random and prepared (quantized / packed) before
    timing starts; one warm-up repetition per kernel is not timed.
    Speedups are relative to the median fp32 time when fp32 is included.
    """
    m, k, n = size
    if min(m, k, n) < 64:
        raise ValueError(f"benchmark sizes must be >= 64, got {size}")
    if reps < 5:
        raise ValueError(f"reps must be >= 5, got {reps}")
    kernels = tuple(kernels)
    unknown = set(kernels) - set(KERNELS)
    if unknown or not kernels:
        raise ValueError(f"kernels must be a non-empty subset of {KERNELS}")

    rng = np.random.Generator(np.random.Philox(key=seed & (2**128 - 1)))
    a = rng.uniform(-1.0, 1.0, size=(m, k)).astype(np.float32)
    b = rng.uniform(-1.0, 1.0, size=(k, n)).astype(np.float32)
    a64 = np.ascontiguousarray(a[:_CHECK_DIM, :_CHECK_DIM])
    b64 = np.ascontiguousarray(b[:_CHECK_DIM, :_CHECK_DIM])

    runners = {}
    if "fp32" in kernels:
        _check_fp32(a64, b64)
        runners["fp32"] = lambda: tensor.matmul(a, b)
    if "int8" in kernels:
        params = _pow2_int8_params()
        _check_int8(quant.quantize(a64, params), quant.quantize(b64, params))
        qa = quant.quantize(a, params)
        qb = quant.quantize(b, params)
        runners["int8"] = lambda: bk.int8_gemm(qa, qb)
    if "xnor" in kernels:
        _check_xnor(a64, b64)
        pa = bk.pack_bits(a)
        pbt = bk.pack_bits(np.ascontiguousarray(b.T))
        runners["xnor"] = lambda: bk.xnor_gemm(pa, pbt)

    medians = {}
    all_times = {}
    for name in KERNELS:
        if name not in runners:
            continue
        run = runners[name]
        run()  # warm-up, untimed
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        all_times[name] = tuple(times)
        medians[name] = statistics.median(times)

    reports = []
    fp32_median = medians.get("fp32")
    for name in KERNELS:
        if name not in medians:
            continue
        med = medians[name]
        reports.append(
            BenchReport(
                op=name,
                m=m,
                k=k,
                n=n,
                reps=reps,
                threads=threads,
                times=all_times[name],
                median_s=med,
                gops=2.0 * m * k * n / med / 1e9,
                speedup_vs_fp32=None if fp32_median is None else fp32_median / med,
            )
        )
    return reports


def bench_to_csv(reports: list[BenchReport]) -> str:
    lines = [CSV_HEADER]
    for r in reports:
        speedup = "" if r.speedup_vs_fp32 is None else repr(r.speedup_vs_fp32)
        lines.append(
            f"{r.op},{r.m},{r.k},{r.n},{r.reps},{r.threads},"
            f"{r.median_s!r},{r.gops!r},{speedup}"
        )
    return "\n".join(lines) + "\n"


def bench_to_json(reports: list[BenchReport]) -> str:
    rows = [
        {
            "op": r.op,
            "m": r.m,
            "k": r.k,
            "n": r.n,
            "reps": r.reps,
            "threads": r.threads,
            "median_s": r.median_s,
            "gops": r.gops,
            "speedup_vs_fp32": r.speedup_vs_fp32,
        }
        for r in reports
    ]
    return json.dumps(rows, sort_keys=True) + "\n"


# --------------------------------------------------------------------------
# Checkpoint size reporting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SizeRow:
    layer: str
    bits: int
    bytes: int
    fp32_bytes: int

    @property
    def compression_vs_fp32(self) -> float:
        return self.fp32_bytes / self.bytes


@dataclass(frozen=True)
class SizeReport:
    rows: tuple[SizeRow, ...]
    manifest_bytes: int  # header + manifest overhead, reported separately

    @property
    def total_bytes(self) -> int:
        return sum(r.bytes for r in self.rows)

    @property
    def total_fp32_bytes(self) -> int:
        return sum(r.fp32_bytes for r in self.rows)

    @property
    def total_compression(self) -> float:
        if self.total_bytes == 0:
            return 1.0
        return self.total_fp32_bytes / self.total_bytes


def size_report(path: str) -> SizeReport:
    """Weight-blob sizes per layer and their compression vs FP32 storage."""
    manifest, blob_start, _ = read_manifest(path)
    rows = []
    for i, entry in enumerate(manifest["layers"]):
        if "weights" not in entry or entry["weights"] is None:
            continue
        fields = {k: v for k, v in entry.items() if k not in ("weights", "act", "alpha")}
        spec = LayerSpec(**fields)
        numel = int(np.prod(spec.weight_shape()))
        rows.append(
            SizeRow(
                layer=f"{i}:{spec.kind}",
                bits=spec.weight_bits,
                bytes=entry["weights"]["length"],
                fp32_bytes=4 * numel,
            )
        )
    return SizeReport(rows=tuple(rows), manifest_bytes=blob_start)


SIZE_CSV_HEADER = "layer,bits,bytes,compression_vs_fp32"


def size_to_csv(report: SizeReport) -> str:
    lines = [SIZE_CSV_HEADER]
    for r in report.rows:
        lines.append(f"{r.layer},{r.bits},{r.bytes},{r.compression_vs_fp32!r}")
    lines.append(f"total,,{report.total_bytes},{report.total_compression!r}")
    lines.append(f"manifest,,{report.manifest_bytes},")
    return "\n".join(lines) + "\n"


def size_to_json(report: SizeReport) -> str:
    doc = {
        "layers": [
            {
                "layer": r.layer,
                "bits": r.bits,
                "bytes": r.bytes,
                "compression_vs_fp32": r.compression_vs_fp32,
            }
            for r in report.rows
        ],
        "total": {
            "bytes": report.total_bytes,
            "compression_vs_fp32": report.total_compression,
        },
        "manifest_bytes": report.manifest_bytes,
    }
    return json.dumps(doc, sort_keys=True) + "\n"

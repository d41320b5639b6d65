"""Command-line interface: train, eval, quantize, bench, pack, size.

Machine-readable output (JSON or CSV) goes to stdout; progress and
diagnostics go to stderr.  Exit codes: 0 success, 1 usage error,
2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys

import numpy as np

from . import bench as bench_mod
from . import bitkernels as bk
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    BenchError,
    CalibrationError,
    CheckpointError,
    ConfigError,
    GraphError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedSchemeError,
)
from .model import build_model, load_dataset, parse_config, parse_data_config
from .train import Hyper, evaluate, post_training_quantize, train

_RUNTIME_ERRORS = (
    BenchError,
    CalibrationError,
    CheckpointError,
    ConfigError,
    GraphError,
    ShapeError,
    TrainingDivergedError,
    UnsupportedSchemeError,
    ValueError,
    OSError,
)


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def resolve_threads(requested: int | None) -> int:
    """--threads flag, BQ_THREADS env var, then machine parallelism; the
    result is clamped to what the kernel runtime supports and recorded in
    outputs."""
    if requested is None:
        env = os.environ.get("BQ_THREADS")
        if env is not None:
            try:
                requested = int(env)
            except ValueError:
                raise ValueError(f"BQ_THREADS must be an integer, got {env!r}") from None
        else:
            requested = os.cpu_count() or 1
    if requested < 1:
        raise ValueError(f"thread count must be >= 1, got {requested}")
    import numba

    cap = numba.config.NUMBA_NUM_THREADS
    threads = min(requested, cap)
    if threads != requested:
        _log(f"note: clamping threads from {requested} to {threads} (machine limit)")
    numba.set_num_threads(threads)
    return threads


def _read_json(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from None


def _cmd_train(args) -> int:
    threads = resolve_threads(args.threads)
    cfg = parse_config(_read_json(args.config))
    dataset = load_dataset(cfg.data, cfg.seed)
    model = build_model(cfg.layers, cfg.seed)
    hyper = Hyper(
        lr=cfg.train.lr,
        epochs=cfg.train.epochs,
        batch=cfg.train.batch,
        ema_momentum=cfg.quant.ema_momentum,
    )
    _log(f"training {len(cfg.layers)}-layer model on {len(dataset)} samples "
         f"(seed {cfg.seed}, threads {threads})")
    report = train(model, dataset, hyper)
    for entry in report.epochs:
        _log(f"epoch {entry.epoch}: loss={entry.loss:.6f} accuracy={entry.accuracy:.4f}")
    save_checkpoint(model, args.out)
    _log(f"saved checkpoint to {args.out}")
    sys.stdout.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")
    return 0


_MODE_FLAGS = {"fake": "fake-quant", "int": "integer-kernel"}


def _cmd_eval(args) -> int:
    resolve_threads(args.threads)
    model = load_checkpoint(args.model)
    data_cfg = parse_data_config(_read_json(args.data), "data")
    dataset = load_dataset(data_cfg, model.seed)
    mode = _MODE_FLAGS[args.mode]
    metrics = evaluate(model, dataset, mode)
    sys.stdout.write(
        json.dumps(
            {
                "accuracy": metrics.accuracy,
                "loss": metrics.loss,
                "n": metrics.n,
                "mode": mode,
            },
            sort_keys=True,
        )
        + "\n"
    )
    return 0


def _cmd_quantize(args) -> int:
    resolve_threads(args.threads)
    model = load_checkpoint(args.model)
    data_cfg = parse_data_config(_read_json(args.calib), "calib")
    calib = load_dataset(data_cfg, model.seed)
    quantized = post_training_quantize(model, calib, args.bits, args.scheme)
    save_checkpoint(quantized, args.out)
    sys.stdout.write(
        json.dumps(
            {
                "bits": args.bits,
                "scheme": args.scheme,
                "out": args.out,
                "layers": len(quantized.specs),
            },
            sort_keys=True,
        )
        + "\n"
    )
    return 0


def _cmd_bench(args) -> int:
    threads = resolve_threads(args.threads)
    kernels = tuple(k.strip() for k in args.kernels.split(",") if k.strip())
    reports = bench_mod.bench_gemm(
        (args.size, args.size, args.size),
        reps=args.reps,
        kernels=kernels,
        seed=args.seed,
        threads=threads,
    )
    if args.format == "csv":
        sys.stdout.write(bench_mod.bench_to_csv(reports))
    else:
        sys.stdout.write(bench_mod.bench_to_json(reports))
    return 0


def _cmd_pack(args) -> int:
    raw = np.fromfile(args.infile, dtype="<f4")
    expected = args.rows * args.cols
    if raw.size != expected:
        raise ValueError(
            f"{args.infile} holds {raw.size} float32 values, "
            f"expected rows*cols = {expected}"
        )
    bt = bk.pack_bits(raw.reshape(args.rows, args.cols).astype(np.float32))
    blob = struct.pack("<QQ", bt.rows, bt.cols) + bt.words.astype("<u8").tobytes()
    with open(args.out, "wb") as f:
        f.write(blob)
    sys.stdout.write(
        json.dumps(
            {
                "rows": bt.rows,
                "cols": bt.cols,
                "words_per_row": bt.words_per_row,
                "bytes": len(blob),
                "out": args.out,
            },
            sort_keys=True,
        )
        + "\n"
    )
    return 0


def _cmd_size(args) -> int:
    report = bench_mod.size_report(args.model)
    if args.format == "csv":
        sys.stdout.write(bench_mod.size_to_csv(report))
    else:
        sys.stdout.write(bench_mod.size_to_json(report))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bitquant", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    def add_threads(p):
        p.add_argument("--threads", type=int, default=None,
                       help="kernel thread count (default: BQ_THREADS or machine parallelism)")

    p = sub.add_parser("train", help="quantization-aware training from a config file")
    p.add_argument("--config", required=True, help="JSON training configuration")
    p.add_argument("--out", required=True, help="checkpoint output path")
    add_threads(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="JSON data description")
    p.add_argument("--mode", choices=sorted(_MODE_FLAGS), default="fake",
                   help="fake: quantize-dequantize FP32 path; int: integer kernels")
    add_threads(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("quantize", help="post-training quantization of an FP32 checkpoint")
    p.add_argument("--model", required=True, help="FP32 checkpoint path")
    p.add_argument("--bits", required=True, type=int, help="target bit-width")
    p.add_argument("--calib", required=True, help="JSON data description for calibration")
    p.add_argument("--scheme", default="scale-only",
                   choices=("scale-only", "affine", "symmetric"))
    p.add_argument("--out", required=True, help="quantized checkpoint output path")
    add_threads(p)
    p.set_defaults(fn=_cmd_quantize)

    p = sub.add_parser("bench", help="micro-benchmark the GEMM kernels")
    p.add_argument("--op", required=True, choices=("gemm",))
    p.add_argument("--size", required=True, type=int, help="cube dimension (m=k=n)")
    p.add_argument("--reps", required=True, type=int, help="timed repetitions (>= 5)")
    p.add_argument("--kernels", default="fp32,int8,xnor",
                   help="comma-separated subset of fp32,int8,xnor")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--seed", type=int, default=0)
    add_threads(p)
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("pack", help="pack a raw float32 matrix into sign bits")
    p.add_argument("--in", dest="infile", required=True, help="raw little-endian float32 file")
    p.add_argument("--rows", required=True, type=int)
    p.add_argument("--cols", required=True, type=int)
    p.add_argument("--out", required=True, help="packed bit blob output path")
    add_threads(p)
    p.set_defaults(fn=_cmd_pack)

    p = sub.add_parser("size", help="per-layer storage and compression of a checkpoint")
    p.add_argument("--model", required=True, help="checkpoint path")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    add_threads(p)
    p.set_defaults(fn=_cmd_size)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except _RUNTIME_ERRORS as e:
        print(f"bitquant: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

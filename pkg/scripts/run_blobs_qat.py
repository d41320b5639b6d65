#!/usr/bin/env python3
"""Train the blobs MLP at three precision settings and compare them.

Runs the FP32 baseline, the W1A1 variant (8-bit input-facing layer,
binary second layer), and W8A8 post-training quantization of the FP32
model, then cross-checks the binary model's two evaluation paths.

    python3 scripts/run_blobs_qat.py --seed 1 --epochs 20
"""

import argparse
import sys

import numpy as np

from bitquant.data import gen_synthetic
from bitquant.model import LayerSpec, build_model
from bitquant.train import (
    Hyper,
    evaluate,
    post_training_quantize,
    predict_logits,
    train,
)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=1)
    parser.add_argument("--n", type=int, default=2000)
    parser.add_argument("--epochs", type=int, default=20)
    parser.add_argument("--lr", type=float, default=0.1)
    parser.add_argument("--batch", type=int, default=64)
    args = parser.parse_args()

    dataset = gen_synthetic("blobs", args.n, args.seed)
    hyper = Hyper(lr=args.lr, epochs=args.epochs, batch=args.batch)

    fp32 = build_model(
        [
            LayerSpec(kind="linear", in_features=2, out_features=64),
            LayerSpec(kind="relu"),
            LayerSpec(kind="linear", in_features=64, out_features=2),
        ],
        args.seed,
    )
    fp32_report = train(fp32, dataset, hyper)

    w1a1 = build_model(
        [
            LayerSpec(kind="linear", in_features=2, out_features=64,
                      weight_bits=8, act_bits=8),
            LayerSpec(kind="linear", in_features=64, out_features=2,
                      weight_bits=1, act_bits=1),
        ],
        args.seed,
    )
    w1a1_report = train(w1a1, dataset, hyper)

    ptq = post_training_quantize(fp32, dataset, bits=8)
    ptq_metrics = evaluate(ptq, dataset)

    print(f"{'model':<12} {'accuracy':>9} {'loss':>9}")
    for name, report in (("fp32", fp32_report), ("w1a1", w1a1_report)):
        print(f"{name:<12} {report.final.accuracy:>9.4f} {report.final.loss:>9.4f}")
    print(f"{'ptq-w8a8':<12} {ptq_metrics.accuracy:>9.4f} {ptq_metrics.loss:>9.4f}")

    fake = predict_logits(w1a1, dataset.features, "fake-quant")
    integer = predict_logits(w1a1, dataset.features, "integer-kernel")
    agreement = float((fake.argmax(1) == integer.argmax(1)).mean())
    max_abs = float(np.abs(fake - integer).max())
    print(f"\nw1a1 dual-path: label agreement {agreement:.4f}, "
          f"max |logit diff| {max_abs:g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

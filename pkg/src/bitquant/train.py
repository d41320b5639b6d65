"""Quantization-aware training loop, evaluation, and post-training quantization."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import autograd as ag
from . import model as m
from . import quant, tensor
from .data import Dataset
from .errors import TrainingDivergedError

_EVAL_BATCH = 512

MODES = ("fake-quant", "integer-kernel")


@dataclass(frozen=True)
class Hyper:
    lr: float
    epochs: int
    batch: int
    ema_momentum: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not 0.0 <= self.ema_momentum < 1.0:
            raise ValueError(f"ema_momentum must be in [0, 1), got {self.ema_momentum}")


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    loss: float
    n: int


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class TrainReport:
    seed: int
    epochs: list[EpochMetrics]
    wall_seconds: float

    @property
    def final(self) -> EpochMetrics:
        return self.epochs[-1]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": [
                {"epoch": e.epoch, "loss": e.loss, "accuracy": e.accuracy}
                for e in self.epochs
            ],
            "final_loss": self.final.loss,
            "final_accuracy": self.final.accuracy,
            "wall_seconds": self.wall_seconds,
        }


def _nll_batch(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample negative log-likelihood, max-subtracted for stability."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    picked = shifted[np.arange(logits.shape[0]), labels]
    return log_z - picked


def evaluate(model: m.Model, dataset: Dataset, mode: str = "fake-quant") -> Metrics:
    """Accuracy and mean loss over a dataset.

    ``fake-quant`` runs the quantize-dequantize forward; ``integer-kernel``
    routes quantized layers through the bit-packed / integer GEMMs.  Both
    modes use the model's stored activation ranges.  The two paths agree up
    to FP32 rounding of the epilogue; an intermediate value landing exactly
    on a sign boundary (an integer dot product of exactly zero) can tip a
    downstream binarization the other way on rare samples.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, _EVAL_BATCH):
        xb = dataset.features[start : start + _EVAL_BATCH]
        yb = dataset.labels[start : start + _EVAL_BATCH]
        logits = predict_logits(model, xb, mode)
        correct += int((logits.argmax(axis=1) == yb).sum())
        loss_sum += float(_nll_batch(logits, yb).sum(dtype=np.float64))
    return Metrics(accuracy=correct / n, loss=loss_sum / n, n=n)


def predict_logits(model: m.Model, x: np.ndarray, mode: str = "fake-quant") -> np.ndarray:
    if mode == "fake-quant":
        node, _ = m.forward_fake(model, x, training=False)
        return node.value
    if mode == "integer-kernel":
        return m.forward_int(model, x)
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


def _epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    # Counter-based generator keyed on (seed, epoch): identical shuffles
    # on every platform and run.
    key = ((seed & (2**64 - 1)) << 64) | (epoch & (2**64 - 1))
    rng = np.random.Generator(np.random.Philox(key=key))
    return rng.permutation(n)


def train(model: m.Model, dataset: Dataset, hyper: Hyper) -> TrainReport:
    """Quantization-aware training: fake-quantized forward, straight-through
    backward, SGD on the latent FP32 weights, EMA activation ranges.

    The report carries one metrics entry for the untrained model and one
    per completed epoch, each computed by :func:`evaluate` on the full
    dataset.  Mutates ``model`` (weights and activation ranges) in place.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    start_time = time.perf_counter()
    entries = [_epoch_entry(model, dataset, 0)]
    n = len(dataset)
    for epoch in range(1, hyper.epochs + 1):
        order = _epoch_permutation(model.seed, epoch, n)
        for start in range(0, n, hyper.batch):
            batch_ix = order[start : start + hyper.batch]
            xb = dataset.features[batch_ix]
            yb = dataset.labels[batch_ix]
            logits, weight_leaves = m.forward_fake(
                model, xb, training=True, ema_momentum=hyper.ema_momentum
            )
            loss = ag.cross_entropy(logits, yb)
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}"
                )
            ag.backward(loss)
            indices = sorted(weight_leaves)
            params = [model.weights[i] for i in indices]
            grads = [weight_leaves[i].grad for i in indices]
            updated = ag.sgd_step(params, grads, hyper.lr)
            for i, w in zip(indices, updated):
                model.weights[i] = w
        entries.append(_epoch_entry(model, dataset, epoch))
    wall = time.perf_counter() - start_time
    return TrainReport(seed=model.seed, epochs=entries, wall_seconds=wall)


def _epoch_entry(model: m.Model, dataset: Dataset, epoch: int) -> EpochMetrics:
    metrics = evaluate(model, dataset, "fake-quant")
    return EpochMetrics(epoch=epoch, loss=metrics.loss, accuracy=metrics.accuracy)


def post_training_quantize(
    model: m.Model, calib: Dataset, bits: int, scheme: str = "scale-only"
) -> m.Model:
    """Quantize a trained FP32 model without retraining.

    Weights get per-channel min/max ranges; activation ranges come from
    FP32 forward passes over the calibration set.  ``bits=32`` returns an
    unchanged copy; ``bits=1`` binarizes (no ranges needed).
    """
    if not model.is_fp32():
        raise ValueError("post-training quantization expects an FP32 model")
    if len(calib) == 0:
        raise ValueError("calibration dataset is empty")
    if bits == 32:
        return model.copy()
    if bits not in range(1, 9):
        raise ValueError(f"bits must be 1-8 or 32, got {bits}")

    quantized = model.copy()
    quantized.specs = [
        replace(s, weight_bits=bits, act_bits=bits, scheme=scheme)
        if s.has_weights
        else s
        for s in model.specs
    ]

    # Per-layer input ranges observed while running the FP32 model.
    site_inputs: dict[int, list[np.ndarray]] = {
        i: [] for i, s in enumerate(model.specs) if s.has_weights
    }
    for start in range(0, len(calib), _EVAL_BATCH):
        xb = calib.features[start : start + _EVAL_BATCH]
        out = np.asarray(xb, dtype=np.float32)
        for i, spec in enumerate(model.specs):
            if spec.kind == "relu":
                out = np.maximum(out, np.float32(0.0))
                continue
            if spec.kind == "linear" and out.ndim > 2:
                out = np.ascontiguousarray(out.reshape(out.shape[0], -1))
            site_inputs[i].append(out)
            if spec.kind == "linear":
                out = tensor.matmul(out, np.ascontiguousarray(model.weights[i].T))
            else:
                out = tensor.conv2d(out, model.weights[i], spec.stride, spec.padding)

    for i, spec in enumerate(quantized.specs):
        if not spec.has_weights:
            continue
        if bits > 1:
            quantized.weight_params[i] = quant.calibrate_minmax(
                [model.weights[i]], bits, scheme=scheme, axis=0
            )
            quantized.act_params[i] = quant.calibrate_minmax(
                site_inputs[i], bits, scheme=scheme, axis=None
            )
    return quantized

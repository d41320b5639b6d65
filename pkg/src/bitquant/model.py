"""Layer specifications, trainable models, and the two forward paths.

A model is an ordered list of :class:`LayerSpec` plus latent FP32 weights.
Quantization is forward-only: the fake-quant path quantizes weights and
activations on the fly while gradients update the latent copy; the
integer-kernel path runs the same arithmetic through the bit-packed /
integer GEMMs for inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import bitkernels as bk
from . import quant, tensor
from .data import Dataset
from .errors import ConfigError, ShapeError, UnsupportedSchemeError

_VALID_BITS = set(range(1, 9)) | {32}

KINDS = ("linear", "conv2d", "relu")


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind, shape parameters, and per-layer quantization choices.

    ``weight_bits`` / ``act_bits`` of 32 mean "leave that path in FP32";
    1 selects sign binarization; 2-8 selects uniform quantization with the
    layer's scheme.  ``granularity`` applies to weights only (activations
    are always per-tensor).
    """

    kind: str
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kh: int | None = None
    kw: int | None = None
    stride: int = 1
    padding: int = 0
    weight_bits: int = 32
    act_bits: int = 32
    scheme: str = "scale-only"
    granularity: str = "per-channel"
    binary_scale: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}; expected one of {KINDS}")
        if self.weight_bits not in _VALID_BITS:
            raise ConfigError(
                f"weight_bits must be 1-8 or 32, got {self.weight_bits}"
            )
        if self.act_bits not in _VALID_BITS:
            raise ConfigError(f"act_bits must be 1-8 or 32, got {self.act_bits}")
        if self.scheme not in quant.SCHEMES:
            raise ConfigError(
                f"unknown scheme {self.scheme!r}; expected one of {quant.SCHEMES}"
            )
        if self.granularity not in ("per-tensor", "per-channel"):
            raise ConfigError(
                f"granularity must be per-tensor or per-channel, got {self.granularity!r}"
            )
        if self.kind == "linear":
            if not (self.in_features and self.in_features > 0):
                raise ConfigError("linear layer requires positive in_features")
            if not (self.out_features and self.out_features > 0):
                raise ConfigError("linear layer requires positive out_features")
        elif self.kind == "conv2d":
            for name in ("in_channels", "out_channels", "kh", "kw"):
                v = getattr(self, name)
                if not (v and v > 0):
                    raise ConfigError(f"conv2d layer requires positive {name}")
            if self.stride < 1:
                raise ConfigError(f"conv2d stride must be >= 1, got {self.stride}")
            if self.padding < 0:
                raise ConfigError(f"conv2d padding must be >= 0, got {self.padding}")

    @property
    def has_weights(self) -> bool:
        return self.kind in ("linear", "conv2d")

    def weight_shape(self) -> tuple:
        if self.kind == "linear":
            return (self.out_features, self.in_features)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kh, self.kw)
        raise ConfigError(f"{self.kind} layer has no weights")

    def fan_in_out(self) -> tuple[int, int]:
        if self.kind == "linear":
            return self.in_features, self.out_features
        rf = self.kh * self.kw
        return self.in_channels * rf, self.out_channels * rf


@dataclass
class Model:
    """Ordered layers, latent FP32 weights, and quantizer state.

    ``act_params`` holds the running activation ranges (updated by EMA
    during training, frozen afterwards).  ``weight_params`` is None while
    training (ranges are re-derived from the latent weights every step)
    and pinned for post-training-quantized or loaded models.
    """

    specs: list[LayerSpec]
    weights: list[np.ndarray | None]
    act_params: list[quant.QuantParams | None]
    weight_params: list[quant.QuantParams | None]
    binary_scales: list[float | None]
    seed: int

    def copy(self) -> "Model":
        return Model(
            specs=list(self.specs),
            weights=[None if w is None else w.copy() for w in self.weights],
            act_params=list(self.act_params),
            weight_params=list(self.weight_params),
            binary_scales=list(self.binary_scales),
            seed=self.seed,
        )

    def is_fp32(self) -> bool:
        return all(
            s.weight_bits == 32 and s.act_bits == 32
            for s in self.specs
            if s.has_weights
        )


def build_model(specs: list[LayerSpec], seed: int) -> Model:
    """Initialize latent weights from a seeded uniform(-a, a) with
    a = sqrt(6 / (fan_in + fan_out)); bit-identical for equal seeds."""
    rng = np.random.Generator(np.random.Philox(key=seed & (2**128 - 1)))
    weights: list[np.ndarray | None] = []
    for spec in specs:
        if not spec.has_weights:
            weights.append(None)
            continue
        fan_in, fan_out = spec.fan_in_out()
        a = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=spec.weight_shape()).astype(np.float32))
    n = len(specs)
    return Model(
        specs=list(specs),
        weights=weights,
        act_params=[None] * n,
        weight_params=[None] * n,
        binary_scales=[None] * n,
        seed=seed,
    )


def weight_quant_params(model: Model, i: int) -> quant.QuantParams:
    """Quantization range for layer i's weights: the frozen params if the
    model carries them, otherwise min/max of the current latent weights."""
    if model.weight_params[i] is not None:
        return model.weight_params[i]
    spec = model.specs[i]
    axis = 0 if spec.granularity == "per-channel" else None
    return quant.calibrate_minmax(
        [model.weights[i]], spec.weight_bits, scheme=spec.scheme, axis=axis
    )


def binary_alpha(model: Model, i: int) -> float:
    if model.binary_scales[i] is not None:
        return model.binary_scales[i]
    return float(np.mean(np.abs(model.weights[i])))


def _quantized_weight_node(model: Model, i: int, w_leaf: ag.Node) -> ag.Node:
    spec = model.specs[i]
    if spec.weight_bits == 32:
        return w_leaf
    if spec.weight_bits == 1:
        node = ag.binarize(w_leaf)
        if spec.binary_scale:
            # The per-layer magnitude multiplier is treated as a constant
            # within the step; gradients flow through the sign path only.
            node = ag.scale(node, binary_alpha(model, i))
        return node
    return ag.fake_quantize(w_leaf, weight_quant_params(model, i))


def _update_act_params(model: Model, i: int, batch: np.ndarray, momentum: float) -> None:
    spec = model.specs[i]
    current = model.act_params[i]
    if current is None:
        model.act_params[i] = quant.calibrate_minmax(
            [batch], spec.act_bits, scheme=spec.scheme, axis=None
        )
    else:
        model.act_params[i] = quant.calibrate_ema(current, batch, momentum)


def forward_fake(
    model: Model,
    x: np.ndarray,
    training: bool = False,
    ema_momentum: float = 0.9,
) -> tuple[ag.Node, dict[int, ag.Node]]:
    """Fake-quantization forward pass, returning the logits node and the
    weight leaves (for gradient collection).

    When ``training`` is true, activation ranges are EMA-updated from the
    pre-quantization batch before the quantize node is created.
    """
    node = ag.leaf(x, requires_grad=False, name="input")
    weight_leaves: dict[int, ag.Node] = {}
    for i, spec in enumerate(model.specs):
        if spec.kind == "relu":
            node = ag.relu(node)
            continue
        if spec.kind == "linear" and node.value.ndim > 2:
            node = ag.flatten2d(node)
        if spec.act_bits == 1:
            node = ag.binarize(node)
        elif spec.act_bits < 32:
            if training:
                _update_act_params(model, i, node.value, ema_momentum)
            if model.act_params[i] is not None:
                node = ag.fake_quantize(node, model.act_params[i])
        w_leaf = ag.leaf(model.weights[i], requires_grad=True, name=f"w{i}")
        weight_leaves[i] = w_leaf
        w_node = _quantized_weight_node(model, i, w_leaf)
        if spec.kind == "linear":
            node = ag.linear(node, w_node)
        else:
            node = ag.conv2d(node, w_node, spec.stride, spec.padding)
    return node, weight_leaves


def _require_zero_point_free(params: quant.QuantParams, what: str) -> None:
    if params.scheme == "affine":
        raise UnsupportedSchemeError(
            f"integer-kernel mode does not support affine {what}; "
            "dequantize and use the FP32 path instead"
        )


def _int_linear(model: Model, i: int, x: np.ndarray) -> np.ndarray:
    spec = model.specs[i]
    w = model.weights[i]
    if spec.weight_bits == 1:
        counts = bk.xnor_gemm(bk.pack_bits(x), bk.pack_bits(w))
        out = counts.astype(np.float32)
        if spec.binary_scale:
            out = out * np.float32(binary_alpha(model, i))
        return out
    act_params = model.act_params[i]
    if act_params is None:
        raise ValueError(
            f"integer-kernel evaluation of layer {i} requires calibrated "
            "activation ranges (train or post-training-quantize first)"
        )
    _require_zero_point_free(act_params, "activations")
    w_params = weight_quant_params(model, i)
    _require_zero_point_free(w_params, "weights")
    qa = quant.quantize(x, act_params)
    qw_t = quant.transpose_qtensor(quant.quantize(w, w_params))
    return bk.int8_gemm(qa, qw_t)


def _int_conv(model: Model, i: int, x: np.ndarray) -> np.ndarray:
    spec = model.specs[i]
    w = model.weights[i]
    n = x.shape[0]
    o = spec.out_channels
    if spec.weight_bits == 1:
        if spec.padding != 0:
            raise ValueError(
                "integer-kernel binary conv2d supports padding=0 only "
                "(zero padding is not representable in packed signs)"
            )
        xb = quant.binarize(x)
        cols, out_h, out_w = tensor.im2col(xb, spec.kh, spec.kw, spec.stride, 0)
        counts = bk.xnor_gemm(bk.pack_bits(cols), bk.pack_bits(w.reshape(o, -1)))
        out_mat = counts.astype(np.float32)
        if spec.binary_scale:
            out_mat = out_mat * np.float32(binary_alpha(model, i))
    else:
        act_params = model.act_params[i]
        if act_params is None:
            raise ValueError(
                f"integer-kernel evaluation of layer {i} requires calibrated "
                "activation ranges (train or post-training-quantize first)"
            )
        _require_zero_point_free(act_params, "activations")
        if spec.padding > 0:
            # zero padding enters the patch matrix as code 0, which must be
            # on the grid and reconstruct to exactly 0.0 to match the FP32
            # path's literal zero padding
            if act_params.scheme != "scale-only":
                raise UnsupportedSchemeError(
                    "integer-kernel conv2d with padding requires scale-only "
                    "activations (pad code 0 must reconstruct to 0.0)"
                )
            if not (float(act_params.lower) <= 0.0 <= float(act_params.upper)):
                raise UnsupportedSchemeError(
                    "integer-kernel conv2d with padding requires an activation "
                    f"range containing 0, got ({float(act_params.lower)}, "
                    f"{float(act_params.upper)})"
                )
        w_params = weight_quant_params(model, i)
        _require_zero_point_free(w_params, "weights")
        qa_codes = quant.quantize(x, act_params).codes
        cols, out_h, out_w = tensor.im2col(
            qa_codes, spec.kh, spec.kw, spec.stride, spec.padding
        )
        qa_cols = quant.QTensor(np.ascontiguousarray(cols), act_params)
        qw = quant.quantize(w.reshape(o, -1), _reshape_conv_params(w_params))
        out_mat = bk.int8_gemm(qa_cols, quant.transpose_qtensor(qw))
    out = out_mat.reshape(n, out_h, out_w, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out)


def _reshape_conv_params(params: quant.QuantParams) -> quant.QuantParams:
    """Conv weight params apply unchanged to the (O, C*kh*kw) matrix view."""
    if params.axis not in (None, 0):
        raise ShapeError("conv weight params must be per-tensor or per-out-channel")
    return params


def forward_int(model: Model, x: np.ndarray) -> np.ndarray:
    """Integer-kernel forward pass: binary layers through XNOR/popcount,
    2-8 bit layers through the int32-accumulating GEMM, FP32 layers
    through the scalar FP32 kernel."""
    out = np.asarray(x, dtype=np.float32)
    for i, spec in enumerate(model.specs):
        if spec.kind == "relu":
            out = tensor.relu(out)
            continue
        if spec.kind == "linear" and out.ndim > 2:
            out = np.ascontiguousarray(out.reshape(out.shape[0], -1))
        wb, ab = spec.weight_bits, spec.act_bits
        if wb == 32 and ab == 32:
            if spec.kind == "linear":
                out = tensor.matmul(out, np.ascontiguousarray(model.weights[i].T))
            else:
                out = tensor.conv2d(out, model.weights[i], spec.stride, spec.padding)
            continue
        if (wb == 1) != (ab == 1) or 32 in (wb, ab):
            raise UnsupportedSchemeError(
                f"integer-kernel mode supports W1A1, W2-8/A2-8, or FP32 layers; "
                f"layer {i} mixes W{wb} with A{ab}"
            )
        if spec.kind == "linear":
            out = _int_linear(model, i, out)
        else:
            out = _int_conv(model, i, out)
    return out


# --------------------------------------------------------------------------
# Configuration documents
# --------------------------------------------------------------------------

_LAYER_KEYS = {
    "kind", "in_features", "out_features", "in_channels", "out_channels",
    "kh", "kw", "stride", "padding", "weight_bits", "act_bits", "scheme",
    "granularity", "binary_scale",
}


@dataclass(frozen=True)
class QuantConfig:
    scheme: str = "scale-only"
    ema_momentum: float = 0.9


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int
    batch: int


@dataclass(frozen=True)
class DataConfig:
    kind: str
    n: int | None = None
    seed: int | None = None
    images: str | None = None
    labels: str | None = None


@dataclass(frozen=True)
class RunConfig:
    seed: int
    layers: list[LayerSpec]
    quant: QuantConfig
    train: TrainConfig
    data: DataConfig


def _reject_unknown(obj: dict, allowed: set, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {path}{key!r}")


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ConfigError(f"missing required key {path}{key!r}")
    return obj[key]


def _typed(value, types, path: str):
    if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
        raise ConfigError(f"{path} has wrong type (bool)")
    if not isinstance(value, types):
        raise ConfigError(f"{path} has wrong type ({type(value).__name__})")
    return value


def parse_layer(obj: dict, path: str) -> LayerSpec:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must be an object")
    _reject_unknown(obj, _LAYER_KEYS, f"{path}.")
    kind = _typed(_require(obj, "kind", f"{path}."), str, f"{path}.kind")
    kwargs = {}
    for key, value in obj.items():
        if key == "kind":
            continue
        if key == "scheme" or key == "granularity":
            kwargs[key] = _typed(value, str, f"{path}.{key}")
        elif key == "binary_scale":
            kwargs[key] = _typed(value, bool, f"{path}.{key}")
        else:
            kwargs[key] = _typed(value, int, f"{path}.{key}")
    try:
        return LayerSpec(kind=kind, **kwargs)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def parse_data_config(obj: dict, path: str = "data") -> DataConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must be an object")
    _reject_unknown(obj, {"kind", "n", "seed", "images", "labels"}, f"{path}.")
    kind = _typed(_require(obj, "kind", f"{path}."), str, f"{path}.kind")
    if kind in ("blobs", "xor"):
        n = _typed(_require(obj, "n", f"{path}."), int, f"{path}.n")
        seed = obj.get("seed")
        if seed is not None:
            seed = _typed(seed, int, f"{path}.seed")
        return DataConfig(kind=kind, n=n, seed=seed)
    if kind == "idx":
        images = _typed(_require(obj, "images", f"{path}."), str, f"{path}.images")
        labels = _typed(_require(obj, "labels", f"{path}."), str, f"{path}.labels")
        return DataConfig(kind=kind, images=images, labels=labels)
    raise ConfigError(f"{path}.kind must be blobs, xor, or idx, got {kind!r}")


def parse_config(obj: dict) -> RunConfig:
    """Validate a training configuration document; unknown keys are rejected
    and errors name the offending field path."""
    if not isinstance(obj, dict):
        raise ConfigError("config root must be an object")
    _reject_unknown(obj, {"seed", "model", "quant", "train", "data"}, "")
    seed = _typed(_require(obj, "seed", ""), int, "seed")

    model_obj = _require(obj, "model", "")
    if not isinstance(model_obj, list) or not model_obj:
        raise ConfigError("model must be a non-empty array of layer objects")
    layers = [parse_layer(layer, f"model[{i}]") for i, layer in enumerate(model_obj)]

    quant_obj = obj.get("quant", {})
    if not isinstance(quant_obj, dict):
        raise ConfigError("quant must be an object")
    _reject_unknown(quant_obj, {"scheme", "ema_momentum"}, "quant.")
    scheme = quant_obj.get("scheme", "scale-only")
    if scheme not in quant.SCHEMES:
        raise ConfigError(f"quant.scheme must be one of {quant.SCHEMES}, got {scheme!r}")
    momentum = quant_obj.get("ema_momentum", 0.9)
    momentum = float(_typed(momentum, (int, float), "quant.ema_momentum"))
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"quant.ema_momentum must be in [0, 1), got {momentum}")
    quant_cfg = QuantConfig(scheme=scheme, ema_momentum=momentum)

    # Per-layer scheme defaults to the quant section's scheme.
    layers = [
        replace(layer, scheme=quant_cfg.scheme) if "scheme" not in model_obj[i] else layer
        for i, layer in enumerate(layers)
    ]

    train_obj = _require(obj, "train", "")
    if not isinstance(train_obj, dict):
        raise ConfigError("train must be an object")
    _reject_unknown(train_obj, {"lr", "epochs", "batch"}, "train.")
    lr = float(_typed(_require(train_obj, "lr", "train."), (int, float), "train.lr"))
    epochs = _typed(_require(train_obj, "epochs", "train."), int, "train.epochs")
    batch = _typed(_require(train_obj, "batch", "train."), int, "train.batch")
    if lr <= 0:
        raise ConfigError(f"train.lr must be positive, got {lr}")
    if epochs < 0:
        raise ConfigError(f"train.epochs must be >= 0, got {epochs}")
    if batch < 1:
        raise ConfigError(f"train.batch must be >= 1, got {batch}")
    train_cfg = TrainConfig(lr=lr, epochs=epochs, batch=batch)

    data_cfg = parse_data_config(_require(obj, "data", ""), "data")
    return RunConfig(seed=seed, layers=layers, quant=quant_cfg, train=train_cfg, data=data_cfg)


def load_dataset(cfg: DataConfig, default_seed: int) -> Dataset:
    """Materialize the dataset a config describes; synthetic kinds fall back
    to the run seed when no explicit data seed is given."""
    from .data import gen_synthetic, load_idx

    if cfg.kind in ("blobs", "xor"):
        seed = cfg.seed if cfg.seed is not None else default_seed
        return gen_synthetic(cfg.kind, cfg.n, seed)
    return load_idx(cfg.images, cfg.labels)

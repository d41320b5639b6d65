"""bitquant: low-bit quantization, binarization, and bit-packed compute.

Uniform b-bit quantization and 1-bit sign binarization with
straight-through-estimator training, plus the kernels that make low-bit
inference fast: XNOR/popcount GEMM over packed sign words and an integer
GEMM with an FP32 dequantization epilogue.
"""

from .autograd import (
    Node,
    backward,
    cross_entropy,
    leaf,
    sgd_step,
    ste_backward,
)
from .bitkernels import BitTensor, int8_gemm, pack_bits, unpack_bits, xnor_gemm
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, gen_synthetic, load_idx
from .model import LayerSpec, Model, build_model, parse_config
from .quant import (
    QTensor,
    QuantParams,
    binarize,
    calibrate_ema,
    calibrate_minmax,
    dequantize,
    fake_quantize,
    quant_step,
    quantize,
)
from .tensor import as_tensor, conv2d, matmul, minmax, relu
from .train import Hyper, evaluate, post_training_quantize, train

__version__ = "0.1.0"

__all__ = [
    "BitTensor",
    "Dataset",
    "Hyper",
    "LayerSpec",
    "Model",
    "Node",
    "QTensor",
    "QuantParams",
    "as_tensor",
    "backward",
    "binarize",
    "build_model",
    "calibrate_ema",
    "calibrate_minmax",
    "conv2d",
    "cross_entropy",
    "dequantize",
    "evaluate",
    "fake_quantize",
    "gen_synthetic",
    "int8_gemm",
    "leaf",
    "load_checkpoint",
    "load_idx",
    "matmul",
    "minmax",
    "pack_bits",
    "parse_config",
    "post_training_quantize",
    "quant_step",
    "quantize",
    "relu",
    "save_checkpoint",
    "sgd_step",
    "ste_backward",
    "train",
    "unpack_bits",
    "xnor_gemm",
]

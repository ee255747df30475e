"""ternmm: desk-scale ternary multimodal transformer toolkit.

Quantize full-precision checkpoints to packed {-1, 0, +1} weights, run
image+text -> text inference through a full-precision vision tower, an
MLP projector, and a ternary decoder, and validate the mechanism with
oracle-equivalence and gradient checks at toy scale.
"""

from .config import GenerationParams, ModelConfig, full_config, toy_config
from .kernels import KernelPlan, bitlinear_forward, dense_reference_forward
from .model import Model, load_model, param_count
from .quant import (
    PackedTernaryMatrix,
    QuantizedTokens,
    dequantize_weights,
    pack_trits,
    quantize_activations_absmax,
    quantize_weights_absmean,
    unpack_trits,
)

__version__ = "0.1.0"

__all__ = [
    "GenerationParams",
    "KernelPlan",
    "Model",
    "ModelConfig",
    "PackedTernaryMatrix",
    "QuantizedTokens",
    "bitlinear_forward",
    "dense_reference_forward",
    "dequantize_weights",
    "full_config",
    "load_model",
    "pack_trits",
    "param_count",
    "quantize_activations_absmax",
    "quantize_weights_absmean",
    "toy_config",
    "unpack_trits",
]

"""Quantization-aware training with native int8/int4 arithmetic."""

from .quant import CONFIGS, QuantSpec, QuantizedTensor, dequantize, fake_quant, quantize, quantize_dynamic
from .model import EncoderConfig, LayerQuantPlan, build_encoder, toy_encoder

__version__ = "0.1.0"

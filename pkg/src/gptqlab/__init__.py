"""Learned-rounding post-training quantization on a small numpy network stack."""

from .codec import QuantParams, make_params, quantize_weight
from .reconstruct import GptqConfig, quantize_network
from .tensor import LayerRecord, NetworkRecord, load_network, save_network

__all__ = [
    "GptqConfig",
    "LayerRecord",
    "NetworkRecord",
    "QuantParams",
    "load_network",
    "make_params",
    "quantize_network",
    "quantize_weight",
    "save_network",
]
__version__ = "0.1.0"

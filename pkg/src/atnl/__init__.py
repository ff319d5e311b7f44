"""atnl: an encoder-decoder Transformer on a small reverse-mode autodiff engine."""

from .attention import (
    AttentionMask,
    causal_mask,
    multi_head_attention,
    padding_mask,
    scaled_dot_product_attention,
)
from .model import BOS, EOS, PAD, ModelConfig, Transformer
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "AttentionMask",
    "BOS",
    "EOS",
    "ModelConfig",
    "PAD",
    "Tensor",
    "Transformer",
    "backward",
    "causal_mask",
    "multi_head_attention",
    "no_grad",
    "padding_mask",
    "scaled_dot_product_attention",
]

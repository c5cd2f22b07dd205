"""Minimal sparse-convolution toolkit with reverse-mode gradients."""

from .autograd import Tensor, backward, constant, parameter
from .ops import (
    SparseFeatureMap,
    add,
    bce_with_logits,
    concat,
    embed,
    expansion_conv,
    gelu,
    linear,
    num_taps,
    pool_down,
    relu,
    select,
    submanifold_conv,
    unpool_up,
)
from .optim import AdamHyper, AdamState, ParamStore, adam_step, cosine_lr

__all__ = [
    "AdamHyper", "AdamState", "ParamStore", "SparseFeatureMap", "Tensor", "adam_step", "add",
    "backward", "bce_with_logits", "concat", "constant", "cosine_lr", "embed", "expansion_conv",
    "gelu", "linear", "num_taps", "parameter", "pool_down", "relu", "select", "submanifold_conv",
    "unpool_up",
]

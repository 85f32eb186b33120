"""Minimal dense-tensor kernel with reverse-mode gradients."""

from .ops import (
    ConfigError,
    add,
    attention_mask,
    causal_windowed_attention,
    concat,
    cross_entropy_logits,
    embedding,
    exp,
    gather_rows,
    matmul,
    mean,
    mul,
    multilinear,
    reshape,
    rms_norm,
    rotary,
    rotary_tables,
    segment_mean,
    silu,
    softmax,
    sub,
    sum,
)
from .tensor import DEBUG, ShapeError, Tensor, as_tensor, backward, grad_enabled, no_grad

__all__ = [
    "ConfigError", "DEBUG", "ShapeError", "Tensor", "add", "as_tensor", "attention_mask", "backward",
    "causal_windowed_attention", "concat", "cross_entropy_logits", "embedding", "exp", "gather_rows",
    "grad_enabled", "matmul", "mean", "mul", "multilinear", "no_grad", "reshape", "rms_norm", "rotary",
    "rotary_tables", "segment_mean", "silu", "softmax", "sub", "sum",
]

"""Minimal reverse-mode autodiff over dense numpy-backed tensors."""

from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .rng import Rng, as_rng
from .tensor import (
    DEFAULT_DTYPE,
    Tensor,
    add,
    add_channelwise,
    add_rowwise,
    backward,
    concat,
    conv2d,
    elementwise,
    embedding,
    matmul,
    mean,
    mse,
    mul,
    no_grad,
    randn,
    reshape,
    scale,
    silu,
    sinusoidal_embedding,
    softmax,
    sub,
    tensor,
    transpose,
    upsample2x,
    zeros,
    zeros_like,
)

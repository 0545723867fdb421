"""Minimal tensor substrate: convolution, activations, pooling, losses, Adam."""
from ._backend import BACKEND
from .frame import Conv2d, Frame, Param
from .functional import (
    DEFAULT_SLOPE,
    channel_pool,
    channel_pool_backward,
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    l1_loss,
    leaky_relu,
    leaky_relu_backward,
    mse_loss,
    sigmoid,
    sigmoid_backward,
    split_channels,
)
from .optim import Adam, adam_step

__all__ = [
    "BACKEND", "Conv2d", "Frame", "Param", "Adam", "adam_step", "DEFAULT_SLOPE",
    "channel_pool", "channel_pool_backward", "concat_channels", "conv2d_backward",
    "conv2d_forward", "l1_loss", "leaky_relu", "leaky_relu_backward", "mse_loss",
    "sigmoid", "sigmoid_backward", "split_channels",
]

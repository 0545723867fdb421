"""Differentiable primitives on NCHW arrays, each paired with its backward.

These are the reference-facing versions of the layer math: plain arrays in,
plain arrays out, any float dtype. The model runs the same math through the
channels-last frame path in :mod:`ngdenoise.nncore.frame`.
"""
from __future__ import annotations

import numpy as np

from ._backend import kernels

DEFAULT_SLOPE = 0.2


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _check_conv(x, weight):
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if weight.shape[2] != weight.shape[3]:
        raise ValueError("only square kernels are supported")


def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` (N, C, H, W) with ``weight`` (O, C, k, k), zero padding."""
    _check_conv(x, weight)
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    oh, ow = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {k} with padding {padding} does not fit a {h}x{w} input")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(np.ascontiguousarray(xp), k, stride, oh, ow)
    out = weight.reshape(o, -1) @ cols
    if bias is not None:
        out += bias.reshape(o, 1)
    return np.ascontiguousarray(out.reshape(o, n, oh, ow).transpose(1, 0, 2, 3))


def conv2d_backward(x, weight, grad_out, stride=1, padding=0):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias."""
    _check_conv(x, weight)
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    oh, ow = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if grad_out.shape != (n, o, oh, ow):
        raise ValueError(f"grad_out shape {grad_out.shape} does not match forward output {(n, o, oh, ow)}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = kernels.im2col(np.ascontiguousarray(xp), k, stride, oh, ow)
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(o, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    gcols = weight.reshape(o, -1).T @ g
    gxp = kernels.col2im(gcols, n, c, h + 2 * padding, w + 2 * padding, k, stride, oh, ow)
    grad_x = gxp[:, :, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_b


def leaky_relu(x, slope=DEFAULT_SLOPE):
    if not 0 < slope < 1:
        raise ValueError(f"slope must lie in (0, 1), got {slope}")
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(x, grad, slope=DEFAULT_SLOPE):
    return np.where(x > 0, grad, slope * grad)


def sigmoid(x):
    """Logistic function in the overflow-free split form.

    Saturated values are pulled back to the nearest representable numbers
    inside (0, 1), so the output range stays open at any input magnitude.
    """
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    info = np.finfo(out.dtype)
    return np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)


def sigmoid_backward(y, grad):
    """Backward of sigmoid given its output ``y``."""
    return grad * y * (1.0 - y)


def channel_pool(x):
    """Stack per-pixel channel mean (channel 0) and max (channel 1): (N,C,H,W) -> (N,2,H,W)."""
    pooled, _ = kernels.channel_pool(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
    return np.ascontiguousarray(pooled.transpose(0, 3, 1, 2))


def channel_pool_backward(x, grad):
    """Mean gets an even share; max routes to the first maximal channel."""
    _, arg = kernels.channel_pool(np.ascontiguousarray(x.transpose(0, 2, 3, 1)))
    g = kernels.channel_pool_grad(np.ascontiguousarray(grad.transpose(0, 2, 3, 1)), arg, x.shape[1])
    return np.ascontiguousarray(g.transpose(0, 3, 1, 2))


def concat_channels(a, b):
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"cannot concatenate {a.shape} and {b.shape}: batch/spatial mismatch")
    return np.concatenate([a, b], axis=1)


def split_channels(grad, ca):
    """Backward of :func:`concat_channels`: hand each input its slice."""
    return grad[:, :ca], grad[:, ca:]


def _check_pair(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    _check_pair(pred, target)
    diff = pred - target
    return float(np.mean(diff * diff, dtype=np.float64)), (2.0 / diff.size) * diff


def l1_loss(pred, target):
    """Mean absolute error and its subgradient (zero where ``pred == target``)."""
    _check_pair(pred, target)
    diff = pred - target
    return float(np.mean(np.abs(diff), dtype=np.float64)), np.sign(diff) / diff.size

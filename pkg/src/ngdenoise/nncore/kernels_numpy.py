"""Pure-numpy reference versions of the hot kernels.

Every function here has a twin with the same signature in
:mod:`ngdenoise.nncore.kernels_numba`. The numpy path is always importable
and is what runs when ``NGDENOISE_KERNELS=numpy`` is set.

Ring-layout kernels operate on the *region* of a frame buffer: a 2-D array of
shape ``(n * hp * wp, C)`` holding a batch of channels-last maps padded by a
zero ring of width ``pad`` (``hp = h + 2 * pad``, ``wp = w + 2 * pad``).
"""
import numpy as np


def im2col(xp, k, stride, oh, ow):
    """Unfold a padded NCHW batch into a ``(C*k*k, N*oh*ow)`` column matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, oh, ow), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            win = xp[:, :, ky:ky + stride * (oh - 1) + 1:stride, kx:kx + stride * (ow - 1) + 1:stride]
            cols[:, ky, kx] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * oh * ow)


def col2im(cols, n, c, hp, wp, k, stride, oh, ow):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the padded grid."""
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(c, k, k, n, oh, ow)
    for ky in range(k):
        for kx in range(k):
            out[:, :, ky:ky + stride * (oh - 1) + 1:stride, kx:kx + stride * (ow - 1) + 1:stride] += (
                cols6[:, ky, kx].transpose(1, 0, 2, 3))
    return out


def _grid(region, n, hp, wp):
    return region.reshape(n, hp, wp, region.shape[1])


def zero_ring(region, n, hp, wp, pad):
    g = _grid(region, n, hp, wp)
    g[:, :pad] = 0
    g[:, hp - pad:] = 0
    g[:, :, :pad] = 0
    g[:, :, wp - pad:] = 0


def ring_epilogue(region, bias, slope, act, n, hp, wp, pad):
    """In place: add per-channel bias, optionally apply LeakyReLU, zero the ring."""
    region += bias
    if act:
        np.multiply(region, slope, out=region, where=region < 0)
    zero_ring(region, n, hp, wp, pad)


def ring_leaky_grad(grad, y, slope, n, hp, wp, pad):
    """In place: scale ``grad`` by the LeakyReLU derivative read off output ``y``.

    The sign of a LeakyReLU output equals the sign of its input for slope > 0,
    so the stored activation is enough.
    """
    np.multiply(grad, slope, out=grad, where=y <= 0)
    zero_ring(grad, n, hp, wp, pad)


def channel_pool(x):
    """Mean and max over the last axis of an NHWC array.

    Returns ``(pooled, argmax)`` with ``pooled[..., 0]`` the mean and
    ``pooled[..., 1]`` the max; ``argmax`` is the first index attaining it.
    """
    arg = np.argmax(x, axis=-1)
    pooled = np.empty(x.shape[:-1] + (2,), dtype=x.dtype)
    pooled[..., 0] = x.mean(axis=-1)
    pooled[..., 1] = np.take_along_axis(x, arg[..., None], axis=-1)[..., 0]
    return pooled, arg


def channel_pool_grad(grad, arg, c):
    out = np.empty(grad.shape[:-1] + (c,), dtype=grad.dtype)
    out[...] = (grad[..., 0] / c)[..., None]
    np.put_along_axis(out, arg[..., None],
                      np.take_along_axis(out, arg[..., None], axis=-1) + grad[..., 1:2], axis=-1)
    return out


def shift_sum_epilogue(z, offsets, cout, bias, slope, act, dst, n, hp, wp, pad, margin):
    """``dst[p] = sum_t z[margin + p + offsets[t], t-th block of cout]``, then epilogue.

    ``z`` holds per-tap partial products side by side (the result of one
    ``x @ W_all`` product) inside a buffer with ``margin`` rows on each end.
    """
    rows = dst.shape[0]
    dst[...] = 0
    for t, off in enumerate(offsets):
        s = margin + off
        dst += z[s:s + rows, t * cout:(t + 1) * cout]
    ring_epilogue(dst, bias, slope, act, n, hp, wp, pad)


def gather_taps(gbuf, offsets, margin, rows, out):
    """``out[p, t-th block] = gbuf[margin + p - offsets[t]]``: per-tap shifted copies."""
    c = gbuf.shape[1]
    for t, off in enumerate(offsets):
        s = margin - off
        out[:, t * c:(t + 1) * c] = gbuf[s:s + rows]

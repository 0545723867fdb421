"""Numba-compiled versions of the hot kernels (same signatures as kernels_numpy).

All kernels are serial: no ``prange``, so results never depend on the thread
count.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def im2col(xp, k, stride, oh, ow):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((c * k * k, n * oh * ow), dtype=xp.dtype)
    for ci in range(c):
        for ky in range(k):
            for kx in range(k):
                row = (ci * k + ky) * k + kx
                for b in range(n):
                    base = b * oh * ow
                    for i in range(oh):
                        src = i * stride + ky
                        for j in range(ow):
                            cols[row, base + i * ow + j] = xp[b, ci, src, j * stride + kx]
    return cols


@njit(cache=True, nogil=True)
def col2im(cols, n, c, hp, wp, k, stride, oh, ow):
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    for ci in range(c):
        for ky in range(k):
            for kx in range(k):
                row = (ci * k + ky) * k + kx
                for b in range(n):
                    base = b * oh * ow
                    for i in range(oh):
                        dst = i * stride + ky
                        for j in range(ow):
                            out[b, ci, dst, j * stride + kx] += cols[row, base + i * ow + j]
    return out


@njit(cache=True, nogil=True)
def zero_ring(region, n, hp, wp, pad):
    c = region.shape[1]
    for b in range(n):
        for i in range(hp):
            row0 = (b * hp + i) * wp
            if i < pad or i >= hp - pad:
                for j in range(wp):
                    for ch in range(c):
                        region[row0 + j, ch] = 0
            else:
                for j in range(pad):
                    for ch in range(c):
                        region[row0 + j, ch] = 0
                        region[row0 + wp - 1 - j, ch] = 0


@njit(cache=True, nogil=True)
def _cast(like, value):
    # round a scalar to the array's dtype first, as numpy does for python floats
    tmp = np.empty(1, like.dtype)
    tmp[0] = value
    return tmp[0]


@njit(cache=True, nogil=True)
def ring_epilogue(region, bias, slope, act, n, hp, wp, pad):
    c = region.shape[1]
    slope = _cast(region, slope)
    for b in range(n):
        for i in range(hp):
            edge_row = i < pad or i >= hp - pad
            row0 = (b * hp + i) * wp
            for j in range(wp):
                r = row0 + j
                if edge_row or j < pad or j >= wp - pad:
                    for ch in range(c):
                        region[r, ch] = 0
                else:
                    for ch in range(c):
                        v = region[r, ch] + bias[ch]
                        if act and v < 0:
                            v = v * slope
                        region[r, ch] = v


@njit(cache=True, nogil=True)
def ring_leaky_grad(grad, y, slope, n, hp, wp, pad):
    c = grad.shape[1]
    slope = _cast(grad, slope)
    for b in range(n):
        for i in range(hp):
            edge_row = i < pad or i >= hp - pad
            row0 = (b * hp + i) * wp
            for j in range(wp):
                r = row0 + j
                if edge_row or j < pad or j >= wp - pad:
                    for ch in range(c):
                        grad[r, ch] = 0
                else:
                    for ch in range(c):
                        if y[r, ch] <= 0:
                            grad[r, ch] = grad[r, ch] * slope


@njit(cache=True, nogil=True)
def _pool(x, pooled, arg):
    n, h, w, c = x.shape
    for b in range(n):
        for i in range(h):
            for j in range(w):
                s = x[b, i, j, 0]
                best = x[b, i, j, 0]
                at = 0
                for ch in range(1, c):
                    v = x[b, i, j, ch]
                    s += v
                    if v > best:
                        best = v
                        at = ch
                pooled[b, i, j, 0] = s / c
                pooled[b, i, j, 1] = best
                arg[b, i, j] = at


def channel_pool(x):
    pooled = np.empty(x.shape[:-1] + (2,), dtype=x.dtype)
    arg = np.empty(x.shape[:-1], dtype=np.int64)
    _pool(x, pooled, arg)
    return pooled, arg


@njit(cache=True, nogil=True)
def _pool_grad(grad, arg, out):
    n, h, w, c = out.shape
    for b in range(n):
        for i in range(h):
            for j in range(w):
                share = grad[b, i, j, 0] / c
                for ch in range(c):
                    out[b, i, j, ch] = share
                out[b, i, j, arg[b, i, j]] += grad[b, i, j, 1]


def channel_pool_grad(grad, arg, c):
    out = np.empty(grad.shape[:-1] + (c,), dtype=grad.dtype)
    _pool_grad(grad, arg, out)
    return out


@njit(cache=True, nogil=True)
def shift_sum_epilogue(z, offsets, cout, bias, slope, act, dst, n, hp, wp, pad, margin):
    ntap = offsets.shape[0]
    slope = _cast(dst, slope)
    for b in range(n):
        for i in range(hp):
            row0 = (b * hp + i) * wp
            for j in range(wp):
                p = row0 + j
                if i < pad or i >= hp - pad or j < pad or j >= wp - pad:
                    for o in range(cout):
                        dst[p, o] = 0
                    continue
                for o in range(cout):
                    dst[p, o] = bias[o]
                for t in range(ntap):
                    q = margin + p + offsets[t]
                    col = t * cout
                    for o in range(cout):
                        dst[p, o] += z[q, col + o]
                if act:
                    for o in range(cout):
                        if dst[p, o] < 0:
                            dst[p, o] *= slope


@njit(cache=True, nogil=True)
def gather_taps(gbuf, offsets, margin, rows, out):
    c = gbuf.shape[1]
    ntap = offsets.shape[0]
    for p in range(rows):
        for t in range(ntap):
            q = margin + p - offsets[t]
            col = t * c
            for o in range(c):
                out[p, col + o] = gbuf[q, o]

"""Channels-last feature maps with a zero ring, and the convolution layer over them.

A :class:`Frame` stores a batch of ``n`` maps of size ``h x w`` with ``c``
channels as one 2-D buffer ``(margin + n*hp*wp + margin, c)`` where each map is
surrounded by a ring of ``pad`` zeros. Because every pixel's neighbourhood is a
constant row offset away in that flat layout, a ``k x k`` "same" convolution is
``k*k`` matrix products over shifted row windows of the buffer, with no
unfolding copy. Outputs computed on ring positions are garbage and get zeroed.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.linalg import blas

from ._backend import kernels

_GEMM = {np.dtype(np.float32): blas.sgemm, np.dtype(np.float64): blas.dgemm}


def gemm_into(a, b, out, accumulate):
    """``out = a @ b`` or ``out += a @ b`` without a temporary when BLAS allows.

    Row-major ``out`` is the column-major transpose, so ``out.T = b.T @ a.T``
    maps straight onto a Fortran GEMM with ``beta`` 0 or 1.
    """
    gemm = _GEMM.get(out.dtype)
    if (gemm is not None and out.flags.c_contiguous and a.dtype == out.dtype
            and b.dtype == out.dtype and a.strides[1] == a.itemsize and b.strides[1] == b.itemsize
            and a.flags.c_contiguous and b.flags.c_contiguous):
        r = gemm(1.0, b.T, a.T, beta=1.0 if accumulate else 0.0, c=out.T, overwrite_c=1)
        if np.shares_memory(r, out):
            return
        out[...] = r.T
        return
    if accumulate:
        out += a @ b
    else:
        np.matmul(a, b, out=out)


class Frame:
    __slots__ = ("buf", "n", "h", "w", "pad")

    def __init__(self, buf, n, h, w, pad):
        self.buf = buf
        self.n, self.h, self.w, self.pad = n, h, w, pad

    @classmethod
    def zeros(cls, n, h, w, c, pad=1, dtype=np.float32):
        hp, wp = h + 2 * pad, w + 2 * pad
        margin = pad * wp + pad
        return cls(np.zeros((2 * margin + n * hp * wp, c), dtype=dtype), n, h, w, pad)

    @classmethod
    def from_nhwc(cls, x, pad=1, dtype=None):
        n, h, w, c = x.shape
        f = cls.zeros(n, h, w, c, pad, dtype or x.dtype)
        f.interior[...] = x
        return f

    @classmethod
    def from_nchw(cls, x, pad=1, dtype=None):
        return cls.from_nhwc(x.transpose(0, 2, 3, 1), pad, dtype)

    def like(self, c=None, pad=None):
        return Frame.zeros(self.n, self.h, self.w, self.c if c is None else c,
                           self.pad if pad is None else pad, self.buf.dtype)

    @property
    def c(self):
        return self.buf.shape[1]

    @property
    def hp(self):
        return self.h + 2 * self.pad

    @property
    def wp(self):
        return self.w + 2 * self.pad

    @property
    def margin(self):
        return self.pad * self.wp + self.pad

    @property
    def rows(self):
        return self.n * self.hp * self.wp

    @property
    def dtype(self):
        return self.buf.dtype

    @property
    def region(self):
        m = self.margin
        return self.buf[m:m + self.rows]

    @property
    def grid(self):
        return self.region.reshape(self.n, self.hp, self.wp, self.c)

    @property
    def interior(self):
        p = self.pad
        return self.grid[:, p:p + self.h, p:p + self.w]

    def shifted(self, offset):
        """Row window of the buffer displaced by ``offset`` flat positions."""
        m = self.margin + offset
        return self.buf[m:m + self.rows]

    def channels(self, start, stop):
        """View onto a contiguous channel range; shares memory."""
        return Frame(self.buf[:, start:stop], self.n, self.h, self.w, self.pad)

    def geometry(self):
        return self.n, self.hp, self.wp, self.pad

    def zero_ring(self):
        kernels.zero_ring(self.region, *self.geometry())

    def to_nhwc(self):
        return np.ascontiguousarray(self.interior)

    def to_nchw(self):
        return np.ascontiguousarray(self.interior.transpose(0, 3, 1, 2))

    def copy(self):
        return Frame(self.buf.copy(), self.n, self.h, self.w, self.pad)


class Param:
    """A trainable array and its accumulated gradient."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name, value):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad.fill(0)

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.value.shape})"


class Conv2d:
    """Stride-1 "same" convolution (odd kernel, padding ``k // 2``) over frames.

    Weights use the conventional ``(out, in, k, k)`` layout and the operation is
    cross-correlation, identical to :func:`functional.conv2d_forward` with
    ``padding = k // 2``.
    """

    def __init__(self, name, in_channels, out_channels, kernel=3, rng=None,
                 scale=1.0, slope=0.2, dtype=np.float32):
        if kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        self.name = name
        self.in_channels, self.out_channels, self.kernel = in_channels, out_channels, kernel
        self.stride, self.padding = 1, kernel // 2
        fan_in = in_channels * kernel * kernel
        if rng is None:
            w = np.zeros((out_channels, in_channels, kernel, kernel))
        else:
            # Kaiming fan-in scaling for a LeakyReLU that follows the conv.
            std = math.sqrt(2.0 / (1.0 + slope * slope) / fan_in)
            w = rng.standard_normal((out_channels, in_channels, kernel, kernel)) * std * scale
        self.weight = Param(f"{name}.weight", w.astype(dtype))
        self.bias = Param(f"{name}.bias", np.zeros(out_channels, dtype=dtype))

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def param_count(self):
        return self.out_channels * self.in_channels * self.kernel ** 2 + self.out_channels

    @property
    def wide(self):
        """Whether to run as one ``x @ W_all`` product plus a shift-sum.

        Pays off when ``k*k*out`` is narrow; wide outputs are faster as ``k*k``
        shifted products.
        """
        return self.kernel > 1 and self.kernel ** 2 * self.out_channels <= 128

    def _offsets(self, wp):
        r = self.kernel // 2
        return np.array([(dy - r) * wp + (dx - r) for dy in range(self.kernel) for dx in range(self.kernel)],
                        dtype=np.int64)

    def _taps(self):
        k = self.kernel
        taps = self.weight.value.transpose(2, 3, 1, 0).reshape(k * k, self.in_channels, self.out_channels)
        # strided operands drop matmul off the BLAS path
        return np.ascontiguousarray(taps)

    def _wide_matrix(self):
        k = self.kernel
        return np.ascontiguousarray(
            self.weight.value.transpose(1, 2, 3, 0).reshape(self.in_channels, k * k * self.out_channels))

    def _check(self, x):
        if x.c != self.in_channels:
            raise ValueError(f"{self.name}: expected {self.in_channels} channels, got {x.c}")
        if x.pad < self.padding:
            raise ValueError(f"{self.name}: frame ring {x.pad} narrower than padding {self.padding}")

    def forward(self, x, out=None, act=False, slope=0.2):
        """Write ``conv(x) + bias`` (LeakyReLU'd when ``act``) into ``out``."""
        self._check(x)
        if out is None:
            out = x.like(self.out_channels)
        dst = out.region
        offsets = self._offsets(x.wp)
        if self.wide:
            m, rows = x.margin, x.rows
            z = np.empty((rows + 2 * m, offsets.size * self.out_channels), dtype=dst.dtype)
            z[:m] = 0
            z[m + rows:] = 0
            np.matmul(x.region, self._wide_matrix(), out=z[m:m + rows])
            kernels.shift_sum_epilogue(z, offsets, self.out_channels, self.bias.value, slope, act,
                                       dst, *out.geometry(), m)
            return out
        taps = self._taps()
        for t, off in enumerate(offsets):
            gemm_into(x.shifted(off), taps[t], dst, accumulate=t > 0)
        kernels.ring_epilogue(dst, self.bias.value, slope, act, *out.geometry())
        return out

    def backward(self, x, grad_out, grad_in=None):
        """Accumulate parameter gradients; add the input gradient into ``grad_in``.

        ``grad_out`` must have a zero ring. ``grad_in`` gets its ring zeroed.
        """
        g = grad_out.region
        k, cin, cout = self.kernel, self.in_channels, self.out_channels
        self.bias.grad += g.sum(axis=0)
        if k > 1 and cin < 16:
            # narrow inputs: k*k shifted products beat one very wide gather
            offsets = self._offsets(x.wp)
            gw = np.empty((k * k, cin, cout), dtype=g.dtype)
            for t, off in enumerate(offsets):
                np.matmul(x.shifted(off).T, g, out=gw[t])
            self.weight.grad += gw.reshape(k, k, cin, cout).transpose(3, 2, 0, 1)
            if grad_in is not None:
                taps = self._taps()
                acc = grad_in.region
                for t, off in enumerate(offsets):
                    acc += grad_out.shifted(-off) @ taps[t].T
                grad_in.zero_ring()
            return
        if k == 1:
            gcat = g
        else:
            # column block t holds grad_out shifted back by tap t's offset
            offsets = self._offsets(x.wp)
            gcat = np.empty((x.rows, offsets.size * cout), dtype=g.dtype)
            kernels.gather_taps(grad_out.buf, offsets, grad_out.margin, x.rows, gcat)
        gw = x.region.T @ gcat
        self.weight.grad += gw.reshape(cin, k, k, cout).transpose(3, 0, 1, 2)
        if grad_in is not None:
            gemm_into(gcat, np.ascontiguousarray(self._wide_matrix().T), grad_in.region, accumulate=True)
            grad_in.zero_ring()

"""Slow, direct reference implementations used only by the tests.

Nothing here imports the package's numerical code; each routine is written
from the textbook definition with explicit loops.
"""
from __future__ import annotations

import math

import numpy as np


def mse_loop(ref, test):
    h, w, c = ref.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            for k in range(c):
                d = 255.0 * ref[i, j, k] - 255.0 * test[i, j, k]
                total += d * d
    return total / (h * w * c)


def gaussian_2d(size, sigma):
    r = (size - 1) / 2.0
    win = np.empty((size, size))
    for i in range(size):
        for j in range(size):
            win[i, j] = math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2.0 * sigma * sigma))
    return win / win.sum()


def window_stats(x, y, win, i, j):
    n = win.shape[0]
    px = x[i:i + n, j:j + n]
    py = y[i:i + n, j:j + n]
    mx = float(np.sum(win * px))
    my = float(np.sum(win * py))
    vx = float(np.sum(win * (px - mx) ** 2))
    vy = float(np.sum(win * (py - my) ** 2))
    cxy = float(np.sum(win * (px - mx) * (py - my)))
    return mx, my, vx, vy, cxy


def ssim_direct(ref, test):
    """Per-channel mean SSIM over every full 11x11 window, channels averaged."""
    win = gaussian_2d(11, 1.5)
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for ch in range(ref.shape[2]):
        x, y = ref[:, :, ch] * 255.0, test[:, :, ch] * 255.0
        acc, count = 0.0, 0
        for i in range(x.shape[0] - 10):
            for j in range(x.shape[1] - 10):
                mx, my, vx, vy, cxy = window_stats(x, y, win, i, j)
                acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
                count += 1
        vals.append(acc / count)
    return sum(vals) / len(vals)


def _valid_filter(img, win):
    n = win.shape[0]
    out = np.empty((img.shape[0] - n + 1, img.shape[1] - n + 1))
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] = np.sum(win * img[i:i + n, j:j + n])
    return out


def vifp_direct(ref, test):
    """Pixel-domain VIF, written per window with explicit local statistics."""
    r = (ref[..., 0] * 0.299 + ref[..., 1] * 0.587 + ref[..., 2] * 0.114) * 255.0
    d = (test[..., 0] * 0.299 + test[..., 1] * 0.587 + test[..., 2] * 0.114) * 255.0
    noise_var = 2.0
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (5 - scale) + 1
        win = gaussian_2d(n, n / 5.0)
        if scale > 1:
            r = _valid_filter(r, win)[::2, ::2]
            d = _valid_filter(d, win)[::2, ::2]
        for i in range(r.shape[0] - n + 1):
            for j in range(r.shape[1] - n + 1):
                mx, my, vx, vy, cxy = window_stats(r, d, win, i, j)
                vx, vy = max(vx, 0.0), max(vy, 0.0)
                if vx < 1e-10:
                    g, sv = 0.0, vy
                    vx = 0.0
                else:
                    g = cxy / (vx + 1e-10)
                    sv = vy - g * cxy
                if vy < 1e-10:
                    g, sv = 0.0, 0.0
                if g < 0:
                    sv, g = vy, 0.0
                sv = max(sv, 1e-10)
                num += math.log10(1.0 + g * g * vx / (sv + noise_var))
                den += math.log10(1.0 + vx / noise_var)
    return num / den


def conv2d_loops(x, w, b, stride, padding):
    """Cross-correlation by four nested loops over output pixels and taps."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for b_ in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b_, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[b_, oc, i, j] = np.sum(patch * w[oc]) + (0.0 if b is None else b[oc])
    return out


def srgb_to_lab_reference(rgb):
    """Scalar sRGB (D65) to CIELAB for one pixel, straight from the definitions."""
    def lin(c):
        return c / 12.92 if c <= 0.04045 else ((c + 0.055) / 1.055) ** 2.4

    r, g, b = (lin(float(v)) for v in rgb)
    x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b
    y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b
    z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b
    xn, yn, zn = 0.95047, 1.0, 1.08883

    def f(t):
        d = 6.0 / 29.0
        return t ** (1.0 / 3.0) if t > d ** 3 else t / (3 * d * d) + 4.0 / 29.0

    fx, fy, fz = f(x / xn), f(y / yn), f(z / zn)
    return np.array([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)])

"""Finite-difference verification of every backward pass.

Each check builds a scalar loss in float64, computes its analytic gradient,
and compares it against central differences (step 1e-5) on all entries of
small tensors or a seeded sample of entries of large ones.

The reported error is ``max_i |a_i - n_i| / max(|a_i|, |n_i|, f)`` where the
floor ``f`` is 1e-3 of the largest gradient magnitude seen in that check, so
entries that are numerically zero next to the rest of the gradient do not
turn rounding noise into a failure.

Central differences are only valid when ``x - h`` and ``x + h`` sit on the
same linear piece as ``x`` for every LeakyReLU, max-pool and L1 sign in the
graph. The suite records those pieces during each forward pass and discards
any sampled entry whose perturbation crosses a kink; the discard count is
reported and may not exceed half the sampled entries.
"""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass

import numpy as np

from . import model as M
from .nncore import Conv2d, Frame
from .nncore import functional as F
from .nncore._backend import kernels

H = 1e-5
PRIMITIVE_TOL = 1e-6
NETWORK_TOL = 1e-5
SAMPLE = 24


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float
    entries: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol and 2 * self.skipped <= self.entries)


class _Pieces:
    """Fingerprint of the linear piece each kink-bearing op is on during a forward pass."""

    def __init__(self):
        self.digest = None

    def add(self, mask):
        if self.digest is not None:
            self.digest.update(np.packbits(np.asarray(mask, dtype=bool)).tobytes())

    def evaluate(self, loss):
        self.digest = hashlib.blake2b(digest_size=16)
        try:
            value = loss()
            return value, self.digest.digest()
        finally:
            self.digest = None

    @contextlib.contextmanager
    def watching(self):
        forward, pool = Conv2d.forward, kernels.channel_pool
        pieces = self

        def watched_forward(conv, x, out=None, act=False, slope=0.2):
            y = forward(conv, x, out, act, slope)
            if act:
                pieces.add(y.region > 0)
            return y

        def watched_pool(x):
            pooled, arg = pool(x)
            pieces.add(np.equal.outer(arg, np.arange(x.shape[-1])))
            return pooled, arg

        Conv2d.forward, kernels.channel_pool = watched_forward, watched_pool
        try:
            yield
        finally:
            Conv2d.forward, kernels.channel_pool = forward, pool


PIECES = _Pieces()


def rel_error(analytic, numeric) -> float:
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    floor = max(np.max(np.abs(a)), np.max(np.abs(n))) * 1e-3
    if floor == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _indices(arr, rng, k=SAMPLE):
    if arr.size <= k:
        return [np.unravel_index(i, arr.shape) for i in range(arr.size)]
    return [np.unravel_index(i, arr.shape) for i in rng.choice(arr.size, size=k, replace=False)]


def numeric_grad(loss, arr, idx):
    """Central differences of ``loss()`` w.r.t. ``arr[i]`` for each ``i`` in ``idx``.

    Entries whose perturbation changes the active piece of any kink come back NaN.
    """
    _, base = PIECES.evaluate(loss)
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        old = arr[i]
        arr[i] = old + H
        fp, sp = PIECES.evaluate(loss)
        arr[i] = old - H
        fm, sm = PIECES.evaluate(loss)
        arr[i] = old
        out[j] = (fp - fm) / (2 * H) if sp == base and sm == base else np.nan
    return out


def _compare(pairs, rng):
    """``pairs``: (array, analytic gradient, loss closure). Returns (error, entries, skipped)."""
    ana, nums = [], []
    for arr, grad, loss in pairs:
        idx = _indices(arr, rng)
        nums.append(numeric_grad(loss, arr, idx))
        ana.append(np.array([grad[i] for i in idx]))
    ana, nums = np.concatenate(ana), np.concatenate(nums)
    keep = ~np.isnan(nums)
    err = rel_error(ana[keep], nums[keep]) if keep.any() else np.nan
    return err, nums.size, int((~keep).sum())


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (gap + np.abs(x))


# -- primitive checks ---------------------------------------------------------

def _conv_case(rng, stride, padding, part):
    x = rng.standard_normal((2, 3, 6, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    oh = F.conv_output_size(6, 3, stride, padding)
    ow = F.conv_output_size(7, 3, stride, padding)
    r = rng.standard_normal((2, 4, oh, ow))

    def loss():
        return float(np.sum(F.conv2d_forward(x, w, b, stride, padding) * r))

    gx, gw, gb = F.conv2d_backward(x, w, r, stride, padding)
    table = {"input": (x, gx), "weight": (w, gw), "bias": (b, gb)}
    return [table[p] + (loss,) for p in part]


def check_conv_input(rng):
    return _conv_case(rng, 1, 1, ["input"])


def check_conv_weight(rng):
    return _conv_case(rng, 1, 1, ["weight"])


def check_conv_bias(rng):
    return _conv_case(rng, 1, 1, ["bias"])


def check_conv_strided(rng):
    return _conv_case(rng, 2, 1, ["input", "weight"]) + _conv_case(rng, 2, 0, ["input", "weight"])


def check_leaky_relu(rng):
    x = _away_from_zero(rng, (2, 3, 4, 4))
    r = rng.standard_normal(x.shape)
    return [(x, F.leaky_relu_backward(x, r, 0.2), lambda: float(np.sum(F.leaky_relu(x, 0.2) * r)))]


def check_sigmoid(rng):
    x = 3.0 * rng.standard_normal((2, 1, 5, 5))
    r = rng.standard_normal(x.shape)
    return [(x, F.sigmoid_backward(F.sigmoid(x), r), lambda: float(np.sum(F.sigmoid(x) * r)))]


def check_channel_pool(rng):
    x = rng.standard_normal((2, 6, 4, 4))
    r = rng.standard_normal((2, 2, 4, 4))
    return [(x, F.channel_pool_backward(x, r), lambda: float(np.sum(F.channel_pool(x) * r)))]


def check_losses(rng):
    p = rng.standard_normal((2, 3, 4, 4))
    t = p + _away_from_zero(rng, p.shape)
    return [(p, F.mse_loss(p, t)[1], lambda: F.mse_loss(p, t)[0]),
            (p, F.l1_loss(p, t)[1], lambda: F.l1_loss(p, t)[0])]


def _frame_conv_case(rng, cin, cout, k, act):
    conv = Conv2d("probe", cin, cout, k, rng, dtype=np.float64)
    conv.bias.value[...] = rng.standard_normal(cout)
    x = Frame.from_nhwc(rng.standard_normal((2, 5, 6, cin)), pad=k // 2)
    r = rng.standard_normal((2, 5, 6, cout))

    def loss():
        return float(np.sum(conv.forward(x, act=act).interior * r))

    y = conv.forward(x, act=act)
    g = y.like()
    g.interior[...] = r
    if act:
        np.multiply(g.region, 0.2, out=g.region, where=y.region <= 0)
    gx = x.like()
    conv.backward(x, g, gx)
    return [(x.interior, gx.interior, loss), (conv.weight.value, conv.weight.grad, loss),
            (conv.bias.value, conv.bias.grad, loss)]


def check_frame_conv_taps(rng):
    return _frame_conv_case(rng, 8, 16, 3, act=False)


def check_frame_conv_wide(rng):
    return _frame_conv_case(rng, 8, 4, 3, act=True)


def check_frame_conv_pointwise(rng):
    return _frame_conv_case(rng, 6, 5, 1, act=True)


# -- block and network checks ---------------------------------------------------

def _cfg():
    return M.ModelConfig()


def _frame_input(rng, c, pad=1):
    return Frame.from_nhwc(rng.standard_normal((1, 8, 8, c)), pad=pad)


def _weight_pairs(layers, loss, rng, per_layer=2):
    """Pick a few layers and expose their weights for sampling."""
    chosen = rng.choice(len(layers), size=min(per_layer, len(layers)), replace=False)
    out = []
    for i in sorted(chosen):
        layer = layers[i]
        out.append((layer.weight.value, layer.weight.grad, loss))
        out.append((layer.bias.value, layer.bias.grad, loss))
    return out


def _perturb_biases(layers, rng, scale=0.05):
    for layer in layers:
        layer.bias.value[...] = scale * rng.standard_normal(layer.bias.value.shape)


def _block_case(rng, block):
    _perturb_biases(block.layers, rng)
    x = _frame_input(rng, 32)
    r = rng.standard_normal((1, 8, 8, 32))

    def loss():
        return float(np.sum(block.forward(x, keep=False)[0].interior * r))

    y, cache = block.forward(x)
    g = y.like()
    g.interior[...] = r
    for layer in block.layers:
        for p in layer.params:
            p.zero_grad()
    gx = block.backward(cache, g)
    return [(x.interior, gx.interior, loss)] + _weight_pairs(block.layers, loss, rng, 3)


def check_rdb(rng):
    return _block_case(rng, M.RDB("probe", _cfg(), rng, np.float64))


def check_rrdb(rng):
    return _block_case(rng, M.RRDB("probe", _cfg(), rng, np.float64))


def check_trunk(rng):
    cfg = M.ModelConfig(rrdb_count=2, rdb_count=1)
    return _block_case(rng, M.Trunk("probe", cfg, rng, np.float64))


def check_attention(rng):
    nob = M.NoiseAttention(_cfg(), rng, np.float64)
    _perturb_biases(nob.layers, rng)
    noisy = Frame.from_nhwc(rng.random((1, 8, 8, 3)))
    est = Frame.from_nhwc(0.1 * rng.standard_normal((1, 8, 8, 3)))
    r = rng.standard_normal((1, 8, 8, 32))

    def loss():
        return float(np.sum(nob.forward(noisy, est, keep=False)[0].interior * r))

    y, cache = nob.forward(noisy, est)
    g = y.like()
    g.interior[...] = r
    g_noisy, g_est = nob.backward(cache, g, grad_inputs=True)
    pairs = [(noisy.interior, g_noisy.interior, loss), (est.interior, g_est.interior, loss)]
    for layer in nob.layers:
        pairs.append((layer.weight.value, layer.weight.grad, loss))
        pairs.append((layer.bias.value, layer.bias.grad, loss))
    return pairs


def _pipeline(rng):
    model = M.TwoStageDenoiser(_cfg(), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    _perturb_biases(model.nen.layers + model.rn.layers, rng)
    # keep the reconstruction inside the clamp so the loss is smooth there
    model.rn.tail.bias.value[...] = 0.5
    clean = rng.random((1, 8, 8, 3)) * 0.6 + 0.2
    noisy = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0.0, 1.0)
    return model, clean, noisy


def check_nen(rng):
    model, clean, noisy = _pipeline(rng)
    x = Frame.from_nhwc(noisy)
    target = noisy - clean

    def loss():
        return F.mse_loss(model.nen.forward(x, keep=False)[0].interior, target)[0]

    est, cache = model.nen.forward(x)
    g = est.like()
    g.interior[...] = F.mse_loss(est.interior, target)[1]
    gx = model.nen.backward(cache, g, grad_input=True)
    return [(x.interior, gx.interior, loss)] + _weight_pairs(model.nen.layers, loss, rng, 4)


def check_rn(rng):
    model, clean, noisy = _pipeline(rng)
    x = Frame.from_nhwc(noisy)
    est, _ = model.nen.forward(x, keep=False)

    def loss():
        out = model.rn.forward(x, est, keep=False)[0].interior
        PIECES.add(out > clean)
        PIECES.add((out > 0.0) & (out < 1.0))
        return F.l1_loss(out, clean)[0]

    out, cache = model.rn.forward(x, est)
    g = out.like()
    g.interior[...] = F.l1_loss(out.interior, clean)[1]
    g_noisy, g_est = model.rn.backward(cache, g, grad_inputs=True)
    return ([(x.interior, g_noisy.interior, loss), (est.interior, g_est.interior, loss)]
            + _weight_pairs(model.rn.layers, loss, rng, 4))


CHECKS = [
    ("conv2d.input", check_conv_input, PRIMITIVE_TOL),
    ("conv2d.weight", check_conv_weight, PRIMITIVE_TOL),
    ("conv2d.bias", check_conv_bias, PRIMITIVE_TOL),
    ("conv2d.strided", check_conv_strided, PRIMITIVE_TOL),
    ("leaky_relu", check_leaky_relu, PRIMITIVE_TOL),
    ("sigmoid", check_sigmoid, PRIMITIVE_TOL),
    ("channel_pool", check_channel_pool, PRIMITIVE_TOL),
    ("losses", check_losses, PRIMITIVE_TOL),
    ("frame_conv.taps", check_frame_conv_taps, PRIMITIVE_TOL),
    ("frame_conv.wide", check_frame_conv_wide, PRIMITIVE_TOL),
    ("frame_conv.pointwise", check_frame_conv_pointwise, PRIMITIVE_TOL),
    ("rdb", check_rdb, NETWORK_TOL),
    ("rrdb", check_rrdb, NETWORK_TOL),
    ("trunk", check_trunk, NETWORK_TOL),
    ("attention", check_attention, NETWORK_TOL),
    ("nen.end_to_end", check_nen, NETWORK_TOL),
    ("rn.end_to_end", check_rn, NETWORK_TOL),
]


@contextlib.contextmanager
def corrupted_backward(scale=1.01):
    """Test hook: every frame convolution reports a weight gradient off by ``scale``."""
    original_frame = Conv2d.backward
    original_func = F.conv2d_backward

    def frame_backward(self, x, grad_out, grad_in=None):
        before = self.weight.grad.copy()
        original_frame(self, x, grad_out, grad_in)
        self.weight.grad[...] = before + scale * (self.weight.grad - before)

    def func_backward(*args, **kwargs):
        gx, gw, gb = original_func(*args, **kwargs)
        return gx, gw * scale, gb

    Conv2d.backward = frame_backward
    F.conv2d_backward = func_backward
    try:
        yield
    finally:
        Conv2d.backward = original_frame
        F.conv2d_backward = original_func


def run_suite(seed: int = 0, corrupt: bool = False, only=None) -> list[CheckResult]:
    results = []
    ctx = corrupted_backward() if corrupt else contextlib.nullcontext()
    with ctx, PIECES.watching():
        for i, (name, fn, tol) in enumerate(CHECKS):
            if only is not None and name not in only:
                continue
            rng = np.random.default_rng([seed, i])
            err, count, skipped = _compare(fn(rng), rng)
            results.append(CheckResult(name, err, tol, count, skipped))
    return results


def format_table(results) -> str:
    lines = [f"{'check':<22} {'max rel err':>12} {'tol':>8} {'entries':>8} {'kinked':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<22} {r.error:>12.3e} {r.tol:>8.0e} {r.entries:>8} {r.skipped:>7}  "
                     f"{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)

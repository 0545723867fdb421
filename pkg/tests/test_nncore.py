import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ngdenoise.nncore import (Adam, Conv2d, Frame, Param, adam_step, channel_pool, channel_pool_backward,
                              concat_channels, conv2d_backward, conv2d_forward, l1_loss, leaky_relu,
                              leaky_relu_backward, mse_loss, sigmoid, sigmoid_backward, split_channels)
from ngdenoise.nncore import kernels_numba, kernels_numpy
from ngdenoise.nncore.functional import conv_output_size

import oracles


def central_diff(f, x, h=1e-5):
    """Full numeric gradient of scalar ``f`` w.r.t. every entry of ``x`` (in place perturbation)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


# -- conv2d --------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 4))
    out = conv2d_forward(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    assert np.array_equal(out, x)


def test_conv_all_ones_hand_sum():
    out = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), padding=1)[0, 0]
    assert out.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


@pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 3), (1, 3, 7), (2, 0, 1), (3, 2, 5)])
def test_conv_matches_loop_oracle(stride, padding, k):
    rng = np.random.default_rng(k * 10 + stride)
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d_forward(x, w, b, stride, padding)
    want = oracles.conv2d_loops(x, w, b, stride, padding)
    assert got.shape == want.shape
    assert np.max(np.abs(got - want)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(0, 3))
def test_conv_output_size(size, k, stride, padding):
    if size + 2 * padding < k:
        with pytest.raises(ValueError):
            conv2d_forward(np.zeros((1, 1, size, size)), np.zeros((1, 1, k, k)), stride=stride, padding=padding)
        return
    out = conv2d_forward(np.zeros((1, 1, size, size)), np.zeros((2, 1, k, k)), stride=stride, padding=padding)
    expect = (size + 2 * padding - k) // stride + 1
    assert out.shape == (1, 2, expect, expect) and conv_output_size(size, k, stride, padding) == expect


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channel"):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_conv_backward_zero_grad_and_bias_identity():
    rng = np.random.default_rng(1)
    x, w = rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3))
    gx, gw, gb = conv2d_backward(x, w, np.zeros((2, 4, 5, 5)), padding=1)
    assert not gx.any() and not gw.any() and not gb.any()
    g = rng.standard_normal((2, 4, 5, 5))
    _, _, gb = conv2d_backward(x, w, g, padding=1)
    assert np.allclose(gb, g.sum(axis=(0, 2, 3)))


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_finite_differences(stride):
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 4, 5, 5))
    w = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(3)
    proj = rng.standard_normal(conv2d_forward(x, w, b, stride, 1).shape)

    def loss():
        return float(np.sum(conv2d_forward(x, w, b, stride, 1) * proj))

    gx, gw, gb = conv2d_backward(x, w, proj, stride, 1)
    assert rel_err(gx, central_diff(loss, x)) < 1e-6
    assert rel_err(gw, central_diff(loss, w)) < 1e-6
    assert rel_err(gb, central_diff(loss, b)) < 1e-6


# -- frame convolution (the fast path) -------------------------------------------

@pytest.mark.parametrize("cin,cout,k", [(3, 32, 3), (40, 8, 3), (32, 32, 1), (2, 1, 7), (32, 3, 3)])
@pytest.mark.parametrize("act", [False, True])
def test_frame_conv_matches_reference(cin, cout, k, act):
    rng = np.random.default_rng(cin + cout + k)
    layer = Conv2d("c", cin, cout, k, rng, dtype=np.float64)
    layer.bias.value[...] = rng.standard_normal(cout)
    x = rng.standard_normal((2, cin, 6, 5))
    ref = conv2d_forward(x, layer.weight.value, layer.bias.value, 1, k // 2)
    if act:
        ref = leaky_relu(ref, 0.2)
    frame = Frame.from_nchw(x, pad=k // 2)
    out = layer.forward(frame, act=act, slope=0.2)
    assert np.allclose(out.to_nchw(), ref, atol=1e-12)
    # the ring stays zero so the next layer sees proper padding
    grid = out.grid
    p = out.pad
    if p:
        assert not grid[:, :p].any() and not grid[:, :, :p].any()

    g = rng.standard_normal(ref.shape)
    gx, gw, gb = conv2d_backward(x, layer.weight.value, g, 1, k // 2)
    gin = frame.like()
    layer.backward(frame, Frame.from_nchw(g, pad=k // 2), gin)
    assert np.allclose(gin.to_nchw(), gx, atol=1e-11)
    assert np.allclose(layer.weight.grad, gw, atol=1e-11)
    assert np.allclose(layer.bias.grad, gb, atol=1e-11)


def test_conv_layer_param_count():
    assert Conv2d("c", 48, 8, 3).param_count == 8 * 48 * 9 + 8
    assert Conv2d("c", 48, 8, 3).param_count == sum(p.value.size for p in Conv2d("c", 48, 8, 3).params)


def test_conv_layer_rejects_even_kernel_and_bad_channels():
    with pytest.raises(ValueError):
        Conv2d("c", 3, 3, 2)
    with pytest.raises(ValueError):
        Conv2d("c", 3, 3, 3).forward(Frame.zeros(1, 4, 4, 2))


# -- activations, pooling, concat ------------------------------------------------

def test_leaky_relu_examples():
    assert leaky_relu(np.array(2.0), 0.2) == 2.0
    assert leaky_relu(np.array(-1.0), 0.2) == pytest.approx(-0.2)
    x = np.array([-1.0])
    g = central_diff(lambda: float(leaky_relu(x, 0.2)[0]), x)
    assert g[0] == pytest.approx(0.2, abs=1e-9)
    assert leaky_relu_backward(x, np.ones(1), 0.2)[0] == pytest.approx(0.2)


def test_sigmoid_examples():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    with np.errstate(over="raise"):
        v = sigmoid(np.array([40.0, -800.0]))
    assert 1 - 1e-12 < v[0] < 1.0
    assert 0.0 < v[1]
    x = np.array([0.0])
    g = central_diff(lambda: float(sigmoid(x)[0]), x)
    assert g[0] == pytest.approx(0.25, abs=1e-9)
    assert sigmoid_backward(sigmoid(x), np.ones(1))[0] == 0.25


@settings(max_examples=60, deadline=None)
@given(st.floats(-1e6, 1e6), st.sampled_from([np.float32, np.float64]))
def test_sigmoid_stays_open(x, dtype):
    y = sigmoid(np.array([x], dtype=dtype))
    assert 0.0 < y[0] < 1.0


def test_channel_pool_examples():
    x = np.full((1, 5, 2, 2), 0.7)
    assert np.allclose(channel_pool(x), 0.7)
    single = np.random.default_rng(0).standard_normal((2, 1, 3, 3))
    assert np.allclose(channel_pool(single), np.concatenate([single, single], axis=1))
    pix = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
    assert channel_pool(pix).ravel().tolist() == [2.0, 3.0]


def test_channel_pool_backward_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 6, 3, 3))
    proj = rng.standard_normal((2, 2, 3, 3))
    g = channel_pool_backward(x, proj)
    num = central_diff(lambda: float(np.sum(channel_pool(x) * proj)), x)
    assert rel_err(g, num) < 1e-6


def test_concat_examples():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((1, 32, 3, 4)), rng.standard_normal((1, 32, 3, 4))
    c = concat_channels(a, b)
    assert c.shape == (1, 64, 3, 4)
    assert np.array_equal(c[:, :32], a)
    assert np.array_equal(concat_channels(a, np.zeros((1, 0, 3, 4))), a)
    ga, gb = split_channels(c, 32)
    assert np.array_equal(ga, a) and np.array_equal(gb, b)
    with pytest.raises(ValueError):
        concat_channels(a, np.zeros((1, 2, 3, 5)))


# -- losses ----------------------------------------------------------------------

def test_mse_loss_examples():
    x = np.random.default_rng(5).random((2, 3, 4, 4))
    assert mse_loss(x, x)[0] == 0.0
    assert mse_loss(x + 0.1, x)[0] == pytest.approx(0.01)
    t = np.random.default_rng(6).random(x.shape)
    _, g = mse_loss(x, t)
    num = central_diff(lambda: mse_loss(x, t)[0], x)
    assert rel_err(g, num) < 1e-6


def test_l1_loss_examples():
    x = np.random.default_rng(7).random((2, 3, 4, 4))
    assert l1_loss(x, x)[0] == 0.0
    assert l1_loss(x - 0.3, x)[0] == pytest.approx(0.3)
    t = x + np.where(np.random.default_rng(8).random(x.shape) > 0.5, 0.2, -0.2)
    _, g = l1_loss(x, t)
    num = central_diff(lambda: l1_loss(x, t)[0], x)
    assert rel_err(g, num) < 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        mse_loss(np.zeros(3), np.zeros(4))
    with pytest.raises(ValueError):
        l1_loss(np.zeros(3), np.zeros(4))


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_grad_leaves_params():
    p = Param("w", np.array([1.0, -2.0]))
    opt = Adam([p])
    opt.step()
    assert p.value.tolist() == [1.0, -2.0]


def test_adam_first_step_closed_form():
    p = Param("w", np.zeros(1))
    adam_step([p], [np.ones(1)], Adam([p], lr=5e-4, eps=1e-8))
    # m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
    assert abs(p.value[0] + 5e-4 / (1 + 1e-8)) < 1e-15
    assert abs(p.value[0] + 5e-4) < 1e-8


def test_adam_matches_scalar_reference():
    rng = np.random.default_rng(9)
    grads = rng.standard_normal(50)
    p = Param("w", np.array([0.3]))
    opt = Adam([p], lr=1e-2, beta1=0.9, beta2=0.99, eps=1e-8)
    w, m, v = 0.3, 0.0, 0.0
    for t, g in enumerate(grads, 1):
        p.grad[...] = g
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.99 * v + 0.01 * g * g
        w -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
    assert p.value[0] == pytest.approx(w, abs=1e-12)
    assert opt.t == 50


def test_adam_deterministic_and_state_shapes():
    def run():
        rng = np.random.default_rng(10)
        ps = [Param("a", rng.standard_normal((3, 2))), Param("b", rng.standard_normal(4))]
        opt = Adam(ps)
        for _ in range(100):
            for p in ps:
                p.grad[...] = rng.standard_normal(p.value.shape)
            opt.step()
        return ps, opt

    (a, opt_a), (b, _) = run(), run()
    assert all(x.value.tobytes() == y.value.tobytes() for x, y in zip(a, b))
    m, v = opt_a.state_arrays()
    assert [x.shape for x in m] == [p.value.shape for p in a] == [x.shape for x in v]


def test_adam_rejects_wrong_grad_shape():
    p = Param("w", np.zeros(2))
    with pytest.raises(ValueError):
        adam_step([p], [np.zeros(3)], Adam([p]))


# -- numba / numpy kernel parity ---------------------------------------------------

def _ring_case(rng, n=2, h=5, w=4, c=6, pad=1, dtype=np.float64):
    hp, wp = h + 2 * pad, w + 2 * pad
    return rng.standard_normal((n * hp * wp, c)).astype(dtype), (n, hp, wp, pad)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_kernel_parity(dtype):
    rng = np.random.default_rng(11)
    xp = rng.standard_normal((2, 3, 7, 6)).astype(dtype)
    a = kernels_numpy.im2col(xp, 3, 2, 3, 2)
    assert np.array_equal(a, kernels_numba.im2col(xp, 3, 2, 3, 2))
    cols = rng.standard_normal(a.shape).astype(dtype)
    assert np.allclose(kernels_numpy.col2im(cols, 2, 3, 7, 6, 3, 2, 3, 2),
                       kernels_numba.col2im(cols, 2, 3, 7, 6, 3, 2, 3, 2), atol=1e-6)

    region, geo = _ring_case(rng, dtype=dtype)
    bias = rng.standard_normal(region.shape[1]).astype(dtype)
    for act in (False, True):
        r1, r2 = region.copy(), region.copy()
        kernels_numpy.ring_epilogue(r1, bias, 0.2, act, *geo)
        kernels_numba.ring_epilogue(r2, bias, 0.2, act, *geo)
        assert np.array_equal(r1, r2)
    y = rng.standard_normal(region.shape).astype(dtype)
    g1, g2 = region.copy(), region.copy()
    kernels_numpy.ring_leaky_grad(g1, y, 0.2, *geo)
    kernels_numba.ring_leaky_grad(g2, y, 0.2, *geo)
    assert np.array_equal(g1, g2)
    z1, z2 = region.copy(), region.copy()
    kernels_numpy.zero_ring(z1, *geo)
    kernels_numba.zero_ring(z2, *geo)
    assert np.array_equal(z1, z2)

    x = rng.standard_normal((2, 3, 4, 9)).astype(dtype)
    x[0, 0, 0, :] = 1.0          # ties go to the first maximal channel
    (p1, a1), (p2, a2) = kernels_numpy.channel_pool(x), kernels_numba.channel_pool(x)
    assert np.allclose(p1, p2, atol=1e-6) and np.array_equal(a1, a2)
    g = rng.standard_normal(p1.shape).astype(dtype)
    assert np.allclose(kernels_numpy.channel_pool_grad(g, a1, 9), kernels_numba.channel_pool_grad(g, a1, 9),
                       atol=1e-6)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_shift_kernels_parity(dtype):
    rng = np.random.default_rng(12)
    n, h, w, pad, cout = 2, 5, 6, 1, 4
    hp, wp = h + 2 * pad, w + 2 * pad
    margin = pad * wp + pad
    rows = n * hp * wp
    offsets = np.array([(dy - 1) * wp + (dx - 1) for dy in range(3) for dx in range(3)], dtype=np.int64)
    z = rng.standard_normal((rows + 2 * margin, offsets.size * cout)).astype(dtype)
    bias = rng.standard_normal(cout).astype(dtype)
    d1, d2 = np.empty((rows, cout), dtype), np.empty((rows, cout), dtype)
    kernels_numpy.shift_sum_epilogue(z, offsets, cout, bias, 0.2, True, d1, n, hp, wp, pad, margin)
    kernels_numba.shift_sum_epilogue(z, offsets, cout, bias, 0.2, True, d2, n, hp, wp, pad, margin)
    assert np.allclose(d1, d2, atol=1e-5)
    gbuf = rng.standard_normal((rows + 2 * margin, cout)).astype(dtype)
    o1 = np.empty((rows, offsets.size * cout), dtype)
    o2 = np.empty_like(o1)
    kernels_numpy.gather_taps(gbuf, offsets, margin, rows, o1)
    kernels_numba.gather_taps(gbuf, offsets, margin, rows, o2)
    assert np.array_equal(o1, o2)


def _backend_in_subprocess(value):
    env = dict(os.environ, NGDENOISE_KERNELS=value)
    code = "from ngdenoise.nncore import BACKEND; print(BACKEND)"
    return subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                          check=True).stdout.strip()


def test_backend_env_flag():
    assert _backend_in_subprocess("numpy") == "numpy"
    assert _backend_in_subprocess("numba") == "numba"


def test_numpy_backend_gives_same_model_output():
    code = ("import numpy as np; from ngdenoise.model import TwoStageDenoiser;"
            "m = TwoStageDenoiser(seed=3, dtype=np.float64);"
            "x = np.random.default_rng(0).random((12, 10, 3));"
            "c, e = m.denoise(x); print(repr(float(c.sum())), repr(float(e.sum())))")
    out = {}
    for value in ("numpy", "numba"):
        env = dict(os.environ, NGDENOISE_KERNELS=value)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[value] = [float(v) for v in res.stdout.split()]
    assert np.allclose(out["numpy"], out["numba"], rtol=1e-10)

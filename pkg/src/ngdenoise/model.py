"""Two-stage denoiser: noise-estimation network feeding a reconstruction network.

Stage I (:class:`NoiseEstimator`) maps a noisy image to a signed residual noise
estimate. Stage II (:class:`Reconstructor`) fuses the noisy image and that
estimate through a spatial noise-attention block and an RRDB trunk to produce
the clean image.

Every block exposes ``forward(..., keep=True) -> (output, cache)`` and
``backward(cache, grad)``; backward accumulates into ``Param.grad``. Feature
maps travel as :class:`~ngdenoise.nncore.Frame` objects.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .nncore import Conv2d, Frame
from .nncore._backend import kernels
from .nncore.functional import sigmoid


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32          # base feature width G0
    growth: int = 8             # dense growth rate c
    conv_layers: int = 5        # convs per RDB, d
    rdb_count: int = 3          # RDBs per RRDB
    rrdb_count: int = 3         # RRDBs per network
    residual_scale: float = 0.2
    slope: float = 0.2
    attention_kernel: int = 7

    def __post_init__(self):
        if self.conv_layers < 2:
            raise ValueError("conv_layers must be >= 2")
        if self.rdb_count < 1 or self.rrdb_count < 1:
            raise ValueError("rdb_count and rrdb_count must be >= 1")
        if not 0.0 <= self.residual_scale <= 1.0:
            raise ValueError("residual_scale must lie in [0, 1]")
        if not 0.0 < self.slope < 1.0:
            raise ValueError("slope must lie in (0, 1)")
        if self.attention_kernel % 2 != 1:
            raise ValueError("attention_kernel must be odd")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class RDB:
    """Residual dense block: dense 3x3 convs, a linear fusion conv, local skip."""

    def __init__(self, name, cfg: ModelConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        g0, c, d = cfg.channels, cfg.growth, cfg.conv_layers
        self.convs = [Conv2d(f"{name}.conv{i}", g0 + i * c, c, 3, rng, scale=0.1,
                             slope=cfg.slope, dtype=dtype) for i in range(d - 1)]
        self.fusion = Conv2d(f"{name}.conv{d - 1}", g0 + (d - 1) * c, g0, 3, rng, scale=0.1,
                             slope=cfg.slope, dtype=dtype)

    @property
    def layers(self):
        return self.convs + [self.fusion]

    def forward(self, x, keep=True):
        cfg = self.cfg
        if x.c != cfg.channels:
            raise ValueError(f"RDB expects {cfg.channels} channels, got {x.c}")
        feat = x.like(cfg.channels + (cfg.conv_layers - 1) * cfg.growth)
        feat.buf[:, :cfg.channels] = x.buf
        for conv in self.convs:
            cin = conv.in_channels
            conv.forward(feat.channels(0, cin), out=feat.channels(cin, cin + cfg.growth),
                         act=True, slope=cfg.slope)
        fused = self.fusion.forward(feat)
        fused.buf += x.buf
        return fused, (feat if keep else None)

    def backward(self, feat, grad):
        cfg = self.cfg
        gfeat = feat.like()
        self.fusion.backward(feat, grad, gfeat)
        for conv in reversed(self.convs):
            cin = conv.in_channels
            gout = gfeat.channels(cin, cin + cfg.growth)
            kernels.ring_leaky_grad(gout.region, feat.channels(cin, cin + cfg.growth).region,
                                    cfg.slope, *gout.geometry())
            conv.backward(feat.channels(0, cin), gout, gfeat.channels(0, cin))
        return Frame(grad.buf + gfeat.buf[:, :cfg.channels], grad.n, grad.h, grad.w, grad.pad)


class RRDB:
    """Chained RDBs with a scaled outer residual: ``x + beta * (chain(x) - x)``."""

    def __init__(self, name, cfg: ModelConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        self.rdbs = [RDB(f"{name}.rdb{i}", cfg, rng, dtype) for i in range(cfg.rdb_count)]

    @property
    def layers(self):
        return [layer for rdb in self.rdbs for layer in rdb.layers]

    def forward(self, x, keep=True):
        caches = []
        h = x
        for rdb in self.rdbs:
            h, cache = rdb.forward(h, keep)
            caches.append(cache)
        beta = self.cfg.residual_scale
        out = Frame(x.buf + beta * (h.buf - x.buf), x.n, x.h, x.w, x.pad)
        return out, (caches if keep else None)

    def backward(self, caches, grad):
        beta = self.cfg.residual_scale
        g = Frame(beta * grad.buf, grad.n, grad.h, grad.w, grad.pad)
        for rdb, cache in zip(reversed(self.rdbs), reversed(caches)):
            g = rdb.backward(cache, g)
        g.buf += (1.0 - beta) * grad.buf
        return g


class Trunk:
    """RRDBs separated by 1x1 LeakyReLU noise gates (one gate per consecutive pair)."""

    def __init__(self, name, cfg: ModelConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        self.rrdbs = []
        self.gates = []
        for i in range(cfg.rrdb_count):
            self.rrdbs.append(RRDB(f"{name}.rrdb{i}", cfg, rng, dtype))
            if i < cfg.rrdb_count - 1:
                self.gates.append(Conv2d(f"{name}.gate{i}", cfg.channels, cfg.channels, 1, rng,
                                         slope=cfg.slope, dtype=dtype))

    @property
    def layers(self):
        out = []
        for i, rrdb in enumerate(self.rrdbs):
            out += rrdb.layers
            if i < len(self.gates):
                out.append(self.gates[i])
        return out

    def forward(self, x, keep=True):
        caches = []
        for i, rrdb in enumerate(self.rrdbs):
            y, rc = rrdb.forward(x, keep)
            gate_in = y
            if i < len(self.gates):
                y = self.gates[i].forward(gate_in, act=True, slope=self.cfg.slope)
            caches.append((rc, gate_in, y) if keep else None)
            x = y
        return x, (caches if keep else None)

    def backward(self, caches, grad):
        for i in reversed(range(len(self.rrdbs))):
            rc, gate_in, gate_out = caches[i]
            if i < len(self.gates):
                g = grad.copy()
                kernels.ring_leaky_grad(g.region, gate_out.region, self.cfg.slope, *g.geometry())
                grad = gate_in.like()
                self.gates[i].backward(gate_in, g, grad)
            grad = self.rrdbs[i].backward(rc, grad)
        return grad


class NoiseEstimator:
    """Stage I: noisy image (3 ch) -> signed residual noise estimate (3 ch, unclamped)."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32, name="nen"):
        self.cfg = cfg
        self.head = Conv2d(f"{name}.head", 3, cfg.channels, 3, rng, slope=cfg.slope, dtype=dtype)
        self.trunk = Trunk(f"{name}.trunk", cfg, rng, dtype)
        self.tail = Conv2d(f"{name}.tail", cfg.channels, 3, 3, rng, slope=cfg.slope, dtype=dtype)

    @property
    def layers(self):
        return [self.head] + self.trunk.layers + [self.tail]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def forward(self, noisy, keep=True):
        if noisy.c != 3:
            raise ValueError(f"noise estimator expects 3 channels, got {noisy.c}")
        h = self.head.forward(noisy, act=True, slope=self.cfg.slope)
        t, tc = self.trunk.forward(h, keep)
        est = self.tail.forward(t)
        return est, ((noisy, h, tc, t) if keep else None)

    def backward(self, cache, grad, grad_input=False):
        noisy, h, tc, t = cache
        gt = t.like()
        self.tail.backward(t, grad, gt)
        gh = self.trunk.backward(tc, gt)
        kernels.ring_leaky_grad(gh.region, h.region, self.cfg.slope, *gh.geometry())
        gx = noisy.like() if grad_input else None
        self.head.backward(noisy, gh, gx)
        return gx


class NoiseAttention:
    """Self-guided spatial attention over noise and image features.

    ``N_T = conv(est)``, ``I_T = conv(noisy)`` (3x3, 32 filters each);
    ``A = sigmoid(conv_kxk([mean_c(X); max_c(X)]))`` with ``X = N_T (+) I_T``;
    output ``A * I_T``.
    """

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32, name="rn.nob"):
        self.cfg = cfg
        self.noise_conv = Conv2d(f"{name}.noise_conv", 3, cfg.channels, 3, rng, slope=cfg.slope, dtype=dtype)
        self.image_conv = Conv2d(f"{name}.image_conv", 3, cfg.channels, 3, rng, slope=cfg.slope, dtype=dtype)
        self.attention = Conv2d(f"{name}.attention", 2, 1, cfg.attention_kernel, rng,
                                slope=cfg.slope, dtype=dtype)

    @property
    def layers(self):
        return [self.noise_conv, self.image_conv, self.attention]

    def forward(self, noisy, est, keep=True, return_attention=False):
        if (noisy.n, noisy.h, noisy.w) != (est.n, est.h, est.w):
            raise ValueError("noisy image and noise estimate differ in shape")
        c = self.cfg.channels
        xc = noisy.like(2 * c)
        self.noise_conv.forward(est, out=xc.channels(0, c))
        self.image_conv.forward(noisy, out=xc.channels(c, 2 * c))
        pooled, arg = kernels.channel_pool(xc.interior)
        pf = Frame.from_nhwc(pooled, pad=self.cfg.attention_kernel // 2)
        z = self.attention.forward(pf)
        att = sigmoid(z.interior)
        it = xc.channels(c, 2 * c)
        out = it.like()
        np.multiply(att, it.interior, out=out.interior)
        cache = (noisy, est, xc, arg, pf, att) if keep else None
        if return_attention:
            return out, cache, att
        return out, cache

    def backward(self, cache, grad, grad_inputs=False):
        noisy, est, xc, arg, pf, att = cache
        c = self.cfg.channels
        it = xc.channels(c, 2 * c)
        g_att = np.sum(grad.interior * it.interior, axis=-1, keepdims=True)
        gz = Frame.from_nhwc(g_att * att * (1.0 - att), pad=pf.pad)
        gpf = pf.like()
        self.attention.backward(pf, gz, gpf)
        gxc = xc.like()
        gxc.interior[...] = kernels.channel_pool_grad(np.ascontiguousarray(gpf.interior), arg, 2 * c)
        gxc.channels(c, 2 * c).interior[...] += grad.interior * att
        g_est = est.like() if grad_inputs else None
        g_noisy = noisy.like() if grad_inputs else None
        self.noise_conv.backward(est, gxc.channels(0, c), g_est)
        self.image_conv.backward(noisy, gxc.channels(c, 2 * c), g_noisy)
        return g_noisy, g_est


class Reconstructor:
    """Stage II: (noisy, noise estimate) -> clean image clamped to [0, 1]."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32, name="rn"):
        self.cfg = cfg
        self.nob = NoiseAttention(cfg, rng, dtype, name=f"{name}.nob")
        self.trunk = Trunk(f"{name}.trunk", cfg, rng, dtype)
        self.tail = Conv2d(f"{name}.tail", cfg.channels, 3, 3, rng, slope=cfg.slope, dtype=dtype)

    @property
    def layers(self):
        return self.nob.layers + self.trunk.layers + [self.tail]

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    def forward(self, noisy, est, keep=True):
        s, nc = self.nob.forward(noisy, est, keep)
        t, tc = self.trunk.forward(s, keep)
        pre = self.tail.forward(t)
        out = Frame(np.clip(pre.buf, 0.0, 1.0), pre.n, pre.h, pre.w, pre.pad)
        out.zero_ring()
        return out, ((nc, tc, t, pre) if keep else None)

    def backward(self, cache, grad, grad_inputs=False):
        nc, tc, t, pre = cache
        g = Frame(np.where((pre.buf > 0.0) & (pre.buf < 1.0), grad.buf, 0.0).astype(grad.dtype),
                  grad.n, grad.h, grad.w, grad.pad)
        gt = t.like()
        self.tail.backward(t, g, gt)
        gs = self.trunk.backward(tc, gt)
        return self.nob.backward(nc, gs, grad_inputs)


class TwoStageDenoiser:
    """The composed pipeline ``noisy -> (clean, estimated noise)``."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int | None = 0, dtype=np.float32):
        self.cfg = cfg or ModelConfig()
        self.dtype = np.dtype(dtype)
        rng = None if seed is None else np.random.default_rng(seed)
        self.nen = NoiseEstimator(self.cfg, rng, dtype)
        self.rn = Reconstructor(self.cfg, rng, dtype)

    @property
    def params(self):
        return self.nen.params + self.rn.params

    def named_params(self):
        return [(p.name, p) for p in self.params]

    def forward(self, noisy_nhwc):
        """Batch inference on an ``(N, H, W, 3)`` array; returns NHWC (clean, noise)."""
        noisy = Frame.from_nhwc(np.asarray(noisy_nhwc, dtype=self.dtype))
        est, _ = self.nen.forward(noisy, keep=False)
        clean, _ = self.rn.forward(noisy, est, keep=False)
        return clean.to_nhwc(), est.to_nhwc()

    def denoise(self, image):
        """Denoise one ``H x W x 3`` image in [0, 1]; returns float64 (clean, noise)."""
        image = np.asarray(image)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
        clean, est = self.forward(image[None])
        return clean[0].astype(np.float64), est[0].astype(np.float64)


# -- array-level entry points ---------------------------------------------------
# Each takes and returns float NCHW arrays in the block's parameter dtype.

def _frame(x, dtype, pad=1):
    return Frame.from_nchw(np.asarray(x), pad=pad, dtype=dtype)


def _dtype(block):
    return block.layers[0].weight.value.dtype


def rdb_forward(x, block: RDB):
    out, _ = block.forward(_frame(x, _dtype(block)), keep=False)
    return out.to_nchw()


def rrdb_forward(x, block: RRDB):
    out, _ = block.forward(_frame(x, _dtype(block)), keep=False)
    return out.to_nchw()


def nen_forward(noisy, nen: NoiseEstimator):
    out, _ = nen.forward(_frame(noisy, _dtype(nen)), keep=False)
    return out.to_nchw()


def nob_forward(noisy, est, nob: NoiseAttention):
    """Returns ``(S_A, A_C)``: the 32-channel output and the (N, 1, H, W) attention map."""
    dt = _dtype(nob)
    out, _, att = nob.forward(_frame(noisy, dt), _frame(est, dt), keep=False, return_attention=True)
    return out.to_nchw(), np.ascontiguousarray(att.transpose(0, 3, 1, 2))


def rn_forward(noisy, est, rn: Reconstructor):
    dt = _dtype(rn)
    out, _ = rn.forward(_frame(noisy, dt), _frame(est, dt), keep=False)
    return out.to_nchw()


def pipeline_denoise(noisy, model: TwoStageDenoiser):
    """``H x W x 3`` noisy image -> (clean image, estimated noise field)."""
    return model.denoise(noisy)


def count_params(model: TwoStageDenoiser):
    """Exact trainable-parameter counts ``(nen_total, rn_total, grand_total)``."""
    nen = sum(layer.param_count for layer in model.nen.layers)
    rn = sum(layer.param_count for layer in model.rn.layers)
    return nen, rn, nen + rn


# Published reference sizes (NEN, RN, total) that count_params is compared against.
REFERENCE_PARAM_COUNTS = (283_776, 302_466, 586_242)

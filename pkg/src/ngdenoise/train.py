"""Two-stage training: per step, one Adam update of the noise estimator on the
residual MSE, then one Adam update of the reconstructor on the L1 image loss.

The reconstructor sees a fresh noise estimate computed with the just-updated
estimator and no gradient path back into it.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .imagecore import ImageError, list_pngs, load_png
from .metrics import MetricReport, measure
from .model import ModelConfig, TwoStageDenoiser
from .nncore import Adam, Frame
from .noisesim import SIGMA_MAX, NoiseSpec, Pattern, simulate

log = logging.getLogger(__name__)

VAL_SIGMAS = (10.0, 25.0, 50.0, 75.0)
VAL_PATTERNS = (Pattern.GAUSSIAN, Pattern.SPECKLE)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 8
    patch: int = 64
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    validate_every: int = 500
    sigma: float | None = None          # fixed noise level; None draws from sigma_range
    sigma_range: tuple[float, float] = (0.0, SIGMA_MAX)
    pattern: Pattern = Pattern.AUTO
    val_sigmas: tuple[float, ...] = VAL_SIGMAS
    val_seed: int = 2024
    val_crop: int = 128                 # centre-crop validation images to this side; 0 keeps full size
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        object.__setattr__(self, "sigma_range", tuple(float(s) for s in self.sigma_range))
        object.__setattr__(self, "val_sigmas", tuple(float(s) for s in self.val_sigmas))
        if isinstance(self.model, dict):
            object.__setattr__(self, "model", ModelConfig.from_dict(self.model))
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.patch < 8:
            raise ValueError("patch must be >= 8")
        lo, hi = self.sigma_range
        if not 0.0 <= lo <= hi <= SIGMA_MAX:
            raise ValueError(f"sigma_range must satisfy 0 <= lo <= hi <= {SIGMA_MAX:g}")
        if self.sigma is not None and not 0.0 <= self.sigma <= SIGMA_MAX:
            raise ValueError(f"sigma must lie in [0, {SIGMA_MAX:g}]")
        if self.validate_every < 0 or self.val_crop < 0:
            raise ValueError("validate_every and val_crop must be >= 0")

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["pattern"] = self.pattern.value
        d["sigma_range"] = list(self.sigma_range)
        d["val_sigmas"] = list(self.val_sigmas)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class TrainState:
    """Model, both optimizers, counters and every RNG the loop consumes."""

    def __init__(self, config: TrainConfig, model: TwoStageDenoiser | None = None):
        self.config = config
        self.model = model or TwoStageDenoiser(config.model, seed=config.seed)
        kw = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        self.opt_nen = Adam(self.model.nen.params, **kw)
        self.opt_rn = Adam(self.model.rn.params, **kw)
        self.step = 0
        self.best = None                     # {"step": int, "psnr": float}
        data_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(2)
        self.data_rng = np.random.default_rng(data_seq)
        self.noise_rng = np.random.default_rng(noise_seq)
        self.order: list[int] = []           # remaining image indices of the current epoch

    # -- checkpointing -------------------------------------------------------
    def entries(self):
        out = checkpoint.model_entries(self.model)
        for opt in (self.opt_nen, self.opt_rn):
            m, v = opt.state_arrays()
            out += [(p.name, "adam_m", a) for p, a in zip(opt.params, m)]
            out += [(p.name, "adam_v", a) for p, a in zip(opt.params, v)]
        return out

    def meta(self):
        return {
            "model": self.model.cfg.to_dict(),
            "train": self.config.to_dict(),
            "step": self.step,
            "best": self.best,
            "adam_t": [self.opt_nen.t, self.opt_rn.t],
            "data_rng": self.data_rng.bit_generator.state,
            "noise_rng": self.noise_rng.bit_generator.state,
            "order": list(self.order),
        }

    def save(self, path):
        checkpoint.save(path, self.entries(), self.meta())

    @classmethod
    def load(cls, path, config: TrainConfig | None = None) -> TrainState:
        """Restore a training checkpoint; ``config`` may extend ``steps``."""
        entries, meta = checkpoint.load(path)
        if "adam_t" not in meta:
            raise checkpoint.CheckpointError(f"{path}: no optimizer state, cannot resume")
        saved = TrainConfig.from_dict(meta["train"])
        config = config or saved
        if config.model != saved.model:
            raise checkpoint.CheckpointError(f"{path}: model configuration differs from the requested one")
        state = cls(config, TwoStageDenoiser(saved.model, seed=None))
        checkpoint.assign_params(state.model.params, entries)
        for opt, t in zip((state.opt_nen, state.opt_rn), meta["adam_t"]):
            names = [p.name for p in opt.params]
            m = {n: a for n, r, a in entries if r == "adam_m"}
            v = {n: a for n, r, a in entries if r == "adam_v"}
            try:
                opt.load_state([m[n] for n in names], [v[n] for n in names], t)
            except KeyError as exc:
                raise checkpoint.CheckpointError(f"{path}: optimizer state lacks {exc}") from None
        state.step = int(meta["step"])
        state.best = meta["best"]
        state.data_rng.bit_generator.state = meta["data_rng"]
        state.noise_rng.bit_generator.state = meta["noise_rng"]
        state.order = [int(i) for i in meta["order"]]
        return state


def _to_frame(batch, dtype):
    return Frame.from_nhwc(np.asarray(batch, dtype=dtype))


def _frame_from_grad(grad_nhwc, like: Frame):
    g = like.like()
    g.interior[...] = grad_nhwc
    return g


def _check_finite(name, value, step):
    if not math.isfinite(value):
        raise TrainingError(f"non-finite {name} ({value}) at step {step}")


def train_step(state: TrainState, clean_batch) -> tuple[float, float]:
    """One two-stage update on ``clean_batch`` (list of equal-size images)."""
    if len(clean_batch) == 0:
        raise ValueError("empty batch")
    shapes = {np.shape(c) for c in clean_batch}
    if len(shapes) != 1:
        raise ValueError(f"batch images differ in size: {sorted(shapes)}")
    cfg, model = state.config, state.model
    dtype = model.dtype
    lo, hi = cfg.sigma_range

    noisy, resid = [], []
    for clean in clean_batch:
        sigma = cfg.sigma if cfg.sigma is not None else float(state.noise_rng.uniform(lo, hi))
        sim = simulate(clean, NoiseSpec(cfg.pattern, sigma), rng=state.noise_rng)
        noisy.append(sim.noisy)
        resid.append(sim.residual)
    x = _to_frame(noisy, dtype)
    target_n = np.asarray(resid, dtype=dtype)
    target_c = np.asarray(clean_batch, dtype=dtype)

    # Stage I: MSE on the residual noise, NEN parameters only.
    state.opt_nen.zero_grad()
    est, cache = model.nen.forward(x)
    diff = est.interior.astype(np.float64) - target_n
    loss_e = float(np.mean(diff * diff))
    _check_finite("loss_E", loss_e, state.step + 1)
    model.nen.backward(cache, _frame_from_grad((2.0 / diff.size) * diff, est))
    state.opt_nen.step()

    # Stage II: L1 on the image, RN parameters only, with a detached fresh estimate.
    est, _ = model.nen.forward(x, keep=False)
    state.opt_rn.zero_grad()
    out, cache = model.rn.forward(x, est)
    diff = out.interior.astype(np.float64) - target_c
    loss_r = float(np.mean(np.abs(diff)))
    _check_finite("loss_R", loss_r, state.step + 1)
    model.rn.backward(cache, _frame_from_grad(np.sign(diff) / diff.size, out))
    state.opt_rn.step()

    state.step += 1
    return loss_e, loss_r


def load_dir(directory) -> list[tuple[str, np.ndarray]]:
    paths = list_pngs(directory)
    if not paths:
        raise ImageError(f"no PNG images in {directory}")
    return [(p.stem, load_png(p)) for p in paths]


def sample_batch(state: TrainState, images) -> list[np.ndarray]:
    """Random ``patch``-sized crops; images are visited in reshuffled epochs."""
    p = state.config.patch
    batch = []
    for _ in range(state.config.batch):
        if not state.order:
            state.order = [int(i) for i in state.data_rng.permutation(len(images))]
        img = images[state.order.pop(0)]
        h, w = img.shape[:2]
        y = int(state.data_rng.integers(0, h - p + 1))
        x = int(state.data_rng.integers(0, w - p + 1))
        batch.append(img[y:y + p, x:x + p])
    return batch


def center_crop(img, size):
    if size <= 0:
        return img
    h, w = img.shape[:2]
    th, tw = min(h, size), min(w, size)
    y, x = (h - th) // 2, (w - tw) // 2
    return img[y:y + th, x:x + tw]


class _Identity:
    """Baseline "denoiser" that returns its input."""

    def denoise(self, noisy):
        return noisy, np.zeros_like(noisy)


IDENTITY = _Identity()


def validate(model, val_images, sigma_set=VAL_SIGMAS, seed=2024,
             patterns=VAL_PATTERNS, crop=0) -> MetricReport:
    """Noise every image at every (sigma, pattern), denoise, and score against clean.

    ``model`` is anything with ``denoise(noisy) -> (clean, noise)``; pass
    :data:`IDENTITY` for the noisy-input baseline. The noise for image ``i`` is
    seeded from ``(seed, i, sigma, pattern)``, so reports are reproducible and
    every model sees the same noisy inputs.
    """
    report = MetricReport()
    for i, (name, img) in enumerate(val_images):
        clean = center_crop(img, crop)
        for sigma in sigma_set:
            for k, pattern in enumerate(patterns):
                pattern = Pattern(pattern)
                rng = np.random.default_rng([seed, i, int(round(sigma * 1000)), k])
                sim = simulate(clean, NoiseSpec(pattern, float(sigma)), rng=rng)
                restored, _ = model.denoise(sim.noisy)
                report.rows.append(measure(clean, restored, name, pattern.value, sigma))
    return report


def _side_path(out_path: Path, suffix: str) -> Path:
    return out_path.with_name(out_path.stem + suffix)


def train(config: TrainConfig, train_dir, val_dir, out_path, resume=False,
          log_every: int = 50) -> TrainState:
    """Full loop with periodic validation and checkpoints.

    Files written next to ``out_path`` (say ``run/model.ngt``): ``model.log``
    (one line per step), ``model.val-baseline.csv`` (noisy input),
    ``model.val-NNNNNN.csv`` per validation, ``model.best.ngt`` for the best
    mean validation PSNR so far, and ``out_path`` itself, always holding the
    latest state.
    """
    out_path = Path(out_path)
    images = [img for _, img in load_dir(train_dir)]
    val_images = load_dir(val_dir)
    small = [img.shape[:2] for img in images if min(img.shape[:2]) < config.patch]
    if small:
        raise ImageError(f"{len(small)} training image(s) smaller than patch {config.patch}, e.g. {small[0]}")

    if resume and out_path.exists():
        state = TrainState.load(out_path, config)
        log.info("resumed from %s at step %d", out_path, state.step)
    else:
        state = TrainState(config)
    log_path = _side_path(out_path, ".log")
    vkw = dict(sigma_set=config.val_sigmas, seed=config.val_seed, crop=config.val_crop)

    if state.step == 0:
        state.save(out_path)
        baseline = validate(IDENTITY, val_images, **vkw)
        baseline.write_csv(_side_path(out_path, ".val-baseline.csv"))
        log.info("baseline (noisy input): %s", baseline.summary())
        log_path.write_text("step loss_E loss_R wall_ms\n")

    with log_path.open("a") as fh:
        while state.step < config.steps:
            t0 = time.perf_counter()
            loss_e, loss_r = train_step(state, sample_batch(state, images))
            ms = (time.perf_counter() - t0) * 1e3
            fh.write(f"{state.step} {loss_e:.8g} {loss_r:.8g} {ms:.1f}\n")
            fh.flush()
            if log_every and state.step % log_every == 0:
                log.info("step %d loss_E %.6g loss_R %.6g (%.0f ms)", state.step, loss_e, loss_r, ms)
            last = state.step == config.steps
            if config.validate_every and (state.step % config.validate_every == 0 or last):
                report = validate(state.model, val_images, **vkw)
                report.write_csv(_side_path(out_path, f".val-{state.step:06d}.csv"))
                score = report.means()["psnr"]
                log.info("validation at step %d: %s", state.step, report.summary())
                if state.best is None or score > state.best["psnr"]:
                    state.best = {"step": state.step, "psnr": score}
                    checkpoint.save_model(_side_path(out_path, ".best.ngt"), state.model,
                                          {"step": state.step, "psnr": score})
                state.save(out_path)
    state.save(out_path)
    return state

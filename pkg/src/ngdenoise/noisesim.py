"""Multi-pattern noise simulation: additive Gaussian and multiplicative speckle.

Noise fields are drawn from numpy's PCG64 generator via
``Generator.standard_normal`` (ziggurat transform), scaled by ``sigma8 / 255``.
With the pattern or the level left on auto, each simulation draws
the level uniformly from [0, 75] and then a parity draw from {0, ..., 9} picks
Gaussian (even) or speckle (odd), so the two patterns come out evenly split.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SIGMA_MAX = 75.0


class Pattern(str, enum.Enum):
    GAUSSIAN = "gaussian"
    SPECKLE = "speckle"
    AUTO = "auto"


@dataclass(frozen=True)
class NoiseSpec:
    """Noise configuration. ``sigma8=None`` means draw the level uniformly from [0, 75]."""

    pattern: Pattern = Pattern.AUTO
    sigma8: float | None = None
    mean: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pattern", Pattern(self.pattern))
        if self.sigma8 is not None:
            _check_sigma(self.sigma8)


class Simulation(NamedTuple):
    noisy: np.ndarray
    residual: np.ndarray
    pattern: Pattern
    sigma8: float


def _check_sigma(sigma8):
    if not 0.0 <= sigma8 <= SIGMA_MAX:
        raise ValueError(f"sigma8 must lie in [0, {SIGMA_MAX:g}], got {sigma8}")


def sample_noise(shape, spec: NoiseSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """I.i.d. normal field with mean ``spec.mean`` and std ``spec.sigma8 / 255``."""
    if spec.sigma8 is None:
        raise ValueError("sample_noise needs an explicit sigma8")
    _check_sigma(spec.sigma8)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    return spec.mean + (spec.sigma8 / 255.0) * rng.standard_normal(shape)


def _check_shapes(clean, noise):
    if np.shape(clean) != np.shape(noise):
        raise ValueError(f"shape mismatch: image {np.shape(clean)} vs noise {np.shape(noise)}")


def apply_gaussian(clean, noise) -> np.ndarray:
    _check_shapes(clean, noise)
    return np.clip(clean + noise, 0.0, 1.0)


def apply_speckle(clean, noise) -> np.ndarray:
    _check_shapes(clean, noise)
    return np.clip(clean + clean * noise, 0.0, 1.0)


def simulate(clean, spec: NoiseSpec, rng: np.random.Generator | None = None) -> Simulation:
    """Corrupt ``clean`` per ``spec``; returns noisy image, residual, pattern, level.

    The residual is ``noisy - clean`` after clamping, so ``clean + residual``
    reproduces the stored noisy image (to one rounding) in either pattern. Pass ``rng``
    to continue an existing stream; otherwise a fresh one is seeded from
    ``spec.seed``.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    sigma8 = float(rng.uniform(0.0, SIGMA_MAX)) if spec.sigma8 is None else float(spec.sigma8)
    noise = sample_noise(clean.shape, NoiseSpec(Pattern.GAUSSIAN, sigma8, spec.mean, spec.seed), rng)
    pattern = spec.pattern
    if pattern is Pattern.AUTO:
        pattern = Pattern.GAUSSIAN if int(rng.integers(0, 10)) % 2 == 0 else Pattern.SPECKLE
    if pattern is Pattern.GAUSSIAN:
        noisy = apply_gaussian(clean, noise)
    else:
        noisy = apply_speckle(clean, noise)
    return Simulation(noisy, noisy - clean, pattern, sigma8)

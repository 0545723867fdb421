"""Image-quality metrics on the 8-bit scale: MSE, PSNR, SSIM, CIE76 delta E, VIFP.

All functions take float images in [0, 1] and scale by 255 internally.
SSIM and VIFP use "valid" filtering (no padding), as in the reference
implementations of both metrics.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .imagecore import ImageError, list_pngs, load_png, to_lab

PEAK = 255.0
SSIM_WINDOW, SSIM_SIGMA = 11, 1.5
SSIM_C1, SSIM_C2 = (0.01 * PEAK) ** 2, (0.03 * PEAK) ** 2
VIF_SCALES = 4
VIF_NOISE_VAR = 2.0
VIF_MIN_SIZE = 41       # smallest side that survives 4 valid-mode scales
LUMA = np.array([0.299, 0.587, 0.114])
CSV_HEADER = ("image", "pattern", "sigma", "psnr", "ssim", "delta_e", "vifp", "mse")


class MetricError(ValueError):
    pass


def _pair(ref, test):
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if ref.shape != test.shape:
        raise MetricError(f"shape mismatch: {ref.shape} vs {test.shape}")
    return ref, test


def mse(ref, test) -> float:
    ref, test = _pair(ref, test)
    d = (ref - test) * PEAK
    return float(np.mean(d * d))


def psnr_from_mse(m: float) -> float:
    return math.inf if m == 0 else 10.0 * math.log10(PEAK * PEAK / m)


def psnr(ref, test) -> float:
    """``10 log10(255^2 / MSE)``; ``inf`` for identical inputs."""
    return psnr_from_mse(mse(ref, test))


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps; the 2-D window is their outer product."""
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, taps):
    """Separable 2-D correlation of a 2-D array, keeping only full-overlap outputs."""
    r = taps.size // 2
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def _ssim_plane(x, y, taps):
    mx = _filter_valid(x, taps)
    my = _filter_valid(y, taps)
    sxx = _filter_valid(x * x, taps) - mx * mx
    syy = _filter_valid(y * y, taps) - my * my
    sxy = _filter_valid(x * y, taps) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return float(np.mean(num / den))


def ssim(ref, test) -> float:
    """Mean local SSIM (11x11 Gaussian, sigma 1.5), per channel then averaged."""
    ref, test = _pair(ref, test)
    if ref.ndim == 2:
        ref, test = ref[..., None], test[..., None]
    if min(ref.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {ref.shape[:2]}")
    taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    vals = [_ssim_plane(ref[..., c] * PEAK, test[..., c] * PEAK, taps) for c in range(ref.shape[2])]
    return float(np.mean(vals))


def delta_e(ref, test) -> float:
    """Mean CIE76 colour difference."""
    ref, test = _pair(ref, test)
    d = to_lab(ref) - to_lab(test)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=-1))))


def luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img if img.ndim == 2 else img @ LUMA


def vifp(ref, test) -> float:
    """Pixel-domain visual information fidelity of ``test`` against ``ref``.

    Four scales with Gaussian windows of 17, 9, 5 and 3 taps (sigma = size / 5);
    every scale after the first low-passes with its own window and keeps every
    other sample. Computed on BT.601 luma at 8-bit scale with noise variance 2.

    The ratio is undefined when the reference is flat everywhere; that case
    returns 1.0 if the two images are identical and 0.0 otherwise.
    """
    ref, test = _pair(ref, test)
    r = luma(ref) * PEAK
    d = luma(test) * PEAK
    if min(r.shape) < VIF_MIN_SIZE:
        raise MetricError(f"VIFP needs at least {VIF_MIN_SIZE}x{VIF_MIN_SIZE} pixels, got {r.shape}")
    eps = 1e-10
    num = den = 0.0
    for scale in range(1, VIF_SCALES + 1):
        n = 2 ** (VIF_SCALES - scale + 1) + 1
        taps = gaussian_window(n, n / 5.0)
        if scale > 1:
            r = _filter_valid(r, taps)[::2, ::2]
            d = _filter_valid(d, taps)[::2, ::2]
        mu1, mu2 = _filter_valid(r, taps), _filter_valid(d, taps)
        s1 = np.maximum(_filter_valid(r * r, taps) - mu1 * mu1, 0.0)
        s2 = np.maximum(_filter_valid(d * d, taps) - mu2 * mu2, 0.0)
        s12 = _filter_valid(r * d, taps) - mu1 * mu2

        g = s12 / (s1 + eps)
        sv = s2 - g * s12
        flat1 = s1 < eps
        g[flat1] = 0.0
        sv[flat1] = s2[flat1]
        s1[flat1] = 0.0
        flat2 = s2 < eps
        g[flat2] = 0.0
        sv[flat2] = 0.0
        neg = g < 0
        sv[neg] = s2[neg]
        g[neg] = 0.0
        sv = np.maximum(sv, eps)

        num += float(np.sum(np.log10(1.0 + g * g * s1 / (sv + VIF_NOISE_VAR))))
        den += float(np.sum(np.log10(1.0 + s1 / VIF_NOISE_VAR)))
    if den == 0.0:
        return 1.0 if np.array_equal(ref, test) else 0.0
    return num / den


@dataclass
class MetricRow:
    image: str
    pattern: str
    sigma: float
    psnr: float
    ssim: float
    delta_e: float
    vifp: float
    mse: float


METRIC_NAMES = ("psnr", "ssim", "delta_e", "vifp", "mse")


def measure(ref, test, image="", pattern="", sigma=math.nan) -> MetricRow:
    m = mse(ref, test)
    return MetricRow(image, pattern, float(sigma), psnr_from_mse(m), ssim(ref, test),
                     delta_e(ref, test), vifp(ref, test), m)


def _fmt(v: float) -> str:
    if math.isnan(v):
        return ""
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.4f}"


def _parse(s: str) -> float:
    return math.nan if s == "" else float(s)


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def means(self) -> dict[str, float]:
        """Arithmetic mean of each metric over the rows (PSNR is ``inf`` if any row is)."""
        if not self.rows:
            raise MetricError("empty report")
        return {k: float(np.mean([getattr(r, k) for r in self.rows])) for k in METRIC_NAMES}

    def subset(self, pattern=None, sigma=None) -> MetricReport:
        return MetricReport([r for r in self.rows
                             if (pattern is None or r.pattern == pattern)
                             and (sigma is None or r.sigma == sigma)])

    def summary(self) -> str:
        m = self.means()
        return " ".join(f"{k}={_fmt(m[k])}" for k in METRIC_NAMES)

    def write_csv(self, path) -> None:
        """Per-row lines followed by a ``mean`` line with the aggregates."""
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in self.rows:
                w.writerow([r.image, r.pattern, _fmt(r.sigma)] + [_fmt(getattr(r, k)) for k in METRIC_NAMES])
            if self.rows:
                m = self.means()
                w.writerow(["mean", "", ""] + [_fmt(m[k]) for k in METRIC_NAMES])

    @classmethod
    def read_csv(cls, path) -> MetricReport:
        rows = []
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != CSV_HEADER:
                raise MetricError(f"{path}: unexpected header {header}")
            for rec in reader:
                if rec[0] == "mean" and rec[1] == "" and rec[2] == "":
                    continue
                rows.append(MetricRow(rec[0], rec[1], *(_parse(v) for v in rec[2:])))
        return cls(rows)


_TAGS = (".clean", ".noisy", ".denoised")


def pair_key(path: Path) -> str:
    """File stem with a trailing ``.clean`` / ``.noisy`` / ``.denoised`` tag removed."""
    stem = path.stem
    for tag in _TAGS:
        if stem.endswith(tag):
            return stem[: -len(tag)]
    return stem


def _read_sim_manifest(directory: Path) -> dict[str, tuple[str, float]]:
    path = directory / "manifest.csv"
    if not path.is_file():
        return {}
    meta = {}
    with path.open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            meta[rec["name"]] = (rec.get("pattern", ""), _parse(rec.get("sigma", "")))
    return meta


def pair_files(ref_dir, test_dir, manifest=None) -> list[tuple[str, Path, Path]]:
    """Match reference and test PNGs.

    With a ``manifest`` (CSV with ``ref`` and ``test`` columns, paths relative to
    the two directories) pairs are taken from it verbatim. Otherwise files pair
    by :func:`pair_key`; the reference side ignores ``*.noisy.png`` and the test
    side ignores ``*.clean.png``. Any file left without a partner is an error.
    When both arguments name the same directory each file pairs with itself.
    """
    ref_dir, test_dir = Path(ref_dir), Path(test_dir)
    if manifest is not None:
        pairs = []
        with Path(manifest).open(newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                rp, tp = ref_dir / rec["ref"], test_dir / rec["test"]
                missing = [str(p) for p in (rp, tp) if not p.is_file()]
                if missing:
                    raise MetricError("manifest names missing files: " + ", ".join(missing))
                pairs.append((pair_key(rp), rp, tp))
        if not pairs:
            raise MetricError(f"manifest {manifest} lists no pairs")
        return pairs
    if ref_dir.resolve() == test_dir.resolve():
        # a directory scored against itself: every file is its own partner
        paths = list_pngs(ref_dir)
        if not paths:
            raise MetricError(f"no PNG files in {ref_dir}")
        return [(p.stem, p, p) for p in paths]
    refs = {pair_key(p): p for p in list_pngs(ref_dir) if not p.name.endswith(".noisy.png")}
    tests = {pair_key(p): p for p in list_pngs(test_dir) if not p.name.endswith(".clean.png")}
    unmatched = sorted([str(refs[k]) for k in refs.keys() - tests.keys()]
                       + [str(tests[k]) for k in tests.keys() - refs.keys()])
    if unmatched:
        raise MetricError("unmatched files: " + ", ".join(unmatched))
    if not refs:
        raise MetricError(f"no PNG pairs found in {ref_dir} and {test_dir}")
    return [(k, refs[k], tests[k]) for k in sorted(refs)]


def evaluate_dirs(ref_dir, test_dir, manifest=None) -> MetricReport:
    """All five metrics for every ref/test pair (see :func:`pair_files`)."""
    meta = _read_sim_manifest(Path(test_dir)) or _read_sim_manifest(Path(ref_dir))
    report = MetricReport()
    for key, rp, tp in pair_files(ref_dir, test_dir, manifest):
        ref, test = load_png(rp), load_png(tp)
        if ref.shape != test.shape:
            raise ImageError(f"{rp.name} and {tp.name} differ in size: {ref.shape} vs {test.shape}")
        pattern, sigma = meta.get(key, ("", math.nan))
        report.rows.append(measure(ref, test, key, pattern, sigma))
    return report


__all__ = ["MetricError", "MetricReport", "MetricRow", "mse", "psnr", "psnr_from_mse", "ssim",
           "delta_e", "vifp", "luma", "gaussian_window", "measure", "pair_files", "pair_key",
           "evaluate_dirs", "CSV_HEADER"]

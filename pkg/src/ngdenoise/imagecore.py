"""Image arrays, 8-bit PNG I/O, sRGB <-> CIELAB, and random patch extraction.

An image is a float64 ``(H, W, 3)`` numpy array with samples in [0, 1].
Grayscale inputs are replicated to three channels on load.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage

# sRGB primaries, D65 white.
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
D65_WHITE = np.array([0.95047, 1.0, 1.08883])

_LAB_EPS = (6.0 / 29.0) ** 3
_LAB_KAPPA = 3.0 * (6.0 / 29.0) ** 2


class ImageError(ValueError):
    """Raised for unreadable or unsupported image files."""


def as_image(arr) -> np.ndarray:
    """Validate and return ``arr`` as a float64 H x W x 3 image in [0, 1]."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite samples")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image samples must lie in [0, 1]")
    return img


def load_png(path) -> np.ndarray:
    """Read an 8-bit RGB or grayscale PNG as an image in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt != "PNG":
                raise ImageError(f"{path}: not a PNG file (format {fmt})")
            if mode not in ("L", "RGB"):
                raise ImageError(
                    f"{path}: unsupported PNG color type/bit depth (Pillow mode {mode!r}); "
                    "only 8-bit grayscale or RGB is accepted")
            data = np.asarray(im, dtype=np.uint8)
    except ImageError:
        raise
    except (OSError, SyntaxError) as exc:
        raise ImageError(f"cannot read {path}: {exc}") from exc
    if data.ndim == 2:
        data = np.repeat(data[:, :, None], 3, axis=2)
    return data.astype(np.float64) / 255.0


def quantize(img) -> np.ndarray:
    """Clamp to [0, 1] and map to bytes with round-half-up."""
    x = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def save_png(img, path) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    path = Path(path)
    try:
        PILImage.fromarray(quantize(img)).save(path, format="PNG")
    except OSError as exc:
        raise ImageError(f"cannot write {path}: {exc}") from exc


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(np.maximum(c, 0.0), 1.0 / 2.4) - 0.055)


def to_lab(img) -> np.ndarray:
    """sRGB image -> CIELAB (D65), same H x W shape, channels (L*, a*, b*)."""
    xyz = srgb_to_linear(img) @ _RGB_TO_XYZ.T / D65_WHITE
    f = np.where(xyz > _LAB_EPS, np.cbrt(xyz), xyz / _LAB_KAPPA + 4.0 / 29.0)
    lab = np.empty_like(f)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def from_lab(lab) -> np.ndarray:
    """Inverse of :func:`to_lab`; out-of-gamut results are clipped to [0, 1]."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    f = np.stack([fy + lab[..., 1] / 500.0, fy, fy - lab[..., 2] / 200.0], axis=-1)
    xyz = np.where(f > 6.0 / 29.0, f ** 3, _LAB_KAPPA * (f - 4.0 / 29.0)) * D65_WHITE
    return np.clip(linear_to_srgb(xyz @ _XYZ_TO_RGB.T), 0.0, 1.0)


def extract_patches(img, size: int, count: int, seed: int) -> list[np.ndarray]:
    """``count`` seeded axis-aligned ``size x size`` crops of ``img``."""
    h, w = img.shape[:2]
    if size < 1 or size > min(h, w):
        raise ValueError(f"patch size {size} does not fit a {h}x{w} image")
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, h - size + 1, size=count)
    xs = rng.integers(0, w - size + 1, size=count)
    return [img[y:y + size, x:x + size].copy() for y, x in zip(ys, xs)]


def list_pngs(directory) -> list[Path]:
    """Sorted PNG files directly inside ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ImageError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() == ".png")

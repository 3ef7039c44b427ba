"""CT slice preprocessing: resize, normalize, median filter, local-threshold
contrast enhancement and body masking.

Every stage is a pure function of its inputs; ``preprocess`` chains them.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.transform import resize as _sk_resize

MIN_SIDE = 32
# box-filter means of flat regions land ~1e-16 off; keep "strictly above" honest
THRESH_TOL = 1e-9


class DegenerateImage(UserWarning):
    """Otsu thresholding found no foreground; the image was passed through."""


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: tuple[int, int] = (320, 320)
    median_window: int = 3
    thresh_window: int = 15
    thresh_k: float = 0.0
    enhance_alpha: float = 1.2
    enhance_beta: float = 0.05
    artifact_removal: bool = True

    def __post_init__(self):
        object.__setattr__(self, "target_size", tuple(int(s) for s in self.target_size))
        if len(self.target_size) != 2 or min(self.target_size) < MIN_SIDE:
            raise ValueError(f"target_size components must be >= {MIN_SIDE}")
        for name in ("median_window", "thresh_window"):
            w = getattr(self, name)
            if w < 3 or w % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 3, got {w}")
        if self.enhance_alpha <= 0:
            raise ValueError("enhance_alpha must be positive")


def check_raw_image(pixels: np.ndarray, bit_depth: int | None = None) -> int:
    """Validate a raw raster and return its bit depth (8 or 16)."""
    if pixels.ndim not in (2, 3):
        raise ValueError(f"expected a 2-D or 3-D raster, got shape {pixels.shape}")
    if min(pixels.shape[:2]) < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}, got {pixels.shape[:2]}")
    if bit_depth is None:
        bit_depth = 16 if pixels.dtype == np.uint16 or pixels.max(initial=0) > 255 else 8
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    if pixels.min(initial=0) < 0 or pixels.max(initial=0) > 2**bit_depth - 1:
        raise ValueError(f"intensities outside [0, {2**bit_depth - 1}]")
    return bit_depth


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    if pixels.ndim == 3:
        return pixels.astype(np.float64).mean(axis=2)
    return pixels


def resize(img: np.ndarray, size) -> np.ndarray:
    """Bilinear resize to ``size`` = (height, width); output clipped to the input range."""
    size = tuple(int(s) for s in size)
    if min(size) < 1:
        raise ValueError("size components must be >= 1")
    if tuple(img.shape[:2]) == size:
        return img
    out = _sk_resize(
        img.astype(np.float64),
        size + img.shape[2:],
        order=1,
        mode="edge",
        anti_aliasing=False,
        preserve_range=True,
    )
    return np.clip(out, img.min(), img.max())


def normalize(img: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]. A constant image maps to zeros."""
    img = img.astype(np.float64)
    lo, hi = img.min(), img.max()
    if hi <= lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def median_filter(img: np.ndarray, window: int = 3) -> np.ndarray:
    if window < 3 or window % 2 == 0:
        raise ValueError("median window must be odd and >= 3")
    return ndimage.median_filter(img, size=window, mode="nearest")


def local_threshold(img: np.ndarray, window: int, k: float) -> np.ndarray:
    """Per-pixel threshold: local mean + k * local standard deviation."""
    mean = ndimage.uniform_filter(img, size=window, mode="nearest")
    if k == 0:
        return mean
    sq = ndimage.uniform_filter(img * img, size=window, mode="nearest")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    return mean + k * std


def dynamic_threshold_enhance(img: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Apply ``clip(alpha * I + beta, 0, 1)`` to pixels strictly above their local threshold."""
    thresh = local_threshold(img, cfg.thresh_window, cfg.thresh_k)
    boosted = np.clip(cfg.enhance_alpha * img + cfg.enhance_beta, 0.0, 1.0)
    return np.where(img > thresh + THRESH_TOL, boosted, img)


def body_mask(img: np.ndarray) -> np.ndarray | None:
    """Largest connected component of the Otsu foreground, or None if it is empty."""
    if img.max() <= img.min():
        return None
    fg = img > threshold_otsu(img)
    labels, n = ndimage.label(fg)
    if n == 0:
        return None
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def remove_artifacts(img: np.ndarray) -> np.ndarray:
    """Zero everything outside the body region.

    Holes inside the body component (e.g. dark lung fields) are kept: the
    component mask is hole-filled before it is applied. Emits
    :class:`DegenerateImage` and returns the input unchanged when Otsu finds
    no foreground.
    """
    mask = body_mask(img)
    if mask is None:
        warnings.warn("no foreground found; image passed through", DegenerateImage, stacklevel=2)
        return img
    mask = ndimage.binary_fill_holes(mask)
    return np.where(mask, img, 0.0)


def preprocess(img: np.ndarray, cfg: PreprocessConfig = PreprocessConfig(), stages: dict | None = None) -> np.ndarray:
    """Run the full pipeline on a raw raster and return a float64 image in [0, 1].

    If ``stages`` is a dict it receives each intermediate under the keys
    ``resize``, ``median``, ``enh`` and ``body`` (the last only when artifact
    removal is enabled).
    """
    check_raw_image(img)
    gray = to_grayscale(img)
    resized = normalize(resize(gray, cfg.target_size))
    med = median_filter(resized, cfg.median_window)
    enh = dynamic_threshold_enhance(med, cfg)
    out = remove_artifacts(enh) if cfg.artifact_removal else enh
    if stages is not None:
        stages["resize"] = resized
        stages["median"] = med
        stages["enh"] = enh
        if cfg.artifact_removal:
            stages["body"] = out
    return out

"""Turn dataset entries into model-ready arrays."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from skimage.transform import resize as _sk_resize

from .data import DatasetIndex, load_image, load_mask
from .preprocessing import PreprocessConfig, preprocess, resize, to_grayscale


def image_to_unit(pixels: np.ndarray) -> np.ndarray:
    """Scale an integer raster to [0, 1] by its bit depth."""
    pixels = to_grayscale(pixels)
    if pixels.dtype == np.uint16 or pixels.max(initial=0) > 255:
        return pixels.astype(np.float64) / 65535.0
    return pixels.astype(np.float64) / 255.0


def resize_mask(mask: np.ndarray, size) -> np.ndarray:
    size = tuple(int(s) for s in size)
    if mask.shape == size:
        return mask
    out = _sk_resize(mask.astype(np.float64), size, order=0, anti_aliasing=False, preserve_range=True)
    return (out > 0.5).astype(np.uint8)


def prepare_image(pixels: np.ndarray, size, pp: PreprocessConfig | None = None) -> np.ndarray:
    """Raw raster -> float32 [H, W] in [0, 1] at ``size``.

    With a preprocessing config the full pipeline runs (its target size is
    overridden by ``size``); otherwise the image is scaled by bit depth and
    bilinearly resized.
    """
    size = tuple(int(s) for s in size)
    if pp is not None:
        return preprocess(pixels, replace(pp, target_size=size)).astype(np.float32)
    return np.clip(resize(image_to_unit(pixels), size), 0.0, 1.0).astype(np.float32)


def load_sample(index: DatasetIndex, sample_id: str, size, pp: PreprocessConfig | None = None):
    image = prepare_image(load_image(index.image_path(sample_id)), size, pp)
    mask = resize_mask(load_mask(index.mask_path(sample_id)), size)
    return image, mask


def load_tensors(index: DatasetIndex, size, pp: PreprocessConfig | None = None, ids=None):
    """Load every (or the listed) sample into memory.

    Returns ``{id: (image [1, H, W] float32, mask [1, H, W] float32)}``.
    """
    out = {}
    for sid in ids if ids is not None else index.entries:
        image, mask = load_sample(index, sid, size, pp)
        out[sid] = (torch.from_numpy(image)[None], torch.from_numpy(mask.astype(np.float32))[None])
    return out


def stack_batch(samples: dict, ids) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([samples[i][0] for i in ids])
    masks = torch.stack([samples[i][1] for i in ids])
    return images.expand(-1, 3, -1, -1).contiguous(), masks

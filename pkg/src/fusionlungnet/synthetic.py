"""Seeded synthetic "CT slice" corpus: a bright body ellipse containing two
dark lung ellipses, with speckle and small vessels. Masks are the lungs."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import save_image, save_mask


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def ellipse_sample(rng: np.random.Generator, size: int = 160) -> tuple[np.ndarray, np.ndarray]:
    """One (uint8 image, {0,1} mask) pair of side ``size``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = size * (0.5 + rng.uniform(-0.04, 0.04))
    cx = size * (0.5 + rng.uniform(-0.04, 0.04))
    body = _ellipse(yy, xx, cy, cx, size * rng.uniform(0.36, 0.44), size * rng.uniform(0.40, 0.47), 0.0)

    lungs = np.zeros_like(body)
    for side in (-1, 1):
        ly = cy + size * rng.uniform(-0.05, 0.05)
        lx = cx + side * size * rng.uniform(0.14, 0.2)
        ry = size * rng.uniform(0.17, 0.26)
        rx = size * rng.uniform(0.08, 0.13)
        lungs |= _ellipse(yy, xx, ly, lx, ry, rx, rng.uniform(-0.3, 0.3)) & body

    img = np.full((size, size), rng.uniform(0.0, 0.06))
    img[body] = rng.uniform(0.5, 0.75)
    img[lungs] = rng.uniform(0.12, 0.3)
    # vessels: small bright blobs inside the lungs that remain lung in the mask
    for _ in range(rng.integers(3, 9)):
        vy, vx = np.argwhere(lungs)[rng.integers(lungs.sum())] if lungs.any() else (cy, cx)
        img[_ellipse(yy, xx, vy, vx, 1.5, 1.5, 0.0) & lungs] += rng.uniform(0.1, 0.25)
    img += rng.normal(0.0, 0.04, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255).astype(np.uint8), lungs.astype(np.uint8)


def make_ellipse_dataset(root, count: int = 240, size: int = 160, seed: int = 0) -> Path:
    """Write ``count`` pairs under ``root/images`` and ``root/masks``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = len(str(count - 1))
    for i in range(count):
        img, mask = ellipse_sample(rng, size)
        sid = f"synth_{i:0{width}d}"
        save_image(img, root / "images" / f"{sid}.png")
        save_mask(mask, root / "masks" / f"{sid}.png")
    return root

"""Procedural test images: smooth gradients with a few flat shapes and stripes."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .imaging import save_image


def synthetic_image(size: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, size])
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3))
    angle = rng.uniform(0, np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1) / 2
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        r = rng.uniform(0.08, 0.25)
        disc = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        img[disc] = rng.uniform(0, 1, size=3)
    if rng.uniform() < 0.5:
        freq = rng.integers(3, 8)
        stripe = (np.sin(2 * np.pi * freq * xx) > 0.6)[..., None]
        img = np.where(stripe, img * 0.6, img)
    return np.clip(img, 0, 1)


def write_synthetic_dataset(out, n: int = 8, size: int = 64, seed: int = 0) -> Path:
    """Write ``n`` PPMs under ``out/images``; returns ``out``."""
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for i in range(n):
        save_image(synthetic_image(size, seed * 1000 + i), out / "images" / f"synth_{i:03d}.ppm")
    return out

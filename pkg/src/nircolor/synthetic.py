"""Small synthetic NIR/RGB datasets for smoke tests and desk-scale runs.

Each scene is a smooth random field ``t`` in [0, 1]. RGB is a fixed color
ramp of ``t`` so that color is a function of luminance, and NIR is a
different smooth function of ``t`` plus a faint per-scene pattern.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def _field(rng: np.random.Generator, size: int, waves: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    t = np.zeros((size, size))
    for _ in range(waves):
        fy, fx = rng.uniform(0.5, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        t += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    t -= t.min()
    return t / max(t.max(), 1e-8)


def toy_scene(rng: np.random.Generator, size: int = 64):
    """Return (nir, rgb) float arrays in [0, 1] with shapes (H, W) and (H, W, 3)."""
    # equalize so every scene shares the same tonal distribution
    t = _field(rng, size)
    t = np.argsort(np.argsort(t, axis=None)).reshape(t.shape) / (t.size - 1)
    # every channel rises with t along its own curve: hue varies, but color
    # stays recoverable from gray and positively correlated with it
    rgb = np.stack([
        0.1 + 0.8 * t,
        0.2 + 0.6 * t ** 2,
        0.3 + 0.5 * np.sqrt(t),
    ], axis=-1)
    nir = 0.2 + 0.6 * np.sqrt(t) + 0.05 * _field(rng, size, waves=1)
    return np.clip(nir, 0, 1), np.clip(rgb, 0, 1)


def write_toy_dataset(root: Path, n_train: int = 4, n_test: int = 0, size: int = 64,
                      seed: int = 0) -> Path:
    """Write a VCIP-layout dataset of 8-bit PNG pairs under ``root``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            nir, rgb = toy_scene(rng, size)
            for sub, arr in (("nir", nir), ("rgb", rgb)):
                d = root / split / sub
                d.mkdir(parents=True, exist_ok=True)
                Image.fromarray(np.round(arr * 255).astype(np.uint8)).save(d / f"{i:04d}.png")
    return root

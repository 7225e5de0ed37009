"""Synthetic unpaired fixtures for desk-scale runs and tests.

Scenes are smooth colored blob fields, so a small network can represent
them; dark images are separate scenes scaled down by a smooth
illumination field with optional sensor noise.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import save_png


def smooth_scene(rng: np.random.Generator, height: int, width: int, n_blobs: int = 6) -> np.ndarray:
    """HxWx3 float image in [0, 1] built from Gaussian blobs over a color gradient."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    img = rng.uniform(0.2, 0.6, 3) + np.einsum("hw,c->hwc", xx - 0.5, rng.uniform(-0.3, 0.3, 3))
    for _ in range(n_blobs):
        cy, cx = rng.uniform(0, 1, 2)
        sigma = rng.uniform(0.08, 0.3)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
        img = img + np.einsum("hw,c->hwc", blob, rng.uniform(-0.4, 0.5, 3))
    return np.clip(img, 0.02, 1.0)


def scale_to_mean(img: np.ndarray, mean: float) -> np.ndarray:
    return np.clip(img * (mean / img.mean()), 0.0, 1.0)


def dark_version(scene: np.ndarray, rng: np.random.Generator, mean: float, noise_sigma: float = 0.0,
                 field: bool = True):
    """Scene times a smooth illumination field (or a uniform gain), rescaled to ``mean``, plus Gaussian noise."""
    h, w, _ = scene.shape
    if field:
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        light = 0.6 + 0.4 * np.cos(2 * np.pi * (rng.uniform(0.3, 1.0) * xx + rng.uniform(0.3, 1.0) * yy)
                                   + rng.uniform(0, 2 * np.pi))
        scene = scene * light[..., None]
    dark = scale_to_mean(scene, mean)
    if noise_sigma:
        dark = dark + rng.normal(0.0, noise_sigma, dark.shape)
    return np.clip(dark, 0.0, 1.0)


def make_unpaired_fixture(root, n_low=16, n_normal=16, size=64, seed=0, low_mean=0.15, normal_mean=0.6,
                          low_noise=0.0, field=True):
    """Write ``root/low/*.png`` and ``root/normal/*.png``; returns the two directories.

    ``low_noise`` is the noise sigma at the dark level; after a brightening
    gain of ``normal_mean / low_mean`` it is amplified by the same factor.
    """
    rng = np.random.default_rng(seed)
    root = Path(root)
    low_dir, normal_dir = root / "low", root / "normal"
    for i in range(n_normal):
        save_png(scale_to_mean(smooth_scene(rng, size, size), normal_mean), normal_dir / f"n{i:03d}.png")
    for i in range(n_low):
        scene = smooth_scene(rng, size, size)
        save_png(dark_version(scene, rng, low_mean, low_noise, field), low_dir / f"l{i:03d}.png")
    return low_dir, normal_dir

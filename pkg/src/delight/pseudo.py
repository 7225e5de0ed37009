"""Pseudo-triple construction for unsupervised denoiser training.

Noise estimated on a real enhanced/denoised pair is transplanted onto a
randomly matched clean image, and the result is gamma-darkened to give a
matching pseudo low-light input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError
from .imaging import estimate_gamma, gamma_apply, illumination_mask


@dataclass
class PseudoTriple:
    low: torch.Tensor        # gamma-darkened pseudo low-light image
    noisy: torch.Tensor      # clean image plus transplanted noise
    clean: torch.Tensor      # the real clean image
    mask: torch.Tensor       # illumination mask between ``noisy`` and ``low``
    gamma: torch.Tensor
    clip_fraction: float = 0.0


def estimate_noise(enhanced: torch.Tensor, denoised: torch.Tensor) -> torch.Tensor:
    if enhanced.shape != denoised.shape:
        raise ValueError(f"shape mismatch: {tuple(enhanced.shape)} vs {tuple(denoised.shape)}")
    return enhanced - denoised


def make_pseudo_triple(clean, noise, mean_low, mean_enhanced, formula="corrected",
                       gamma_bounds=(1.0, 10.0), mean_clamp=1e-3, gamma=None) -> PseudoTriple:
    """Build ``{low, noisy, clean}`` plus mask from a clean image and a noise field.

    ``mean_low`` / ``mean_enhanced`` may be floats or per-sample tensors of
    shape ``(N,)``; they are clamped into ``[mean_clamp, 1 - mean_clamp]``
    before the gamma exponent is estimated. A positive ``gamma`` skips the
    estimate (the means are then ignored).
    """
    if clean.shape != noise.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(noise.shape)}")
    raw = clean + noise
    noisy = torch.clamp(raw, 0.0, 1.0)
    clip_fraction = float((raw != noisy).float().mean())

    lo, hi = mean_clamp, 1.0 - mean_clamp
    if gamma is not None:
        lam = torch.tensor(float(gamma), dtype=clean.dtype)
        lam_b = lam
    elif isinstance(mean_low, torch.Tensor) or isinstance(mean_enhanced, torch.Tensor):
        ml = torch.clamp(torch.as_tensor(mean_low, dtype=torch.float64), lo, hi)
        me = torch.clamp(torch.as_tensor(mean_enhanced, dtype=torch.float64), lo, hi)
        lam = estimate_gamma(ml, me, formula, gamma_bounds).to(clean.dtype)
        lam_b = lam.reshape(-1, *([1] * (clean.dim() - 1))) if lam.dim() else lam
    else:
        ml = min(max(float(mean_low), lo), hi)
        me = min(max(float(mean_enhanced), lo), hi)
        lam = torch.tensor(estimate_gamma(ml, me, formula, gamma_bounds), dtype=clean.dtype)
        lam_b = lam
    low = gamma_apply(noisy, lam_b)
    return PseudoTriple(low=low, noisy=noisy, clean=clean, mask=illumination_mask(low, noisy),
                        gamma=lam, clip_fraction=clip_fraction)


def match_clean(rng: np.random.Generator, pool):
    """Uniformly draw one item from a non-empty pool."""
    if len(pool) == 0:
        raise ConfigError("clean image pool is empty")
    return pool[int(rng.integers(len(pool)))]

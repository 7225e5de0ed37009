"""Pixel-level primitives shared by both enhancement stages.

Images are torch tensors laid out channel-first, either ``(3, H, W)`` or
batched ``(N, 3, H, W)``, with values in ``[0, 1]``. Gray maps keep a
singleton channel axis, ``(..., 1, H, W)``, so they can be concatenated
with images directly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

EPS_S = 0.01
EPS_IN = 1e-5
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class DomainError(ValueError):
    """An argument lies outside the mathematical domain of an operation."""


def _check_same_shape(a, b, what="inputs"):
    if a.shape != b.shape:
        raise ValueError(f"{what} must have equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")


def retinex_recover(low: torch.Tensor, illum: torch.Tensor, eps: float = EPS_S) -> torch.Tensor:
    """Recover the well-exposed image by element-wise division ``low / illum``.

    The quotient is clamped to [0, 1]. ``illum`` must already be floored at
    ``eps``; anything below it is rejected rather than silently fixed.
    """
    _check_same_shape(low, illum, "low-light image and illumination map")
    if bool((illum < eps).any()):
        raise DomainError(f"illumination values must be >= {eps}, got min {float(illum.min()):.3g}")
    return torch.clamp(low / illum, 0.0, 1.0)


def grayscale_illu(img: torch.Tensor) -> torch.Tensor:
    """BT.601 luma of an RGB image, returned as ``(..., 1, H, W)``."""
    if img.shape[-3] != 3:
        raise ValueError(f"expected 3 channels on axis -3, got shape {tuple(img.shape)}")
    w = img.new_tensor(LUMA_WEIGHTS).view(3, 1, 1)
    return (img * w).sum(dim=-3, keepdim=True)


def illumination_mask(low: torch.Tensor, enhanced: torch.Tensor) -> torch.Tensor:
    """How much brightness was added per pixel: ``max(illu(enhanced) - illu(low), 0)``."""
    _check_same_shape(low, enhanced, "low-light and enhanced images")
    return torch.clamp(grayscale_illu(enhanced) - grayscale_illu(low), min=0.0)


def gamma_apply(img: torch.Tensor, lam) -> torch.Tensor:
    """Element-wise power ``img ** lam``.

    ``lam`` may be a scalar or a tensor broadcastable against ``img``
    (e.g. ``(N, 1, 1, 1)`` for one exponent per sample).
    """
    lam_t = torch.as_tensor(lam, dtype=img.dtype, device=img.device)
    if bool((lam_t <= 0).any()):
        raise DomainError("gamma exponent must be positive")
    return torch.pow(img, lam_t)


def estimate_gamma(mean_low, mean_enhanced, formula: str = "corrected", bounds=None):
    """Gamma exponent that maps the enhanced brightness back to the low-light one.

    ``formula="corrected"`` computes ``log(mean_low) / log(mean_enhanced)``,
    which is >= 1 whenever the enhanced image is the brighter of the two.
    ``formula="reciprocal"`` uses ``log(mean_enhanced) / log(mean_low)``. Works on floats or tensors;
    ``bounds=(lo, hi)`` clamps the result.
    """
    if formula not in ("corrected", "reciprocal"):
        raise ValueError(f"unknown gamma formula {formula!r}")
    if isinstance(mean_low, torch.Tensor) or isinstance(mean_enhanced, torch.Tensor):
        ml = torch.as_tensor(mean_low, dtype=torch.float64)
        me = torch.as_tensor(mean_enhanced, dtype=torch.float64)
        if bool(((ml <= 0) | (ml >= 1) | (me <= 0) | (me >= 1)).any()):
            raise DomainError("image means must lie strictly inside (0, 1)")
        lam = torch.log(ml) / torch.log(me)
        if formula == "reciprocal":
            lam = 1.0 / lam
        if bounds is not None:
            lam = torch.clamp(lam, bounds[0], bounds[1])
        return lam
    ml, me = float(mean_low), float(mean_enhanced)
    if not (0.0 < ml < 1.0 and 0.0 < me < 1.0):
        raise DomainError(f"image means must lie strictly inside (0, 1), got {ml}, {me}")
    lam = math.log(ml) / math.log(me)
    if formula == "reciprocal":
        lam = 1.0 / lam
    if bounds is not None:
        lam = min(max(lam, bounds[0]), bounds[1])
    return lam


def instance_normalize(feat: torch.Tensor, eps: float = EPS_IN) -> torch.Tensor:
    """Standardize each channel over its spatial positions.

    The variance is floored at ``eps`` (not offset by it), so any channel
    whose variance exceeds the floor comes out with exactly zero mean and
    unit variance, and the map is invariant to positive per-channel affine
    rescaling of its input.
    """
    if feat.shape[-1] * feat.shape[-2] < 1:
        raise ValueError("instance_normalize needs at least one spatial position")
    mu = feat.mean(dim=(-2, -1), keepdim=True)
    centered = feat - mu
    var = (centered * centered).mean(dim=(-2, -1), keepdim=True)
    return centered / torch.sqrt(torch.clamp(var, min=eps))


def avg_downsample(img: torch.Tensor, factor: int) -> torch.Tensor:
    """Block-mean downsampling by an integer factor.

    Sizes that are not multiples of ``factor`` are edge-padded up to the
    next multiple first.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if factor == 1:
        return img
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    h, w = x.shape[-2:]
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    out = F.avg_pool2d(x, factor)
    return out.squeeze(0) if squeeze else out


@dataclass
class Patch:
    pixels: torch.Tensor
    origin: tuple[int, int]


def patch_origins(height: int, width: int, size: int, count: int, rng: np.random.Generator):
    """``count`` uniformly random top-left corners of in-bounds ``size`` squares."""
    if size > min(height, width):
        raise ValueError(f"patch size {size} exceeds image dims {height}x{width}")
    if count < 0:
        raise ValueError("count must be >= 0")
    rows = rng.integers(0, height - size + 1, size=count)
    cols = rng.integers(0, width - size + 1, size=count)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def crop_patches(img: torch.Tensor, size: int, count: int, rng: np.random.Generator) -> list[Patch]:
    h, w = img.shape[-2:]
    return [
        Patch(img[..., r:r + size, c:c + size], (r, c))
        for r, c in patch_origins(h, w, size, count, rng)
    ]


def crop_at(img: torch.Tensor, origins, size: int) -> torch.Tensor:
    """Stack crops taken at fixed origins along a new leading axis."""
    return torch.stack([img[..., r:r + size, c:c + size] for r, c in origins])

"""Training objectives for both stages.

Score arguments are tensors of per-sample critic outputs (any shape; they
are flattened). Image arguments follow the channel-first convention of
:mod:`delight.imaging`. Every loss returns a scalar tensor so it can sit
inside an autograd graph.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigError
from .imaging import avg_downsample, instance_normalize


@dataclass(frozen=True)
class LossWeights:
    lambda_color: float = 10.0
    lambda_adapt: float = 1.0
    lambda_con: float = 1.0
    gamma_p: float = 10.0
    gamma_c: float = 10.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0, got {v}")


def _scores(x, name):
    x = torch.as_tensor(x)
    if x.numel() == 0:
        raise ValueError(f"{name} score batch is empty")
    return x.reshape(-1)


def ragan_d_loss(real, fake):
    """Relativistic-average least-squares critic loss."""
    r, f = _scores(real, "real"), _scores(fake, "fake")
    return ((r - f.mean() - 1) ** 2).mean() + ((f - r.mean()) ** 2).mean()


def ragan_g_loss(real, fake):
    r, f = _scores(real, "real"), _scores(fake, "fake")
    return ((r - f.mean()) ** 2).mean() + ((f - r.mean() - 1) ** 2).mean()


def lsgan_d_loss(real, fake):
    r, f = _scores(real, "real"), _scores(fake, "fake")
    return ((r - 1) ** 2).mean() + (f ** 2).mean()


def lsgan_g_loss(fake):
    f = _scores(fake, "fake")
    return ((f - 1) ** 2).mean()


def _check_layers(extractor, layers):
    layers = tuple(extractor.layers if layers is None else layers)
    exposed = getattr(extractor, "names", extractor.layers)
    missing = [l for l in layers if l not in exposed]
    if missing:
        raise ConfigError(f"feature extractor does not expose layer(s) {missing}")
    return layers


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"images must have equal shapes, got {tuple(a.shape)} and {tuple(b.shape)}")


def perceptual_loss(extractor, a, b, normalize=True, layers=None):
    """Sum over layers of the mean squared feature difference.

    With ``normalize`` each feature map is instance-normalized first, which
    removes per-channel brightness and contrast from the comparison.
    """
    _check_shapes(a, b)
    layers = _check_layers(extractor, layers)
    total = a.new_zeros(())
    for fa, fb in zip(extractor(a, layers), extractor(b, layers)):
        if normalize:
            fa, fb = instance_normalize(fa), instance_normalize(fb)
        total = total + F.mse_loss(fa, fb)
    return total


def _safe_norm(x, dim):
    # clamp keeps the backward pass finite at the zero vector
    return torch.sqrt(torch.clamp((x * x).sum(dim=dim), min=1e-30))


def color_loss(output, reference, factor=4, mode="angle"):
    """Mean angle between corresponding RGB vectors of block-averaged images.

    The angle is computed as ``atan2(|x cross y|, x . y)``, which equals the
    arccos of the cosine similarity but stays accurate for nearly parallel
    vectors. Pixels where either vector is zero contribute 0.
    ``mode="one_minus_cos"`` swaps in ``1 - cos`` instead.
    """
    _check_shapes(output, reference)
    x = avg_downsample(output, factor)
    y = avg_downsample(reference, factor)
    dim = -3
    dot = (x * y).sum(dim=dim)
    valid = ((x != 0).any(dim=dim)) & ((y != 0).any(dim=dim))
    if mode == "angle":
        cross = torch.linalg.cross(x, y, dim=dim)
        per_pixel = torch.atan2(_safe_norm(cross, dim), dot)
    elif mode == "one_minus_cos":
        per_pixel = 1 - dot / (_safe_norm(x, dim) * _safe_norm(y, dim))
    else:
        raise ValueError(f"unknown color loss mode {mode!r}")
    return torch.where(valid, per_pixel, torch.zeros_like(per_pixel)).mean()


def adaptive_content_loss(extractor, generated, clean, mask, gamma_p=10.0, layers=None):
    """Mask-weighted feature and L1 distance between a denoised pseudo image and its clean target.

    ``mask`` is ``(N, 1, H, W)`` in [0, 1]; it is average-pooled to each
    feature map's size. Features are compared raw, without normalization.
    """
    _check_shapes(generated, clean)
    if bool((mask < 0).any()) or bool((mask > 1).any()):
        raise ValueError("mask values must lie in [0, 1]")
    layers = _check_layers(extractor, layers)
    total = generated.new_zeros(())
    for fg, fc in zip(extractor(generated, layers), extractor(clean, layers)):
        m = F.adaptive_avg_pool2d(mask, fg.shape[-2:])
        total = total + ((m * (fg - fc)) ** 2).mean()
    return total + gamma_p * (mask * (generated - clean)).abs().mean()


def content_loss(extractor, enhanced, output, gamma_c=10.0, layers=None):
    """Feature + L1 distance between instance-normalized stage inputs and outputs."""
    _check_shapes(enhanced, output)
    layers = _check_layers(extractor, layers)
    a, b = instance_normalize(enhanced), instance_normalize(output)
    total = a.new_zeros(())
    for fa, fb in zip(extractor(a, layers), extractor(b, layers)):
        total = total + F.mse_loss(fa, fb)
    return total + gamma_c * (a - b).abs().mean()


def total_stage2_loss(parts, weights: LossWeights = LossWeights()):
    """Weighted sum of the four Stage II generator terms.

    ``parts`` maps ``adv``, ``color``, ``adapt`` and ``con`` to non-negative values.
    """
    for k, v in parts.items():
        val = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(val) or val < 0:
            raise ValueError(f"loss component {k} must be finite and >= 0, got {val}")
    return (parts["adv"] + weights.lambda_color * parts["color"]
            + weights.lambda_adapt * parts["adapt"] + weights.lambda_con * parts["con"])

"""Retinex recovery and the loss building blocks on one synthetic image.

Run: python3 demos/01_retinex_and_losses.py
"""
import numpy as np
import torch

from delight import losses as L
from delight.imaging import grayscale_illu, illumination_mask, instance_normalize, retinex_recover
from delight.networks import FeatureExtractor
from delight.synthetic import dark_version, scale_to_mean, smooth_scene

rng = np.random.default_rng(0)
scene = scale_to_mean(smooth_scene(rng, 64, 64), 0.6)
clean = torch.from_numpy(scene.transpose(2, 0, 1)).float()[None]
low = torch.from_numpy(dark_version(scene, rng, 0.15).transpose(2, 0, 1)).float()[None]

# An illumination map S explains the dark image as I_l = R * S; recovering R is I_l / S.
# A flat S of 0.25 is a uniform 4x gain.
flat = torch.full_like(low, 0.25)
enhanced = retinex_recover(low, flat)
print(f"mean brightness: low {low.mean():.3f}, enhanced {enhanced.mean():.3f}, clean {clean.mean():.3f}")
print(f"pixels clipped by the recovery: {(low / flat > 1).float().mean():.2%}")

# The grey-level map and the mask Stage II uses to weight its content loss
mask = illumination_mask(low, enhanced)
print(f"grey illumination range {float(grayscale_illu(low).min()):.3f}..{float(grayscale_illu(low).max()):.3f}, "
      f"mask mean {mask.mean():.3f}")

# Instance normalization removes per-channel gain and offset
print(f"IN(2x + 0.1) vs IN(x): max diff {float((instance_normalize(2 * low + 0.1) - instance_normalize(low)).abs().max()):.1e}")

# The losses: colour angle ignores brightness; the relativistic critic loss is 1 when every
# score is the same constant, and grows with the spread of scores around their mean
print(f"color_loss(0.5 * clean, clean) = {L.color_loss(0.5 * clean, clean).item():.2e}")
print(f"color_loss(enhanced, clean)    = {L.color_loss(enhanced, clean).item():.4f} rad")
flat_scores, scores = torch.full((8,), 0.3), torch.randn(8)
print(f"ragan_d_loss(c, c) = {L.ragan_d_loss(flat_scores, flat_scores).item():.4f}, "
      f"ragan_d_loss(s, s) = {L.ragan_d_loss(scores, scores).item():.4f} (1 + 2 var(s))")

fx = FeatureExtractor(kind="test", seed=0, width_divisor=8)
print(f"perceptual(enhanced, clean) = {L.perceptual_loss(fx, enhanced, clean).item():.4f}")
print(f"perceptual(clean, clean)    = {L.perceptual_loss(fx, clean, clean).item():.4f}")

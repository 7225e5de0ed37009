"""How Stage II manufactures supervised triples without paired data.

A clean normal-light image J_c borrows the noise I_n = I_e - I_c that the
denoiser removed from an enhanced image, and is darkened by the gamma that
maps the enhanced brightness back to the low-light brightness.

Run: python3 demos/02_pseudo_triples.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
import torch

from delight.data import save_png
from delight.imaging import estimate_gamma
from delight.metrics import psnr
from delight.pseudo import estimate_noise, make_pseudo_triple
from delight.synthetic import scale_to_mean, smooth_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
rng = np.random.default_rng(1)


def scene(mean):
    return torch.from_numpy(scale_to_mean(smooth_scene(rng, 96, 96), mean).transpose(2, 0, 1)).float()[None]


# Pretend Stage I brightened a 0.15-mean image to 0.6 and amplified sensor noise to sigma 0.06,
# and that the current denoiser output I_c is exactly the noise-free content.
content = scene(0.6)
enhanced = (content + 0.06 * torch.randn(content.shape, generator=torch.Generator().manual_seed(0))).clamp(0, 1)
noise = estimate_noise(enhanced, content)

lam = estimate_gamma(0.15, 0.6)
print(f"gamma mapping mean 0.6 back to 0.15: {lam:.4f} (0.6 ** {lam:.4f} = {0.6 ** lam:.4f})")

clean = scene(0.6)
t = make_pseudo_triple(clean, noise, 0.15, 0.6)
print(f"J_c mean {t.clean.mean():.3f}, J_e mean {t.noisy.mean():.3f}, J_l mean {t.low.mean():.3f}, "
      f"clipped {t.clip_fraction:.2%}")
# gamma is applied per pixel, so J_l only hits the target mean exactly on flat images
print(f"PSNR(J_e, J_c) = {psnr(t.noisy[0], t.clean[0]):.2f} dB: the denoiser learns to undo this")

panels = [t.clean[0], t.noisy[0], t.low[0], t.mask[0].expand(3, -1, -1)]
save_png(torch.cat(panels, dim=-1), out / "pseudo_triple.png")
print(f"wrote {out / 'pseudo_triple.png'} (J_c | J_e | J_l | mask)")

"""Stage I / Stage II training loops, model selection and two-stage inference.

Each iteration performs one discriminator update followed by one generator
update. All randomness is drawn from named substreams of the root seed
(``data``, ``init``, ``pseudo``, ``val``), so changing how one of them is
consumed does not shift the others.
"""
from __future__ import annotations

import copy
import json
import logging
import math
import time
import zlib
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import Checkpoint
from .config import Config, config_from_dict
from .data import BatchSpec, UnpairedDataset, pad_to_multiple, sample_batch
from .errors import ConfigError, DataError, NumericAbort
from .imaging import crop_at, illumination_mask, instance_normalize, patch_origins, retinex_recover
from .metrics import psnr
from .networks import (DiscriminatorSpec, FeatureExtractor, MultiScaleDiscriminator, PatchDiscriminator,
                       Stage1Generator, Stage1GeneratorSpec, Stage2Generator, Stage2GeneratorSpec,
                       build_network, stage1_forward, stage2_forward)
from .pseudo import estimate_noise, make_pseudo_triple, match_clean

log = logging.getLogger(__name__)


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named consumer of the root seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(substream(seed, name).integers(2 ** 31 - 1))


def linear_decay_lr(epoch: int, lr0: float, epochs_flat: int, epochs_decay: int) -> float:
    """Constant for ``epoch <= epochs_flat``, then linear down to zero over ``epochs_decay``."""
    if epoch <= epochs_flat or epochs_decay <= 0:
        return lr0
    return lr0 * max(0.0, 1.0 - (epoch - epochs_flat) / epochs_decay)


class JsonlLog:
    """Newline-delimited JSON training log; also forwards records to an optional callback."""

    def __init__(self, path=None, callback=None, wall_time=True):
        self.path = Path(path) if path else None
        self.callback = callback
        self.wall_time = wall_time
        self.records = []
        self._t0 = time.perf_counter()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def __call__(self, record: dict):
        if self.wall_time:
            record = {**record, "wall": round(time.perf_counter() - self._t0, 3)}
        self.records.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if self.callback:
            self.callback(record)


def _as_sink(sink):
    if sink is None:
        return JsonlLog(wall_time=False)
    return sink


def build_extractor(cfg: Config) -> FeatureExtractor:
    f = cfg.features
    return FeatureExtractor(kind=f.kind, layers=tuple(f.layers), seed=f.seed, width_divisor=f.width_divisor,
                            weights_path=f.weights_path or None, sha256=f.sha256 or None)


def stage1_specs(cfg: Config):
    s = cfg.stage1
    return (Stage1GeneratorSpec(base_channels=s.base_channels),
            DiscriminatorSpec(base_channels=s.disc_channels),
            DiscriminatorSpec(base_channels=s.disc_channels))


def stage2_specs(cfg: Config):
    s = cfg.stage2
    geometry = {"encoder_strides": (1, 1), "decoder_scales": (1, 1, 1)} if s.full_resolution else {}
    return (Stage2GeneratorSpec(base_channels=s.base_channels, n_res_blocks=s.n_res_blocks,
                                residual=s.residual_output, **geometry),
            DiscriminatorSpec(base_channels=s.disc_channels, scales=2))


def _check_finite(parts: dict, iteration: int, ids):
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise NumericAbort(f"non-finite loss {bad} at iteration {iteration}",
                           {"iteration": iteration, "losses": parts, "batch": ids})


def _set_lr(opts, lr):
    for opt in opts:
        for g in opt.param_groups:
            g["lr"] = lr


def _state(nets: dict):
    return {k: copy.deepcopy(v.state_dict()) for k, v in nets.items()}


def _iters_per_epoch(explicit, dataset, batch_size):
    if explicit:
        return explicit
    n = len(dataset.select("low", "train"))
    return max(1, math.ceil(n / batch_size))


def _require(dataset: UnpairedDataset):
    for role in ("low", "normal"):
        if not dataset.select(role, "train"):
            raise DataError(f"dataset has no {role}-light training images")


# ---------------------------------------------------------------- Stage I


def stage1_generator_losses(nets, extractor, low, enhanced, normal, origins, cfg):
    """Generator objective for a Stage I batch; returns (total, parts dict)."""
    s = cfg.stage1
    layers = s.perceptual_layers
    fake_p, low_p = _patches(enhanced, origins, s.patch_size), _patches(low, origins, s.patch_size)
    adv_g = L.ragan_g_loss(nets["D_g"].score(normal), nets["D_g"].score(enhanced))
    adv_l = L.lsgan_g_loss(nets["D_l"].score(fake_p))
    per_g = L.perceptual_loss(extractor, low, enhanced, True, layers)
    per_l = L.perceptual_loss(extractor, low_p, fake_p, True, layers)
    total = adv_g + adv_l + per_g + per_l
    return total, {"g_adv_global": adv_g, "g_adv_local": adv_l, "g_per_global": per_g, "g_per_local": per_l}


def _patches(batch, origins, size):
    return torch.cat([crop_at(img, o, size) for img, o in zip(batch, origins)])


def _origins(batch, size, count, rng):
    h, w = batch.shape[-2:]
    return [patch_origins(h, w, size, count, rng) for _ in range(batch.shape[0])]


def train_stage1(dataset: UnpairedDataset, cfg: Config, sink=None) -> Checkpoint:
    """Adversarial illumination training; returns the selected checkpoint."""
    _require(dataset)
    s, seed = cfg.stage1, cfg.runtime.seed
    sink = _as_sink(sink)
    g_spec, dg_spec, dl_spec = stage1_specs(cfg)
    init = substream(seed, "init")
    nets = {
        "G_e": build_network(g_spec, int(init.integers(2 ** 31 - 1))),
        "D_g": build_network(dg_spec, int(init.integers(2 ** 31 - 1))),
        "D_l": build_network(dl_spec, int(init.integers(2 ** 31 - 1))),
    }
    extractor = build_extractor(cfg)
    opt_g = torch.optim.Adam(nets["G_e"].parameters(), lr=s.lr, betas=(s.beta1, s.beta2))
    opt_d = torch.optim.Adam(list(nets["D_g"].parameters()) + list(nets["D_l"].parameters()),
                             lr=s.lr, betas=(s.beta1, s.beta2))
    rng = substream(seed, "data")
    bspec = BatchSpec.for_stage(1, s.batch_size, s.crop, hflip=s.hflip)
    ipe = _iters_per_epoch(s.iters_per_epoch, dataset, s.batch_size)
    eps = cfg.losses.eps_s
    best = None
    it = 0
    for epoch in range(s.epochs_flat + s.epochs_decay):
        lr = linear_decay_lr(epoch, s.lr, s.epochs_flat, s.epochs_decay)
        _set_lr((opt_g, opt_d), lr)
        for m in nets.values():
            m.train()
        for _ in range(ipe):
            it += 1
            low, normal, ids = sample_batch(dataset, bspec, rng, return_ids=True)
            origins = _origins(low, s.patch_size, s.n_local_patches, rng)
            real_origins = _origins(normal, s.patch_size, s.n_local_patches, rng)
            enhanced = retinex_recover(low, stage1_forward(nets["G_e"], low, eps), eps)

            fake_p = _patches(enhanced.detach(), origins, s.patch_size)
            real_p = _patches(normal, real_origins, s.patch_size)
            d_glob = L.ragan_d_loss(nets["D_g"].score(normal), nets["D_g"].score(enhanced.detach()))
            d_loc = L.lsgan_d_loss(nets["D_l"].score(real_p), nets["D_l"].score(fake_p))
            d_loss = d_glob + d_loc
            _check_finite({"d_global": d_glob.item(), "d_local": d_loc.item()}, it, ids)
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()

            for name in ("D_g", "D_l"):
                nets[name].requires_grad_(False)
            g_loss, g_parts = stage1_generator_losses(nets, extractor, low, enhanced, normal, origins, cfg)
            for name in ("D_g", "D_l"):
                nets[name].requires_grad_(True)
            parts = {"d_global": d_glob.item(), "d_local": d_loc.item(), "g_total": g_loss.item(),
                     **{k: v.item() for k, v in g_parts.items()}}
            _check_finite(parts, it, ids)
            opt_g.zero_grad(set_to_none=True)
            g_loss.backward()
            opt_g.step()
            sink({"stage": 1, "iter": it, "epoch": epoch, "lr": lr, **parts})

        last_epoch = epoch == s.epochs_flat + s.epochs_decay - 1
        if s.selection != "last" and ((epoch + 1) % max(1, s.val_every) == 0 or last_epoch):
            score = validate_stage1(nets, extractor, dataset, cfg)
            if score is not None and (best is None or score > best[0]):
                best = (score, epoch, _state(nets), copy.deepcopy({"G": opt_g.state_dict(), "D": opt_d.state_dict()}))
    if best is None:
        score = float("nan")
        best = (score, s.epochs_flat + s.epochs_decay - 1, _state(nets),
                {"G": opt_g.state_dict(), "D": opt_d.state_dict()})
    score, epoch, params, optim = best
    return Checkpoint(stage=1, params=params, optim=optim, epoch=epoch, val_score=score,
                      config=cfg.to_dict(), meta={"iterations": it, "selection": s.selection})


@torch.no_grad()
def validate_stage1(nets, extractor, dataset, cfg):
    """Model-selection score (higher is better), or None when the val split is empty."""
    s = cfg.stage1
    lows = dataset.select("low", "val")
    normals = dataset.select("normal", "val") or dataset.select("normal", "train")
    if not lows:
        return None
    for m in nets.values():
        m.eval()
    try:
        if s.selection == "psnr":
            by_stem = {Path(r.path).stem: r for r in normals}
            pairs = [(r, by_stem.get(Path(r.path).stem)) for r in lows]
            pairs = [(a, b) for a, b in pairs if b is not None]
            if not pairs:
                raise ConfigError("stage1.selection = 'psnr' needs val low/normal images with matching names")
            vals = []
            for a, b in pairs:
                out = _enhance_stage1(nets["G_e"], dataset.image(a), cfg.losses.eps_s)
                vals.append(psnr(out, dataset.image(b)))
            return float(np.mean(vals))
        rng = substream(cfg.runtime.seed, "val")
        real = torch.cat([nets["D_g"].score(_pad8(dataset.image(r))[None]) for r in normals])
        fakes, per_g, lows_p, fakes_p = [], [], [], []
        for r in lows:
            low = _pad8(dataset.image(r))[None]
            enh = retinex_recover(low, stage1_forward(nets["G_e"], low, cfg.losses.eps_s), cfg.losses.eps_s)
            fakes.append(nets["D_g"].score(enh))
            per_g.append(L.perceptual_loss(extractor, low, enh, True, s.perceptual_layers))
            size = min(s.patch_size, *low.shape[-2:])
            o = _origins(low, size, s.n_local_patches, rng)
            lows_p.append(_patches(low, o, size))
            fakes_p.append(_patches(enh, o, size))
        fake = torch.cat(fakes)
        lp, fp = torch.cat(lows_p), torch.cat(fakes_p)
        total = (L.ragan_g_loss(real, fake) + L.lsgan_g_loss(nets["D_l"].score(fp))
                 + torch.stack(per_g).mean() + L.perceptual_loss(extractor, lp, fp, True, s.perceptual_layers))
        return -float(total)
    finally:
        for m in nets.values():
            m.train()


def _pad8(img):
    return pad_to_multiple(img, 8)[0]


def _enhance_stage1(gen, img, eps):
    x, (h, w) = pad_to_multiple(img[None] if img.dim() == 3 else img, 8)
    out = retinex_recover(x, stage1_forward(gen, x, eps), eps)
    return out[..., :h, :w]


# ---------------------------------------------------------------- Stage II


def load_stage1_generator(ckpt: Checkpoint) -> Stage1Generator:
    if ckpt.stage != 1 or "G_e" not in ckpt.params:
        raise ConfigError("expected a Stage I checkpoint holding G_e")
    cfg = config_from_dict(ckpt.config)
    gen = Stage1Generator(stage1_specs(cfg)[0])
    _load(gen, ckpt.params["G_e"], "G_e")
    gen.eval().requires_grad_(False)
    return gen


def load_stage2_generator(ckpt: Checkpoint) -> Stage2Generator:
    if ckpt.stage != 2 or "G_n" not in ckpt.params:
        raise ConfigError("expected a Stage II checkpoint holding G_n")
    cfg = config_from_dict(ckpt.config)
    gen = Stage2Generator(stage2_specs(cfg)[0])
    _load(gen, ckpt.params["G_n"], "G_n")
    gen.eval().requires_grad_(False)
    return gen


def _load(module, state, name):
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint parameters do not match the {name} architecture: {exc}") from exc


def stage2_step_inputs(gen1, low, eps):
    with torch.no_grad():
        enhanced = retinex_recover(low, stage1_forward(gen1, low, eps), eps)
        mask = illumination_mask(low, enhanced)
    return enhanced, mask


def stage2_generator_losses(gen2, dn, extractor, low, enhanced, mask, output, triple, cfg):
    """Stage II generator objective; returns (total, parts dict, pseudo output)."""
    lc, weights = cfg.losses, loss_weights(cfg)
    generated = stage2_forward(gen2, triple.low, triple.noisy, triple.mask)
    parts = {
        "adv": sum(L.lsgan_g_loss(s) for s in dn(instance_normalize(output))),
        "color": L.color_loss(output, enhanced, lc.color_factor, lc.color_loss),
        "adapt": L.adaptive_content_loss(extractor, generated, triple.clean, triple.mask, lc.gamma_p,
                                         cfg.features.layers),
        "con": L.content_loss(extractor, enhanced, output, lc.gamma_c, cfg.features.layers),
    }
    return L.total_stage2_loss(parts, weights), parts, generated


def loss_weights(cfg: Config) -> L.LossWeights:
    lc = cfg.losses
    return L.LossWeights(lc.lambda_color, lc.lambda_adapt, lc.lambda_con, lc.gamma_p, lc.gamma_c)


def build_triple(low, output, enhanced, clean_pool, rng, cfg):
    """Pseudo triple from the current batch: transplant ``enhanced - output`` onto matched clean crops."""
    lc = cfg.losses
    noise = estimate_noise(enhanced, output.detach())
    clean = torch.stack([match_clean(rng, clean_pool) for _ in range(low.shape[0])])
    return make_pseudo_triple(clean, noise, low.mean(dim=(1, 2, 3)), output.detach().mean(dim=(1, 2, 3)),
                              lc.gamma_formula, (lc.gamma_min, lc.gamma_max), lc.mean_clamp)


def _param_digest(module):
    h = zlib.crc32(b"")
    for k, v in module.state_dict().items():
        h = zlib.crc32(k.encode() + v.detach().cpu().numpy().tobytes(), h)
    return h


def train_stage2(dataset: UnpairedDataset, stage1_ckpt: Checkpoint, cfg: Config, sink=None) -> Checkpoint:
    """Denoiser training on top of a frozen Stage I generator."""
    _require(dataset)
    s, seed, eps = cfg.stage2, cfg.runtime.seed, cfg.losses.eps_s
    sink = _as_sink(sink)
    gen1 = load_stage1_generator(stage1_ckpt)
    frozen = _param_digest(gen1)
    g_spec, d_spec = stage2_specs(cfg)
    init = substream(seed, "init2")
    gen2 = build_network(g_spec, int(init.integers(2 ** 31 - 1)))
    dn = build_network(d_spec, int(init.integers(2 ** 31 - 1)))
    extractor = build_extractor(cfg)
    opt_g = torch.optim.Adam(gen2.parameters(), lr=s.lr, betas=(s.beta1, s.beta2))
    opt_d = torch.optim.Adam(dn.parameters(), lr=s.lr, betas=(s.beta1, s.beta2))
    rng, prng = substream(seed, "data"), substream(seed, "pseudo")
    bspec = BatchSpec.for_stage(2, s.batch_size, s.crop, hflip=s.hflip, rot90=s.rot90)
    ipe = _iters_per_epoch(s.iters_per_epoch, dataset, s.batch_size)
    best, it = None, 0
    for epoch in range(s.epochs):
        gen2.train()
        dn.train()
        for _ in range(ipe):
            it += 1
            low, normal, ids = sample_batch(dataset, bspec, rng, return_ids=True)
            enhanced, mask = stage2_step_inputs(gen1, low, eps)
            output = stage2_forward(gen2, low, enhanced, mask)

            real_scores = dn(instance_normalize(normal))
            fake_scores = dn(instance_normalize(output.detach()))
            d_loss = sum(L.lsgan_d_loss(r, f) for r, f in zip(real_scores, fake_scores))
            _check_finite({"d": d_loss.item()}, it, ids)
            opt_d.zero_grad(set_to_none=True)
            d_loss.backward()
            opt_d.step()

            triple = build_triple(low, output, enhanced, list(normal), prng, cfg)
            dn.requires_grad_(False)
            total, g_parts, _ = stage2_generator_losses(gen2, dn, extractor, low, enhanced, mask, output,
                                                        triple, cfg)
            dn.requires_grad_(True)
            parts = {"d": d_loss.item(), "g_total": total.item(), **{f"g_{k}": v.item() for k, v in g_parts.items()},
                     "clip_fraction": triple.clip_fraction}
            _check_finite(parts, it, ids)
            opt_g.zero_grad(set_to_none=True)
            total.backward()
            opt_g.step()
            sink({"stage": 2, "iter": it, "epoch": epoch, "lr": s.lr, **parts})

        last_epoch = epoch == s.epochs - 1
        if s.selection != "last" and ((epoch + 1) % max(1, s.val_every) == 0 or last_epoch):
            score = validate_stage2(gen1, gen2, dn, extractor, dataset, cfg)
            if score is not None and (best is None or score > best[0]):
                best = (score, epoch, {"G_n": copy.deepcopy(gen2.state_dict()), "D_n": copy.deepcopy(dn.state_dict())},
                        copy.deepcopy({"G": opt_g.state_dict(), "D": opt_d.state_dict()}))
    if _param_digest(gen1) != frozen:
        raise RuntimeError("stage I parameters changed during stage II training")
    if best is None:
        best = (float("nan"), s.epochs - 1, {"G_n": copy.deepcopy(gen2.state_dict()),
                                             "D_n": copy.deepcopy(dn.state_dict())},
                {"G": opt_g.state_dict(), "D": opt_d.state_dict()})
    score, epoch, params, optim = best
    return Checkpoint(stage=2, params=params, optim=optim, epoch=epoch, val_score=score, config=cfg.to_dict(),
                      meta={"iterations": it, "selection": s.selection, "stage1_epoch": stage1_ckpt.epoch})


@torch.no_grad()
def validate_stage2(gen1, gen2, dn, extractor, dataset, cfg, n_batches=2):
    s = cfg.stage2
    if not dataset.select("low", "val") or not dataset.select("normal", "val"):
        return None
    rng, prng = substream(cfg.runtime.seed, "val"), substream(cfg.runtime.seed, "val-pseudo")
    bspec = BatchSpec.for_stage(2, s.batch_size, s.crop, hflip=False, rot90=False)
    gen2.eval()
    dn.eval()
    try:
        scores = []
        for _ in range(n_batches):
            try:
                low, normal = sample_batch(dataset, bspec, rng, split_name="val")
            except ValueError:
                return None
            enhanced, mask = stage2_step_inputs(gen1, low, cfg.losses.eps_s)
            output = stage2_forward(gen2, low, enhanced, mask)
            triple = build_triple(low, output, enhanced, list(normal), prng, cfg)
            total, _, generated = stage2_generator_losses(gen2, dn, extractor, low, enhanced, mask, output,
                                                          triple, cfg)
            if s.selection == "psnr":
                scores.append(np.mean([psnr(g, c) for g, c in zip(generated, triple.clean)]))
            else:
                scores.append(-float(total))
        return float(np.mean(scores))
    finally:
        gen2.train()
        dn.train()


# ---------------------------------------------------------------- inference


class Enhancer:
    """Two-stage inference with reflect padding to a multiple of 8 and exact crop-back."""

    def __init__(self, ckpt1: Checkpoint, ckpt2: Checkpoint):
        self.gen1 = load_stage1_generator(ckpt1)
        self.gen2 = load_stage2_generator(ckpt2)
        self.eps = config_from_dict(ckpt1.config).losses.eps_s

    @torch.no_grad()
    def __call__(self, image: torch.Tensor) -> dict:
        single = image.dim() == 3
        x, (h, w) = pad_to_multiple(image[None] if single else image, 8)
        enhanced = retinex_recover(x, stage1_forward(self.gen1, x, self.eps), self.eps)
        mask = illumination_mask(x, enhanced)
        clean = stage2_forward(self.gen2, x, enhanced, mask)
        out = {"enhanced": enhanced[..., :h, :w], "clean": clean[..., :h, :w]}
        return {k: v[0] for k, v in out.items()} if single else out


def enhance(image: torch.Tensor, ckpt1: Checkpoint, ckpt2: Checkpoint) -> dict:
    """Run both stages; returns ``{"enhanced": stage I result, "clean": final image}``."""
    return Enhancer(ckpt1, ckpt2)(image)

"""Acceptance criteria for the two-stage enhancer, one test per criterion.

Each test records a ``[PASS]``/``[FAIL]`` line (collected and printed in the
pytest terminal summary, or printed directly when this file is run as a
script) and then asserts at the stated tolerance.
"""
import math
import time

import numpy as np
import pytest
import torch

from delight import losses as L
from delight.checkpoint import Checkpoint
from delight.cli import main as cli_main
from delight.config import make_config
from delight.data import load_dataset, split
from delight.imaging import estimate_gamma, instance_normalize, retinex_recover
from delight.metrics import evaluate, psnr, ssim
from delight.networks import FeatureExtractor, build_network, stage2_forward
from delight.pseudo import make_pseudo_triple
from delight.synthetic import make_unpaired_fixture, scale_to_mean, smooth_scene
from delight.training import (JsonlLog, load_stage1_generator, load_stage2_generator, stage1_specs, train_stage1, train_stage2,
                              _enhance_stage1)
from fdcheck import KinkRecorder, fd_relative_error, stencil_is_smooth

RESULTS = []


def report(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} | {detail}"
    RESULTS.append(line)
    print(line)
    return ok


@pytest.fixture(scope="module")
def desk_fixture(tmp_path_factory):
    """16 dark (mean 0.15) + 16 normal (mean 0.6) 64x64 images."""
    root = tmp_path_factory.mktemp("desk")
    return make_unpaired_fixture(root, n_low=16, n_normal=16, size=64, seed=1, low_noise=0.015)


def test_01_retinex_round_trip():
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    low = torch.rand(1000, 3, 32, 32, generator=g)
    illum = 0.1 + 0.9 * torch.rand(1000, 3, 32, 32, generator=g)
    rec = retinex_recover(low, illum)
    unclipped = low / illum <= 1.0
    err = float((rec * illum - low)[unclipped].abs().max())
    dt = time.perf_counter() - t0
    ok = err <= 1e-6 and dt < 10
    report(1, "Retinex round trip", ok, f"max err {err:.2e} (<= 1e-6) over {int(unclipped.sum())} px, {dt:.2f}s")
    assert ok


def _loss_cases(fx, rec, seed):
    """name -> (loss of x, x, kink pattern of x or None when the loss is smooth everywhere)."""
    g = torch.Generator().manual_seed(100 + seed)

    def img(shape=(1, 3, 16, 16)):
        return 0.05 + 0.9 * torch.rand(*shape, generator=g, dtype=torch.float64)

    r, f = torch.randn(6, generator=g, dtype=torch.float64), torch.randn(6, generator=g, dtype=torch.float64)
    a, b, mask = img(), img(), img((1, 1, 16, 16))
    parts = 0.1 + torch.rand(4, generator=g, dtype=torch.float64)
    inb = instance_normalize(b)
    return {
        "ragan_d_loss/real": (lambda x: L.ragan_d_loss(x, f), r, None),
        "ragan_d_loss/fake": (lambda x: L.ragan_d_loss(r, x), f, None),
        "ragan_g_loss/real": (lambda x: L.ragan_g_loss(x, f), r, None),
        "ragan_g_loss/fake": (lambda x: L.ragan_g_loss(r, x), f, None),
        "lsgan_d_loss/real": (lambda x: L.lsgan_d_loss(x, f), r, None),
        "lsgan_d_loss/fake": (lambda x: L.lsgan_d_loss(r, x), f, None),
        "lsgan_g_loss": (lambda x: L.lsgan_g_loss(x), f, None),
        "color_loss/angle": (lambda x: L.color_loss(x, b), a, None),
        "color_loss/one_minus_cos": (lambda x: L.color_loss(x, b, mode="one_minus_cos"), a, None),
        "total_stage2_loss": (lambda x: L.total_stage2_loss(dict(zip(("adv", "color", "adapt", "con"), x))),
                              parts, None),
        "perceptual_loss": (lambda x: L.perceptual_loss(fx, x, b), a,
                            lambda x: rec.pattern(lambda: L.perceptual_loss(fx, x, b))),
        "adaptive_content_loss": (lambda x: L.adaptive_content_loss(fx, x, b, mask), a,
                                  lambda x: rec.pattern(lambda: L.adaptive_content_loss(fx, x, b, mask),
                                                        lambda: mask * (x - b))),
        "content_loss": (lambda x: L.content_loss(fx, b, x), a,
                         lambda x: rec.pattern(lambda: L.content_loss(fx, b, x),
                                               lambda: inb - instance_normalize(x))),
    }


def test_02_gradient_oracle():
    """Every loss at 5 seeded points, step 1e-5, double precision.

    The extractor-based losses are piecewise smooth (ReLU, max-pool, L1);
    a candidate point whose stencil crosses one of those kinks is not a
    point of differentiability along the stencil, so it is skipped (and
    listed) and the next seed is drawn.
    """
    t0 = time.perf_counter()
    fx = FeatureExtractor(kind="test", seed=0, width_divisor=8).double()
    rec = KinkRecorder(fx)
    names = list(_loss_cases(fx, rec, 0))
    worst, worst_at, skipped, n_checked = 0.0, None, [], 0
    for name in names:
        used, seed = 0, 0
        while used < 5 and seed < 20:
            fn, x, pattern = _loss_cases(fx, rec, seed)[name]
            if pattern is not None and not stencil_is_smooth(pattern, x, h=1e-5, seed=seed):
                skipped.append(f"{name}@{seed}")
            else:
                err = fd_relative_error(fn, x, h=1e-5, seed=seed)
                n_checked += 1
                used += 1
                if err > worst:
                    worst, worst_at = err, f"{name}@{seed}"
            seed += 1
    rec.close()
    dt = time.perf_counter() - t0
    ok = n_checked == 5 * len(names) and worst < 1e-4 and dt < 60
    report(2, "gradient oracle", ok,
           f"{len(names)} losses x 5 points, worst rel err {worst:.2e} ({worst_at}), "
           f"kink-crossing points skipped {skipped or 'none'}, {dt:.1f}s")
    assert ok


def test_03_ragan_analytic_values():
    d = [L.ragan_d_loss(torch.full((5,), c), torch.full((7,), c)).item() for c in (-1.0, 0.0, 0.5, 3.0)]
    gv = L.ragan_g_loss(torch.tensor([1.0]), torch.tensor([0.0])).item()
    ok = all(v == 1.0 for v in d) and gv == 5.0
    report(3, "RaGAN analytic values", ok, f"D at equality {d}, G([1],[0]) = {gv}")
    assert ok


def test_04_color_loss_invariance():
    g = torch.Generator().manual_seed(4)
    worst = 0.0
    for _ in range(100):
        img = 0.05 + 0.9 * torch.rand(1, 3, 32, 32, generator=g)
        worst = max(worst, abs(L.color_loss(0.9 * img, img).item()))
    red, green = torch.zeros(1, 3, 16, 16), torch.zeros(1, 3, 16, 16)
    red[:, 0], green[:, 1] = 1.0, 1.0
    rg = L.color_loss(red, green).item()
    ok = worst <= 1e-6 and abs(rg - math.pi / 2) <= 1e-6
    report(4, "color-loss invariance", ok, f"max |loss(0.9I, I)| {worst:.2e}, red/green {rg:.9f} vs pi/2")
    assert ok


def test_05_pseudo_triple_exactness():
    g = torch.Generator().manual_seed(5)
    clean = 0.1 + 0.8 * torch.rand(4, 3, 32, 32, generator=g)
    noise = 0.1 * (2 * torch.rand(4, 3, 32, 32, generator=g) - 1)
    t = make_pseudo_triple(clean, noise, 0.15, 0.6)
    transplant = float((t.noisy - t.clean - noise).abs().max())
    lam = estimate_gamma(0.25, 0.5)
    const = make_pseudo_triple(torch.full((1, 3, 8, 8), 0.5), torch.zeros(1, 3, 8, 8), 0.25, 0.5)
    mean_err = abs(const.low.mean().item() - 0.25)
    ok = transplant <= 1e-7 and abs(lam - 2.0) <= 1e-9 and mean_err <= 1e-6
    report(5, "pseudo-triple exactness", ok,
           f"|J_e - J_c - I_n| {transplant:.1e}, gamma(0.25,0.5) {lam!r}, constant-mean err {mean_err:.1e}")
    assert ok


def test_06_instance_normalization():
    g = torch.Generator().manual_seed(6)
    feat = 3.0 * torch.randn(4, 16, 24, 24, generator=g) + 2.0
    y = instance_normalize(feat)
    mean_err = float(y.mean(dim=(-2, -1)).abs().max())
    var_err = float((y.var(dim=(-2, -1), unbiased=False) - 1).abs().max())
    x = torch.rand(4, 16, 24, 24, generator=g)
    scale = 0.5 + 1.5 * torch.rand(4, 16, 1, 1, generator=g)
    shift = torch.rand(4, 16, 1, 1, generator=g) - 0.5
    affine = float((instance_normalize(scale * x + shift) - instance_normalize(x)).abs().max())
    ok = mean_err < 1e-6 and var_err < 1e-4 and affine <= 1e-6
    report(6, "instance-normalization statistics", ok,
           f"|mean| {mean_err:.1e}, |var-1| {var_err:.1e}, affine diff {affine:.1e} (float32)")
    assert ok


def test_07_stage1_desk_smoke(desk_fixture):
    t0 = time.perf_counter()
    ds = split(load_dataset(*desk_fixture), 0.1, 0)
    cfg = make_config("desk")
    sink = JsonlLog(wall_time=False)
    ck1 = train_stage1(ds, cfg, sink)
    gen = load_stage1_generator(ck1)
    lows = [ds.image(r) for r in ds.select("low", "val")]
    outs = [_enhance_stage1(gen, x, cfg.losses.eps_s) for x in lows]
    normal_mean = float(np.mean([ds.image(r).mean().item() for r in ds.select("normal", "train")]))
    low_mean = float(np.mean([x.mean().item() for x in lows]))
    out_mean = float(np.mean([o.mean().item() for o in outs]))
    closed = (out_mean - low_mean) / (normal_mean - low_mean)
    in_range = all(float(o.min()) >= 0 and float(o.max()) <= 1 for o in outs)
    finite = all(math.isfinite(v) for r in sink.records for v in r.values() if isinstance(v, float))
    dt = time.perf_counter() - t0
    ok = len(sink.records) == 200 and closed >= 0.5 and in_range and finite and dt < 600
    report(7, "desk Stage I smoke", ok,
           f"{len(sink.records)} iters, val brightness {low_mean:.3f} -> {out_mean:.3f} (normal {normal_mean:.3f}), "
           f"gap closed {closed:.0%} (>= 50%), in [0,1] {in_range}, finite {finite}, {dt:.0f}s")
    assert ok


def test_08_stage2_desk_smoke(tmp_path):
    t0 = time.perf_counter()
    # noise sigma 0.015 at the dark level becomes 0.06 after the 4x Stage I gain below
    low_dir, normal_dir = make_unpaired_fixture(tmp_path, n_low=16, n_normal=16, size=64, seed=1,
                                                low_noise=0.015, field=False)
    ds = split(load_dataset(low_dir, normal_dir), 0.1, 0)
    cfg = make_config("desk")
    # Stage I fixed to a uniform 4x gain (zero last-layer weights, bias logit(0.25))
    gen1 = build_network(stage1_specs(cfg)[0], 0)
    with torch.no_grad():
        gen1.decoder[-1].conv2.weight.zero_()
        gen1.decoder[-1].conv2.bias.fill_(math.log(0.25 / 0.75))
    ck1 = Checkpoint(stage=1, params={"G_e": gen1.state_dict()}, config=cfg.to_dict())
    sink = JsonlLog(wall_time=False)
    ck2 = train_stage2(ds, ck1, cfg, sink)
    gen2 = load_stage2_generator(ck2)

    rng = np.random.default_rng(2024)
    clean = torch.stack([torch.from_numpy(scale_to_mean(smooth_scene(rng, 64, 64), 0.6).transpose(2, 0, 1))
                         for _ in range(8)]).float()
    noise = torch.from_numpy(rng.normal(0.0, 0.06, clean.shape)).float()
    held_out = make_pseudo_triple(clean, noise, 0.15, 0.6)
    with torch.no_grad():
        j_g = stage2_forward(gen2, held_out.low, held_out.noisy, held_out.mask)
    p_g = float(np.mean([psnr(a, b) for a, b in zip(j_g, clean)]))
    p_e = float(np.mean([psnr(a, b) for a, b in zip(held_out.noisy, clean)]))
    total = np.array([r["g_total"] for r in sink.records])
    smooth = np.convolve(total, np.ones(50) / 50, mode="valid")      # smooth[i] covers iters i+1 .. i+50
    s50, s500 = float(smooth[0]), float(smooth[-1])
    dt = time.perf_counter() - t0
    ok = len(total) == 500 and p_g >= p_e + 1.0 and s500 < s50 and dt < 1200
    report(8, "desk Stage II smoke", ok,
           f"{len(total)} iters, PSNR(J_g) {p_g:.2f} vs PSNR(J_e) {p_e:.2f} dB (need +1.00, got {p_g - p_e:+.2f}), "
           f"smoothed loss @50 {s50:.3f} @500 {s500:.3f}, {dt:.0f}s")
    assert ok


def test_09_metrics(tmp_path):
    a = np.full((16, 16, 3), 0.4)
    p = psnr(a, a + 0.1)
    rng = np.random.default_rng(9)
    img = rng.random((32, 32, 3))
    s = ssim(img, img)
    evaluate([("x", img, img), ("y", a, a)], tmp_path / "eval.csv")
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    ok = (abs(p - 20.0) <= 1e-6 and s == 1.0 and lines[0] == "id,psnr_db,ssim"
          and lines[-1] == "mean,100.0000,1.0000" and len(lines) == 4)
    report(9, "metrics", ok, f"psnr(0.1 offset) {p!r}, ssim(a,a) {s!r}, last CSV line {lines[-1]!r}")
    assert ok


def test_10_determinism(tmp_path, desk_fixture):
    t0 = time.perf_counter()
    low, normal = desk_fixture
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / run
        common = ["--profile", "desk", "--seed", "11", "--workers", "1", "--out", str(out), "--log-every", "0"]
        data = ["--low-dir", str(low), "--normal-dir", str(normal)]
        assert cli_main(["train-stage1"] + common + data) == 0
        assert cli_main(["train-stage2"] + common + data + ["--stage1-ckpt", str(out / "stage1.ckpt")]) == 0
        assert cli_main(["enhance", "--input", str(low), "--stage1-ckpt", str(out / "stage1.ckpt"),
                         "--stage2-ckpt", str(out / "stage2.ckpt")] + common[:-2] + ["--out", str(out / "enh")]) == 0
        outputs.append({p.name: p.read_bytes() for p in sorted((out / "enh").glob("*.png"))})
    same = outputs[0].keys() == outputs[1].keys() and all(outputs[0][k] == outputs[1][k] for k in outputs[0])
    dt = time.perf_counter() - t0
    ok = same and len(outputs[0]) == 16
    report(10, "determinism", ok, f"{len(outputs[0])} enhanced PNGs, bit-identical across runs: {same}, {dt:.0f}s")
    assert ok


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-s"]))

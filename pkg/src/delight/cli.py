"""``delight`` command line: train both stages, enhance, evaluate, preview pseudo triples.

Exit codes: 0 success, 2 configuration error (bad flags, missing or corrupt
files), 3 data error (undecodable or mismatched images, partial eval
failure), 4 numeric abort (non-finite loss; a JSON snapshot is written to
``--out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config
from .data import IMAGE_SUFFIXES, load_dataset, load_image, save_png, split
from .errors import ConfigError, DataError, NumericAbort
from .imaging import DomainError, estimate_gamma
from .metrics import evaluate
from .pseudo import estimate_noise, make_pseudo_triple
from .training import Enhancer, JsonlLog, train_stage1, train_stage2

log = logging.getLogger("delight")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _shared(parser):
    g = parser.add_argument_group("shared")
    g.add_argument("--config", default=None, help="YAML config file; None falls back to $DELIGHT_CONFIG")
    g.add_argument("--out", default="runs", help="output directory")
    g.add_argument("--seed", type=int, default=None, help="root seed; None keeps runtime.seed from the config")
    g.add_argument("--profile", choices=("desk", "full"), default=None,
                   help="size profile; None uses runtime.profile from the config, else full")
    g.add_argument("--workers", type=int, default=None, help="CPU threads; None keeps runtime.workers")
    g.add_argument("--log-every", type=int, default=50, help="print a loss line every N iterations (0: never)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="delight", description=__doc__.splitlines()[0], formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True)

    t1 = sub.add_parser("train-stage1", help="train the illumination generator", formatter_class=fmt)
    _shared(t1)
    _data_flags(t1)
    t1.set_defaults(func=cmd_train_stage1)

    t2 = sub.add_parser("train-stage2", help="train the denoiser on a frozen Stage I", formatter_class=fmt)
    _shared(t2)
    _data_flags(t2)
    t2.add_argument("--stage1-ckpt", required=True, help="Stage I checkpoint file")
    t2.set_defaults(func=cmd_train_stage2)

    en = sub.add_parser("enhance", help="run both stages on an image or a directory", formatter_class=fmt)
    _shared(en)
    en.add_argument("--input", required=True, help="image file or directory of images")
    en.add_argument("--stage1-ckpt", required=True, help="Stage I checkpoint file")
    en.add_argument("--stage2-ckpt", required=True, help="Stage II checkpoint file")
    en.add_argument("--save-intermediate", action="store_true", help="also write <name>_stage1.png")
    en.set_defaults(func=cmd_enhance)

    ev = sub.add_parser("eval", help="PSNR/SSIM report for outputs against references", formatter_class=fmt)
    _shared(ev)
    ev.add_argument("--outputs", required=True, help="directory of enhanced images")
    ev.add_argument("--references", required=True, help="directory of reference images (matched by name)")
    ev.add_argument("--suffix", default="_enhanced", help="suffix stripped from output names before matching")
    ev.set_defaults(func=cmd_eval)

    pp = sub.add_parser("pseudo-preview", help="4-panel composite of one pseudo triple", formatter_class=fmt)
    _shared(pp)
    pp.add_argument("--enhanced", required=True, help="noisy enhanced image I_e")
    pp.add_argument("--denoised", required=True, help="denoised image I_c (noise estimate is I_e - I_c)")
    pp.add_argument("--clean", required=True, help="clean normal-light image J_c")
    pp.add_argument("--low", default=None, help="low-light input I_l, used for the gamma estimate")
    pp.add_argument("--gamma", type=float, default=None, help="use this gamma instead of estimating it")
    pp.set_defaults(func=cmd_pseudo_preview)
    return p


def _data_flags(parser):
    parser.add_argument("--low-dir", default=None, help="low-light training images (overrides data.low_dir)")
    parser.add_argument("--normal-dir", default=None, help="normal-light training images (overrides data.normal_dir)")


def _config(args):
    overrides = {"runtime": {}}
    if args.seed is not None:
        overrides["runtime"]["seed"] = args.seed
    if args.workers is not None:
        overrides["runtime"]["workers"] = args.workers
    data = {k: str(Path(v).resolve()) for k, v in (("low_dir", getattr(args, "low_dir", None)),
                                                     ("normal_dir", getattr(args, "normal_dir", None))) if v}
    if data:
        overrides["data"] = data
    cfg = load_config(args.config, args.profile, overrides)
    torch.set_num_threads(cfg.runtime.workers)
    return cfg


def _progress(every):
    def show(rec):
        if every and rec["iter"] % every == 0:
            losses = " ".join(f"{k}={v:.4f}" for k, v in rec.items()
                              if isinstance(v, float) and k not in ("lr", "wall"))
            log.info("stage %d iter %d epoch %d %s", rec["stage"], rec["iter"], rec["epoch"], losses)
    return show


def _dataset(cfg):
    d = cfg.data
    if not d.low_dir or not d.normal_dir:
        raise ConfigError("data.low_dir and data.normal_dir must be set (config file or --low-dir/--normal-dir)")
    ds = load_dataset(d.low_dir, d.normal_dir, d.test_low_dir or None, d.test_normal_dir or None,
                      d.resize, d.long_side)
    return split(ds, d.val_fraction, cfg.runtime.seed)


def _prepare_out(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.canonical() + "\n", encoding="utf-8")
    return out


def cmd_train_stage1(args) -> int:
    cfg = _config(args)
    ds = _dataset(cfg)
    out = _prepare_out(args, cfg)
    ds.write_manifest(out / "manifest.tsv")
    sink = JsonlLog(out / "stage1_log.jsonl", _progress(args.log_every), cfg.runtime.log_wall_time)
    ckpt = train_stage1(ds, cfg, sink)
    path = save_checkpoint(ckpt, out / "stage1.ckpt")
    log.info("wrote %s (epoch %d, val %.4f)", path, ckpt.epoch, ckpt.val_score)
    return EXIT_OK


def cmd_train_stage2(args) -> int:
    cfg = _config(args)
    ck1 = load_checkpoint(args.stage1_ckpt)
    ds = _dataset(cfg)
    out = _prepare_out(args, cfg)
    ds.write_manifest(out / "manifest.tsv")
    sink = JsonlLog(out / "stage2_log.jsonl", _progress(args.log_every), cfg.runtime.log_wall_time)
    ckpt = train_stage2(ds, ck1, cfg, sink)
    path = save_checkpoint(ckpt, out / "stage2.ckpt")
    log.info("wrote %s (epoch %d, val %.4f)", path, ckpt.epoch, ckpt.val_score)
    return EXIT_OK


def _images_in(path: Path):
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise ConfigError(f"input not found: {path}")
    files = []
    for p in sorted(path.iterdir(), key=lambda q: q.name):
        if not p.is_file():
            continue
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            log.warning("skipping non-image file %s", p)
            continue
        files.append(p)
    return files


def cmd_enhance(args) -> int:
    cfg = _config(args)
    enhancer = Enhancer(load_checkpoint(args.stage1_ckpt), load_checkpoint(args.stage2_ckpt))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = []
    for path in _images_in(Path(args.input)):
        try:
            img = load_image(path)
        except Exception as exc:  # noqa: BLE001 - report and keep going
            log.warning("cannot decode %s: %s", path, exc)
            failed.append(path)
            continue
        res = enhancer(img)
        save_png(res["clean"], out / f"{path.stem}_enhanced.png")
        if args.save_intermediate:
            save_png(res["enhanced"], out / f"{path.stem}_stage1.png")
    log.info("enhanced images written to %s (seed %d)", out, cfg.runtime.seed)
    if failed:
        raise DataError(f"{len(failed)} input image(s) could not be decoded")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    outputs, refs = Path(args.outputs), Path(args.references)
    for d in (outputs, refs):
        if not d.is_dir():
            raise ConfigError(f"directory not found: {d}")
    ref_by_stem = {p.stem: p for p in refs.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    pairs = []
    for p in sorted(outputs.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        stem = p.stem[:-len(args.suffix)] if args.suffix and p.stem.endswith(args.suffix) else p.stem
        pairs.append((stem, p, ref_by_stem.get(stem, refs / f"{stem}.missing")))
    if not pairs:
        raise ConfigError(f"no output images in {outputs}")
    out = Path(args.out)
    report = evaluate(pairs, out / cfg.eval.report_name, loader=load_image, config=cfg.to_dict())
    log.info("mean PSNR %.4f dB, mean SSIM %.4f over %d images", report.mean_psnr, report.mean_ssim,
             len(report.rows) - len(report.failed))
    if report.failed:
        raise DataError(f"{len(report.failed)} pair(s) failed: {', '.join(report.failed)}")
    return EXIT_OK


def cmd_pseudo_preview(args) -> int:
    cfg = _config(args)
    lc = cfg.losses
    try:
        enhanced, denoised, clean = (load_image(p) for p in (args.enhanced, args.denoised, args.clean))
        low = load_image(args.low) if args.low else None
    except FileNotFoundError as exc:
        raise ConfigError(f"input not found: {exc.filename}") from exc
    if not (enhanced.shape == denoised.shape == clean.shape):
        raise DataError(f"I_e, I_c and J_c must share a shape, got {[tuple(t.shape) for t in (enhanced, denoised, clean)]}")
    if args.gamma is not None:
        if args.gamma <= 0:
            raise ConfigError("--gamma must be positive")
        lam = args.gamma
    elif low is not None:
        lam = estimate_gamma(float(low.mean()), float(denoised.mean()), lc.gamma_formula,
                             (lc.gamma_min, lc.gamma_max))
    else:
        raise ConfigError("pseudo-preview needs --low (to estimate gamma) or --gamma")
    triple = make_pseudo_triple(clean[None], estimate_noise(enhanced, denoised)[None], None, None, gamma=lam)
    panels = [triple.clean[0], triple.noisy[0], triple.low[0], triple.mask[0].expand(3, -1, -1)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "pseudo_preview.png"
    save_png(torch.cat(panels, dim=-1), path)
    log.info("wrote %s (gamma %.4f, clipped %.4f)", path, lam, triple.clip_fraction)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (DataError, DomainError, ValueError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericAbort as exc:
        log.error("numeric abort: %s", exc)
        try:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "abort_snapshot.json").write_text(
                json.dumps(exc.snapshot, sort_keys=True, default=str, indent=1), encoding="utf-8")
        except OSError:
            pass
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

"""Full-reference quality metrics and the CSV evaluation report.

Metrics take HxWx3 float arrays in [0, 1] (numpy), or channel-first torch
tensors which are converted.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0
LUMA = np.array([0.299, 0.587, 0.114])

log = logging.getLogger(__name__)


def _as_hwc(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
        if x.ndim == 3 and x.shape[0] in (1, 3) and x.shape[-1] not in (1, 3):
            x = np.moveaxis(x, 0, -1)
    return np.asarray(x, dtype=np.float64)


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB over all channels; identical inputs give ``PSNR_CAP``."""
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


def ssim(a, b, win_size=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0):
    """Single-scale SSIM on BT.601 luma with a Gaussian window.

    Local statistics use a truncated Gaussian of ``win_size`` taps and
    population covariances; the mean is taken over the interior where the
    window fits entirely.
    """
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a @ LUMA, b @ LUMA
    if min(a.shape) < win_size:
        raise ValueError(f"image {a.shape} smaller than the {win_size}px SSIM window")
    truncate = ((win_size - 1) / 2) / sigma

    def filt(x):
        return ndimage.gaussian_filter(x, sigma, truncate=truncate, mode="reflect")

    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    pad = (win_size - 1) // 2
    return float(s[pad:-pad, pad:-pad].mean())


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)   # (id, psnr, ssim); failed rows carry NaNs
    mean_psnr: float = float("nan")
    mean_ssim: float = float("nan")
    failed: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def ok(self):
        return not self.failed


def evaluate(pairs, out_path=None, loader=None, config=None) -> EvalReport:
    """Score ``(id, output, reference)`` triples and optionally write the CSV report.

    ``output`` / ``reference`` may be arrays or paths; paths go through
    ``loader``. A pair that cannot be read or compared becomes a failed
    row and the run carries on.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("evaluate needs at least one pair")
    report = EvalReport(config=dict(config or {}))
    good = []
    for pid, out, ref in sorted(pairs, key=lambda p: str(p[0])):
        try:
            if loader is not None:
                out = loader(out) if isinstance(out, (str, Path)) else out
                ref = loader(ref) if isinstance(ref, (str, Path)) else ref
            row = (str(pid), psnr(out, ref), ssim(out, ref))
            good.append(row)
        except Exception as exc:  # noqa: BLE001 - one bad pair must not stop the run
            log.warning("evaluation of %s failed: %s", pid, exc)
            row = (str(pid), float("nan"), float("nan"))
            report.failed.append(str(pid))
        report.rows.append(row)
    if good:
        report.mean_psnr = float(np.mean([r[1] for r in good]))
        report.mean_ssim = float(np.mean([r[2] for r in good]))
    if out_path is not None:
        write_report(report, out_path)
    return report


def write_report(report: EvalReport, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "psnr_db", "ssim"])
        for pid, p, s in report.rows:
            w.writerow([pid, f"{p:.4f}", f"{s:.4f}"])
        w.writerow(["mean", f"{report.mean_psnr:.4f}", f"{report.mean_ssim:.4f}"])

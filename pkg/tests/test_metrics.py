import csv
import math

import numpy as np
import pytest
import torch
from skimage.metrics import structural_similarity

from delight.metrics import evaluate, psnr, ssim

LUMA = np.array([0.299, 0.587, 0.114])


def test_psnr_values():
    a = np.full((8, 8, 3), 0.5)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-6)
    assert psnr(a, a) == 100.0
    t = torch.full((3, 8, 8), 0.5)
    assert psnr(t, t + 0.1) == pytest.approx(20.0, abs=1e-5)


def test_psnr_symmetric_and_monotone(rng):
    a = rng.random((16, 16, 3))
    b = rng.random((16, 16, 3))
    assert psnr(a, b) == psnr(b, a)
    vals = [psnr(a, np.clip(a + s * np.sign(rng.standard_normal(a.shape)), -1, 2)) for s in (0.01, 0.02, 0.05)]
    assert vals[0] > vals[1] > vals[2]


def test_ssim_identity_and_constants(rng):
    a = rng.random((32, 32, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    c = np.full((16, 16, 3), 0.3)
    assert ssim(c, c) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        ssim(rng.random((8, 8, 3)), rng.random((8, 8, 3)))


def test_ssim_matches_reference_implementation(rng):
    a = rng.random((40, 48, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    ref = structural_similarity(a @ LUMA, b @ LUMA, gaussian_weights=True, sigma=1.5,
                                use_sample_covariance=False, data_range=1.0)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_binary_inverse_is_low_and_flip_invariant(rng):
    a = (rng.random((32, 32, 3)) > 0.5).astype(float)
    assert ssim(a, 1 - a) < 0.2
    b = np.clip(a * 0.8 + 0.1, 0, 1)
    assert ssim(a, b) == pytest.approx(ssim(a[:, ::-1], b[:, ::-1]), abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_evaluate_report_format(tmp_path, rng):
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    report = evaluate([("z", a, a), ("a", b, b)], tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines() == ["id,psnr_db,ssim", "a,100.0000,1.0000", "z,100.0000,1.0000", "mean,100.0000,1.0000"]
    assert report.ok


def test_evaluate_means_and_failed_rows(tmp_path, rng):
    a = np.full((16, 16, 3), 0.5)
    rows = [("p1", a, a + 0.1), ("p2", a, a + 0.01), ("bad", a, np.zeros((4, 4, 3)))]
    report = evaluate(rows, tmp_path / "r.csv")
    assert report.failed == ["bad"]
    assert report.mean_psnr == pytest.approx((20.0 + 40.0) / 2, abs=1e-6)
    lines = list(csv.reader(open(tmp_path / "r.csv")))
    assert len(lines) == 1 + 3 + 1
    assert lines[1][0] == "bad" and lines[1][1] == "nan"
    with pytest.raises(ValueError):
        evaluate([])

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from delight.errors import ConfigError
from delight.pseudo import estimate_noise, make_pseudo_triple, match_clean


def test_noise_transplant_is_exact_inside_the_unit_range():
    g = torch.Generator().manual_seed(0)
    clean = 0.2 + 0.6 * torch.rand(2, 3, 16, 16, generator=g)
    noise = 0.1 * (2 * torch.rand(2, 3, 16, 16, generator=g) - 1)
    t = make_pseudo_triple(clean, noise, 0.15, 0.6)
    assert (t.noisy - t.clean - noise).abs().max() <= 1e-7
    assert t.clip_fraction == 0.0


def test_clipping_is_counted():
    clean = torch.full((1, 3, 2, 2), 0.95)
    t = make_pseudo_triple(clean, torch.full_like(clean, 0.1), 0.2, 0.5)
    assert t.clip_fraction == 1.0
    assert torch.all(t.noisy == 1.0)


def test_gamma_and_constant_image_mean():
    clean = torch.full((1, 3, 8, 8), 0.5)
    t = make_pseudo_triple(clean, torch.zeros_like(clean), 0.25, 0.5)
    assert float(t.gamma) == pytest.approx(2.0, abs=1e-6)
    assert t.low.mean().item() == pytest.approx(0.25, abs=1e-6)


def test_per_sample_means():
    clean = torch.full((2, 3, 4, 4), 0.5)
    t = make_pseudo_triple(clean, torch.zeros_like(clean), torch.tensor([0.25, 0.125]), torch.tensor([0.5, 0.5]))
    assert torch.allclose(t.gamma.double(), torch.tensor([2.0, 3.0], dtype=torch.float64), atol=1e-6)
    assert torch.allclose(t.low[:, 0, 0, 0], torch.tensor([0.25, 0.125]), atol=1e-6)


def test_explicit_gamma_overrides_means():
    clean = torch.full((1, 3, 4, 4), 0.5)
    t = make_pseudo_triple(clean, torch.zeros_like(clean), None, None, gamma=3.0)
    assert torch.allclose(t.low, torch.full_like(clean, 0.125))


def test_identity_gamma_gives_empty_mask():
    clean = torch.rand(1, 3, 8, 8)
    t = make_pseudo_triple(clean, torch.zeros_like(clean), 0.5, 0.5)
    assert float(t.gamma) == 1.0
    assert torch.count_nonzero(t.mask) == 0


@settings(max_examples=40, deadline=None)
@given(st.floats(0.02, 0.5), st.floats(0.3, 0.9), st.integers(0, 2 ** 31 - 1))
def test_brightness_ordering_and_mask_range(ml, me, seed):
    g = torch.Generator().manual_seed(seed)
    clean = torch.rand(1, 3, 8, 8, generator=g)
    noise = 0.05 * torch.randn(1, 3, 8, 8, generator=g)
    t = make_pseudo_triple(clean, noise, ml, me)
    assert t.low.mean() <= t.noisy.mean() + 1e-7
    assert float(t.mask.min()) >= 0.0 and float(t.mask.max()) <= 1.0


def test_pure_function():
    g = torch.Generator().manual_seed(3)
    clean, noise = torch.rand(1, 3, 8, 8, generator=g), 0.05 * torch.randn(1, 3, 8, 8, generator=g)
    a, b = make_pseudo_triple(clean, noise, 0.1, 0.6), make_pseudo_triple(clean, noise, 0.1, 0.6)
    assert all(torch.equal(getattr(a, k), getattr(b, k)) for k in ("low", "noisy", "clean", "mask"))


def test_estimate_noise_and_shape_checks():
    e, d = torch.rand(3, 4, 4), torch.rand(3, 4, 4)
    assert torch.equal(estimate_noise(e, d), e - d)
    with pytest.raises(ValueError):
        estimate_noise(e, d[..., :3])
    with pytest.raises(ValueError):
        make_pseudo_triple(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 5), 0.2, 0.5)


def test_match_clean():
    rng = np.random.default_rng(0)
    pool = ["a", "b", "c"]
    draws = [match_clean(rng, pool) for _ in range(300)]
    assert set(draws) == set(pool)
    assert draws == [match_clean(r, pool) for r in [np.random.default_rng(0)] for _ in range(300)]
    with pytest.raises(ConfigError):
        match_clean(rng, [])

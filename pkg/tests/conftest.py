import numpy as np
import pytest
import torch

from delight.networks import FeatureExtractor
from delight.synthetic import make_unpaired_fixture


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def extractor():
    """Narrow seeded VGG trunk, shared by the loss tests."""
    return FeatureExtractor(kind="test", seed=0, width_divisor=8)


@pytest.fixture(scope="session")
def extractor64():
    return FeatureExtractor(kind="test", seed=0, width_divisor=8).double()


@pytest.fixture(scope="session")
def tiny_fixture(tmp_path_factory):
    """8 dark + 8 normal 64x64 images on disk; returns (low_dir, normal_dir)."""
    root = tmp_path_factory.mktemp("fixture")
    return make_unpaired_fixture(root, n_low=8, n_normal=8, size=64, seed=3)


def rand_image(gen, *shape, lo=0.0, hi=1.0, dtype=torch.float32):
    return (lo + (hi - lo) * torch.rand(*shape, generator=gen, dtype=torch.float64)).to(dtype)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)

from pathlib import Path

import pytest
import torch

from purifycert import config
from purifycert.distributions import MixtureDistribution, PrototypeDistribution, load_distribution
from purifycert.schedule import build_linear_schedule

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def make_prototypes(positions, masses, labels, kernel_scale=1.0):
    """Builds a PrototypeDistribution from plain lists."""
    return PrototypeDistribution(
        positions=torch.tensor(positions, dtype=config.dtype),
        masses=torch.tensor(masses, dtype=config.dtype),
        labels=torch.tensor(labels, dtype=torch.long),
        kernel_scale=kernel_scale,
    )


def make_mixture(weights, means, variances, labels):
    """Builds a MixtureDistribution; scalar variances are broadcast per axis."""
    means_t = torch.tensor(means, dtype=config.dtype)
    variances_t = torch.tensor(variances, dtype=config.dtype)
    if variances_t.ndim == 1:
        variances_t = variances_t[:, None].expand_as(means_t).clone()
    return MixtureDistribution(
        weights=torch.tensor(weights, dtype=config.dtype),
        means=means_t,
        variances=variances_t,
        labels=torch.tensor(labels, dtype=torch.long),
    )


@pytest.fixture
def demo_prototypes():
    """Four prototypes on the unit circle, two per label."""
    return load_distribution(CONFIG_DIR / "prototypes_demo.json")


@pytest.fixture
def two_prototypes():
    return make_prototypes([[0.0, 0.0], [2.0, 0.0]], [0.5, 0.5], [0, 1])


@pytest.fixture
def single_prototype():
    return make_prototypes([[0.7, -0.4]], [1.0], [0])


@pytest.fixture
def demo_mixture():
    """Three components, two carrying label 1."""
    return load_distribution(CONFIG_DIR / "mixture_demo.json")


@pytest.fixture
def linear_schedule():
    return build_linear_schedule(1000, 1e-4, 0.02)


@pytest.fixture
def generator():
    g = torch.Generator()
    g.manual_seed(0)
    return g


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical checks")


def pytest_addoption(parser):
    parser.addoption(
        "--update-golden",
        action="store_true",
        default=False,
        help="rewrite the recorded CLI outputs under tests/experiment/golden",
    )


@pytest.fixture
def update_golden(request):
    return request.config.getoption("--update-golden")

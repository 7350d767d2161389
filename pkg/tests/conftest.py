"""Shared fixtures for the channel estimation test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from cgan import GanTrainConfig  # noqa: E402
from channel_sim import DatasetSpec  # noqa: E402
from config_manager import ExperimentConfig, SplitConfig  # noqa: E402
from lstm import LstmTrainConfig  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run desk-scale training tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_gradient(fn, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar fn() with respect to x, perturbed in place"""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + eps
        plus = fn()
        x[idx] = original - eps
        minus = fn()
        x[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def gradcheck():
    """
    gradcheck(build, tensors): `build()` returns a scalar Tensor computed from
    `tensors`; returns the worst relative error over all of them.
    """
    def check(build, tensors, eps: float = 1e-3) -> float:
        for t in tensors:
            t.grad = None
        build().backward()
        worst = 0.0
        for t in tensors:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.values)
            numeric = numeric_gradient(lambda: float(build().values), t.values, eps)
            worst = max(worst, relative_error(analytic, numeric))
        return worst
    return check


@pytest.fixture
def small_config(tmp_path):
    """Two tiny datasets on a short band; the networks are injected by the tests"""
    return ExperimentConfig(
        name="tiny",
        datasets=[DatasetSpec(num_samples=6, num_paths=3, num_subcarriers=240, rng_seed=1),
                  DatasetSpec(num_samples=6, num_paths=5, num_subcarriers=240, rng_seed=2)],
        cgan=GanTrainConfig(epochs=1, batch_size=2),
        lstm=LstmTrainConfig(epochs=1, batch_size=8),
        split=SplitConfig(test_size=4, gan_train_size=4, seed=3, val_size=2),
        output_dir=str(tmp_path / "run"),
    )

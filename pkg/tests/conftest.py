"""Shared pytest configuration and fixtures."""

import numpy as np
import pytest

from nfcl_forecast.nfcl import ModelDims


def write_series_csv(path, n_steps=120, n_series=3, seed=0, date=True):
    """Sine waves plus noise, one column per variable, optional hourly date column."""
    rng = np.random.default_rng(seed)
    steps = np.arange(n_steps)
    columns = [
        np.sin(2 * np.pi * steps / (12 + 5 * k)) + 0.1 * rng.normal(size=n_steps) + k
        for k in range(n_series)
    ]
    header = [f"v{k}" for k in range(n_series)]
    lines = []
    if date:
        header = ["date", *header]
    lines.append(",".join(header))
    for i in range(n_steps):
        row = [repr(float(c[i])) for c in columns]
        if date:
            hour = i % 24
            row = [f"2020-01-{1 + i // 24:02d} {hour:02d}:00:00", *row]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def series_csv(tmp_path):
    return write_series_csv(tmp_path / "toy.csv")


@pytest.fixture
def small_dims():
    return ModelDims(n_series=2, lookback=5, horizon=3)


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


def pytest_addoption(parser):
    parser.addoption(
        "--run-integration",
        action="store_true",
        default=False,
        help="Run integration tests (end-to-end training, full verification battery)",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-integration"):
        return
    skip_integration = pytest.mark.skip(reason="needs --run-integration option")
    for item in items:
        if "integration" in item.keywords:
            item.add_marker(skip_integration)

"""MAE, MSE, SMAPE and R^2 over (B, K, T) forecasts in scaled space."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from nfcl_forecast.datapipe import WindowBatch
from nfcl_forecast.optim import Trainable, predict

logger = logging.getLogger(__name__)


class MetricError(Exception):
    """Raised for mismatched or empty metric inputs."""


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    smape: float
    r2: float
    n_samples: int
    n_series: int
    horizon: int
    split: str = "test"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(self)])


def _check(Y: np.ndarray, Y_hat: np.ndarray) -> None:
    if Y.shape != Y_hat.shape:
        raise MetricError(f"shape mismatch: {Y.shape} vs {Y_hat.shape}")
    if Y.size == 0:
        raise MetricError("metrics need at least one element")


def mae(Y: np.ndarray, Y_hat: np.ndarray) -> float:
    _check(Y, Y_hat)
    return float(np.mean(np.abs(Y - Y_hat)))


def mse(Y: np.ndarray, Y_hat: np.ndarray) -> float:
    _check(Y, Y_hat)
    return float(np.mean((Y - Y_hat) ** 2))


def smape(Y: np.ndarray, Y_hat: np.ndarray) -> float:
    """100 * mean |y - y_hat| / (|y| + |y_hat|); 0/0 terms count as 0."""
    _check(Y, Y_hat)
    denom = np.abs(Y) + np.abs(Y_hat)
    ratio = np.divide(np.abs(Y - Y_hat), denom, out=np.zeros_like(denom, dtype=float),
                      where=denom > 0)
    return float(100.0 * np.mean(ratio))


def r2(Y: np.ndarray, Y_hat: np.ndarray) -> float:
    """1 - SS_res / SS_tot with a per-variable mean over all samples and steps.

    Returns NaN (and logs a warning) when Y has no variance.
    """
    _check(Y, Y_hat)
    if Y.ndim == 3:
        y_bar = Y.mean(axis=(0, 2), keepdims=True)
    else:
        y_bar = Y.mean()
    ss_res = float(np.sum((Y - Y_hat) ** 2))
    ss_tot = float(np.sum((Y - y_bar) ** 2))
    if ss_tot == 0.0:
        logger.warning("R^2 is undefined: targets have zero total variance")
        return math.nan
    return 1.0 - ss_res / ss_tot


def report(Y: np.ndarray, Y_hat: np.ndarray, split: str = "test") -> MetricsReport:
    _check(Y, Y_hat)
    if Y.ndim != 3:
        raise MetricError(f"expected (B, K, T) arrays, got {Y.shape}")
    return MetricsReport(
        mae=mae(Y, Y_hat),
        mse=mse(Y, Y_hat),
        smape=smape(Y, Y_hat),
        r2=r2(Y, Y_hat),
        n_samples=int(Y.shape[0]),
        n_series=int(Y.shape[1]),
        horizon=int(Y.shape[2]),
        split=split,
    )


def evaluate(model: Trainable, batch: WindowBatch, split: str = "test",
             threads: int = 1) -> MetricsReport:
    """Forecast every window of `batch` and score it."""
    return report(batch.Y, predict(model, batch.X, threads), split)


def format_table(reports: list[MetricsReport]) -> str:
    header = f"  {'split':<6} {'MAE':>10} {'MSE':>10} {'SMAPE':>10} {'R2':>10} {'samples':>8}"
    lines = [header]
    for r in reports:
        lines.append(
            f"  {r.split:<6} {r.mae:>10.4f} {r.mse:>10.4f} {r.smape:>10.3f} {r.r2:>10.4f} "
            f"{r.n_samples:>8d}"
        )
    return "\n".join(lines)

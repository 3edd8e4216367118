"""Channel-shared linear baselines: NLinear and DLinear.

Both apply one L x T linear map to every variable, so their size does not
depend on K. They expose the same training surface as the NFCL models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from nfcl_forecast import seeding
from nfcl_forecast.nfcl import DivergenceError, GradientSet, ModelDims, ModelError

MOVING_AVG = 25


def _check(X: np.ndarray, dims: ModelDims) -> None:
    if X.ndim != 3 or X.shape[1:] != (dims.n_series, dims.lookback):
        raise ModelError(
            f"expected windows of shape (B, {dims.n_series}, {dims.lookback}), got {X.shape}"
        )


def _linear(X: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return X @ w + b


def _init_linear(rng: np.random.Generator, dims: ModelDims) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / math.sqrt(dims.lookback)
    return rng.uniform(-bound, bound, (dims.lookback, dims.horizon)), np.zeros(dims.horizon)


def _mse(Y_hat: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    if Y.shape != Y_hat.shape:
        raise ModelError(f"expected targets of shape {Y_hat.shape}, got {Y.shape}")
    residual = Y_hat - Y
    loss = float(np.mean(residual**2))
    if not math.isfinite(loss):
        raise DivergenceError(f"loss is not finite ({loss})")
    return loss, (2.0 / residual.size) * residual


def _linear_grads(X: np.ndarray, dY: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return np.einsum("bkl,bkt->lt", X, dY), dY.sum(axis=(0, 1))


def moving_average(X: np.ndarray, kernel: int = MOVING_AVG) -> np.ndarray:
    """Stride-1 moving average with replicate padding on both ends, length preserved."""
    front = (kernel - 1) // 2
    back = kernel - 1 - front
    padded = np.concatenate(
        [
            np.repeat(X[..., :1], front, axis=-1),
            X,
            np.repeat(X[..., -1:], back, axis=-1),
        ],
        axis=-1,
    )
    return np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=-1).mean(axis=-1)


@dataclass(eq=False)
class NLinearModel:
    """Subtract the last look-back value, apply the shared linear map, add it back."""

    dims: ModelDims
    params: dict[str, np.ndarray]
    seed: int = 0

    variant = "nlinear"

    def predict(self, X: np.ndarray) -> np.ndarray:
        return nlinear_forward(X, self)

    def loss_and_grads(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, GradientSet]:
        _check(X, self.dims)
        last = X[:, :, -1:]
        shifted = X - last
        loss, dY = _mse(_linear(shifted, self.params["linear.w"], self.params["linear.b"])
                        + last, Y)
        dw, db = _linear_grads(shifted, dY)
        return loss, {"linear.w": dw, "linear.b": db}

    def constrain(self) -> None:
        pass

    def with_params(self, params: dict[str, np.ndarray]) -> NLinearModel:
        return replace(self, params=params)


@dataclass(eq=False)
class DLinearModel:
    """Split the window into moving-average trend and remainder, one linear map each."""

    dims: ModelDims
    params: dict[str, np.ndarray]
    seed: int = 0
    moving_avg: int = MOVING_AVG

    variant = "dlinear"

    def predict(self, X: np.ndarray) -> np.ndarray:
        return dlinear_forward(X, self)

    def loss_and_grads(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, GradientSet]:
        _check(X, self.dims)
        trend = moving_average(X, self.moving_avg)
        seasonal = X - trend
        p = self.params
        Y_hat = (_linear(trend, p["trend.w"], p["trend.b"])
                 + _linear(seasonal, p["seasonal.w"], p["seasonal.b"]))
        loss, dY = _mse(Y_hat, Y)
        grads: GradientSet = {}
        grads["trend.w"], grads["trend.b"] = _linear_grads(trend, dY)
        grads["seasonal.w"], grads["seasonal.b"] = _linear_grads(seasonal, dY)
        return loss, grads

    def constrain(self) -> None:
        pass

    def with_params(self, params: dict[str, np.ndarray]) -> DLinearModel:
        return replace(self, params=params)


def init_nlinear(dims: ModelDims, seed: int = 0) -> NLinearModel:
    w, b = _init_linear(seeding.stream(seed, seeding.INIT), dims)
    return NLinearModel(dims=dims, params={"linear.w": w, "linear.b": b}, seed=seed)


def init_dlinear(dims: ModelDims, seed: int = 0, moving_avg: int = MOVING_AVG) -> DLinearModel:
    if moving_avg < 1:
        raise ModelError(f"moving average kernel must be >= 1, got {moving_avg}")
    rng = seeding.stream(seed, seeding.INIT)
    trend_w, trend_b = _init_linear(rng, dims)
    seasonal_w, seasonal_b = _init_linear(rng, dims)
    params = {
        "trend.w": trend_w,
        "trend.b": trend_b,
        "seasonal.w": seasonal_w,
        "seasonal.b": seasonal_b,
    }
    return DLinearModel(dims=dims, params=params, seed=seed, moving_avg=moving_avg)


def nlinear_forward(X: np.ndarray, model: NLinearModel) -> np.ndarray:
    _check(X, model.dims)
    last = X[:, :, -1:]
    return _linear(X - last, model.params["linear.w"], model.params["linear.b"]) + last


def dlinear_forward(X: np.ndarray, model: DLinearModel) -> np.ndarray:
    _check(X, model.dims)
    trend = moving_average(X, model.moving_avg)
    p = model.params
    return (_linear(trend, p["trend.w"], p["trend.b"])
            + _linear(X - trend, p["seasonal.w"], p["seasonal.b"]))

"""AdamW and the early-stopping training loop."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Iterator
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Self

import numpy as np
import pandas as pd

from nfcl_forecast import seeding
from nfcl_forecast.datapipe import WindowBatch
from nfcl_forecast.nfcl import DivergenceError, GradientSet

logger = logging.getLogger(__name__)

EVAL_CHUNK = 4096


class TrainingError(Exception):
    """Raised when training cannot continue; carries the report so far."""

    def __init__(self, message: str, report: TrainReport | None = None) -> None:
        super().__init__(message)
        self.report = report


class Trainable(Protocol):
    params: dict[str, np.ndarray]

    def predict(self, X: np.ndarray) -> np.ndarray: ...

    def loss_and_grads(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, GradientSet]: ...

    def constrain(self) -> None: ...

    def with_params(self, params: dict[str, np.ndarray]) -> Self: ...


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    patience: int = 100
    max_epochs: int = 1000
    seed: int = 0
    shuffle: bool = True
    deterministic: bool = True
    threads: int = 1

    def __post_init__(self) -> None:
        if not self.lr > 0:
            raise TrainingError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise TrainingError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainingError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise TrainingError("batch_size, patience and max_epochs must be >= 1")
        if self.threads < 1:
            raise TrainingError(f"threads must be >= 1, got {self.threads}")


@dataclass(eq=False)
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: dict[str, np.ndarray]) -> AdamWState:
        return cls(
            m={name: np.zeros_like(p) for name, p in params.items()},
            v={name: np.zeros_like(p) for name, p in params.items()},
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    diverged: bool = False
    wall_time: float = field(default=0.0, compare=False)

    @property
    def best_val_mse(self) -> float:
        return min((r.val_mse for r in self.epochs), default=math.inf)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(r.epoch, r.train_mse, r.val_mse) for r in self.epochs],
            columns=["epoch", "train_mse", "val_mse"],
        )

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


def decays(name: str) -> bool:
    """Weight decay applies to weight matrices only, not to biases, alpha or beta."""
    return name.rsplit(".", 1)[-1] in ("w", "weight")


def adamw_step(
    params: dict[str, np.ndarray],
    grads: GradientSet,
    state: AdamWState,
    cfg: TrainConfig,
    decay: Callable[[str], bool] = decays,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One decoupled-weight-decay Adam update, applied to `params` in place.

    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * lambda * theta
    """
    for name, grad in grads.items():
        if name not in params or grad.shape != params[name].shape:
            raise TrainingError(f"gradient {name!r} does not match the parameter set")
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for {name!r}")

    state.step += 1
    correction1 = 1.0 - cfg.beta1**state.step
    correction2 = 1.0 - cfg.beta2**state.step
    for name, grad in grads.items():
        theta = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * grad
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * grad**2
        update = cfg.lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.eps)
        if decay(name) and cfg.weight_decay:
            update = update + cfg.lr * cfg.weight_decay * theta
        theta -= update
    return params, state


def iter_batches(
    n_samples: int, batch_size: int, rng: np.random.Generator | None = None
) -> Iterator[np.ndarray]:
    """Mini-batch row indices; the last short batch is kept."""
    order = rng.permutation(n_samples) if rng is not None else np.arange(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start : start + batch_size]


def predict(model: Trainable, X: np.ndarray, threads: int = 1) -> np.ndarray:
    """Forecast in fixed-size chunks, optionally on a thread pool; order is preserved."""
    chunks = [X[i : i + EVAL_CHUNK] for i in range(0, len(X), EVAL_CHUNK)]
    if threads <= 1 or len(chunks) <= 1:
        return np.concatenate([model.predict(c) for c in chunks])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return np.concatenate(list(pool.map(model.predict, chunks)))


def evaluate_mse(model: Trainable, batch: WindowBatch, threads: int = 1) -> float:
    return float(np.mean((predict(model, batch.X, threads) - batch.Y) ** 2))


def _batch_gradients(
    model: Trainable, X: np.ndarray, Y: np.ndarray, cfg: TrainConfig
) -> tuple[float, GradientSet]:
    if cfg.threads <= 1 or len(X) < 2:
        return model.loss_and_grads(X, Y)

    chunks = [c for c in np.array_split(np.arange(len(X)), cfg.threads) if len(c)]
    with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        futures = {pool.submit(model.loss_and_grads, X[c], Y[c]): len(c) for c in chunks}
        ordered = list(futures) if cfg.deterministic else list(as_completed(futures))
        loss = 0.0
        grads: GradientSet = {}
        for future in ordered:
            weight = futures[future] / len(X)
            chunk_loss, chunk_grads = future.result()
            loss += weight * chunk_loss
            for name, g in chunk_grads.items():
                grads[name] = grads[name] + weight * g if name in grads else weight * g
    return loss, grads


def _snapshot(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: p.copy() for name, p in params.items()}


def train[M: Trainable](
    model: M, train_batch: WindowBatch, val_batch: WindowBatch, cfg: TrainConfig
) -> tuple[M, TrainReport]:
    """Mini-batch AdamW with early stopping on validation MSE.

    Training stops after `patience` epochs without a strict improvement, or
    at `max_epochs`, and returns a copy of the model with the best-epoch
    parameters.
    """
    if not len(train_batch) or not len(val_batch):
        raise TrainingError("training needs non-empty train and validation windows")

    rng = seeding.stream(cfg.seed, seeding.SHUFFLE) if cfg.shuffle else None
    work = model.with_params(_snapshot(model.params))
    state = AdamWState.zeros(work.params)
    report = TrainReport()
    best_params = _snapshot(work.params)
    best_val = math.inf
    waited = 0
    started = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        total = 0.0
        for rows in iter_batches(len(train_batch), cfg.batch_size, rng):
            try:
                loss, grads = _batch_gradients(work, train_batch.X[rows], train_batch.Y[rows], cfg)
                adamw_step(work.params, grads, state, cfg)
            except (DivergenceError, TrainingError) as exc:
                report.diverged = True
                report.stopped_epoch = epoch
                report.wall_time = time.perf_counter() - started
                raise TrainingError(f"epoch {epoch}: training diverged: {exc}", report) from exc
            work.constrain()
            total += loss * len(rows)

        train_mse = total / len(train_batch)
        val_mse = evaluate_mse(work, val_batch, cfg.threads)
        report.epochs.append(EpochRecord(epoch=epoch, train_mse=train_mse, val_mse=val_mse))
        logger.info("epoch %d: train_mse=%.6g val_mse=%.6g", epoch, train_mse, val_mse)
        if not math.isfinite(val_mse):
            report.diverged = True
            report.stopped_epoch = epoch
            report.wall_time = time.perf_counter() - started
            raise TrainingError(f"epoch {epoch}: validation loss is not finite", report)

        if val_mse < best_val:
            best_val = val_mse
            best_params = _snapshot(work.params)
            report.best_epoch = epoch
            waited = 0
        else:
            waited += 1
            if waited >= cfg.patience:
                logger.info("no improvement for %d epoch(s), stopping", cfg.patience)
                break

    report.stopped_epoch = epoch
    report.wall_time = time.perf_counter() - started
    logger.info(
        "best epoch %d (val_mse=%.6g) of %d", report.best_epoch, best_val, report.stopped_epoch
    )
    return model.with_params(best_params), report

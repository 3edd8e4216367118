"""Run the train / evaluate / predict / explain / inspect / verify pipelines.

Every step runs inside a named stage; any module error escaping it is
re-raised as a StageError whose message starts with the stage name.
"""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Iterator
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from nfcl_forecast import verify
from nfcl_forecast.baselines import DLinearModel, init_dlinear, init_nlinear
from nfcl_forecast.checkpoint import Forecaster, load_checkpoint, save_checkpoint
from nfcl_forecast.config import ConfigError, RunConfig, save_config
from nfcl_forecast.datapipe import (
    DataError,
    PreparedData,
    inverse_scale_values,
    load_csv,
    prepare,
)
from nfcl_forecast.interpret import (
    InterpretError,
    contribution,
    export_map,
    faithfulness_gap,
    full_map,
    map_filename,
)
from nfcl_forecast.metrics import MetricError, MetricsReport, evaluate, format_table
from nfcl_forecast.nfcl import ModelDims, ModelError, NfclModel, init_model, parameter_count
from nfcl_forecast.optim import TrainingError, TrainReport, predict, train

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
FAITHFULNESS_TOL = 1e-9

_MODULE_ERRORS = (
    ConfigError, DataError, ModelError, TrainingError, MetricError, InterpretError, OSError,
)


class StageError(Exception):
    """A module error tagged with the pipeline stage it came from."""

    def __init__(self, stage: str, message: str) -> None:
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    try:
        yield
    except StageError:
        raise
    except _MODULE_ERRORS as exc:
        raise StageError(name, str(exc)) from exc


@dataclass(frozen=True)
class RunLayout:
    """Where a run writes its files, all below `root`."""

    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.toml"

    @property
    def maps(self) -> Path:
        return self.root / "maps"

    def checkpoint(self, seed: int) -> Path:
        return self.root / "checkpoints" / f"seed-{seed}.json"

    def train_report(self, seed: int) -> Path:
        return self.root / "reports" / f"train-seed-{seed}.csv"

    def metrics(self, name: str) -> Path:
        return self.root / "reports" / f"metrics-{name}.csv"

    def predictions(self, name: str) -> Path:
        return self.root / "predictions" / f"{name}.csv"


@dataclass(frozen=True)
class SeedResult:
    seed: int
    checkpoint: Path
    report: TrainReport


def build_model(cfg: RunConfig, dims: ModelDims, seed: int) -> Forecaster:
    if cfg.model == "nlinear":
        return init_nlinear(dims, seed)
    if cfg.model == "dlinear":
        return init_dlinear(dims, seed, cfg.moving_avg)
    return init_model(
        cfg.model, dims, hidden=cfg.hidden, kernels=cfg.kernels, seed=seed,
        padding=cfg.padding, slope=cfg.slope,
    )


def _require_data(cfg: RunConfig) -> str:
    if not cfg.data:
        raise StageError("config", "no data file given (--data or 'data' in the config)")
    return cfg.data


def load_prepared(cfg: RunConfig) -> PreparedData:
    path = _require_data(cfg)
    with stage("load"):
        ds = load_csv(path, cfg.date_col)
    with stage("window"):
        return prepare(ds, cfg.split_spec(), cfg.lookback, cfg.horizon)


def _load_model(path: Path) -> Forecaster:
    with stage("checkpoint"):
        return load_checkpoint(path)


def _check_dims(model: Forecaster, cfg: RunConfig, data: PreparedData) -> None:
    dims = model.dims
    expected = (data.scale.n_series, cfg.lookback, cfg.horizon)
    if (dims.n_series, dims.lookback, dims.horizon) != expected:
        raise StageError(
            "checkpoint",
            f"dimension mismatch: checkpoint has K={dims.n_series}, L={dims.lookback}, "
            f"T={dims.horizon} but data/config give K={expected[0]}, L={expected[1]}, "
            f"T={expected[2]}",
        )


def cmd_train(cfg: RunConfig) -> list[SeedResult]:
    """Train one model per seed; write checkpoints, epoch reports and the config copy."""
    data = load_prepared(cfg)
    layout = RunLayout(Path(cfg.output_dir))
    with stage("config"):
        save_config(cfg, layout.config)
    dims = ModelDims(data.scale.n_series, cfg.lookback, cfg.horizon)

    results = []
    for seed in cfg.seeds:
        with stage("train"):
            model = build_model(cfg, dims, seed)
            logger.info("seed %d: %s with %d parameters", seed, cfg.model, parameter_count(model))
            try:
                best, report = train(
                    model, data.windows["train"], data.windows["val"], cfg.train_config(seed)
                )
            except TrainingError as exc:
                if exc.report is not None:
                    exc.report.write_csv(layout.train_report(seed))
                raise StageError("train", f"seed {seed}: {exc}") from exc
        with stage("checkpoint"):
            path = save_checkpoint(best, layout.checkpoint(seed))
            report.write_csv(layout.train_report(seed))
        print(
            f"seed {seed}: val_mse={report.best_val_mse:.6f} "
            f"(best epoch {report.best_epoch} of {report.stopped_epoch})"
        )
        results.append(SeedResult(seed=seed, checkpoint=path, report=report))

    scores = np.array([r.report.best_val_mse for r in results])
    print(f"val_mse over {len(scores)} seed(s): {scores.mean():.6f} +/- {scores.std():.6f}")
    return results


def cmd_evaluate(
    cfg: RunConfig, checkpoint: Path, split: str = "test", output: Path | None = None
) -> list[MetricsReport]:
    """Score a checkpoint on one split (or all three) in scaled space."""
    model = _load_model(checkpoint)
    data = load_prepared(cfg)
    _check_dims(model, cfg, data)
    splits = SPLITS if split == "all" else (split,)
    with stage("evaluate"):
        reports = [evaluate(model, data.windows[s], s, cfg.threads) for s in splits]
        path = output or RunLayout(Path(cfg.output_dir)).metrics(checkpoint.stem)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.concat([r.to_frame() for r in reports], ignore_index=True).to_csv(path, index=False)
    print(format_table(reports))
    return reports


def cmd_predict(
    cfg: RunConfig,
    checkpoint: Path,
    split: str = "test",
    raw: bool = False,
    output: Path | None = None,
) -> Path:
    """Write one row per (window, series, step) with the truth and the forecast."""
    model = _load_model(checkpoint)
    data = load_prepared(cfg)
    _check_dims(model, cfg, data)
    batch = data.windows[split]
    with stage("predict"):
        Y, Y_hat = batch.Y, predict(model, batch.X, cfg.threads)
        if raw:
            Y = inverse_scale_values(Y, data.scale, axis=1)
            Y_hat = inverse_scale_values(Y_hat, data.scale, axis=1)
        n, k, t = Y.shape
        names = np.array(data.test.names)
        frame = pd.DataFrame({
            "sample": np.repeat(batch.indices, k * t),
            "series": np.tile(np.repeat(names, t), n),
            "step": np.tile(np.arange(t), n * k),
            "y_true": Y.ravel(),
            "y_pred": Y_hat.ravel(),
        })
        path = output or RunLayout(Path(cfg.output_dir)).predictions(f"{checkpoint.stem}-{split}")
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
    print(f"wrote {len(frame)} predictions to {path}")
    return path


def cmd_explain(
    cfg: RunConfig,
    checkpoint: Path,
    sample: int = 0,
    k: int | None = None,
    t: int | None = None,
    fmt: str = "csv",
    space: str = "normalized",
    check: bool = False,
    shared_scale: bool = False,
) -> list[Path]:
    """Export contribution maps of one test window plus its full-map CSV.

    Without `k`/`t` every target of that axis is exported. With `check` each
    map is re-summed against the model's prediction and a gap above 1e-9 is
    an error.
    """
    model = _load_model(checkpoint)
    data = load_prepared(cfg)
    _check_dims(model, cfg, data)
    if not isinstance(model, NfclModel):
        raise StageError("explain", f"contribution maps need an NFCL model, got {model.variant}")
    X = data.windows["test"].X
    if not 0 <= sample < len(X):
        raise StageError("explain", f"sample {sample} out of range for {len(X)} test windows")
    x = X[sample]
    dims = model.dims
    targets = [
        (kk, tt)
        for kk in ([k] if k is not None else range(dims.n_series))
        for tt in ([t] if t is not None else range(dims.horizon))
    ]
    dataset = Path(cfg.data).stem
    maps_dir = RunLayout(Path(cfg.output_dir)).maps

    paths = []
    with stage("explain"):
        maps = [contribution(model, x, kk, tt, space) for kk, tt in targets]
        if check:
            for cmap in maps:
                gap = faithfulness_gap(model, x, cmap)
                if gap > FAITHFULNESS_TOL:
                    raise InterpretError(
                        f"faithfulness violated at target {cmap.target}: relative gap {gap:.2e}"
                    )
        scale = None
        if shared_scale:
            scale = max(float(np.max(np.abs(m.values))) for m in maps)
        for cmap in maps:
            name = map_filename(dataset, sample, *cmap.target, fmt)
            paths.append(export_map(cmap, maps_dir / name, fmt, scale))
        full = full_map(model, x)
        paths.append(export_map(full, maps_dir / f"{dataset}_s{sample}_full.csv", "csv"))
    print(f"wrote {len(paths)} map file(s) to {maps_dir}")
    return paths


def cmd_inspect(checkpoint: Path) -> Forecaster:
    model = _load_model(checkpoint)
    dims = model.dims
    print(f"variant:    {model.variant}")
    print(f"dims:       K={dims.n_series} L={dims.lookback} T={dims.horizon}")
    print(f"seed:       {model.seed}")
    if isinstance(model, NfclModel):
        print(f"hidden:     {list(model.hidden)}")
        if model.decomp is not None:
            print(f"kernels:    {list(model.decomp.kernels)} ({model.decomp.padding} padding)")
        print(f"slope:      {model.slope}")
    elif isinstance(model, DLinearModel):
        print(f"moving_avg: {model.moving_avg}")
    print(f"parameters: {parameter_count(model)}")
    width = max(len(name) for name in model.params)
    for name, array in model.params.items():
        print(f"  {name:<{width}}  {list(array.shape)}")
    return model


def cmd_verify(seed: int = 0, gradient_configs: int = 100) -> int:
    """Run the verification battery. Returns exit code (0 = every check passed)."""
    results = verify.run_checks(seed=seed, gradient_configs=gradient_configs)
    print(verify.format_results(results))
    return 0 if all(r.passed for r in results) else 1

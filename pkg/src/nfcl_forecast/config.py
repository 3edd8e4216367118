"""Load, validate and save run configurations as flat TOML."""

from __future__ import annotations

import json
import logging
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from nfcl_forecast.datapipe import DataError, SplitSpec
from nfcl_forecast.nfcl import DecompSpec, ModelError
from nfcl_forecast.optim import TrainConfig, TrainingError

logger = logging.getLogger(__name__)

MODELS = ("v", "c", "d", "nlinear", "dlinear")


class ConfigError(Exception):
    """Raised when a config file or flag combination is missing or malformed."""


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run; mirrors the CLI flags one to one."""

    data: str = ""
    date_col: str | None = None
    lookback: int = 24
    horizon: int = 6
    model: str = "c"
    hidden: list[int] = field(default_factory=lambda: [32])
    kernels: list[int] = field(default_factory=lambda: [10, 4, 1])
    padding: str = "replicate"
    slope: float = 0.01
    moving_avg: int = 25
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    lr: float = 0.001
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 128
    patience: int = 100
    max_epochs: int = 1000
    shuffle: bool = True
    deterministic: bool = True
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    threads: int = 1
    output_dir: str = "runs/nfcl"

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_frac, self.val_frac, self.test_frac)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            batch_size=self.batch_size,
            patience=self.patience,
            max_epochs=self.max_epochs,
            seed=seed,
            shuffle=self.shuffle,
            deterministic=self.deterministic,
            threads=self.threads,
        )


def _kinds() -> dict[str, type]:
    defaults = RunConfig()
    kinds = {f.name: type(getattr(defaults, f.name)) for f in fields(RunConfig)}
    kinds["date_col"] = str
    return kinds


def _coerce(key: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{key}' must be true or false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{key}' must be an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, int | float):
            raise ConfigError(f"'{key}' must be a number, got {value!r}")
        return float(value)
    if kind is list:
        if not isinstance(value, list) or not all(
            isinstance(v, int) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"'{key}' must be an array of integers, got {value!r}")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"'{key}' must be a string, got {value!r}")
    return value


def from_mapping(table: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from a flat key/value table, on top of `base`."""
    kinds = _kinds()
    values = {}
    for key, value in table.items():
        if key not in kinds:
            raise ConfigError(f"unknown config key '{key}'")
        values[key] = _coerce(key, value, kinds[key])
    return validate(replace(base or RunConfig(), **values))


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.lookback < 1 or cfg.horizon < 1:
        raise ConfigError(f"lookback and horizon must be >= 1, got {cfg.lookback}, {cfg.horizon}")
    if cfg.model not in MODELS:
        raise ConfigError(f"'model' must be one of {', '.join(MODELS)}, got {cfg.model!r}")
    if cfg.model in ("c", "d") and (not cfg.hidden or min(cfg.hidden) < 1):
        raise ConfigError(f"'hidden' must be non-empty positive widths, got {cfg.hidden}")
    if not cfg.seeds:
        raise ConfigError("'seeds' must list at least one seed")
    if cfg.threads < 1:
        raise ConfigError(f"'threads' must be >= 1, got {cfg.threads}")
    try:
        cfg.split_spec()
        cfg.train_config(cfg.seeds[0])
        if cfg.model == "d":
            DecompSpec(kernels=tuple(cfg.kernels), padding=cfg.padding)
    except (DataError, ModelError, TrainingError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def find_pyproject(start: Path | None = None, table: str | None = None) -> Path | None:
    """Walk up from start (default: cwd) to the nearest pyproject.toml, if any.

    With `table`, only a pyproject.toml declaring [tool.<table>] counts; files
    that do not parse are skipped with a warning.
    """
    current = start or Path.cwd()
    for directory in [current, *current.parents]:
        candidate = directory / "pyproject.toml"
        if not candidate.is_file():
            continue
        if table is None or _declares_table(candidate, table):
            return candidate
    return None


def _declares_table(path: Path, table: str) -> bool:
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        logger.warning("skipping unreadable %s: %s", path, exc)
        return False
    return table in data.get("tool", {})


def load_config(path: Path) -> RunConfig:
    """Load a flat TOML run config.

    A pyproject.toml is read from its [tool.nfcl] table instead.
    """
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("rb") as f:
            data = tomllib.load(f)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if path.name == "pyproject.toml":
        data = data.get("tool", {}).get("nfcl", {})
    return from_mapping(data)


def project_defaults(start: Path | None = None) -> RunConfig:
    """Defaults from [tool.nfcl] of the enclosing project, else the built-ins."""
    pyproject = find_pyproject(start, table="nfcl")
    if pyproject is None:
        return RunConfig()
    return load_config(pyproject)


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int | float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return json.dumps(value)


def dumps(cfg: RunConfig) -> str:
    lines = [f"{key} = {_toml_value(value)}" for key, value in asdict(cfg).items()
             if value is not None]
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg), encoding="utf-8")
    return path

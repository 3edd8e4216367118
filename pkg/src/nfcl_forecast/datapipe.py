"""CSV ingestion, chronological splitting, train-fitted scaling and sliding windows."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

DATE_COLUMN_NAMES = ("date", "datetime", "timestamp", "time")
STD_FLOOR = 1e-8


class DataError(Exception):
    """Raised when input data is missing, malformed or too short."""


@dataclass(frozen=True, eq=False)
class ScaleState:
    """Per-variable statistics fitted on the train segment."""

    mean: np.ndarray
    std: np.ndarray

    @property
    def n_series(self) -> int:
        return int(self.mean.shape[0])


@dataclass(frozen=True, eq=False)
class TimeSeriesDataset:
    """K named series over N timesteps, stored row-per-series."""

    names: list[str]
    values: np.ndarray
    freq: str | None = None
    origin: str = ""
    offset: int = 0
    scale: ScaleState | None = None

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise DataError(f"values must be a K x N matrix, got shape {self.values.shape}")
        n_series, n_steps = self.values.shape
        if n_series < 1 or n_steps < 1:
            raise DataError(f"dataset needs K >= 1 and N >= 1, got K={n_series}, N={n_steps}")
        if len(self.names) != n_series:
            raise DataError(f"{len(self.names)} names for {n_series} series")
        if not np.all(np.isfinite(self.values)):
            raise DataError("dataset contains non-finite values")

    @property
    def n_series(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_steps(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class SplitSpec:
    """Chronological train/val/test fractions."""

    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2

    def __post_init__(self) -> None:
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if not all(0.0 < f < 1.0 for f in fracs):
            raise DataError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise DataError(f"split fractions must sum to 1, got {sum(fracs)!r}")

    def boundaries(self, n_steps: int) -> tuple[int, int]:
        # guard against products like 0.6 * 5 landing a hair under an integer
        first = math.floor(n_steps * self.train_frac + 1e-9)
        second = math.floor(n_steps * (self.train_frac + self.val_frac) + 1e-9)
        return first, second


@dataclass(frozen=True, eq=False)
class WindowBatch:
    """Paired look-back windows X (B, K, L) and targets Y (B, K, T)."""

    X: np.ndarray
    Y: np.ndarray
    indices: np.ndarray

    def __post_init__(self) -> None:
        if self.X.ndim != 3 or self.Y.ndim != 3:
            raise DataError(f"windows must be 3-D, got X{self.X.shape} Y{self.Y.shape}")
        if self.X.shape[:2] != self.Y.shape[:2] or len(self.indices) != self.X.shape[0]:
            raise DataError(f"mismatched window batch X{self.X.shape} Y{self.Y.shape}")

    def __len__(self) -> int:
        return int(self.X.shape[0])

    def take(self, rows: np.ndarray) -> WindowBatch:
        return WindowBatch(X=self.X[rows], Y=self.Y[rows], indices=self.indices[rows])


@dataclass(frozen=True, eq=False)
class PreparedData:
    """Scaled segments and their windows, all sharing one ScaleState."""

    scale: ScaleState
    train: TimeSeriesDataset
    val: TimeSeriesDataset
    test: TimeSeriesDataset
    windows: dict[str, WindowBatch]


def load_csv(path: str | Path, date_col: str | None = None) -> TimeSeriesDataset:
    """Read a header-first CSV into a K x N dataset.

    The date column is taken from `date_col`, or else from a header named like
    one of DATE_COLUMN_NAMES; it is never guessed from cell contents.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except pd.errors.EmptyDataError as exc:
        raise DataError(f"{path}: file is empty") from exc
    except pd.errors.ParserError as exc:
        raise DataError(f"{path}: ragged rows: {exc}") from exc

    short = _first_short_line(path, len(frame.columns))
    if short is not None:
        raise DataError(f"{path}: ragged row at line {short}")

    date_name = _resolve_date_column(frame.columns, date_col, path)
    value_columns = [c for c in frame.columns if c != date_name]
    if not value_columns or frame.empty:
        raise DataError(f"{path}: no numeric data after excluding the date column")

    numeric = frame[value_columns].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().to_numpy()
    if bad.any():
        row, col = (int(i) for i in np.argwhere(bad)[0])
        name = value_columns[col]
        raise DataError(
            f"{path}: non-numeric cell at line {row + 2}, column {name!r}: "
            f"{frame[name].iloc[row]!r}"
        )
    values = numeric.to_numpy(dtype=np.float64).T.copy()
    if not np.all(np.isfinite(values)):
        row, col = (int(i) for i in np.argwhere(~np.isfinite(values.T))[0])
        raise DataError(
            f"{path}: non-finite cell at line {row + 2}, column {value_columns[col]!r}"
        )

    freq = _infer_freq(frame[date_name]) if date_name is not None else None
    logger.info("loaded %s: K=%d N=%d freq=%s", path, values.shape[0], values.shape[1], freq)
    return TimeSeriesDataset(
        names=[str(c) for c in value_columns], values=values, freq=freq, origin=str(path)
    )


def _first_short_line(path: Path, width: int) -> int | None:
    # pandas pads short rows with empty strings, so count the fields directly
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        next(reader, None)
        for row in reader:
            if row and len(row) < width:
                return reader.line_num
    return None


def _resolve_date_column(columns: pd.Index, date_col: str | None, path: Path) -> str | None:
    if date_col is not None:
        if date_col not in columns:
            raise DataError(f"{path}: date column {date_col!r} not in header")
        return date_col
    for column in columns:
        if str(column).strip().lower() in DATE_COLUMN_NAMES:
            return column
    return None


def _infer_freq(dates: pd.Series) -> str | None:
    if len(dates) < 3:
        return None
    try:
        index = pd.DatetimeIndex(pd.to_datetime(dates, errors="raise"))
        return pd.infer_freq(index)
    except (ValueError, TypeError):
        return None


def split_chronological(
    ds: TimeSeriesDataset, spec: SplitSpec, min_length: int | None = None
) -> tuple[TimeSeriesDataset, TimeSeriesDataset, TimeSeriesDataset]:
    """Cut the timestep axis at floor(N*train) and floor(N*(train+val))."""
    first, second = spec.boundaries(ds.n_steps)
    bounds = [(0, first), (first, second), (second, ds.n_steps)]
    segments = []
    for label, (start, stop) in zip(("train", "val", "test"), bounds, strict=True):
        if stop <= start:
            raise DataError(f"{label} segment would be empty (N={ds.n_steps})")
        if min_length is not None and stop - start < min_length:
            logger.warning(
                "%s segment has %d steps, fewer than the %d one window needs",
                label, stop - start, min_length,
            )
        segments.append(
            replace(ds, values=ds.values[:, start:stop].copy(), offset=ds.offset + start)
        )
    return segments[0], segments[1], segments[2]


def fit_scale(train: TimeSeriesDataset) -> ScaleState:
    """Population mean/std per variable over the train steps only."""
    mean = train.values.mean(axis=1)
    std = np.maximum(train.values.std(axis=1), STD_FLOOR)
    return ScaleState(mean=mean, std=std)


def scale_values(values: np.ndarray, s: ScaleState, axis: int = 0) -> np.ndarray:
    """Z-score `values` whose `axis` runs over the K variables."""
    shape = _stat_shape(values, s, axis)
    return (values - s.mean.reshape(shape)) / s.std.reshape(shape)


def inverse_scale_values(values: np.ndarray, s: ScaleState, axis: int = 0) -> np.ndarray:
    shape = _stat_shape(values, s, axis)
    return values * s.std.reshape(shape) + s.mean.reshape(shape)


def _stat_shape(values: np.ndarray, s: ScaleState, axis: int) -> list[int]:
    if values.shape[axis] != s.n_series:
        raise DataError(
            f"dimension mismatch: data has {values.shape[axis]} series, "
            f"scale state has {s.n_series}"
        )
    shape = [1] * values.ndim
    shape[axis] = s.n_series
    return shape


def apply_scale(ds: TimeSeriesDataset, s: ScaleState) -> TimeSeriesDataset:
    return replace(ds, values=scale_values(ds.values, s), scale=s)


def inverse_scale(ds: TimeSeriesDataset, s: ScaleState) -> TimeSeriesDataset:
    return replace(ds, values=inverse_scale_values(ds.values, s), scale=None)


def make_windows(ds: TimeSeriesDataset, lookback: int, horizon: int) -> WindowBatch:
    """One-step sliding windows: sample i has X = [i, i+L) and Y = [i+L, i+L+T)."""
    if lookback < 1 or horizon < 1:
        raise DataError(f"lookback and horizon must be >= 1, got L={lookback}, T={horizon}")
    if not lookback > horizon > 1:
        logger.warning("L=%d, T=%d is outside the L > T > 1 regime", lookback, horizon)
    span = lookback + horizon
    if ds.n_steps < span:
        raise DataError(f"segment too short: N={ds.n_steps} < L+T={span}")

    # (K, B, L+T) -> (B, K, L+T)
    view = np.lib.stride_tricks.sliding_window_view(ds.values, span, axis=1)
    stacked = np.ascontiguousarray(view.transpose(1, 0, 2))
    return WindowBatch(
        X=stacked[:, :, :lookback].copy(),
        Y=stacked[:, :, lookback:].copy(),
        indices=ds.offset + np.arange(stacked.shape[0]),
    )


def prepare(ds: TimeSeriesDataset, spec: SplitSpec, lookback: int, horizon: int) -> PreparedData:
    """Split, scale every segment with train statistics, then window each segment."""
    train, val, test = split_chronological(ds, spec, min_length=lookback + horizon)
    scale = fit_scale(train)
    segments = {name: apply_scale(seg, scale) for name, seg in
                (("train", train), ("val", val), ("test", test))}
    windows = {}
    for name, segment in segments.items():
        try:
            windows[name] = make_windows(segment, lookback, horizon)
        except DataError as exc:
            raise DataError(f"{name} split: {exc}") from exc
    return PreparedData(scale=scale, windows=windows, **segments)

"""Contribution maps h(X) * w.

For a target (k, t) the entries of the K x L map plus the output bias add up
exactly to the normalized prediction y~^{k,t}. For NFCL-D the per-component
maps of all submodels are summed at matching (i, j).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nfcl_forecast.nfcl import (
    ModelError,
    NfclModel,
    NormParams,
    forward,
    map_points,
    normalized_forecast,
    normalized_inputs,
    standardize,
)

FORMATS = ("csv", "pgm")
SPACES = ("normalized", "denormalized")
MID_GRAY = 127


class InterpretError(Exception):
    """Raised for out-of-range targets, unsupported models or formats."""


@dataclass(frozen=True, eq=False)
class ContributionMap:
    target: tuple[int, int]
    values: np.ndarray
    bias: float
    space: str = "normalized"

    @property
    def total(self) -> float:
        return float(self.values.sum() + self.bias)


@dataclass(frozen=True, eq=False)
class FullWeightMap:
    """(K*L, K*T) contributions of one sample; column k*T+t belongs to target (k, t)."""

    values: np.ndarray
    bias: np.ndarray
    n_series: int
    lookback: int
    horizon: int

    def column(self, k: int, t: int) -> ContributionMap:
        col = k * self.horizon + t
        return ContributionMap(
            target=(k, t),
            values=self.values[:, col].reshape(self.n_series, self.lookback),
            bias=float(self.bias[col]),
        )


@dataclass(frozen=True, eq=False)
class _Part:
    contributions: np.ndarray
    bias: np.ndarray
    norm: NormParams


def _sample(model: NfclModel, x: np.ndarray) -> np.ndarray:
    if not isinstance(model, NfclModel):
        raise InterpretError(f"contribution maps need an NFCL model, got {type(model).__name__}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    expected = (1, model.dims.n_series, model.dims.lookback)
    if x.shape != expected:
        raise InterpretError(f"expected one sample of shape {expected[1:]}, got {x.shape}")
    return x


def _parts(model: NfclModel, x: np.ndarray) -> list[_Part]:
    parts = []
    try:
        inputs = normalized_inputs(x, model)
    except ModelError as exc:
        raise InterpretError(str(exc)) from exc
    for x_tilde, sub in zip(inputs, model.submodels()):
        x_h = map_points(x_tilde, sub.stack) if sub.stack is not None else x_tilde
        parts.append(
            _Part(contributions=x_h.reshape(-1)[:, None] * sub.layer.w, bias=sub.layer.b,
                  norm=sub.norm)
        )
    return parts


def full_map(model: NfclModel, x: np.ndarray) -> FullWeightMap:
    """Every target's contributions for one sample, stacked column-wise."""
    x = _sample(model, x)
    parts = _parts(model, x)
    values = parts[0].contributions
    bias = parts[0].bias
    for part in parts[1:]:
        values = values + part.contributions
        bias = bias + part.bias
    dims = model.dims
    return FullWeightMap(
        values=values, bias=np.array(bias, copy=True), n_series=dims.n_series,
        lookback=dims.lookback, horizon=dims.horizon,
    )


def contribution(
    model: NfclModel, x: np.ndarray, k: int, t: int, space: str = "normalized"
) -> ContributionMap:
    """Additive explanation of target (k, t) over all K x L input points.

    In `denormalized` space each submodel's entries are multiplied by
    std_k / alpha_k and the beta/mean offsets are folded into the bias, so the
    map sums to the forecast after instance denormalization.
    """
    x = _sample(model, x)
    dims = model.dims
    if not (0 <= k < dims.n_series and 0 <= t < dims.horizon):
        raise InterpretError(
            f"target ({k}, {t}) out of range for K={dims.n_series}, T={dims.horizon}"
        )
    if space not in SPACES:
        raise InterpretError(f"space must be one of {SPACES}, got {space!r}")

    col = k * dims.horizon + t
    parts = _parts(model, x)
    if space == "normalized":
        values = parts[0].contributions[:, col]
        bias = float(parts[0].bias[col])
        for p in parts[1:]:
            values = values + p.contributions[:, col]
            bias += float(p.bias[col])
    else:
        _, stats = standardize(x)
        std = float(stats.std[0, k])
        mean = float(stats.mean[0, k])
        values = sum(
            p.contributions[:, col] * (std / float(p.norm.alpha[k])) for p in parts
        )
        bias = mean + sum(
            (float(p.bias[col]) - float(p.norm.beta[k])) / float(p.norm.alpha[k]) * std
            for p in parts
        )
    return ContributionMap(
        target=(k, t),
        values=np.asarray(values).reshape(dims.n_series, dims.lookback),
        bias=float(bias),
        space=space,
    )


def faithfulness_gap(model: NfclModel, x: np.ndarray, cmap: ContributionMap) -> float:
    """Relative gap between the map's total and the model's own prediction."""
    x = _sample(model, x)
    k, t = cmap.target
    if cmap.space == "normalized":
        expected = float(normalized_forecast(x, model)[0, k, t])
    else:
        expected = float(forward(x, model)[0, k, t])
    return abs(cmap.total - expected) / max(abs(expected), 1.0)


def source_totals(cmap: ContributionMap) -> np.ndarray:
    """Summed contribution of each source variable to the map's target."""
    return cmap.values.sum(axis=1)


def map_filename(dataset: str, sample: int, k: int, t: int, fmt: str) -> str:
    return f"{dataset}_s{sample}_k{k}_t{t}.{fmt}"


def to_gray(values: np.ndarray, scale: float | None = None) -> tuple[np.ndarray, float]:
    """Map 0 to mid-gray 127, +scale to 255 and -scale to 0."""
    if scale is None:
        scale = float(np.max(np.abs(values))) if values.size else 0.0
    if scale == 0.0:
        return np.full(values.shape, MID_GRAY, dtype=int), 0.0
    ratio = np.clip(values / scale, -1.0, 1.0)
    # 128 steps above the midpoint, 127 below
    steps = np.where(ratio >= 0, 128 * ratio, 127 * ratio)
    return (MID_GRAY + np.rint(steps)).astype(int), scale


def export_map(
    cmap: ContributionMap | FullWeightMap,
    path: str | Path,
    fmt: str = "csv",
    scale: float | None = None,
) -> Path:
    """Write a map as CSV (rows plus a bias footer) or plain P2 PGM.

    `scale` fixes the grey scale so several maps can share one; by default it
    is the map's own largest |value|.
    """
    if fmt not in FORMATS:
        raise InterpretError(f"format must be one of {FORMATS}, got {fmt!r}")
    path = Path(path)
    values = cmap.values
    bias = np.atleast_1d(np.asarray(cmap.bias, dtype=np.float64))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        if fmt == "csv":
            footer = "bias," + ",".join(repr(float(b)) for b in bias)
            np.savetxt(path, values, fmt="%.17g", delimiter=",", footer=footer, comments="")
        else:
            pixels, used = to_gray(values, scale)
            height, width = values.shape
            header = (
                f"P2\n# scale={used!r} zero={MID_GRAY} positive=bright\n"
                f"{width} {height}\n255\n"
            )
            body = "\n".join(" ".join(str(p) for p in row) for row in pixels)
            path.write_text(header + body + "\n", encoding="ascii")
    except OSError as exc:
        raise InterpretError(f"cannot write {path}: {exc}") from exc
    return path


def read_map_csv(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of the CSV export: (values, bias)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[-1].startswith("bias,"):
        raise InterpretError(f"{path}: missing bias footer")
    values = np.loadtxt(lines[:-1], delimiter=",", ndmin=2)
    bias = np.array([float(v) for v in lines[-1].split(",")[1:]])
    return values, bias

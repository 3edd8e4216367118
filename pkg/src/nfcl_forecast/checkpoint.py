"""Self-describing JSON checkpoints.

Every tensor is stored as its shape plus a row-major list of floats. JSON
writes floats with their shortest round-tripping repr, so loading a saved
model reproduces it bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np

from nfcl_forecast.baselines import DLinearModel, NLinearModel, init_dlinear, init_nlinear
from nfcl_forecast.nfcl import DecompSpec, ModelDims, ModelError, NfclModel, Variant, init_model

FORMAT = "nfcl-checkpoint"
VERSION = 1

Forecaster = NfclModel | NLinearModel | DLinearModel


def to_document(model: Forecaster) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "format": FORMAT,
        "version": VERSION,
        "variant": str(model.variant),
        "dims": {
            "n_series": model.dims.n_series,
            "lookback": model.dims.lookback,
            "horizon": model.dims.horizon,
        },
        "seed": model.seed,
    }
    if isinstance(model, NfclModel):
        doc["hidden"] = list(model.hidden)
        doc["kernels"] = list(model.decomp.kernels) if model.decomp else []
        doc["padding"] = model.decomp.padding if model.decomp else None
        doc["slope"] = model.slope
    elif isinstance(model, DLinearModel):
        doc["moving_avg"] = model.moving_avg
    doc["params"] = {
        name: {"shape": list(array.shape), "data": array.ravel().tolist()}
        for name, array in model.params.items()
    }
    return doc


def from_document(doc: dict[str, Any]) -> Forecaster:
    model = _decode(doc)
    _check_tensors(model)
    return model


def _decode(doc: dict[str, Any]) -> Forecaster:
    if doc.get("format") != FORMAT:
        raise ModelError(f"not an nfcl checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise ModelError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        dims = ModelDims(**doc["dims"])
        params = {
            name: np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
            for name, entry in doc["params"].items()
        }
        variant = doc["variant"]
        seed = int(doc["seed"])
        if variant == NLinearModel.variant:
            return NLinearModel(dims=dims, params=params, seed=seed)
        if variant == DLinearModel.variant:
            return DLinearModel(
                dims=dims, params=params, seed=seed, moving_avg=int(doc["moving_avg"])
            )
        variant = Variant(variant)
        decomp = None
        if variant is Variant.D:
            decomp = DecompSpec(kernels=tuple(doc["kernels"]), padding=doc["padding"])
        return NfclModel(
            variant=variant,
            dims=dims,
            params=params,
            hidden=tuple(doc["hidden"]),
            decomp=decomp,
            seed=seed,
            slope=float(doc["slope"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"malformed checkpoint: {exc}") from exc


def _template(model: Forecaster) -> Forecaster:
    if isinstance(model, NLinearModel):
        return init_nlinear(model.dims)
    if isinstance(model, DLinearModel):
        return init_dlinear(model.dims, moving_avg=model.moving_avg)
    kernels = model.decomp.kernels if model.decomp else (1,)
    return init_model(model.variant, model.dims, hidden=model.hidden, kernels=kernels)


def _check_tensors(model: Forecaster) -> None:
    """Tensor names and shapes must be exactly those of a fresh model with the same config."""
    try:
        template = _template(model)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"malformed checkpoint: {exc}") from exc
    expected = {name: p.shape for name, p in template.params.items()}
    missing = sorted(expected.keys() - model.params.keys())
    extra = sorted(model.params.keys() - expected.keys())
    if missing or extra:
        raise ModelError(
            f"malformed checkpoint: {model.variant} tensors missing {missing}, unexpected {extra}"
        )
    for name, shape in expected.items():
        if model.params[name].shape != shape:
            raise ModelError(
                f"malformed checkpoint: tensor {name!r} has shape "
                f"{list(model.params[name].shape)}, expected {list(shape)}"
            )


def save_checkpoint(model: Forecaster, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_document(model)) + "\n", encoding="utf-8")
    return path


def load_checkpoint(path: str | Path) -> Forecaster:
    path = Path(path)
    if not path.is_file():
        raise ModelError(f"checkpoint not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: invalid JSON: {exc}") from exc
    return from_document(doc)

"""NFCL forecasters.

Three variants share one pipeline: instance-normalize the look-back window,
forecast in normalized space, then invert the normalization.

- V: a single dense map from all K*L input points to all K*T output points.
- C: every input point is first re-evaluated by its own scalar MLP h^{i,j}.
- D: the standardized window is split by moving-average pooling and each
  component is forecast by an independent C-submodel; outputs are summed.

Parameters live in one flat dict of named float64 arrays. Inputs are flattened
series-major (index i*L + j) and outputs likewise (index k*T + t).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import StrEnum
from typing import Protocol

import numpy as np

from nfcl_forecast import seeding

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01
NORM_EPS = 1e-5
ALPHA_FLOOR = 1e-8
PADDINGS = ("replicate", "zero")

GradientSet = dict[str, np.ndarray]


class ModelError(Exception):
    """Raised for invalid model configuration or mismatched shapes."""


class DivergenceError(ModelError):
    """Raised when the training loss is no longer finite."""


class Parameterised(Protocol):
    params: dict[str, np.ndarray]


class Variant(StrEnum):
    V = "v"
    C = "c"
    D = "d"


@dataclass(frozen=True)
class ModelDims:
    n_series: int
    lookback: int
    horizon: int

    def __post_init__(self) -> None:
        if min(self.n_series, self.lookback, self.horizon) < 1:
            raise ModelError(
                f"dims must be >= 1, got K={self.n_series}, L={self.lookback}, T={self.horizon}"
            )

    @property
    def n_inputs(self) -> int:
        return self.n_series * self.lookback

    @property
    def n_outputs(self) -> int:
        return self.n_series * self.horizon


@dataclass(frozen=True)
class DecompSpec:
    """Moving-average kernels, largest first, ending in 1."""

    kernels: tuple[int, ...] = (10, 4, 1)
    padding: str = "replicate"

    def __post_init__(self) -> None:
        kernels = tuple(self.kernels)
        if not kernels:
            raise ModelError("decomposition needs at least one kernel")
        if any(k < 1 for k in kernels):
            raise ModelError(f"kernels must be positive, got {list(kernels)}")
        if any(a <= b for a, b in zip(kernels, kernels[1:])):
            raise ModelError(f"kernels must be strictly decreasing, got {list(kernels)}")
        if kernels[-1] != 1:
            raise ModelError(f"the last kernel must be 1, got {list(kernels)}")
        if self.padding not in PADDINGS:
            raise ModelError(f"padding must be one of {PADDINGS}, got {self.padding!r}")
        object.__setattr__(self, "kernels", kernels)


@dataclass(eq=False)
class OutputLayer:
    w: np.ndarray
    b: np.ndarray


@dataclass(eq=False)
class MappingStack:
    """Banks of per-point layers; weights[n] is (P, c_in, c_out), biases[n] is (P, c_out)."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    slope: float = LEAKY_SLOPE

    @property
    def n_points(self) -> int:
        return int(self.weights[0].shape[0])


@dataclass(eq=False)
class NormParams:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def identity(cls, n_series: int) -> NormParams:
        return cls(alpha=np.ones(n_series), beta=np.zeros(n_series))


@dataclass(eq=False)
class NormStats:
    """Per-sample, per-variable look-back statistics, shape (B, K)."""

    mean: np.ndarray
    std: np.ndarray


@dataclass(eq=False)
class Submodel:
    """View over the parameters of one normalization + (mapping) + output stack."""

    norm: NormParams
    layer: OutputLayer
    stack: MappingStack | None = None


@dataclass(eq=False)
class NfclModel:
    variant: Variant
    dims: ModelDims
    params: dict[str, np.ndarray]
    hidden: tuple[int, ...] = ()
    decomp: DecompSpec | None = None
    seed: int = 0
    slope: float = LEAKY_SLOPE

    @property
    def prefixes(self) -> list[str]:
        if self.variant is Variant.D:
            assert self.decomp is not None
            return [f"sub{n}." for n in range(len(self.decomp.kernels))]
        return [""]

    @property
    def n_layers(self) -> int:
        return len(self.hidden) + 1 if self.variant is not Variant.V else 0

    def submodels(self) -> list[Submodel]:
        return [_submodel(self.params, p, self.n_layers, self.slope) for p in self.prefixes]

    def predict(self, X: np.ndarray) -> np.ndarray:
        return forward(X, self)

    def loss_and_grads(self, X: np.ndarray, Y: np.ndarray) -> tuple[float, GradientSet]:
        grads, loss = backward(X, Y, self)
        return loss, grads

    def constrain(self) -> None:
        """Keep every |alpha| >= ALPHA_FLOOR so the normalization stays invertible."""
        for prefix in self.prefixes:
            alpha = self.params[prefix + "norm.alpha"]
            small = np.abs(alpha) < ALPHA_FLOOR
            alpha[small] = np.where(alpha[small] < 0, -ALPHA_FLOOR, ALPHA_FLOOR)

    def with_params(self, params: dict[str, np.ndarray]) -> NfclModel:
        return replace(self, params=params)


def _submodel(params: dict[str, np.ndarray], prefix: str, n_layers: int, slope: float) -> Submodel:
    stack = None
    if n_layers:
        stack = MappingStack(
            weights=[params[f"{prefix}map.{n}.weight"] for n in range(n_layers)],
            biases=[params[f"{prefix}map.{n}.bias"] for n in range(n_layers)],
            slope=slope,
        )
    return Submodel(
        norm=NormParams(alpha=params[prefix + "norm.alpha"], beta=params[prefix + "norm.beta"]),
        layer=OutputLayer(w=params[prefix + "out.w"], b=params[prefix + "out.b"]),
        stack=stack,
    )


def init_model(
    variant: Variant | str,
    dims: ModelDims,
    hidden: tuple[int, ...] | list[int] = (32,),
    kernels: tuple[int, ...] | list[int] = (10, 4, 1),
    seed: int = 0,
    padding: str = "replicate",
    slope: float = LEAKY_SLOPE,
) -> NfclModel:
    """Create a model with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and zero biases.

    Draws come from the `init` stream of `seed`, so equal seeds give
    bit-identical parameters.
    """
    try:
        variant = Variant(variant)
    except ValueError as exc:
        raise ModelError(f"unknown NFCL variant {variant!r}") from exc

    decomp = None
    if variant is Variant.V:
        hidden = ()
    else:
        hidden = tuple(int(h) for h in hidden)
        if not hidden or any(h < 1 for h in hidden):
            raise ModelError(f"variant {variant} needs positive hidden widths, got {list(hidden)}")
    if variant is Variant.D:
        decomp = DecompSpec(kernels=tuple(kernels), padding=padding)

    model = NfclModel(
        variant=variant, dims=dims, params={}, hidden=hidden, decomp=decomp, seed=seed,
        slope=slope,
    )
    rng = seeding.stream(seed, seeding.INIT)
    widths = [1, *hidden, 1] if hidden else []
    params = model.params
    for prefix in model.prefixes:
        params[prefix + "norm.alpha"] = np.ones(dims.n_series)
        params[prefix + "norm.beta"] = np.zeros(dims.n_series)
        for n, (c_in, c_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(c_in)
            params[f"{prefix}map.{n}.weight"] = rng.uniform(
                -bound, bound, (dims.n_inputs, c_in, c_out)
            )
            params[f"{prefix}map.{n}.bias"] = np.zeros((dims.n_inputs, c_out))
        bound = 1.0 / math.sqrt(dims.n_inputs)
        params[prefix + "out.w"] = rng.uniform(-bound, bound, (dims.n_inputs, dims.n_outputs))
        params[prefix + "out.b"] = np.zeros(dims.n_outputs)
    logger.debug("initialised %s model with %d parameters", variant, parameter_count(model))
    return model


def parameter_count(model: Parameterised) -> int:
    """Learnable parameters, alpha and beta of every submodel included."""
    return int(sum(p.size for p in model.params.values()))


def standardize(X: np.ndarray) -> tuple[np.ndarray, NormStats]:
    if X.ndim != 3:
        raise ModelError(f"expected windows of shape (B, K, L), got {X.shape}")
    mean = X.mean(axis=2)
    std = np.maximum(X.std(axis=2), NORM_EPS)
    return (X - mean[:, :, None]) / std[:, :, None], NormStats(mean=mean, std=std)


def _affine(z: np.ndarray, p: NormParams) -> np.ndarray:
    return p.alpha[None, :, None] * z + p.beta[None, :, None]


def _inverse_affine(y: np.ndarray, p: NormParams) -> np.ndarray:
    if np.any(np.abs(p.alpha) < ALPHA_FLOOR):
        raise ModelError(f"|alpha| fell below {ALPHA_FLOOR}; normalization is not invertible")
    return (y - p.beta[None, :, None]) / p.alpha[None, :, None]


def instance_normalize(X: np.ndarray, p: NormParams) -> tuple[np.ndarray, NormStats]:
    """alpha * (x - mean) / max(std, eps) + beta over the L axis of each sample."""
    z, stats = standardize(X)
    return _affine(z, p), stats


def instance_denormalize(Y_tilde: np.ndarray, p: NormParams, stats: NormStats) -> np.ndarray:
    """Invert the affine map with the look-back statistics of the matching normalize call."""
    return _inverse_affine(Y_tilde, p) * stats.std[:, :, None] + stats.mean[:, :, None]


def forward_v(X_tilde: np.ndarray, layer: OutputLayer) -> np.ndarray:
    """y^{k,t} = sum_{i,j} x^{i,j} w^{i,j,k,t} + b^{k,t}."""
    batch, n_series = X_tilde.shape[:2]
    flat = X_tilde.reshape(batch, -1)
    if flat.shape[1] != layer.w.shape[0] or layer.w.shape[1] % n_series:
        raise ModelError(
            f"input of shape {X_tilde.shape} does not fit output weights {layer.w.shape}"
        )
    return (flat @ layer.w + layer.b).reshape(batch, n_series, -1)


def _leaky(h: np.ndarray, slope: float) -> np.ndarray:
    return np.where(h > 0, h, slope * h)


def _pointwise_affine(a: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # a: (B, P, c_in), weight: (P, c_in, c_out). Accumulates channels in a fixed
    # order so the result matches the per-point loop bit for bit.
    out = a[:, :, 0:1] * weight[:, 0, :]
    for i in range(1, weight.shape[1]):
        out = out + a[:, :, i : i + 1] * weight[:, i, :]
    return out + bias


def _map_points_traced(
    X_tilde: np.ndarray, stack: MappingStack
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    batch, n_series, lookback = X_tilde.shape
    if n_series * lookback != stack.n_points:
        raise ModelError(
            f"mapping stack has {stack.n_points} points, input has {n_series * lookback}"
        )
    a = X_tilde.reshape(batch, -1, 1)
    inputs, pre = [], []
    last = len(stack.weights) - 1
    for n, (weight, bias) in enumerate(zip(stack.weights, stack.biases)):
        inputs.append(a)
        h = _pointwise_affine(a, weight, bias)
        if n < last:
            pre.append(h)
            a = _leaky(h, stack.slope)
        else:
            a = h
    return a.reshape(batch, n_series, lookback), inputs, pre


def map_points(X_tilde: np.ndarray, stack: MappingStack) -> np.ndarray:
    """Evaluate every h^{i,j} on its own point, all points at once (grouped pointwise)."""
    return _map_points_traced(X_tilde, stack)[0]


def map_points_loop(X_tilde: np.ndarray, stack: MappingStack) -> np.ndarray:
    """Reference evaluation: visit every (i, j) and run its scalar MLP alone."""
    batch, n_series, lookback = X_tilde.shape
    if n_series * lookback != stack.n_points:
        raise ModelError(
            f"mapping stack has {stack.n_points} points, input has {n_series * lookback}"
        )
    out = np.zeros_like(X_tilde)
    last = len(stack.weights) - 1
    for i in range(n_series):
        for j in range(lookback):
            p = i * lookback + j
            a = X_tilde[:, i, j][:, None]
            for n, (weight, bias) in enumerate(zip(stack.weights, stack.biases)):
                h = a[:, 0:1] * weight[p, 0, :]
                for c in range(1, weight.shape[1]):
                    h = h + a[:, c : c + 1] * weight[p, c, :]
                h = h + bias[p]
                a = _leaky(h, stack.slope) if n < last else h
            out[:, i, j] = a[:, 0]
    return out


def _as_submodel(model: NfclModel | Submodel, expected: Variant) -> Submodel:
    if isinstance(model, Submodel):
        return model
    if model.variant is not expected:
        raise ModelError(f"expected a {expected} model, got {model.variant}")
    return model.submodels()[0]


def forward_c(X_tilde: np.ndarray, model: NfclModel | Submodel) -> np.ndarray:
    sub = _as_submodel(model, Variant.C)
    if sub.stack is None:
        raise ModelError("forward_c needs a mapping stack")
    return forward_v(map_points(X_tilde, sub.stack), sub.layer)


def _forward_submodel(X_tilde: np.ndarray, sub: Submodel) -> np.ndarray:
    if sub.stack is None:
        return forward_v(X_tilde, sub.layer)
    return forward_c(X_tilde, sub)


def decompose(X_tilde: np.ndarray, spec: DecompSpec) -> list[np.ndarray]:
    """Peel moving averages off the series, largest kernel first.

    Each kernel s left-pads the time axis with s-1 copies of the first value
    (or zeros), average-pools with stride 1 and subtracts the result from the
    running residual. The final kernel is 1, so the components sum back to the
    input.
    """
    residual = X_tilde
    components = []
    for s in spec.kernels:
        if spec.padding == "replicate":
            pad = np.repeat(residual[..., :1], s - 1, axis=-1)
        else:
            pad = np.zeros(residual.shape[:-1] + (s - 1,))
        padded = np.concatenate([pad, residual], axis=-1)
        pooled = np.lib.stride_tricks.sliding_window_view(padded, s, axis=-1).mean(axis=-1)
        components.append(pooled)
        residual = residual - pooled
    return components


def _decomp_spec(model: NfclModel) -> DecompSpec:
    if model.variant is not Variant.D or model.decomp is None:
        raise ModelError(f"expected a d model, got {model.variant}")
    return model.decomp


def forward_d(Z: np.ndarray, model: NfclModel) -> np.ndarray:
    """Sum of the submodel forecasts in normalized space.

    `Z` is the standardized window. Submodel n sees component n through its
    own alpha/beta, so with alpha=1 and beta=0 this is the plain ensemble.
    """
    components = decompose(Z, _decomp_spec(model))
    subs = model.submodels()
    if len(subs) != len(components):
        raise ModelError(f"{len(subs)} submodels for {len(components)} components")
    total = None
    for component, sub in zip(components, subs):
        y = forward_c(_affine(component, sub.norm), sub)
        total = y if total is None else total + y
    return total


def _parts(Z: np.ndarray, model: NfclModel) -> list[np.ndarray]:
    if model.variant is Variant.D:
        return decompose(Z, _decomp_spec(model))
    return [Z]


def forward(X: np.ndarray, model: NfclModel) -> np.ndarray:
    """Raw look-back windows (B, K, L) to raw forecasts (B, K, T)."""
    _check_input(X, model.dims)
    Z, stats = standardize(X)
    total = None
    for part, sub in zip(_parts(Z, model), model.submodels()):
        u = _inverse_affine(_forward_submodel(_affine(part, sub.norm), sub), sub.norm)
        total = u if total is None else total + u
    return total * stats.std[:, :, None] + stats.mean[:, :, None]


def normalized_inputs(X: np.ndarray, model: NfclModel) -> list[np.ndarray]:
    """The normalized input each submodel sees (one entry for V and C)."""
    _check_input(X, model.dims)
    Z, _ = standardize(X)
    return [_affine(p, sub.norm) for p, sub in zip(_parts(Z, model), model.submodels())]


def normalized_forecast(X: np.ndarray, model: NfclModel) -> np.ndarray:
    """Y~ before denormalization (summed over submodels for D)."""
    total = None
    for x_tilde, sub in zip(normalized_inputs(X, model), model.submodels()):
        y = _forward_submodel(x_tilde, sub)
        total = y if total is None else total + y
    return total


def _check_input(X: np.ndarray, dims: ModelDims) -> None:
    if X.ndim != 3 or X.shape[1:] != (dims.n_series, dims.lookback):
        raise ModelError(
            f"expected windows of shape (B, {dims.n_series}, {dims.lookback}), got {X.shape}"
        )


@dataclass(eq=False)
class _Trace:
    z: np.ndarray
    x_tilde: np.ndarray
    flat: np.ndarray
    u: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)


def _run_submodel(z: np.ndarray, sub: Submodel) -> _Trace:
    x_tilde = _affine(z, sub.norm)
    inputs: list[np.ndarray] = []
    pre: list[np.ndarray] = []
    x_h = x_tilde
    if sub.stack is not None:
        x_h, inputs, pre = _map_points_traced(x_tilde, sub.stack)
    flat = x_h.reshape(x_h.shape[0], -1)
    y_tilde = forward_v(x_h, sub.layer)
    return _Trace(
        z=z, x_tilde=x_tilde, flat=flat, u=_inverse_affine(y_tilde, sub.norm),
        inputs=inputs, pre=pre,
    )


def _backprop_submodel(trace: _Trace, sub: Submodel, du: np.ndarray) -> GradientSet:
    batch = du.shape[0]
    alpha = sub.norm.alpha
    grads: GradientSet = {}

    # u = (y~ - beta) / alpha
    dy = du / alpha[None, :, None]
    d_alpha = -(du * trace.u).sum(axis=(0, 2)) / alpha
    d_beta = -du.sum(axis=(0, 2)) / alpha

    g = dy.reshape(batch, -1)
    grads["out.w"] = trace.flat.T @ g
    grads["out.b"] = g.sum(axis=0)
    d_x = (g @ sub.layer.w.T).reshape(trace.x_tilde.shape)

    if sub.stack is not None:
        stack = sub.stack
        last = len(stack.weights) - 1
        g = d_x.reshape(batch, -1, 1)
        for n in range(last, -1, -1):
            if n < last:
                g = g * np.where(trace.pre[n] > 0, 1.0, stack.slope)
            grads[f"map.{n}.weight"] = np.einsum("bpi,bpo->pio", trace.inputs[n], g)
            grads[f"map.{n}.bias"] = g.sum(axis=0)
            g = np.einsum("bpo,pio->bpi", g, stack.weights[n])
        d_x = g.reshape(trace.x_tilde.shape)

    # x~ = alpha * z + beta
    grads["norm.alpha"] = d_alpha + (d_x * trace.z).sum(axis=(0, 2))
    grads["norm.beta"] = d_beta + d_x.sum(axis=(0, 2))
    return grads


def backward(X: np.ndarray, Y_true: np.ndarray, model: NfclModel) -> tuple[GradientSet, float]:
    """Exact gradients of the mean-squared error over all B*K*T elements.

    Gradients flow to the parameters only; the window statistics are treated
    as constants of the data.
    """
    _check_input(X, model.dims)
    expected = (X.shape[0], model.dims.n_series, model.dims.horizon)
    if Y_true.shape != expected:
        raise ModelError(f"expected targets of shape {expected}, got {Y_true.shape}")

    Z, stats = standardize(X)
    subs = model.submodels()
    traces = [_run_submodel(part, sub) for part, sub in zip(_parts(Z, model), subs)]
    u = traces[0].u
    for trace in traces[1:]:
        u = u + trace.u
    std = stats.std[:, :, None]
    residual = u * std + stats.mean[:, :, None] - Y_true
    loss = float(np.mean(residual**2))
    if not math.isfinite(loss):
        raise DivergenceError(f"loss is not finite ({loss})")

    du = (2.0 / residual.size) * residual * std
    grads: GradientSet = {}
    for prefix, trace, sub in zip(model.prefixes, traces, subs):
        for name, grad in _backprop_submodel(trace, sub, du).items():
            grads[prefix + name] = grad
    return grads, loss


def activation_pattern(X: np.ndarray, model: NfclModel) -> np.ndarray:
    """Signs of every hidden pre-activation; empty for V models."""
    _check_input(X, model.dims)
    Z, _ = standardize(X)
    signs = [
        (pre > 0).ravel()
        for part, sub in zip(_parts(Z, model), model.submodels())
        for pre in _run_submodel(part, sub).pre
    ]
    return np.concatenate(signs) if signs else np.zeros(0, dtype=bool)

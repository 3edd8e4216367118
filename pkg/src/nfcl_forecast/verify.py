"""Built-in verification battery.

Every check compares the implementation against an independent oracle:
known parameter counts, central finite differences, the per-point loop
evaluation, reconstruction identities and hand-computed metric values.
"""

from __future__ import annotations

import logging
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from nfcl_forecast.baselines import init_dlinear, init_nlinear
from nfcl_forecast.checkpoint import Forecaster
from nfcl_forecast.interpret import InterpretError, contribution, faithfulness_gap
from nfcl_forecast.metrics import MetricError, mae, mse, r2, smape
from nfcl_forecast.nfcl import (
    LEAKY_SLOPE,
    DecompSpec,
    MappingStack,
    ModelDims,
    ModelError,
    NfclModel,
    NormParams,
    OutputLayer,
    Submodel,
    activation_pattern,
    decompose,
    forward_c,
    forward_v,
    init_model,
    instance_denormalize,
    instance_normalize,
    map_points,
    map_points_loop,
    parameter_count,
)

logger = logging.getLogger(__name__)

FD_EPS = 1e-5
GRAD_TOL = 1e-4
REL_FLOOR = 1e-6
ROUNDOFF_ULPS = 64
VARIANTS = ("v", "c", "d", "nlinear", "dlinear")
HIDDEN_CHOICES = ((1,), (2,), (4,), (3, 2), (4, 4))
KERNEL_CHOICES = ((10, 4, 1), (5, 2, 1), (3, 1), (2, 1))


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class GradientCheck:
    max_rel_error: float
    checked: int
    skipped: int
    worst: str = ""

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error <= GRAD_TOL


def _loss(model: Forecaster, X: np.ndarray, Y: np.ndarray) -> float:
    return float(np.mean((model.predict(X) - Y) ** 2))


def _pattern(model: Forecaster, X: np.ndarray) -> np.ndarray:
    if isinstance(model, NfclModel):
        return activation_pattern(X, model)
    return np.zeros(0, dtype=bool)


def _roundoff(loss: float, eps: float) -> float:
    """Absolute error a central difference of `loss` picks up from float64 rounding."""
    return ROUNDOFF_ULPS * float(np.finfo(np.float64).eps) * max(abs(loss), 1.0) / eps


def gradient_check(
    model: Forecaster,
    X: np.ndarray,
    Y: np.ndarray,
    eps: float = FD_EPS,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradientCheck:
    """Compare analytic gradients with central differences, entry by entry.

    Entries whose +/-eps stencil flips any leaky-ReLU pre-activation sign are
    skipped: the loss is not differentiable across the kink. The relative
    error is measured against at least the rounding noise of the difference
    quotient, so near-zero gradients are not judged on noise alone. With
    `max_entries` only that many entries per tensor are sampled.
    """
    loss, grads = model.loss_and_grads(X, Y)
    floor = max(REL_FLOOR, _roundoff(loss, eps) / GRAD_TOL)
    base = _pattern(model, X)
    rng = rng or np.random.default_rng(0)
    worst, worst_at, checked, skipped = 0.0, "", 0, 0

    for name, param in model.params.items():
        entries = list(np.ndindex(param.shape))
        if max_entries is not None and len(entries) > max_entries:
            picks = rng.choice(len(entries), size=max_entries, replace=False)
            entries = [entries[i] for i in sorted(picks)]
        analytic = grads[name]
        for idx in entries:
            original = param[idx]
            param[idx] = original + eps
            up, up_pattern = _loss(model, X, Y), _pattern(model, X)
            param[idx] = original - eps
            down, down_pattern = _loss(model, X, Y), _pattern(model, X)
            param[idx] = original
            if not (np.array_equal(up_pattern, base) and np.array_equal(down_pattern, base)):
                skipped += 1
                continue
            numeric = (up - down) / (2.0 * eps)
            exact = float(analytic[idx])
            error = abs(numeric - exact) / max(abs(numeric), abs(exact), floor)
            checked += 1
            if error > worst:
                worst, worst_at = error, f"{name}{list(idx)}"
    return GradientCheck(max_rel_error=worst, checked=checked, skipped=skipped, worst=worst_at)


def random_model(rng: np.random.Generator, variant: str) -> Forecaster:
    """A small model of `variant` with every parameter moved off its init value."""
    dims = ModelDims(
        n_series=int(rng.integers(1, 4)),
        lookback=int(rng.integers(2, 7)),
        horizon=int(rng.integers(1, 4)),
    )
    seed = int(rng.integers(2**31))
    model: Forecaster
    if variant == "nlinear":
        model = init_nlinear(dims, seed)
    elif variant == "dlinear":
        model = init_dlinear(dims, seed, moving_avg=int(rng.integers(1, 6)))
    else:
        hidden = HIDDEN_CHOICES[rng.integers(len(HIDDEN_CHOICES))]
        kernels = KERNEL_CHOICES[rng.integers(len(KERNEL_CHOICES))]
        model = init_model(variant, dims, hidden=hidden, kernels=kernels, seed=seed)
    for name, p in model.params.items():
        if name.endswith("alpha"):
            p[...] = rng.uniform(0.5, 1.5, p.shape) * rng.choice([-1.0, 1.0], p.shape)
        elif name.endswith(("beta", "bias", ".b")):
            p[...] = rng.normal(0.0, 0.3, p.shape)
    return model


def _random_batch(
    rng: np.random.Generator, dims: ModelDims, batch: int = 4
) -> tuple[np.ndarray, np.ndarray]:
    X = rng.normal(0.0, 1.0, (batch, dims.n_series, dims.lookback))
    Y = rng.normal(0.0, 1.0, (batch, dims.n_series, dims.horizon))
    return X, Y


def check_parameter_counts() -> CheckResult:
    cases: list[tuple[str, Callable[[], Forecaster], int]] = [
        ("V K=21", lambda: init_model("v", ModelDims(21, 24, 6)), 63672),
        ("C K=21", lambda: init_model("c", ModelDims(21, 24, 6), hidden=(32,)), 112560),
        ("V K=7", lambda: init_model("v", ModelDims(7, 24, 6)), 7112),
        ("C K=7", lambda: init_model("c", ModelDims(7, 24, 6), hidden=(32,)), 23408),
        ("D K=7", lambda: init_model("d", ModelDims(7, 24, 6), kernels=(10, 4, 1)), 3 * 23408),
    ]
    for t in (6, 12, 18, 24):
        cases.append(
            (f"NLinear T={t}", lambda t=t: init_nlinear(ModelDims(7, 24, t)), 24 * t + t)
        )
        cases.append(
            (f"DLinear T={t}", lambda t=t: init_dlinear(ModelDims(7, 24, t)), 2 * (24 * t + t))
        )
    wrong = []
    for label, build, expected in cases:
        actual = parameter_count(build())
        if actual != expected:
            wrong.append(f"{label}: expected {expected}, got {actual}")
    if wrong:
        return CheckResult("parameter counts", False, "; ".join(wrong))
    return CheckResult("parameter counts", True, f"{len(cases)} configurations")


def check_gradients(
    rng: np.random.Generator, n_configs: int = 100, max_entries: int | None = 8
) -> CheckResult:
    worst = 0.0
    worst_at = ""
    checked = skipped = 0
    failures = []
    for i in range(n_configs):
        variant = VARIANTS[i % len(VARIANTS)]
        model = random_model(rng, variant)
        X, Y = _random_batch(rng, model.dims)
        result = gradient_check(model, X, Y, max_entries=max_entries, rng=rng)
        checked += result.checked
        skipped += result.skipped
        if result.max_rel_error > worst:
            worst, worst_at = result.max_rel_error, f"{variant} {result.worst}"
        if not result.passed:
            failures.append(
                f"config {i} ({variant}): {result.max_rel_error:.2e} at {result.worst}"
            )
    detail = f"max rel err {worst:.2e} ({worst_at}); {checked} entries, {skipped} at kinks"
    if failures:
        detail = "; ".join(failures[:3]) + f"; {detail}"
    return CheckResult("gradients", not failures, detail)


def _random_stack(rng: np.random.Generator, n_points: int) -> MappingStack:
    depth = int(rng.integers(1, 4))
    widths = [1, *(int(w) for w in rng.integers(1, 6, depth)), 1]
    return MappingStack(
        weights=[rng.normal(0.0, 1.0, (n_points, a, b)) for a, b in zip(widths[:-1], widths[1:])],
        biases=[rng.normal(0.0, 0.5, (n_points, b)) for b in widths[1:]],
    )


def check_map_points(rng: np.random.Generator, n_shapes: int = 50) -> CheckResult:
    for i in range(n_shapes):
        shape = (int(rng.integers(1, 9)), int(rng.integers(1, 5)), int(rng.integers(1, 9)))
        X = rng.normal(0.0, 1.0, shape)
        stack = _random_stack(rng, shape[1] * shape[2])
        if not np.array_equal(map_points(X, stack), map_points_loop(X, stack)):
            return CheckResult("map_points vs loop", False, f"shape {i} {shape} differs")
    return CheckResult("map_points vs loop", True, f"{n_shapes} shapes, bit-identical")


def check_identity_construction() -> CheckResult:
    """Unit-weight, zero-bias h must be identity on positives and leak on negatives."""
    ones = np.ones((2, 1, 1))
    stack = MappingStack(
        weights=[ones, ones.copy()], biases=[np.zeros((2, 1)), np.zeros((2, 1))],
        slope=LEAKY_SLOPE,
    )
    out = map_points(np.array([[[2.0, -1.0]]]), stack)
    if not (out[0, 0, 0] == 2.0 and np.isclose(out[0, 0, 1], -0.01, rtol=0, atol=1e-15)):
        return CheckResult(
            "identity construction", False, f"h(2), h(-1) = {out[0, 0, 0]}, {out[0, 0, 1]}"
        )
    layer = OutputLayer(w=np.array([[1.0, -2.0], [0.5, 3.0]]), b=np.array([0.1, 0.2]))
    positive = np.array([[[0.3, 1.7]]])
    sub = Submodel(norm=NormParams.identity(1), layer=layer, stack=stack)
    if not np.array_equal(forward_c(positive, sub), forward_v(positive, layer)):
        return CheckResult("identity construction", False, "forward_c != forward_v on positives")
    return CheckResult("identity construction", True, f"slope {LEAKY_SLOPE}")


def check_decomposition(rng: np.random.Generator, n_inputs: int = 50) -> CheckResult:
    worst = 0.0
    for kernels in ((10, 4, 1), (5, 2, 1)):
        for padding in ("replicate", "zero"):
            spec = DecompSpec(kernels=kernels, padding=padding)
            for _ in range(n_inputs):
                shape = tuple(int(rng.integers(1, hi)) for hi in (5, 4, 30))
                X = rng.normal(0.0, 3.0, shape)
                worst = max(worst, float(np.max(np.abs(sum(decompose(X, spec)) - X))))
    return CheckResult("decomposition identity", worst <= 1e-12, f"max abs err {worst:.1e}")


def check_normalization(rng: np.random.Generator, n_inputs: int = 50) -> CheckResult:
    worst = 0.0
    for _ in range(n_inputs):
        K = int(rng.integers(1, 5))
        X = rng.normal(rng.normal(0, 10), rng.uniform(0.1, 5), (3, K, int(rng.integers(2, 30))))
        p = NormParams(
            alpha=rng.uniform(0.1, 2.0, K) * rng.choice([-1.0, 1.0], K),
            beta=rng.normal(0.0, 1.0, K),
        )
        X_tilde, stats = instance_normalize(X, p)
        back = instance_denormalize(X_tilde, p, stats)
        worst = max(worst, float(np.max(np.abs(back - X)) / np.max(np.abs(X))))
    return CheckResult("normalization round trip", worst <= 1e-9, f"max rel err {worst:.1e}")


def check_faithfulness(rng: np.random.Generator, n_draws: int = 50) -> CheckResult:
    worst = 0.0
    for i in range(n_draws):
        model = random_model(rng, ("v", "c", "d")[i % 3])
        assert isinstance(model, NfclModel)
        dims = model.dims
        x = rng.normal(0.0, 1.0, (dims.n_series, dims.lookback))
        k, t = int(rng.integers(dims.n_series)), int(rng.integers(dims.horizon))
        worst = max(worst, faithfulness_gap(model, x, contribution(model, x, k, t)))
    return CheckResult("contribution faithfulness", worst <= 1e-9, f"max rel gap {worst:.1e}")


def check_metric_oracles() -> CheckResult:
    cases = [
        ("MAE", mae(np.array([1.0, 2.0]), np.array([2.0, 4.0])), 1.5),
        ("MSE", mse(np.array([1.0, 2.0]), np.array([2.0, 4.0])), 2.5),
        ("SMAPE", smape(np.array([1.0]), np.array([0.0])), 100.0),
        ("SMAPE", smape(np.array([-1.0]), np.array([1.0])), 100.0),
        ("R2", r2(np.array([1.0, 2.0, 3.0]), np.array([1.0, 2.0, 2.0])), 0.5),
    ]
    wrong = [f"{label}: expected {expected}, got {actual}"
             for label, actual, expected in cases if actual != expected]
    return CheckResult("metric oracles", not wrong, "; ".join(wrong) or "MAE, MSE, SMAPE, R2")


def run_checks(
    seed: int = 0, gradient_configs: int = 100, max_entries: int | None = 8
) -> list[CheckResult]:
    """Run the whole battery; a check that raises counts as failed."""
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, Callable[[], CheckResult]]] = [
        ("parameter counts", check_parameter_counts),
        ("gradients", lambda: check_gradients(rng, gradient_configs, max_entries)),
        ("map_points vs loop", lambda: check_map_points(rng)),
        ("identity construction", check_identity_construction),
        ("decomposition identity", lambda: check_decomposition(rng)),
        ("normalization round trip", lambda: check_normalization(rng)),
        ("contribution faithfulness", lambda: check_faithfulness(rng)),
        ("metric oracles", check_metric_oracles),
    ]
    results = []
    for name, check in checks:
        started = time.perf_counter()
        try:
            result = check()
        except (ModelError, InterpretError, MetricError, ValueError) as exc:
            result = CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")
        logger.info("%s: %s in %.2fs", name, "ok" if result.passed else "FAIL",
                    time.perf_counter() - started)
        results.append(result)
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [
        f"  {r.name:<{width}}  {'ok' if r.passed else 'FAIL':<4}  {r.detail}" for r in results
    ]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines)

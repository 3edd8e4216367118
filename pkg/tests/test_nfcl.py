"""Tests for nfcl_forecast.nfcl."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from nfcl_forecast.nfcl import (
    ALPHA_FLOOR,
    LEAKY_SLOPE,
    DecompSpec,
    DivergenceError,
    MappingStack,
    ModelDims,
    ModelError,
    NormParams,
    NormStats,
    OutputLayer,
    Submodel,
    Variant,
    activation_pattern,
    backward,
    decompose,
    forward,
    forward_c,
    forward_d,
    forward_v,
    init_model,
    instance_denormalize,
    instance_normalize,
    map_points,
    map_points_loop,
    normalized_forecast,
    parameter_count,
    standardize,
)
from nfcl_forecast.verify import gradient_check


def _identity_stack(n_points, slope=LEAKY_SLOPE):
    ones = np.ones((n_points, 1, 1))
    zeros = np.zeros((n_points, 1))
    return MappingStack(weights=[ones, ones.copy()], biases=[zeros, zeros.copy()], slope=slope)


def _randomize(model, rng):
    for name, p in model.params.items():
        if name.endswith("alpha"):
            p[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(("beta", "bias", ".b")):
            p[...] = rng.normal(0.0, 0.3, p.shape)
    return model


class TestInitModel:
    def test_same_seed_bit_identical(self):
        dims = ModelDims(1, 2, 1)
        a = init_model("v", dims, seed=7)
        b = init_model("v", dims, seed=7)
        assert a.params.keys() == b.params.keys()
        for name in a.params:
            assert_array_equal(a.params[name], b.params[name])

    def test_different_seeds_differ(self, small_dims):
        a = init_model("c", small_dims, seed=1)
        b = init_model("c", small_dims, seed=2)
        assert not np.array_equal(a.params["out.w"], b.params["out.w"])

    def test_initial_values(self, small_dims):
        model = init_model("c", small_dims, hidden=(4,))
        assert_array_equal(model.params["norm.alpha"], np.ones(2))
        assert_array_equal(model.params["norm.beta"], np.zeros(2))
        assert_array_equal(model.params["out.b"], np.zeros(6))
        assert np.all(np.abs(model.params["out.w"]) <= 1 / np.sqrt(10))
        assert np.all(np.abs(model.params["map.1.weight"]) <= 1 / np.sqrt(4))
        assert model.params["map.0.weight"].shape == (10, 1, 4)

    def test_c_needs_hidden(self, small_dims):
        with pytest.raises(ModelError, match="needs positive hidden widths"):
            init_model("c", small_dims, hidden=[])

    def test_kernels_must_decrease(self, small_dims):
        with pytest.raises(ModelError, match="strictly decreasing"):
            init_model("d", small_dims, kernels=[4, 10, 1])

    def test_last_kernel_is_one(self, small_dims):
        with pytest.raises(ModelError, match="last kernel must be 1"):
            init_model("d", small_dims, kernels=[4, 2])

    def test_unknown_variant(self, small_dims):
        with pytest.raises(ModelError, match="unknown NFCL variant"):
            init_model("x", small_dims)

    def test_invalid_dims(self):
        with pytest.raises(ModelError, match="dims must be >= 1"):
            ModelDims(0, 24, 6)

    def test_d_submodel_prefixes(self, small_dims):
        model = init_model("d", small_dims, hidden=(2,), kernels=(4, 2, 1))
        assert model.prefixes == ["sub0.", "sub1.", "sub2."]
        assert "sub2.map.1.bias" in model.params


class TestParameterCount:
    @pytest.mark.parametrize(
        ("variant", "n_series", "expected"),
        [("v", 21, 63672), ("c", 21, 112560), ("v", 7, 7112), ("c", 7, 23408)],
    )
    def test_known_counts(self, variant, n_series, expected):
        model = init_model(variant, ModelDims(n_series, 24, 6), hidden=(32,))
        assert parameter_count(model) == expected

    def test_d_is_three_c(self):
        dims = ModelDims(7, 24, 6)
        d = init_model("d", dims, kernels=(10, 4, 1))
        c = init_model("c", dims)
        assert parameter_count(d) == 3 * parameter_count(c)


class TestInstanceNormalize:
    def test_hand_values(self):
        X = np.array([[[1.0, 2.0, 3.0]]])
        X_tilde, stats = instance_normalize(X, NormParams.identity(1))
        assert_allclose(X_tilde[0, 0], [-1.2247, 0.0, 1.2247], atol=1e-4)
        assert_allclose(stats.mean, [[2.0]])

    def test_constant_row(self):
        X_tilde, stats = instance_normalize(np.full((1, 1, 4), 3.0), NormParams.identity(1))
        assert_array_equal(X_tilde, 0.0)
        assert stats.std[0, 0] == 1e-5

    def test_affine(self):
        X = np.array([[[-1.0, 1.0]]])
        p = NormParams(alpha=np.array([2.0]), beta=np.array([1.0]))
        X_tilde, _ = instance_normalize(X, p)
        assert_allclose(X_tilde[0, 0], [-1.0, 3.0])

    def test_round_trip(self, rng):
        X = rng.normal(4.0, 3.0, (5, 3, 12))
        p = NormParams(alpha=np.array([0.5, -2.0, 0.25]), beta=np.array([0.1, 0.0, -4.0]))
        X_tilde, stats = instance_normalize(X, p)
        assert_allclose(instance_denormalize(X_tilde, p, stats), X, rtol=1e-9, atol=1e-12)

    def test_beta_maps_to_mean(self):
        p = NormParams(alpha=np.array([1.5]), beta=np.array([0.2]))
        stats = NormStats(mean=np.array([[3.0]]), std=np.array([[2.0]]))
        assert_allclose(instance_denormalize(np.array([[[0.2]]]), p, stats), [[[3.0]]])
        assert_allclose(instance_denormalize(np.array([[[1.7]]]), p, stats), [[[5.0]]])

    def test_zero_alpha_not_invertible(self):
        p = NormParams(alpha=np.array([0.0]), beta=np.array([0.0]))
        stats = NormStats(mean=np.zeros((1, 1)), std=np.ones((1, 1)))
        with pytest.raises(ModelError, match="not invertible"):
            instance_denormalize(np.zeros((1, 1, 2)), p, stats)


class TestForwardV:
    def test_direct_sum(self):
        layer = OutputLayer(w=np.array([[1.0], [1.0]]), b=np.zeros(1))
        assert_allclose(forward_v(np.array([[[2.0, 3.0]]]), layer), [[[5.0]]])

    def test_zero_weights_give_bias(self, rng):
        layer = OutputLayer(w=np.zeros((6, 4)), b=np.arange(4.0))
        out = forward_v(rng.normal(size=(3, 2, 3)), layer)
        assert_array_equal(out, np.broadcast_to(np.arange(4.0).reshape(2, 2), (3, 2, 2)))

    def test_series_major_columns(self):
        layer = OutputLayer(w=np.array([[1.0, 2.0], [1.0, 0.0]]), b=np.array([0.5, 0.0]))
        out = forward_v(np.array([[[1.0], [-1.0]]]), layer)
        assert_allclose(out[0, :, 0], [0.5, 2.0])

    def test_shape_mismatch(self):
        layer = OutputLayer(w=np.zeros((4, 2)), b=np.zeros(2))
        with pytest.raises(ModelError, match="does not fit"):
            forward_v(np.zeros((1, 1, 3)), layer)


class TestMapPoints:
    def test_identity_on_positive(self):
        out = map_points(np.array([[[2.0]]]), _identity_stack(1))
        assert out[0, 0, 0] == 2.0

    def test_leaks_on_negative(self):
        out = map_points(np.array([[[-1.0]]]), _identity_stack(1))
        assert out[0, 0, 0] == pytest.approx(-0.01, abs=1e-15)

    def test_grouped_matches_loop(self, rng):
        X = rng.normal(size=(8, 3, 5))
        stack = MappingStack(
            weights=[rng.normal(size=(15, 1, 4)), rng.normal(size=(15, 4, 3)),
                     rng.normal(size=(15, 3, 1))],
            biases=[rng.normal(size=(15, 4)), rng.normal(size=(15, 3)), rng.normal(size=(15, 1))],
        )
        assert_array_equal(map_points(X, stack), map_points_loop(X, stack))

    def test_per_point_locality(self, rng):
        model = init_model("c", ModelDims(3, 4, 2), hidden=(5,), seed=3)
        stack = model.submodels()[0].stack
        X = rng.normal(size=(2, 3, 4))
        bumped = X.copy()
        bumped[1, 2, 1] += 0.5
        diff = map_points(bumped, stack) != map_points(X, stack)
        expected = np.zeros_like(diff)
        expected[1, 2, 1] = True
        assert_array_equal(diff, expected)

    def test_wrong_point_count(self):
        with pytest.raises(ModelError, match="mapping stack has 3 points"):
            map_points(np.zeros((1, 2, 2)), _identity_stack(3))


class TestForwardC:
    def test_identity_h_reduces_to_v(self, rng):
        layer = OutputLayer(w=rng.normal(size=(6, 4)), b=rng.normal(size=4))
        sub = Submodel(norm=NormParams.identity(2), layer=layer, stack=_identity_stack(6))
        X = rng.uniform(0.1, 2.0, (3, 2, 3))
        assert_array_equal(forward_c(X, sub), forward_v(X, layer))

    def test_zero_output_weights(self, rng, small_dims):
        model = init_model("c", small_dims, hidden=(3,))
        model.params["out.w"][...] = 0.0
        model.params["out.b"][...] = np.arange(6.0)
        out = forward_c(rng.normal(size=(2, 2, 5)), model)
        assert_array_equal(out, np.broadcast_to(np.arange(6.0).reshape(2, 3), (2, 2, 3)))

    def test_matches_scalar_oracle(self, rng):
        dims = ModelDims(2, 3, 2)
        model = _randomize(init_model("c", dims, hidden=(3, 2), seed=5), rng)
        p = model.params
        X = rng.normal(size=(2, 2, 3))

        def h(point, x):
            a = np.array([x])
            for n in range(3):
                a = a @ p[f"map.{n}.weight"][point] + p[f"map.{n}.bias"][point]
                if n < 2:
                    a = np.where(a > 0, a, LEAKY_SLOPE * a)
            return a[0]

        expected = np.zeros((2, 2, 2))
        for b in range(2):
            for k in range(2):
                for t in range(2):
                    total = p["out.b"][k * 2 + t]
                    for i in range(2):
                        for j in range(3):
                            total += h(i * 3 + j, X[b, i, j]) * p["out.w"][i * 3 + j, k * 2 + t]
                    expected[b, k, t] = total
        assert_allclose(forward_c(X, model), expected, rtol=0, atol=1e-12)

    def test_rejects_v_model(self, small_dims):
        with pytest.raises(ModelError, match="expected a c model"):
            forward_c(np.zeros((1, 2, 5)), init_model("v", small_dims))


class TestDecompose:
    def test_constant_series(self):
        parts = decompose(np.full((1, 1, 4), 5.0), DecompSpec(kernels=(2, 1)))
        assert_array_equal(parts[0], np.full((1, 1, 4), 5.0))
        assert_array_equal(parts[1], np.zeros((1, 1, 4)))

    def test_hand_execution(self):
        parts = decompose(np.array([[[1.0, 2.0, 3.0, 4.0]]]), DecompSpec(kernels=(2, 1)))
        assert_allclose(parts[0][0, 0], [1.0, 1.5, 2.5, 3.5])
        assert_allclose(parts[1][0, 0], [0.0, 0.5, 0.5, 0.5])

    def test_zero_padding(self):
        parts = decompose(np.array([[[2.0, 4.0]]]), DecompSpec(kernels=(2, 1), padding="zero"))
        assert_allclose(parts[0][0, 0], [1.0, 3.0])

    @pytest.mark.parametrize("kernels", [(10, 4, 1), (5, 2, 1)])
    def test_components_sum_to_input(self, rng, kernels):
        X = rng.normal(0.0, 5.0, (4, 3, 17))
        parts = decompose(X, DecompSpec(kernels=kernels))
        assert len(parts) == 3
        assert np.max(np.abs(sum(parts) - X)) <= 1e-12

    def test_bad_padding(self):
        with pytest.raises(ModelError, match="padding must be one of"):
            DecompSpec(padding="reflect")


class TestForwardD:
    def test_single_kernel_matches_c(self, rng, small_dims):
        c = _randomize(init_model("c", small_dims, hidden=(3,), seed=2), rng)
        d = init_model("d", small_dims, hidden=(3,), kernels=(1,), seed=9)
        for name, value in c.params.items():
            d.params["sub0." + name][...] = value
        X = rng.normal(size=(4, 2, 5))
        assert_array_equal(forward(X, d), forward(X, c))

    def test_zero_submodels(self, rng, small_dims):
        model = init_model("d", small_dims, hidden=(2,), kernels=(3, 1))
        for name, p in model.params.items():
            if ".out." in f".{name}":
                p[...] = 0.0
        Z, _ = standardize(rng.normal(size=(2, 2, 5)))
        assert_array_equal(forward_d(Z, model), 0.0)

    def test_matches_manual_replay(self, rng, small_dims):
        model = _randomize(init_model("d", small_dims, hidden=(3,), kernels=(4, 2, 1)), rng)
        X = rng.normal(size=(3, 2, 5))
        Z, stats = standardize(X)
        total = 0.0
        for component, sub in zip(decompose(Z, model.decomp), model.submodels()):
            alpha = sub.norm.alpha[None, :, None]
            beta = sub.norm.beta[None, :, None]
            y = forward_c(alpha * component + beta, sub)
            total = total + (y - beta) / alpha
        expected = total * stats.std[:, :, None] + stats.mean[:, :, None]
        assert_allclose(forward(X, model), expected, rtol=0, atol=1e-12)
        assert_allclose(forward_d(Z, model), normalized_forecast(X, model), atol=1e-12)


class TestForward:
    def test_zero_w_closed_form(self, rng, small_dims):
        model = _randomize(init_model("v", small_dims), rng)
        model.params["out.w"][...] = 0.0
        X = rng.normal(size=(2, 2, 5))
        _, stats = standardize(X)
        b = model.params["out.b"].reshape(2, 3)
        alpha = model.params["norm.alpha"][:, None]
        beta = model.params["norm.beta"][:, None]
        expected = ((b - beta) / alpha)[None] * stats.std[:, :, None] + stats.mean[:, :, None]
        assert_allclose(forward(X, model), expected, rtol=1e-12)

    def test_manual_composition(self, rng, small_dims):
        model = _randomize(init_model("c", small_dims, hidden=(4,)), rng)
        X = rng.normal(size=(3, 2, 5))
        sub = model.submodels()[0]
        X_tilde, stats = instance_normalize(X, sub.norm)
        expected = instance_denormalize(forward_c(X_tilde, model), sub.norm, stats)
        assert_allclose(forward(X, model), expected, rtol=1e-12)

    def test_constant_window_gives_its_mean(self, rng, small_dims):
        model = init_model("v", small_dims, seed=4)
        X = np.stack([np.full((2, 5), 3.0), np.full((2, 5), -1.5)])
        out = forward(X, model)
        assert_array_equal(out[0], 3.0)
        assert_array_equal(out[1], -1.5)

    def test_wrong_shape(self, small_dims):
        with pytest.raises(ModelError, match=r"expected windows of shape \(B, 2, 5\)"):
            forward(np.zeros((1, 2, 4)), init_model("v", small_dims))


class TestBackward:
    def test_optimum_has_zero_gradient(self, rng, small_dims):
        model = _randomize(init_model("v", small_dims), rng)
        model.params["out.w"][...] = 0.0
        X = rng.normal(size=(3, 2, 5))
        grads, loss = backward(X, forward(X, model), model)
        assert loss == 0.0
        for grad in grads.values():
            assert_array_equal(grad, 0.0)

    def test_gradient_linear_in_residual(self, rng, small_dims):
        model = _randomize(init_model("c", small_dims, hidden=(3,)), rng)
        X = rng.normal(size=(3, 2, 5))
        Y = rng.normal(size=(3, 2, 3))
        pred = forward(X, model)
        grads, loss = backward(X, Y, model)
        doubled, loss2 = backward(X, pred - 2.0 * (pred - Y), model)
        assert loss2 == pytest.approx(4.0 * loss, rel=1e-12)
        assert_allclose(doubled["out.w"], 2.0 * grads["out.w"], rtol=1e-9, atol=1e-15)

    @pytest.mark.parametrize("variant", ["v", "c", "d"])
    def test_matches_finite_differences(self, rng, variant):
        model = _randomize(
            init_model(variant, ModelDims(2, 4, 2), hidden=(3, 2), kernels=(3, 1), seed=11), rng
        )
        X = rng.normal(size=(3, 2, 4))
        Y = rng.normal(size=(3, 2, 2))
        result = gradient_check(model, X, Y)
        assert result.checked > 0
        assert result.max_rel_error <= 1e-4

    def test_covers_every_parameter(self, rng, small_dims):
        model = init_model("d", small_dims, hidden=(2,), kernels=(2, 1))
        grads, _ = backward(rng.normal(size=(2, 2, 5)), rng.normal(size=(2, 2, 3)), model)
        assert grads.keys() == model.params.keys()
        for name in grads:
            assert grads[name].shape == model.params[name].shape

    def test_non_finite_loss(self, small_dims):
        model = init_model("v", small_dims)
        Y = np.full((1, 2, 3), np.inf)
        with pytest.raises(DivergenceError, match="not finite"):
            backward(np.ones((1, 2, 5)), Y, model)

    def test_target_shape_checked(self, small_dims):
        with pytest.raises(ModelError, match="expected targets of shape"):
            backward(np.ones((1, 2, 5)), np.ones((1, 2, 4)), init_model("v", small_dims))


class TestConstrain:
    def test_alpha_kept_off_zero(self, small_dims):
        model = init_model("v", small_dims)
        model.params["norm.alpha"][...] = [1e-12, -1e-12]
        model.constrain()
        assert_array_equal(model.params["norm.alpha"], [ALPHA_FLOOR, -ALPHA_FLOOR])

    def test_large_alpha_untouched(self, small_dims):
        model = init_model("c", small_dims)
        model.params["norm.alpha"][...] = [0.5, -3.0]
        model.constrain()
        assert_array_equal(model.params["norm.alpha"], [0.5, -3.0])


class TestActivationPattern:
    def test_empty_for_v(self, small_dims):
        model = init_model("v", small_dims)
        assert activation_pattern(np.ones((1, 2, 5)), model).size == 0

    def test_one_sign_per_hidden_unit(self, rng, small_dims):
        model = init_model("d", small_dims, hidden=(3, 2), kernels=(2, 1))
        pattern = activation_pattern(rng.normal(size=(4, 2, 5)), model)
        assert pattern.dtype == bool
        assert pattern.size == 2 * 4 * 10 * (3 + 2)

    def test_variant_values(self):
        assert Variant("d") is Variant.D
        assert str(Variant.C) == "c"

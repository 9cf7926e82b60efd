"""Tests for the eight attribution methods and the EXPL file format"""

import json
import struct

import numpy as np
import pytest
from pydantic import ValidationError

import attribution as attr
from autodiff import GradientRequest, input_gradient
from errors import (
    InvalidTargetError,
    ModelFormatError,
    NumericalDegeneracyError,
    ShapeError,
    UnsupportedNodeError,
)
from netgraph import INPUT_ID, ModelGraph, fold_batchnorm, forward, make_node
from oracles import kink_free_input, random_net
from tests.helpers import constant_model, conv_bn_model, linear_model, two_layer_model

X = np.array([3.0, 4.0])
TARGET = ("out", 0)


def scaled_final_layer(model: ModelGraph, c: float) -> ModelGraph:
    node = model.node("logits")
    return model.with_weights(
        {"logits.weight": node.weights["weight"] * c, "logits.bias": node.weights["bias"] * c}
    )


def random_case(seed, bias=True, **kw):
    rng = np.random.default_rng(seed)
    while True:
        model = random_net(rng, bias=bias, **kw)
        x = kink_free_input(model, rng)
        target = attr.resolve_target(model, x)
        if abs(forward(model, x)[target[0]][target[1]]) > 1e-3:
            return model, x


class TestGradientFamily:
    """Test saliency, gradient x input and guided backpropagation"""

    def test_saliency_linear(self):
        """Test linear model w=[2,-1] -> [2,-1]"""
        emap = attr.saliency(linear_model(), X, TARGET)
        np.testing.assert_array_equal(emap.raw, [2.0, -1.0])
        assert emap.method == "saliency"
        assert emap.target == TARGET

    def test_saliency_constant_model(self):
        """Test that a constant model gives a zero map"""
        np.testing.assert_array_equal(attr.saliency(constant_model(), X).raw, [0.0, 0.0])

    def test_saliency_is_plain_gradient(self):
        """Test bit-exact agreement with the autodiff gradient"""
        model, x = random_case(0)
        emap = attr.saliency(model, x, ("logits", 1))
        grad = input_gradient(GradientRequest(model, x, ("logits", 1)))
        assert np.array_equal(emap.raw, grad)

    def test_default_target_is_max_prelogit(self):
        """Test that the default target is the maximal pre-softmax neuron"""
        model, x = random_case(1)
        emap = attr.saliency(model, x)
        assert emap.target == ("logits", int(np.argmax(forward(model, x)["logits"])))

    def test_gi_linear(self):
        """Test linear model, x=[3,4] -> [6,-4]"""
        np.testing.assert_array_equal(attr.gradient_times_input(linear_model(), X).raw, [6.0, -4.0])

    def test_gi_zero_input(self):
        """Test that x = 0 gives a zero map"""
        model, _ = random_case(2)
        raw = attr.gradient_times_input(model, np.zeros(model.input_shape)).raw
        assert not raw.any()

    def test_gbp_hand_trace(self):
        """Test the 2x2 hand-traced net: GBP [1,0] vs saliency [1,-1]"""
        model = two_layer_model(np.eye(2), [[1.0, -1.0]])
        x = np.array([2.0, 1.0])
        np.testing.assert_array_equal(attr.guided_backprop(model, x, TARGET).raw, [1.0, 0.0])
        np.testing.assert_array_equal(attr.saliency(model, x, TARGET).raw, [1.0, -1.0])

    def test_gbp_without_relu(self):
        """Test that GBP equals saliency on a ReLU-free model"""
        model = linear_model(w=(0.3, -0.7))
        assert np.array_equal(attr.guided_backprop(model, X).raw, attr.saliency(model, X).raw)

    def test_gbp_constant_model(self):
        """Test that a constant model gives a zero GBP map"""
        assert not attr.guided_backprop(constant_model(), X).raw.any()

    def test_invalid_target(self):
        """Test that an out-of-range neuron is rejected"""
        with pytest.raises(InvalidTargetError):
            attr.saliency(linear_model(), X, ("out", 3))


class TestSmoothGrad:
    """Test noise-averaged saliency"""

    def test_sigma_zero_is_saliency(self):
        """Test that sigma = 0 reproduces saliency bit-exactly for any N"""
        model, x = random_case(3)
        sal = attr.saliency(model, x).raw
        for n in (1, 7):
            params = attr.SmoothGradParams(n_samples=n, sigma=0.0)
            assert np.array_equal(attr.smoothgrad(model, x, None, params).raw, sal)

    def test_linear_model_any_sigma(self):
        """Test that a constant gradient is unchanged by noise"""
        params = attr.SmoothGradParams(n_samples=5, sigma=2.0, seed=3)
        np.testing.assert_allclose(attr.smoothgrad(linear_model(), X, TARGET, params).raw, [2.0, -1.0])

    def test_recomputed_mean(self):
        """Test a seeded N=8 run against independently recomputed samples"""
        model, x = random_case(4)
        target = attr.resolve_target(model, x)
        params = attr.SmoothGradParams(n_samples=8, sigma=0.2, seed=11)
        got = attr.smoothgrad(model, x, target, params).raw
        total = np.zeros_like(x)
        for noisy in attr.noisy_inputs(x, 0.2, 8, 11):
            total = total + attr.saliency(model, noisy, target).raw
        assert np.array_equal(got, total / 8)

    def test_deterministic(self):
        """Test that equal seeds give equal maps and other seeds differ"""
        model, x = random_case(5)
        a = attr.smoothgrad(model, x, None, attr.SmoothGradParams(n_samples=4, seed=1))
        b = attr.smoothgrad(model, x, None, attr.SmoothGradParams(n_samples=4, seed=1))
        c = attr.smoothgrad(model, x, None, attr.SmoothGradParams(n_samples=4, seed=2))
        assert np.array_equal(a.raw, b.raw)
        assert not np.array_equal(a.raw, c.raw)

    def test_default_sigma_recorded(self):
        """Test that the default sigma is 0.15 x input range"""
        x = np.array([0.0, 2.0])
        emap = attr.smoothgrad(linear_model(), x, TARGET, attr.SmoothGradParams(n_samples=2))
        assert emap.params["sigma"] == pytest.approx(0.3)

    def test_negative_sigma(self):
        """Test that sigma < 0 is a parameter error"""
        with pytest.raises(ValidationError):
            attr.SmoothGradParams(sigma=-0.1)


class TestIntegratedGradients:
    """Test path-integrated gradients"""

    def test_linear_any_steps(self):
        """Test linear model, black baseline: [6,-4] with sum 2 for any m"""
        for steps in (1, 7, 300):
            params = attr.IntegratedGradientsParams(steps=steps)
            raw = attr.integrated_gradients(linear_model(), X, TARGET, params).raw
            np.testing.assert_allclose(raw, [6.0, -4.0], rtol=1e-12)
            assert raw.sum() == pytest.approx(2.0)

    def test_input_equals_baseline(self):
        """Test that x == baseline gives a zero map"""
        model, _ = random_case(6)
        params = attr.IntegratedGradientsParams(steps=5, baseline="white")
        raw = attr.integrated_gradients(model, np.ones(model.input_shape), None, params).raw
        assert not raw.any()

    @pytest.mark.slow
    def test_completeness_and_quadrature(self):
        """Test m=300 completeness < 1% and closeness to an m=30000 quadrature"""
        model, x = random_case(7)
        target = attr.resolve_target(model, x)
        f = lambda v: forward(model, v)[target[0]][target[1]]  # noqa: E731
        delta = f(x) - f(np.zeros_like(x))
        coarse = attr.integrated_gradients(
            model, x, target, attr.IntegratedGradientsParams(steps=300)
        ).raw
        fine = attr.integrated_gradients(
            model, x, target, attr.IntegratedGradientsParams(steps=30000)
        ).raw
        assert abs(coarse.sum() - delta) / abs(delta) < 0.01
        assert np.max(np.abs(coarse - fine)) / np.max(np.abs(fine)) < 1e-3

    def test_explicit_baseline_shape(self):
        """Test that a baseline of the wrong shape is rejected"""
        params = attr.IntegratedGradientsParams(baseline=np.zeros(3))
        with pytest.raises(ShapeError):
            attr.integrated_gradients(linear_model(), X, TARGET, params)

    def test_explicit_baseline(self):
        """Test F(x) - F(baseline) for a tensor baseline on a linear model"""
        params = attr.IntegratedGradientsParams(steps=3, baseline=np.array([1.0, 1.0]))
        raw = attr.integrated_gradients(linear_model(), X, TARGET, params).raw
        np.testing.assert_allclose(raw, [4.0, -3.0])

    def test_zero_steps(self):
        """Test that steps must be at least 1"""
        with pytest.raises(ValidationError):
            attr.IntegratedGradientsParams(steps=0)


class TestLRP:
    """Test layer-wise relevance propagation"""

    def test_z_rule_one_dense(self):
        """Test z=[6,-4], sum 2 -> [6,-4]"""
        np.testing.assert_allclose(attr.lrp(linear_model(), X, TARGET, 0.0).raw, [6.0, -4.0])

    def test_epsilon_rule_one_dense(self):
        """Test eps=0.1 -> [6*2/2.1, -4*2/2.1]"""
        raw = attr.lrp(linear_model(), X, TARGET, 0.1).raw
        np.testing.assert_allclose(raw, [5.7142857, -3.8095238], atol=1e-6)

    def test_method_tags(self):
        """Test that epsilon selects the lrp-z or lrp-epsilon tag"""
        assert attr.lrp(linear_model(), X, TARGET, 0.0).method == "lrp-z"
        assert attr.lrp(linear_model(), X, TARGET, 0.5).method == "lrp-epsilon"

    def test_conservation_zero_bias(self):
        """Test sum of input relevance equals the target activation"""
        for seed in range(5):
            model, x = random_case(10 + seed, bias=False)
            target = attr.resolve_target(model, x)
            a = forward(model, x)[target[0]][target[1]]
            raw = attr.lrp(model, x, target, 0.0).raw
            assert abs(raw.sum() - a) / abs(a) < 1e-4

    def test_equals_gi_without_bias(self):
        """Test LRP-z == gradient x input on bias-free ReLU nets"""
        for seed in range(5):
            model, x = random_case(20 + seed, bias=False)
            lrp_z = attr.lrp(model, x, None, 0.0).raw
            gi = attr.gradient_times_input(model, x).raw
            np.testing.assert_allclose(lrp_z, gi, rtol=1e-5, atol=1e-5 * np.max(np.abs(gi)))

    def test_biased_counterexample(self):
        """Test that the identity fails once biases are non-zero"""
        model, x = random_case(30, bias=True)
        lrp_z = attr.lrp(model, x, None, 0.0).raw
        gi = attr.gradient_times_input(model, x).raw
        assert np.max(np.abs(lrp_z - gi)) / np.max(np.abs(gi)) > 1e-2

    def test_zero_denominator(self):
        """Test that a zero denominator carrying relevance names the node"""
        with pytest.raises(NumericalDegeneracyError) as exc_info:
            attr._stabilized_ratio(
                np.array([1.0, 0.0]), np.array([0.0, 2.0]), "fc3", 0.0, strict=True
            )
        assert exc_info.value.node_id == "fc3"

    def test_zero_denominator_without_relevance(self):
        """Test that zero denominators carrying zero relevance contribute zero"""
        raw = attr.lrp(linear_model(w=(1.0, -1.0)), np.zeros(2), TARGET, 0.0).raw
        np.testing.assert_array_equal(raw, [0.0, 0.0])

    def test_epsilon_sign_of_zero(self):
        """Test that the stabilizer treats sign(0) as +1"""
        ratio = attr._stabilized_ratio(
            np.array([1.0]), np.array([0.0]), "fc", 0.5, strict=True
        )
        np.testing.assert_array_equal(ratio, [2.0])

    def test_batchnorm_requires_folding(self):
        """Test that batch-norm is refused unless folded or treated as linear"""
        model = conv_bn_model(np.random.default_rng(0), dtype=np.float64)
        x = np.random.default_rng(1).uniform(size=(2, 4, 4))
        with pytest.raises(UnsupportedNodeError) as exc_info:
            attr.lrp(model, x, None, 0.01)
        assert "fold_batchnorm" in str(exc_info.value)
        attr.lrp(fold_batchnorm(model), x, None, 0.01)

    def test_batchnorm_linear_matches_folded(self):
        """Test that BN as a linear map redistributes like the folded net
        when biases are zero"""
        rng = np.random.default_rng(2)
        model = conv_bn_model(rng, dtype=np.float64)
        zero_bias = {
            "conv.bias": np.zeros(3),
            "bn.beta": np.zeros(3),
            "bn.running_mean": np.zeros(3),
            "fc.bias": np.zeros(3),
        }
        model = model.with_weights(zero_bias)
        x = rng.uniform(size=(2, 4, 4))
        linear = attr.lrp(model, x, None, 0.0, batchnorm="linear").raw
        folded = attr.lrp(fold_batchnorm(model), x, None, 0.0).raw
        np.testing.assert_allclose(linear, folded, rtol=1e-9, atol=1e-12)

    def test_ratios_invariant_to_final_scale(self):
        """Test scaling the last layer leaves relevance ratios unchanged"""
        model, x = random_case(40, bias=False)
        target = attr.resolve_target(model, x)
        raw = attr.lrp(model, x, target, 0.0).raw
        scaled = attr.lrp(scaled_final_layer(model, 3.0), x, target, 0.0).raw
        np.testing.assert_allclose(scaled / scaled.sum(), raw / raw.sum(), rtol=1e-9, atol=1e-12)

    def test_negative_epsilon(self):
        """Test that epsilon < 0 is rejected"""
        with pytest.raises(ValueError):
            attr.lrp(linear_model(), X, TARGET, -1.0)


class TestDeepTaylor:
    """Test deep Taylor decomposition"""

    def test_one_dense(self):
        """Test z+ = [6,0], R_out = 2 -> [2,0]"""
        np.testing.assert_allclose(attr.deep_taylor(linear_model(), X, TARGET).raw, [2.0, 0.0])

    def test_positive_weights_equal_lrp_z(self):
        """Test that z+ coincides with z when all weights are positive"""
        rng = np.random.default_rng(50)
        model = random_net(rng, bias=False, positive=True)
        x = kink_free_input(model, rng)
        np.testing.assert_allclose(
            attr.deep_taylor(model, x).raw, attr.lrp(model, x, None, 0.0).raw, rtol=1e-9
        )

    def test_negative_target_gives_zero(self):
        """Test that relevance starts at max(A_target, 0)"""
        model = linear_model(w=(-1.0, -1.0))
        assert not attr.deep_taylor(model, X, TARGET).raw.any()

    def test_hidden_relevance_non_negative(self):
        """Test non-negative hidden relevance and input sum within 5% of A_target"""
        for seed in range(5):
            model, x = random_case(60 + seed)
            target = attr.resolve_target(model, x)
            a = max(float(forward(model, x)[target[0]][target[1]]), 0.0)
            hidden = []

            def watch(node_id, parts):
                if node_id != "conv":
                    hidden.extend(float(p.min()) for p in parts)

            params = attr.DeepTaylorParams(input_low=0.0, input_high=1.0)
            raw = attr.deep_taylor(model, x, target, params, observer=watch).raw
            assert hidden and min(hidden) >= 0.0
            assert abs(raw.sum() - a) <= 0.05 * a + 1e-12

    def test_pixel_bounds_switch_input_rule(self):
        """Test z^B with [0,1] bounds against z+ without bounds on one dense neuron"""
        x = np.array([0.5, 0.5])
        bounded = attr.DeepTaylorParams(input_low=0.0, input_high=1.0)
        np.testing.assert_allclose(
            attr.deep_taylor(linear_model(), x, TARGET, bounded).raw, [1 / 3, 1 / 6]
        )
        np.testing.assert_allclose(attr.deep_taylor(linear_model(), x, TARGET).raw, [0.5, 0.0])

    def test_bounds_must_be_ordered(self):
        """Test that input_low < input_high is enforced"""
        with pytest.raises(ValidationError):
            attr.DeepTaylorParams(input_low=1.0, input_high=0.0)
        with pytest.raises(ValidationError):
            attr.DeepTaylorParams(input_low=0.0)


class TestProperties:
    """Test cross-method properties"""

    def test_homogeneity(self):
        """Test saliency, GI and IG scale by c with the final layer"""
        model, x = random_case(70)
        target = attr.resolve_target(model, x)
        scaled = scaled_final_layer(model, 2.0)
        params = attr.IntegratedGradientsParams(steps=20)
        pairs = [
            (attr.saliency(model, x, target), attr.saliency(scaled, x, target)),
            (attr.gradient_times_input(model, x, target), attr.gradient_times_input(scaled, x, target)),
            (
                attr.integrated_gradients(model, x, target, params),
                attr.integrated_gradients(scaled, x, target, params),
            ),
        ]
        for base, big in pairs:
            np.testing.assert_allclose(big.raw, 2.0 * base.raw, rtol=1e-12, atol=1e-15)

    def test_every_method_deterministic(self):
        """Test that rerunning each method gives identical maps"""
        model, x = random_case(71, bias=False)
        params = attr.MethodParams(smoothgrad=attr.SmoothGradParams(n_samples=3))
        params.integrated_gradients.steps = 10
        for method in attr.METHODS:
            a = attr.explain(method, model, x, None, params)
            b = attr.explain(method, model, x, None, params)
            assert np.array_equal(a.raw, b.raw), method
            assert a.method == method

    def test_unknown_method(self):
        """Test that an unknown method lists the valid names"""
        with pytest.raises(ValueError) as exc_info:
            attr.explain("occlusion", linear_model(), X)
        assert "lrp-epsilon" in str(exc_info.value)

    def test_reduced_map(self):
        """Test channel aggregation by sum of absolute values"""
        raw = np.array([[[1.0, -2.0]], [[-3.0, 0.5]]])
        emap = attr.ExplanationMap(raw=raw, method="gi", target=("fc", 0))
        np.testing.assert_array_equal(emap.reduced, [[4.0, 2.5]])


class TestExplanationFile:
    """Test the EXPL binary format"""

    def test_header_layout(self):
        """Test magic, version, dtype tag and extents"""
        emap = attr.ExplanationMap(
            raw=np.zeros((3, 2, 4), np.float32), method="saliency", target=("fc", 1)
        )
        blob = attr.save_explanation(emap)
        assert blob[:4] == b"EXPL"
        assert blob[4] == attr.EXPL_VERSION
        assert struct.unpack_from("<III", blob, 6) == (3, 2, 4)
        meta_len = struct.unpack_from("<I", blob, 18 + 4 * 24)[0]
        meta = json.loads(blob[18 + 4 * 24 + 4 :][:meta_len])
        assert meta["method"] == "saliency"
        assert meta["target"] == ["fc", 1]

    def test_round_trip_bytes(self):
        """Test save -> load -> save gives identical bytes"""
        model, x = random_case(80)
        emap = attr.explain("gi", model.astype(np.float32), x.astype(np.float32))
        blob = attr.save_explanation(emap)
        again = attr.load_explanation(blob)
        assert attr.save_explanation(again) == blob
        np.testing.assert_array_equal(again.raw, emap.raw)

    def test_vector_map_shape(self):
        """Test that a 1-D map is stored as 1 x 1 x n"""
        blob = attr.save_explanation(attr.saliency(linear_model(), X, TARGET))
        assert struct.unpack_from("<III", blob, 6) == (1, 1, 2)

    def test_bad_magic(self):
        """Test that a foreign file is rejected"""
        with pytest.raises(ModelFormatError):
            attr.load_explanation(b"PNG\x00" + bytes(20))


    def test_truncated_and_padded_files(self):
        """Test that cut or padded files fail with a format error"""
        blob = attr.save_explanation(attr.saliency(linear_model(), X, TARGET))
        for broken in (blob[:20], blob[:30], blob[:-1], blob + b"\x00"):
            with pytest.raises(ModelFormatError):
                attr.load_explanation(broken)

    def test_unreadable_metadata(self):
        """Test that metadata that is not JSON is a format error"""
        blob = attr.save_explanation(attr.saliency(linear_model(), X, TARGET))
        (meta_len,) = struct.unpack_from("<I", blob, 18 + 4 * 2)
        broken = blob[: len(blob) - meta_len] + b"{" * meta_len
        with pytest.raises(ModelFormatError) as exc_info:
            attr.load_explanation(broken)
        assert "metadata" in str(exc_info.value)


class TestUnsupportedNodes:
    """Test relevance rules on graphs they cannot handle"""

    def test_softmax_target_rejected(self):
        """Test that relevance cannot start from the softmax output"""
        nodes = (
            make_node("fc", "dense", [INPUT_ID], None, {"weight": np.eye(2), "bias": np.zeros(2)}),
            make_node("sm", "softmax", ["fc"]),
        )
        model = ModelGraph((2,), nodes, "sm", "fc")
        with pytest.raises(UnsupportedNodeError):
            attr.lrp(model, np.array([1.0, 2.0]), ("sm", 0), 0.01)

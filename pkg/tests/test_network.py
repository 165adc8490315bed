import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_net
from dtdaudit.exceptions import ClassIndexError, InputShapeError
from dtdaudit.experiment import random_network
from dtdaudit.network import (
    LayerSpec,
    Network,
    finite_difference_gradient,
    fingerprint,
    forward,
    gradient,
    hinge_margin,
    layer_jacobian,
    load_network,
    save_network,
)


class TestForward:
    def test_identity_relu_clamps(self, identity_net):
        trace = forward(identity_net, [2, -3])
        np.testing.assert_array_equal(trace.output, [2, 0])
        np.testing.assert_array_equal(trace.masks[0], [True, False])

    def test_single_affine_unit(self):
        net = make_net(([[1, 1]], [-1], "relu"))
        trace = forward(net, [1, 3])
        np.testing.assert_allclose(trace.pre_activations[0], [3.0])
        np.testing.assert_allclose(trace.output, [3.0])

    def test_softplus_at_zero(self):
        net = make_net(([[1]], [0], "softplus"))
        assert forward(net, [0.0]).output[0] == pytest.approx(np.log(2.0), abs=1e-15)

    def test_trace_invariants(self, random_relu, rng):
        net = random_relu()
        x = rng.standard_normal(10)
        trace = forward(net, x)
        np.testing.assert_array_equal(trace.inputs[0], x)
        for l, layer in enumerate(net.layers):
            z = layer.weights @ trace.inputs[l] + layer.bias
            np.testing.assert_allclose(trace.pre_activations[l], z, atol=1e-15)
            np.testing.assert_allclose(trace.inputs[l + 1], trace.masks[l] * z, atol=1e-15)

    def test_wrong_length_rejected(self, identity_net):
        with pytest.raises(InputShapeError):
            forward(identity_net, [1, 2, 3])

    def test_non_finite_rejected(self, identity_net):
        with pytest.raises(InputShapeError):
            forward(identity_net, [np.nan, 1])

    def test_zero_preactivation_counts_as_active(self):
        net = make_net(([[1, -1]], [0], "relu"))
        assert forward(net, [1, 1]).masks[0][0]


class TestGradient:
    def test_identity_rows(self, identity_net):
        np.testing.assert_array_equal(gradient(identity_net, [2, -3], 0).gradient, [1, 0])

    def test_single_active_row(self):
        net = make_net(([[1, -1]], [0], "relu"))
        res = gradient(net, [3, 1], 0)
        np.testing.assert_array_equal(res.gradient, [1, -1])
        assert res.value == 2.0

    def test_class_out_of_range(self, identity_net):
        with pytest.raises(ClassIndexError):
            gradient(identity_net, [1, 1], 2)

    def test_wrt_layer_out_of_range(self, identity_net):
        with pytest.raises(IndexError):
            gradient(identity_net, [1, 1], 0, wrt_layer=3)

    def test_gradient_length_matches_layer(self, random_relu, rng):
        net = random_relu((4, 7, 3))
        assert gradient(net, rng.standard_normal(4), 0, wrt_layer=2).gradient.shape == (7,)

    def test_matches_finite_differences_relu(self, random_relu, rng):
        checked = 0
        while checked < 20:
            net = random_relu()
            x = rng.standard_normal(10)
            if hinge_margin(forward(net, x), net) < 1e-3:
                continue
            exact = gradient(net, x, 0).gradient
            fd = finite_difference_gradient(net, x, 0, 1e-4)
            assert np.max(np.abs(exact - fd)) <= 1e-5 * max(1.0, np.max(np.abs(exact)))
            checked += 1

    def test_matches_finite_differences_softplus(self, random_relu, rng):
        for _ in range(10):
            net = random_relu(activation="softplus")
            x = rng.standard_normal(10)
            np.testing.assert_allclose(finite_difference_gradient(net, x, 0), gradient(net, x, 0).gradient,
                                       atol=1e-5)

    def test_layer_jacobian_matches_gradient(self, random_relu, rng):
        net = random_relu((3, 4))
        x = rng.standard_normal(3)
        J = layer_jacobian(net.layer(1), x)
        np.testing.assert_allclose(J[1], gradient(net, x, 1).gradient)


class TestFiniteDifference:
    def test_exact_for_linear(self):
        net = make_net(([[3.0]], [0], "identity"))
        np.testing.assert_allclose(finite_difference_gradient(net, [0.7], 0, 1e-4), [3.0], atol=1e-9)

    def test_rejects_non_positive_step(self, identity_net):
        with pytest.raises(ValueError):
            finite_difference_gradient(identity_net, [1, 1], 0, 0.0)

    def test_unreliable_at_hinge(self):
        net = make_net(([[1.0]], [0], "relu"))
        # one-sided kink: the central estimate is the average of 0 and 1
        assert finite_difference_gradient(net, [0.0], 0)[0] == pytest.approx(0.5)


class TestFingerprint:
    def test_deterministic(self, random_relu, rng):
        net = random_relu()
        x = rng.standard_normal(10)
        assert fingerprint(forward(net, x)) == fingerprint(forward(net, x))

    def test_identity_pattern(self, identity_net):
        fp = fingerprint(forward(identity_net, [2, -3]), 1)
        np.testing.assert_array_equal(fp.patterns[0], [True, False])

    def test_same_orthant(self):
        net = make_net((np.eye(3), np.zeros(3), "relu"))
        assert fingerprint(forward(net, [1, -2, 3])) == fingerprint(forward(net, [0.5, -0.1, 9]))

    def test_from_layer_bounds(self, identity_net):
        with pytest.raises(IndexError):
            fingerprint(forward(identity_net, [1, 1]), 2)

    def test_suffix_prefix_property(self, random_relu, rng):
        trace = forward(random_relu(), rng.standard_normal(10))
        assert fingerprint(trace, 1).suffix(2) == fingerprint(trace, 2)

    def test_equal_fingerprints_imply_equal_gradients(self, rng):
        net = random_network((3, 4, 4, 2), rng, "unrestricted")
        seen = {}
        pairs = 0
        for _ in range(3000):
            x = rng.uniform(-1, 1, 3)
            key = fingerprint(forward(net, x)).key
            g = gradient(net, x, 0).gradient
            if key in seen:
                assert np.max(np.abs(seen[key] - g)) <= 1e-12
                pairs += 1
            else:
                seen[key] = g
        assert pairs > 100

    def test_digest_is_stable_hex(self, identity_net):
        d = fingerprint(forward(identity_net, [1, -1])).digest()
        assert len(d) == 12 and int(d, 16) >= 0


class TestProperties:
    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.01, 100.0), st.integers(0, 10_000))
    def test_positive_homogeneity_zero_bias(self, c, seed):
        rng = np.random.default_rng(seed)
        net = random_network((5, 6, 6, 3), rng, "zero")
        x = rng.standard_normal(5)
        np.testing.assert_allclose(forward(net, c * x).output, c * forward(net, x).output,
                                   rtol=1e-12, atol=1e-12)

    def test_softplus_positive_and_curved(self, rng):
        net = random_network((4, 5, 2), rng, "unrestricted", "softplus")
        x = rng.standard_normal(4)
        assert np.all(forward(net, x).output > 0)
        h = 1e-4
        H = np.array([
            (gradient(net, x + h * e, 0).gradient - gradient(net, x - h * e, 0).gradient) / (2 * h)
            for e in np.eye(4)
        ])
        assert np.all(np.isfinite(H)) and np.max(np.abs(H)) > 0


class TestValidation:
    def test_bias_length_mismatch(self):
        with pytest.raises(ValueError):
            LayerSpec(np.ones((2, 2)), np.ones(3), "relu")

    def test_non_finite_weights(self):
        with pytest.raises(ValueError):
            LayerSpec(np.array([[np.inf]]), np.zeros(1), "relu")

    def test_softplus_beta_positive(self):
        with pytest.raises(ValueError):
            LayerSpec(np.ones((1, 1)), np.zeros(1), "softplus", 0.0)

    def test_unknown_activation(self):
        with pytest.raises(ValueError):
            LayerSpec(np.ones((1, 1)), np.zeros(1), "tanh")

    def test_dimension_chain(self):
        with pytest.raises(ValueError):
            make_net((np.ones((3, 2)), np.zeros(3), "relu"), (np.ones((1, 2)), np.zeros(1), "relu"))

    def test_depth_and_dims(self, random_relu):
        net = random_relu((10, 10, 10, 10))
        assert net.depth == 3 and net.dims == [10, 10, 10, 10]


class TestJson:
    def test_round_trip(self, random_relu, tmp_path):
        net = random_relu((3, 4, 2))
        path = tmp_path / "net.json"
        save_network(net, path)
        assert load_network(path) == net

    def test_schema(self, tmp_path):
        path = tmp_path / "net.json"
        path.write_text(json.dumps({"input_dim": 2, "layers": [
            {"weights": [[1, 0], [0, 1]], "bias": [0, 0], "activation": "relu"},
            {"weights": [[1, 1]], "bias": [0.5], "activation": "softplus", "beta": 2.0},
        ]}))
        net = load_network(path)
        assert net.layer(2).beta == 2.0 and net.input_dim == 2

    def test_bad_chain_rejected(self):
        with pytest.raises(ValueError):
            Network.from_dict({"input_dim": 3, "layers": [
                {"weights": [[1, 0]], "bias": [0], "activation": "relu"}]})

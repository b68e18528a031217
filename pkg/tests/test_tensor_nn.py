import numpy as np
import pytest

from safeturn.errors import NonFiniteError, ShapeMismatchError, StaleTapeError
from safeturn.rl_agent import q_network_layers
from safeturn.selfcheck import small_network
from safeturn.tensor_nn import (LSTM_FORGET_BIAS, LayerSpec, backward, conv_same_extent, forward,
                                gradient_check, infer_shapes, init_network, weighted_mse)


def dense_net(seed=0):
    layers = [LayerSpec("dense", "fc1", units=4), LayerSpec("relu", "fc1_relu"),
              LayerSpec("dense", "fc2", units=2)]
    return init_network(layers, (3,), seed=seed)


class TestShapes:
    def test_same_padding_extent(self):
        assert conv_same_extent(80, 3, 1) == (80, 1, 1)
        assert conv_same_extent(5, 3, 2) == (3, 1, 1)

    def test_q_network_shapes(self, small_roi, small_agent):
        shapes = infer_shapes(q_network_layers(small_agent), small_roi.shape, aux_size=1)
        # 40x30 grid: pools 3/2 give 19x14, 9x6, 4x2
        assert shapes[2] == (19, 14, 2)
        assert shapes[-1] == (4,)
        flatten = [s for layer, s in zip(q_network_layers(small_agent), shapes) if layer.kind == "flatten"][0]
        assert flatten == (4 * 2 * 2,)

    def test_pool_larger_than_input_rejected(self):
        layers = [LayerSpec("avgpool2d", "pool", kernel=(5, 5), stride=(3, 3))]
        with pytest.raises(ShapeMismatchError):
            infer_shapes(layers, (4, 4, 1))

    def test_layer_spec_validation(self):
        with pytest.raises(ValueError):
            LayerSpec("dense", "fc")
        with pytest.raises(ValueError):
            LayerSpec("softmax", "out")
        with pytest.raises(ValueError):
            init_network([LayerSpec("dense", "fc", units=2), LayerSpec("dense", "fc", units=2)], (3,))


class TestInit:
    def test_deterministic_per_seed(self):
        a, b, c = dense_net(3), dense_net(3), dense_net(4)
        assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
        assert not np.array_equal(a.weights["fc1/W"], c.weights["fc1/W"])

    def test_weights_are_read_only(self):
        net = dense_net()
        with pytest.raises(ValueError):
            net.weights["fc1/W"][0, 0] = 1.0

    def test_lstm_forget_bias(self):
        net = init_network([LayerSpec("lstm-cell", "lstm", units=3)], (3, 4))
        bias = net.weights["lstm/b"]
        assert bias.shape == (12,)
        np.testing.assert_array_equal(bias[:3], LSTM_FORGET_BIAS)
        np.testing.assert_array_equal(bias[3:], 0.0)


class TestForwardBackward:
    def test_forward_output_shape(self):
        out, tape = forward(dense_net(), np.ones((5, 3)))
        assert out.shape == (5, 2)
        assert tape.output_shape == (5, 2)

    def test_wrong_input_shape(self):
        with pytest.raises(ShapeMismatchError) as info:
            forward(dense_net(), np.ones((5, 4)))
        assert info.value.layer == "fc1"

    def test_non_finite_input(self):
        x = np.ones((2, 3))
        x[1, 2] = np.nan
        with pytest.raises(NonFiniteError):
            forward(dense_net(), x)

    def test_missing_aux_input(self):
        net, x, _ = small_network("conv", 0)
        with pytest.raises(ShapeMismatchError):
            forward(net, x)

    def test_zero_output_grad_gives_zero_gradients(self):
        net = dense_net()
        out, tape = forward(net, np.random.default_rng(0).normal(size=(4, 3)))
        grads = backward(net, tape, np.zeros_like(out))
        assert set(grads) == set(net.trainable_keys)
        for key, g in grads.items():
            assert g.shape == net.weights[key].shape
            assert not np.any(g)

    def test_stale_tape(self):
        net = dense_net()
        out, tape = forward(net, np.ones((1, 3)))
        changed = net.with_weight("fc1/W", net.weights["fc1/W"] * 2.0)
        with pytest.raises(StaleTapeError):
            backward(changed, tape, out)

    def test_output_grad_shape_checked(self):
        net = dense_net()
        _, tape = forward(net, np.ones((2, 3)))
        with pytest.raises(ShapeMismatchError):
            backward(net, tape, np.ones((2, 3)))


class TestLosses:
    def test_weighted_mse_value_and_gradient(self):
        loss, grad = weighted_mse(np.array([1.0, 2.0]), np.array([0.0, 0.0]), np.array([1.0, 1.0]))
        assert loss == pytest.approx(2.5)
        np.testing.assert_allclose(grad, [1.0, 2.0])

    def test_weighted_mse_zero_weights(self):
        loss, grad = weighted_mse(np.array([3.0, -1.0]), np.zeros(2), np.zeros(2))
        assert loss == 0.0
        assert not np.any(grad)

    def test_weighted_mse_rejects_negative_weights(self):
        with pytest.raises(ValueError):
            weighted_mse(np.ones(2), np.zeros(2), np.array([1.0, -1.0]))


class TestGradientCheck:
    @pytest.mark.parametrize("family", ["dense", "conv", "lstm"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_analytic_matches_finite_differences(self, family, seed):
        net, x, aux = small_network(family, seed)
        assert gradient_check(net, x, aux_input=aux) < 1e-4

    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_relu_with_nudged_inputs(self, seed):
        net, x, _ = small_network("relu", seed)
        assert any(layer.kind == "relu" for layer in net.layers)
        assert gradient_check(net, x, nudge_inputs=True) < 1e-4

    def test_corrupted_gradient_is_caught(self):
        net, x, _ = small_network("dense", 0)
        net64 = net.astype(np.float64)
        out, tape = forward(net64, x)
        grads = {k: np.array(v) for k, v in backward(net64, tape, out).items()}
        idx = np.unravel_index(np.argmax(np.abs(grads["fc2/W"])), grads["fc2/W"].shape)
        grads["fc2/W"][idx] *= 2.0
        err = gradient_check(net, x, h=1e-5, analytic=grads)
        assert err == pytest.approx(0.5, abs=1e-3)

    def test_refuses_large_networks(self):
        net = init_network([LayerSpec("dense", "fc", units=200)], (100,))
        with pytest.raises(ValueError):
            gradient_check(net, np.ones((1, 100)))

import numpy as np
import pytest

from safeturn.errors import KeyMismatchError
from safeturn.optim import init_optimizer_state, optimizer_step
from safeturn.tensor_nn import LayerSpec, init_network


@pytest.fixture
def net():
    return init_network([LayerSpec("dense", "fc1", units=3), LayerSpec("dense", "fc2", units=1)], (2,), seed=5)


def constant_grads(net, value):
    return {k: np.full_like(net.weights[k], value) for k in net.trainable_keys}


class TestOptimizerStep:
    @pytest.mark.parametrize("kind", ["rmsprop", "adam"])
    def test_zero_gradient_leaves_weights(self, net, kind):
        new, state = optimizer_step(kind, net, constant_grads(net, 0.0), lr=0.1)
        for key in net.trainable_keys:
            np.testing.assert_array_equal(new.weights[key], net.weights[key])
        assert state.step == 1

    def test_adam_first_step_is_lr_sized(self, net):
        new, _ = optimizer_step("adam", net, constant_grads(net, 0.3), lr=0.01)
        for key in net.trainable_keys:
            np.testing.assert_allclose(net.weights[key] - new.weights[key], 0.01, rtol=1e-4)

    def test_rmsprop_first_step(self, net):
        # v = 0.1 g^2, update = lr g / sqrt(v)
        new, state = optimizer_step("rmsprop", net, constant_grads(net, 2.0), lr=0.01)
        step = net.weights["fc1/W"] - new.weights["fc1/W"]
        np.testing.assert_allclose(step, 0.01 / np.sqrt(0.1), rtol=1e-4)
        np.testing.assert_allclose(state.second["fc1/W"], 0.4, rtol=1e-6)

    def test_input_params_untouched(self, net):
        before = {k: v.copy() for k, v in net.weights.items()}
        optimizer_step("adam", net, constant_grads(net, 1.0), lr=0.5)
        for key, value in before.items():
            np.testing.assert_array_equal(net.weights[key], value)

    def test_state_carries_across_steps(self, net):
        state = init_optimizer_state("adam", net)
        for _ in range(3):
            net, state = optimizer_step("adam", net, constant_grads(net, 1.0), 0.01, state)
        assert state.step == 3
        assert set(state.first) == set(net.trainable_keys)

    def test_gradient_keys_must_match(self, net):
        grads = constant_grads(net, 1.0)
        grads.pop("fc2/b")
        grads["fc3/W"] = np.zeros(1)
        with pytest.raises(KeyMismatchError) as info:
            optimizer_step("rmsprop", net, grads, lr=0.1)
        assert info.value.missing == ["fc2/b"]
        assert info.value.unexpected == ["fc3/W"]

    def test_unknown_optimizer(self, net):
        with pytest.raises(ValueError):
            init_optimizer_state("sgd", net)

    def test_state_kind_checked(self, net):
        state = init_optimizer_state("adam", net)
        with pytest.raises(ValueError):
            optimizer_step("rmsprop", net, constant_grads(net, 1.0), 0.1, state)

import struct

import numpy as np
import pytest

from safeturn.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint, network_from_tensors,
                                 network_tensors, save_checkpoint)
from safeturn.errors import CheckpointFormatError, ShapeMismatchError
from safeturn.scaling import MinMaxScaler
from safeturn.tensor_nn import LayerSpec, init_network

LAYERS = [LayerSpec("dense", "fc1", units=3), LayerSpec("relu", "fc1_relu"), LayerSpec("dense", "fc2", units=2)]


class TestFormat:
    def test_header_layout(self):
        blob = encode_checkpoint({"w": np.ones((2, 3))})
        assert blob[:4] == MAGIC
        assert struct.unpack("<II", blob[4:12]) == (1, 1)
        # name length, name, rank, extents, data
        assert len(blob) == 12 + 2 + 1 + 1 + 8 + 6 * 4

    def test_tensor_order_and_values(self):
        tensors = {"b": np.arange(3.0), "a": np.array([[1.5, -2.0]])}
        decoded = decode_checkpoint(encode_checkpoint(tensors))
        assert list(decoded) == ["b", "a"]
        np.testing.assert_array_equal(decoded["a"], tensors["a"])
        assert decoded["b"].dtype == np.float32

    def test_bad_magic(self):
        blob = b"XXXX" + encode_checkpoint({"w": np.zeros(2)})[4:]
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(blob)

    def test_truncated(self):
        blob = encode_checkpoint({"w": np.zeros(10)})
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(blob[:-3])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(encode_checkpoint({"w": np.zeros(1)}) + b"\x00")


class TestNetworkBridge:
    def test_save_and_reload_network(self, tmp_path):
        net = init_network(LAYERS, (4,), seed=2 ** 40 + 17)
        path = save_checkpoint(tmp_path / "sub" / "net.sdqn", network_tensors(net))
        restored = network_from_tensors(LAYERS, (4,), 0, load_checkpoint(path))
        assert restored.rng_seed == 2 ** 40 + 17
        for key in net.trainable_keys:
            np.testing.assert_array_equal(restored.weights[key], net.weights[key])

    def test_missing_tensor(self):
        tensors = network_tensors(init_network(LAYERS, (4,)))
        del tensors["fc2/b"]
        with pytest.raises(CheckpointFormatError):
            network_from_tensors(LAYERS, (4,), 0, tensors)

    def test_wrong_architecture(self):
        tensors = network_tensors(init_network(LAYERS, (4,)))
        with pytest.raises(ShapeMismatchError):
            network_from_tensors(LAYERS, (5,), 0, tensors)


class TestMinMaxScaler:
    def test_maps_to_unit_range(self):
        data = np.array([[0.0, 10.0, 3.0], [2.0, 20.0, 3.0], [1.0, 15.0, 3.0]])
        scaler = MinMaxScaler.fit(data)
        scaled = scaler.transform(data)
        np.testing.assert_allclose(scaled[:, 0], [0.0, 1.0, 0.5])
        np.testing.assert_allclose(scaled[:, 1], [0.0, 1.0, 0.5])
        # constant column maps to 0
        np.testing.assert_allclose(scaled[:, 2], 0.0)
        np.testing.assert_allclose(scaler.inverse_transform(scaled), data)

    def test_tensor_storage(self):
        scaler = MinMaxScaler.fit(np.array([[0.0, -1.0], [4.0, 1.0]]))
        restored = MinMaxScaler.from_tensors(scaler.to_tensors("norm/in"), "norm/in")
        np.testing.assert_allclose(restored.minimum, [0.0, -1.0])
        np.testing.assert_allclose(restored.maximum, [4.0, 1.0])

    def test_fitted_statistics_survive_storage_exactly(self, rng):
        data = rng.normal(scale=3.0, size=(50, 3)) + np.array([0.1, 1.0 / 3.0, -7.77])
        scaler = MinMaxScaler.fit(data)
        restored = MinMaxScaler.from_tensors(scaler.to_tensors("norm/in"), "norm/in")
        np.testing.assert_array_equal(restored.minimum, scaler.minimum)
        np.testing.assert_array_equal(restored.maximum, scaler.maximum)
        np.testing.assert_array_equal(restored.transform(data), scaler.transform(data))

"""
SDQN checkpoint files.

Layout (all little-endian):
    b"SDQN" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 extent * rank | f32 data
"""

from __future__ import annotations

import logging
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, ShapeMismatchError
from .tensor_nn import NetworkParams, init_network

logger = logging.getLogger(__name__)

MAGIC = b"SDQN"
FORMAT_VERSION = 1
SEED_KEY = "__seed__"
SEED_CHUNKS = 4


def encode_checkpoint(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(blob: bytes) -> dict:
    view = memoryview(blob)
    offset = 0

    def take(n):
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint at byte {offset}")
        chunk = view[offset:offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointFormatError("missing SDQN magic")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
        tensors[name] = data
    if offset != len(view):
        raise CheckpointFormatError(f"{len(view) - offset} trailing bytes after last tensor")
    return tensors


def save_checkpoint(path, tensors: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors))
    logger.debug("wrote %d tensors to %s", len(tensors), path)
    return path


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())


# ============================================================
# NetworkParams bridge
# ============================================================

def _seed_chunks(seed: int) -> np.ndarray:
    seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
    return np.array([(seed >> (16 * i)) & 0xFFFF for i in range(SEED_CHUNKS)], dtype=np.float32)


def _seed_from_chunks(chunks) -> int:
    return sum(int(c) << (16 * i) for i, c in enumerate(np.asarray(chunks).ravel()))


def network_tensors(net: NetworkParams, extra: dict = None) -> dict:
    """Tensor map for a network: weights in layer order, the seed, then ``extra``."""
    tensors = {key: net.weights[key] for key in net.trainable_keys}
    tensors[SEED_KEY] = _seed_chunks(net.rng_seed)
    for key, value in (extra or {}).items():
        tensors[key] = np.asarray(value, dtype=np.float32)
    return tensors


def network_from_tensors(layers, input_shape, aux_size: int, tensors: dict) -> NetworkParams:
    """Rebuild a network of the given architecture from a loaded tensor map."""
    seed = _seed_from_chunks(tensors[SEED_KEY]) if SEED_KEY in tensors else 0
    template = init_network(layers, input_shape, aux_size, seed=0)
    weights = {}
    for key, ref in template.weights.items():
        if key not in tensors:
            raise CheckpointFormatError(f"checkpoint lacks tensor '{key}'")
        if tensors[key].shape != ref.shape:
            raise ShapeMismatchError(key.split("/")[0], ref.shape, tensors[key].shape)
        weights[key] = tensors[key]
    return replace(template.with_weights(weights), rng_seed=seed)

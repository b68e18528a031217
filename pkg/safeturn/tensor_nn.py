"""
Minimal neural-network core for the four trainable models.

Layers are channels-last and batch-first: conv/pool inputs are (N, H, W, C),
dense inputs (N, D), recurrent inputs (N, T, D). A network is a plain value
(``NetworkParams``); ``forward`` returns the output together with a tape that
``backward`` consumes to produce one gradient per trainable tensor.

Weight arrays inside a ``NetworkParams`` are read-only, so a tape can detect
that it was recorded against other weights by identity alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import NonFiniteError, ShapeMismatchError, StaleTapeError

Tensor = np.ndarray

# ============================================================
# Layer catalogue
# ============================================================

LAYER_KINDS = ("conv2d", "avgpool2d", "dense", "lstm-cell", "flatten", "concat-aux", "relu", "tanh")
TRAINABLE_KINDS = ("conv2d", "dense", "lstm-cell")
LSTM_FORGET_BIAS = 1.0
# relative errors of gradients smaller than this are measured against it
GRADIENT_FLOOR = 1e-8


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer of a network.

    Parameters:
        kind: one of LAYER_KINDS
        name: unique name, also the prefix of the layer's weight keys
        kernel: (h, w) for conv2d / avgpool2d
        stride: (h, w) for conv2d / avgpool2d
        units: filters for conv2d, units for dense / lstm-cell
    """
    kind: str
    name: str
    kernel: Optional[tuple] = None
    stride: Optional[tuple] = None
    units: Optional[int] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind '{self.kind}'")
        if self.kind in ("conv2d", "avgpool2d"):
            if self.kernel is None or self.stride is None:
                raise ValueError(f"{self.kind} layer '{self.name}' needs kernel and stride")
        if self.kind in TRAINABLE_KINDS and (self.units is None or self.units <= 0):
            raise ValueError(f"{self.kind} layer '{self.name}' needs a positive unit count")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS

    @property
    def weight_key(self) -> str:
        return f"{self.name}/W"

    @property
    def bias_key(self) -> str:
        return f"{self.name}/b"


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class NetworkParams:
    """An architecture plus its weights. Treated as an immutable value."""
    layers: tuple
    weights: dict
    rng_seed: int
    input_shape: tuple
    aux_size: int = 0

    @property
    def dtype(self):
        return next(iter(self.weights.values())).dtype if self.weights else np.dtype(np.float32)

    @property
    def trainable_keys(self) -> list:
        keys = []
        for layer in self.layers:
            if layer.trainable:
                keys += [layer.weight_key, layer.bias_key]
        return keys

    @property
    def parameter_count(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    @property
    def uses_aux(self) -> bool:
        return any(layer.kind == "concat-aux" for layer in self.layers)

    def with_weights(self, weights: dict) -> "NetworkParams":
        return replace(self, weights={k: _freeze(v) if v.flags.writeable else v for k, v in weights.items()})

    def with_weight(self, key: str, value: np.ndarray) -> "NetworkParams":
        weights = dict(self.weights)
        weights[key] = _freeze(value)
        return replace(self, weights=weights)

    def astype(self, dtype) -> "NetworkParams":
        return replace(self, weights={k: _freeze(v.astype(dtype)) for k, v in self.weights.items()})


# ============================================================
# Shape calculator
# ============================================================

def conv_same_extent(extent: int, kernel: int, stride: int):
    """Output extent and (before, after) padding of a same-padded convolution."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return out, total // 2, total - total // 2


def pool_extent(extent: int, kernel: int, stride: int) -> int:
    return (extent - kernel) // stride + 1


def infer_shapes(layers, input_shape, aux_size: int = 0) -> list:
    """
    Per-sample output shape of every layer, computed without touching weights.

    Raises:
        ShapeMismatchError: when a layer cannot accept its input
    """
    shape = tuple(input_shape)
    shapes = []
    for layer in layers:
        if layer.kind == "conv2d":
            if len(shape) != 3:
                raise ShapeMismatchError(layer.name, "(H, W, C)", shape)
            h = conv_same_extent(shape[0], layer.kernel[0], layer.stride[0])[0]
            w = conv_same_extent(shape[1], layer.kernel[1], layer.stride[1])[0]
            shape = (h, w, layer.units)
        elif layer.kind == "avgpool2d":
            if len(shape) != 3:
                raise ShapeMismatchError(layer.name, "(H, W, C)", shape)
            h = pool_extent(shape[0], layer.kernel[0], layer.stride[0])
            w = pool_extent(shape[1], layer.kernel[1], layer.stride[1])
            if h <= 0 or w <= 0:
                raise ShapeMismatchError(layer.name, f"extent >= kernel {layer.kernel}", shape)
            shape = (h, w, shape[2])
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "concat-aux":
            if len(shape) != 1 or aux_size <= 0:
                raise ShapeMismatchError(layer.name, "(D,) with aux input", shape)
            shape = (shape[0] + aux_size,)
        elif layer.kind == "dense":
            if len(shape) != 1:
                raise ShapeMismatchError(layer.name, "(D,)", shape)
            shape = (layer.units,)
        elif layer.kind == "lstm-cell":
            if len(shape) != 2:
                raise ShapeMismatchError(layer.name, "(T, D)", shape)
            shape = (layer.units,)
        shapes.append(shape)
    return shapes


# ============================================================
# Initialization
# ============================================================

def init_network(layers, input_shape, aux_size: int = 0, seed: int = 0) -> NetworkParams:
    """
    Build a network with uniform He-style fan-in initialization.

    Biases start at zero except the LSTM forget gate, which starts at LSTM_FORGET_BIAS.
    """
    layers = tuple(layers)
    names = [layer.name for layer in layers]
    if len(set(names)) != len(names):
        raise ValueError("layer names must be unique")
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(layers, input_shape, aux_size)
    weights = {}
    prev = tuple(input_shape)
    for layer, out_shape in zip(layers, shapes):
        if layer.kind == "conv2d":
            kh, kw = layer.kernel
            fan_in = kh * kw * prev[2]
            w_shape = (kh, kw, prev[2], layer.units)
            b = np.zeros(layer.units)
        elif layer.kind == "dense":
            fan_in = prev[0]
            w_shape = (prev[0], layer.units)
            b = np.zeros(layer.units)
        elif layer.kind == "lstm-cell":
            u = layer.units
            fan_in = prev[1] + u
            w_shape = (prev[1] + u, 4 * u)
            b = np.zeros(4 * u)
            b[:u] = LSTM_FORGET_BIAS
        else:
            prev = out_shape
            continue
        limit = np.sqrt(6.0 / fan_in)
        weights[layer.weight_key] = _freeze(rng.uniform(-limit, limit, size=w_shape).astype(np.float32))
        weights[layer.bias_key] = _freeze(b.astype(np.float32))
        prev = out_shape
    return NetworkParams(layers=layers, weights=weights, rng_seed=int(seed),
                         input_shape=tuple(input_shape), aux_size=int(aux_size))


# ============================================================
# Layer kernels
# ============================================================

def _conv_forward(x, w, b, stride):
    n, h, wd, _ = x.shape
    kh, kw = w.shape[:2]
    sh, sw = stride
    oh, top, bottom = conv_same_extent(h, kh, sh)
    ow, left, right = conv_same_extent(wd, kw, sw)
    xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :oh, :ow]
    y = np.tensordot(win, w, axes=([3, 4, 5], [2, 0, 1])) + b
    return y, (win, xp.shape, (top, left), (h, wd))


def _conv_backward(dy, w, stride, cache, need_dx):
    win, padded_shape, (top, left), (h, wd) = cache
    kh, kw = w.shape[:2]
    sh, sw = stride
    _, oh, ow, _ = dy.shape
    dw = np.tensordot(win, dy, axes=([0, 1, 2], [0, 1, 2])).transpose(1, 2, 0, 3)
    db = dy.sum(axis=(0, 1, 2))
    dx = None
    if need_dx:
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + sh * oh:sh, j:j + sw * ow:sw, :] += dy @ w[i, j].T
        dx = dxp[:, top:top + h, left:left + wd, :]
    return dw, db, dx


def _pool_forward(x, kernel, stride):
    kh, kw = kernel
    sh, sw = stride
    oh = pool_extent(x.shape[1], kh, sh)
    ow = pool_extent(x.shape[2], kw, sw)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :oh, :ow]
    return win.mean(axis=(4, 5)), (x.shape, oh, ow)


def _pool_backward(dy, kernel, stride, cache):
    kh, kw = kernel
    sh, sw = stride
    x_shape, oh, ow = cache
    dx = np.zeros(x_shape, dtype=dy.dtype)
    share = dy / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + sh * oh:sh, j:j + sw * ow:sw, :] += share
    return dx


def _lstm_forward(x, w, b, units):
    n, steps, _ = x.shape
    h = np.zeros((n, units), dtype=x.dtype)
    c = np.zeros((n, units), dtype=x.dtype)
    cache = []
    for t in range(steps):
        z = np.concatenate([h, x[:, t]], axis=1)
        a = z @ w + b
        f = expit(a[:, :units])
        i = expit(a[:, units:2 * units])
        o = expit(a[:, 2 * units:3 * units])
        g = np.tanh(a[:, 3 * units:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        cache.append((z, f, i, o, g, c_prev, tc))
    return h, cache


def _lstm_backward(dh, w, units, cache, input_dim):
    n = dh.shape[0]
    steps = len(cache)
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[1], dtype=w.dtype)
    dx = np.zeros((n, steps, input_dim), dtype=dh.dtype)
    dc = np.zeros_like(dh)
    for t in reversed(range(steps)):
        z, f, i, o, g, c_prev, tc = cache[t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc ** 2)
        da = np.concatenate([
            dc * c_prev * f * (1.0 - f),
            dc * g * i * (1.0 - i),
            do * o * (1.0 - o),
            dc * i * (1.0 - g ** 2),
        ], axis=1)
        dw += z.T @ da
        db += da.sum(axis=0)
        dz = da @ w.T
        dh = dz[:, :units]
        dx[:, t] = dz[:, units:]
        dc = dc * f
    return dw, db, dx


# ============================================================
# forward / backward
# ============================================================

@dataclass
class Tape:
    """Activation record of one forward pass."""
    caches: list
    weight_refs: dict
    output_shape: tuple
    input_dims: list = field(default_factory=list)


def _check_finite(name: str, arr: np.ndarray):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


def forward(net: NetworkParams, primary_input, aux_input=None):
    """
    Run the network on a batch.

    Parameters:
        net: network to evaluate
        primary_input: batch shaped (N, *net.input_shape)
        aux_input: (N, net.aux_size) batch, required iff the net has a concat-aux layer

    Returns:
        tuple: (output, tape)
    """
    dtype = net.dtype
    x = np.asarray(primary_input, dtype=dtype)
    first = net.layers[0].name if net.layers else "input"
    if x.shape[1:] != tuple(net.input_shape):
        raise ShapeMismatchError(first, ("N",) + tuple(net.input_shape), x.shape)
    _check_finite("primary input", x)
    if net.uses_aux:
        if aux_input is None:
            raise ShapeMismatchError("concat-aux", f"(N, {net.aux_size}) aux input", None)
        aux = np.asarray(aux_input, dtype=dtype).reshape(x.shape[0], -1)
        if aux.shape[1] != net.aux_size:
            raise ShapeMismatchError("concat-aux", (x.shape[0], net.aux_size), aux.shape)
        _check_finite("aux input", aux)
    elif aux_input is not None:
        raise ShapeMismatchError(first, "no aux input", np.shape(aux_input))

    caches = []
    input_dims = []
    for layer in net.layers:
        input_dims.append(x.shape)
        if layer.kind == "conv2d":
            w = net.weights[layer.weight_key]
            if x.ndim != 4 or x.shape[3] != w.shape[2]:
                raise ShapeMismatchError(layer.name, ("N", "H", "W", w.shape[2]), x.shape)
            x, cache = _conv_forward(x, w, net.weights[layer.bias_key], layer.stride)
        elif layer.kind == "avgpool2d":
            if x.ndim != 4:
                raise ShapeMismatchError(layer.name, ("N", "H", "W", "C"), x.shape)
            x, cache = _pool_forward(x, layer.kernel, layer.stride)
        elif layer.kind == "dense":
            w = net.weights[layer.weight_key]
            if x.ndim != 2 or x.shape[1] != w.shape[0]:
                raise ShapeMismatchError(layer.name, ("N", w.shape[0]), x.shape)
            cache = x
            x = x @ w + net.weights[layer.bias_key]
        elif layer.kind == "lstm-cell":
            w = net.weights[layer.weight_key]
            if x.ndim != 3 or x.shape[2] + layer.units != w.shape[0]:
                raise ShapeMismatchError(layer.name, ("N", "T", w.shape[0] - layer.units), x.shape)
            x, cache = _lstm_forward(x, w, net.weights[layer.bias_key], layer.units)
        elif layer.kind == "flatten":
            cache = x.shape
            x = x.reshape(x.shape[0], -1)
        elif layer.kind == "concat-aux":
            cache = x.shape[1]
            x = np.concatenate([x, aux], axis=1)
        elif layer.kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0).astype(dtype, copy=False)
        elif layer.kind == "tanh":
            x = np.tanh(x)
            cache = x
        caches.append(cache)
    tape = Tape(caches=caches, weight_refs=dict(net.weights), output_shape=x.shape, input_dims=input_dims)
    return x, tape


def backward(net: NetworkParams, tape: Tape, output_grad) -> dict:
    """
    Reverse-mode gradients of the trainable tensors.

    Returns:
        dict: weight key -> gradient, shaped like the weight
    """
    for key, ref in tape.weight_refs.items():
        if net.weights.get(key) is not ref:
            raise StaleTapeError(f"weights '{key}' changed since forward")
    if set(tape.weight_refs) != set(net.weights):
        raise StaleTapeError("network structure changed since forward")
    dy = np.asarray(output_grad, dtype=net.dtype)
    if dy.shape != tape.output_shape:
        raise ShapeMismatchError("output", tape.output_shape, dy.shape)

    grads = {}
    for idx in reversed(range(len(net.layers))):
        layer = net.layers[idx]
        cache = tape.caches[idx]
        need_dx = idx > 0
        if layer.kind == "conv2d":
            w = net.weights[layer.weight_key]
            dw, db, dy = _conv_backward(dy, w, layer.stride, cache, need_dx)
            grads[layer.weight_key], grads[layer.bias_key] = dw, db
        elif layer.kind == "avgpool2d":
            dy = _pool_backward(dy, layer.kernel, layer.stride, cache) if need_dx else None
        elif layer.kind == "dense":
            w = net.weights[layer.weight_key]
            grads[layer.weight_key] = cache.T @ dy
            grads[layer.bias_key] = dy.sum(axis=0)
            dy = dy @ w.T
        elif layer.kind == "lstm-cell":
            w = net.weights[layer.weight_key]
            input_dim = tape.input_dims[idx][2]
            dw, db, dy = _lstm_backward(dy, w, layer.units, cache, input_dim)
            grads[layer.weight_key], grads[layer.bias_key] = dw, db
        elif layer.kind == "flatten":
            dy = dy.reshape(cache)
        elif layer.kind == "concat-aux":
            dy = dy[:, :cache]
        elif layer.kind == "relu":
            dy = np.where(cache, dy, 0).astype(dy.dtype, copy=False)
        elif layer.kind == "tanh":
            dy = dy * (1.0 - cache ** 2)
        if dy is None:
            break
    return {key: grads[key] for key in net.trainable_keys}


# ============================================================
# Losses and gradient checking
# ============================================================

def weighted_mse(pred, target, weights):
    """
    Importance-weighted mean squared error.

    Returns:
        tuple: (loss, dloss/dpred) with loss = mean(w * (pred - target)^2)
    """
    pred = np.asarray(pred)
    target = np.asarray(target, dtype=pred.dtype)
    weights = np.asarray(weights, dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape != weights.shape:
        raise ShapeMismatchError("weighted_mse", pred.shape, (target.shape, weights.shape))
    if np.any(weights < 0):
        raise ValueError("weights must be non-negative")
    diff = pred - target
    n = pred.size
    loss = float(np.sum(weights * diff ** 2) / n)
    return loss, 2.0 * weights * diff / n


def half_sum_of_squares(output):
    output = np.asarray(output)
    return 0.5 * float(np.sum(output ** 2)), output


def gradient_check(net: NetworkParams, primary_input, loss: Callable = half_sum_of_squares,
                   aux_input=None, h: float = 1e-5, analytic: Optional[dict] = None,
                   nudge_inputs: bool = False) -> float:
    """
    Largest relative error between analytic and central-difference gradients.

    The check runs on a float64 copy of the network. ``analytic`` replaces the
    backward() result (used to confirm the check catches corrupted gradients).
    """
    if net.parameter_count >= 10_000:
        raise ValueError(f"gradient_check is meant for small nets, got {net.parameter_count} parameters")
    net64 = net.astype(np.float64)
    x = np.asarray(primary_input, dtype=np.float64)
    if nudge_inputs:
        floor = 10.0 * h
        x = np.where(np.abs(x) < floor, np.where(x < 0, -floor, floor), x)
    aux = None if aux_input is None else np.asarray(aux_input, dtype=np.float64)

    out, tape = forward(net64, x, aux)
    if analytic is None:
        _, dout = loss(out)
        analytic = backward(net64, tape, dout)

    worst = 0.0
    for key in net64.trainable_keys:
        base = np.array(net64.weights[key])
        for idx in np.ndindex(base.shape):
            plus = base.copy()
            plus[idx] += h
            minus = base.copy()
            minus[idx] -= h
            lp = loss(forward(net64.with_weight(key, plus), x, aux)[0])[0]
            lm = loss(forward(net64.with_weight(key, minus), x, aux)[0])[0]
            numeric = (lp - lm) / (2.0 * h)
            a = float(analytic[key][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), GRADIENT_FLOOR)
            worst = max(worst, err)
    return worst

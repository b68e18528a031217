"""Mini-batch Adam / MSE regression shared by the dynamics, belief and future models."""

from __future__ import annotations

import logging
import sys
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from .optim import init_optimizer_state, optimizer_step
from .tensor_nn import LayerSpec, NetworkParams, backward, forward, infer_shapes, weighted_mse

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    """Data sizes, training budgets and acceptance thresholds of the auxiliary models."""
    lr: float = 1e-4
    batch_size: int = 64
    holdout_fraction: float = 0.1
    relu_output_head: bool = False
    dynamics_episodes: int = 2000
    dynamics_steps: int = 100
    dynamics_epochs: int = 40
    dynamics_speed_rmse: float = 0.05
    dynamics_position_error: float = 0.05
    pedestrian_episodes: int = 2000
    pedestrian_steps: int = 400
    belief_epochs: int = 20
    belief_factor_floor: float = 1.2
    belief_oracle_margin: float = 0.25
    future_horizon: int = 8
    future_epochs: int = 20
    future_rmse: float = 0.6
    hidden_units: int = 32


def progress_enabled() -> bool:
    return sys.stderr.isatty() and logging.getLogger("safeturn").getEffectiveLevel() <= logging.INFO


def dense_head(prefix: str, sizes, relu_output: bool = False) -> list:
    """Dense stack with ReLU between layers; the last layer is linear unless ``relu_output``."""
    layers = []
    for i, units in enumerate(sizes):
        layers.append(LayerSpec("dense", f"{prefix}{i + 1}", units=units))
        if i < len(sizes) - 1 or relu_output:
            layers.append(LayerSpec("relu", f"{prefix}{i + 1}_relu"))
    return layers


def predict_batched(net: NetworkParams, inputs, batch_size: int = 4096) -> np.ndarray:
    inputs = np.asarray(inputs)
    if len(inputs) == 0:
        out_shape = infer_shapes(net.layers, net.input_shape, net.aux_size)[-1]
        return np.zeros((0,) + tuple(out_shape), dtype=np.float32)
    outs = [forward(net, inputs[i:i + batch_size])[0] for i in range(0, len(inputs), batch_size)]
    return np.concatenate(outs, axis=0)


def split_holdout(count: int, fraction: float, seed: int):
    """Shuffled train / held-out index arrays."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(count)
    n_hold = max(1, int(round(count * fraction)))
    return order[n_hold:], order[:n_hold]


def fit_supervised(net: NetworkParams, inputs, targets, epochs: int, lr: float, batch_size: int,
                   seed: int = 0, desc: str = "fit"):
    """
    Minimize mean squared error with Adam.

    Returns:
        tuple: (trained net, per-epoch mean training loss)
    """
    inputs = np.asarray(inputs, dtype=np.float32)
    targets = np.asarray(targets, dtype=np.float32)
    rng = np.random.default_rng(seed)
    state = init_optimizer_state("adam", net)
    history = []
    bar = tqdm(range(epochs), desc=desc, disable=not progress_enabled())
    for epoch in bar:
        order = rng.permutation(len(inputs))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            pred, tape = forward(net, inputs[idx])
            loss, grad = weighted_mse(pred, targets[idx], np.ones_like(pred))
            grads = backward(net, tape, grad)
            net, state = optimizer_step("adam", net, grads, lr, state)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        bar.set_postfix(loss=f"{history[-1]:.5f}")
        logger.debug("%s epoch %d loss %.6f", desc, epoch, history[-1])
    logger.info("%s: %d epochs, final training loss %.6f", desc, epochs, history[-1] if history else float("nan"))
    return net, history

"""RMSprop and Adam as pure functions over NetworkParams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import KeyMismatchError, NonFiniteError
from .tensor_nn import NetworkParams

# Defaults for each optimizer kind
OPTIMIZER_DEFAULTS = {
    "rmsprop": {"rho": 0.9, "eps": 1e-8},
    "adam": {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
}


@dataclass(frozen=True)
class OptimizerState:
    """Step counter plus per-weight moment estimates."""
    kind: str
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def init_optimizer_state(kind: str, params: NetworkParams) -> OptimizerState:
    if kind not in OPTIMIZER_DEFAULTS:
        raise ValueError(f"unknown optimizer '{kind}', expected one of {sorted(OPTIMIZER_DEFAULTS)}")
    zeros = {k: np.zeros_like(params.weights[k]) for k in params.trainable_keys}
    first = dict(zeros) if kind == "adam" else {}
    return OptimizerState(kind=kind, step=0, first=first, second={k: v.copy() for k, v in zeros.items()})


def optimizer_step(kind: str, params: NetworkParams, grads: dict, lr: float,
                   state: OptimizerState = None, **hyper):
    """
    Apply one update.

    Parameters:
        kind: 'rmsprop' or 'adam'
        params: current network
        grads: gradient per trainable key (exactly the trainable keys)
        lr: learning rate
        state: previous optimizer state, fresh state when None
        hyper: overrides for OPTIMIZER_DEFAULTS[kind]

    Returns:
        tuple: (new params, new state)
    """
    if state is None:
        state = init_optimizer_state(kind, params)
    if state.kind != kind:
        raise ValueError(f"optimizer state belongs to '{state.kind}', not '{kind}'")
    expected = set(params.trainable_keys)
    given = set(grads)
    if expected != given:
        raise KeyMismatchError(expected - given, given - expected)
    cfg = {**OPTIMIZER_DEFAULTS[kind], **hyper}

    step = state.step + 1
    new_weights = dict(params.weights)
    first, second = {}, {}
    for key in params.trainable_keys:
        w = params.weights[key]
        g = np.asarray(grads[key], dtype=w.dtype)
        if g.shape != w.shape:
            raise KeyMismatchError([key], [key])
        if kind == "rmsprop":
            v = cfg["rho"] * state.second[key] + (1.0 - cfg["rho"]) * g * g
            update = lr * g / (np.sqrt(v) + cfg["eps"])
        else:
            m = cfg["beta1"] * state.first[key] + (1.0 - cfg["beta1"]) * g
            v = cfg["beta2"] * state.second[key] + (1.0 - cfg["beta2"]) * g * g
            m_hat = m / (1.0 - cfg["beta1"] ** step)
            v_hat = v / (1.0 - cfg["beta2"] ** step)
            update = lr * m_hat / (np.sqrt(v_hat) + cfg["eps"])
            first[key] = m.astype(w.dtype)
        second[key] = v.astype(w.dtype)
        new_w = (w - update).astype(w.dtype)
        if not np.all(np.isfinite(new_w)):
            raise NonFiniteError(f"update of '{key}' produced non-finite weights")
        new_weights[key] = new_w
    return params.with_weights(new_weights), OptimizerState(kind=kind, step=step, first=first, second=second)

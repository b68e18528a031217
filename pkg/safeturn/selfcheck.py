"""
Invariant suites run by ``python -m safeturn selfcheck``.

Each suite returns a CheckResult; the CLI exits with status 3 when any fails.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, replace

import numpy as np

from .config import Config
from .harness import VARIANTS, ModelSet, episode_seed, layout_for, run_episode
from .rl_agent import (ACTIONS, SumTreeBuffer, ddqn_target_values, dqn_target_values, importance_weights,
                       sample_probability)
from .safety_shield import ShieldConfig, constant_velocity_view, filter_action, ground_truth_collision
from .state_encoder import RoiSpec, encode_state_tensor
from .tensor_nn import LayerSpec, gradient_check, init_network
from .world_sim import DT, PEDESTRIAN_SPEED, SPEED_CAP, build_layout, initial_ego

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4
GRADIENT_FAMILIES = ("dense", "relu", "conv", "lstm")
PER_TOLERANCE = 0.02


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ============================================================
# Gradient
# ============================================================

def small_network(kind: str, seed: int):
    """
    A tiny net of one family plus inputs for it.

    Returns:
        tuple: (NetworkParams, primary input, aux input or None)
    """
    rng = np.random.default_rng(seed)
    if kind == "dense":
        layers = [LayerSpec("dense", "fc1", units=4), LayerSpec("tanh", "fc1_tanh"),
                  LayerSpec("dense", "fc2", units=3)]
        net = init_network(layers, (5,), seed=seed)
        return net, rng.normal(size=(2, 5)), None
    if kind == "relu":
        layers = [LayerSpec("dense", "fc1", units=6), LayerSpec("relu", "fc1_relu"),
                  LayerSpec("dense", "fc2", units=2)]
        net = init_network(layers, (4,), seed=seed)
        return net, rng.normal(size=(3, 4)), None
    if kind == "conv":
        stride = 1 + seed % 2
        layers = [LayerSpec("conv2d", "conv1", kernel=(3, 3), stride=(stride, stride), units=2),
                  LayerSpec("tanh", "conv1_tanh"),
                  LayerSpec("avgpool2d", "pool1", kernel=(2, 2), stride=(1, 1)),
                  LayerSpec("flatten", "flatten"), LayerSpec("concat-aux", "aux"),
                  LayerSpec("dense", "fc1", units=2)]
        net = init_network(layers, (5, 4, 2), aux_size=1, seed=seed)
        return net, rng.normal(size=(2, 5, 4, 2)), rng.normal(size=(2, 1))
    if kind == "lstm":
        layers = [LayerSpec("lstm-cell", "lstm", units=3), LayerSpec("dense", "fc1", units=2)]
        net = init_network(layers, (3, 2), seed=seed)
        return net, rng.normal(size=(2, 3, 2)), None
    raise ValueError(f"unknown network family '{kind}'")


def check_gradients(count: int = 100, seed: int = 0) -> CheckResult:
    worst = {family: 0.0 for family in GRADIENT_FAMILIES}
    for i in range(count):
        family = GRADIENT_FAMILIES[i % len(GRADIENT_FAMILIES)]
        net, x, aux = small_network(family, seed + i)
        # near-zero inputs sit on the ReLU kink
        err = gradient_check(net, x, aux_input=aux, nudge_inputs=family == "relu")
        worst[family] = max(worst[family], err)
    passed = max(worst.values()) < GRADIENT_TOLERANCE
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    return CheckResult("gradient", passed, f"worst relative error over {count} nets: {detail}")


# ============================================================
# Replay
# ============================================================

def check_per_sampling(draws: int = 100_000, seed: int = 0) -> CheckResult:
    alpha = 0.6
    buffer = SumTreeBuffer(capacity=8, alpha=alpha, learn_start=1, validate=False)
    for i in range(8):
        buffer.push(i)
    td = np.arange(1.0, 9.0) * 0.25
    buffer.update_priorities(np.arange(8), td)
    expected = sample_probability(np.abs(td) + buffer.per_eps, alpha)

    rng = np.random.default_rng(seed)
    counts = np.zeros(8)
    batch = 8
    for _ in range(draws // batch):
        _, _, slots = buffer.sample(batch, rng)
        np.add.at(counts, slots, 1)
    freq = counts / counts.sum()
    gap = float(np.max(np.abs(freq - expected)))

    weights = importance_weights([0.75, 0.25], 2, 1.0)
    weight_gap = float(np.max(np.abs(weights - np.array([1.0 / 3.0, 1.0]))))
    passed = gap <= PER_TOLERANCE and weight_gap <= 1e-9
    return CheckResult("per", passed, f"max frequency gap {gap:.4f} over {int(counts.sum())} draws, "
                                      f"IS weight gap {weight_gap:.1e}")


def check_ddqn_decoupling() -> CheckResult:
    online = [[0.2, 0.5, 0.1, 0.0]]
    target = [[1.0, 2.0, 9.9, 0.0]]
    value = float(ddqn_target_values([1.0], online, target, [False], 0.95)[0])
    coupled = float(dqn_target_values([1.0], target, [False], 0.95)[0])
    passed = abs(value - 2.9) < 1e-12 and abs(coupled - 10.405) < 1e-12
    return CheckResult("ddqn", passed, f"decoupled target {value:.4f}, max-over-target {coupled:.4f}")


# ============================================================
# Shield
# ============================================================

def random_scene(rng: np.random.Generator, layout, max_pedestrians: int = 5):
    """Ego somewhere on the route and pedestrians moving at constant velocity near it."""
    route = layout.route
    ego = initial_ego(layout, speed=rng.uniform(0.0, SPEED_CAP), route_s=rng.uniform(0.0, route.length))
    n = int(rng.integers(1, max_pedestrians + 1))
    positions = ego.position + rng.uniform(-8.0, 8.0, size=(n, 2))
    speeds = rng.uniform(*PEDESTRIAN_SPEED, size=n)
    headings = rng.uniform(0.0, 360.0, size=n)
    throttle = float(ACTIONS[rng.integers(len(ACTIONS))])
    return ego, positions, speeds, headings, throttle


def noiseless_windows(positions, speeds, headings, dt: float = DT) -> np.ndarray:
    """Three exact constant-velocity samples ending at ``positions``."""
    rad = np.deg2rad(headings)
    velocity = np.column_stack([np.cos(rad), np.sin(rad)]) * np.asarray(speeds)[:, None]
    windows = np.zeros((len(positions), 3, 4))
    for k, lag in enumerate((2, 1, 0)):
        windows[:, k, 0:2] = positions - velocity * lag * dt
        windows[:, k, 2] = speeds
        windows[:, k, 3] = headings
    return windows


def check_shield_oracle(scenes: int = 10_000, seed: int = 0, config: ShieldConfig = ShieldConfig()) -> CheckResult:
    rng = np.random.default_rng(seed)
    layouts = [build_layout("four-way"), build_layout("three-way")]
    disagreements = 0
    collisions = 0
    for i in range(scenes):
        layout = layouts[i % 2]
        ego, positions, speeds, headings, throttle = random_scene(rng, layout)
        view = constant_velocity_view(ego, layout.route, np.arange(len(positions)),
                                      noiseless_windows(positions, speeds, headings, config.virtual_dt), config)
        predicted = filter_action(throttle, view, config=config).intervened
        oracle = ground_truth_collision(ego, layout.route, throttle, positions, speeds, headings, config)
        collisions += oracle
        disagreements += predicted != oracle
    return CheckResult("shield", disagreements == 0,
                       f"{disagreements} disagreements over {scenes} scenes ({collisions} colliding scenes)")


# ============================================================
# Encoder
# ============================================================

def check_encoder_invariance(transforms: int = 10_000, seed: int = 0, roi: RoiSpec = RoiSpec()) -> CheckResult:
    rng = np.random.default_rng(seed)
    layout = build_layout("four-way")
    mismatches = 0
    for _ in range(transforms):
        ego = initial_ego(layout, speed=rng.uniform(0.0, 10.0), route_s=rng.uniform(0.0, layout.route.length))
        n = int(rng.integers(1, 12))
        positions = ego.position + rng.uniform(-12.0, 12.0, size=(n, 2))
        speeds = rng.uniform(*PEDESTRIAN_SPEED, size=n)
        headings = rng.uniform(0.0, 360.0, size=n)
        base = encode_state_tensor(positions, speeds, headings, ego, roi)

        angle = rng.uniform(-180.0, 180.0)
        shift = rng.uniform(-50.0, 50.0, size=2)
        c, s = np.cos(np.deg2rad(angle)), np.sin(np.deg2rad(angle))
        rot = np.array([[c, -s], [s, c]])
        x, y = rot @ ego.position + shift
        moved_ego = replace(ego, x=float(x), y=float(y), heading=ego.heading + angle)
        moved = encode_state_tensor(positions @ rot.T + shift, speeds, headings + angle, moved_ego, roi)
        mismatches += base.tobytes() != moved.tobytes()
    return CheckResult("encoder", mismatches == 0,
                       f"{mismatches} of {transforms} rigid transforms changed the state tensor")


# ============================================================
# Determinism
# ============================================================

def check_determinism(config: Config, episodes: int = 2) -> CheckResult:
    layout = layout_for(config)
    variant = VARIANTS["rule-based"]
    differing = 0
    for index in range(episodes):
        seed = episode_seed(config.seed, index)
        first = run_episode(variant, layout, ModelSet(), seed, config, index=index)
        second = run_episode(variant, layout, ModelSet(), seed, config, index=index)
        dump = [json.dumps(r, sort_keys=True) for r in first.rows]
        differing += dump != [json.dumps(r, sort_keys=True) for r in second.rows]
    return CheckResult("determinism", differing == 0, f"{differing} of {episodes} replayed episodes differed")


# ============================================================
# Runner
# ============================================================

SUITES = ("gradient", "per", "ddqn", "shield", "encoder", "determinism")


def run_selfcheck(config: Config = Config(), suites=None) -> list:
    checks = config.selfcheck
    runners = {
        "gradient": lambda: check_gradients(checks.gradient_nets, config.seed),
        "per": lambda: check_per_sampling(checks.per_draws, config.seed),
        "ddqn": check_ddqn_decoupling,
        "shield": lambda: check_shield_oracle(checks.shield_scenes, config.seed, config.shield),
        "encoder": lambda: check_encoder_invariance(checks.encoder_transforms, config.seed, config.roi),
        "determinism": lambda: check_determinism(config, checks.determinism_episodes),
    }
    results = []
    for name in suites or SUITES:
        if name not in runners:
            raise ValueError(f"unknown selfcheck suite '{name}', expected one of {list(SUITES)}")
        start = time.perf_counter()
        result = runners[name]()
        result = CheckResult(result.name, result.passed, result.detail, time.perf_counter() - start)
        log = logger.info if result.passed else logger.error
        log("%-12s %s  %s (%.1f s)", name, "ok" if result.passed else "FAILED", result.detail, result.seconds)
        results.append(result)
    return results

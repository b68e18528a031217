"""
Learned ego dynamics: dataset collection from the analytic model, an MLP
surrogate (5 -> 32 -> 32 -> 16 -> 3) and its acceptance check.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import load_checkpoint, network_from_tensors, network_tensors, save_checkpoint
from .errors import NonConvergenceError
from .scaling import MinMaxScaler
from .supervised import ModelConfig, dense_head, fit_supervised, predict_batched, progress_enabled, split_holdout
from .tensor_nn import NetworkParams, init_network
from .world_sim import EgoState, IntersectionLayout, Route, ego_dynamics_step, initial_ego

logger = logging.getLogger(__name__)

FEATURES = ["throttle", "x", "y", "speed", "curvature"]
TARGETS = ["next_x", "next_y", "next_speed"]
MAX_START_SPEED = 10.0
RELU_HEAD_KEY = "meta/relu_output"


def dynamics_layers(relu_output: bool = False) -> list:
    return dense_head("dyn_fc", [32, 32, 16, 3], relu_output=relu_output)


@dataclass(frozen=True, eq=False)
class DynamicsDataset:
    features: np.ndarray        # (N, 5) throttle, x, y, speed, curvature
    targets: np.ndarray         # (N, 3) x', y', speed'
    episode: np.ndarray

    def __len__(self):
        return len(self.features)

    @property
    def deltas(self) -> np.ndarray:
        return self.targets - self.features[:, 1:4]

    def feature_scaler(self) -> MinMaxScaler:
        return MinMaxScaler.fit(self.features)

    def delta_scaler(self) -> MinMaxScaler:
        return MinMaxScaler.fit(self.deltas)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(np.hstack([self.features, self.targets]), columns=FEATURES + TARGETS)
        frame.insert(0, "episode", self.episode)
        return frame


def state_features(ego: EgoState, throttle: float, route: Route) -> list:
    return [float(throttle), ego.x, ego.y, ego.speed, route.curvature_at(ego.route_index)]


def _random_ego(layout: IntersectionLayout, rng: np.random.Generator) -> EgoState:
    return initial_ego(layout, speed=rng.uniform(0.0, MAX_START_SPEED),
                       route_s=rng.uniform(0.0, 0.95 * layout.route.length))


def collect_dynamics_dataset(layout: IntersectionLayout, episodes: int = 2000, steps: int = 100,
                             seed: int = 0) -> DynamicsDataset:
    """
    Roll the analytic model under uniformly random throttle.

    Each episode starts at a random route position and speed; an episode that
    runs off the route end continues from a fresh random start.
    """
    rng = np.random.default_rng(seed)
    route = layout.route
    features = np.zeros((episodes * steps, 5))
    targets = np.zeros((episodes * steps, 3))
    episode_ids = np.repeat(np.arange(episodes), steps)
    row = 0
    for ep in tqdm(range(episodes), desc="dynamics data", disable=not progress_enabled()):
        ego = _random_ego(layout, rng)
        for _ in range(steps):
            throttle = rng.uniform(-1.0, 1.0)
            nxt = ego_dynamics_step(ego, throttle, route)
            while nxt.route_s >= route.length:
                ego = _random_ego(layout, rng)
                nxt = ego_dynamics_step(ego, throttle, route)
            features[row] = state_features(ego, throttle, route)
            targets[row] = (nxt.x, nxt.y, nxt.speed)
            ego = nxt
            row += 1
    return DynamicsDataset(features=features, targets=targets, episode=episode_ids)


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    net: NetworkParams
    inputs: MinMaxScaler
    deltas: MinMaxScaler

    def predict(self, features) -> np.ndarray:
        """Absolute (x', y', speed') for rows of (throttle, x, y, speed, curvature)."""
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        scaled = self.inputs.transform(features).astype(np.float32)
        delta = self.deltas.inverse_transform(predict_batched(self.net, scaled))
        return features[:, 1:4] + delta

    def step(self, ego: EgoState, throttle: float, route: Route) -> EgoState:
        """Drop-in replacement for ego_dynamics_step driven by the network."""
        x, y, speed = self.predict([state_features(ego, throttle, route)])[0]
        dx, dy = x - ego.x, y - ego.y
        moved = float(np.hypot(dx, dy))
        heading = float(np.rad2deg(np.arctan2(dy, dx)) % 360.0) if moved > 1e-6 else ego.heading
        s = min(ego.route_s + moved, route.length)
        return replace(ego, x=float(x), y=float(y), heading=heading, speed=max(float(speed), 0.0),
                       route_s=s, route_index=max(ego.route_index, route.index_at(s)))

    def to_tensors(self) -> dict:
        extra = {**self.inputs.to_tensors("norm/in"), **self.deltas.to_tensors("norm/delta"),
                 RELU_HEAD_KEY: [float(self.net.layers[-1].kind == "relu")]}
        return network_tensors(self.net, extra)


def evaluate_dynamics(model: DynamicsModel, layout: IntersectionLayout, states: int = 1000,
                      seed: int = 1) -> dict:
    """Compare the surrogate with the analytic model on random states."""
    rng = np.random.default_rng(seed)
    route = layout.route
    rows, truth = [], []
    for _ in range(states):
        ego = _random_ego(layout, rng)
        throttle = rng.uniform(-1.0, 1.0)
        nxt = ego_dynamics_step(ego, throttle, route)
        rows.append(state_features(ego, throttle, route))
        truth.append((nxt.x, nxt.y, nxt.speed))
    pred = model.predict(rows)
    truth = np.asarray(truth)
    position_error = np.hypot(pred[:, 0] - truth[:, 0], pred[:, 1] - truth[:, 1])
    return {
        "speed_rmse": float(np.sqrt(np.mean((pred[:, 2] - truth[:, 2]) ** 2))),
        "position_rmse": float(np.sqrt(np.mean(position_error ** 2))),
        "position_max": float(position_error.max()),
    }


def fit_dynamics_model(dataset: DynamicsDataset, layout: IntersectionLayout,
                       config: ModelConfig = ModelConfig(), seed: int = 0, check: bool = True):
    """
    Train the surrogate on normalized (features -> deltas).

    Returns:
        tuple: (DynamicsModel, metrics dict)

    Raises:
        NonConvergenceError: held-out speed RMSE or the worst oracle position error misses its threshold
    """
    in_scaler = dataset.feature_scaler()
    delta_scaler = dataset.delta_scaler()
    x = in_scaler.transform(dataset.features)
    y = delta_scaler.transform(dataset.deltas)
    train_idx, hold_idx = split_holdout(len(dataset), config.holdout_fraction, seed)

    net = init_network(dynamics_layers(config.relu_output_head), (5,), seed=seed)
    net, history = fit_supervised(net, x[train_idx], y[train_idx], config.dynamics_epochs, config.lr,
                                  config.batch_size, seed=seed, desc="dynamics")
    model = DynamicsModel(net=net, inputs=in_scaler, deltas=delta_scaler)

    held = model.predict(dataset.features[hold_idx])
    metrics = {"holdout_speed_rmse": float(np.sqrt(np.mean((held[:, 2] - dataset.targets[hold_idx, 2]) ** 2))),
               "final_loss": history[-1] if history else float("nan")}
    metrics.update(evaluate_dynamics(model, layout, seed=seed + 1))
    logger.info("dynamics model: holdout speed RMSE %.4f m/s, oracle position error %.4f m (max %.4f m)",
                metrics["holdout_speed_rmse"], metrics["position_rmse"], metrics["position_max"])
    if check:
        check_dynamics_metrics(metrics, config)
    return model, metrics


def check_dynamics_metrics(metrics: dict, config: ModelConfig = ModelConfig()):
    """Every oracle state must land within the position tolerance, not just on average."""
    if metrics["holdout_speed_rmse"] >= config.dynamics_speed_rmse:
        raise NonConvergenceError("holdout_speed_rmse", metrics["holdout_speed_rmse"], config.dynamics_speed_rmse)
    if metrics["position_max"] >= config.dynamics_position_error:
        raise NonConvergenceError("position_max", metrics["position_max"], config.dynamics_position_error)


def save_dynamics_model(model: DynamicsModel, path):
    return save_checkpoint(path, model.to_tensors())


def load_dynamics_model(path) -> DynamicsModel:
    tensors = load_checkpoint(path)
    relu_output = bool(tensors.get(RELU_HEAD_KEY, [0.0])[0])
    net = network_from_tensors(dynamics_layers(relu_output), (5,), 0, tensors)
    return DynamicsModel(net=net, inputs=MinMaxScaler.from_tensors(tensors, "norm/in"),
                         deltas=MinMaxScaler.from_tensors(tensors, "norm/delta"))

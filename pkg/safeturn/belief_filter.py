"""
Recurrent pedestrian models over 3-step noisy observation windows.

belief model: window -> denoised (x, y, v, heading) at the window's last step
future model: window -> position ``horizon`` steps after the last step

Both consume the window in a frame anchored at the last noisy position and
rotated to the last noisy heading.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np
import pandas as pd
from tqdm import tqdm

from .checkpoint import load_checkpoint, network_from_tensors, network_tensors, save_checkpoint
from .errors import MalformedWindowError, NonConvergenceError
from .geometry import wrap_degrees, wrap_signed_degrees
from .scaling import MinMaxScaler
from .supervised import ModelConfig, dense_head, fit_supervised, predict_batched, progress_enabled
from .tensor_nn import LayerSpec, NetworkParams, init_network
from .world_sim import (DT, NoiseConfig, IntersectionLayout, move_crowd, spawn_pedestrians)

logger = logging.getLogger(__name__)

WINDOW_STEPS = 3
WINDOW_FIELDS = 4                 # x, y, velocity, heading
FUTURE_HORIZON = 8                # virtual steps (8/15 s >= 0.5 s)
DATASET_COLUMNS = ["episode", "step", "clean_x", "clean_y", "clean_v", "clean_th",
                   "noisy_x", "noisy_y", "noisy_v", "noisy_th"]
META_KIND = "meta/kind"
META_HORIZON = "meta/horizon"
META_RELU = "meta/relu_output"
MODEL_KINDS = ("belief", "future")


@dataclass(frozen=True)
class PerceivedState:
    x: float
    y: float
    velocity: float
    heading: float


# ============================================================
# Dataset
# ============================================================

@dataclass(frozen=True, eq=False)
class PedestrianDataset:
    """Paired trajectories shaped (episodes, steps, 4): x, y, v, heading."""
    clean: np.ndarray
    noisy: np.ndarray

    @property
    def episodes(self) -> int:
        return self.clean.shape[0]

    @property
    def steps(self) -> int:
        return self.clean.shape[1]

    def to_frame(self) -> pd.DataFrame:
        e, s = np.meshgrid(np.arange(self.episodes), np.arange(self.steps), indexing="ij")
        data = np.column_stack([e.ravel(), s.ravel(), self.clean.reshape(-1, 4), self.noisy.reshape(-1, 4)])
        frame = pd.DataFrame(data, columns=DATASET_COLUMNS)
        return frame.astype({"episode": int, "step": int})

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "PedestrianDataset":
        frame = frame.sort_values(["episode", "step"])
        episodes = frame["episode"].nunique()
        clean = frame[DATASET_COLUMNS[2:6]].to_numpy().reshape(episodes, -1, 4)
        noisy = frame[DATASET_COLUMNS[6:]].to_numpy().reshape(episodes, -1, 4)
        return cls(clean=clean, noisy=noisy)


def add_observation_noise(clean, rng: np.random.Generator, noise: NoiseConfig) -> np.ndarray:
    clean = np.asarray(clean, dtype=float)
    noisy = clean.copy()
    noisy[..., 0:2] += rng.normal(0.0, 1.0, size=clean[..., 0:2].shape) * noise.sigma_position
    noisy[..., 2] += rng.normal(0.0, 1.0, size=clean[..., 2].shape) * noise.sigma_speed
    noisy[..., 3] = wrap_degrees(clean[..., 3] + rng.normal(0.0, 1.0, size=clean[..., 3].shape) * noise.sigma_heading)
    return noisy


def collect_pedestrian_dataset(layout: IntersectionLayout, episodes: int = 2000, steps: int = 400,
                               seed: int = 0, noise: NoiseConfig = NoiseConfig()) -> PedestrianDataset:
    """One pedestrian per episode walking crosswalk to crosswalk; noisy copy drawn per step."""
    rng = np.random.default_rng(seed)
    clean = np.zeros((episodes, steps, 4))
    for ep in tqdm(range(episodes), desc="pedestrian data", disable=not progress_enabled()):
        crowd = spawn_pedestrians(layout, rng, 1, first_id=0)
        for k in range(steps):
            clean[ep, k] = (crowd.position[0, 0], crowd.position[0, 1], crowd.speed[0], crowd.heading[0])
            crowd = move_crowd(crowd, None, layout, rng, DT)
    return PedestrianDataset(clean=clean, noisy=add_observation_noise(clean, rng, noise))


# ============================================================
# Windows and local frames
# ============================================================

def validate_windows(windows) -> np.ndarray:
    arr = np.asarray(windows, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (WINDOW_STEPS, WINDOW_FIELDS):
        raise MalformedWindowError(f"expected windows shaped (K, 3, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MalformedWindowError("window contains non-finite values")
    return arr


def sliding_windows(track: np.ndarray) -> np.ndarray:
    """All 3-step windows of a (steps, 4) track, back-filling before the first step."""
    steps = len(track)
    idx = np.arange(steps)[:, None] + np.arange(-WINDOW_STEPS + 1, 1)[None, :]
    return track[np.clip(idx, 0, steps - 1)]


def to_window_frame(windows: np.ndarray):
    """
    Express windows relative to their last sample.

    Returns:
        tuple: (features (K, 3, 4), anchor positions (K, 2), anchor headings (K,))
    """
    anchor = windows[:, -1, 0:2]
    heading = windows[:, -1, 3]
    c, s = np.cos(np.deg2rad(heading))[:, None], np.sin(np.deg2rad(heading))[:, None]
    rel = windows[:, :, 0:2] - anchor[:, None, :]
    feats = np.empty_like(windows)
    feats[:, :, 0] = rel[:, :, 0] * c + rel[:, :, 1] * s
    feats[:, :, 1] = -rel[:, :, 0] * s + rel[:, :, 1] * c
    feats[:, :, 2] = windows[:, :, 2]
    feats[:, :, 3] = wrap_signed_degrees(windows[:, :, 3] - heading[:, None])
    return feats, anchor, heading


def position_to_frame(points, anchor, heading) -> np.ndarray:
    rel = np.asarray(points, dtype=float) - anchor
    c, s = np.cos(np.deg2rad(heading)), np.sin(np.deg2rad(heading))
    return np.column_stack([rel[:, 0] * c + rel[:, 1] * s, -rel[:, 0] * s + rel[:, 1] * c])


def position_from_frame(local, anchor, heading) -> np.ndarray:
    local = np.asarray(local, dtype=float)
    c, s = np.cos(np.deg2rad(heading)), np.sin(np.deg2rad(heading))
    return anchor + np.column_stack([local[:, 0] * c - local[:, 1] * s, local[:, 0] * s + local[:, 1] * c])


def least_squares_current(windows) -> np.ndarray:
    """Linear least-squares fit over the 3 noisy positions, evaluated at the last step."""
    w = validate_windows(windows)
    p = w[:, :, 0:2]
    # fitted value at t for samples at t-2, t-1, t
    return (-p[:, 0] + 2.0 * p[:, 1] + 5.0 * p[:, 2]) / 6.0


def constant_velocity_predict(window, horizon: int = FUTURE_HORIZON, dt: float = DT) -> np.ndarray:
    """Least-squares velocity of the 3 samples, extrapolated ``horizon`` steps past the last one."""
    w = validate_windows(window)
    p = w[:, :, 0:2]
    velocity = (p[:, 2] - p[:, 0]) / (2.0 * dt)
    out = p[:, 2] + velocity * horizon * dt
    return out[0] if np.ndim(window) == 2 else out


# ============================================================
# Models
# ============================================================

def recurrent_layers(kind: str, units: int = 32, relu_output: bool = False) -> list:
    outputs = 4 if kind == "belief" else 2
    return [LayerSpec("lstm-cell", f"{kind}_lstm", units=units)] + dense_head(f"{kind}_fc", [outputs], relu_output)


@dataclass(frozen=True, eq=False)
class RecurrentModel:
    kind: str
    net: NetworkParams
    inputs: MinMaxScaler
    outputs: MinMaxScaler
    horizon: int = FUTURE_HORIZON

    def _raw(self, windows: np.ndarray):
        feats, anchor, heading = to_window_frame(windows)
        scaled = self.inputs.transform(feats.reshape(-1, WINDOW_FIELDS)).reshape(feats.shape)
        out = self.outputs.inverse_transform(predict_batched(self.net, scaled.astype(np.float32)))
        return out, anchor, heading

    def perceive_array(self, windows) -> np.ndarray:
        """(K, 4) perceived x, y, v, heading."""
        windows = validate_windows(windows)
        if self.kind != "belief":
            raise ValueError("perceive needs a belief model")
        if len(windows) == 0:
            return np.zeros((0, 4))
        out, anchor, heading = self._raw(windows)
        xy = position_from_frame(out[:, 0:2], anchor, heading)
        return np.column_stack([xy, out[:, 2], wrap_degrees(heading + out[:, 3])])

    def perceive(self, windows) -> list:
        return [PerceivedState(*map(float, row)) for row in self.perceive_array(windows)]

    def predict(self, windows) -> np.ndarray:
        """(K, 2) predicted positions ``horizon`` steps ahead."""
        windows = validate_windows(windows)
        if self.kind != "future":
            raise ValueError("predict needs a future model")
        if len(windows) == 0:
            return np.zeros((0, 2))
        out, anchor, heading = self._raw(windows)
        return position_from_frame(out, anchor, heading)

    def to_tensors(self) -> dict:
        extra = {**self.inputs.to_tensors("norm/in"), **self.outputs.to_tensors("norm/out"),
                 META_KIND: [float(MODEL_KINDS.index(self.kind))], META_HORIZON: [float(self.horizon)],
                 META_RELU: [float(self.net.layers[-1].kind == "relu")]}
        return network_tensors(self.net, extra)


def save_recurrent_model(model: RecurrentModel, path):
    return save_checkpoint(path, model.to_tensors())


def load_recurrent_model(path, units: int = 32) -> RecurrentModel:
    tensors = load_checkpoint(path)
    kind = MODEL_KINDS[int(tensors[META_KIND][0])]
    relu = bool(tensors[META_RELU][0])
    net = network_from_tensors(recurrent_layers(kind, units, relu), (WINDOW_STEPS, WINDOW_FIELDS), 0, tensors)
    return RecurrentModel(kind=kind, net=net, inputs=MinMaxScaler.from_tensors(tensors, "norm/in"),
                          outputs=MinMaxScaler.from_tensors(tensors, "norm/out"),
                          horizon=int(tensors[META_HORIZON][0]))


# ============================================================
# Training
# ============================================================

def _episode_split(dataset: PedestrianDataset, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.episodes)
    n_hold = max(1, int(round(dataset.episodes * fraction)))
    return np.sort(order[n_hold:]), np.sort(order[:n_hold])


def build_windows(dataset: PedestrianDataset, episodes, horizon: int = 0):
    """Noisy windows plus the clean rows at the last step and ``horizon`` steps later."""
    last = dataset.steps - horizon
    windows, current, future = [], [], []
    for ep in episodes:
        windows.append(sliding_windows(dataset.noisy[ep])[:last])
        current.append(dataset.clean[ep, :last])
        future.append(dataset.clean[ep, horizon:])
    return np.concatenate(windows), np.concatenate(current), np.concatenate(future)


def axis_rmse(pred, truth) -> float:
    """Per-axis position RMSE (pooled over x and y)."""
    return float(np.sqrt(np.mean((np.asarray(pred)[:, 0:2] - np.asarray(truth)[:, 0:2]) ** 2)))


def _fit(kind: str, feats: np.ndarray, targets: np.ndarray, config: ModelConfig, epochs: int,
         seed: int, horizon: int) -> RecurrentModel:
    in_scaler = MinMaxScaler.fit(feats.reshape(-1, WINDOW_FIELDS))
    out_scaler = MinMaxScaler.fit(targets)
    x = in_scaler.transform(feats.reshape(-1, WINDOW_FIELDS)).reshape(feats.shape)
    y = out_scaler.transform(targets)
    net = init_network(recurrent_layers(kind, config.hidden_units, config.relu_output_head),
                       (WINDOW_STEPS, WINDOW_FIELDS), seed=seed)
    net, _ = fit_supervised(net, x, y, epochs, config.lr, config.batch_size, seed=seed, desc=kind)
    return RecurrentModel(kind=kind, net=net, inputs=in_scaler, outputs=out_scaler, horizon=horizon)


def train_belief_model(dataset: PedestrianDataset, config: ModelConfig = ModelConfig(), seed: int = 0,
                       check: bool = True):
    """
    Train the denoiser and compare it with raw observations and the least-squares oracle.

    Returns:
        tuple: (RecurrentModel, metrics dict)

    Raises:
        NonConvergenceError: held-out RMSE misses the raw-noise floor or the oracle margin
    """
    train_eps, hold_eps = _episode_split(dataset, config.holdout_fraction, seed)
    windows, clean, _ = build_windows(dataset, train_eps)
    feats, anchor, heading = to_window_frame(windows)
    targets = np.column_stack([position_to_frame(clean[:, 0:2], anchor, heading), clean[:, 2],
                               wrap_signed_degrees(clean[:, 3] - heading)])
    model = _fit("belief", feats, targets, config, config.belief_epochs, seed, horizon=0)

    h_windows, h_clean, _ = build_windows(dataset, hold_eps)
    perceived = model.perceive_array(h_windows)
    metrics = {
        "model_rmse": axis_rmse(perceived, h_clean),
        "raw_rmse": axis_rmse(h_windows[:, -1], h_clean),
        "oracle_rmse": axis_rmse(least_squares_current(h_windows), h_clean),
    }
    metrics["denoising_factor"] = metrics["raw_rmse"] / max(metrics["model_rmse"], 1e-12)
    logger.info("belief model: held-out RMSE %.3f m (raw %.3f m, least-squares %.3f m, factor %.2f)",
                metrics["model_rmse"], metrics["raw_rmse"], metrics["oracle_rmse"], metrics["denoising_factor"])
    if metrics["denoising_factor"] < 2.0:
        logger.warning("belief denoising factor %.2f is below the 2.0 target", metrics["denoising_factor"])
    if check:
        floor = metrics["raw_rmse"] / config.belief_factor_floor
        if metrics["model_rmse"] > floor:
            raise NonConvergenceError("belief_rmse", metrics["model_rmse"], floor)
        ceiling = metrics["oracle_rmse"] * (1.0 + config.belief_oracle_margin)
        if metrics["model_rmse"] > ceiling:
            raise NonConvergenceError("belief_rmse_vs_oracle", metrics["model_rmse"], ceiling)
    return model, metrics


def train_future_model(dataset: PedestrianDataset, config: ModelConfig = ModelConfig(), seed: int = 0,
                       check: bool = True):
    """
    Train the future-position predictor on clean positions ``config.future_horizon`` steps ahead.

    Returns:
        tuple: (RecurrentModel, metrics dict)
    """
    horizon = config.future_horizon
    train_eps, hold_eps = _episode_split(dataset, config.holdout_fraction, seed)
    windows, _, future = build_windows(dataset, train_eps, horizon)
    feats, anchor, heading = to_window_frame(windows)
    targets = position_to_frame(future[:, 0:2], anchor, heading)
    model = _fit("future", feats, targets, config, config.future_epochs, seed, horizon=horizon)

    h_windows, _, h_future = build_windows(dataset, hold_eps, horizon)
    metrics = {
        "model_rmse": axis_rmse(model.predict(h_windows), h_future),
        "current_position_rmse": axis_rmse(h_windows[:, -1], h_future),
        "constant_velocity_rmse": axis_rmse(constant_velocity_predict(h_windows, horizon), h_future),
    }
    logger.info("future model: held-out RMSE %.3f m (hold-position %.3f m, constant velocity %.3f m)",
                metrics["model_rmse"], metrics["current_position_rmse"], metrics["constant_velocity_rmse"])
    if check:
        if metrics["model_rmse"] >= metrics["current_position_rmse"]:
            raise NonConvergenceError("future_rmse_vs_hold", metrics["model_rmse"], metrics["current_position_rmse"])
        if metrics["model_rmse"] > config.future_rmse:
            raise NonConvergenceError("future_rmse", metrics["model_rmse"], config.future_rmse)
    return model, metrics


# ============================================================
# Online observation history
# ============================================================

class ObservationHistory:
    """Last three noisy observations per pedestrian id."""

    def __init__(self):
        self._tracks = {}

    def update(self, ids, position, speed, heading):
        for k, pid in enumerate(np.asarray(ids).tolist()):
            track = self._tracks.setdefault(pid, deque(maxlen=WINDOW_STEPS))
            track.append((position[k][0], position[k][1], speed[k], heading[k]))

    def windows(self, ids) -> np.ndarray:
        """(K, 3, 4) windows for ``ids``, back-filled with each track's earliest sample."""
        out = np.zeros((len(ids), WINDOW_STEPS, WINDOW_FIELDS))
        for k, pid in enumerate(np.asarray(ids).tolist()):
            track = list(self._tracks[pid])
            track = [track[0]] * (WINDOW_STEPS - len(track)) + track
            out[k] = track
        return out

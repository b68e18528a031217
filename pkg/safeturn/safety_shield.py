"""
Rollout-based action masking.

The nominated throttle is held for ``virtual_steps`` virtual ticks; pedestrians
move on straight lines to their predicted endpoints. A predicted footprint gap
below ``distance_threshold`` replaces the action with full brake.

A second rollout applies the nominated throttle for one tick and then the
fallback until the ego stops (at most ``stopping_steps`` ticks). The nominated
action passes only when that escape is clear as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Optional

import numpy as np

from .belief_filter import FUTURE_HORIZON, constant_velocity_predict
from .errors import TrajectoryLengthError
from .geometry import point_rect_distance
from .world_sim import DT, EgoState, Route, ego_dynamics_step

logger = logging.getLogger(__name__)

Dynamics = Callable[[EgoState, float, Route], EgoState]


@dataclass(frozen=True)
class ShieldConfig:
    window: float = 0.5
    virtual_dt: float = DT
    virtual_steps: int = FUTURE_HORIZON
    distance_threshold: float = 0.5
    fallback_action: float = -1.0
    stopping_steps: int = 30
    use_trained_dynamics: bool = False
    ground_truth: bool = False

    def __post_init__(self):
        if self.virtual_steps * self.virtual_dt < self.window - 1e-9:
            raise ValueError("virtual_steps * virtual_dt must cover the window")
        if self.distance_threshold <= 0:
            raise ValueError("distance_threshold must be positive")
        if self.stopping_steps < 0:
            raise ValueError("stopping_steps must be >= 0 (0 disables the stopping check)")


@dataclass(frozen=True)
class CollisionPrediction:
    collision: bool
    step: Optional[int] = None
    pedestrian: Optional[int] = None
    min_distance: float = float("inf")
    rollout: Optional[str] = None


@dataclass(frozen=True)
class ShieldDecision:
    executed: float
    nominated: float
    intervened: bool
    prediction: CollisionPrediction


def analytic_dynamics(config: ShieldConfig = ShieldConfig()) -> Dynamics:
    """The analytic ego model stepped at the shield's virtual tick."""
    return partial(ego_dynamics_step, dt=config.virtual_dt)


def rollout_ego(ego: EgoState, throttle: float, route: Route, dynamics: Optional[Dynamics] = None,
                config: ShieldConfig = ShieldConfig()) -> list:
    """Poses for virtual steps 0..K under a held throttle (step 0 is the current pose)."""
    dynamics = dynamics or analytic_dynamics(config)
    poses = [ego]
    for _ in range(config.virtual_steps):
        poses.append(dynamics(poses[-1], throttle, route))
    return poses


def rollout_stopping(ego: EgoState, throttle: float, route: Route, dynamics: Optional[Dynamics] = None,
                     config: ShieldConfig = ShieldConfig()) -> list:
    """
    Poses for one tick of ``throttle`` followed by the fallback action.

    Stops at the first standing pose or after ``stopping_steps`` ticks,
    whichever comes first. Step 0 is the current pose.
    """
    dynamics = dynamics or analytic_dynamics(config)
    poses = [ego, dynamics(ego, throttle, route)]
    while len(poses) <= config.stopping_steps and poses[-1].speed > 0.0:
        poses.append(dynamics(poses[-1], config.fallback_action, route))
    return poses


def rollout_pedestrians(current, endpoints, config: ShieldConfig = ShieldConfig(),
                        steps: Optional[int] = None) -> np.ndarray:
    """
    Straight-line, constant-speed motion from current positions through the endpoints.

    The endpoints are reached at virtual step K; later steps extrapolate.

    Returns:
        array: (P, steps + 1, 2)
    """
    steps = config.virtual_steps if steps is None else steps
    current = np.asarray(current, dtype=float).reshape(-1, 2)
    endpoints = np.asarray(endpoints, dtype=float).reshape(-1, 2)
    frac = np.arange(steps + 1) / config.virtual_steps
    return current[:, None, :] + frac[None, :, None] * (endpoints - current)[:, None, :]


def predicts_collision(ego_traj: list, ped_trajs, config: ShieldConfig = ShieldConfig(),
                       ped_ids=None) -> CollisionPrediction:
    """
    Smallest footprint-to-pedestrian gap over the window; a collision when it drops below the threshold.

    Raises:
        TrajectoryLengthError: ego and pedestrian trajectories differ in length
    """
    ped_trajs = np.asarray(ped_trajs, dtype=float)
    if len(ped_trajs) == 0:
        return CollisionPrediction(collision=False)
    if ped_trajs.shape[1] != len(ego_traj):
        raise TrajectoryLengthError(f"ego covers {len(ego_traj)} steps, pedestrians {ped_trajs.shape[1]}")
    gaps = np.stack([point_rect_distance(ped_trajs[:, k], pose.position, pose.heading)
                     for k, pose in enumerate(ego_traj)], axis=1)
    p, k = np.unravel_index(int(np.argmin(gaps)), gaps.shape)
    min_gap = float(gaps[p, k])
    hits = np.argwhere(gaps < config.distance_threshold)
    if len(hits) == 0:
        return CollisionPrediction(collision=False, min_distance=min_gap)
    # earliest offending step
    hit_p, hit_k = hits[np.lexsort((hits[:, 0], hits[:, 1]))[0]]
    pid = int(ped_ids[hit_p]) if ped_ids is not None else int(hit_p)
    return CollisionPrediction(collision=True, step=int(hit_k), pedestrian=pid, min_distance=min_gap)


@dataclass(frozen=True, eq=False)
class WorldView:
    """What the shield sees: ego pose, pedestrian positions now and their predicted endpoints."""
    ego: EgoState
    route: Route
    ped_ids: np.ndarray
    current: np.ndarray
    endpoints: np.ndarray


def filter_action(nominated: float, view: WorldView, dynamics: Optional[Dynamics] = None,
                  config: ShieldConfig = ShieldConfig()) -> ShieldDecision:
    """
    Pass the nominated throttle through unless a rollout predicts a collision.

    The held-throttle window is checked first; ``prediction.rollout`` names the
    rollout that fired ("window" or "stopping"). Without ``dynamics`` the
    analytic model runs at ``config.virtual_dt``.
    """
    dynamics = dynamics or analytic_dynamics(config)
    ego_traj = rollout_ego(view.ego, nominated, view.route, dynamics, config)
    ped_trajs = rollout_pedestrians(view.current, view.endpoints, config)
    prediction = predicts_collision(ego_traj, ped_trajs, config, view.ped_ids)
    if prediction.collision:
        prediction = replace(prediction, rollout="window")
    elif config.stopping_steps:
        escape = rollout_stopping(view.ego, nominated, view.route, dynamics, config)
        stopping = predicts_collision(escape, rollout_pedestrians(view.current, view.endpoints, config,
                                                                  len(escape) - 1), config, view.ped_ids)
        if stopping.collision:
            prediction = replace(stopping, rollout="stopping")
    if not prediction.collision:
        return ShieldDecision(executed=nominated, nominated=nominated, intervened=False, prediction=prediction)
    logger.debug("shield: pedestrian %s within %.2f m at virtual step %s of the %s rollout, throttle %.1f -> %.1f",
                 prediction.pedestrian, prediction.min_distance, prediction.step, prediction.rollout, nominated,
                 config.fallback_action)
    return ShieldDecision(executed=config.fallback_action, nominated=nominated, intervened=True,
                          prediction=prediction)


def constant_velocity_view(ego: EgoState, route: Route, ped_ids, windows,
                           config: ShieldConfig = ShieldConfig()) -> WorldView:
    """WorldView whose endpoints come from constant_velocity_predict instead of a trained model."""
    windows = np.asarray(windows, dtype=float).reshape(-1, 3, 4)
    if len(windows) == 0:
        empty = np.zeros((0, 2))
        return WorldView(ego, route, np.zeros(0, dtype=np.int64), empty, empty)
    endpoints = constant_velocity_predict(windows, config.virtual_steps, config.virtual_dt)
    return WorldView(ego, route, np.asarray(ped_ids), windows[:, -1, 0:2].copy(), endpoints)


def ground_truth_collision(ego: EgoState, route: Route, throttle: float, positions, speeds, headings,
                           config: ShieldConfig = ShieldConfig()) -> bool:
    """Brute-force oracle: step true constant-velocity pedestrians alongside the analytic ego rollouts."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    rad = np.deg2rad(np.asarray(headings, dtype=float))
    velocity = np.column_stack([np.cos(rad), np.sin(rad)]) * np.asarray(speeds, dtype=float)[:, None]
    rollouts = [rollout_ego(ego, throttle, route, config=config)]
    if config.stopping_steps:
        rollouts.append(rollout_stopping(ego, throttle, route, config=config))
    for poses in rollouts:
        for k, pose in enumerate(poses):
            current = positions + velocity * k * config.virtual_dt
            if len(current) and np.any(point_rect_distance(current, pose.position, pose.heading)
                                       < config.distance_threshold):
                return True
    return False

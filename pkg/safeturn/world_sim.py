"""
2D kinematic intersection: layouts, ego route following, pedestrian crowd,
observation noise, reward and terminal events.

Frame: junction box centered at the origin, x east, y north, headings in
degrees counter-clockwise from +x. The ego approaches from the south in the
northbound lane and turns left into the westbound lane.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import StepAfterTerminalError
from .geometry import (EGO_LENGTH, EGO_WIDTH, front_bumper_corners, point_rect_distance,
                       wrap_degrees)

logger = logging.getLogger(__name__)

# ============================================================
# Constants
# ============================================================

FPS = 15
DT = 1.0 / FPS
EPISODE_SECONDS = 45.0
MAX_STEPS = int(EPISODE_SECONDS * FPS)          # 675
SPAWN_PERIOD_STEPS = 10 * FPS                   # 150
SPAWN_BATCH = 5
INITIAL_PEDESTRIANS = (5, 30)
PEDESTRIAN_SPEED = (0.2, 1.8)
ROUTE_WAYPOINTS = 100

SPEED_CAP = 12.0
DRIVE_ACCEL = 3.5
BRAKE_DECEL = 8.0

COLLISION_RADIUS = 0.3
PEDESTRIAN_CLEARANCE = 0.4
SPAWN_CLEARANCE = 1.0

# Junction geometry per topology (m)
LAYOUTS = {
    "four-way": {
        "box_width": 22.0,
        "box_height": 22.0,
        "arms": ("south", "north", "east", "west"),
    },
    "three-way": {
        "box_width": 26.0,
        "box_height": 20.0,
        "arms": ("south", "east", "west"),
    },
}

LAYOUT_DEFAULTS = {
    "lane_offset": 1.75,
    "approach_length": 15.0,
    "exit_length": 10.0,
    "crosswalk_offset": 2.0,
    "crosswalk_width": 3.0,
    "crosswalk_half_span": 5.0,
}


# ============================================================
# Layout and route
# ============================================================

class Route:
    """Waypoint polyline the ego is locked to."""

    def __init__(self, waypoints):
        self.waypoints = np.asarray(waypoints, dtype=np.float64)
        seg = np.diff(self.waypoints, axis=0)
        self.segment_lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(self.segment_lengths <= 0):
            raise ValueError("route waypoints must be strictly spaced")
        self.cumulative = np.concatenate([[0.0], np.cumsum(self.segment_lengths)])
        self.headings = wrap_degrees(np.rad2deg(np.arctan2(seg[:, 1], seg[:, 0])))

    def __len__(self):
        return len(self.waypoints)

    @property
    def length(self) -> float:
        return float(self.cumulative[-1])

    @property
    def goal_index(self) -> int:
        return len(self.waypoints) - 1

    def _segment(self, s: float) -> int:
        idx = int(np.searchsorted(self.cumulative, s, side="right")) - 1
        return min(max(idx, 0), len(self.segment_lengths) - 1)

    def index_at(self, s: float) -> int:
        idx = int(np.searchsorted(self.cumulative, s + 1e-9, side="right")) - 1
        return min(max(idx, 0), self.goal_index)

    def pose_at(self, s: float):
        """(x, y, heading) at arc length ``s`` (clamped to the route)."""
        s = min(max(float(s), 0.0), self.length)
        i = self._segment(s)
        frac = (s - self.cumulative[i]) / self.segment_lengths[i]
        xy = self.waypoints[i] + frac * (self.waypoints[i + 1] - self.waypoints[i])
        return float(xy[0]), float(xy[1]), float(self.headings[i])

    def remaining(self, s: float) -> float:
        return max(self.length - float(s), 0.0)

    def curvature_at(self, index: int) -> float:
        """Signed curvature (1/m, left positive) at a waypoint."""
        i = min(max(int(index), 1), len(self.headings) - 1)
        turn = (self.headings[i] - self.headings[i - 1] + 180.0) % 360.0 - 180.0
        return float(np.deg2rad(turn) / (0.5 * (self.segment_lengths[i] + self.segment_lengths[i - 1])))


def _resample(path: np.ndarray, count: int) -> np.ndarray:
    seg = np.hypot(*np.diff(path, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, cum[-1], count)
    return np.column_stack([np.interp(targets, cum, path[:, 0]), np.interp(targets, cum, path[:, 1])])


@dataclass(frozen=True)
class IntersectionLayout:
    kind: str
    box_width: float
    box_height: float
    arms: tuple
    lane_offset: float
    approach_length: float
    exit_length: float
    crosswalk_offset: float
    crosswalk_width: float
    crosswalk_half_span: float
    route: Route = field(compare=False)
    crosswalks: tuple = field(compare=False)

    @property
    def arm_lengths(self) -> dict:
        return {"approach": self.approach_length, "exit": self.exit_length}

    @property
    def crosswalk_endpoints(self) -> np.ndarray:
        return np.array([p for seg in self.crosswalks for p in seg])


def _crosswalk_segments(arms, half_w, half_h, offset, width, half_span):
    center = offset + width / 2.0
    segments = []
    for arm in arms:
        if arm == "south":
            y = -half_h - center
            segments.append(((-half_span, y), (half_span, y)))
        elif arm == "north":
            y = half_h + center
            segments.append(((-half_span, y), (half_span, y)))
        elif arm == "east":
            x = half_w + center
            segments.append(((x, -half_span), (x, half_span)))
        elif arm == "west":
            x = -half_w - center
            segments.append(((x, -half_span), (x, half_span)))
    return tuple(tuple(np.array(p, dtype=float) for p in seg) for seg in segments)


def build_layout(kind: str = "four-way", **overrides) -> IntersectionLayout:
    """
    Build an intersection and its 100-waypoint left-turn route.

    Route: straight approach to the box edge, quarter circle about the box's
    south-west corner, straight exit beyond the west edge.
    """
    if kind not in LAYOUTS:
        raise ValueError(f"unknown layout '{kind}', expected one of {sorted(LAYOUTS)}")
    geo = {**LAYOUT_DEFAULTS, **LAYOUTS[kind], **overrides}
    half_w = geo["box_width"] / 2.0
    half_h = geo["box_height"] / 2.0
    lane = geo["lane_offset"]

    radius = lane + half_w
    center = np.array([-half_w, -half_h])
    approach = np.column_stack([np.full(50, lane), np.linspace(-half_h - geo["approach_length"], -half_h, 50)])
    angles = np.linspace(0.0, np.pi / 2.0, 200)
    arc = center + radius * np.column_stack([np.cos(angles), np.sin(angles)])
    exit_y = center[1] + radius
    exit_leg = np.column_stack([np.linspace(-half_w, -half_w - geo["exit_length"], 50), np.full(50, exit_y)])
    path = np.vstack([approach[:-1], arc, exit_leg[1:]])
    route = Route(_resample(path, ROUTE_WAYPOINTS))

    crosswalks = _crosswalk_segments(geo["arms"], half_w, half_h, geo["crosswalk_offset"],
                                     geo["crosswalk_width"], geo["crosswalk_half_span"])
    return IntersectionLayout(kind=kind, route=route, crosswalks=crosswalks, **geo)


# ============================================================
# Agents
# ============================================================

@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    heading: float
    speed: float
    route_s: float = 0.0
    route_index: int = 0
    length: float = EGO_LENGTH
    width: float = EGO_WIDTH

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Pedestrian:
    id: int
    position: tuple
    velocity: float
    heading: float
    destination: tuple


@dataclass(frozen=True, eq=False)
class Crowd:
    """Column store of pedestrian states."""
    ids: np.ndarray
    position: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    destination: np.ndarray

    @classmethod
    def empty(cls) -> "Crowd":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, 2)))

    def __len__(self):
        return len(self.ids)

    def append(self, other: "Crowd") -> "Crowd":
        return Crowd(np.concatenate([self.ids, other.ids]),
                     np.vstack([self.position, other.position]),
                     np.concatenate([self.speed, other.speed]),
                     np.concatenate([self.heading, other.heading]),
                     np.vstack([self.destination, other.destination]))

    def rows(self) -> list:
        return [Pedestrian(int(i), tuple(p), float(v), float(h), tuple(d))
                for i, p, v, h, d in zip(self.ids, self.position, self.speed, self.heading, self.destination)]


@dataclass(frozen=True)
class StepEvents:
    collision: bool = False
    goal: bool = False
    timeout: bool = False
    speed_violation: bool = False
    spawned: int = 0
    collided_ids: tuple = ()

    @property
    def terminal(self) -> bool:
        return self.collision or self.goal or self.timeout


@dataclass(frozen=True, eq=False)
class WorldState:
    time: float
    step_index: int
    ego: EgoState
    crowd: Crowd
    layout: IntersectionLayout
    rng_state: dict
    next_id: int
    events: StepEvents = StepEvents()
    terminal: bool = False
    spawn_batch: int = SPAWN_BATCH

    @property
    def pedestrians(self) -> list:
        return self.crowd.rows()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.array([self.time, self.step_index, self.next_id], dtype=np.float64).tobytes())
        h.update(np.array([self.ego.x, self.ego.y, self.ego.heading, self.ego.speed,
                           self.ego.route_s, self.ego.route_index], dtype=np.float64).tobytes())
        for arr in (self.crowd.ids, self.crowd.position, self.crowd.speed, self.crowd.heading,
                    self.crowd.destination):
            h.update(np.ascontiguousarray(arr).tobytes())
        h.update(repr(self.rng_state).encode())
        return h.hexdigest()


def _generator(state: dict) -> np.random.Generator:
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = state
    return rng


def _bearing(src, dst) -> np.ndarray:
    d = np.asarray(dst) - np.asarray(src)
    return wrap_degrees(np.rad2deg(np.arctan2(d[..., 1], d[..., 0])))


def spawn_pedestrians(layout: IntersectionLayout, rng: np.random.Generator, count: int,
                       first_id: int, ego: Optional[EgoState] = None) -> Crowd:
    endpoints = layout.crosswalk_endpoints
    positions = np.zeros((count, 2))
    destinations = np.zeros((count, 2))
    for k in range(count):
        for _ in range(20):
            seg = layout.crosswalks[rng.integers(len(layout.crosswalks))]
            t = rng.uniform()
            pos = seg[0] + t * (seg[1] - seg[0])
            if ego is None or point_rect_distance(pos, ego.position, ego.heading) > SPAWN_CLEARANCE:
                break
        positions[k] = pos
        dest = endpoints[rng.integers(len(endpoints))]
        while np.allclose(dest, pos):
            dest = endpoints[rng.integers(len(endpoints))]
        destinations[k] = dest
    speeds = rng.uniform(*PEDESTRIAN_SPEED, size=count)
    ids = np.arange(first_id, first_id + count, dtype=np.int64)
    return Crowd(ids, positions, speeds, _bearing(positions, destinations).reshape(count), destinations)


def initial_ego(layout: IntersectionLayout, speed: float = 0.0, route_s: float = 0.0) -> EgoState:
    x, y, heading = layout.route.pose_at(route_s)
    return EgoState(x=x, y=y, heading=heading, speed=float(speed), route_s=float(route_s),
                    route_index=layout.route.index_at(route_s))


# ============================================================
# Operations
# ============================================================

def reset(layout: IntersectionLayout, seed: int, pedestrians: Optional[int] = None,
          spawn_batch: int = SPAWN_BATCH) -> WorldState:
    """
    Ego at route start, at rest; 5-30 pedestrians on the crosswalks.

    ``pedestrians`` fixes the initial count and ``spawn_batch`` the size of the
    periodic injections (0 gives a world that stays empty).
    """
    rng = np.random.default_rng(seed)
    count = int(rng.integers(INITIAL_PEDESTRIANS[0], INITIAL_PEDESTRIANS[1] + 1))
    if pedestrians is not None:
        count = int(pedestrians)
    ego = initial_ego(layout)
    crowd = spawn_pedestrians(layout, rng, count, first_id=0, ego=ego)
    return WorldState(time=0.0, step_index=0, ego=ego, crowd=crowd, layout=layout,
                      rng_state=rng.bit_generator.state, next_id=count, spawn_batch=spawn_batch)


def ego_dynamics_step(ego: EgoState, throttle: float, route: Route, dt: float = DT) -> EgoState:
    """Analytic longitudinal model; steering follows the route polyline."""
    throttle = float(np.clip(throttle, -1.0, 1.0))
    accel = DRIVE_ACCEL * throttle if throttle >= 0 else BRAKE_DECEL * throttle
    speed = min(max(ego.speed + accel * dt, 0.0), SPEED_CAP)
    s = min(ego.route_s + speed * dt, route.length)
    x, y, heading = route.pose_at(s)
    return replace(ego, x=x, y=y, heading=heading, speed=speed, route_s=s,
                   route_index=max(ego.route_index, route.index_at(s)))


def move_crowd(crowd: Crowd, ego: Optional[EgoState], layout: IntersectionLayout,
                rng: np.random.Generator, dt: float) -> Crowd:
    if len(crowd) == 0:
        return crowd
    endpoints = layout.crosswalk_endpoints
    position = crowd.position.copy()
    destination = crowd.destination.copy()
    heading = crowd.heading.copy()
    for k in range(len(crowd)):
        to_dest = destination[k] - position[k]
        dist = float(np.hypot(*to_dest))
        stride = crowd.speed[k] * dt
        arrived = dist <= stride
        proposal = destination[k] if arrived else position[k] + to_dest / dist * stride
        if ego is not None and point_rect_distance(proposal, ego.position, ego.heading) <= PEDESTRIAN_CLEARANCE:
            arrived = True
            proposal = position[k]
        position[k] = proposal
        if arrived:
            choices = endpoints[~np.all(np.isclose(endpoints, proposal), axis=1)]
            destination[k] = choices[rng.integers(len(choices))]
        heading[k] = float(_bearing(position[k], destination[k]))
    return replace(crowd, position=position, heading=heading, destination=destination)


def step(world: WorldState, throttle: float, speed_limit: float = 10.0):
    """
    Advance one 1/15 s tick.

    Returns:
        tuple: (world', events)

    Raises:
        StepAfterTerminalError: the episode has already ended
    """
    if world.terminal:
        raise StepAfterTerminalError(f"episode ended at step {world.step_index}")
    rng = _generator(world.rng_state)
    layout = world.layout
    ego = ego_dynamics_step(world.ego, throttle, layout.route)
    crowd = move_crowd(world.crowd, ego, layout, rng, DT)

    step_index = world.step_index + 1
    spawned = 0
    next_id = world.next_id
    if step_index % SPAWN_PERIOD_STEPS == 0 and world.spawn_batch > 0:
        crowd = crowd.append(spawn_pedestrians(layout, rng, world.spawn_batch, next_id, ego))
        spawned = world.spawn_batch
        next_id += spawned
        logger.debug("spawned %d pedestrians at t=%.2f s", spawned, step_index * DT)

    collided = ()
    if len(crowd):
        gaps = point_rect_distance(crowd.position, ego.position, ego.heading)
        collided = tuple(int(i) for i in crowd.ids[gaps <= COLLISION_RADIUS])
    collision = len(collided) > 0
    goal = ego.route_index >= layout.route.goal_index and not collision
    timeout = step_index >= MAX_STEPS and not (collision or goal)
    events = StepEvents(collision=collision, goal=goal, timeout=timeout,
                        speed_violation=ego.speed > speed_limit, spawned=spawned, collided_ids=collided)
    new_world = WorldState(time=step_index / FPS, step_index=step_index, ego=ego, crowd=crowd,
                           layout=layout, rng_state=rng.bit_generator.state, next_id=next_id,
                           events=events, terminal=events.terminal, spawn_batch=world.spawn_batch)
    return new_world, events


# ============================================================
# Observation noise
# ============================================================

@dataclass(frozen=True)
class NoiseConfig:
    sigma_position: float = 1.0
    sigma_speed: float = 0.2
    sigma_heading: float = 10.0


@dataclass(frozen=True, eq=False)
class NoisyObservation:
    ids: np.ndarray
    position: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    ego: EgoState

    def __len__(self):
        return len(self.ids)


def apply_noise(world: WorldState, rng: np.random.Generator, noise: NoiseConfig = NoiseConfig()) -> NoisyObservation:
    """Independent zero-mean Gaussian noise per pedestrian field; ego exact."""
    crowd = world.crowd
    n = len(crowd)
    position = crowd.position + rng.normal(0.0, 1.0, size=(n, 2)) * noise.sigma_position
    speed = crowd.speed + rng.normal(0.0, 1.0, size=n) * noise.sigma_speed
    heading = wrap_degrees(crowd.heading + rng.normal(0.0, 1.0, size=n) * noise.sigma_heading)
    return NoisyObservation(ids=crowd.ids.copy(), position=position, speed=speed, heading=heading, ego=world.ego)


def ground_truth_observation(world: WorldState) -> NoisyObservation:
    crowd = world.crowd
    return NoisyObservation(ids=crowd.ids.copy(), position=crowd.position.copy(), speed=crowd.speed.copy(),
                            heading=crowd.heading.copy(), ego=world.ego)


# ============================================================
# Reward
# ============================================================

@dataclass(frozen=True)
class RewardParams:
    d1: float = 7.0
    d2: float = 25.0
    d3: float = 1.0
    d4: float = 2.0
    v1: float = 1.5
    v2: float = 10.0
    r1: float = 0.005
    r2: float = 0.005
    r3: float = -0.25
    r4: float = 0.2
    r5: float = -0.5
    r6: float = 1.5
    r7: float = -0.25

    def __post_init__(self):
        if not (self.d3 < self.d4 < self.d1 < self.d2):
            raise ValueError("reward distances must satisfy d3 < d4 < d1 < d2")
        if not self.v1 < self.v2:
            raise ValueError("reward speeds must satisfy v1 < v2")


@dataclass(frozen=True)
class RewardOutcome:
    reward: float
    terminal: bool
    outcome: Optional[str]
    branch: str
    bumper_distance: float


def bumper_distance(ego: EgoState, positions) -> float:
    """min(d_right, d_left): nearest pedestrian to either front bumper corner."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(positions) == 0:
        return float("inf")
    right, left = front_bumper_corners(ego.position, ego.heading)
    d_right = np.hypot(*(positions - right).T).min()
    d_left = np.hypot(*(positions - left).T).min()
    return float(min(d_right, d_left))


def far_branch_reward(progress_norm: float, speed: float, remaining: float, p: RewardParams) -> float:
    reward = p.r1 * progress_norm + p.r2 * min(speed, p.v2) / p.v2
    if remaining < p.d2:
        reward += p.r4 * (p.d2 - remaining) / p.d2
    if speed < p.v1:
        reward += p.r7
    if speed > p.v2:
        reward += p.r5
    return reward


def near_branch_reward(d: float, p: RewardParams) -> float:
    reward = p.r3 * (p.d1 - max(d, p.d3)) / (p.d1 - p.d3)
    return 2.0 * reward if d <= p.d4 else reward


def compute_reward(world: WorldState, world_next: WorldState, params: RewardParams = RewardParams()) -> RewardOutcome:
    """Reward for the transition world -> world_next plus its terminal outcome."""
    route = world.layout.route
    ego = world_next.ego
    d = bumper_distance(ego, world_next.crowd.position)
    if d > params.d1:
        before = route.remaining(world.ego.route_s)
        after = route.remaining(ego.route_s)
        progress = float(np.clip((before - after) / (params.v2 * DT), -1.0, 1.0))
        reward = far_branch_reward(progress, ego.speed, after, params)
        branch = "far"
    else:
        reward = near_branch_reward(d, params)
        branch = "near"

    events = world_next.events
    outcome = None
    if events.collision:
        reward, outcome = -params.r6, "collision"
    elif events.goal:
        reward, outcome = reward + params.r6, "goal"
    elif events.timeout:
        outcome = "timeout"
    return RewardOutcome(reward=float(reward), terminal=events.terminal, outcome=outcome,
                         branch=branch, bumper_distance=d)


# ============================================================
# Time-to-collision baseline
# ============================================================

TTC_BRAKE = 2.0
TTC_EASE = 4.0
TTC_CONFLICT_RADIUS = 2.0
TTC_CRUISE_FRACTION = 0.9


def time_to_collision(ego: EgoState, positions, speeds, headings,
                      conflict_radius: float = TTC_CONFLICT_RADIUS) -> np.ndarray:
    """Time of closest approach for each pedestrian under constant velocities (inf if none)."""
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(positions) == 0:
        return np.zeros(0)
    rad = np.deg2rad(np.asarray(headings, dtype=float))
    v_ped = np.column_stack([np.cos(rad), np.sin(rad)]) * np.asarray(speeds, dtype=float)[:, None]
    v_ego = ego.speed * np.array([np.cos(np.deg2rad(ego.heading)), np.sin(np.deg2rad(ego.heading))])
    rel_p = positions - ego.position
    rel_v = v_ped - v_ego
    vv = np.einsum("ij,ij->i", rel_v, rel_v)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_star = np.where(vv > 0, -np.einsum("ij,ij->i", rel_p, rel_v) / vv, np.inf)
    miss = np.hypot(*(rel_p + rel_v * np.where(np.isfinite(t_star), t_star, 0.0)[:, None]).T)
    hit = (t_star > 0) & np.isfinite(t_star) & (miss < conflict_radius)
    return np.where(hit, t_star, np.inf)


def ttc_throttle(ego: EgoState, positions, speeds, headings, params: RewardParams = RewardParams()) -> float:
    """Hand-engineered throttle: brake on short TTC, ease on medium TTC, else cruise."""
    ttc = time_to_collision(ego, positions, speeds, headings)
    min_ttc = float(ttc.min()) if len(ttc) else float("inf")
    if min_ttc < TTC_BRAKE:
        return -1.0
    if min_ttc < TTC_EASE:
        return -0.4
    target = TTC_CRUISE_FRACTION * params.v2
    return float(np.clip((target - ego.speed) / (DRIVE_ACCEL * DT), 0.0, 1.0))


def ttc_rule_policy(world: WorldState, params: RewardParams = RewardParams()) -> float:
    crowd = world.crowd
    return ttc_throttle(world.ego, crowd.position, crowd.speed, crowd.heading, params)

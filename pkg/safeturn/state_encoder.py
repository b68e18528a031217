"""Ego-aligned region-of-interest grid: the 3-layer state tensor the agent sees."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import EGO_LENGTH, EGO_WIDTH, to_local, wrap_signed_degrees

# Occupancy codes of layer 0
FREE = 0.0
PEDESTRIAN = 0.5
EGO = 1.0

# decimals kept of ego-frame coordinates and relative headings
LOCAL_DECIMALS = 6


@dataclass(frozen=True)
class RoiSpec:
    """ROI extent L x W (m) and cell size l x w (m)."""
    length: float = 20.0
    width: float = 15.0
    cell_length: float = 0.25
    cell_width: float = 0.25

    @property
    def rows(self) -> int:
        return int(round(self.length / self.cell_length))

    @property
    def cols(self) -> int:
        return int(round(self.width / self.cell_width))

    @property
    def ego_row(self) -> int:
        return int(round(4.0 * self.length / (5.0 * self.cell_length)))

    @property
    def ego_col(self) -> int:
        return int(round(self.width / (2.0 * self.cell_width)))

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols, 3)


def roi_vertices(ego, roi: RoiSpec = RoiSpec()) -> dict:
    """
    World-frame ROI corners from the tabulated vertex formulas.

    Rear vertices sit at +L/5 along the heading vector and front vertices at
    -4L/5; both front vertices use 4L/5.
    """
    L, W = roi.length, roi.width
    c, s = math.cos(math.radians(ego.heading)), math.sin(math.radians(ego.heading))
    x, y = ego.x, ego.y
    return {
        "rear_right": (x + L / 5 * c + W / 2 * s, y + L / 5 * s - W / 2 * c),
        "rear_left": (x + L / 5 * c - W / 2 * s, y + L / 5 * s + W / 2 * c),
        "front_right": (x - 4 * L / 5 * c + W / 2 * s, y - 4 * L / 5 * s - W / 2 * c),
        "front_left": (x - 4 * L / 5 * c - W / 2 * s, y - 4 * L / 5 * s + W / 2 * c),
    }


def local_to_cell(forward, left, roi: RoiSpec):
    """Vectorized cell lookup in the ego frame; rows/cols are -1 outside the ROI."""
    row = np.floor((4.0 * roi.length / 5.0 - np.asarray(forward)) / roi.cell_length).astype(np.int64)
    col = np.floor((roi.width / 2.0 - np.asarray(left)) / roi.cell_width).astype(np.int64)
    inside = (row >= 0) & (row < roi.rows) & (col >= 0) & (col < roi.cols)
    return np.where(inside, row, -1), np.where(inside, col, -1)


def world_to_cell(point, ego, roi: RoiSpec = RoiSpec()):
    """(row, col) of a world point in the ego's ROI, or None outside. Row 0 is the far-forward edge."""
    forward, left = to_local(np.asarray(point, dtype=float), (ego.x, ego.y), ego.heading)
    forward, left = np.round(forward, LOCAL_DECIMALS), np.round(left, LOCAL_DECIMALS)
    row, col = local_to_cell(forward, left, roi)
    if row < 0:
        return None
    return int(row), int(col)


def ego_cell_block(roi: RoiSpec):
    """Row and column slices of the ego footprint."""
    half_rows = math.ceil(EGO_LENGTH / 2.0 / roi.cell_length - 1e-9)
    half_cols = math.ceil(EGO_WIDTH / 2.0 / roi.cell_width - 1e-9)
    return (slice(roi.ego_row - half_rows, roi.ego_row + half_rows),
            slice(roi.ego_col - half_cols, roi.ego_col + half_cols))


def encode_state_tensor(positions, speeds, headings, ego, roi: RoiSpec = RoiSpec()) -> np.ndarray:
    """
    Build the (rows, cols, 3) state tensor.

    Layer 0 holds occupancy (0 free, 0.5 pedestrian, 1 ego), layer 1 the
    relative speed v_ego - v_ped and layer 2 the relative heading
    wrap(theta_ped - theta_ego) in [-180, 180). When two pedestrians share a
    cell the one nearest the ego is kept.
    """
    tensor = np.zeros(roi.shape, dtype=np.float32)
    rows, cols = ego_cell_block(roi)
    tensor[rows, cols, 0] = EGO

    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    if len(positions) == 0:
        return tensor
    forward, left = to_local(positions, (ego.x, ego.y), ego.heading)
    forward, left = np.round(forward, LOCAL_DECIMALS), np.round(left, LOCAL_DECIMALS)
    row, col = local_to_cell(forward, left, roi)
    rel_speed = ego.speed - np.asarray(speeds, dtype=float)
    rel_heading = wrap_signed_degrees(np.round(np.asarray(headings, dtype=float) - ego.heading, LOCAL_DECIMALS))

    # farthest first so the nearest pedestrian is written last
    order = np.argsort(-np.hypot(forward, left), kind="stable")
    for k in order:
        r, c = row[k], col[k]
        if r < 0 or tensor[r, c, 0] == EGO:
            continue
        tensor[r, c, 0] = PEDESTRIAN
        tensor[r, c, 1] = rel_speed[k]
        tensor[r, c, 2] = rel_heading[k]
    return tensor


def encode_observation(observation, roi: RoiSpec = RoiSpec()) -> np.ndarray:
    """encode_state_tensor over a NoisyObservation / perceived crowd."""
    return encode_state_tensor(observation.position, observation.speed, observation.heading,
                               observation.ego, roi)

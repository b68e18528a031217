"""Planar geometry helpers: angle wrapping, ego-frame transforms, footprint distances."""

from __future__ import annotations

import numpy as np

# Ego footprint (m)
EGO_LENGTH = 4.5
EGO_WIDTH = 2.0


def wrap_degrees(angle):
    """Wrap into [0, 360)."""
    return np.mod(angle, 360.0)


def wrap_signed_degrees(angle):
    """Wrap into [-180, 180)."""
    return np.mod(np.asarray(angle, dtype=float) + 180.0, 360.0) - 180.0


def heading_vector(heading_deg: float) -> np.ndarray:
    rad = np.deg2rad(heading_deg)
    return np.array([np.cos(rad), np.sin(rad)])


def to_local(points, origin, heading_deg: float):
    """
    Express world points in the frame of a body at ``origin`` facing ``heading_deg``.

    Returns:
        tuple: (forward, left) coordinates, each shaped like ``points[..., 0]``
    """
    rel = np.asarray(points, dtype=float) - np.asarray(origin, dtype=float)
    rad = np.deg2rad(heading_deg)
    c, s = np.cos(rad), np.sin(rad)
    forward = rel[..., 0] * c + rel[..., 1] * s
    left = -rel[..., 0] * s + rel[..., 1] * c
    return forward, left


def point_rect_distance(points, center, heading_deg: float,
                        half_length: float = EGO_LENGTH / 2,
                        half_width: float = EGO_WIDTH / 2) -> np.ndarray:
    """Euclidean distance from each point to an oriented rectangle (0 inside)."""
    forward, left = to_local(points, center, heading_deg)
    dx = np.maximum(np.abs(forward) - half_length, 0.0)
    dy = np.maximum(np.abs(left) - half_width, 0.0)
    return np.hypot(dx, dy)


def front_bumper_corners(center, heading_deg: float,
                         half_length: float = EGO_LENGTH / 2,
                         half_width: float = EGO_WIDTH / 2):
    """Right and left front corners of the ego footprint in world coordinates."""
    fwd = heading_vector(heading_deg)
    left = np.array([-fwd[1], fwd[0]])
    front = np.asarray(center, dtype=float) + half_length * fwd
    return front - half_width * left, front + half_width * left


def point_segment_distance(point, a, b) -> float:
    p, a, b = (np.asarray(v, dtype=float) for v in (point, a, b))
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))

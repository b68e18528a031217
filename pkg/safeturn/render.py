"""
Offline rendering of episode traces and training logs.

Frames are top-down PPM images drawn with Pillow; figures are matplotlib PNGs.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from io import BytesIO
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .geometry import EGO_LENGTH, EGO_WIDTH, heading_vector  # noqa: E402
from .world_sim import build_layout  # noqa: E402

logger = logging.getLogger(__name__)

PIXELS_PER_METER = 8
MARGIN_M = 4.0

COLOR_BACKGROUND = (236, 236, 228)
COLOR_ROAD = (120, 120, 120)
COLOR_CROSSWALK = (250, 250, 250)
COLOR_ROUTE = (70, 110, 200)
COLOR_EGO = (30, 60, 160)
COLOR_EGO_BRAKING = (200, 40, 40)
COLOR_PEDESTRIAN = (230, 140, 20)


def read_trace(path) -> dict:
    """Rows of an ``episodes.jsonl`` file grouped by (variant, episode index)."""
    episodes = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                row = json.loads(line)
                episodes[(row["variant"], int(row["episode"]))].append(row)
    return dict(sorted(episodes.items()))


class FramePainter:
    """Maps world metres to image pixels for one layout."""

    def __init__(self, layout, scale: int = PIXELS_PER_METER):
        self.layout = layout
        self.scale = scale
        pts = np.vstack([layout.route.waypoints, layout.crosswalk_endpoints])
        self.lo = pts.min(axis=0) - MARGIN_M
        self.hi = pts.max(axis=0) + MARGIN_M
        self.size = tuple(int(np.ceil(v)) for v in (self.hi - self.lo) * scale)

    def px(self, points) -> list:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        u = (pts[:, 0] - self.lo[0]) * self.scale
        v = (self.hi[1] - pts[:, 1]) * self.scale
        return [(float(a), float(b)) for a, b in zip(u, v)]

    def background(self) -> Image.Image:
        image = Image.new("RGB", self.size, COLOR_BACKGROUND)
        draw = ImageDraw.Draw(image)
        half_w, half_h = self.layout.box_width / 2.0, self.layout.box_height / 2.0
        draw.rectangle(self.px([(-half_w, half_h)]) + self.px([(half_w, -half_h)]), fill=COLOR_ROAD)
        width = max(int(self.layout.crosswalk_width * self.scale), 1)
        for a, b in self.layout.crosswalks:
            draw.line(self.px([a, b]), fill=COLOR_CROSSWALK, width=width)
        draw.line(self.px(self.layout.route.waypoints), fill=COLOR_ROUTE, width=1)
        return image

    def ego_polygon(self, x: float, y: float, heading: float) -> list:
        fwd = heading_vector(heading)
        left = np.array([-fwd[1], fwd[0]])
        c = np.array([x, y])
        hl, hw = EGO_LENGTH / 2.0, EGO_WIDTH / 2.0
        corners = [c + hl * fwd + hw * left, c + hl * fwd - hw * left,
                   c - hl * fwd - hw * left, c - hl * fwd + hw * left]
        return self.px(corners)

    def frame(self, base: Image.Image, row: dict) -> Image.Image:
        image = base.copy()
        draw = ImageDraw.Draw(image)
        color = COLOR_EGO_BRAKING if row.get("intervened") else COLOR_EGO
        draw.polygon(self.ego_polygon(row["x"], row["y"], row["heading"]), fill=color)
        r = max(self.scale * 0.3, 2)
        for _, px_x, px_y in row.get("pedestrians", []):
            (u, v), = self.px([(px_x, px_y)])
            draw.ellipse((u - r, v - r, u + r, v + r), fill=COLOR_PEDESTRIAN)
        return image


def render_trace(path, out_dir, episodes=None, scale: int = PIXELS_PER_METER) -> int:
    """
    Write ``frames/ep<N>/<step>.ppm`` for every trace row.

    Traces holding several variants get one directory level per variant:
    ``frames/<variant>/ep<N>/<step>.ppm``.

    Returns:
        int: number of frames written
    """
    out_dir = Path(out_dir)
    trace = read_trace(path)
    several = len({variant for variant, _ in trace}) > 1
    written = 0
    painters = {}
    for (variant, index), rows in trace.items():
        if episodes is not None and index not in episodes:
            continue
        kind = rows[0].get("layout", "four-way")
        if kind not in painters:
            painter = FramePainter(build_layout(kind), scale)
            painters[kind] = (painter, painter.background())
        painter, base = painters[kind]
        frame_dir = out_dir / "frames" / variant / f"ep{index}" if several else out_dir / "frames" / f"ep{index}"
        frame_dir.mkdir(parents=True, exist_ok=True)
        for row in rows:
            painter.frame(base, row).save(frame_dir / f"{int(row['step']):04d}.ppm", format="PPM")
            written += 1
        logger.info("%s episode %d: %d frames -> %s", variant, index, len(rows), frame_dir)
    return written


def create_trajectory_figure(rows: list, layout=None):
    """Ego path coloured by speed over the junction, with shield interventions marked."""
    layout = layout or build_layout(rows[0].get("layout", "four-way"))
    fig, ax = plt.subplots(figsize=(8, 8))
    half_w, half_h = layout.box_width / 2.0, layout.box_height / 2.0
    ax.add_patch(plt.Rectangle((-half_w, -half_h), layout.box_width, layout.box_height,
                               color="0.6", alpha=0.4, lw=0))
    for a, b in layout.crosswalks:
        ax.plot([a[0], b[0]], [a[1], b[1]], color="0.85", lw=6, solid_capstyle="butt")
    route = layout.route.waypoints
    ax.plot(route[:, 0], route[:, 1], "--", color="tab:blue", lw=1, label="route")

    x = np.array([r["x"] for r in rows])
    y = np.array([r["y"] for r in rows])
    speed = np.array([r["speed"] for r in rows])
    points = ax.scatter(x, y, c=speed, cmap="viridis", s=8, label="ego")
    fig.colorbar(points, ax=ax, label="speed (m/s)")
    braked = np.array([bool(r.get("intervened")) for r in rows])
    if braked.any():
        ax.scatter(x[braked], y[braked], marker="x", color="tab:red", s=20, label="shield brake")

    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_title(f"{rows[0]['variant']} episode {rows[0]['episode']} ({rows[-1].get('outcome') or 'running'})",
                 fontsize=13, fontweight="bold")
    ax.legend(loc="upper right")
    plt.tight_layout()
    return fig


def plot_training_curve(log, path=None):
    """Episode return and its 20-episode moving average from a training log frame."""
    fig, (ax_ret, ax_eps) = plt.subplots(2, 1, figsize=(10, 7), sharex=True)
    ax_ret.plot(log["episode"], log["return"], color="tab:blue", alpha=0.35, lw=1, label="return")
    ax_ret.plot(log["episode"], log["return"].rolling(20, min_periods=1).mean(), color="tab:blue",
                lw=2, label="moving average (20)")
    ax_ret.set_ylabel("episode return")
    ax_ret.legend(loc="lower right")
    ax_ret.grid(alpha=0.3)
    ax_eps.plot(log["episode"], log["epsilon"], color="tab:orange", label="epsilon")
    ax_eps.plot(log["episode"], log["beta"], color="tab:green", label="beta")
    ax_eps.set_xlabel("episode")
    ax_eps.set_ylim(0.0, 1.05)
    ax_eps.legend(loc="center right")
    ax_eps.grid(alpha=0.3)
    plt.tight_layout()
    if path is not None:
        save_figure(fig, path)
    return fig


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=150, bbox_inches="tight", facecolor="white")
    plt.close(fig)
    return path


def figure_to_bytes(fig) -> bytes:
    buf = BytesIO()
    fig.savefig(buf, format="png", dpi=150, bbox_inches="tight", facecolor="white")
    buf.seek(0)
    return buf.getvalue()

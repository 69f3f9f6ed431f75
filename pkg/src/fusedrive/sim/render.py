"""Ego-centric semantic rasters: channel 0 drivable corridor, 1 actors, 2 light/stop lines.

Each cell holds an anti-aliased coverage value in [0, 1] computed from the
signed distance of the cell centre to the shape, so rasters are continuous
in the ego pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .world import World

LIGHT_VALUE = {"red": 1.0, "yellow": 0.5, "green": 0.0}
STOP_SIGN_VALUE = 0.25
LINE_HALF_THICKNESS = 0.3


@dataclass(frozen=True)
class ViewWindow:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    size: int = 64

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.size

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.size

    @property
    def cell(self) -> float:
        return max(self.dx, self.dy)

    def centres(self) -> np.ndarray:
        """Ego-frame cell centres ``(size, size, 2)``; row 0 is farthest ahead, column 0 leftmost."""
        xs = self.x_max - (np.arange(self.size) + 0.5) * self.dx
        ys = self.y_max - (np.arange(self.size) + 0.5) * self.dy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx, gy], axis=-1)


MAIN_WINDOW = ViewWindow(-2.0, 30.0, -16.0, 16.0)   # 32 m x 32 m forward
SIDE_WINDOW = ViewWindow(-8.0, 16.0, -24.0, 24.0)   # 24 m x 48 m lateral


def _segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from points ``(N, 2)`` to segments ``(M, 2)-(M, 2)``, minimum over segments."""
    if len(a) == 0:
        return np.full(len(p), np.inf)
    ab = b - a
    denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-12)
    ap = p[:, None, :] - a[None, :, :]
    u = np.clip(np.einsum("nmj,mj->nm", ap, ab) / denom, 0.0, 1.0)
    d = ap - u[..., None] * ab[None]
    return np.sqrt(np.einsum("nmj,nmj->nm", d, d)).min(axis=1)


def coverage(signed_distance: np.ndarray, cell: float) -> np.ndarray:
    return np.clip(0.5 - signed_distance / cell, 0.0, 1.0)


def render_view(world: World, win: ViewWindow) -> np.ndarray:
    ego, route, cfg = world.ego, world.route, world.cfg
    pts = win.centres().reshape(-1, 2)
    out = np.zeros((3, win.size * win.size))
    margin = cfg.road_half_width + 2 * win.cell

    local = ego.to_local(route.points)
    inside = ((local[:, 0] > win.x_min - margin) & (local[:, 0] < win.x_max + margin)
              & (local[:, 1] > win.y_min - margin) & (local[:, 1] < win.y_max + margin))
    keep = inside[:-1] | inside[1:]
    d = _segment_distance(pts, local[:-1][keep], local[1:][keep])
    out[0] = coverage(d - cfg.road_half_width, win.cell)

    for a in world.actors:
        centres = ego.to_local(a.discs())
        d = np.sqrt(((pts[:, None, :] - centres[None]) ** 2).sum(-1)).min(axis=1) - a.radius
        out[1] = np.maximum(out[1], coverage(d, win.cell))

    lines = [(lt.s, LIGHT_VALUE[lt.state(world.clock)]) for lt in route.lights]
    lines += [(st.s, STOP_SIGN_VALUE) for st in route.stop_signs]
    for s, value in lines:
        if value <= 0:
            continue
        a, b = route.stop_line(s, cfg.road_half_width)
        la, lb = ego.to_local(np.stack([a, b]))
        d = _segment_distance(pts, la[None], lb[None]) - LINE_HALF_THICKNESS
        out[2] = np.maximum(out[2], value * coverage(d, win.cell))
    return out.reshape(3, win.size, win.size)


def render_views(world: World) -> tuple:
    """``(main, side)`` rasters, each ``(3, 64, 64)`` float64 in [0, 1]."""
    return render_view(world, MAIN_WINDOW), render_view(world, SIDE_WINDOW)

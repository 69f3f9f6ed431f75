"""Observations and the scripted privileged expert.

The expert reads simulator state directly: route geometry, light phases,
actor positions.  Its controller is stateless, so the label for a world
state does not depend on history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .render import render_views
from .world import EGO_RADIUS, Ego, SimError, World, _bicycle

N_LATENT = 8
RECOVERY_BOUND = 10.0   # expert refuses to drive when further than this from the route
LIGHT_ZONE = 10.0
STOP_ZONE = 6.0
PREDICT = (0.0, 1.0, 2.0)   # seconds of scripted actor motion the expert looks ahead


class ExpertError(SimError):
    pass


class Observation:
    """Rasters, speed, command and target point; rasters may be rendered on first access."""

    def __init__(self, main=None, side=None, speed: float = 0.0, command: int = 0, target=None, render=None):
        self._main, self._side, self._render = main, side, render
        self.speed = float(speed)
        self.command = int(command)
        self.target = np.zeros(2) if target is None else np.asarray(target, dtype=np.float64)

    def _views(self):
        if self._main is None:
            self._main, self._side = self._render()
        return self._main, self._side

    @property
    def main(self) -> np.ndarray:   # (3, 64, 64)
        return self._views()[0]

    @property
    def side(self) -> np.ndarray:   # (3, 64, 64)
        return self._views()[1]

    def command_onehot(self, n: int = 6) -> np.ndarray:
        v = np.zeros(n)
        v[self.command] = 1.0
        return v


@dataclass
class ExpertLabel:
    waypoints: np.ndarray   # (K, 2) ego frame
    control: np.ndarray     # (throttle, steer, brake)
    target_speed: float
    latent: np.ndarray      # (8,) each in [-1, 1]
    hazard: str = ""


def target_point(world: World) -> tuple:
    """Route point ``target_lookahead`` metres ahead of the current progress, in the ego frame, and its command."""
    s = min(world.progress + world.cfg.target_lookahead, world.route.length)
    return world.ego.to_local(world.route.point_at(s)), world.route.command_at(s)


def observe(world: World, lazy: bool = False) -> Observation:
    """Observation of the current state; with ``lazy`` the rasters are drawn only if read.

    A lazy observation must be consumed before the world advances.
    """
    target, cmd = target_point(world)
    if lazy:
        return Observation(speed=world.ego.speed, command=cmd, target=target, render=lambda: render_views(world))
    main, side = render_views(world)
    return Observation(main, side, world.ego.speed, cmd, target)


# -- hazard gating -------------------------------------------------------


def _ego_route_pose(world: World, ego: Ego | None = None):
    ego = ego or world.ego
    s, lat, dist = world.route.project(ego.pos, world.progress - 5.0, world.progress + 20.0)
    return s, lat, dist


def _actor_hazard(world: World, s_ego: float, speed: float):
    """Nearest actor inside the forward corridor: ``(distance along route, actor index)`` or ``None``."""
    horizon = max(10.0, speed ** 2 / 8.0 + 8.0)
    best = None
    for i, a in enumerate(world.actors):
        for c in np.concatenate([a.discs(tau) for tau in PREDICT]):
            s_a, lat, dist = world.route.project(c, s_ego - 2.0, s_ego + horizon + 5.0)
            if dist > abs(lat) + 0.5:    # projection clipped at the window ends
                continue
            ahead = s_a - s_ego
            if 0.0 < ahead <= horizon and abs(lat) < EGO_RADIUS + a.radius + 0.9:
                if best is None or ahead < best[0]:
                    best = (ahead, i)
    return best


def _light_hazard(world: World, s_ego: float, speed: float):
    commit = speed ** 2 / 12.0 + 0.5
    best = None
    for i, lt in enumerate(world.route.lights):
        d = lt.s - s_ego
        if not 0.0 < d <= LIGHT_ZONE:
            continue
        state = lt.state(world.clock)
        if state == "red" or (state == "yellow" and d > commit):
            if best is None or d < best[0]:
                best = (d, i, state)
    return best


def _stop_hazard(world: World, s_ego: float):
    for i, st in enumerate(world.route.stop_signs):
        d = st.s - s_ego
        if not world.stop_passed[i] and 0.0 < d <= STOP_ZONE and not world.stop_satisfied(i):
            return d, i
    return None


def expert_target_speed(world: World) -> tuple:
    s_ego, _, _ = _ego_route_pose(world)
    v = world.ego.speed
    if _light_hazard(world, s_ego, v):
        return 0.0, "light"
    if _stop_hazard(world, s_ego):
        return 0.0, "stop_sign"
    if _actor_hazard(world, s_ego, v):
        return 0.0, "actor"
    return world.cfg.cruise_speed, ""


# -- stateless controller ------------------------------------------------


def _pursuit_steer(world: World, ego: Ego, s_ego: float) -> float:
    look = min(max(3.0 + 0.5 * ego.speed, 4.0), 8.0)
    p = ego.to_local(world.route.point_at(s_ego + look))
    alpha = math.atan2(p[1], p[0])
    ld = max(float(np.hypot(p[0], p[1])), 1e-3)
    wheel = math.atan(2.0 * world.cfg.wheelbase * math.sin(alpha) / ld)
    return min(max(wheel / world.cfg.max_steer_angle, -1.0), 1.0)


def _speed_control(v: float, target: float, cfg) -> tuple:
    if target <= 0.0:
        return 0.0, 1.0
    err = target - v
    if err < -1.0:
        return 0.0, min(0.3 * -err, 1.0)
    ff = cfg.drag * v * v / cfg.max_accel
    return min(max(0.5 * err + ff, 0.0), 0.75), 0.0


def expert_control(world: World, ego: Ego, s_ego: float, target_speed: float) -> np.ndarray:
    throttle, brake = _speed_control(ego.speed, target_speed, world.cfg)
    steer = _pursuit_steer(world, ego, s_ego)
    return np.array([throttle, steer, brake])


def _plan(world: World, target_speed: float, n: int, dt_wp: float = 0.5) -> np.ndarray:
    """Roll the expert's own controller forward on a frozen world; positions at ``dt_wp`` marks."""
    dt = world.cfg.dt
    ego = Ego(world.ego.x, world.ego.y, world.ego.yaw, world.ego.speed)
    sub = int(round(dt_wp / dt))
    s = world.progress
    out = []
    for k in range(n * sub):
        s, _, _ = world.route.project(ego.pos, s - 5.0, s + 20.0)
        t, st, b = expert_control(world, ego, s, target_speed)
        ego = _bicycle(ego, t, st, b, dt, world.cfg)
        if (k + 1) % sub == 0:
            out.append((ego.x, ego.y))
    return world.ego.to_local(np.array(out))


def latent_features(world: World, s_ego: float, lat: float, target_speed: float) -> np.ndarray:
    """Eight privileged scene descriptors, each clipped to [-1, 1]."""
    cfg, route, ego = world.cfg, world.route, world.ego
    clip = lambda v: float(min(max(v, -1.0), 1.0))  # noqa: E731
    hz = _actor_hazard(world, s_ego, ego.speed)
    actor_d = hz[0] if hz else None
    ahead_lights = [(lt.s - s_ego, lt.state(world.clock)) for lt in route.lights if lt.s - s_ego > 0]
    light = min(ahead_lights) if ahead_lights else None
    phase = {"red": 1.0, "yellow": 0.0, "green": -1.0}
    heading_err = (route.heading_at(s_ego) - ego.yaw + math.pi) % (2 * math.pi) - math.pi
    return np.array([
        clip(actor_d / 15.0 * 2 - 1) if actor_d is not None else 1.0,
        clip(light[0] / 50.0 * 2 - 1) if light else 1.0,
        phase[light[1]] if light else -1.0,
        clip(route.curvature_at(s_ego + 5.0) * 10.0),
        clip((target_speed - ego.speed) / cfg.cruise_speed),
        clip(lat / cfg.road_half_width),
        clip(heading_err / (math.pi / 2)),
        clip(actor_d / max(ego.speed, 0.5) / 5.0 * 2 - 1) if actor_d is not None else 1.0,
    ])


def expert_policy(world: World, n_waypoints: int = 4, with_waypoints: bool = True) -> ExpertLabel:
    s_ego, lat, dist = _ego_route_pose(world)
    if dist > RECOVERY_BOUND:
        raise ExpertError(f"ego {dist:.1f} m from route {world.route.name}, beyond recovery bound")
    v_t, hazard = expert_target_speed(world)
    control = expert_control(world, world.ego, s_ego, v_t)
    wps = _plan(world, v_t, n_waypoints) if with_waypoints else np.zeros((n_waypoints, 2))
    return ExpertLabel(wps, control, v_t, latent_features(world, s_ego, lat, v_t), hazard)

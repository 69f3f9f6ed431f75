"""Kinematic bicycle world: ego, scripted actors, lights, stop signs and the infraction log."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import SimConfig
from .routes import ActorScript, Route

STOP_SPEED = 0.1          # below this the ego counts as standing still
EGO_OFFSETS = (-1.2, 1.2)  # ego footprint: two discs along the heading
EGO_RADIUS = 1.1
VEHICLE_OFFSETS = (-1.2, 1.2)
TERMINAL_PENALTY = 1.0    # deviation / blocked end the route but only cost completion


class SimError(RuntimeError):
    pass


@dataclass
class Ego:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    speed: float = 0.0

    @property
    def pos(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def to_local(self, pts) -> np.ndarray:
        """World points ``(..., 2)`` to the ego frame (x forward, y left)."""
        d = np.asarray(pts, dtype=np.float64) - self.pos
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * d[..., 0] + s * d[..., 1], -s * d[..., 0] + c * d[..., 1]], axis=-1)

    def to_world(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * p[..., 0] - s * p[..., 1] + self.x, s * p[..., 0] + c * p[..., 1] + self.y], axis=-1)


@dataclass
class Actor:
    script: ActorScript
    path: np.ndarray
    cum: np.ndarray
    s: float = 0.0
    triggered: bool = False
    wait: float = 0.0
    next_pause: int = 0
    frozen: bool = False

    @classmethod
    def from_script(cls, script: ActorScript) -> "Actor":
        path = np.asarray(script.path, dtype=np.float64).reshape(-1, 2)
        cum = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(path, axis=0), axis=1))])
        return cls(script, path, cum, triggered=script.trigger_s <= 0)

    @property
    def kind(self) -> str:
        return self.script.kind

    @property
    def radius(self) -> float:
        return self.script.radius

    def pose(self, ahead: float = 0.0):
        """Position and heading, optionally ``ahead`` seconds into the scripted motion."""
        if len(self.path) == 1:
            return self.path[0].copy(), 0.0
        s = self.s
        if ahead > 0 and self.triggered and not self.frozen:
            s += self.script.speed * max(ahead - self.wait, 0.0)
        s = min(s, self.cum[-1])
        i = min(max(int(np.searchsorted(self.cum, s, side="right")) - 1, 0), len(self.path) - 2)
        d = self.path[i + 1] - self.path[i]
        L = float(np.linalg.norm(d))
        p = self.path[i] + d * ((s - self.cum[i]) / L if L > 0 else 0.0)
        return p, math.atan2(d[1], d[0])

    def discs(self, ahead: float = 0.0) -> np.ndarray:
        """Collision discs ``(n, 2)`` centres; all share ``radius``."""
        p, h = self.pose(ahead)
        if self.kind != "vehicle":
            return p[None]
        u = np.array([math.cos(h), math.sin(h)])
        return np.stack([p + o * u for o in VEHICLE_OFFSETS])

    def advance(self, dt: float, ego_progress: float) -> None:
        if self.frozen or self.kind == "static" or self.script.speed <= 0:
            return
        if not self.triggered:
            if ego_progress < self.script.trigger_s:
                return
            self.triggered = True
        if self.wait > 0:
            self.wait = max(self.wait - dt, 0.0)
            return
        pauses = self.script.pauses
        new_s = self.s + self.script.speed * dt
        if self.next_pause < len(pauses) and new_s >= pauses[self.next_pause][0]:
            new_s = max(self.s, float(pauses[self.next_pause][0]))
            self.wait = float(pauses[self.next_pause][1])
            self.next_pause += 1
        self.s = min(new_s, float(self.cum[-1]))


@dataclass
class Infraction:
    kind: str
    t: float
    penalty: float
    detail: str = ""

    def to_dict(self) -> dict:
        return {"kind": self.kind, "t": self.t, "penalty": self.penalty, "detail": self.detail}


@dataclass
class World:
    route: Route
    cfg: SimConfig = field(default_factory=SimConfig)
    ego: Ego = field(default_factory=Ego)
    actors: list = field(default_factory=list)
    clock: float = 0.0
    steps: int = 0
    progress: float = 0.0
    infractions: list = field(default_factory=list)
    done: bool = False
    reason: str = ""
    stop_halt: list = field(default_factory=list)     # accumulated standstill time per stop sign
    stop_passed: list = field(default_factory=list)
    collided: set = field(default_factory=set)
    still_time: float = 0.0
    seed: int = 0

    @classmethod
    def create(cls, route: Route, cfg: SimConfig | None = None, seed: int = 0) -> "World":
        cfg = cfg or SimConfig()
        h = route.heading_at(0.0)
        p = route.points[0]
        return cls(route=route, cfg=cfg, ego=Ego(float(p[0]), float(p[1]), h, 0.0),
                   actors=[Actor.from_script(a) for a in route.actors],
                   stop_halt=[0.0] * len(route.stop_signs), stop_passed=[False] * len(route.stop_signs),
                   seed=seed)

    @property
    def time_limit(self) -> float:
        return self.route.length / 2.0 + self.cfg.timeout_slack

    @property
    def route_completion(self) -> float:
        if self.reason == "finished":
            return 100.0
        return 100.0 * min(max(self.progress / self.route.length, 0.0), 1.0)

    def stop_satisfied(self, i: int) -> bool:
        return self.stop_halt[i] >= self.route.stop_signs[i].halt

    def light_states(self) -> list:
        return [lt.state(self.clock) for lt in self.route.lights]

    def ego_discs(self) -> np.ndarray:
        u = np.array([math.cos(self.ego.yaw), math.sin(self.ego.yaw)])
        return np.stack([self.ego.pos + o * u for o in EGO_OFFSETS])

    def log(self, kind: str, detail: str = "", penalty: float | None = None) -> None:
        if penalty is None:
            penalty = self.cfg.penalties[kind]
        self.infractions.append(Infraction(kind, round(self.clock, 9), float(penalty), detail))


def _bicycle(ego: Ego, throttle: float, steer: float, brake: float, dt: float, cfg: SimConfig) -> Ego:
    accel = cfg.max_accel * throttle - cfg.max_decel * brake - cfg.drag * ego.speed ** 2
    v = ego.speed
    yaw_rate = v / cfg.wheelbase * math.tan(steer * cfg.max_steer_angle)
    x = ego.x + v * math.cos(ego.yaw) * dt
    y = ego.y + v * math.sin(ego.yaw) * dt
    yaw = ego.yaw + yaw_rate * dt
    yaw = (yaw + math.pi) % (2 * math.pi) - math.pi
    return Ego(x, y, yaw, max(0.0, v + accel * dt))


def step(world: World, control, dt: float | None = None) -> World:
    """Advance the world by ``dt`` in place and return it.

    ``control`` is anything with ``throttle``, ``steer``, ``brake`` attributes
    or a length-3 sequence.
    """
    if world.done:
        return world
    dt = world.cfg.dt if dt is None else dt
    if not dt > 0:
        raise SimError(f"dt must be positive, got {dt}")
    if hasattr(control, "throttle"):
        t, s, b = control.throttle, control.steer, control.brake
    else:
        t, s, b = control
    t, s, b = float(t), float(s), float(b)
    if not all(math.isfinite(v) for v in (t, s, b)):
        raise SimError(f"non-finite control ({t}, {s}, {b})")
    t, s, b = min(max(t, 0.0), 1.0), min(max(s, -1.0), 1.0), min(max(b, 0.0), 1.0)

    cfg = world.cfg
    world.ego = _bicycle(world.ego, t, s, b, dt, cfg)
    world.clock += dt
    world.steps += 1

    prev = world.progress
    s_proj, _, dist = world.route.project(world.ego.pos, prev - 5.0, prev + 20.0)
    if dist < cfg.road_half_width + 0.5:
        world.progress = max(world.progress, s_proj)
    for a in world.actors:
        a.advance(dt, world.progress)

    _check_rules(world, prev, dist, dt)
    return world


def _check_rules(world: World, prev: float, dist: float, dt: float) -> None:
    cfg, route, ego = world.cfg, world.route, world.ego
    # collisions: one log entry per actor
    ed = world.ego_discs()
    for i, a in enumerate(world.actors):
        if i in world.collided:
            continue
        gap = np.linalg.norm(ed[:, None, :] - a.discs()[None, :, :], axis=-1).min()
        if gap < EGO_RADIUS + a.radius:
            world.collided.add(i)
            a.frozen = True
            world.log(f"collision_{a.kind}", detail=f"actor {i}")

    for i, lt in enumerate(route.lights):
        if prev < lt.s <= world.progress and lt.state(world.clock) == "red":
            world.log("red_light", detail=f"light {i}")

    for i, st in enumerate(route.stop_signs):
        if world.stop_passed[i]:
            continue
        if st.s - 10.0 <= world.progress <= st.s and ego.speed < STOP_SPEED:
            world.stop_halt[i] += dt
        if prev < st.s <= world.progress:
            world.stop_passed[i] = True
            if not world.stop_satisfied(i):
                world.log("stop_sign", detail=f"stop {i}")

    world.still_time = world.still_time + dt if ego.speed < STOP_SPEED else 0.0

    if world.progress >= route.length - cfg.finish_tolerance:
        world.done, world.reason = True, "finished"
    elif dist > cfg.off_route_distance:
        world.log("route_deviation", penalty=TERMINAL_PENALTY)
        world.done, world.reason = True, "route_deviation"
    elif world.still_time >= cfg.blocked_time:
        world.log("agent_blocked", penalty=TERMINAL_PENALTY)
        world.done, world.reason = True, "agent_blocked"
    elif world.clock >= world.time_limit:
        world.done, world.reason = True, "timeout"

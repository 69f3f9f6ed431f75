"""Route polylines, traffic lights, stop signs, scripted actors; generation and JSON files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

COMMANDS = ("follow", "left", "right", "straight", "change_left", "change_right")
FOLLOW, LEFT, RIGHT, STRAIGHT, CHANGE_LEFT, CHANGE_RIGHT = range(6)


@dataclass
class TrafficLight:
    s: float                       # stop-line arclength along the route
    green: float = 8.0
    yellow: float = 2.0
    red: float = 8.0
    offset: float = 0.0

    def state(self, t: float) -> str:
        c = (t + self.offset) % (self.green + self.yellow + self.red)
        if c < self.green:
            return "green"
        if c < self.green + self.yellow:
            return "yellow"
        return "red"


@dataclass
class StopSign:
    s: float
    halt: float = 1.0


@dataclass
class ActorScript:
    """An actor moving along ``path`` at ``speed`` once the ego passes ``trigger_s``.

    ``pauses`` lists ``(path_arclength, seconds)`` stops.  Kind is one of
    ``vehicle``, ``pedestrian``, ``static``.
    """

    kind: str
    path: list
    speed: float = 0.0
    trigger_s: float = 0.0
    radius: float = 1.0
    pauses: list = field(default_factory=list)


@dataclass
class Route:
    name: str
    points: np.ndarray
    commands: np.ndarray
    lights: list = field(default_factory=list)
    stop_signs: list = field(default_factory=list)
    actors: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.commands = np.asarray(self.commands, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[0] < 2 or self.points.shape[1] != 2:
            raise ValueError(f"route {self.name}: need at least two 2D vertices")
        if self.commands.shape != (self.points.shape[0],):
            raise ValueError(f"route {self.name}: one command per vertex required")
        seg = np.diff(self.points, axis=0)
        seglen = np.linalg.norm(seg, axis=1)
        if np.any(seglen <= 1e-9):
            raise ValueError(f"route {self.name}: degenerate (zero-length) segment")
        self.seg_len = seglen
        self.cum = np.concatenate([[0.0], np.cumsum(seglen)])
        self.tangent = seg / seglen[:, None]
        self.length = float(self.cum[-1])

    @property
    def hazard_free(self) -> bool:
        return not (self.lights or self.stop_signs or self.actors)

    def point_at(self, s: float) -> np.ndarray:
        s = min(max(s, 0.0), self.length)
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = min(max(i, 0), len(self.seg_len) - 1)
        return self.points[i] + self.tangent[i] * (s - self.cum[i])

    def heading_at(self, s: float) -> float:
        s = min(max(s, 0.0), self.length)
        i = min(max(int(np.searchsorted(self.cum, s, side="right") - 1), 0), len(self.seg_len) - 1)
        t = self.tangent[i]
        return math.atan2(t[1], t[0])

    def command_at(self, s: float) -> int:
        s = min(max(s, 0.0), self.length)
        i = int(np.argmin(np.abs(self.cum - s)))
        return int(self.commands[i])

    def curvature_at(self, s: float, ds: float = 2.0) -> float:
        a = self.heading_at(s - ds)
        b = self.heading_at(s + ds)
        d = (b - a + math.pi) % (2 * math.pi) - math.pi
        return d / (2 * ds)

    def project(self, p, s_lo: float = 0.0, s_hi: float | None = None):
        """Closest point within the arclength window: ``(s, signed lateral offset, distance)``.

        Lateral offset is positive to the left of the route direction.
        """
        s_hi = self.length if s_hi is None else s_hi
        i0 = max(int(np.searchsorted(self.cum, s_lo, side="right")) - 1, 0)
        i1 = min(int(np.searchsorted(self.cum, s_hi, side="right")), len(self.seg_len))
        i1 = max(i1, i0 + 1)
        a = self.points[i0:i1]
        t = self.tangent[i0:i1]
        L = self.seg_len[i0:i1]
        d = np.asarray(p, dtype=np.float64) - a
        u = np.clip(np.einsum("ij,ij->i", d, t), 0.0, L)
        closest = a + t * u[:, None]
        dist = np.linalg.norm(np.asarray(p) - closest, axis=1)
        k = int(np.argmin(dist))
        lat = float(t[k, 0] * d[k, 1] - t[k, 1] * d[k, 0])
        return float(self.cum[i0 + k] + u[k]), lat, float(dist[k])

    def stop_line(self, s: float, half_width: float):
        p = self.point_at(s)
        h = self.heading_at(s)
        n = np.array([-math.sin(h), math.cos(h)])
        return p - n * half_width, p + n * half_width

    # -- serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "points": self.points.tolist(),
            "commands": [COMMANDS[c] for c in self.commands],
            "lights": [asdict(x) for x in self.lights],
            "stop_signs": [asdict(x) for x in self.stop_signs],
            "actors": [asdict(x) for x in self.actors],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Route":
        unknown = set(d) - {"name", "seed", "points", "commands", "lights", "stop_signs", "actors"}
        if unknown:
            raise ValueError(f"route: unknown key(s) {sorted(unknown)}")
        return cls(
            name=d["name"],
            points=np.asarray(d["points"], dtype=np.float64),
            commands=np.array([COMMANDS.index(c) for c in d["commands"]]),
            lights=[TrafficLight(**x) for x in d.get("lights", [])],
            stop_signs=[StopSign(**x) for x in d.get("stop_signs", [])],
            actors=[ActorScript(**x) for x in d.get("actors", [])],
            seed=int(d.get("seed", 0)),
        )


def save_routes(routes: list, path) -> None:
    Path(path).write_text(json.dumps({"routes": [r.to_dict() for r in routes]}, indent=1))


def load_routes(path) -> list:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict) or set(data) != {"routes"}:
        raise ValueError(f"{path}: expected an object with a single 'routes' list")
    return [Route.from_dict(r) for r in data["routes"]]


# ---------------------------------------------------------------------------
# generation


def _arc(start, heading, radius, angle, step):
    """Points along a circular arc turning by ``angle`` (positive = left)."""
    n = max(int(math.ceil(abs(angle) * radius / step)), 1)
    sign = 1.0 if angle > 0 else -1.0
    cx = start[0] - sign * radius * math.sin(heading)
    cy = start[1] + sign * radius * math.cos(heading)
    pts = []
    for k in range(1, n + 1):
        h = heading + angle * k / n
        pts.append((cx + sign * radius * math.sin(h), cy - sign * radius * math.cos(h)))
    return pts, heading + angle


def _straight(start, heading, length, step):
    n = max(int(math.ceil(length / step)), 1)
    return [(start[0] + math.cos(heading) * length * k / n, start[1] + math.sin(heading) * length * k / n)
            for k in range(1, n + 1)]


def _lane_change(start, heading, length, shift, step):
    n = max(int(math.ceil(length / step)), 1)
    c, s = math.cos(heading), math.sin(heading)
    pts = []
    for k in range(1, n + 1):
        f = k / n
        x = length * f
        y = shift * (f - math.sin(2 * math.pi * f) / (2 * math.pi))
        pts.append((start[0] + c * x - s * y, start[1] + s * x + c * y))
    return pts


def generate_route(seed: int, name: str | None = None, hazards: bool = True, n_segments: int | None = None,
                   step: float = 1.0) -> Route:
    """Random route of straights, 90-degree turns and lane changes.

    Heading stays within +-90 degrees of the start direction, so the polyline
    never crosses itself.
    """
    rng = np.random.default_rng(seed)
    n_segments = n_segments if n_segments is not None else int(rng.integers(2, 5))
    pts = [(0.0, 0.0)]
    cmds = [FOLLOW]
    heading = 0.0
    # (kind, start index, end index) of scripted regions, used for commands and hazard placement
    regions = []

    def extend(new, cmd):
        start = len(pts)
        pts.extend(new)
        cmds.extend([cmd] * len(new))
        return start, len(pts) - 1

    extend(_straight(pts[-1], heading, float(rng.uniform(20, 30)), step), FOLLOW)
    for _ in range(n_segments):
        kind = rng.choice(["turn", "turn", "lane", "straight"])
        if kind == "turn":
            options = [a for a in (math.pi / 2, -math.pi / 2) if abs(heading + a) <= math.pi / 2 + 1e-9]
            angle = float(options[int(rng.integers(len(options)))])
            radius = float(rng.uniform(10, 18))
            arc, heading = _arc(pts[-1], heading, radius, angle, step)
            i0, i1 = extend(arc, LEFT if angle > 0 else RIGHT)
            regions.append(("turn", i0, i1))
        elif kind == "lane":
            shift = float(rng.choice([-3.5, 3.5]))
            i0, i1 = extend(_lane_change(pts[-1], heading, float(rng.uniform(20, 28)), shift, step),
                            CHANGE_LEFT if shift > 0 else CHANGE_RIGHT)
            regions.append(("lane", i0, i1))
        else:
            i0, i1 = extend(_straight(pts[-1], heading, float(rng.uniform(12, 20)), step), STRAIGHT)
            regions.append(("straight", i0, i1))
        extend(_straight(pts[-1], heading, float(rng.uniform(15, 30)), step), FOLLOW)

    points = np.round(np.asarray(pts), 6)
    commands = np.asarray(cmds)
    # announce turns a little before they start
    for kind, i0, _ in regions:
        if kind == "turn":
            lo = max(i0 - int(8 / step), 0)
            commands[lo:i0] = commands[i0]
    route = Route(name or f"route_{seed:04d}", points, commands, seed=seed)
    if hazards:
        _add_hazards(route, rng, regions)
    return route


def _add_hazards(route: Route, rng: np.random.Generator, regions: list) -> None:
    """Place lights before turn/straight regions, then a few scripted actors."""
    used = []

    def free(s, gap=30.0):
        return 25.0 <= s <= route.length - 25.0 and all(abs(s - u) > gap for u in used)

    for kind, i0, _ in regions:
        s = float(route.cum[i0]) - 2.0
        if kind in ("turn", "straight") and free(s) and rng.random() < 0.6:
            if rng.random() < 0.75:
                route.lights.append(TrafficLight(s=s, offset=float(rng.uniform(0, 18))))
            else:
                route.stop_signs.append(StopSign(s=s))
            used.append(s)

    n_actors = int(rng.integers(0, 3))
    for _ in range(n_actors):
        s = float(rng.uniform(30, route.length - 30))
        if not free(s, gap=25.0):
            continue
        used.append(s)
        kind = rng.choice(["pedestrian", "crossing_vehicle", "lead_vehicle"])
        p = route.point_at(s)
        h = route.heading_at(s)
        n = np.array([-math.sin(h), math.cos(h)])
        side = 1.0 if rng.random() < 0.5 else -1.0
        if kind == "pedestrian":
            a, b = p + side * 7.0 * n, p - side * 7.0 * n
            route.actors.append(ActorScript("pedestrian", [a.tolist(), b.tolist()], speed=float(rng.uniform(1.2, 1.8)),
                                            trigger_s=s - 25.0, radius=0.4))
        elif kind == "crossing_vehicle":
            a, b = p + side * 18.0 * n, p - side * 30.0 * n
            route.actors.append(ActorScript("vehicle", [a.tolist(), b.tolist()], speed=float(rng.uniform(4.0, 6.0)),
                                            trigger_s=s - 30.0, radius=1.0))
        else:
            s0 = max(s - 20.0, 15.0)
            idx = np.searchsorted(route.cum, s0)
            path = route.points[idx:].tolist()
            end = route.points[-1] + route.tangent[-1] * 60.0
            path.append(end.tolist())
            pause_at = float(rng.uniform(10, 25))
            route.actors.append(ActorScript("vehicle", path, speed=float(rng.uniform(3.0, 4.5)),
                                            trigger_s=max(s0 - 25.0, 0.0), radius=1.0,
                                            pauses=[[pause_at, float(rng.uniform(2, 4))]]))
    for _ in range(int(rng.integers(0, 3))):
        s = float(rng.uniform(10, route.length - 10))
        p = route.point_at(s)
        h = route.heading_at(s)
        n = np.array([-math.sin(h), math.cos(h)])
        side = 1.0 if rng.random() < 0.5 else -1.0
        q = p + side * float(rng.uniform(5.5, 8.0)) * n
        _, _, dist = route.project(q)
        if dist > 5.0:
            route.actors.append(ActorScript("static", [q.tolist()], radius=float(rng.uniform(0.5, 1.2))))

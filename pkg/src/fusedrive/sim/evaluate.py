"""Closed-loop evaluation, driving-score bookkeeping and reference policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..config import SimConfig
from ..controller import ControlOutput
from .expert import expert_policy, observe
from .world import Infraction, World, step


def driving_score(rc: float, penalties) -> float:
    """Route completion times the product of per-infraction penalty coefficients."""
    ds = float(rc)
    for p in penalties:
        ds *= float(p)
    return ds


@dataclass
class RouteResult:
    name: str
    rc: float
    infractions: list = field(default_factory=list)
    reason: str = ""
    sim_time: float = 0.0
    error: str = ""

    @property
    def ds(self) -> float:
        return driving_score(self.rc, [i.penalty for i in self.infractions])

    def to_dict(self) -> dict:
        return {"name": self.name, "rc": self.rc, "ds": self.ds, "reason": self.reason,
                "sim_time": self.sim_time, "error": self.error,
                "infractions": [i.to_dict() for i in self.infractions]}


@dataclass
class EvalReport:
    routes: list = field(default_factory=list)

    @property
    def mean_rc(self) -> float:
        return float(np.mean([r.rc for r in self.routes])) if self.routes else 0.0

    @property
    def mean_ds(self) -> float:
        return float(np.mean([r.ds for r in self.routes])) if self.routes else 0.0

    def infraction_counts(self) -> dict:
        out = {}
        for r in self.routes:
            for i in r.infractions:
                out[i.kind] = out.get(i.kind, 0) + 1
        return out

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.routes + other.routes)

    def to_dict(self) -> dict:
        return {"mean_ds": self.mean_ds, "mean_rc": self.mean_rc,
                "infractions": self.infraction_counts(), "routes": [r.to_dict() for r in self.routes]}

    def lines(self) -> list:
        out = [f"{'route':<16s} {'RC':>7s} {'DS':>7s}  reason  infractions"]
        for r in self.routes:
            inf = ",".join(i.kind for i in r.infractions) or "-"
            out.append(f"{r.name:<16s} {r.rc:7.2f} {r.ds:7.2f}  {r.reason}  {inf}")
        out.append(f"{'mean':<16s} {self.mean_rc:7.2f} {self.mean_ds:7.2f}")
        return out


def report_from_logs(logs: list) -> EvalReport:
    """Score recorded logs: each ``{"name", "rc", "infractions": [{"kind", "penalty", ...}]}``."""
    routes = []
    for log in logs:
        rc = float(log["rc"])
        if not 0.0 <= rc <= 100.0 or math.isnan(rc):
            raise ValueError(f"route completion must lie in [0, 100], got {rc}")
        inf = [Infraction(d["kind"], float(d.get("t", 0.0)), float(d["penalty"]), d.get("detail", ""))
               for d in log.get("infractions", [])]
        routes.append(RouteResult(log.get("name", f"log{len(routes)}"), rc, inf, log.get("reason", "")))
    return EvalReport(routes)


def run_route(policy, route, cfg: SimConfig | None = None, seed: int = 0, on_step=None) -> RouteResult:
    world = World.create(route, cfg, seed=seed)
    if hasattr(policy, "reset"):
        policy.reset(world)
    error = ""
    while not world.done:
        try:
            ctrl = policy(observe(world, lazy=True))
            step(world, ctrl)
        except Exception as exc:  # policy failure or unusable control: scored at the failure point
            error = f"{type(exc).__name__}: {exc}"
            world.reason = "policy_error"
            break
        if on_step is not None:
            on_step(world, ctrl)
    return RouteResult(route.name, world.route_completion, list(world.infractions), world.reason,
                       world.clock, error)


def evaluate(policy, routes: list, cfg: SimConfig | None = None, seed: int = 0) -> EvalReport:
    """Run ``policy`` closed-loop on every route; each route gets its own seed stream."""
    report = EvalReport()
    for k, route in enumerate(routes):
        route_seed = int(np.random.SeedSequence([seed, k]).generate_state(1)[0])
        report.routes.append(run_route(policy, route, cfg, seed=route_seed))
    return report


# -- reference policies ---------------------------------------------------


class ExpertPolicy:
    """Adapter giving the privileged expert the observation-to-control interface."""

    def __init__(self):
        self.world = None

    def reset(self, world: World) -> None:
        self.world = world

    def __call__(self, obs) -> ControlOutput:
        t, s, b = expert_policy(self.world, with_waypoints=False).control
        return ControlOutput(float(t), float(s), float(b), source="expert")


class ZeroPolicy:
    def __call__(self, obs) -> ControlOutput:
        return ControlOutput(0.0, 0.0, 0.0, source="zero")


class RandomPolicy:
    """Uniform random controls, re-seeded from the world seed on every route."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def reset(self, world: World) -> None:
        self.rng = np.random.default_rng([self.seed, world.seed])

    def __call__(self, obs) -> ControlOutput:
        t, s, b = self.rng.uniform([0, -1, 0], [1, 1, 1])
        return ControlOutput(float(t), float(s), float(b), source="random")

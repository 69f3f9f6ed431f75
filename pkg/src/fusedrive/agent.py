"""Closed-loop driving agent: model forward, waypoint tracking, control blending."""

from __future__ import annotations

import numpy as np

from .config import ControlConfig
from .controller import ControlOutput, PidState, mix_controls, track_waypoints
from .heads import prefer
from .model import DrivingModel


def observation_batch(obs) -> dict:
    """Single observation as a batch of one."""
    return {"main": obs.main[None], "side": obs.side[None], "speed": np.array([obs.speed]),
            "command": np.array([obs.command]), "target": np.asarray(obs.target)[None]}


class ModelPolicy:
    """Maps observations to controls; PID state is reset at the start of every route."""

    def __init__(self, model: DrivingModel, control: ControlConfig | None = None, dt: float = 0.05):
        self.model = model
        self.cfg = (control or ControlConfig()).validate()
        self.dt = dt
        self.pid = PidState.from_config(self.cfg, dt)
        self.last = None

    def reset(self, world=None) -> None:
        self.pid = PidState.from_config(self.cfg, self.dt)
        self.last = None

    def __call__(self, obs) -> ControlOutput:
        out = self.model(observation_batch(obs))
        wps = out.waypoints.data[0].astype(np.float64)
        t, s, b = (float(v) for v in out.control.data[0])
        pred = ControlOutput(t, s, b, source="control_head")
        tracked = track_waypoints(wps, obs.speed, self.pid, self.cfg)
        p = prefer(float(out.est_control.data[0]), float(out.est_waypoint.data[0]), self.cfg.k_c, self.cfg.k_w)
        mixed = mix_controls(pred, tracked, p, self.cfg.mode, self.cfg)
        mixed.info = {"waypoints": wps, "predicted": pred.as_array(), "tracked": tracked.as_array()}
        self.last = mixed
        return mixed

"""PID waypoint tracker and the blend between tracker output and predicted control."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ControlConfig, PidGains


@dataclass
class PidLoop:
    gains: PidGains
    clamp: float = 10.0
    integral: float = 0.0
    prev_error: float | None = None

    def update(self, error: float, dt: float) -> float:
        self.integral = min(max(self.integral + error * dt, -self.clamp), self.clamp)
        deriv = 0.0 if self.prev_error is None else (error - self.prev_error) / dt
        self.prev_error = error
        g = self.gains
        return g.kp * error + g.ki * self.integral + g.kd * deriv


@dataclass
class PidState:
    longitudinal: PidLoop
    lateral: PidLoop
    dt: float = 0.05

    @classmethod
    def from_config(cls, cfg: ControlConfig, dt: float) -> "PidState":
        if dt <= 0:
            raise ValueError("dt must be positive")
        return cls(PidLoop(cfg.longitudinal, cfg.integral_clamp), PidLoop(cfg.lateral, cfg.integral_clamp), dt)


@dataclass
class ControlOutput:
    throttle: float
    steer: float
    brake: float
    source: str = "tracker"
    prefer: float | None = None
    info: dict = field(default_factory=dict)

    def as_array(self) -> np.ndarray:
        return np.array([self.throttle, self.steer, self.brake])


def clamp_ranges(throttle: float, steer: float, brake: float) -> tuple:
    return (min(max(throttle, 0.0), 1.0), min(max(steer, -1.0), 1.0), min(max(brake, 0.0), 1.0))


def track_waypoints(waypoints, ego_speed: float, pid: PidState, cfg: ControlConfig = ControlConfig()) -> ControlOutput:
    """Turn ego-frame waypoints (x forward, y left) into throttle/steer/brake.

    Desired speed comes from the spacing of the first two waypoints; steering
    aims at their midpoint.
    """
    wp = np.asarray(waypoints, dtype=np.float64)
    if wp.ndim != 2 or wp.shape[0] < 2 or wp.shape[1] != 2:
        raise ValueError(f"track_waypoints needs K >= 2 waypoints of shape (K, 2), got {wp.shape}")
    desired = float(np.linalg.norm(wp[1] - wp[0])) / cfg.waypoint_dt
    aim = 0.5 * (wp[0] + wp[1])
    angle = math.atan2(aim[1], aim[0]) if np.linalg.norm(aim) > 1e-6 else 0.0
    steer = pid.lateral.update(angle, pid.dt)

    brake = desired < cfg.brake_speed or (desired > 0 and ego_speed / desired > cfg.brake_ratio)
    err = desired - ego_speed
    out = pid.longitudinal.update(err, pid.dt)
    if brake:
        throttle, brk = 0.0, 1.0
    else:
        throttle, brk = min(max(out, 0.0), cfg.max_throttle), 0.0
    if desired < cfg.brake_speed:
        steer = 0.0
    t, s, b = clamp_ranges(throttle, steer, brk)
    return ControlOutput(t, s, b, source="tracker", info={"desired_speed": desired, "aim_angle": angle})


def mix_controls(pred: ControlOutput, tracked: ControlOutput, prefer: float, mode: str = "dynamic",
                 cfg: ControlConfig = ControlConfig()) -> ControlOutput:
    """Channelwise convex blend ``prefer * pred + (1 - prefer) * tracked``.

    ``static_tcp`` ignores ``prefer`` and uses the fixed ``cfg.static_alpha``.
    """
    if mode == "dynamic":
        if not 0.0 <= prefer <= 1.0 or math.isnan(prefer):
            raise ValueError(f"prefer must lie in [0, 1], got {prefer}")
        a = prefer
    elif mode == "static_tcp":
        a = cfg.static_alpha
    else:
        raise ValueError(f"unknown mixing mode {mode!r}")
    p, q = pred.as_array(), tracked.as_array()
    if a == 1.0:
        mixed = p
    elif a == 0.0:
        mixed = q
    else:
        mixed = a * p + (1 - a) * q
    t, s, b = clamp_ranges(*map(float, mixed))
    if t > 0 and b > cfg.coactivation_brake:
        t = 0.0
    return ControlOutput(t, s, b, source="mixed", prefer=a)

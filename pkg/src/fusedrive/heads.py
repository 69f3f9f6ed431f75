"""Prediction heads, training losses, the loss estimator and the control preference weight."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Linear, init_linear, linear, normal, param
from .tensor import Tensor

CONTROL_CHANNELS = ("throttle", "steer", "brake")


@dataclass
class GRUCell:
    wx: Tensor   # (in, 3H)  gate order r, z, n
    wh: Tensor   # (H, 3H)
    bx: Tensor   # (3H,)
    bh: Tensor   # (3H,)

    @property
    def hidden(self) -> int:
        return self.wh.shape[0]


def init_gru(rng, d_in: int, hidden: int) -> GRUCell:
    return GRUCell(normal(rng, (d_in, 3 * hidden), d_in ** -0.5),
                   normal(rng, (hidden, 3 * hidden), hidden ** -0.5),
                   param(np.zeros(3 * hidden)), param(np.zeros(3 * hidden)))


def gru_cell(x: Tensor, h: Tensor, cell: GRUCell) -> Tensor:
    hd = cell.hidden
    gx = T.add(T.matmul(x, cell.wx), cell.bx)
    gh = T.add(T.matmul(h, cell.wh), cell.bh)
    part = lambda g, i: T.take(g, (Ellipsis, slice(i * hd, (i + 1) * hd)))  # noqa: E731
    r = T.sigmoid(T.add(part(gx, 0), part(gh, 0)))
    z = T.sigmoid(T.add(part(gx, 1), part(gh, 1)))
    n = T.tanh(T.add(part(gx, 2), T.mul(r, part(gh, 2))))
    # h' = n + z * (h - n)
    return T.add(n, T.mul(z, T.sub(h, n)))


@dataclass
class WaypointHead:
    gru: GRUCell
    out: Linear        # H -> 2 (per-step displacement)


@dataclass
class ControlHead:
    hidden: Linear     # D -> H_c, GELU gives X_c
    out: Linear        # H_c -> 3


@dataclass
class AuxHeads:
    speed: Linear      # D -> 1, on the trajectory feature
    feature: Linear    # D -> latent_dim, on the control feature


@dataclass
class MixerParams:
    control: Linear    # X_c -> 1
    waypoint: Linear   # X_w -> 1


def init_waypoint_head(rng, d: int) -> WaypointHead:
    return WaypointHead(init_gru(rng, 4, d), init_linear(rng, d, 2))


def init_control_head(rng, d: int, hidden: int) -> ControlHead:
    return ControlHead(init_linear(rng, d, hidden), init_linear(rng, hidden, 3))


def waypoint_rollout(traj_feature: Tensor, target_point: Tensor, head: WaypointHead, horizon: int,
                     point_scale: float = 1.0):
    """Autoregressive GRU rollout of cumulative ego-frame waypoints.

    The hidden state starts at ``traj_feature``; each step consumes the
    previous waypoint and the target point and adds a displacement.
    Returns ``(waypoints (B, K, 2), final hidden X_w)``.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    b = traj_feature.shape[0]
    h = traj_feature
    wp = T.Tensor(np.zeros((b, 2), dtype=traj_feature.data.dtype))
    tgt = T.scale(target_point, 1.0 / point_scale)
    out = []
    for _ in range(horizon):
        x = T.concat([T.scale(wp, 1.0 / point_scale), tgt], axis=-1)
        h = gru_cell(x, h, head.gru)
        wp = T.add(wp, linear(h, head.out))
        out.append(wp)
    return T.stack(out, axis=1), h


def control_forward(ctrl_feature: Tensor, head: ControlHead):
    """Returns ``(controls (B,3) as throttle/steer/brake, X_c (B, H_c))``."""
    xc = T.gelu(linear(ctrl_feature, head.hidden))
    pre = linear(xc, head.out)
    thr = T.sigmoid(T.take(pre, (Ellipsis, slice(0, 1))))
    steer = T.tanh(T.take(pre, (Ellipsis, slice(1, 2))))
    brake = T.sigmoid(T.take(pre, (Ellipsis, slice(2, 3))))
    return T.concat([thr, steer, brake], axis=-1), xc


def estimate_losses(xc: Tensor, xw: Tensor, m: MixerParams):
    """Predicted control and waypoint losses, each ``(B,)``."""
    lc = linear(xc, m.control)
    lw = linear(xw, m.waypoint)
    b = lc.shape[0]
    return T.reshape(lc, (b,)), T.reshape(lw, (b,))


def prefer(est_control, est_waypoint, k_c: float = 1.0, k_w: float = 1.0):
    """Weight of the predicted-control branch.

    ``1 - e^{k_c Lc} / (e^{k_c Lc} + e^{k_w Lw})`` evaluated as the logistic of
    ``k_w Lw - k_c Lc``, which never overflows.  Works on floats and arrays.
    """
    z = k_w * np.asarray(est_waypoint, dtype=np.float64) - k_c * np.asarray(est_control, dtype=np.float64)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(out) if out.ndim == 0 else out


def prefer_reference(est_control: float, est_waypoint: float, k_c: float = 1.0, k_w: float = 1.0) -> float:
    """Direct transcription of the ratio form (overflows for large arguments)."""
    a = math.exp(k_c * est_control)
    return 1.0 - a / (a + math.exp(k_w * est_waypoint))


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBundle:
    speed: Tensor
    feature: Tensor
    waypoint: Tensor
    control: Tensor
    estimator: Tensor
    total: Tensor
    per_sample_waypoint: np.ndarray
    per_sample_control: np.ndarray

    def scalars(self) -> dict:
        return {k: float(getattr(self, k).data) for k in ("speed", "feature", "waypoint", "control",
                                                          "estimator", "total")}


REQUIRED_LABELS = ("waypoints", "control", "target_speed", "latent")


def compute_losses(out, label: dict, weights, estimator_targets: tuple | None = None,
                   estimator_weight: float | None = None) -> LossBundle:
    """Losses of one batch; every component is a batch mean.

    ``out`` is a model output bundle; ``label`` holds batched arrays.  The
    estimator regresses onto the per-sample waypoint/control losses, which
    enter as constants: the current values unless ``estimator_targets``
    freezes them explicitly.
    """
    missing = [k for k in REQUIRED_LABELS if label.get(k) is None]
    if missing:
        raise KeyError(f"label is missing field(s): {', '.join(missing)}")
    dt = out.waypoints.data.dtype
    wp_t = T.Tensor(np.asarray(label["waypoints"], dtype=dt))
    ctl_t = T.Tensor(np.asarray(label["control"], dtype=dt))
    spd_t = T.Tensor(np.asarray(label["target_speed"], dtype=dt).reshape(-1, 1))
    lat_t = T.Tensor(np.asarray(label["latent"], dtype=dt))

    per_w = T.mean(T.l1_distance(out.waypoints, wp_t), axis=(1, 2))
    per_c = T.mean(T.l1_distance(out.control, ctl_t), axis=1)
    l_w = T.mean(per_w)
    l_c = T.mean(per_c)
    l_s = T.mean(T.l1_distance(out.speed, spd_t))
    l_f = T.mean(T.squared_distance(out.feature, lat_t))

    if estimator_targets is None:
        tgt_c, tgt_w = per_c.data, per_w.data
    else:
        tgt_c, tgt_w = (np.asarray(a, dtype=dt) for a in estimator_targets)
    est = T.mean(T.add(T.squared_distance(out.est_control, T.Tensor(tgt_c)),
                       T.squared_distance(out.est_waypoint, T.Tensor(tgt_w))))

    w_est = weights.estimator if estimator_weight is None else estimator_weight
    terms = []
    for lam, term in ((weights.speed, l_s), (weights.feature, l_f), (weights.waypoint, l_w),
                      (weights.control, l_c), (w_est, est)):
        if lam:
            terms.append(T.scale(term, lam))
    total = terms[0] if terms else T.scale(l_w, 0.0)
    for t in terms[1:]:
        total = T.add(total, t)
    return LossBundle(l_s, l_f, l_w, l_c, est, total, per_w.data.copy(), per_c.data.copy())

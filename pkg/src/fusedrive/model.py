"""The full driving network: backbone -> decoder -> heads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import BackboneWeights, backbone_forward, init_backbone
from .config import ModelConfig
from .decoder import DecoderWeights, TokenLayout, build_token_sequence, decoder_forward, encode_measurements, \
    init_decoder, readout
from .heads import AuxHeads, ControlHead, MixerParams, WaypointHead, control_forward, estimate_losses, \
    init_control_head, init_waypoint_head, waypoint_rollout
from .layers import init_linear, named_parameters
from .tensor import Tensor

# independent init substreams, so toggling one component leaves the others' weights unchanged
_STREAMS = {"backbone": 1, "decoder": 2, "waypoint": 3, "control": 4, "aux": 5, "mixer": 6}


@dataclass
class ModelWeights:
    backbone: BackboneWeights
    decoder: DecoderWeights
    waypoint: WaypointHead
    control: ControlHead
    aux: AuxHeads
    mixer: MixerParams


@dataclass
class ModelOutput:
    waypoints: Tensor       # (B, K, 2)
    control: Tensor         # (B, 3) throttle, steer, brake
    speed: Tensor           # (B, 1)
    feature: Tensor         # (B, latent_dim)
    est_control: Tensor     # (B,)
    est_waypoint: Tensor    # (B,)
    x_c: Tensor
    x_w: Tensor
    attention: np.ndarray   # (B, depth, H, T, T)
    layout: TokenLayout
    stage_tokens: list


def init_weights(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    cfg.validate()
    rng = {k: np.random.default_rng([seed, v]) for k, v in _STREAMS.items()}
    d = cfg.decoder_dim
    return ModelWeights(
        backbone=init_backbone(rng["backbone"], cfg),
        decoder=init_decoder(rng["decoder"], cfg),
        waypoint=init_waypoint_head(rng["waypoint"], d),
        control=init_control_head(rng["control"], d, cfg.control_hidden),
        aux=AuxHeads(init_linear(rng["aux"], d, 1), init_linear(rng["aux"], d, cfg.latent_dim)),
        mixer=MixerParams(init_linear(rng["mixer"], cfg.control_hidden, 1), init_linear(rng["mixer"], d, 1)),
    )


def one_hot(command, n: int) -> np.ndarray:
    command = np.asarray(command)
    if command.ndim == 2:
        return command
    out = np.zeros((command.shape[0], n))
    out[np.arange(command.shape[0]), command.astype(int)] = 1.0
    return out


class DrivingModel:
    """Config plus named parameters; ``forward`` is pure given the weights."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, weights: ModelWeights | None = None):
        self.cfg = cfg.validate()
        self.weights = weights if weights is not None else init_weights(cfg, seed)
        self.params = dict(named_parameters(self.weights))
        for name, p in self.params.items():
            p.name = name

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "DrivingModel":
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict:
        return {k: p.data for k, p in self.params.items()}

    def load_state_dict(self, state: dict) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)

    def forward(self, batch: dict) -> ModelOutput:
        cfg, w = self.cfg, self.weights
        dt = self.params[next(iter(self.params))].data.dtype
        main = T.Tensor(np.asarray(batch["main"], dtype=dt))
        side = T.Tensor(np.asarray(batch["side"], dtype=dt))
        b = main.shape[0]
        speed = T.Tensor(np.asarray(batch["speed"], dtype=dt).reshape(b, 1))
        command = T.Tensor(one_hot(batch["command"], cfg.n_commands).astype(dt))
        target = T.Tensor(np.asarray(batch["target"], dtype=dt).reshape(b, 2))

        vt, record = backbone_forward(main, side, w.backbone, cfg)
        meas = encode_measurements(speed, command, target, w.decoder.meas, cfg.speed_scale, cfg.point_scale)
        tokens, layout = build_token_sequence(w.decoder.pred, meas, vt, w.decoder)
        feats, attn = decoder_forward(tokens, w.decoder.blocks, residuals=cfg.residuals)
        traj, ctrl = readout(feats, layout, cfg.readout)

        wps, xw = waypoint_rollout(traj, target, w.waypoint, cfg.n_waypoints, cfg.point_scale)
        controls, xc = control_forward(ctrl, w.control)
        spd = T.add(T.matmul(traj, w.aux.speed.w), w.aux.speed.b)
        feat = T.add(T.matmul(ctrl, w.aux.feature.w), w.aux.feature.b)
        if cfg.detach_estimator_inputs:
            est_c, est_w = estimate_losses(T.detach(xc), T.detach(xw), w.mixer)
        else:
            est_c, est_w = estimate_losses(xc, xw, w.mixer)
        return ModelOutput(wps, controls, spd, feat, est_c, est_w, xc, xw, attn, layout, record)

    __call__ = forward

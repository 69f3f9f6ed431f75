"""Decoder-only transformer over ``[prediction | measurement | side | main]`` tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import init_block, transformer_block
from .backbone import ViewTokens
from .config import ModelConfig
from .layers import Linear, init_linear, linear, normal
from .tensor import ShapeError, Tensor

READOUT_MODES = ("learnable_vector", "mean_pool")


@dataclass(frozen=True)
class TokenLayout:
    n_pred: int
    n_meas: int
    n_side: int
    n_main: int

    @property
    def offsets(self) -> tuple:
        """Start offsets of the measurement, side and main blocks."""
        a = self.n_pred
        b = a + self.n_meas
        return (a, b, b + self.n_side)

    @property
    def total(self) -> int:
        return self.n_pred + self.n_meas + self.n_side + self.n_main

    def slices(self) -> dict:
        a, b, c = self.offsets
        return {"pred": slice(0, a), "meas": slice(a, b), "side": slice(b, c), "main": slice(c, self.total)}

    def to_dict(self) -> dict:
        return {"n_pred": self.n_pred, "n_meas": self.n_meas, "n_side": self.n_side,
                "n_main": self.n_main, "offsets": list(self.offsets), "total": self.total}


@dataclass
class MeasurementEncoder:
    speed: Linear      # 1 -> D
    command: Linear    # n_commands -> D
    target: Linear     # 2 -> D


@dataclass
class DecoderWeights:
    pred: Tensor | None        # (2, D) learnable prediction embeddings
    meas: MeasurementEncoder
    side_proj: Linear
    main_proj: Linear
    blocks: list


def init_decoder(rng, cfg: ModelConfig) -> DecoderWeights:
    d = cfg.decoder_dim
    pred = normal(rng, (2, d), cfg.pred_init_std) if cfg.readout == "learnable_vector" else None
    meas = MeasurementEncoder(init_linear(rng, 1, d), init_linear(rng, cfg.n_commands, d), init_linear(rng, 2, d))
    return DecoderWeights(
        pred=pred,
        meas=meas,
        side_proj=init_linear(rng, cfg.side.dims[-1], d),
        main_proj=init_linear(rng, cfg.main.dims[-1], d),
        blocks=[init_block(rng, d, heads=cfg.decoder_heads, mlp_ratio=cfg.decoder_mlp_ratio)
                for _ in range(cfg.decoder_depth)],
    )


def encode_measurements(speed: Tensor, command: Tensor, target: Tensor, enc: MeasurementEncoder,
                        speed_scale: float = 1.0, point_scale: float = 1.0) -> Tensor:
    """``speed (B,1)``, ``command (B,n_cmd)``, ``target (B,2)`` -> three tokens ``(B, 3, D)``."""
    toks = [linear(T.scale(speed, 1.0 / speed_scale), enc.speed),
            linear(command, enc.command),
            linear(T.scale(target, 1.0 / point_scale), enc.target)]
    return T.stack(toks, axis=1)


def build_token_sequence(pred: Tensor | None, meas_tokens: Tensor, vt: ViewTokens, w: DecoderWeights):
    """Concatenate the four sources in decoder order; returns ``(tokens (B,T,D), TokenLayout)``."""
    b = meas_tokens.shape[0]
    d = meas_tokens.shape[-1]
    side = linear(vt.side_joined(), w.side_proj)
    main = linear(vt.main, w.main_proj)
    parts = []
    n_pred = 0
    if pred is not None:
        if pred.shape[-1] != d:
            raise ShapeError("build_token_sequence", pred.shape, meas_tokens.shape)
        n_pred = pred.shape[0]
        base = T.Tensor(np.zeros((b,) + pred.shape, dtype=pred.data.dtype))
        parts.append(T.add(base, pred))
    for blk in (meas_tokens, side, main):
        if blk.shape[-1] != d:
            raise ShapeError("build_token_sequence", blk.shape, meas_tokens.shape, detail="dim after projection")
    parts += [meas_tokens, side, main]
    layout = TokenLayout(n_pred, meas_tokens.shape[1], side.shape[1], main.shape[1])
    return T.concat(parts, axis=1), layout


def decoder_forward(tokens: Tensor, blocks: list, residuals: bool = True):
    """Full (non-causal) attention through every block.

    Returns ``(features, attention record (B, depth, H, T, T) as numpy)``.
    """
    if not blocks:
        raise ValueError("decoder needs at least one block")
    maps = []
    x = tokens
    for bw in blocks:
        x, (a,) = transformer_block(x, bw, residuals=residuals)
        maps.append(a.data)
    return x, np.stack(maps, axis=1)


def readout(features: Tensor, layout: TokenLayout, mode: str):
    """``(traj_feature, ctrl_feature)``, each ``(B, D)``."""
    if mode == "learnable_vector":
        if layout.n_pred < 2:
            raise ValueError("learnable_vector readout needs two prediction tokens")
        return T.take(features, (slice(None), 0)), T.take(features, (slice(None), 1))
    if mode == "mean_pool":
        rest = T.take(features, (slice(None), slice(layout.n_pred, None)))
        pooled = T.mean(rest, axis=1)
        return pooled, pooled
    raise ValueError(f"unknown readout mode {mode!r}; expected one of {READOUT_MODES}")

"""Two-stream ViT backbone with bidirectional cross-attention fusion after each stage.

The main view runs through the wider stream, the side view(s) through the
narrower one.  Between stages a 2x2 patch merge halves the token grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import AttentionWeights, init_attention, init_block, multi_head_attention, transformer_block
from .config import ModelConfig, StreamConfig
from .layers import Linear, init_linear, linear, param
from .tensor import ShapeError, Tensor


@dataclass
class ViewTokens:
    main: Tensor   # (B, P, D_main)
    side: Tensor   # (B * n_side, S, D_side)
    stage: int
    n_side: int = 1

    def side_joined(self) -> Tensor:
        """Side tokens of all side views concatenated per sample: ``(B, n_side * S, D_side)``."""
        bs, s, d = self.side.shape
        return T.reshape(self.side, (bs // self.n_side, self.n_side * s, d))


@dataclass
class StreamWeights:
    embed: Linear
    pos: list          # per stage (T_s, D_s)
    blocks: list       # per stage list of BlockWeights
    merges: list       # between stages: Linear(4 D_s -> D_{s+1})


@dataclass
class FusionWeights:
    side_to_main: Linear
    main_to_side: Linear
    main_attn: AttentionWeights
    side_attn: AttentionWeights


@dataclass
class BackboneWeights:
    main: StreamWeights
    side: StreamWeights
    fusion: list       # per stage FusionWeights or None


def init_stream(rng, cfg: ModelConfig, sc: StreamConfig) -> StreamWeights:
    p, c = cfg.patch, cfg.in_channels
    embed = init_linear(rng, c * p * p, sc.dims[0])
    pos, blocks, merges = [], [], []
    for s, (d, depth, g) in enumerate(zip(sc.dims, sc.depths, sc.groups)):
        pos.append(param(rng.standard_normal((cfg.stage_tokens(s), d)) * 0.02))
        blocks.append([init_block(rng, d, mlp_ratio=cfg.backbone_mlp_ratio, groups=g) for _ in range(depth)])
        if s + 1 < sc.n_stages:
            merges.append(init_linear(rng, 4 * d, sc.dims[s + 1]))
    return StreamWeights(embed, pos, blocks, merges)


def init_fusion(rng, d_main: int, d_side: int, heads: int, zero_out: bool = False) -> FusionWeights:
    return FusionWeights(
        side_to_main=init_linear(rng, d_side, d_main),
        main_to_side=init_linear(rng, d_main, d_side),
        main_attn=init_attention(rng, d_main, heads=heads, zero_out=zero_out),
        side_attn=init_attention(rng, d_side, heads=heads, zero_out=zero_out),
    )


def init_backbone(rng, cfg: ModelConfig) -> BackboneWeights:
    main = init_stream(rng, cfg, cfg.main)
    side = init_stream(rng, cfg, cfg.side)
    fusion = [init_fusion(rng, dm, ds, cfg.fusion_heads) if cfg.fuse_at(s) else None
              for s, (dm, ds) in enumerate(zip(cfg.main.dims, cfg.side.dims))]
    return BackboneWeights(main, side, fusion)


def patchify(image: Tensor, patch: int) -> Tensor:
    """``(B, C, H, W) -> (B, (H/p)(W/p), C*p*p)``; patches row-major, each flattened channel-major."""
    b, c, h, w = image.shape
    if h % patch or w % patch:
        raise ShapeError("patch_embed", image.shape, (patch,), detail="image not divisible by patch")
    x = T.reshape(image, (b, c, h // patch, patch, w // patch, patch))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (b, (h // patch) * (w // patch), c * patch * patch))


def patch_embed(image: Tensor, patch: int, embed: Linear, pos: Tensor | None = None) -> Tensor:
    tokens = linear(patchify(image, patch), embed)
    if pos is not None:
        tokens = T.add(tokens, pos)
    return tokens


def merge_tokens(x: Tensor, grid: int, merge: Linear) -> Tensor:
    """2x2 neighbour concat + affine: ``(B, g*g, D) -> (B, (g/2)^2, D')``."""
    b, t, d = x.shape
    if t != grid * grid or grid % 2:
        raise ShapeError("merge_tokens", x.shape, (grid,), detail="token grid must be even and square")
    h = grid // 2
    x = T.reshape(x, (b, h, 2, h, 2, d))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))
    x = T.reshape(x, (b, h * h, 4 * d))
    return linear(x, merge)


def fuse_stage(vt: ViewTokens, fw: FusionWeights) -> ViewTokens:
    """Bidirectional residual cross-attention between the main and side streams."""
    side_all = vt.side_joined()
    if side_all.shape[-1] != fw.side_to_main.d_in or vt.main.shape[-1] != fw.main_to_side.d_in:
        raise ShapeError("fuse_stage", vt.main.shape, vt.side.shape)
    kv_main = linear(side_all, fw.side_to_main)
    upd_main, _ = multi_head_attention(vt.main, kv_main, fw.main_attn)

    kv_side = linear(vt.main, fw.main_to_side)
    if vt.n_side > 1:
        b, p, d = kv_side.shape
        kv_side = T.reshape(T.concat([T.reshape(kv_side, (b, 1, p, d))] * vt.n_side, axis=1),
                            (b * vt.n_side, p, d))
    upd_side, _ = multi_head_attention(vt.side, kv_side, fw.side_attn)
    return ViewTokens(T.add(vt.main, upd_main), T.add(vt.side, upd_side), vt.stage, vt.n_side)


def _run_blocks(x: Tensor, blocks: list, residuals: bool) -> Tensor:
    for bw in blocks:
        x, _ = transformer_block(x, bw, residuals=residuals)
    return x


def backbone_forward(main_image: Tensor, side_image: Tensor, w: BackboneWeights, cfg: ModelConfig):
    """Returns ``(final ViewTokens, [per-stage token counts as (P, S)])``.

    ``side_image`` is ``(B, C, H, W)`` or ``(B, n_side, C, H, W)``.
    """
    if main_image.shape[-1] != cfg.image_size or main_image.shape[-2] != cfg.image_size:
        raise ShapeError("backbone_forward", main_image.shape, (cfg.image_size, cfg.image_size))
    n_side = 1
    if side_image.ndim == 5:
        b, n_side = side_image.shape[:2]
        side_image = T.reshape(side_image, (b * n_side,) + side_image.shape[2:])
    main = patch_embed(main_image, cfg.patch, w.main.embed, w.main.pos[0])
    side = patch_embed(side_image, cfg.patch, w.side.embed, w.side.pos[0])
    vt = ViewTokens(main, side, 0, n_side)
    record = []
    for s in range(cfg.n_stages):
        if s > 0:
            grid = cfg.stage_grid(s - 1)
            main = T.add(merge_tokens(vt.main, grid, w.main.merges[s - 1]), w.main.pos[s])
            side = T.add(merge_tokens(vt.side, grid, w.side.merges[s - 1]), w.side.pos[s])
            vt = ViewTokens(main, side, s, n_side)
        vt = ViewTokens(_run_blocks(vt.main, w.main.blocks[s], cfg.residuals),
                        _run_blocks(vt.side, w.side.blocks[s], cfg.residuals), s, n_side)
        if w.fusion[s] is not None:
            vt = fuse_stage(vt, w.fusion[s])
        record.append((vt.main.shape[1], vt.side.shape[1]))
    return vt, record


def expected_token_counts(cfg: ModelConfig) -> list:
    return [(cfg.stage_tokens(s), cfg.stage_tokens(s)) for s in range(cfg.n_stages)]


def zero_fusion_outputs(w: BackboneWeights) -> None:
    for fw in w.fusion:
        if fw is None:
            continue
        for att in (fw.main_attn, fw.side_attn):
            att.o.w.data = np.zeros_like(att.o.w.data)
            if att.o.b is not None:
                att.o.b.data = np.zeros_like(att.o.b.data)

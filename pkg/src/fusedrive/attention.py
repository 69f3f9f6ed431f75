"""Scaled dot-product attention, multi-head and cascaded group attention, transformer blocks.

All functions take token matrices shaped ``(..., T, D)``; any leading dims are
batch dims.  Each attention call also returns its post-softmax matrices so
callers can inspect or dump them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import LayerNorm, Linear, init_layer_norm, init_linear, layer_norm, linear
from .tensor import ShapeError, Tensor


@dataclass
class AttentionWeights:
    q: Linear
    k: Linear
    v: Linear
    o: Linear
    heads: int = 1

    @property
    def key_dim(self) -> int:
        return self.q.d_out // self.heads

    @property
    def value_dim(self) -> int:
        return self.v.d_out // self.heads


def init_attention(rng, d_q: int, d_kv: int | None = None, heads: int = 1, key_dim: int | None = None,
                   value_dim: int | None = None, d_out: int | None = None,
                   zero_out: bool = False) -> AttentionWeights:
    d_kv = d_q if d_kv is None else d_kv
    d_out = d_q if d_out is None else d_out
    if key_dim is None:
        if d_q % heads:
            raise ShapeError("init_attention", (d_q,), (heads,), detail="model dim not divisible by heads")
        key_dim = d_q // heads
    value_dim = key_dim if value_dim is None else value_dim
    return AttentionWeights(
        q=init_linear(rng, d_q, heads * key_dim),
        # a key bias shifts every logit of a row equally, so it would never receive gradient
        k=init_linear(rng, d_kv, heads * key_dim, bias=False),
        v=init_linear(rng, d_kv, heads * value_dim),
        o=init_linear(rng, heads * value_dim, d_out, zero=zero_out),
        heads=heads,
    )


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None):
    """``softmax(q kᵀ · scale) v`` with ``scale`` defaulting to ``1/sqrt(d_k)``.

    Returns ``(output, attention)``.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError("scaled_dot_attention", q.shape, k.shape, detail="key dims differ")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError("scaled_dot_attention", k.shape, v.shape, detail="key/value token counts differ")
    dk = q.shape[-1]
    if scale is None:
        scale = 1.0 / np.sqrt(dk)
    logits = T.scale(T.matmul(q, T.transpose(k)), scale)
    attn = T.softmax(logits)
    return T.matmul(attn, v), attn


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = T.reshape(x, (*lead, t, heads, d // heads))
    n = len(lead)
    return T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, d = x.shape
    n = len(lead)
    x = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return T.reshape(x, (*lead, t, h * d))


def multi_head_attention(x_q: Tensor, x_kv: Tensor, w: AttentionWeights):
    """Self-attention when ``x_kv is x_q``, cross-attention otherwise.

    Returns ``(output (..., Tq, D_out), attention (..., H, Tq, Tk))``.
    """
    if x_q.shape[-1] != w.q.d_in:
        raise ShapeError("multi_head_attention", x_q.shape, w.q.w.shape, detail="query input dim")
    if x_kv.shape[-1] != w.k.d_in:
        raise ShapeError("multi_head_attention", x_kv.shape, w.k.w.shape, detail="key/value input dim")
    q = _split_heads(linear(x_q, w.q), w.heads)
    k = _split_heads(linear(x_kv, w.k), w.heads)
    v = _split_heads(linear(x_kv, w.v), w.heads)
    out, attn = scaled_dot_attention(q, k, v)
    return linear(_merge_heads(out), w.o), attn


# ---------------------------------------------------------------------------
# cascaded group attention


@dataclass
class CascadedWeights:
    """One single-head attention per channel group plus the final mixing projection."""

    groups: list
    proj: Linear

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def init_cascaded(rng, dim: int, n_groups: int, key_dim: int | None = None,
                  zero_out: bool = False) -> CascadedWeights:
    if dim % n_groups:
        raise ShapeError("init_cascaded", (dim,), (n_groups,), detail="dim not divisible by groups")
    dg = dim // n_groups
    groups = [init_attention(rng, dg, heads=1, key_dim=key_dim or dg) for _ in range(n_groups)]
    return CascadedWeights(groups, init_linear(rng, dim, dim, zero=zero_out))


def cascaded_group_attention(x: Tensor, w: CascadedWeights, cascade: bool = True):
    """Channel-split group attention where group ``g`` also sees group ``g-1``'s output.

    Returns ``(output, [attention per group])``; each group's attention has a
    singleton head axis.
    """
    d = x.shape[-1]
    g_count = w.n_groups
    if d % g_count:
        raise ShapeError("cascaded_group_attention", x.shape, (g_count,), detail="dim not divisible by groups")
    dg = d // g_count
    outs, attns = [], []
    prev = None
    for g, gw in enumerate(w.groups):
        xg = T.take(x, (Ellipsis, slice(g * dg, (g + 1) * dg)))
        if cascade and prev is not None:
            xg = T.add(xg, prev)
        og, ag = multi_head_attention(xg, xg, gw)
        outs.append(og)
        attns.append(ag)
        prev = og
    joined = outs[0] if g_count == 1 else T.concat(outs, axis=-1)
    return linear(joined, w.proj), attns


# ---------------------------------------------------------------------------
# transformer block


@dataclass
class BlockWeights:
    attn: object
    ln1: LayerNorm
    ln2: LayerNorm
    fc1: Linear
    fc2: Linear


def init_block(rng, dim: int, heads: int = 4, mlp_ratio: int = 2, groups: int | None = None,
               zero_out: bool = False) -> BlockWeights:
    """``groups`` selects cascaded group attention; otherwise plain multi-head attention."""
    if mlp_ratio < 1:
        raise ValueError("mlp_ratio must be >= 1")
    if groups is not None:
        attn = init_cascaded(rng, dim, groups, zero_out=zero_out)
    else:
        attn = init_attention(rng, dim, heads=heads, zero_out=zero_out)
    return BlockWeights(
        attn=attn,
        ln1=init_layer_norm(dim),
        ln2=init_layer_norm(dim),
        fc1=init_linear(rng, dim, mlp_ratio * dim),
        fc2=init_linear(rng, mlp_ratio * dim, dim, zero=zero_out),
    )


def _attend(x: Tensor, attn):
    if isinstance(attn, CascadedWeights):
        out, maps = cascaded_group_attention(x, attn)
        return out, maps
    out, a = multi_head_attention(x, x, attn)
    return out, [a]


def mlp(x: Tensor, w: BlockWeights) -> Tensor:
    return linear(T.gelu(linear(x, w.fc1)), w.fc2)


def transformer_block(x: Tensor, w: BlockWeights, residuals: bool = True):
    """Pre-norm residual block; ``residuals=False`` gives the bare ``MLP(Attention(x))`` form.

    Returns ``(output, [attention matrices])``.
    """
    if x.shape[-1] != w.ln1.gamma.shape[0]:
        raise ShapeError("transformer_block", x.shape, w.ln1.gamma.shape)
    if not residuals:
        h, maps = _attend(x, w.attn)
        return mlp(h, w), maps
    h, maps = _attend(layer_norm(x, w.ln1), w.attn)
    x = T.add(x, h)
    x = T.add(x, mlp(layer_norm(x, w.ln2), w))
    return x, maps

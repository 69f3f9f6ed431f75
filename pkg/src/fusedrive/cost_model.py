"""Closed-form parameter and multiply-accumulate counts for a ModelConfig.

Conventions: a matmul ``(m x k)(k x n)`` costs ``m*k*n`` MACs; bias adds,
activations, residual adds, layer norms and softmax cost one MAC per output
element.  Counts are for a single sample.  Flops are reported as 2 x MACs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .config import ModelConfig

CONVENTION = "MACs: m*k*n per matmul, 1 per element for elementwise/norm/softmax; Flops = 2 x MACs; batch 1"


@dataclass
class Row:
    name: str
    params: int = 0
    macs: int = 0


@dataclass
class CostReport:
    rows: list = field(default_factory=list)
    assumptions: dict = field(default_factory=dict)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs for r in self.rows)

    @property
    def flops(self) -> int:
        return 2 * self.macs

    def total(self, prefix: str, what: str = "params") -> int:
        return sum(getattr(r, what) for r in self.rows if r.name.startswith(prefix))

    def add(self, name: str, params: int = 0, macs: int = 0) -> None:
        self.rows.append(Row(name, int(params), int(macs)))

    def extend(self, prefix: str, other: "CostReport") -> None:
        for r in other.rows:
            self.rows.append(Row(f"{prefix}.{r.name}", r.params, r.macs))

    def to_dict(self) -> dict:
        return {"convention": CONVENTION, "assumptions": self.assumptions, "total_params": self.params,
                "total_macs": self.macs, "total_flops": self.flops,
                "rows": [{"name": r.name, "params": r.params, "macs": r.macs} for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def to_text(self, grouped: bool = True) -> str:
        rows = self.rows
        if grouped:
            agg = {}
            for r in rows:
                key = ".".join(r.name.split(".")[:2])
                a = agg.setdefault(key, Row(key))
                a.params += r.params
                a.macs += r.macs
            rows = list(agg.values())
        w = max([len(r.name) for r in rows] + [10])
        out = [f"# {CONVENTION}",
               "# inputs: " + ", ".join(f"{k}={v}" for k, v in self.assumptions.items()),
               f"{'layer':<{w}s} {'params':>12s} {'MACs':>14s}"]
        out += [f"{r.name:<{w}s} {r.params:>12,d} {r.macs:>14,d}" for r in rows]
        out.append(f"{'total':<{w}s} {self.params:>12,d} {self.macs:>14,d}")
        out.append(f"{'flops':<{w}s} {'':>12s} {self.flops:>14,d}")
        return "\n".join(out)


# ---------------------------------------------------------------------------
# layer formulas


def linear_cost(d_in: int, d_out: int, tokens: int = 1, bias: bool = True) -> Row:
    return Row("linear", d_in * d_out + (d_out if bias else 0), tokens * d_in * d_out + (tokens * d_out if bias else 0))


def matmul_macs(m: int, k: int, n: int) -> int:
    return m * k * n


def attention_cost(d_q: int, t_q: int, t_k: int, d_kv: int | None = None, heads: int = 1,
                   key_dim: int | None = None, value_dim: int | None = None, d_out: int | None = None) -> CostReport:
    """Projections, the quadratic score and mixing terms, and the output projection."""
    d_kv = d_q if d_kv is None else d_kv
    d_out = d_q if d_out is None else d_out
    kd = d_q // heads if key_dim is None else key_dim
    vd = kd if value_dim is None else value_dim
    r = CostReport()
    for name, lin in (("q", linear_cost(d_q, heads * kd, t_q)),
                      ("k", linear_cost(d_kv, heads * kd, t_k, bias=False)),
                      ("v", linear_cost(d_kv, heads * vd, t_k)),
                      ("o", linear_cost(heads * vd, d_out, t_q))):
        r.add(name, lin.params, lin.macs)
    r.add("qk", 0, heads * t_q * t_k * kd + heads * t_q * t_k)        # scores + scaling
    r.add("softmax", 0, heads * t_q * t_k)
    r.add("av", 0, heads * t_q * t_k * vd)
    return r


def cascaded_cost(dim: int, groups: int, tokens: int) -> CostReport:
    dg = dim // groups
    r = CostReport()
    for g in range(groups):
        r.extend(f"group{g}", attention_cost(dg, tokens, tokens, heads=1, key_dim=dg))
        if g > 0:
            r.add(f"group{g}.cascade_add", 0, tokens * dg)
    p = linear_cost(dim, dim, tokens)
    r.add("proj", p.params, p.macs)
    return r


def block_cost(dim: int, tokens: int, heads: int = 4, mlp_ratio: int = 2, groups: int | None = None,
               residuals: bool = True) -> CostReport:
    r = CostReport()
    r.add("ln1", 2 * dim, tokens * dim)
    if groups is not None:
        r.extend("attn", cascaded_cost(dim, groups, tokens))
    else:
        r.extend("attn", attention_cost(dim, tokens, tokens, heads=heads))
    r.add("ln2", 2 * dim, tokens * dim)
    h = mlp_ratio * dim
    f1 = linear_cost(dim, h, tokens)
    f2 = linear_cost(h, dim, tokens)
    r.add("fc1", f1.params, f1.macs + tokens * h)   # + GELU
    r.add("fc2", f2.params, f2.macs)
    if residuals:
        r.add("residual", 0, 2 * tokens * dim)
    return r


def gru_cost(d_in: int, hidden: int) -> Row:
    h3 = 3 * hidden
    params = d_in * h3 + hidden * h3 + 2 * h3
    macs = d_in * h3 + hidden * h3 + 2 * h3 + 10 * hidden
    return Row("gru", params, macs)


# ---------------------------------------------------------------------------
# model


def _stream(cfg: ModelConfig, sc, copies: int) -> CostReport:
    r = CostReport()
    tokens0 = cfg.stage_tokens(0)
    e = linear_cost(cfg.in_channels * cfg.patch ** 2, sc.dims[0], tokens0 * copies)
    r.add("embed", e.params, e.macs)
    for s, (d, depth, g) in enumerate(zip(sc.dims, sc.depths, sc.groups)):
        t = cfg.stage_tokens(s)
        r.add(f"stage{s}.pos", t * d, t * d * copies)
        for i in range(depth):
            blk = block_cost(d, t, mlp_ratio=cfg.backbone_mlp_ratio, groups=g, residuals=cfg.residuals)
            blk = CostReport([Row(x.name, x.params, x.macs * copies) for x in blk.rows])
            r.extend(f"stage{s}.block{i}", blk)
        if s + 1 < sc.n_stages:
            m = linear_cost(4 * d, sc.dims[s + 1], cfg.stage_tokens(s + 1) * copies)
            r.add(f"stage{s}.merge", m.params, m.macs)
    return r


def _fusion(cfg: ModelConfig, s: int) -> CostReport:
    dm, ds = cfg.main.dims[s], cfg.side.dims[s]
    p = cfg.stage_tokens(s)
    n = cfg.n_side_views
    r = CostReport()
    a = linear_cost(ds, dm, n * p)
    b = linear_cost(dm, ds, p)
    r.add("side_to_main", a.params, a.macs)
    r.add("main_to_side", b.params, b.macs)
    r.extend("main_attn", attention_cost(dm, p, n * p, heads=cfg.fusion_heads))
    side = attention_cost(ds, p, p, heads=cfg.fusion_heads)
    r.extend("side_attn", CostReport([Row(x.name, x.params, x.macs * n) for x in side.rows]))
    r.add("residual", 0, p * dm + n * p * ds)
    return r


def decoder_tokens(cfg: ModelConfig) -> int:
    last = cfg.n_stages - 1
    return cfg.n_pred + 3 + cfg.n_side_views * cfg.stage_tokens(last) + cfg.stage_tokens(last)


def count_params(cfg: ModelConfig) -> CostReport:
    """Full per-layer report; ``.params`` is the analytic parameter total."""
    return analyze(cfg)


def count_macs(cfg: ModelConfig, image_size: int | None = None) -> CostReport:
    if image_size is not None and image_size != cfg.image_size:
        raise ValueError(f"input size {image_size} inconsistent with config image_size {cfg.image_size}")
    return analyze(cfg)


def analyze(cfg: ModelConfig) -> CostReport:
    cfg.validate()
    d = cfg.decoder_dim
    r = CostReport(assumptions={"main": f"{cfg.in_channels}x{cfg.image_size}x{cfg.image_size}",
                                "side": f"{cfg.n_side_views}x{cfg.in_channels}x{cfg.image_size}x{cfg.image_size}",
                                "decoder_tokens": decoder_tokens(cfg), "batch": 1})
    r.extend("backbone.main", _stream(cfg, cfg.main, 1))
    r.extend("backbone.side", _stream(cfg, cfg.side, cfg.n_side_views))
    for s in range(cfg.n_stages):
        if cfg.fuse_at(s):
            r.extend(f"fusion.stage{s}", _fusion(cfg, s))

    t = decoder_tokens(cfg)
    last = cfg.n_stages - 1
    if cfg.n_pred:
        r.add("decoder.pred", cfg.n_pred * d, cfg.n_pred * d)
    for name, din, tok in (("speed", 1, 1), ("command", cfg.n_commands, 1), ("target", 2, 1),
                           ("side_proj", cfg.side.dims[-1], cfg.n_side_views * cfg.stage_tokens(last)),
                           ("main_proj", cfg.main.dims[-1], cfg.stage_tokens(last))):
        x = linear_cost(din, d, tok)
        r.add(f"decoder.{name}", x.params, x.macs)
    for i in range(cfg.decoder_depth):
        r.extend(f"decoder.block{i}", block_cost(d, t, heads=cfg.decoder_heads, mlp_ratio=cfg.decoder_mlp_ratio,
                                                 residuals=cfg.residuals))
    if cfg.readout == "mean_pool":
        r.add("decoder.mean_pool", 0, t * d)

    k = cfg.n_waypoints
    g = gru_cost(4, d)
    o = linear_cost(d, 2)
    r.add("heads.waypoint.gru", g.params, g.macs * k)
    r.add("heads.waypoint.out", o.params, (o.macs + 2) * k)      # + cumulative sum
    hc = cfg.control_hidden
    h1 = linear_cost(d, hc)
    h2 = linear_cost(hc, 3)
    r.add("heads.control.hidden", h1.params, h1.macs + hc)
    r.add("heads.control.out", h2.params, h2.macs + 3)
    sp = linear_cost(d, 1)
    lf = linear_cost(d, cfg.latent_dim)
    r.add("heads.aux.speed", sp.params, sp.macs)
    r.add("heads.aux.feature", lf.params, lf.macs)
    ec = linear_cost(hc, 1)
    ew = linear_cost(d, 1)
    r.add("heads.mixer.control", ec.params, ec.macs)
    r.add("heads.mixer.waypoint", ew.params, ew.macs)
    return r


def fusion_cost(cfg: ModelConfig) -> int:
    """Parameters spent on cross-view fusion blocks."""
    return analyze(cfg).total("fusion.")


def quadratic_macs(report: CostReport, prefix: str = "decoder.") -> int:
    """MACs of the token-token terms (scores, softmax, mixing) under ``prefix``."""
    return sum(r.macs for r in report.rows if r.name.startswith(prefix)
               and r.name.rsplit(".", 1)[-1] in ("qk", "softmax", "av"))

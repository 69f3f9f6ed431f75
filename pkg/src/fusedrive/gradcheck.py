"""Central finite-difference checks of reverse-mode gradients (run in float64)."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

H = 1e-5
TOL = 1e-4


def rel_err(analytic, numeric, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.ravel(np.asarray(analytic, dtype=np.float64))
    n = np.ravel(np.asarray(numeric, dtype=np.float64))
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(f, x: np.ndarray, h: float = H, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place.

    ``index`` restricts the sweep to the given flat indices.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = np.zeros(len(idx) if index is not None else flat.size)
    for j, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[j] = (fp - fm) / (2 * h)
    return out


def directional_derivative(f, x: np.ndarray, direction: np.ndarray, h: float = H) -> float:
    old = x.copy()
    x += h * direction
    fp = f()
    x[...] = old - h * direction
    fm = f()
    x[...] = old
    return (fp - fm) / (2 * h)


@dataclass
class CheckResult:
    name: str
    rel_err: float
    tol: float = TOL

    @property
    def ok(self) -> bool:
        return self.rel_err < self.tol


@dataclass
class GradcheckReport:
    scope: str
    seed: int
    results: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    @property
    def worst(self) -> CheckResult | None:
        return max(self.results, key=lambda r: r.rel_err) if self.results else None

    def lines(self) -> list:
        out = [f"gradcheck scope={self.scope} seed={self.seed} h={H} tol={TOL}"]
        for r in sorted(self.results, key=lambda r: -r.rel_err):
            out.append(f"{'PASS' if r.ok else 'FAIL'} {r.name:<48s} rel_err={r.rel_err:.3e}")
        w = self.worst
        out.append(f"{'PASS' if self.ok else 'FAIL'} worst={w.name if w else '-'} "
                   f"rel_err={w.rel_err if w else 0.0:.3e} checks={len(self.results)} time={self.seconds:.1f}s")
        return out


def check_function(fn, inputs: list, rng: np.random.Generator, name: str) -> CheckResult:
    """Check ``fn(*tensors) -> Tensor`` through the loss ``sum(out * r)`` with a random ``r``."""
    with T.precision(np.float64):
        ts = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
        with T.Tape() as tape:
            out = fn(*ts)
        weights = rng.standard_normal(out.shape)
        with tape:
            loss = T.sum(T.mul(out, Tensor(weights)))
        grads = T.backward(tape, loss, ts)

        def f():
            return float(np.sum(fn(*ts).data * weights))

        worst = 0.0
        for t, g in zip(ts, grads):
            num = numerical_gradient(f, t.data)
            worst = max(worst, rel_err(g, num))
    return CheckResult(name, worst)


def _primitive_cases(rng):
    r = rng.standard_normal
    pos = lambda *s: np.abs(r(s)) + 0.5  # noqa: E731
    b = 3
    return {
        "add": (lambda a, c: T.add(a, c), [r((b, 4)), r((4,))]),
        "sub": (lambda a, c: T.sub(a, c), [r((b, 4)), r((b, 4))]),
        "mul": (lambda a, c: T.mul(a, c), [r((b, 2, 4)), r((2, 4))]),
        "scale": (lambda a: T.scale(a, -1.7), [r((3, 5))]),
        "matmul": (lambda a, c: T.matmul(a, c), [r((b, 3, 4)), r((4, 5))]),
        "matmul_batched": (lambda a, c: T.matmul(a, c), [r((b, 2, 3, 4)), r((2, 4, 3))]),
        "concat": (lambda a, c: T.concat([a, c], axis=1), [r((2, 3, 2)), r((2, 1, 2))]),
        "take": (lambda a: T.take(a, (slice(None), slice(1, 3))), [r((3, 4))]),
        "reshape": (lambda a: T.reshape(a, (6, 2)), [r((3, 4))]),
        "transpose": (lambda a: T.transpose(a, (2, 0, 1)), [r((2, 3, 4))]),
        "sum": (lambda a: T.sum(a, axis=1), [r((3, 4))]),
        "mean": (lambda a: T.mean(a, axis=(0, 2)), [r((3, 4, 2))]),
        "relu": (lambda a: T.relu(a), [r((4, 5)) + np.sign(r((4, 5))) * 0.1]),
        "gelu": (lambda a: T.gelu(a), [r((4, 5)) * 2]),
        "sigmoid": (lambda a: T.sigmoid(a), [r((4, 5)) * 3]),
        "tanh": (lambda a: T.tanh(a), [r((4, 5))]),
        "layer_norm": (lambda a, g, c: T.layer_norm(a, g, c), [r((3, 6)), pos(6), r((6,))]),
        "softmax": (lambda a: T.softmax(a), [r((3, 5)) * 2]),
        "l1_distance": (lambda a, c: T.l1_distance(a, c), [r((3, 4)), r((3, 4)) + 3.0]),
        "squared_distance": (lambda a, c: T.squared_distance(a, c), [r((3, 4)), r((4,))]),
    }


PRIMITIVES = tuple(_primitive_cases(np.random.default_rng(0)))


def check_primitives(seed: int = 0) -> GradcheckReport:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rep = GradcheckReport("primitive", seed)
    for name, (fn, inputs) in _primitive_cases(rng).items():
        rep.results.append(check_function(fn, inputs, rng, name))
    rep.seconds = time.perf_counter() - t0
    return rep


def check_blocks(seed: int = 0) -> GradcheckReport:
    from .attention import init_attention, init_block, multi_head_attention, transformer_block
    from .backbone import fuse_stage, init_fusion, ViewTokens
    from .heads import init_gru, gru_cell

    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    rep = GradcheckReport("block", seed)
    with T.precision(np.float64):
        blk = init_block(rng, 8, heads=2)
        cga = init_block(rng, 8, groups=2)
        att = init_attention(rng, 8, d_kv=4, heads=2)
        fus = init_fusion(rng, 8, 4, heads=2)
        gru = init_gru(rng, 3, 5)
    cases = {
        "transformer_block": (lambda x: transformer_block(x, blk)[0], [rng.standard_normal((2, 5, 8))]),
        "cascaded_block": (lambda x: transformer_block(x, cga)[0], [rng.standard_normal((2, 5, 8))]),
        "cross_attention": (lambda q, kv: multi_head_attention(q, kv, att)[0],
                            [rng.standard_normal((2, 3, 8)), rng.standard_normal((2, 6, 4))]),
        "fuse_stage": (lambda m, s: (lambda vt: T.concat([T.reshape(vt.main, (2, -1)), T.reshape(vt.side, (2, -1))],
                                                         axis=1))(fuse_stage(ViewTokens(m, s, 0), fus)),
                       [rng.standard_normal((2, 4, 8)), rng.standard_normal((2, 3, 4))]),
        "gru_cell": (lambda x, h: gru_cell(x, h, gru), [rng.standard_normal((2, 3)), rng.standard_normal((2, 5))]),
    }
    for name, (fn, inputs) in cases.items():
        rep.results.append(check_function(fn, inputs, rng, name))
    # parameter gradients of the blocks as well
    for name, weights, fn, x in (
        ("transformer_block.params", blk, lambda x: transformer_block(x, blk)[0], rng.standard_normal((2, 5, 8))),
        ("cascaded_block.params", cga, lambda x: transformer_block(x, cga)[0], rng.standard_normal((2, 5, 8))),
    ):
        from .layers import named_parameters
        params = dict(named_parameters(weights))
        res = check_param_dict(params, lambda: fn(Tensor(x)), rng, name)
        rep.results.extend(res)
    rep.seconds = time.perf_counter() - t0
    return rep


def check_param_dict(params: dict, forward, rng, prefix: str, coords: int = 4) -> list:
    """Check parameter gradients of ``sum(forward() * r)`` per tensor.

    Each tensor is checked along one random direction plus ``coords``
    sampled coordinates.
    """
    with T.Tape() as tape:
        out = forward()
    weights = rng.standard_normal(out.shape)
    with tape:
        loss = T.sum(T.mul(out, Tensor(weights)))
    for p in params.values():
        p.grad = None
    T.backward(tape, loss)

    def f():
        return float(np.sum(forward().data * weights))

    return _compare_params(params, f, rng, prefix, coords)


def _compare_params(params: dict, f, rng, prefix: str, coords: int) -> list:
    results = []
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        u = rng.standard_normal(p.shape)
        u /= np.linalg.norm(u)
        a = [float(np.sum(g * u))]
        n = [directional_derivative(f, p.data, u)]
        idx = rng.choice(p.size, size=min(coords, p.size), replace=False)
        a.extend(g.reshape(-1)[idx])
        n.extend(numerical_gradient(f, p.data, index=list(idx)))
        results.append(CheckResult(f"{prefix}.{name}" if prefix else name, rel_err(a, n)))
    return results


def check_model(seed: int = 0, cfg=None, batch_size: int = 2, coords: int = 4) -> GradcheckReport:
    """Gradient of the full training loss w.r.t. every parameter tensor of the model."""
    from .config import LossWeights, tiny_model
    from .heads import compute_losses
    from .model import DrivingModel

    t0 = time.perf_counter()
    cfg = cfg or tiny_model()
    rng = np.random.default_rng(seed)
    with T.precision(np.float64):
        model = DrivingModel(cfg, seed=seed).astype(np.float64)
    batch, label = random_batch(cfg, batch_size, rng)
    weights = LossWeights()

    with T.Tape() as tape:
        out = model(batch)
        losses = compute_losses(out, label, weights)
    frozen = (losses.per_sample_control.copy(), losses.per_sample_waypoint.copy())
    for p in model.params.values():
        p.grad = None
    T.backward(tape, losses.total)

    def f():
        o = model(batch)
        return float(compute_losses(o, label, weights, estimator_targets=frozen).total.data)

    rep = GradcheckReport("model", seed)
    rep.results = _compare_params(model.params, f, rng, "", coords)
    rep.seconds = time.perf_counter() - t0
    return rep


def random_batch(cfg, b: int, rng: np.random.Generator):
    s = cfg.image_size
    side_shape = (b, 3, s, s) if cfg.n_side_views == 1 else (b, cfg.n_side_views, 3, s, s)
    batch = dict(main=rng.random((b, 3, s, s)), side=rng.random(side_shape),
                 speed=rng.random(b) * 6, command=rng.integers(0, cfg.n_commands, b),
                 target=rng.standard_normal((b, 2)) * 5 + np.array([8.0, 0.0]))
    label = dict(waypoints=np.cumsum(rng.random((b, cfg.n_waypoints, 2)) * [3.0, 0.5], axis=1),
                 control=np.column_stack([rng.random(b), rng.uniform(-1, 1, b), rng.random(b)]),
                 target_speed=rng.random(b) * 6, latent=rng.uniform(-1, 1, (b, cfg.latent_dim)))
    return batch, label


def run(scope: str, seed: int = 0) -> GradcheckReport:
    if scope == "primitive":
        return check_primitives(seed)
    if scope == "block":
        return check_blocks(seed)
    if scope == "model":
        return check_model(seed)
    raise ValueError(f"unknown scope {scope!r}")


def replace_cfg(cfg, **kw):
    return dataclasses.replace(cfg, **kw)

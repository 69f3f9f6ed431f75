"""Define-by-run reverse-mode autodiff over numpy arrays.

Every primitive records itself on the active :class:`Tape` when one of its
inputs requires a gradient.  Nothing is recorded outside a ``with Tape()``
block, which doubles as inference mode.

Broadcasting is restricted to leading dimensions: the shorter operand's shape
must be a suffix of the longer one (bias vectors, positional tables, shared
weights over a batch).  That keeps every backward rule a plain sum over the
leading axes.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_local = threading.local()

_DEFAULT_DTYPE = [np.float32]


class ShapeError(ValueError):
    """Operand shapes are invalid for an op; names the op and the shapes."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in self.shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str, name: str | None = None):
        self.op = op
        self.name = name
        where = f" in {name!r}" if name else ""
        super().__init__(f"{op}: non-finite value{where}")


class TapeError(RuntimeError):
    pass


def default_dtype():
    return _DEFAULT_DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for fresh tensors (``np.float64`` for gradient checks)."""
    _DEFAULT_DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DEFAULT_DTYPE.pop()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def tensor(data, requires_grad=False, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data, requires_grad=False, name=x.name)


# ---------------------------------------------------------------------------
# tape


@dataclass
class Node:
    op: str
    out: int
    inputs: tuple
    backward: Callable


@dataclass
class Tape:
    """Ordered record of the ops of one forward pass.

    Nodes are appended in execution order, so every input id precedes the
    node that consumes it.
    """

    nodes: list = field(default_factory=list)
    produced: set = field(default_factory=set)
    leaves: dict = field(default_factory=dict)

    def __enter__(self):
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.tapes.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, t: Tensor) -> bool:
        return t.id in self.produced or t.id in self.leaves

    def record(self, op: str, out: Tensor, inputs: tuple, backward: Callable) -> None:
        for t in inputs:
            if t.requires_grad and t.id not in self.produced and t.id not in self.leaves:
                self.leaves[t.id] = t
        self.nodes.append(Node(op, out.id, inputs, backward))
        self.produced.add(out.id)

    def reset(self) -> None:
        self.nodes.clear()
        self.produced.clear()
        self.leaves.clear()


def active_tape() -> Tape | None:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_record():
    """Suspend recording inside an active tape."""
    stack = getattr(_local, "tapes", None)
    saved = list(stack) if stack else []
    if stack:
        stack.clear()
    try:
        yield
    finally:
        if stack is not None:
            stack.extend(saved)


def _emit(op: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    if not np.isfinite(out).all():
        bad = next((t.name for t in inputs if t.name), None)
        raise NonFiniteError(op, bad)
    res = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        tape.record(op, res, inputs, backward)
    return res


def backward(tape: Tape, loss: Tensor, leaves: Sequence[Tensor] | None = None):
    """Reverse sweep from a scalar ``loss``.

    Leaf gradients are accumulated into ``leaf.grad`` (a second call without
    resetting adds again).  When ``leaves`` is given, each must appear on the
    tape and their gradients are returned in order.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.id not in tape.produced:
        raise TapeError("backward: loss was not produced on this tape")
    if leaves is not None:
        for t in leaves:
            if t.id not in tape.leaves:
                raise TapeError(f"backward: leaf {t.name or t.id!r} is absent from the tape")

    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            prev = grads.get(t.id)
            grads[t.id] = gi if prev is None else prev + gi

    for tid, leaf in tape.leaves.items():
        g = grads.get(tid)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    if leaves is not None:
        return [t.grad for t in leaves]
    return None


# ---------------------------------------------------------------------------
# shape helpers


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(op, sa, sb, detail="broadcast only over leading dims")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", a.data * mask, (a,), lambda g: (g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    inner = c * (x + x.dtype.type(0.044715) * x ** 3)
    t = np.tanh(inner)
    out = x.dtype.type(0.5) * x * (1 + t)

    def bw(g):
        dinner = c * (1 + x.dtype.type(3 * 0.044715) * x ** 2)
        return (g * (x.dtype.type(0.5) * (1 + t) + x.dtype.type(0.5) * x * (1 - t * t) * dinner),)

    return _emit("gelu", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _emit("sigmoid", s, (a,), lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _emit("tanh", t, (a,), lambda g: (g * (1 - t * t),))


def l1_distance(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``|a - b|``; the subgradient at zero is 0."""
    _check_suffix("l1_distance", a, b)
    d = a.data - b.data
    sgn = np.sign(d)
    sa, sb = a.shape, b.shape
    return _emit("l1_distance", np.abs(d), (a, b),
                 lambda g: (_unbroadcast(g * sgn, sa), -_unbroadcast(g * sgn, sb)))


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise ``(a - b)**2``."""
    _check_suffix("squared_distance", a, b)
    d = a.data - b.data
    sa, sb = a.shape, b.shape
    two = d.dtype.type(2)
    return _emit("squared_distance", d * d, (a, b),
                 lambda g: (_unbroadcast(two * g * d, sa), -_unbroadcast(two * g * d, sb)))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="operands need >= 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dims differ")
    ba, bb = a.shape[:-2], b.shape[:-2]
    short, long_ = (ba, bb) if len(ba) <= len(bb) else (bb, ba)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims broadcast only over leading dims")
    ad, bd = a.data, b.data

    if bd.ndim == 2 and ad.ndim > 2:
        k, n = bd.shape
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (n,))

        def bw(g):
            g2 = g.reshape(-1, n)
            return ((g2 @ bd.T).reshape(ad.shape), ad.reshape(-1, k).T @ g2)

        return _emit("matmul", out, (a, b), bw)

    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _emit("matmul", out, (a, b), bw)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    n = a.data.size // max(out.size, 1)
    inv = a.data.dtype.type(1.0 / n)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return _emit("mean", out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-7) -> Tensor:
    """Normalise over the last dimension, then apply the optional affine pair."""
    d = x.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (d,):
            raise ShapeError("layer_norm", x.shape, p.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data if gamma is not None else None
    out = xhat * gd if gd is not None else xhat
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        dxhat = g * gd if gd is not None else g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        grads = [rstd * (dxhat - m1 - xhat * m2)]
        lead = tuple(range(g.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return _emit("layer_norm", out, inputs, bw)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last dimension."""
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return _emit("softmax", s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


# ---------------------------------------------------------------------------
# structural


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes, detail="axes must permute all dims")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat", detail="nothing to concatenate")
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError("concat", tensors[0].shape, t.shape, detail=f"axis={axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _emit("concat", out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ax = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in tensors]
    return concat(expanded, axis=ax)


def take(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not (isinstance(k, (slice, int)) or k is Ellipsis):
            raise TypeError("take: only slices, ints and Ellipsis are supported")
    try:
        out = a.data[key]
    except IndexError:
        raise ShapeError("take", a.shape, detail=f"index {key!r}") from None
    src, dt = a.shape, a.data.dtype

    def bw(g):
        full = np.zeros(src, dtype=dt)
        full[key] = g
        return (full,)

    return _emit("take", np.ascontiguousarray(out), (a,), bw)


# ---------------------------------------------------------------------------
# optimiser and schedule


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-7
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float | None = None):
    """One Adam update with decoupled weight decay, in place.

    ``grads`` maps parameter names to arrays; a missing or ``None`` entry is a
    zero gradient.
    """
    lr = state.lr if lr is None else lr
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ShapeError("adam_step", p.shape, g.shape, detail=name)
        dt = p.data.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * g * g
        upd = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(state.eps))
        if state.weight_decay:
            upd = upd + dt(state.weight_decay) * p.data
        p.data = p.data - dt(lr) * upd
    return params, state


@dataclass(frozen=True)
class LRSchedule:
    """Piecewise schedule: one base rate per phase, halved every ``halve_every`` epochs."""

    base_lrs: tuple = (5e-4, 1e-4)
    phase_epochs: int = 60
    halve_every: int = 30


def lr_at(epoch: int, schedule: LRSchedule = LRSchedule()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    phase = min(epoch // schedule.phase_epochs, len(schedule.base_lrs) - 1)
    within = epoch - phase * schedule.phase_epochs
    return schedule.base_lrs[phase] * 0.5 ** (within // schedule.halve_every)


def parameters_finite(params: dict) -> str | None:
    """Name of the first parameter holding a non-finite value, else ``None``."""
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            return name
    return None


def zeros_like_params(params: dict) -> dict:
    return {k: np.zeros_like(v.data) for k, v in params.items()}


def collect_grads(params: dict) -> dict:
    return {k: p.grad for k, p in params.items()}


def zero_grads(params: Iterable) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None

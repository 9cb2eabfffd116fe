"""Eager tape-based reverse-mode differentiation.

Values are computed as soon as an op is recorded; the tape keeps just enough
context for the adjoint.  The functional wrappers at the bottom of this module
(``conv2d``, ``linear``, ...) dispatch on their arguments: when any argument is
a :class:`Var` the op is recorded on that variable's tape, otherwise the plain
numpy primitive runs directly.  Blocks written against these wrappers therefore
run unchanged for inference, training and gradient checking.

    >>> tape = Tape()
    >>> x = tape.param("x", np.array([1.0, 2.0]))
    >>> tape.backward(sum_(x * x))["x"]
    array([2., 4.])
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.special import erfc

from . import tensor as T

__all__ = [
    "OPS",
    "Tape",
    "Var",
    "grad_check",
    "grad_errors",
]


@dataclass(frozen=True)
class OpDef:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., tuple]


OPS: dict[str, OpDef] = {}


def _register(name):
    def deco(pair):
        fwd, bwd = pair()
        OPS[name] = OpDef(name, fwd, bwd)
        return pair

    return deco


@dataclass
class Node:
    op: str | None  # None for leaves
    inputs: tuple[int | None, ...] = ()
    attrs: dict = field(default_factory=dict)
    ctx: Any = None


class Var:
    """Handle to one value recorded on a :class:`Tape`."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", id: int):
        self.tape = tape
        self.id = id

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.id]

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return scale(self, 1.0 / c)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Var) else -np.asarray(other))

    def sum(self):
        return sum_(self)


class Tape:
    """Ordered record of eagerly evaluated ops.

    Node ids are positions in :attr:`values`; every node's inputs have
    smaller ids, so reverse iteration is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []
        self.params: dict[int, str] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, node, value):
        self.nodes.append(node)
        self.values.append(value)
        return Var(self, len(self.values) - 1)

    def leaf(self, value) -> Var:
        """Constant input; receives no gradient."""
        return self._push(Node(None), np.asarray(value))

    def param(self, name: str, value) -> Var:
        if name in self.params.values():
            raise ValueError(f"duplicate parameter name {name!r}")
        v = self._push(Node(None), np.asarray(value))
        self.params[v.id] = name
        return v

    def _id(self, x):
        if x is None:
            return None
        if isinstance(x, Var):
            if x.tape is not self:
                raise ValueError("variable belongs to a different tape")
            return x.id
        return self.leaf(x).id

    def record(self, op: str, *inputs, **attrs) -> Var:
        try:
            opdef = OPS[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        ids = tuple(self._id(x) for x in inputs)
        vals = [None if i is None else self.values[i] for i in ids]
        out, ctx = opdef.forward(*vals, **attrs)
        return self._push(Node(op, ids, attrs, ctx), out)

    def replay(self, overrides: Mapping[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-evaluate every node, optionally substituting leaf values."""
        overrides = overrides or {}
        values = []
        for i, node in enumerate(self.nodes):
            if node.op is None:
                values.append(np.asarray(overrides.get(i, self.values[i])))
                continue
            vals = [None if j is None else values[j] for j in node.inputs]
            values.append(OPS[node.op].forward(*vals, **node.attrs)[0])
        return values

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` keyed by parameter name.

        Parameters the loss does not depend on get exact zeros.
        """
        if loss.tape is not self:
            raise ValueError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for i in range(loss.id, -1, -1):
            g = adj.get(i)
            node = self.nodes[i]
            if g is None or node.op is None:
                continue
            vals = [None if j is None else self.values[j] for j in node.inputs]
            grads = OPS[node.op].backward(g, node.ctx, self.values[i], *vals, **node.attrs)
            for j, gj in zip(node.inputs, grads):
                if j is None or gj is None:
                    continue
                if j in adj:
                    adj[j] = adj[j] + gj
                else:
                    adj[j] = gj
            if i not in self.params:
                del adj[i]
        return {
            name: adj[i] if i in adj else np.zeros_like(self.values[i])
            for i, name in self.params.items()
        }


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- op registry -------------------------------------------------------------


@_register("add")
def _add():
    def fwd(x, y):
        return x + y, None

    def bwd(g, ctx, out, x, y):
        return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)

    return fwd, bwd


@_register("add_residual")
def _add_residual():
    def fwd(x, y):
        return T.add_residual(x, y), None

    def bwd(g, ctx, out, x, y):
        return g, g

    return fwd, bwd


@_register("mul")
def _mul():
    def fwd(x, y):
        return x * y, None

    def bwd(g, ctx, out, x, y):
        return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)

    return fwd, bwd


@_register("scale")
def _scale():
    def fwd(x, c):
        return x * c, None

    def bwd(g, ctx, out, x, c):
        return (g * c,)

    return fwd, bwd


@_register("sum")
def _sum():
    def fwd(x):
        return np.asarray(x.sum()), None

    def bwd(g, ctx, out, x):
        return (np.broadcast_to(g, x.shape).copy(),)

    return fwd, bwd


@_register("mean")
def _mean():
    def fwd(x):
        return np.asarray(x.mean()), None

    def bwd(g, ctx, out, x):
        return (np.full(x.shape, g / x.size, dtype=x.dtype),)

    return fwd, bwd


@_register("reshape")
def _reshape():
    def fwd(x, shape):
        return x.reshape(shape), None

    def bwd(g, ctx, out, x, shape):
        return (g.reshape(x.shape),)

    return fwd, bwd


@_register("transpose")
def _transpose():
    def fwd(x, axes):
        return x.transpose(axes), None

    def bwd(g, ctx, out, x, axes):
        return (g.transpose(np.argsort(axes)),)

    return fwd, bwd


@_register("slice_channels")
def _slice_channels():
    def fwd(x, start, stop):
        return x[..., start:stop], None

    def bwd(g, ctx, out, x, start, stop):
        dx = np.zeros_like(x)
        dx[..., start:stop] = g
        return (dx,)

    return fwd, bwd


@_register("concat_channels")
def _concat_channels():
    def fwd(*xs):
        return np.concatenate(xs, axis=-1), None

    def bwd(g, ctx, out, *xs):
        bounds = np.cumsum([0] + [x.shape[-1] for x in xs])
        return tuple(g[..., a:b] for a, b in zip(bounds[:-1], bounds[1:]))

    return fwd, bwd


@_register("conv2d")
def _conv2d():
    def fwd(x, w, b, spec):
        return T.conv2d(x, w, b, spec), None

    def bwd(g, ctx, out, x, w, b, spec):
        k, s = spec.kernel, spec.stride
        top, _, left, _ = spec.padding
        _, ho, wo, _ = g.shape
        xp = T._pad(x, spec.padding)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        rows = lambda i: slice(i, i + (ho - 1) * s + 1, s)  # noqa: E731
        cols = lambda j: slice(j, j + (wo - 1) * s + 1, s)  # noqa: E731
        if spec.depthwise:
            for i in range(k):
                for j in range(k):
                    dw[i, j, 0] = (xp[:, rows(i), cols(j)] * g).sum(axis=(0, 1, 2))
                    dxp[:, rows(i), cols(j)] += g * w[i, j, 0]
        else:
            win = T._windows(xp, k, s, ho, wo)
            cin_g = spec.in_channels // spec.groups
            cout_g = spec.out_channels // spec.groups
            for grp in range(spec.groups):
                ci = slice(grp * cin_g, (grp + 1) * cin_g)
                co = slice(grp * cout_g, (grp + 1) * cout_g)
                gg = g[..., co]
                # (Cg, k, k, Cout_g) -> (k, k, Cg, Cout_g)
                dw[:, :, :, co] = np.tensordot(
                    win[:, :, :, ci], gg, axes=([0, 1, 2], [0, 1, 2])
                ).transpose(1, 2, 0, 3)
                dwin = np.tensordot(gg, w[:, :, :, co], axes=([3], [3]))
                for i in range(k):
                    for j in range(k):
                        dxp[:, rows(i), cols(j), ci] += dwin[:, :, :, i, j, :]
        dx = dxp[:, top : top + x.shape[1], left : left + x.shape[2]]
        db = None if b is None else g.sum(axis=(0, 1, 2))
        return dx, dw, db

    return fwd, bwd


@_register("linear")
def _linear():
    def fwd(x, w, b):
        return T.linear(x, w, b), None

    def bwd(g, ctx, out, x, w, b):
        dx = g @ w.T
        dw = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        db = None if b is None else g.reshape(-1, g.shape[-1]).sum(axis=0)
        return dx, dw, db

    return fwd, bwd


def _norm_backward(g, xhat, std, gamma, axes):
    dgamma = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
    dbeta = g.sum(axis=tuple(range(g.ndim - 1)))
    dxhat = g * gamma
    dx = (
        dxhat
        - dxhat.mean(axis=axes, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
    ) / std
    return dx, dgamma, dbeta


@_register("layer_norm")
def _layer_norm():
    def fwd(x, gamma, beta, eps):
        if eps <= 0:
            raise ValueError("eps must be positive")
        if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
            raise T.DimensionError(f"layer_norm: gamma/beta must have length {x.shape[-1]}")
        xhat, std = T.normalize_parts(x, (x.ndim - 1,), eps)
        return xhat * gamma + beta, (xhat, std)

    def bwd(g, ctx, out, x, gamma, beta, eps):
        xhat, std = ctx
        return _norm_backward(g, xhat, std, gamma, (x.ndim - 1,))

    return fwd, bwd


@_register("batch_norm")
def _batch_norm():
    def fwd(x, gamma, beta, mean, var, eps):
        c = x.shape[-1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise T.DimensionError(f"batch_norm: gamma/beta must have length {c}")
        if mean is not None and np.any(var < 0):
            raise ValueError("batch_norm: running variance is negative")
        xhat, std = T.normalize_parts(x, tuple(range(x.ndim - 1)), eps, mean, var)
        return xhat * gamma + beta, (xhat, std)

    def bwd(g, ctx, out, x, gamma, beta, mean, var, eps):
        xhat, std = ctx
        axes = tuple(range(x.ndim - 1))
        if mean is None:
            dx, dgamma, dbeta = _norm_backward(g, xhat, std, gamma, axes)
        else:
            # running statistics are constants
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dx = g * gamma / std
        return dx, dgamma, dbeta, None, None

    return fwd, bwd


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@_register("gelu")
def _gelu():
    def fwd(x):
        return T.gelu(x), None

    def bwd(g, ctx, out, x):
        cdf = 0.5 * erfc(-x / math.sqrt(2.0))
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
        return (g * (cdf + x * pdf),)

    return fwd, bwd


@_register("hard_swish")
def _hard_swish():
    def fwd(x):
        return T.hard_swish(x), None

    def bwd(g, ctx, out, x):
        # right-limit derivative at the kinks x = -3 and x = 3
        d = np.where(x < -3.0, 0.0, np.where(x < 3.0, (2.0 * x + 3.0) / 6.0, 1.0))
        return (g * d.astype(x.dtype, copy=False),)

    return fwd, bwd


@_register("softmax")
def _softmax():
    def fwd(x, axis):
        return T.softmax(x, axis), None

    def bwd(g, ctx, y, x, axis):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return fwd, bwd


@_register("l2_normalize")
def _l2_normalize():
    def fwd(x, axis):
        n = T._safe_norm(x, axis)
        return x / n, n

    def bwd(g, n, y, x, axis):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / n,)

    return fwd, bwd


@_register("matmul")
def _matmul():
    def fwd(a, b):
        return T.matmul(a, b), None

    def bwd(g, ctx, out, a, b):
        return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

    return fwd, bwd


@_register("global_avg_pool")
def _global_avg_pool():
    def fwd(x):
        return T.global_avg_pool(x), None

    def bwd(g, ctx, out, x):
        n, h, w, c = x.shape
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return fwd, bwd


@_register("cross_entropy")
def _cross_entropy():
    def fwd(logits, labels):
        return cross_entropy_value(logits, labels)

    def bwd(g, probs, out, logits, labels):
        d = probs.copy()
        d[np.arange(len(labels)), labels] -= 1.0
        return (g * d / len(labels),)

    return fwd, bwd


def cross_entropy_value(logits, labels):
    """Mean negative log-likelihood and the softmax probabilities."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise T.DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    loss = (lse - logits[np.arange(len(labels)), labels]).mean()
    probs = np.exp(logits - lse[:, None])
    return np.asarray(loss, dtype=logits.dtype), probs


# --- dispatching functional API ---------------------------------------------


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _apply(op, *inputs, **attrs):
    tape = _tape_of(inputs)
    if tape is not None:
        return tape.record(op, *inputs, **attrs)
    return OPS[op].forward(*inputs, **attrs)[0]


def add(x, y):
    return _apply("add", x, y)


def add_residual(x, y):
    return _apply("add_residual", x, y)


def mul(x, y):
    return _apply("mul", x, y)


def scale(x, c: float):
    return _apply("scale", x, c=c)


def sum_(x):
    return _apply("sum", x)


def mean(x):
    return _apply("mean", x)


def reshape(x, shape):
    return _apply("reshape", x, shape=tuple(shape))


def transpose(x, axes):
    return _apply("transpose", x, axes=tuple(axes))


def slice_channels(x, start: int, stop: int):
    return _apply("slice_channels", x, start=start, stop=stop)


def concat_channels(xs):
    return _apply("concat_channels", *xs)


def conv2d(x, w, b, spec: T.ConvSpec):
    return _apply("conv2d", x, w, b, spec=spec)


def linear(x, w, b=None):
    return _apply("linear", x, w, b)


def layer_norm(x, gamma, beta, eps=1e-6):
    return _apply("layer_norm", x, gamma, beta, eps=eps)


def batch_norm(x, gamma, beta, mean=None, var=None, eps=1e-5):
    return _apply("batch_norm", x, gamma, beta, mean, var, eps=eps)


def gelu(x):
    return _apply("gelu", x)


def hard_swish(x):
    return _apply("hard_swish", x)


def activation(kind: str, x):
    if kind == "gelu":
        return gelu(x)
    if kind == "hard_swish":
        return hard_swish(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x, axis=-1):
    return _apply("softmax", x, axis=axis)


def l2_normalize(x, axis=-1):
    return _apply("l2_normalize", x, axis=axis)


def matmul(a, b):
    return _apply("matmul", a, b)


def global_avg_pool(x):
    return _apply("global_avg_pool", x)


def cross_entropy(logits, labels):
    return _apply("cross_entropy", logits, labels=np.asarray(labels))


def value(x) -> np.ndarray:
    """Underlying array of a :class:`Var` or array."""
    return x.value if isinstance(x, Var) else np.asarray(x)


# --- finite-difference verification ----------------------------------------


ABS_FLOOR = 1e-8
REL_FLOOR = 1e-6


def _sample_coords(theta, n_coords, rng, mask=None):
    """Sample at least ``n_coords`` ``(name, flat index)`` pairs, spread over parameters.

    ``mask[name]`` (boolean, parameter-shaped) restricts eligible coordinates.
    """
    pools = {}
    for k, v in theta.items():
        m = None if mask is None else mask.get(k)
        pools[k] = np.arange(v.size) if m is None else np.flatnonzero(m)
    names = [k for k in theta if pools[k].size]
    total = sum(pools[k].size for k in names)
    if total <= n_coords:
        return [(k, int(i)) for k in names for i in pools[k]]
    per = max(2, math.ceil(n_coords / len(names)))
    coords = []
    for k in names:
        pool = pools[k]
        idx = rng.choice(pool.size, size=min(pool.size, per), replace=False)
        coords.extend((k, int(i)) for i in np.sort(pool[idx]))
    while len(coords) < n_coords:
        k = names[rng.integers(len(names))]
        coords.append((k, int(pools[k][rng.integers(pools[k].size)])))
    return coords


def grad_errors(
    f: Callable[[Mapping[str, Any]], Any],
    theta: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    n_coords: int = 100,
    seed: int = 0,
    mask: Mapping[str, np.ndarray] | None = None,
) -> dict[str, float]:
    """Per-parameter max relative error between taped and central-difference gradients.

    ``f`` maps a dict of parameters (arrays or :class:`Var`) to a scalar and
    must be written against this module's functional API.  The numerical side
    evaluates ``f`` on plain arrays, so no tape adjoint is involved in it.
    ``mask`` optionally limits which coordinates may be sampled.

    The error at one coordinate is ``|a - n| / max(|a|, |n|, floor)`` where
    ``floor = max(ABS_FLOOR, REL_FLOOR * max|a|)`` over that parameter.
    Without the relative floor, a component that happens to be ~1e-7 of its
    neighbours is swamped by finite-difference rounding (~1e-16 |f| / eps).
    """
    theta = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    tape = Tape()
    loss = f({k: tape.param(k, v) for k, v in theta.items()})
    analytic = tape.backward(loss)

    rng = np.random.default_rng(seed)
    work = {k: v.copy() for k, v in theta.items()}
    errs = {k: 0.0 for k in theta}
    floors = {k: max(ABS_FLOOR, REL_FLOOR * float(np.abs(g).max(initial=0.0))) for k, g in analytic.items()}
    for name, i in _sample_coords(theta, n_coords, rng, mask):
        flat = work[name].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(value(f(work)))
        flat[i] = orig - eps
        fm = float(value(f(work)))
        flat[i] = orig
        num = (fp - fm) / (2.0 * eps)
        a = float(analytic[name].reshape(-1)[i])
        err = abs(a - num) / max(abs(a), abs(num), floors[name])
        errs[name] = max(errs[name], err)
    return errs


def grad_check(f, theta, eps: float = 1e-5, n_coords: int = 100, seed: int = 0, mask=None) -> float:
    """Max relative error over a random subsample of at least ``n_coords`` coordinates."""
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-6, 1e-4]")
    return max(grad_errors(f, theta, eps, n_coords, seed, mask).values())

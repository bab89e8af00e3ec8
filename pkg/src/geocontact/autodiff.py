"""Small reverse-mode automatic differentiation engine on numpy arrays.

Values are float64 ``Tensor`` objects. Operations executed inside an active
``Tape`` context are appended to the tape together with a closure computing
the vector-Jacobian product; ``Tape.backward`` replays the nodes in reverse id
order. Tensors created with ``requires_grad=True`` act as leaves.

    >>> w = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * w).sum()
    >>> tape.backward(loss)[w]
    array([6.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "NonFiniteError", "AdamState", "Adam",
    "as_tensor", "set_debug_checks", "no_grad",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "exp", "log",
    "sigmoid", "softplus", "relu", "square", "sqrt", "abs_", "tsum", "mean",
    "reshape", "transpose", "getitem", "stack", "concat", "softmax",
    "linear", "shared_pointwise", "batchnorm", "max_over_points",
    "adam_step", "numerical_gradient", "gradient_relative_error",
]


class NonFiniteError(ArithmeticError):
    """Raised when a NaN or Inf appears while debug checks are enabled."""


_state = threading.local()
_DEBUG = {"on": False}


def set_debug_checks(enabled: bool) -> None:
    """Toggle finiteness checks on every recorded operation output."""
    _DEBUG["on"] = bool(enabled)


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __rmatmul__ = lambda self, o: matmul(o, self)
    __neg__ = lambda self: neg(self)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, idx: getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Scatter:
    """Sparse gradient for an indexing node: ``grad[index] += value``."""

    __slots__ = ("index", "value", "basic")

    def __init__(self, index, value, basic):
        self.index, self.value, self.basic = index, value, basic


@dataclass
class _Node:
    kind: str
    parents: tuple[int, ...]
    backward: Callable | None
    shape: tuple[int, ...]
    leaf: Tensor | None = None


class Tape:
    """Append-only record of operations; use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def _node_of(self, t: Tensor) -> int | None:
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if not t.requires_grad:
            return None
        nid = self._leaves.get(id(t))
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None, t.shape, leaf=t))
            self._leaves[id(t)] = nid
        return nid

    def _record(self, kind, out: Tensor, parents: Sequence[Tensor], backward) -> Tensor:
        ids = []
        any_tracked = False
        for p in parents:
            nid = self._node_of(p)
            ids.append(-1 if nid is None else nid)
            any_tracked |= nid is not None
        if not any_tracked:
            return out
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(kind, tuple(ids), backward, out.shape))
        return out

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate d(loss)/d(leaf) for every leaf on this tape.

        Leaf tensors get their ``.grad`` set (zeros when unreachable) and the
        mapping leaf -> gradient is returned.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[Tensor, np.ndarray] = {}
        if loss._tape is self and loss.node_id is not None:
            buf: list = [None] * (loss.node_id + 1)
            buf[loss.node_id] = np.ones(loss.shape)
            for nid in range(loss.node_id, -1, -1):
                g = buf[nid]
                if g is None:
                    continue
                node = self.nodes[nid]
                if node.leaf is not None:
                    continue
                buf[nid] = None
                for pid, pg in zip(node.parents, node.backward(g)):
                    if pid < 0 or pg is None:
                        continue
                    _accumulate(buf, pid, pg, self.nodes[pid].shape)
            for nid, node in enumerate(self.nodes[: loss.node_id + 1]):
                if node.leaf is not None and buf[nid] is not None:
                    grads[node.leaf] = buf[nid]
        for node in self.nodes:
            if node.leaf is not None:
                g = grads.get(node.leaf)
                if g is None:
                    g = np.zeros(node.shape)
                    grads[node.leaf] = g
                node.leaf.grad = g
        return grads


def _accumulate(buf, pid, pg, shape):
    cur = buf[pid]
    if isinstance(pg, _Scatter):
        if cur is None:
            cur = buf[pid] = np.zeros(shape)
        if pg.basic:
            cur[pg.index] += pg.value
        else:
            np.add.at(cur, pg.index, pg.value)
    elif cur is None:
        # copy: backward closures may hand out aliases or read-only views
        buf[pid] = np.array(np.broadcast_to(pg, shape), dtype=np.float64)
    else:
        cur += pg


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)

    def __exit__(self, *exc):
        _state.stack.pop()


def _make(kind: str, value: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if _DEBUG["on"] and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite output from {kind}")
    out = Tensor(value)
    tape = _active_tape()
    if tape is None:
        return out
    return tape._record(kind, out, parents, backward)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    out = av / bv
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make("pow", av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make("log", np.log(av), (a,), lambda g: (g / av,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    av = a.data
    return _make("abs", np.abs(av), (a,), lambda g: (g * np.sign(av),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """ln(1 + e^x), computed without overflow."""
    a = as_tensor(a)
    av = a.data
    return _make("softplus", np.logaddexp(0.0, av), (a,), lambda g: (g * expit(av),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rows always sum to one."""
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make("softmax", out, (a,),
                 lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    basic = _is_basic(idx)
    return _make("getitem", np.asarray(a.data[idx]), (a,),
                 lambda g: (_Scatter(idx, g, basic),))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make("stack", out, ts, back)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make("concat", out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.data, b.data
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make("matmul", av @ bv, (a, b), back)


def linear(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape (batch, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0] \
            or bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: shapes {x.shape}, {weight.shape}, {bias.shape} do not conform")
    return matmul(x, weight) + bias


def shared_pointwise(x, weight, bias) -> Tensor:
    """Kernel-size-1 convolution: the same affine map at every point.

    x: (batch, c_in, points), weight: (c_in, c_out), bias: (c_out,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 3 or weight.ndim != 2 or x.shape[1] != weight.shape[0] \
            or bias.shape != (weight.shape[1],):
        raise ValueError(
            f"shared_pointwise: shapes {x.shape}, {weight.shape}, {bias.shape} do not conform")
    return matmul(transpose(weight), x) + reshape(bias, (-1, 1))


def batchnorm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
              train: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of (batch, channels, points) input.

    Running statistics are updated in place in train mode only (unbiased
    variance, PyTorch convention).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[1]
    if train:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs batch >= 2")
        mu = mean(x, axis=(0, 2), keepdims=True)
        xc = x - mu
        var = mean(square(xc), axis=(0, 2), keepdims=True)
        xhat = xc / sqrt(var + eps)
        n = x.shape[0] * x.shape[2]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(c) * n / max(n - 1, 1)
    else:
        xhat = (x - running_mean.reshape(1, c, 1)) / np.sqrt(running_var.reshape(1, c, 1) + eps)
    return xhat * reshape(gamma, (1, c, 1)) + reshape(beta, (1, c, 1))


def max_over_points(x) -> Tensor:
    """Max over the last axis; gradient goes to the first argmax only."""
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise ValueError("max_over_points on an empty point axis")
    idx = np.argmax(x.data, axis=-1)
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    shape = x.shape

    def back(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=-1)
        return (gx,)

    return _make("max_over_points", out, (x,), back)


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **kw) -> "AdamState":
        return cls([np.zeros(p.shape) for p in params],
                   [np.zeros(p.shape) for p in params], **kw)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params``."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape or g.shape != p.shape:
            raise ValueError(f"Adam shape mismatch for parameter of shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)


@dataclass
class Adam:
    params: list[Tensor]
    lr: float = 1e-3
    state: AdamState = field(default=None)

    def __post_init__(self):
        self.params = list(self.params)
        if self.state is None:
            self.state = AdamState.for_params(self.params)

    def step(self, grads: dict[Tensor, np.ndarray] | Sequence[np.ndarray]) -> None:
        if isinstance(grads, dict):
            grads = [grads.get(p, np.zeros(p.shape)) for p in self.params]
        adam_step(self.params, grads, self.state, self.lr)


# ---------------------------------------------------------------- gradient checks

def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                       indices: Iterable[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated then restored).

    When ``indices`` is given only those entries are filled; others are NaN.
    """
    grad = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    it = indices if indices is not None else np.ndindex(*x.shape)
    for i in it:
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def gradient_relative_error(analytic: np.ndarray, numeric: np.ndarray,
                            floor: float = 1e-6) -> float:
    """``|a - n| / max(|a|, |n|, floor)`` in the Euclidean norm.

    The floor keeps structurally zero gradients (e.g. a bias feeding a
    train-mode batch norm) from turning difference noise into error 1.
    NaN entries of ``numeric`` are ignored.
    """
    a = np.asarray(analytic, float).ravel()
    n = np.asarray(numeric, float).ravel()
    keep = ~np.isnan(n)
    a, n = a[keep], n[keep]
    scale = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / scale)

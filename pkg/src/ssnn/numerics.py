"""Dense float64 tensors with a small reverse-mode differentiation core.

Every op in this module is array-polymorphic: called on plain numpy arrays
it computes eagerly and returns an ndarray; if any operand is a
:class:`Tensor` the result is a Tensor that remembers how to push adjoints
back to its parents.  Model code is written once against these ops and used
both for cheap evaluation and for exact gradients.
"""
from __future__ import annotations

from collections import OrderedDict
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ContractViolation, NonDeterminismError, ShapeError

LOG_2PI = float(np.log(2.0 * np.pi))

#: Finite stand-in for log(0) in differentiable code paths; exp() of it is 0
#: and it never produces NaN when multiplied by a zero weight.
NEG_MASK = -1e30


class Tensor:
    """Immutable value plus the information needed to backpropagate into it."""

    __slots__ = ("value", "parents", "vjp", "name")

    def __init__(self, value, parents: tuple = (), vjp=None, name: str | None = None):
        v = np.array(value, dtype=np.float64)
        v.flags.writeable = False
        self.value = v
        self.parents = parents
        self.vjp = vjp
        self.name = name

    @classmethod
    def external(cls, value, name: str | None = None) -> "Tensor":
        """Construct from outside data, rejecting NaN/Inf."""
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"non-finite entries in tensor {name or ''}".strip())
        return cls(arr, name=name)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

    # operator sugar keeps model code readable
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _traced(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _node(value, parents, vjp):
    return Tensor(value, tuple(parents), vjp)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_elementwise(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.ndim > 0 and b.ndim > 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_elementwise(av, bv, "add")
    out = av + bv
    if not _traced(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_elementwise(av, bv, "sub")
    out = av - bv
    if not _traced(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    _check_elementwise(av, bv, "mul")
    out = av * bv
    if not _traced(a, b):
        return out
    return _node(out, (a, b), lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def neg(a):
    out = -value_of(a)
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (-g,))


def tanh(a):
    out = np.tanh(value_of(a))
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))


def sigmoid(a):
    out = _sigmoid(value_of(a))
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    out = np.exp(value_of(a))
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    with np.errstate(divide="ignore"):
        out = np.log(av)
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (g / av,))


# ----------------------------------------------------------------------------
# reductions and linear algebra
# ----------------------------------------------------------------------------


def total(a):
    """Sum of all entries (scalar)."""
    av = value_of(a)
    out = np.asarray(av.sum())
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (np.broadcast_to(g, av.shape).copy(),))


def dot(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise ShapeError(f"dot: shapes {av.shape} and {bv.shape} do not conform")
    out = np.asarray(np.sum(av * bv))
    if not _traced(a, b):
        return out
    return _node(out, (a, b), lambda g: (g * bv, g * av))


def matvec(W, v):
    Wv, vv = value_of(W), value_of(v)
    if Wv.ndim != 2 or vv.ndim != 1 or Wv.shape[1] != vv.shape[0]:
        raise ShapeError(f"matvec: matrix {Wv.shape} and vector {vv.shape} do not conform")
    out = Wv @ vv
    if not _traced(W, v):
        return out
    return _node(out, (W, v), lambda g: (np.outer(g, vv), Wv.T @ g))


def transpose(a):
    av = value_of(a)
    if av.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {av.shape}")
    out = av.T
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (g.T,))


def log_sum_exp(a):
    """Stable log-sum-exp over the last axis."""
    av = value_of(a)
    mx = np.max(av, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    s = np.sum(np.exp(av - mx), axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.log(s) + mx
    out = out_k[..., 0]
    if not _traced(a):
        return out
    p = np.exp(av - out_k)
    return _node(out, (a,), lambda g: (np.asarray(g)[..., None] * p,))


def log_softmax(a):
    av = value_of(a)
    lse = value_of(log_sum_exp(av))
    out = av - np.asarray(lse)[..., None]
    if not _traced(a):
        return out
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * np.sum(g, axis=-1, keepdims=True),))


def softmax(a):
    av = value_of(a)
    mx = np.max(av, axis=-1, keepdims=True)
    e = np.exp(av - mx)
    out = e / e.sum(axis=-1, keepdims=True)
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (out * (g - np.sum(g * out, axis=-1, keepdims=True)),))


# ----------------------------------------------------------------------------
# structural
# ----------------------------------------------------------------------------


def concat(parts: Iterable):
    parts = list(parts)
    vals = [value_of(p) for p in parts]
    for v in vals:
        if v.ndim != 1:
            raise ShapeError(f"concat: expected vectors, got shapes {[w.shape for w in vals]}")
    out = np.concatenate(vals)
    if not _traced(*parts):
        return out
    bounds = np.cumsum([0] + [v.shape[0] for v in vals])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(vals)))

    return _node(out, parts, vjp)


def take(a, index):
    """Select ``a[index]`` along the leading axis (integer, slice or index list)."""
    av = value_of(a)
    out = av[index]
    if not _traced(a):
        return np.array(out)

    def vjp(g):
        full = np.zeros_like(av)
        if isinstance(index, (int, np.integer, slice)):
            full[index] = g
        else:
            np.add.at(full, np.asarray(index), g)
        return (full,)

    return _node(out, (a,), vjp)


def reshape(a, shape):
    av = value_of(a)
    out = av.reshape(shape)
    if not _traced(a):
        return out
    return _node(out, (a,), lambda g: (g.reshape(av.shape),))


def outer_sum(a, b):
    """``a[:, None] + b[None, :]``."""
    av, bv = value_of(a), value_of(b)
    if av.ndim != 1 or bv.ndim != 1:
        raise ShapeError(f"outer_sum: expected vectors, got {av.shape} and {bv.shape}")
    out = av[:, None] + bv[None, :]
    if not _traced(a, b):
        return out
    return _node(out, (a, b), lambda g: (g.sum(axis=1), g.sum(axis=0)))


def mix(weights, bank):
    """Convex mixture ``sum_k weights[k] * bank[k]`` of the leading-axis slices.

    With a one-hot weight vector this is exact slice selection.
    """
    wv, bv = value_of(weights), value_of(bank)
    if wv.ndim != 1 or bv.shape[:1] != wv.shape:
        raise ShapeError(f"mix: weights {wv.shape} do not index bank {bv.shape}")
    out = np.tensordot(wv, bv, axes=1)
    if not _traced(weights, bank):
        return out

    def vjp(g):
        return (np.tensordot(bv, g, axes=g.ndim), np.multiply.outer(wv, g))

    return _node(out, (weights, bank), vjp)


def straight_through(hard, soft):
    """Forward value of ``hard``; adjoints pass to ``soft`` unchanged."""
    hv, sv = value_of(hard), value_of(soft)
    if hv.shape != sv.shape:
        raise ShapeError(f"straight_through: shapes {hv.shape} and {sv.shape} do not conform")
    if not _traced(soft):
        return hv.copy()
    return _node(hv, (soft,), lambda g: (g,))


def gaussian_log_prob(x, mean, log_var):
    """Diagonal Gaussian log-density summed over dimensions."""
    diff = sub(x, mean)
    quad = mul(mul(diff, diff), exp(neg(log_var)))
    return mul(-0.5, add(total(log_var), total(quad))) - 0.5 * LOG_2PI * value_of(mean).size


# ----------------------------------------------------------------------------
# parameters and gradients
# ----------------------------------------------------------------------------


class ParamStore:
    """Named float64 parameter arrays with deterministic (insertion) order."""

    def __init__(self, items: Iterable[tuple[str, np.ndarray]] = ()):
        self._slots: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, arr in items:
            self.register(name, arr)

    def register(self, name: str, array) -> None:
        if name in self._slots:
            raise ContractViolation(f"parameter {name!r} already registered")
        arr = np.array(array, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ContractViolation(f"parameter {name!r} has non-finite entries")
        self._slots[name] = arr

    def set(self, name: str, array) -> None:
        arr = np.asarray(array, dtype=np.float64)
        if arr.shape != self._slots[name].shape:
            raise ShapeError(f"parameter {name!r}: shape {arr.shape} != registered {self._slots[name].shape}")
        self._slots[name] = arr.copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._slots[name]

    def __contains__(self, name: str) -> bool:
        return name in self._slots

    def __iter__(self):
        return iter(self._slots)

    def __len__(self) -> int:
        return len(self._slots)

    def names(self) -> list[str]:
        return list(self._slots)

    def items(self):
        return self._slots.items()

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._slots.items()}

    def copy(self) -> "ParamStore":
        return ParamStore((k, v.copy()) for k, v in self._slots.items())

    def view(self) -> dict[str, np.ndarray]:
        return dict(self._slots)

    def leaves(self) -> dict[str, Tensor]:
        """Fresh differentiable leaf tensors, one per slot."""
        return {k: Tensor(v, name=k) for k, v in self._slots.items()}

    def size(self) -> int:
        return int(sum(v.size for v in self._slots.values()))


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if isinstance(p, Tensor) and id(p) not in seen:
                stack.append((p, False))
    return order


class GradTape:
    """The recorded graph of a scalar loss and its parameter gradients."""

    def __init__(self, loss: Tensor, leaves: Mapping[str, Tensor]):
        self.loss = loss
        self.leaves = dict(leaves)
        self.nodes = _topological(loss)
        self.grads = self.replay()

    def replay(self) -> dict[str, np.ndarray]:
        adj: dict[int, np.ndarray] = {id(self.loss): np.ones_like(self.loss.value)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None or node.vjp is None:
                if g is not None:
                    adj[id(node)] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if not isinstance(parent, Tensor):
                    continue
                k = id(parent)
                adj[k] = adj[k] + pg if k in adj else np.array(pg, dtype=np.float64)
        out = {}
        for name, leaf in self.leaves.items():
            g = adj.get(id(leaf))
            out[name] = np.zeros_like(leaf.value) if g is None else np.asarray(g).reshape(leaf.shape)
        return out


def gradient(loss, params: Mapping[str, Tensor]) -> GradTape:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``params``.

    Parameters not on the path to ``loss`` get zero gradients.
    """
    if not isinstance(loss, Tensor):
        raise ContractViolation("loss is not connected to any parameter (got a plain array)")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ContractViolation(f"loss must be a scalar, got shape {loss.shape}")
    return GradTape(loss, params)


def grad_check(loss_fn: Callable[[Mapping], object], params: ParamStore, step: float = 1e-5,
               names: Iterable[str] | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` receives a mapping ``name -> array or Tensor`` and must be a
    deterministic function of it.  The error per entry is
    ``|analytic - fd| / max(1, |fd|)``.
    """
    if step <= 0:
        raise ContractViolation("step must be positive")
    base = params.view()
    f0 = float(value_of(loss_fn(base)))
    if float(value_of(loss_fn(base))) != f0:
        raise NonDeterminismError("loss_fn returned different values for identical parameters")
    leaves = params.leaves()
    grads = gradient(loss_fn(leaves), leaves).grads
    worst = 0.0
    for name in (names if names is not None else params.names()):
        arr = params[name]
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += step
            minus[idx] -= step
            fp = float(value_of(loss_fn({**base, name: plus})))
            fm = float(value_of(loss_fn({**base, name: minus})))
            fd = (fp - fm) / (2.0 * step)
            err = abs(grads[name][idx] - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst

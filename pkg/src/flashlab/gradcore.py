"""Reverse-mode automatic differentiation over dense float64 tensors.

Graphs are built eagerly: every primitive returns a new ``Tensor`` that
remembers its parents and how to push gradients back to them. ``backprop``
walks the graph from a scalar loss and accumulates gradients additively
into every reachable trainable ``Param``; callers zero grads between
optimizer steps.

Primitive set: affine, tanh, silu, square, sum, mean, concat, scalar
scale, and elementwise add/sub/mul. Elementwise ops follow numpy
broadcasting; gradients are un-broadcast by summing over the expanded
axes. Anything else is a shape error at construction time, never a
silent cast.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Tensor",
    "Param",
    "AdamState",
    "no_grad",
    "grad_enabled",
    "stop_gradient",
    "add",
    "sub",
    "mul",
    "scale",
    "affine",
    "tanh",
    "silu",
    "square",
    "concat",
    "backprop",
    "finite_diff_grad",
    "init_adam",
    "adam_step",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (pure numpy fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor data must be finite (got NaN or Inf)")
    return arr


class Tensor:
    """Immutable dense float64 array, optionally a node in an autodiff graph.

    ``data`` is treated as read-only after construction; only ``Param``
    (via the optimizer) mutates its storage in place.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_parent_mask", "_backward")

    def __init__(self, data, *, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in _parents)
        if self.requires_grad:
            self._parents = _parents
            # snapshot: params frozen while the graph is built stay out of it
            self._parent_mask = tuple(p.requires_grad for p in _parents)
            self._backward = _backward
        else:
            self._parents = ()
            self._parent_mask = ()
            self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Param(Tensor):
    """Named trainable tensor with a persistent gradient slot.

    Gradients accumulate additively across backprop calls until
    ``zero_grad``. Setting ``requires_grad = False`` freezes the param:
    it keeps its grad slot (which then stays exactly zero) but drops out
    of graph recording entirely.
    """

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str):
        super().__init__(data)
        self.name = name
        self.requires_grad = True
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Param({self.name!r}, shape={self.shape})"


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def stop_gradient(x: Tensor) -> Tensor:
    """Barrier: value passes through, gradient flow stops here."""
    return Tensor(x.data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` along numpy-broadcast axes."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from exc


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "add")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, _parents=(a, b), _backward=bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "sub")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, _parents=(a, b), _backward=bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return Tensor(ad * bd, _parents=(a, b), _backward=bwd)


def scale(x, c: float) -> Tensor:
    x = _wrap(x)
    c = float(c)

    def bwd(g):
        return (g * c,)

    return Tensor(x.data * c, _parents=(x,), _backward=bwd)


def affine(x, weight, bias=None) -> Tensor:
    """``y = x @ weight.T (+ bias)`` for x (n, d_in), weight (d_out, d_in)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(f"affine expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"affine: input width {x.shape[1]} != weight fan-in {weight.shape[1]}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:

        def bwd(g):
            return g @ wd, g.T @ xd

        return Tensor(out, _parents=(x, weight), _backward=bwd)

    bias = _wrap(bias)
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"affine: bias shape {bias.shape} != ({weight.shape[0]},)")

    def bwd_b(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return Tensor(out + bias.data, _parents=(x, weight, bias), _backward=bwd_b)


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, _parents=(x,), _backward=bwd)


def silu(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(over="ignore"):  # exp overflow saturates to the correct limit
        sig = 1.0 / (1.0 + np.exp(-x.data))
    xd = x.data

    def bwd(g):
        return (g * sig * (1.0 + xd * (1.0 - sig)),)

    return Tensor(xd * sig, _parents=(x,), _backward=bwd)


def square(x) -> Tensor:
    x = _wrap(x)
    xd = x.data

    def bwd(g):
        return (g * 2.0 * xd,)

    return Tensor(xd * xd, _parents=(x,), _backward=bwd)


def tsum(x) -> Tensor:
    x = _wrap(x)
    shape = x.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(x.data.sum(), _parents=(x,), _backward=bwd)


def tmean(x) -> Tensor:
    x = _wrap(x)
    shape, n = x.shape, x.size

    def bwd(g):
        return (np.broadcast_to(g / n, shape).copy(),)

    return Tensor(x.data.mean(), _parents=(x,), _backward=bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    widths = [t.shape[axis] for t in tensors]
    splits = np.cumsum(widths)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=axis),
        _parents=tensors,
        _backward=bwd,
    )


def backprop(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable Param's ``.grad``.

    ``loss`` must be a scalar. Gradients add onto whatever is already in
    the grad slots, so multiple losses can be backpropped before one
    optimizer step.
    """
    if loss.shape != ():
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, needed in zip(node._parents, node._parent_mask):
            if needed and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Param):
            node.grad += g
        if node._backward is None:
            continue
        for parent, pg, needed in zip(node._parents, node._backward(g), node._parent_mask):
            if not needed:
                continue
            acc = grads.get(id(parent))
            # never mutate stored arrays: a backward may hand out shared views
            grads[id(parent)] = pg if acc is None else acc + pg


def finite_diff_grad(f, params, h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of scalar ``f()`` w.r.t. each Param.

    ``f`` is called with no arguments and must read the params' current
    values; entries are perturbed in place one coordinate at a time.
    This is the independent oracle backprop is validated against.
    """
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f())
            flat[i] = orig - h
            dn = float(f())
            flat[i] = orig
            gflat[i] = (up - dn) / (2.0 * h)
        grads.append(g)
    return grads


@dataclass
class AdamState:
    """Per-parameter Adam moments; ``step`` increases by exactly 1 per update."""

    m: np.ndarray
    v: np.ndarray
    step: int
    lr: float
    beta1: float
    beta2: float
    eps: float


def init_adam(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> dict[str, AdamState]:
    states: dict[str, AdamState] = {}
    for p in params:
        if p.name in states:
            raise ValueError(f"duplicate param name {p.name!r} in optimizer")
        states[p.name] = AdamState(
            m=np.zeros_like(p.data), v=np.zeros_like(p.data),
            step=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps,
        )
    return states


def adam_step(params, states: dict[str, AdamState]) -> None:
    """Bias-corrected Adam update on each param; grads are zeroed after."""
    for p in params:
        st = states[p.name]
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in param {p.name!r}")
        st.step += 1
        st.m = st.beta1 * st.m + (1.0 - st.beta1) * g
        st.v = st.beta2 * st.v + (1.0 - st.beta2) * g * g
        m_hat = st.m / (1.0 - st.beta1 ** st.step)
        v_hat = st.v / (1.0 - st.beta2 ** st.step)
        p.data -= st.lr * m_hat / (np.sqrt(v_hat) + st.eps)
        p.zero_grad()

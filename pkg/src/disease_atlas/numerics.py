"""Dense float64 tensors with tape-based reverse-mode differentiation, plus Adam.

Operations only record onto a graph while a :class:`Graph` is active (``with
Graph() as g:``). Outside a graph every op is a plain numpy evaluation, which is
what inference uses.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class GraphUsageError(RuntimeError):
    """Misuse of the recording graph or optimizer state."""


_graph_stack: list["Graph"] = []


class Graph:
    """Recording tape. Nodes are appended in forward order and replayed in reverse."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _graph_stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_graph() -> Graph | None:
    return _graph_stack[-1] if _graph_stack else None


class Tensor:
    __slots__ = ("value", "requires_grad", "graph", "parents", "grad_fn", "grad", "name")
    # make ndarray (op) Tensor dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.graph: Graph | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.graph is not None

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, graph={'yes' if self.graph else 'no'})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(value: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor(value)
    graph = active_graph()
    if graph is not None and any(p.tracked for p in parents):
        out.graph = graph
        out.parents = parents
        out.grad_fn = grad_fn
        graph.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(a.value - b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _record(av * bv, (a, b),
                   lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    av, bv = a.value, b.value
    out = av / bv
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record(v * v, (x,), lambda g: (2.0 * v * g,))


def log(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    return _record(np.log(v), (x,), lambda g: (g / v,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _record(out, (x,), lambda g: (g * out,))


def maximum(x, floor: float) -> Tensor:
    """Elementwise max(x, floor); the gradient is zero where the floor is active."""
    x = as_tensor(x)
    keep = x.value >= floor
    return _record(np.where(keep, x.value, floor), (x,), lambda g: (g * keep,))


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    keep = (x.value >= lo) & (x.value <= hi)
    return _record(np.clip(x.value, lo, hi), (x,), lambda g: (g * keep,))


# -- activations ----------------------------------------------------------

def softplus_np(v: np.ndarray) -> np.ndarray:
    """max(v, 0) + log1p(exp(-|v|)); never overflows."""
    return np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))


def sigmoid_np(v: np.ndarray) -> np.ndarray:
    return expit(v)


def elu_np(v: np.ndarray) -> np.ndarray:
    return np.where(v >= 0, v, np.expm1(np.minimum(v, 0.0)))


def activate(x, kind: str) -> Tensor:
    """Elementwise ``elu``, ``sigmoid``, ``softplus`` or ``tanh``."""
    x = as_tensor(x)
    v = x.value
    if kind == "elu":
        neg = np.expm1(np.minimum(v, 0.0))
        pos = v >= 0
        out = np.where(pos, v, neg)
        return _record(out, (x,), lambda g: (g * np.where(pos, 1.0, neg + 1.0),))
    if kind == "sigmoid":
        out = sigmoid_np(v)
        return _record(out, (x,), lambda g: (g * out * (1.0 - out),))
    if kind == "softplus":
        return _record(softplus_np(v), (x,), lambda g: (g * sigmoid_np(v),))
    if kind == "tanh":
        out = np.tanh(v)
        return _record(out, (x,), lambda g: (g * (1.0 - out * out),))
    raise ValueError(f"unknown activation {kind!r}")


def elu(x) -> Tensor:
    return activate(x, "elu")


def sigmoid(x) -> Tensor:
    return activate(x, "sigmoid")


def softplus(x) -> Tensor:
    return activate(x, "softplus")


def tanh(x) -> Tensor:
    return activate(x, "tanh")


# -- linear algebra and structure ------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim == 0 or b.value.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value

    def grad_fn(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _record(av @ bv, (a, b), grad_fn)


def affine(x, W, a) -> Tensor:
    """``W·x + a`` for a vector ``x``, or row-wise ``x @ W.T + a`` for a batch.

    ``W`` has shape (out, in); ``a`` has shape (out,).
    """
    x, W, a = as_tensor(x), as_tensor(W), as_tensor(a)
    if W.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {W.shape}")
    if a.shape not in ((W.shape[0],), (1,), ()):
        raise DimensionError(f"affine: bias {a.shape} incompatible with weight {W.shape}")
    xv, Wv = x.value, W.value

    def grad_fn(g):
        if xv.ndim == 1:
            return g @ Wv, np.outer(g, xv), _unbroadcast(g, a.shape)
        return g @ Wv, g.T @ xv, _unbroadcast(g, a.shape)

    return _record(xv @ Wv.T + a.value, (x, W, a), grad_fn)


def linear(x, W) -> Tensor:
    """Row-wise ``x @ W.T`` with no bias."""
    x, W = as_tensor(x), as_tensor(W)
    if W.value.ndim != 2 or x.value.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {W.shape}")
    xv, Wv = x.value, W.value
    return _record(xv @ Wv.T, (x, W), lambda g: (g @ Wv, g.T @ xv))


def reduce_sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.sum(x.value, axis=axis), (x,), grad_fn)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    values = [p.value for p in parts]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[p.shape for p in parts]} along axis {axis}") from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])

    def grad_fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return _record(out, tuple(parts), grad_fn)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int)) or p is None or p is Ellipsis for p in parts)


def take(x, index) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back into place."""
    x = as_tensor(x)
    shape = x.shape

    basic = _is_basic(index)

    def grad_fn(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(x.value[index], (x,), grad_fn)


# -- reverse pass ------------------------------------------------------------

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) back through the loss's graph.

    Returns a map from every leaf with ``requires_grad`` that the loss depends
    on to its gradient, also stored on ``leaf.grad``. Contributions are summed
    in reverse recording order, so results are reproducible run to run.
    """
    if not isinstance(loss, Tensor) or loss.graph is None:
        raise GraphUsageError("backward() needs a tensor produced while a Graph was recording")
    if loss.size != 1:
        raise GraphUsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(loss.graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.tracked:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
            if parent.graph is None:
                leaves[key] = parent
    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        g = np.asarray(grads[key], dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g
        result[leaf] = g
    return result


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0 or self.learning_rate <= 0:
            raise ValueError("Adam epsilon and learning rate must be positive")


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    missing = [k for k in params if k not in grads]
    if missing:
        raise GraphUsageError(f"no gradient for parameters: {', '.join(missing)}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise DimensionError(f"Adam moment for {name} has shape {m.shape}, parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        m_new[name], v_new[name] = m, v
    new_state = AdamState(state.learning_rate, b1, b2, state.epsilon, t, m_new, v_new)
    return new_params, new_state


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every entry of ``array`` (mutated in place, restored)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f()
        flat[i] = orig - h
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)``; 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def parameters(values: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in values.items()}

"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a node to the active :class:`Graph` of the
calling thread. ``Tensor.backward`` walks that tape once, in reverse
recording order; a consumed graph refuses a second pass.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "GraphError",
    "NumericError",
    "ContractError",
    "tensor",
    "no_grad",
    "current_graph",
    "matmul",
    "softmax",
    "log_softmax",
    "cross_entropy_soft",
    "soft_cross_entropy_with_logits",
    "l2_normalize",
    "layer_norm",
    "gelu",
    "concat",
    "stack",
    "finite_difference_check",
    "inject_sign_flip",
]

LOG_EPS = 1e-12


class GraphError(RuntimeError):
    """Misuse of the recording tape (double backward, foreign root, ...)."""


class NumericError(ArithmeticError):
    """Non-finite or degenerate numeric input."""


class ContractError(ValueError):
    """An op was called outside its documented precondition."""


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], tuple]


class Graph:
    """Append-only operation tape.

    Use as a context manager to scope recording::

        with Graph() as g:
            loss = model(batch)
            loss.backward()
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def record(self, node: Node) -> None:
        if self.consumed:
            raise GraphError("cannot record onto a graph that has already been back-propagated")
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes = []
        self.consumed = False

    def backward(self, root: "Tensor", grad: np.ndarray | None = None) -> None:
        if self.consumed:
            raise GraphError("backward() called twice on the same graph; call reset() first")
        if root._graph is not self:
            raise GraphError("root tensor was not produced on this graph")
        self.consumed = True
        seed = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
        grads: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            in_grads = node.backward(g)
            if node.op in _FAULTS:
                in_grads = tuple(None if gi is None else -gi for gi in in_grads)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._graph is self:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else prev + gi
                else:
                    # leaf (parameter or constant input)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
        if root._graph is self and root.grad is None:
            root.grad = seed
        # drop the tape: nodes, outputs and closures form reference cycles
        # that would otherwise hold every activation until a full gc pass
        self.nodes = []

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()
_FAULTS: set[str] = set()


@contextlib.contextmanager
def inject_sign_flip(op: str):
    """Debug hook: negate the backward of every ``op`` node while active."""
    _FAULTS.add(op)
    try:
        yield
    finally:
        _FAULTS.discard(op)


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = [Graph()]
        _local.enabled = True
    return _local.stack


def current_graph() -> Graph:
    return _stack()[-1]


def _recording() -> bool:
    _stack()
    return _local.enabled


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them (inference, partner predictions)."""
    _stack()
    prev = _local.enabled
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: Graph | None = None

    # basic properties -----------------------------------------------------
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        if self._graph is None:
            raise GraphError("tensor is not the output of a recorded op")
        self._graph.backward(self, grad)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs and _recording():
        g = current_graph()
        out._graph = g
        g.record(Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(
        "div",
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, unlike relu)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make("gelu", out, (a,), backward)


# shape ops -----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return _make("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, key) -> Tensor:
    if isinstance(key, Tensor):
        key = key.data.astype(np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", a.data[key], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(
        "concat",
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(
        "stack",
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# linear algebra -------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading dims."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", a.data @ b.data, (a, b), backward)


# normalizations and losses ------------------------------------------------


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


def _check_targets(y: np.ndarray, axis: int) -> None:
    if np.any(y < 0) or not np.allclose(y.sum(axis=axis), 1.0, atol=1e-6, rtol=0):
        raise ContractError("soft targets must be non-negative and sum to 1 along the class axis")


def cross_entropy_soft(targets, probs: Tensor, axis: int = -1) -> Tensor:
    """Summed H(y, p) = -sum y log p over all rows, with log clamped at 1e-12."""
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    _check_targets(y, axis)
    p = probs.data
    clamped = np.maximum(p, LOG_EPS)
    out = -(y * np.log(clamped)).sum()

    def backward(g):
        return (g * np.where(p > LOG_EPS, -y / clamped, 0.0),)

    return _make("cross_entropy_soft", np.asarray(out), (probs,), backward)


def soft_cross_entropy_with_logits(targets, logits: Tensor, axis: int = -1) -> Tensor:
    """Fused softmax + soft-target cross-entropy, summed over rows.

    The gradient w.r.t. the logits is ``softmax(logits) - y`` per row, which
    stays exact even where the softmax saturates.
    """
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    _check_targets(y, axis)
    _check_finite(logits.data, "soft_cross_entropy_with_logits")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    logp = np.maximum(z - lse, np.log(LOG_EPS))
    out = -(y * logp).sum()
    p = np.exp(z - lse)

    def backward(g):
        return (g * (p * y.sum(axis=axis, keepdims=True) - y),)

    return _make("soft_ce_logits", np.asarray(out), (logits,), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm <= eps):
        raise NumericError("l2_normalize: vector norm below epsilon")
    out = x.data / norm

    def backward(g):
        # (I - x̂ x̂ᵀ) g / ‖x‖
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _make("l2_normalize", out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        return (
            gx,
            _unbroadcast(g * xhat, gamma.shape),
            _unbroadcast(g, beta.shape),
        )

    return _make("layer_norm", out, (x, gamma, beta), backward)


# gradient oracle ------------------------------------------------------------


def finite_difference_check(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar from the current contents of ``params``; it is
    called once under a fresh graph for the analytic pass and twice per
    probed entry.  ``max_entries`` caps probes per parameter tensor (sampled
    with ``rng``); ``None`` probes every entry.  ``eps`` is an absolute floor
    in the denominator so that exactly-zero gradients (e.g. a key bias under
    softmax) are not flagged on central-difference roundoff.
    """
    params = list(params)
    for p in params:
        p.grad = None
    with Graph():
        out = f()
        value = float(np.asarray(out.data))
        if not np.isfinite(value):
            raise NumericError("finite_difference_check: f is not finite at params")
        if out._graph is not None:
            out.backward()
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            entries = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
            for k in entries:
                orig = flat[k]
                flat[k] = orig + h
                fp = float(np.asarray(f().data))
                flat[k] = orig - h
                fm = float(np.asarray(f().data))
                flat[k] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NumericError("finite_difference_check: f is not finite near params")
                central = (fp - fm) / (2 * h)
                a = analytic.reshape(-1)[k]
                err = abs(a - central) / (abs(a) + abs(central) + eps)
                worst = max(worst, err)
    return worst

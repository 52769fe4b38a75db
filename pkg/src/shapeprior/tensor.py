"""Small tape-based reverse-mode autodiff over numpy arrays, plus Adam.

Only what the occupancy MLP needs: matmul, broadcasting arithmetic,
relu/sigmoid/softplus, column concatenation, slicing and reductions.

Operations are recorded on the active :class:`Tape` whenever at least one
input requires a gradient. :func:`backward` replays the tape in reverse
recording order, visiting each op exactly once.

Reductions accumulate in float64 regardless of the storage dtype. BLAS
calls run single-threaded when :func:`single_thread` is active, which makes
every step bit-reproducible; with a multithreaded BLAS the matmul summation
order is left to the library and results may differ in the last ulp.
"""
from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of primitive ops. Use as a context manager."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)


@dataclass
class _Node:
    op: str
    out: weakref.ref  # weak, so Tensor -> node -> Tensor is not a reference cycle
    inputs: tuple
    backward: object  # callable(g) -> tuple of input grads (None = no grad)


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self._node: _Node | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _record(op, out_data, inputs, backward):
    out = Tensor(out_data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(op, weakref.ref(out), inputs, backward)
        out._node = node
        _ACTIVE[-1].nodes.append(node)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul dimension mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), backward)


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _record("div", out, (a, b), backward)


def dense(x, w, b, relu: bool = False) -> Tensor:
    """Fused ``x @ w + b`` with optional ReLU; one node instead of three."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ContractError(f"dense dimension mismatch: {x.shape} x {w.shape}")
    out = x.data @ w.data
    out += b.data
    if relu:
        np.maximum(out, 0, out=out)

    def backward(g):
        if relu:
            g = g * (out > 0)
        gx = flush_subnormal(g @ w.data.T) if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return gx, gw, gb

    return _record("dense", out, (x, w, b), backward)


def flush_subnormal(x):
    """Zero entries below the smallest normal float, in place.

    Saturated sigmoids make the loss gradient underflow into subnormal
    range; left alone those values slow every later matmul several-fold.
    """
    if isinstance(x, np.ndarray) and x.dtype.kind == "f":
        np.putmask(x, np.abs(x) < np.finfo(x.dtype).tiny, 0)
    return x


def relu_array(x):
    return np.maximum(x, 0)


def sigmoid_array(x):
    """Stable logistic: never evaluates exp of a positive argument.

    Saturated outputs are clipped to the open interval (0, 1) of the dtype,
    so probabilities are never exactly 0 or 1.
    """
    x = np.asarray(x)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    x = x.astype(dtype, copy=False)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(dtype, copy=False)
    fi = np.finfo(dtype)
    return np.clip(out, fi.tiny, 1.0 - fi.epsneg)


def softplus_array(x):
    x = np.asarray(x)
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def activation_forward(x, kind: str):
    if kind == "relu":
        return relu_array(x)
    if kind == "sigmoid":
        return sigmoid_array(x)
    raise ContractError(f"unknown activation {kind!r}")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _record("relu", relu_array(a.data), (a,), backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = sigmoid_array(a.data)

    def backward(g):
        return (flush_subnormal(g * s * (1 - s)),)

    return _record("sigmoid", s, (a,), backward)


def softplus(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (flush_subnormal(g * sigmoid_array(a.data)),)

    return _record("softplus", flush_subnormal(softplus_array(a.data)), (a,), backward)


def concat(tensors, axis=1) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record("getitem", a.data[idx], (a,), backward)


def reduce_sum(a) -> Tensor:
    """Sum of all entries, accumulated in float64."""
    a = as_tensor(a)

    def backward(g):
        return (np.full(a.shape, g, dtype=a.dtype),)

    return _record("sum", np.asarray(a.data.sum(dtype=np.float64)), (a,), backward)


def reduce_mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def backward(g):
        return (np.full(a.shape, g / n, dtype=a.dtype),)

    return _record("mean", np.asarray(a.data.sum(dtype=np.float64) / n), (a,), backward)


# -- reverse pass -------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, leaves=None) -> dict:
    """Gradients of the scalar ``loss`` with respect to traced leaves.

    Returns a dict keyed by ``id(leaf)``. When ``leaves`` is given, every
    listed tensor gets an entry (zeros if the loss does not depend on it).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data, dtype=np.float64)}
    found = {}
    for node in reversed(tape.nodes):
        out = node.out()
        if out is None:
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.is_leaf:
                found[key] = inp
    out = {k: grads[k] for k in found}
    if leaves is not None:
        for leaf in leaves:
            if id(leaf) not in out:
                out[id(leaf)] = np.zeros_like(leaf.data)
    if loss.is_leaf and loss.requires_grad:
        out[id(loss)] = grads[id(loss)]
    return out


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.m.shape != self.v.shape:
            raise ContractError("Adam moment shapes differ")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ContractError("Adam betas must lie in (0, 1)")
        if self.t < 0:
            raise ContractError("Adam step counter must be >= 0")

    @classmethod
    def fresh(cls, size, **kw) -> "AdamState":
        return cls(np.zeros(size, dtype=np.float64), np.zeros(size, dtype=np.float64), **kw)

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.t, self.beta1, self.beta2, self.eps)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float):
    """One Adam update. Moments and arithmetic are float64; the returned
    parameters keep the input dtype. Returns ``(new_params, new_state)``."""
    params = np.asarray(params)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ContractError(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not lr > 0:
        raise ContractError("learning rate must be positive")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    b1, b2 = state.beta1, state.beta2
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new.astype(params.dtype), AdamState(m, v, t, b1, b2, state.eps)


@contextlib.contextmanager
def single_thread():
    """Limit BLAS to one thread for bit-reproducible runs."""
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield

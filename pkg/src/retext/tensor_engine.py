"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its output array and a closure mapping the
upstream gradient to one gradient per parent.  ``Value.backward`` walks the
graph in reverse topological order and accumulates into the ``grad`` buffers
of leaves that require gradients.  Leaf buffers are only ever added to; call
``zero_grad`` between steps.

Shape mixing is explicit.  The only implicit broadcast is a 1-D row vector
added to (or multiplied with) the last axis of a tensor; everything else
goes through ``broadcast_to``.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError, InvalidValueError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Value:
    __slots__ = ("data", "grad", "requires_grad", "op", "meta", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward: Callable | None = None):
        self.data = np.array(data, dtype=np.float64) if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64) else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.meta: dict | None = None
        self._parents = parents
        self._backward = backward

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Value(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Value":
        return Value(self.data)

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != value shape {self.shape}")
        if not self.requires_grad:
            return

        order: list[Value] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_value(other, like=self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def parameter(data) -> Value:
    return Value(np.array(data, dtype=np.float64), requires_grad=True)


def constant(data) -> Value:
    return Value(np.array(data, dtype=np.float64))


def as_value(x, like: Value | None = None) -> Value:
    if isinstance(x, Value):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 and like is not None:
        arr = np.full(like.shape, float(arr))
    return Value(arr)


def _node(data: np.ndarray, parents: tuple, backward: Callable, op: str) -> Value:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Value(data, True, op, parents, backward)
    return Value(data, False, op)


def _check_shapes(a: Value, b: Value, opname: str) -> bool:
    """True when b is a row vector broadcast along a's last axis."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and b.shape[0] == a.shape[-1]:
        return True
    raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b, like=a if isinstance(a, Value) else None)
    row = _check_shapes(a, b, "add")

    def back(g):
        return g, (_reduce_row(g) if row else g)
    return _node(a.data + b.data, (a, b), back, "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b, like=a if isinstance(a, Value) else None)
    row = _check_shapes(a, b, "sub")

    def back(g):
        return g, -(_reduce_row(g) if row else g)
    return _node(a.data - b.data, (a, b), back, "sub")


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    row = _check_shapes(a, b, "mul")

    def back(g):
        gb = g * a.data
        return g * b.data, (_reduce_row(gb) if row else gb)
    return _node(a.data * b.data, (a, b), back, "mul")


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.shape != b.shape:
        raise DimensionError(f"div: incompatible shapes {a.shape} and {b.shape}")
    out = a.data / b.data

    def back(g):
        return g / b.data, -g * out / b.data
    return _node(out, (a, b), back, "div")


def scale(a: Value, c: float) -> Value:
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_const(a: Value, c) -> Value:
    """Add a constant array that broadcasts against ``a`` (masks, offsets)."""
    c = np.asarray(c, dtype=np.float64)
    out = a.data + c
    if out.shape != a.shape:
        raise DimensionError(f"add_const: constant {c.shape} would reshape {a.shape}")
    return _node(out, (a,), lambda g: (g,), "add_const")


def mul_const(a: Value, c) -> Value:
    c = np.asarray(c, dtype=np.float64)
    out = a.data * c
    if out.shape != a.shape:
        raise DimensionError(f"mul_const: constant {c.shape} would reshape {a.shape}")
    return _node(out, (a,), lambda g: (g * c,), "mul_const")


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Value) -> Value:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Value) -> Value:
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Value) -> Value:
    pos = a.data > 0
    return _node(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Value) -> Value:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    half = 0.5 * (1.0 + t)
    out = x * half

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (half + 0.5 * x * (1.0 - t * t) * dinner),)
    return _node(out, (a,), back, "gelu")


def select(cond, a: Value, b: Value) -> Value:
    """Elementwise ``cond ? a : b`` with a constant boolean condition."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_value(a), as_value(b)
    if not (cond.shape == a.shape == b.shape):
        raise DimensionError(f"select: shapes {cond.shape}, {a.shape}, {b.shape} must match")

    def back(g):
        return np.where(cond, g, 0.0), np.where(cond, 0.0, g)
    return _node(np.where(cond, a.data, b.data), (a, b), back, "select")


# -- linear algebra / shape -------------------------------------------------

def matmul(a: Value, b: Value) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    if b.ndim == 2:
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def back(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2
        return _node(out, (a, b), back, "matmul")
    else:
        if a.shape[:-2] != b.shape[:-2]:
            raise DimensionError(f"matmul: batch extents differ in {a.shape} and {b.shape}")

        def back(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    return _node(a.data @ b.data, (a, b), back, "matmul")


def transpose(a: Value, axes: Sequence[int] | None = None) -> Value:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Value, i: int, j: int) -> Value:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a: Value, shape: Sequence[int]) -> Value:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _node(out, (a,), lambda g: (g.reshape(src),), "reshape")


def broadcast_to(a: Value, shape: Sequence[int]) -> Value:
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: {src} -> {shape}") from exc

    def back(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)
    return _node(np.ascontiguousarray(out), (a,), back, "broadcast_to")


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    out = np.concatenate([v.data for v in values], axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _node(out, tuple(values), back, "concat")


def getitem(a: Value, index) -> Value:
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.array(out)
    else:
        out = np.ascontiguousarray(out)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)
    return _node(out, (a,), back, "getitem")


def take_rows(a: Value, idx) -> Value:
    return getitem(a, np.asarray(idx, dtype=np.int64))


def embedding(table: Value, ids) -> Value:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)
    return _node(out, (table,), back, "embedding")


# -- reductions -------------------------------------------------------------

def sum_(a: Value, axis=None, keepdims: bool = False) -> Value:
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    src = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)
    return _node(np.asarray(out, dtype=np.float64), (a,), back, "sum")


def mean(a: Value, axis=None, keepdims: bool = False) -> Value:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum_(a, axis, keepdims), 1.0 / n)


def dot_rows(a: Value, b: Value) -> Value:
    """Row-wise inner products of two equally shaped matrices."""
    return sum_(mul(a, b), axis=-1)


# -- normalizations and softmax family --------------------------------------

def softmax(x: Value) -> Value:
    if np.isnan(x.data).any():
        raise InvalidValueError("softmax: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    return _node(out, (x,), back, "softmax")


def softmax_rows(x: Value) -> Value:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got {x.shape}")
    return softmax(x)


def log_softmax(x: Value) -> Value:
    if np.isnan(x.data).any():
        raise InvalidValueError("log_softmax: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)
    return _node(out, (x,), back, "log_softmax")


def masked_logsumexp(x: Value, mask) -> Value:
    """log-sum-exp over the last axis restricted to ``mask``; empty rows give -inf."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise DimensionError(f"masked_logsumexp: mask {mask.shape} vs input {x.shape}")
    filled = np.where(mask, x.data, -np.inf)
    m = filled.max(axis=-1, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(filled - m_safe), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore"):
        out = (np.log(s) + m_safe)[..., 0]
    w = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def back(g):
        return (w * g[..., None],)
    return _node(out, (x,), back, "masked_logsumexp")


def l2_normalize_rows(x: Value, eps: float = 1e-12) -> Value:
    """Unit-normalize along the last axis.

    Rows whose norm is below ``eps`` pass through unchanged; their positions
    are recorded in ``out.meta["degenerate"]``.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    degenerate = norm < eps
    safe = np.where(degenerate, 1.0, norm)
    out = np.where(degenerate, x.data, x.data / safe)

    def back(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(degenerate, g, (g - out * proj) / safe),)
    res = _node(out, (x,), back, "l2_normalize")
    res.meta = {"degenerate": degenerate[..., 0]}
    return res


def layer_norm(x: Value, gamma: Value, beta: Value, eps: float = 1e-5) -> Value:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _reduce_row(g * xhat), _reduce_row(g)
    return _node(out, (x, gamma, beta), back, "layer_norm")


# -- gradient checking ------------------------------------------------------

@dataclass
class GradReport:
    errors: dict[str, float]
    step: float
    tol: float
    coords: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def relative_error(a: np.ndarray, f: np.ndarray) -> np.ndarray:
    return np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)


def check_gradients(objective: Callable[[], Value],
                    params: Mapping[str, Value] | Sequence[Value],
                    step: float = 1e-5, tol: float = 1e-4,
                    n_coords: int = 32, seed: int = 0) -> GradReport:
    """Compare analytic gradients with central differences.

    ``objective`` is re-evaluated for every perturbed coordinate, so it must
    rebuild its graph from the current ``params`` data on each call.  At most
    ``n_coords`` coordinates per parameter are probed.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    saved = {k: p.grad for k, p in params.items()}
    for p in params.values():
        p.grad = None
    out = objective()
    if out.size != 1:
        raise ContractError(f"objective must be scalar, got shape {out.shape}")
    out.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    for k, p in params.items():
        p.grad = saved[k]

    rng = np.random.default_rng(seed)
    errors, coords = {}, {}
    with no_grad():
        for k, p in params.items():
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            n = min(flat.size, n_coords)
            picks = rng.choice(flat.size, size=n, replace=False)
            worst = 0.0
            for c in picks:
                orig = flat[c]
                flat[c] = orig + step
                fp = objective().item()
                flat[c] = orig - step
                fm = objective().item()
                flat[c] = orig
                fd = (fp - fm) / (2 * step)
                worst = max(worst, float(relative_error(analytic[k].reshape(-1)[c], fd)))
            errors[k] = worst
            coords[k] = n
    return GradReport(errors=errors, step=step, tol=tol, coords=coords)


def zero_grads(params: Iterable[Value]):
    for p in params:
        p.grad = None

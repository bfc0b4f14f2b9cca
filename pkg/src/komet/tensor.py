"""Reverse-mode differentiable array core.

Values are float32 numpy arrays by default; float64 arrays pass through
untouched so finite-difference oracles can run the same graph code at
higher precision.  Reductions (sum, mean, mse, soft cross-entropy,
layer-norm statistics) accumulate in float64 before casting back.

Graph construction and backward are single-threaded.  A tensor without a
graph node is an immutable value and safe to share across threads for
read-only use.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import InputError, ParameterError, ShapeError

_GELU_C = math.sqrt(2.0 / math.pi)


def _as_array(data) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
        return data
    if isinstance(data, (np.float32, np.float64)):
        # numpy scalar from a 0-d operation: keep its precision
        return np.asarray(data)
    return np.asarray(data, dtype=np.float32)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class GraphNode:
    """One differentiable operation in the backward graph.

    `grad_fn` maps the output cotangent to one gradient array per parent
    (None for parents that receive no gradient).
    """

    __slots__ = ("op", "parents", "grad_fn")

    def __init__(self, op: str, parents: tuple, grad_fn: Callable):
        self.op = op
        self.parents = parents
        self.grad_fn = grad_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[GraphNode] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Same values, cut off from the graph. Shares the underlying array."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Populate grad on every requires_grad tensor reachable from this scalar.

        Repeated calls without zeroing accumulate into existing grads.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if id(p) not in seen:
                        stack.append((p, False))
        self.grad = _accumulate(self.grad, np.ones_like(self.data))
        for t in reversed(topo):
            if t.node is None or t.grad is None:
                continue
            grads = t.node.grad_fn(t.grad)
            for parent, g in zip(t.node.parents, grads):
                if g is None:
                    continue
                if parent.requires_grad or parent.node is not None:
                    parent.grad = _accumulate(parent.grad, g)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return reshape(self, shape)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other) -> "Tensor":
        return add(self, _wrap(other))

    def __radd__(self, other) -> "Tensor":
        return add(_wrap(other), self)

    def __sub__(self, other) -> "Tensor":
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other) -> "Tensor":
        return add(_wrap(other), neg(self))

    def __mul__(self, other) -> "Tensor":
        return mul(self, _wrap(other))

    def __rmul__(self, other) -> "Tensor":
        return mul(_wrap(other), self)

    def __neg__(self) -> "Tensor":
        return neg(self)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _accumulate(current: Optional[np.ndarray], update: np.ndarray) -> np.ndarray:
    if current is None:
        return update.copy() if isinstance(update, np.ndarray) else np.asarray(update)
    return current + update


def _make(data: np.ndarray, op: str, parents: tuple, grad_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p.node is not None for p in parents):
        out.requires_grad = True
        out.node = GraphNode(op, parents, grad_fn)
    return out


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, "add", (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, "mul", (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _make(data, "log", (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make(t, "tanh", (a,), lambda g: (g * (1.0 - t * t),))


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def grad_fn(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
        return (g * local,)

    return _make(data, "gelu", (a,), grad_fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    return _make(data, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)
    return _make(data, "transpose", (a,), lambda g: (np.transpose(g, inverse),))


def flatten_trailing(a: Tensor) -> Tensor:
    """Merge the last two axes row-major; leading axes are untouched."""
    if a.ndim < 2:
        raise ShapeError(f"flatten_trailing needs rank >= 2, got shape {a.shape}")
    new_shape = a.shape[:-2] + (a.shape[-2] * a.shape[-1],)
    return reshape(a, new_shape)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not broadcast") from exc

    def grad_fn(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, "matmul", (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map x @ weight.T + bias with weight stored [out, in]."""
    if x.shape[-1] != weight.shape[-1]:
        raise ShapeError(f"linear: input width {x.shape} does not match weight {weight.shape}")
    data = np.matmul(x.data, weight.data.T)
    if bias is not None:
        data = data + bias.data

    def grad_fn(g):
        gx = np.matmul(g, weight.data)
        g2 = g.reshape(-1, g.shape[-1])
        x2 = x.data.reshape(-1, x.shape[-1])
        gw = np.matmul(g2.T, x2)
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(data, "linear", parents, grad_fn)


# ---------------------------------------------------------------------------
# reductions and normalizations


def tensor_sum(a: Tensor) -> Tensor:
    data = np.sum(a.data, dtype=np.float64).astype(a.dtype)
    return _make(np.asarray(data), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a: Tensor, axis: int) -> Tensor:
    """Arithmetic mean along one axis; the output drops that axis."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"mean: axis {axis} out of range for shape {a.shape}")
    axis = axis % a.ndim
    n = a.shape[axis]
    data = np.mean(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def grad_fn(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _make(data, "mean", (a,), grad_fn)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean over all elements of the squared difference."""
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data.astype(np.float64) - b.data.astype(np.float64)
    out_dtype = np.result_type(a.dtype, b.dtype)
    data = np.asarray(np.mean(diff * diff).astype(out_dtype))
    scale = 2.0 / a.size

    def grad_fn(g):
        base = (g * scale) * diff
        return base.astype(a.dtype), (-base).astype(b.dtype)

    return _make(data, "mse", (a, b), grad_fn)


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature-scaled softmax, stabilized by max subtraction per slice."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {temperature}")
    z = x.data / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / np.sum(e, axis=axis, keepdims=True)

    def grad_fn(g):
        dot = np.sum(g * p, axis=axis, keepdims=True)
        return ((p * (g - dot)) / temperature,)

    return _make(p, "softmax", (x,), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if gain.shape != (x.shape[-1],) or shift.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / shift {shift.shape} must be ({x.shape[-1]},)"
        )
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x64 - mu) * inv_std).astype(x.dtype)
    data = gain.data * xhat + shift.data
    n = x.shape[-1]

    def grad_fn(g):
        g_xhat = g * gain.data
        term = g_xhat - g_xhat.mean(axis=-1, keepdims=True) - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        gx = (term * inv_std).astype(x.dtype)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(data, "layer_norm", (x, gain, shift), grad_fn)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather from a [rows, width] table by an integer id array."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be rank 2, got shape {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(
            f"embedding ids must lie in [0, {table.shape[0]}), got range "
            f"[{ids.min()}, {ids.max()}]"
        )
    data = table.data[ids]

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(data, "embedding", (table,), grad_fn)


def soft_cross_entropy(
    p_teacher: Tensor,
    p_student: Tensor,
    epsilon: float = 1e-8,
    row_weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean over rows of -sum(p_teacher * log(p_student + epsilon)).

    Rows are slices along the last axis and must each sum to 1 within 1e-5.
    The gradient flows into p_student only; the teacher side is treated as
    a constant.  Optional row_weights (shape = leading dims) reweight the
    mean, e.g. to drop padded positions.
    """
    if p_teacher.shape != p_student.shape:
        raise ShapeError(f"soft_cross_entropy: shapes {p_teacher.shape} and {p_student.shape} differ")
    if epsilon < 0:
        raise ParameterError(f"epsilon must be nonnegative, got {epsilon}")
    pt = p_teacher.data.astype(np.float64)
    ps = p_student.data.astype(np.float64)
    for name, arr in (("teacher", pt), ("student", ps)):
        sums = arr.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-5):
            worst = float(np.abs(sums - 1.0).max())
            raise InputError(f"{name} rows must sum to 1 within 1e-5 (worst deviation {worst:.2e})")

    rows = -np.sum(pt * np.log(ps + epsilon), axis=-1)
    if row_weights is None:
        weights = np.ones(rows.shape)
    else:
        weights = np.asarray(row_weights, dtype=np.float64)
        if weights.shape != rows.shape:
            raise ShapeError(f"row_weights shape {weights.shape} must be {rows.shape}")
    total_w = weights.sum()
    if total_w <= 0:
        raise InputError("row_weights must have positive total weight")
    out_dtype = np.result_type(p_teacher.dtype, p_student.dtype)
    data = np.asarray(((rows * weights).sum() / total_w).astype(out_dtype))

    def grad_fn(g):
        w = (weights / total_w)[..., None]
        gs = (-pt / (ps + epsilon)) * w * g
        return None, gs.astype(p_student.dtype)

    return _make(data, "soft_ce", (p_teacher, p_student), grad_fn)


# ---------------------------------------------------------------------------
# verification


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Compare backward gradients of f against central finite differences.

    Returns the max relative error with denominator max(|analytic|,
    |numeric|, 1e-8).  Both sides run in float64 (the graph ops follow the
    probe's dtype), so the check verifies the backward rules rather than
    float32 rounding; NaN anywhere propagates into the returned value.
    """
    if h <= 0:
        raise ParameterError(f"step size must be positive, got {h}")
    probe = Tensor(x.data.astype(np.float64).copy(), requires_grad=True)
    loss = f(probe)
    loss.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)

    base = x.data.astype(np.float64)
    numeric = np.zeros(base.shape, dtype=np.float64)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(Tensor(base.copy())).item()
        flat[i] = orig - h
        down = f(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))

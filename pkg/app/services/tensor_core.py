"""
Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a backward closure on the output tensor;
``Tensor.backward`` replays that record in reverse topological order.
Values are 32-bit by default and reductions accumulate in 64-bit. The
finite-difference oracle ``grad_check`` evaluates in 64-bit precision.
"""

import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

_default_dtype: ContextVar = ContextVar("default_dtype", default=np.float32)
_grad_enabled: ContextVar = ContextVar("grad_enabled", default=True)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shapes."""


class NumericError(ArithmeticError):
    """Raised when an op sees or produces non-finite values."""


class GraphError(RuntimeError):
    """Raised when a released computation record is replayed."""


def default_dtype():
    return _default_dtype.get()


@contextmanager
def precision(dtype):
    """Temporarily change the dtype used for newly created tensors."""
    token = _default_dtype.set(dtype)
    try:
        yield
    finally:
        _default_dtype.reset(token)


@contextmanager
def no_grad():
    """Evaluate ops without recording a computation graph."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def _check_finite(array: np.ndarray, op: str):
    if not np.all(np.isfinite(array)):
        raise NumericError(f"{op}: non-finite values encountered")


def _released_backward(grad):
    raise GraphError("computation record already released by a previous backward()")


class Tensor:
    """A node in the computation graph holding an n-dimensional array."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(default_dtype())
        _check_finite(array, "tensor")
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"
        self._retain = False
        self._released = False

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out._op = op
        out._retain = False
        out._released = False
        tracked = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = tracked
        out._parents = tuple(parents) if tracked else ()
        out._backward = backward if tracked else None
        return out

    # ------------------------------------------------------------------ info

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        self._retain = True
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -------------------------------------------------------------- backward

    def backward(self):
        """Populate ``.grad`` on every leaf reachable from this scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {self.shape}")
        if self._released:
            raise GraphError("backward called twice on the same graph; rebuild the loss first")
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    grad = grad.astype(node.data.dtype, copy=False)
                    node.grad = grad if node.grad is None else node.grad + grad
                continue
            if node._retain:
                node.grad = grad.astype(node.data.dtype, copy=False)
            for parent, parent_grad in zip(node._parents, node._backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = parent_grad if key not in grads else grads[key] + parent_grad
        for node in order:
            if node._backward is not None:
                node._backward = _released_backward
                node._released = True
        self._released = True

    # ------------------------------------------------------------- operators

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, as_tensor(-1.0, self.dtype))

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take_slice(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype or default_dtype()))


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------ elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(a.data / b.data, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    def backward(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return Tensor._from_op(a.data ** exponent, (a,), backward, "pow")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), backward, "exp")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (a,), backward, "tanh")


def relu(a: Tensor) -> Tensor:
    def backward(g):
        return (g * (a.data > 0),)

    return Tensor._from_op(np.maximum(a.data, 0), (a,), backward, "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor._from_op(out.astype(x.dtype, copy=False), (a,), backward, "gelu")


def stop_gradient(a: Tensor) -> Tensor:
    """sg[a]: same values, no gradient path."""
    return Tensor._from_op(a.data, (), None, "stop_gradient")


def straight_through(pre: Tensor, quantized: Tensor) -> Tensor:
    """Forward value of ``quantized``; backward passes the gradient to ``pre`` unchanged."""
    if pre.shape != quantized.shape:
        raise ShapeError(f"straight_through: incompatible shapes {pre.shape} and {quantized.shape}")

    def backward(g):
        return (g, None)

    return Tensor._from_op(quantized.data.copy(), (pre, quantized), backward, "straight_through")


# ----------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# ---------------------------------------------------------------- reductions


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def backward(g):
        if not keepdims:
            for ax in sorted(axes):
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axis, keepdims) * (1.0 / max(count, 1))


# ------------------------------------------------------------------- shapes


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None

    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(a.data, axes), (a,), backward, "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def take_slice(a: Tensor, index) -> Tensor:
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out), (a,), backward, "slice")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: incompatible shapes {tensors[0].shape} and {t.shape}")
    ax = axis % (tensors[0].ndim + 1)

    def backward(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=ax), tensors, backward, "stack")


def embedding(weight: Tensor, indices: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` at integer ``indices``."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= weight.shape[0]):
        raise ValueError(f"embedding: index out of range [0, {weight.shape[0]})")

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (full,)

    return Tensor._from_op(weight.data[indices], (weight,), backward, "embedding")


# ------------------------------------------------------------ normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: incompatible shapes {x.shape} and {gamma.shape}")
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        g_gamma = np.sum(g * xhat, axis=lead)
        g_beta = np.sum(g, axis=lead)
        gx_hat = g * gamma.data
        gx = (inv / n) * (n * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                          - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta

    return Tensor._from_op(out, (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


# -------------------------------------------------------------- convolution


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, dilation: int = 1) -> Tensor:
    """
    Dilated temporal convolution with symmetric zero padding.

    x: (B, T, C_in), weight: (k, C_in, C_out) with odd k, bias: (C_out,).
    Output keeps length T.
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[-1] != weight.shape[1] or weight.shape[0] % 2 == 0:
        raise ShapeError(f"conv1d: incompatible shapes {x.shape} and {weight.shape}")
    batch, length, _ = x.shape
    k = weight.shape[0]
    pad = dilation * (k - 1) // 2
    padded = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    windows = [padded[:, j * dilation: j * dilation + length, :] for j in range(k)]
    out = sum(np.matmul(windows[j], weight.data[j]) for j in range(k))
    parents = (x, weight) if bias is None else (x, weight, bias)
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g_padded = np.zeros_like(padded)
        g_weight = np.zeros_like(weight.data)
        for j in range(k):
            g_padded[:, j * dilation: j * dilation + length, :] += np.matmul(g, weight.data[j].T)
            g_weight[j] = np.einsum("btc,bto->co", windows[j], g)
        grads = [g_padded[:, pad: pad + length, :], g_weight]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1)))
        return tuple(grads)

    return Tensor._from_op(out.astype(x.dtype, copy=False), parents, backward, "conv1d")


# ------------------------------------------------------------------- losses


def mse(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: incompatible shapes {pred.shape} and {target.shape}")
    diff = pred - target
    squared = diff * diff
    return squared.mean() if reduction == "mean" else squared.sum()


def cross_entropy(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    """
    Token cross-entropy from logits (..., K) against integer targets (...).

    reduction: "none" keeps the per-token losses, "sum" or "mean" reduces them.
    """
    targets = np.asarray(targets, dtype=np.int64)
    num_classes = logits.shape[-1]
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: incompatible shapes {logits.shape} and {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= num_classes):
        raise ValueError(f"cross_entropy: target index out of range [0, {num_classes})")
    logp = log_softmax(logits, axis=-1)
    picked_mask = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(picked_mask, targets[..., None], 1.0, axis=-1)
    per_token = -(logp * Tensor(picked_mask)).sum(axis=-1)
    if reduction == "none":
        return per_token
    return per_token.sum() if reduction == "sum" else per_token.mean()


def cosine_similarity(a: Tensor, b, axis: int = -1, eps: float = 1e-8) -> Tensor:
    b = as_tensor(b, a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: incompatible shapes {a.shape} and {b.shape}")
    dot = (a * b).sum(axis=axis)
    norm_a = sqrt((a * a).sum(axis=axis) + eps * eps)
    norm_b = sqrt((b * b).sum(axis=axis) + eps * eps)
    return dot / (norm_a * norm_b)


# ----------------------------------------------------------------- checking


def grad_check(fn: Callable[[Tensor], Tensor], point: ArrayLike, step: float = 1e-4) -> float:
    """
    Compare the analytic gradient of ``fn`` at ``point`` with central differences.

    Returns max |analytic - numeric| / max(1, |analytic|, |numeric|). When ``point``
    is not reachable from the output through recorded ops (only through sg[.]),
    there is nothing analytic to compare and the result is 0.
    """
    origin = np.array(point, dtype=np.float64)
    with precision(np.float64):
        x = Tensor(origin.copy(), requires_grad=True)
        out = fn(x)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: fn must return a scalar, got shape {out.shape}")
        _check_finite(out.data, "grad_check")
        out.backward()
        if x.grad is None:
            return 0.0
        analytic = x.grad.astype(np.float64)
        numeric = np.zeros_like(origin)
        with no_grad():
            for idx in np.ndindex(origin.shape):
                plus = origin.copy()
                plus[idx] += step
                minus = origin.copy()
                minus[idx] -= step
                f_plus = fn(Tensor(plus)).item()
                f_minus = fn(Tensor(minus)).item()
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise NumericError("grad_check: non-finite function value")
                numeric[idx] = (f_plus - f_minus) / (2.0 * step)
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric) / scale)) if origin.size else 0.0

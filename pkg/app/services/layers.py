"""
Trainable building blocks composed from tensor_core ops.
"""

import logging
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from app.services import tensor_core as tc
from app.services.tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)


class Module:
    """
    Base class for anything holding parameters.

    Parameters are Tensor attributes with ``requires_grad=True``; Tensor attributes
    without gradients are buffers (saved, never optimized). Sub-modules may be
    attributes or lists of modules. Names follow attribute insertion order.
    """

    def named_tensors(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(f"{name}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, tensor in self.named_tensors(prefix):
            if tensor.requires_grad:
                yield name, tensor

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ValueError(f"state dict missing entries: {', '.join(missing[:5])}")
        for name, tensor in own.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise ShapeError(f"load_state_dict: {name} has shape {value.shape}, expected {tensor.shape}")
            tensor.data = value.astype(tensor.data.dtype).copy()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape).astype(tc.default_dtype())


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, zero_init: bool = False):
        bound = 1.0 / np.sqrt(in_features)
        if zero_init:
            self.weight = Tensor(np.zeros((in_features, out_features), dtype=tc.default_dtype()), requires_grad=True)
        else:
            self.weight = Tensor(_uniform(rng, (in_features, out_features), bound), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=tc.default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"linear: incompatible shapes {x.shape} and {self.weight.shape}")
        return tc.matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim, dtype=tc.default_dtype()), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=tc.default_dtype()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tc.layer_norm(x, self.gamma, self.beta)


class Conv1d(Module):
    """Same-length dilated temporal convolution over (B, T, C)."""

    def __init__(self, channels: int, kernel_size: int, dilation: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(channels * kernel_size)
        self.weight = Tensor(_uniform(rng, (kernel_size, channels, channels), bound), requires_grad=True)
        self.bias = Tensor(np.zeros(channels, dtype=tc.default_dtype()), requires_grad=True)
        self._dilation = dilation

    def __call__(self, x: Tensor) -> Tensor:
        return tc.conv1d(x, self.weight, self.bias, dilation=self._dilation)


class Embedding(Module):
    def __init__(self, count: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        self.weight = Tensor((rng.standard_normal((count, dim)) * scale).astype(tc.default_dtype()), requires_grad=True)

    def __call__(self, indices) -> Tensor:
        return tc.embedding(self.weight, indices)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator,
                 zero_init_output: bool = False):
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, out_features, rng, zero_init=zero_init_output)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(tc.gelu(self.fc1(x)))


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"attention width {dim} is not divisible by {heads} heads")
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)
        self._heads = heads
        self._head_dim = dim // heads

    def _split(self, x: Tensor) -> Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self._heads, self._head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        """x: (B, T, D). mask: additive (T, T) matrix, 0 where attention is allowed."""
        batch, length, dim = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = tc.matmul(q, tc.swap_last(k)) * (1.0 / np.sqrt(self._head_dim))
        if mask is not None:
            if mask.shape != (length, length):
                raise ShapeError(f"attention: incompatible shapes {mask.shape} and {(length, length)}")
            scores = scores + Tensor(mask.astype(scores.dtype))
        weights = tc.softmax(scores, axis=-1)
        context = tc.matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, length, dim)
        return self.out(context)


class TransformerEncoderLayer(Module):
    """Pre-norm block: x + attn(ln(x)), then x + ff(ln(x))."""

    def __init__(self, dim: int, heads: int, ff_dim: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = MLP(dim, ff_dim, dim, rng)

    def __call__(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.ff(self.norm2(x))

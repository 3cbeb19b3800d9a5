"""
Vector-quantization codebook shared by both latent action models.

The action model keeps its codebook current with exponential moving averages of
assignment counts and sums; the image model trains its codebook by gradient
through the codebook loss (``trainable=True``).
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.services import tensor_core as tc
from app.services.layers import Module
from app.services.tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

_DISTANCE_CHUNK = 64


@dataclass
class LatentCodeSeq:
    """Quantization result: ``embeddings[..., h, :]`` is exactly ``codebook[indices[..., h]]``."""

    indices: np.ndarray
    embeddings: Tensor
    pre_quant: Tensor


def nearest_codes(vectors: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Index of the nearest code (squared L2) for each row; ties go to the lowest index."""
    flat = np.asarray(vectors, dtype=np.float64).reshape(-1, codes.shape[-1])
    table = np.asarray(codes, dtype=np.float64)
    out = np.empty(flat.shape[0], dtype=np.int64)
    for start in range(0, flat.shape[0], _DISTANCE_CHUNK):
        block = flat[start:start + _DISTANCE_CHUNK]
        diff = block[:, None, :] - table[None, :, :]
        out[start:start + _DISTANCE_CHUNK] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out.reshape(np.asarray(vectors).shape[:-1])


def codebook_usage(indices: np.ndarray, num_codes: int) -> Tuple[int, float]:
    """Distinct codes used and perplexity of the code distribution."""
    counts = np.bincount(np.asarray(indices).reshape(-1), minlength=num_codes).astype(np.float64)
    total = counts.sum()
    if total == 0:
        return 0, 0.0
    probs = counts[counts > 0] / total
    return int((counts > 0).sum()), float(np.exp(-(probs * np.log(probs)).sum()))


class Codebook(Module):
    def __init__(self, num_codes: int, dim: int, rng: np.random.Generator, decay: float = 0.99,
                 eps: float = 1e-5, trainable: bool = False):
        init = rng.uniform(-1.0 / num_codes, 1.0 / num_codes, size=(num_codes, dim)).astype(tc.default_dtype())
        self.embeddings = Tensor(init, requires_grad=trainable)
        if not trainable:
            self.ema_counts = Tensor(np.ones(num_codes, dtype=np.float32))
            self.ema_sums = Tensor(init.copy())
        self._num_codes = num_codes
        self._dim = dim
        self._decay = decay
        self._eps = eps
        self._trainable = trainable

    @property
    def num_codes(self) -> int:
        return self._num_codes

    @property
    def dim(self) -> int:
        return self._dim

    def lookup(self, indices: np.ndarray) -> Tensor:
        indices = np.asarray(indices)
        if indices.size and (indices.min() < 0 or indices.max() >= self._num_codes):
            raise ValueError(f"token index out of range [0, {self._num_codes})")
        if self._trainable:
            return tc.embedding(self.embeddings, indices)
        return Tensor(self.embeddings.data[indices])

    def quantize(self, pre_quant: Tensor) -> LatentCodeSeq:
        """
        Map each row of ``pre_quant`` (..., d) to its nearest code.

        The returned embeddings are the gathered codebook rows; use
        ``tc.straight_through`` to route reconstruction gradients to the encoder.
        """
        if pre_quant.shape[-1] != self._dim:
            raise ShapeError(f"quantize: incompatible shapes {pre_quant.shape} and {self.embeddings.shape}")
        indices = nearest_codes(pre_quant.data, self.embeddings.data)
        return LatentCodeSeq(indices=indices, embeddings=self.lookup(indices), pre_quant=pre_quant)

    def ema_update(self, indices: np.ndarray, vectors: np.ndarray):
        """
        EMA codebook update from a batch of (index, vector) assignments.

        N <- decay*N + (1-decay)*count, m <- decay*m + (1-decay)*sum, then each
        embedding becomes m / N~ with Laplace-smoothed counts.
        """
        if self._trainable:
            raise RuntimeError("ema_update called on a gradient-trained codebook")
        flat_idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        flat_vec = np.asarray(vectors, dtype=np.float64).reshape(-1, self._dim)
        if flat_idx.shape[0] != flat_vec.shape[0]:
            raise ShapeError(f"ema_update: incompatible shapes {flat_idx.shape} and {flat_vec.shape}")
        counts = np.bincount(flat_idx, minlength=self._num_codes).astype(np.float64)
        sums = np.zeros((self._num_codes, self._dim))
        np.add.at(sums, flat_idx, flat_vec)

        gamma = self._decay
        n = gamma * self.ema_counts.data.astype(np.float64) + (1.0 - gamma) * counts
        m = gamma * self.ema_sums.data.astype(np.float64) + (1.0 - gamma) * sums
        total = n.sum()
        smoothed = (n + self._eps) / (total + self._num_codes * self._eps) * total
        self.ema_counts.data = n.astype(np.float32)
        self.ema_sums.data = m.astype(np.float32)
        self.embeddings.data = (m / smoothed[:, None]).astype(self.embeddings.data.dtype)

"""
Image-based latent action model over (o_t, o_{t+delta}) pairs of rendered grids.

Each transition is encoded to P tokens from a small gradient-trained codebook.
A decoder predicts the end frame from the start frame and the quantized tokens,
and an action head on the pre-quantization latents is trained on a small
supervised subset.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.models.schemas import ImageLamConfig, LamKind
from app.services import tensor_core as tc
from app.services.checkpoint import DatasetError, load_checkpoint, save_checkpoint
from app.services.codebook import Codebook, LatentCodeSeq, codebook_usage
from app.services.layers import MLP, Linear, Module
from app.services.optim import Adam
from app.services.tensor_core import NumericError, ShapeError, Tensor

logger = logging.getLogger(__name__)

CACHE_MAGIC = b"LATC"
CACHE_VERSION = 1


@dataclass
class TransitionSample:
    o_start: np.ndarray
    o_end: np.ndarray
    delta: int
    action: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.o_start.shape != self.o_end.shape:
            raise ShapeError(f"transition: incompatible shapes {self.o_start.shape} and {self.o_end.shape}")
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")


@dataclass
class TransitionBatch:
    o_start: np.ndarray
    o_end: np.ndarray
    actions: np.ndarray
    supervised: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[TransitionSample], action_dim: int) -> "TransitionBatch":
        actions = np.zeros((len(samples), action_dim), dtype=np.float32)
        supervised = np.zeros(len(samples), dtype=bool)
        for i, s in enumerate(samples):
            if s.action is not None:
                actions[i] = s.action
                supervised[i] = True
        return cls(np.stack([s.o_start for s in samples]).astype(np.float32),
                   np.stack([s.o_end for s in samples]).astype(np.float32), actions, supervised)

    def subset(self, index: np.ndarray) -> "TransitionBatch":
        return TransitionBatch(self.o_start[index], self.o_end[index], self.actions[index], self.supervised[index])

    def __len__(self):
        return self.o_start.shape[0]


def select_supervised(n: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted indices of the action-supervised subset; same (n, fraction, seed) gives the same subset."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"supervised fraction must be in [0, 1], got {fraction}")
    count = int(np.ceil(fraction * n)) if n else 0
    return np.sort(np.random.default_rng([seed, 4]).permutation(n)[:count])


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, W, W, C) -> (B, (W/p)^2, p*p*C), row-major over the patch grid."""
    batch, width, _, channels = images.shape
    grid = width // patch
    x = images.reshape(batch, grid, patch, grid, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(batch, grid * grid, patch * patch * channels)


def unpatchify(patches: Tensor, width: int, patch: int, channels: int) -> Tensor:
    batch = patches.shape[0]
    grid = width // patch
    x = patches.reshape(batch, grid, grid, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(batch, width, width, channels)


def pooling_matrix(grid: int, pooled: int) -> np.ndarray:
    """Average-pool a grid x grid token map down to pooled x pooled tokens."""
    block = grid // pooled
    matrix = np.zeros((pooled * pooled, grid * grid), dtype=np.float32)
    for r in range(grid):
        for c in range(grid):
            matrix[(r // block) * pooled + c // block, r * grid + c] = 1.0 / (block * block)
    return matrix


class ImageLam(Module):
    def __init__(self, config: ImageLamConfig, supervised_index: Optional[np.ndarray] = None):
        self.config = config
        rng = np.random.default_rng([config.seed, 0])
        patch_in = config.patch_size ** 2 * config.channels
        grid = config.image_size // config.patch_size
        self.patch_embed = Linear(2 * patch_in, config.hidden, rng)
        self.token_mix = Linear(config.hidden, config.hidden, rng)
        self.to_latent = Linear(config.hidden, config.latent_dim, rng)
        self.codebook = Codebook(config.codebook_size, config.latent_dim, rng, trainable=True)
        self.start_proj = Linear(patch_in, config.hidden, rng)
        self.latent_proj = Linear(config.tokens_per_step * config.latent_dim, config.hidden, rng)
        self.patch_pos = Tensor((rng.standard_normal((grid * grid, config.hidden)) * 0.02).astype(np.float32),
                                requires_grad=True)
        self.mid = Linear(config.hidden, config.hidden, rng)
        self.to_delta = Linear(config.hidden, patch_in, rng, zero_init=True)
        self.action_head = MLP(config.tokens_per_step * config.latent_dim, config.action_hidden, config.action_dim, rng)
        self.supervised_index = supervised_index
        self._pool = pooling_matrix(grid, int(round(config.tokens_per_step ** 0.5)))

    def named_tensors(self, prefix: str = ""):
        for attr in ("patch_embed", "token_mix", "to_latent", "codebook", "start_proj", "latent_proj",
                     "mid", "to_delta", "action_head"):
            yield from getattr(self, attr).named_tensors(f"{prefix}{attr}.")
        yield f"{prefix}patch_pos", self.patch_pos

    def _check(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim == 3:
            images = images[None]
        expected = (self.config.image_size, self.config.image_size, self.config.channels)
        if images.shape[1:] != expected:
            raise ShapeError(f"image_lam: incompatible shapes {images.shape} and {expected}")
        return images

    def encode_transition(self, o_start: np.ndarray, o_end: np.ndarray) -> Tensor:
        """(B, W, W, C) pairs -> c^img (B, P, d)."""
        o_start, o_end = self._check(o_start), self._check(o_end)
        if o_start.shape != o_end.shape:
            raise ShapeError(f"encode_transition: incompatible shapes {o_start.shape} and {o_end.shape}")
        pair = np.concatenate([o_start, o_end], axis=-1)
        tokens = Tensor(patchify(pair, self.config.patch_size))
        h = tc.gelu(self.patch_embed(tokens))
        h = h + tc.gelu(self.token_mix(h))
        pooled = tc.matmul(Tensor(self._pool), h)
        return self.to_latent(pooled)

    def quantize(self, pre_quant: Tensor) -> LatentCodeSeq:
        return self.codebook.quantize(pre_quant)

    def decode_future(self, o_start: np.ndarray, z_q: Tensor) -> Tensor:
        """Predict o_{t+delta} as o_t plus a per-patch residual conditioned on the tokens."""
        o_start = self._check(o_start)
        cfg = self.config
        patches = Tensor(patchify(o_start, cfg.patch_size))
        batch = patches.shape[0]
        latent = self.latent_proj(z_q.reshape(batch, cfg.tokens_per_step * cfg.latent_dim))
        h = tc.gelu(self.start_proj(patches) + latent.reshape(batch, 1, cfg.hidden) + self.patch_pos)
        h = h + tc.gelu(self.mid(h))
        predicted = patches + self.to_delta(h)
        return unpatchify(predicted, cfg.image_size, cfg.patch_size, cfg.channels)

    def action_regularizer(self, pre_quant: Tensor, actions: np.ndarray,
                           supervised: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Predict a_t from flattened c^img; loss is the mean squared error over supervised samples."""
        batch = pre_quant.shape[0]
        predicted = self.action_head(pre_quant.reshape(batch, -1))
        supervised = np.asarray(supervised, dtype=bool)
        if not supervised.any():
            return predicted, Tensor(np.zeros((), dtype=np.float32))
        weight = Tensor((supervised.astype(np.float32) / supervised.sum())[:, None])
        diff = predicted - Tensor(np.asarray(actions, dtype=np.float32))
        return predicted, (diff * diff * weight).sum() * (1.0 / self.config.action_dim)

    def compute_losses(self, batch: TransitionBatch) -> Dict[str, Tensor]:
        c = self.encode_transition(batch.o_start, batch.o_end)
        q = self.quantize(c)
        z = tc.straight_through(c, q.embeddings)
        predicted = self.decode_future(batch.o_start, z)
        rec = tc.mse(predicted, batch.o_end)
        codebook = tc.mse(q.embeddings, tc.stop_gradient(c))
        commit = tc.mse(c, tc.stop_gradient(q.embeddings))
        _, act = self.action_regularizer(c, batch.actions, batch.supervised)
        total = rec + codebook + commit * self.config.beta
        if self.config.lambda_act > 0:
            total = total + act * self.config.lambda_act
        return {"rec": rec, "codebook": codebook, "commit": commit, "act": act, "total": total, "_quant": q}

    def make_optimizer(self) -> Adam:
        return Adam(dict(self.named_parameters()), learning_rate=self.config.learning_rate)

    def train_step(self, batch: TransitionBatch, optimizer: Adam) -> Dict[str, float]:
        optimizer.zero_grad()
        losses = self.compute_losses(batch)
        if not np.isfinite(losses["total"].item()):
            raise NumericError(f"image_lam: non-finite loss at step {optimizer.state.step}")
        losses["total"].backward()
        optimizer.step()
        return {name: value.item() for name, value in losses.items() if not name.startswith("_")}

    def tokenize(self, o_start: np.ndarray, o_end: np.ndarray) -> LatentCodeSeq:
        with tc.no_grad():
            return self.quantize(self.encode_transition(o_start, o_end))

    def predict(self, o_start: np.ndarray, indices: np.ndarray) -> np.ndarray:
        with tc.no_grad():
            return self.decode_future(o_start, self.codebook.lookup(indices)).data

    def usage(self, indices: np.ndarray):
        return codebook_usage(indices, self.config.codebook_size)

    def save(self, path: Union[str, Path]):
        header = {"kind": LamKind.image.value, "config": self.config.model_dump(mode="json")}
        if self.supervised_index is not None:
            header["supervised_index"] = [int(i) for i in self.supervised_index]
        save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ImageLam":
        tensors, header = load_checkpoint(path)
        if header.get("kind") != LamKind.image.value:
            raise DatasetError(f"{path} is not an image latent model checkpoint")
        index = header.get("supervised_index")
        model = cls(ImageLamConfig(**header["config"]), None if index is None else np.array(index, dtype=np.int64))
        model.load_state_dict(tensors)
        return model


# ------------------------------------------------------------- token cache


@dataclass
class TokenRecord:
    episode: int
    timestep: int
    tokens: np.ndarray
    latents: np.ndarray


def write_token_cache(path: Union[str, Path], records: Sequence[TokenRecord], tokens_per_step: int, latent_dim: int):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", CACHE_VERSION, tokens_per_step, latent_dim))
        for r in records:
            raw_tokens = np.asarray(r.tokens).reshape(-1)
            if raw_tokens.size and (raw_tokens.min() < 0 or raw_tokens.max() > 255):
                raise ValueError(f"token cache: record ({r.episode}, {r.timestep}) has ids outside [0, 256)")
            tokens = raw_tokens.astype(np.uint8)
            latents = np.asarray(r.latents, dtype="<f4").reshape(-1)
            if tokens.size != tokens_per_step or latents.size != tokens_per_step * latent_dim:
                raise ShapeError(f"token cache: record ({r.episode}, {r.timestep}) has the wrong size")
            f.write(struct.pack("<II", r.episode, r.timestep))
            f.write(tokens.tobytes())
            f.write(latents.tobytes())
    logger.info(f"Wrote {len(records)} token records to {path}")


def read_token_cache(path: Union[str, Path]) -> List[TokenRecord]:
    raw = Path(path).read_bytes()
    if raw[:4] != CACHE_MAGIC:
        raise DatasetError(f"{path} is not a token cache")
    version, tokens_per_step, latent_dim = struct.unpack_from("<III", raw, 4)
    if version != CACHE_VERSION:
        raise DatasetError(f"unsupported token cache version {version}")
    offset = 16
    record_size = 8 + tokens_per_step + 4 * tokens_per_step * latent_dim
    if (len(raw) - offset) % record_size:
        raise DatasetError(f"truncated token cache {path}")
    records = []
    while offset < len(raw):
        episode, timestep = struct.unpack_from("<II", raw, offset)
        tokens = np.frombuffer(raw, dtype=np.uint8, count=tokens_per_step, offset=offset + 8).astype(np.int64)
        latents = np.frombuffer(raw, dtype="<f4", count=tokens_per_step * latent_dim,
                                offset=offset + 8 + tokens_per_step).reshape(tokens_per_step, latent_dim)
        records.append(TokenRecord(episode, timestep, tokens, latents.astype(np.float32)))
        offset += record_size
    return records


def iterate_batches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless shuffled minibatch indices."""
    while True:
        order = rng.permutation(count)
        for start in range(0, count, batch_size):
            yield order[start:start + batch_size]

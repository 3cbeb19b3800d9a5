"""
Action-based latent action model.

A VQ-VAE over normalized action chunks: each of the H timesteps becomes one token
from an EMA codebook. Training combines reconstruction, masked latent consistency
and commitment losses.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from app.models.schemas import ActionLamConfig, FrequencyFeatures, LamKind
from app.services import tensor_core as tc
from app.services.checkpoint import DatasetError, load_checkpoint, save_checkpoint
from app.services.codebook import Codebook, LatentCodeSeq, codebook_usage
from app.services.layers import MLP, Conv1d, LayerNorm, Linear, Module, TransformerEncoderLayer
from app.services.optim import Adam
from app.services.tensor_core import NumericError, ShapeError, Tensor

logger = logging.getLogger(__name__)

RANGE_TOLERANCE = 1e-6


@dataclass
class ActionChunk:
    """H x m normalized actions."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or 0 in self.values.shape:
            raise ValueError(f"action chunk must be a non-empty H x m array, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("action chunk contains non-finite values")
        if np.abs(self.values).max() > 1.0 + RANGE_TOLERANCE:
            raise ValueError("action chunk values must be normalized to [-1, 1]")

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def action_dim(self) -> int:
        return self.values.shape[1]


class ActionNormalizer:
    """Per-dimension min/max mapping to [-1, 1]."""

    def __init__(self, low: np.ndarray, high: np.ndarray):
        self.low = np.asarray(low, dtype=np.float32)
        self.high = np.asarray(high, dtype=np.float32)
        if self.low.shape != self.high.shape or np.any(self.high < self.low):
            raise ValueError("normalizer bounds must share a shape and satisfy low <= high")

    @classmethod
    def fit(cls, actions: np.ndarray) -> "ActionNormalizer":
        flat = np.asarray(actions, dtype=np.float32).reshape(-1, np.shape(actions)[-1])
        return cls(flat.min(axis=0), flat.max(axis=0))

    def _span(self) -> np.ndarray:
        span = self.high - self.low
        return np.where(span > 0, span, 1.0).astype(np.float32)

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        out = 2.0 * (np.asarray(actions, dtype=np.float32) - self.low) / self._span() - 1.0
        return np.clip(out, -1.0, 1.0).astype(np.float32)

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        return ((np.asarray(values, dtype=np.float32) + 1.0) * 0.5 * self._span() + self.low).astype(np.float32)

    def to_dict(self) -> Dict[str, List[float]]:
        return {"low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, List[float]]) -> "ActionNormalizer":
        return cls(np.array(data["low"]), np.array(data["high"]))


def pad_or_truncate(actions: np.ndarray, horizon: int) -> ActionChunk:
    """Fit a T x m window to H rows: repeat the last row when short, keep the first H when long."""
    actions = np.asarray(actions, dtype=np.float32)
    if actions.ndim != 2 or actions.shape[0] == 0:
        raise ValueError(f"cannot build an action chunk from shape {actions.shape}")
    length = actions.shape[0]
    if length >= horizon:
        return ActionChunk(actions[:horizon].copy())
    pad = np.repeat(actions[-1:], horizon - length, axis=0)
    return ActionChunk(np.concatenate([actions, pad], axis=0))


def _rfft_basis(horizon: int):
    basis = np.fft.rfft(np.eye(horizon), axis=0)
    return basis.real, basis.imag


def feature_width(action_dim: int, horizon: int, mode: FrequencyFeatures = FrequencyFeatures.fft) -> int:
    if mode == FrequencyFeatures.none:
        return action_dim
    return action_dim + 2 * (horizon // 2 + 1)


def fft_features(values: Union[Tensor, np.ndarray, ActionChunk]) -> Tensor:
    """
    Raw actions plus a tiled global spectrum summary.

    Input (B, H, m) or (H, m). For every action dimension the real DFT over H steps
    is taken, spectra are averaged across dimensions, and the real and imaginary
    parts (2 * (H // 2 + 1) values) are appended to every timestep.
    """
    if isinstance(values, ActionChunk):
        values = values.values
    x = values if isinstance(values, Tensor) else Tensor(np.asarray(values, dtype=tc.default_dtype()))
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    batch, horizon, action_dim = x.shape
    if horizon < 2:
        raise ValueError("fft features need at least two timesteps")
    real_basis, imag_basis = _rfft_basis(horizon)
    real = tc.matmul(Tensor(real_basis.astype(x.dtype)), x).mean(axis=-1)
    imag = tc.matmul(Tensor(imag_basis.astype(x.dtype)), x).mean(axis=-1)
    spectrum = tc.concat([real, imag], axis=-1)
    tiled = spectrum.reshape(batch, 1, spectrum.shape[-1]) + Tensor(np.zeros((1, horizon, 1), dtype=x.dtype))
    out = tc.concat([x, tiled], axis=-1)
    return out.reshape(out.shape[1:]) if squeeze else out


class ActionEncoder(Module):
    """features -> linear -> residual dilated convs -> transformer encoder."""

    def __init__(self, config: ActionLamConfig, rng: np.random.Generator):
        width = feature_width(config.action_dim, config.horizon, config.frequency_features)
        self.input_proj = Linear(width, config.latent_dim, rng)
        self.convs = [Conv1d(config.latent_dim, config.kernel_size, d, rng) for d in config.dilations]
        self.blocks = [TransformerEncoderLayer(config.latent_dim, config.heads, config.ff_dim, rng)
                       for _ in range(config.transformer_layers)]
        self.norm = LayerNorm(config.latent_dim)
        self._mode = config.frequency_features

    def __call__(self, actions: Tensor) -> Tensor:
        features = fft_features(actions) if self._mode == FrequencyFeatures.fft else actions
        x = self.input_proj(features)
        for conv in self.convs:
            x = x + tc.gelu(conv(x))
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


class ActionLam(Module):
    def __init__(self, config: ActionLamConfig, normalizer: Optional[ActionNormalizer] = None):
        self.config = config
        rng = np.random.default_rng([config.seed, 0])
        self.encoder = ActionEncoder(config, rng)
        self.decoder = MLP(config.latent_dim, config.decoder_hidden, config.action_dim, rng)
        self.codebook = Codebook(config.codebook_size, config.latent_dim, rng,
                                 decay=config.ema_decay, eps=config.ema_eps)
        self.normalizer = normalizer
        self._mask_rng = np.random.default_rng([config.seed, 3])

    def named_tensors(self, prefix: str = ""):
        for name in ("encoder", "decoder", "codebook"):
            yield from getattr(self, name).named_tensors(f"{prefix}{name}.")

    # ------------------------------------------------------------- pipeline

    def _as_batch(self, actions) -> Tensor:
        x = actions if isinstance(actions, Tensor) else Tensor(np.asarray(actions, dtype=np.float32))
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[1:] != (self.config.horizon, self.config.action_dim):
            raise ShapeError(f"action_lam: incompatible shapes {x.shape} and "
                             f"{(self.config.horizon, self.config.action_dim)}")
        return x

    def encode(self, actions) -> Tensor:
        """Pre-quantization latents c: (B, H, d)."""
        return self.encoder(self._as_batch(actions))

    def quantize(self, pre_quant: Tensor) -> LatentCodeSeq:
        return self.codebook.quantize(pre_quant)

    def decode(self, z_q: Tensor) -> Tensor:
        return self.decoder(z_q)

    def sample_mask(self, batch: int) -> np.ndarray:
        """Bernoulli(mask_ratio) per timestep, resampled once when empty."""
        horizon, ratio = self.config.horizon, self.config.mask_ratio
        mask = self._mask_rng.random((batch, horizon)) < ratio
        for i in range(batch):
            if not mask[i].any():
                mask[i] = self._mask_rng.random(horizon) < ratio
        return mask

    def mask_consistency_loss(self, actions, mask: np.ndarray, pre_quant: Optional[Tensor] = None) -> Tensor:
        """
        Mask latent timesteps, decode, re-encode, and match the original latents.

        Loss = mean of (E(a~)_h - sg[E(a)]_h)^2 over masked h and latent dims, the
        same element-mean reduction as the reconstruction and commitment terms.
        Masked rows are replaced with zeros.
        """
        x = self._as_batch(actions)
        mask = np.asarray(mask, dtype=bool).reshape(x.shape[0], self.config.horizon)
        if not mask.any():
            return Tensor(np.zeros((), dtype=np.float32))
        c = self.encode(x) if pre_quant is None else pre_quant
        keep = Tensor((~mask).astype(c.dtype)[..., None])
        masked = c * keep
        if self.config.quantize_masked_branch:
            masked = tc.straight_through(masked, self.codebook.quantize(masked).embeddings)
        reencoded = self.encode(self.decode(masked))
        diff = reencoded - tc.stop_gradient(c)
        selected = diff * diff * Tensor(mask.astype(c.dtype)[..., None])
        return selected.sum() * (1.0 / (int(mask.sum()) * c.shape[-1]))

    def compute_losses(self, actions, mask: Optional[np.ndarray] = None) -> Dict[str, Tensor]:
        x = self._as_batch(actions)
        c = self.encode(x)
        q = self.quantize(c)
        z = tc.straight_through(c, q.embeddings)
        rec = tc.mse(self.decode(z), x)
        commit = tc.mse(c, tc.stop_gradient(q.embeddings))
        total = rec + commit * self.config.beta
        losses = {"rec": rec, "commit": commit}
        if self.config.mask_ratio > 0 and self.config.lambda_mask > 0:
            if mask is None:
                mask = self.sample_mask(x.shape[0])
            masked = self.mask_consistency_loss(x, mask, pre_quant=c)
            total = total + masked * self.config.lambda_mask
            losses["mask"] = masked
        else:
            losses["mask"] = Tensor(np.zeros((), dtype=np.float32))
        losses["total"] = total
        losses["_quant"] = q
        return losses

    def train_step(self, actions, optimizer: Adam, mask: Optional[np.ndarray] = None) -> Dict[str, float]:
        """One Adam step on encoder/decoder and one EMA codebook update."""
        optimizer.zero_grad()
        losses = self.compute_losses(actions, mask)
        total = losses["total"]
        if not np.isfinite(total.item()):
            raise NumericError(f"action_lam: non-finite loss at step {optimizer.state.step}")
        total.backward()
        optimizer.step()
        q = losses["_quant"]
        self.codebook.ema_update(q.indices, q.pre_quant.data)
        return {name: value.item() for name, value in losses.items() if not name.startswith("_")}

    def make_optimizer(self) -> Adam:
        params = dict(self.encoder.named_parameters("encoder."))
        params.update(self.decoder.named_parameters("decoder."))
        return Adam(params, learning_rate=self.config.learning_rate)

    # ------------------------------------------------------------ tokenizer

    def tokenize(self, actions: np.ndarray) -> LatentCodeSeq:
        """Normalized T x m actions -> H tokens."""
        chunk = pad_or_truncate(actions, self.config.horizon)
        with tc.no_grad():
            c = self.encode(chunk.values)
            q = self.quantize(c)
        return LatentCodeSeq(indices=q.indices[0], embeddings=Tensor(q.embeddings.data[0]),
                             pre_quant=Tensor(c.data[0]))

    def tokenize_batch(self, chunks: np.ndarray) -> LatentCodeSeq:
        """(B, H, m) normalized chunks -> (B, H) tokens with their latents."""
        with tc.no_grad():
            c = self.encode(chunks)
            return self.quantize(c)

    def detokenize(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        with tc.no_grad():
            out = self.decode(self.codebook.lookup(indices))
        return out.data

    # ----------------------------------------------------------- persistence

    def save(self, path: Union[str, Path]):
        header = {"kind": LamKind.action.value, "config": self.config.model_dump(mode="json")}
        if self.normalizer is not None:
            header["normalizer"] = self.normalizer.to_dict()
        save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ActionLam":
        tensors, header = load_checkpoint(path)
        if header.get("kind") != LamKind.action.value:
            raise DatasetError(f"{path} is not an action latent model checkpoint")
        normalizer = ActionNormalizer.from_dict(header["normalizer"]) if "normalizer" in header else None
        model = cls(ActionLamConfig(**header["config"]), normalizer)
        model.load_state_dict(tensors)
        return model

    def usage(self, indices: np.ndarray):
        return codebook_usage(indices, self.config.codebook_size)


def export_tokens(path: Union[str, Path], sequences: Iterable[np.ndarray]):
    """One chunk per line, indices separated by spaces."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for indices in sequences:
            f.write(" ".join(str(int(i)) for i in np.asarray(indices).reshape(-1)) + "\n")

"""
Toy vision-language-action backbone.

Input sequence: [16 patch tokens; instruction token; latent placeholders; action
placeholders]. The observation/instruction prefix attends bidirectionally within
itself and never to placeholders; placeholders attend to the prefix and causally
to earlier placeholders. Placeholder states from the latter half of the layers
are stacked along a layer axis and fed to a continuous action head together with
the pooled image tokens and a projection of the proprio state.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from app.models.schemas import BackboneConfig, PlaceholderLayout
from app.services import tensor_core as tc
from app.services.action_lam import ActionNormalizer
from app.services.checkpoint import load_checkpoint, save_checkpoint
from app.services.env_bench import Task
from app.services.image_lam import patchify
from app.services.layers import MLP, Embedding, Linear, Module, TransformerEncoderLayer
from app.services.tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

MASK_VALUE = -1e9


def aggregation_layers(num_layers: int) -> List[int]:
    """1-indexed layers {ceil(N/2), ..., N}."""
    return list(range(math.ceil(num_layers / 2), num_layers + 1))


def attention_mask(prefix: int, placeholders: int) -> np.ndarray:
    length = prefix + placeholders
    mask = np.full((length, length), MASK_VALUE, dtype=np.float32)
    mask[:prefix, :prefix] = 0.0
    mask[prefix:, :prefix] = 0.0
    rows, cols = np.tril_indices(placeholders)
    mask[prefix + rows, prefix + cols] = 0.0
    return mask


@dataclass
class BackboneOutput:
    """Per-layer hidden states (B, L, d_hidden), index k-1 for layer k."""

    states: List[Tensor]
    layout: PlaceholderLayout
    prefix: int

    def latent_slice(self) -> slice:
        return slice(self.prefix, self.prefix + self.layout.latent_slots)

    def action_slice(self) -> slice:
        start = self.prefix + self.layout.latent_slots
        return slice(start, start + self.layout.action_slots)

    def placeholder_states(self, layer: int, segment: str) -> Tensor:
        """nu^(layer) at the latent or action placeholders: (B, slots, d_hidden)."""
        index = self.latent_slice() if segment == "latent" else self.action_slice()
        return self.states[layer - 1][:, index, :]

    def image_states(self) -> Tensor:
        return self.states[-1][:, :self.prefix - 1, :]


def aggregate(output: BackboneOutput, segment: str) -> Tensor:
    """Stack placeholder states of the latter-half layers: (B, slots, n_layers, d_hidden)."""
    layers = aggregation_layers(len(output.states))
    return tc.stack([output.placeholder_states(k, segment) for k in layers], axis=2)


class PolicyBackbone(Module):
    def __init__(self, config: BackboneConfig, layout: PlaceholderLayout, rng: np.random.Generator):
        self.config = config
        self.layout = layout
        patch_in = config.patch_size ** 2 * config.channels
        self.patch_embed = Linear(patch_in, config.hidden, rng)
        self.instruction = Embedding(config.num_instructions, config.hidden, rng)
        if layout.latent_slots:
            self.latent_placeholders = Tensor(
                (rng.standard_normal((layout.latent_slots, config.hidden)) * 0.02).astype(np.float32),
                requires_grad=True)
        if layout.action_slots:
            self.action_placeholders = Tensor(
                (rng.standard_normal((layout.action_slots, config.hidden)) * 0.02).astype(np.float32),
                requires_grad=True)
        length = config.num_patches + 1 + layout.total_length
        self.positions = Tensor((rng.standard_normal((length, config.hidden)) * 0.02).astype(np.float32),
                                requires_grad=True)
        self.layers = [TransformerEncoderLayer(config.hidden, config.heads, config.ff_dim, rng)
                       for _ in range(config.layers)]
        self._prefix = config.num_patches + 1
        self._mask = attention_mask(self._prefix, layout.total_length)

    @property
    def prefix(self) -> int:
        return self._prefix

    def build_sequence(self, observations: np.ndarray, instruction_ids: np.ndarray,
                       placeholder_override: Optional[Dict[str, Tensor]] = None):
        """
        Token embeddings (B, L, d_hidden) and the additive attention mask (L, L).

        ``placeholder_override`` replaces the learned latent/action placeholder
        embeddings, used to check attention ordering.
        """
        cfg = self.config
        observations = np.asarray(observations, dtype=np.float32)
        instruction_ids = np.asarray(instruction_ids, dtype=np.int64).reshape(-1)
        batch = observations.shape[0]
        if instruction_ids.shape[0] != batch:
            raise ShapeError(f"build_sequence: incompatible shapes {observations.shape} and {instruction_ids.shape}")
        if instruction_ids.min() < 0 or instruction_ids.max() >= cfg.num_instructions:
            raise ValueError(f"unknown instruction id (vocabulary has {cfg.num_instructions} entries)")
        parts = [self.patch_embed(Tensor(patchify(observations, cfg.patch_size))),
                 self.instruction(instruction_ids).reshape(batch, 1, cfg.hidden)]
        override = placeholder_override or {}
        zeros = Tensor(np.zeros((batch, 1, 1), dtype=np.float32))
        if self.layout.latent_slots:
            latent = override.get("latent", self.latent_placeholders)
            parts.append(zeros + latent)
        if self.layout.action_slots:
            action = override.get("action", self.action_placeholders)
            parts.append(zeros + action)
        sequence = tc.concat(parts, axis=1) + self.positions
        return sequence, self._mask

    def forward(self, observations: np.ndarray, instruction_ids: np.ndarray,
                placeholder_override: Optional[Dict[str, Tensor]] = None) -> BackboneOutput:
        x, mask = self.build_sequence(observations, instruction_ids, placeholder_override)
        states = []
        for layer in self.layers:
            x = layer(x, mask)
            states.append(x)
        return BackboneOutput(states=states, layout=self.layout, prefix=self._prefix)


class ActionHead(Module):
    """[mean-pooled image tokens; flattened placeholder parts; state projection] -> H x m."""

    def __init__(self, hidden: int, parts_width: int, state_dim: int, head_hidden: int,
                 horizon: int, action_dim: int, rng: np.random.Generator):
        self.state_proj = Linear(state_dim, hidden, rng)
        self.mlp = MLP(2 * hidden + parts_width, head_hidden, horizon * action_dim, rng)
        self._parts_width = parts_width
        self._horizon = horizon
        self._action_dim = action_dim

    def __call__(self, image_states: Tensor, parts: List[Tensor], state: np.ndarray) -> Tensor:
        if not parts:
            raise ValueError("action head needs at least one placeholder representation")
        batch = image_states.shape[0]
        flat = [p.reshape(batch, -1) for p in parts]
        width = sum(p.shape[-1] for p in flat)
        if width != self._parts_width:
            raise ShapeError(f"action_head: incompatible shapes {(batch, width)} and {(batch, self._parts_width)}")
        pooled = image_states.mean(axis=1)
        projected = self.state_proj(Tensor(np.asarray(state, dtype=np.float32)))
        features = tc.concat([pooled] + flat + [projected], axis=-1)
        return self.mlp(features).reshape(batch, self._horizon, self._action_dim)


def head_segments(layout: PlaceholderLayout) -> List[str]:
    """Placeholder segments the action head consumes, latent before action."""
    return [name for name, slots in (("latent", layout.latent_slots), ("action", layout.action_slots)) if slots]


class Policy(Module):
    """Backbone plus action head for one placeholder layout."""

    def __init__(self, config: BackboneConfig, layout: PlaceholderLayout, action_dim: int, seed: int,
                 normalizer: Optional[ActionNormalizer] = None):
        rng = np.random.default_rng([seed, 0])
        self.backbone = PolicyBackbone(config, layout, rng)
        n_layers = len(aggregation_layers(config.layers))
        slots = sum(layout.latent_slots if s == "latent" else layout.action_slots for s in head_segments(layout))
        self.head = ActionHead(config.hidden, slots * n_layers * config.hidden, config.state_dim,
                               config.head_hidden, layout.horizon, action_dim, rng)
        self.config = config
        self.layout = layout
        self.action_dim = action_dim
        self.seed = seed
        self.normalizer = normalizer

    def named_tensors(self, prefix: str = ""):
        yield from self.backbone.named_tensors(f"{prefix}backbone.")
        yield from self.head.named_tensors(f"{prefix}head.")

    @property
    def horizon(self) -> int:
        return self.layout.horizon

    def predict(self, observations: np.ndarray, instruction_ids: np.ndarray, states: np.ndarray,
                placeholder_override: Optional[Dict[str, Tensor]] = None):
        """Normalized action chunks (B, H, m) and the backbone output."""
        output = self.backbone.forward(observations, instruction_ids, placeholder_override)
        parts = [aggregate(output, segment) for segment in head_segments(self.layout)]
        return self.head(output.image_states(), parts, states), output

    def act(self, obs: np.ndarray, state_vector: np.ndarray, task: Task) -> np.ndarray:
        """Single forward pass to a raw (H, m) action chunk."""
        with tc.no_grad():
            actions, _ = self.predict(np.asarray(obs)[None], np.array([task.instruction_id]),
                                      np.asarray(state_vector)[None])
        chunk = actions.data[0]
        return self.normalizer.denormalize(chunk) if self.normalizer is not None else chunk

    def save(self, path: Union[str, Path], extra: Optional[dict] = None):
        header = {"kind": "policy", "backbone": self.config.model_dump(mode="json"),
                  "layout": self.layout.model_dump(mode="json"), "action_dim": self.action_dim, "seed": self.seed}
        if self.normalizer is not None:
            header["normalizer"] = self.normalizer.to_dict()
        header.update(extra or {})
        save_checkpoint(path, self.state_dict(), header)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Policy":
        tensors, header = load_checkpoint(path)
        if header.get("kind") != "policy":
            raise ValueError(f"{path} is not a policy checkpoint")
        normalizer = ActionNormalizer.from_dict(header["normalizer"]) if "normalizer" in header else None
        policy = cls(BackboneConfig(**header["backbone"]), PlaceholderLayout(**header["layout"]),
                     header["action_dim"], header["seed"], normalizer)
        policy.load_state_dict(tensors)
        return policy

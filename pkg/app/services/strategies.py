"""
Latent-action supervision strategies for the policy backbone.

Each variant fixes a placeholder layout, the representations the action head
consumes, and an auxiliary latent loss added to the action loss with weight
lambda:

    baseline   H action placeholders, no latent loss
    la_align   baseline layout; cosine alignment of an intermediate layer with c^img
    la_direct  P*H latent placeholders predicting z^img tokens
    la_cond    P*H latent then H action placeholders; latent loss as la_direct
    la_tok     H latent placeholders predicting z^act tokens
    direct_c   la_direct layout regressing c^img
    tok_c      la_tok layout regressing c^act
    ph_direct  P*H action placeholders, no latent loss
    ph_cond    P*H + H action placeholders, no latent loss
"""

import logging
import math
from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from app.models.schemas import BackboneConfig, PlaceholderLayout, StrategyConfig, StrategyName
from app.services import tensor_core as tc
from app.services.layers import MLP, Linear, Module
from app.services.policy_backbone import BackboneOutput, Policy
from app.services.tensor_core import ShapeError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = {
    StrategyName.baseline: 0.0,
    StrategyName.la_align: 1.0,
    StrategyName.la_direct: 0.1,
    StrategyName.la_cond: 0.1,
    StrategyName.la_tok: 0.1,
    StrategyName.direct_c: 0.1,
    StrategyName.tok_c: 0.1,
    StrategyName.ph_direct: 0.0,
    StrategyName.ph_cond: 0.0,
}

IMAGE_TARGET_VARIANTS = {StrategyName.la_align, StrategyName.la_direct, StrategyName.la_cond, StrategyName.direct_c}
ACTION_TARGET_VARIANTS = {StrategyName.la_tok, StrategyName.tok_c}
ALIGN_CHOICES = ("early", "default", "final")


def build_layout(variant: Union[StrategyName, str], horizon: int, tokens_per_step: int,
                 image_codes: int = 16, action_codes: int = 256) -> PlaceholderLayout:
    """(latent slots, action slots) per variant."""
    variant = StrategyName(variant)
    h, ph = horizon, tokens_per_step * horizon
    slots = {
        StrategyName.baseline: (0, 0, h),
        StrategyName.la_align: (0, 0, h),
        StrategyName.la_direct: (ph, image_codes, 0),
        StrategyName.la_cond: (ph, image_codes, h),
        StrategyName.la_tok: (h, action_codes, 0),
        StrategyName.direct_c: (ph, 0, 0),
        StrategyName.tok_c: (h, 0, 0),
        StrategyName.ph_direct: (0, 0, ph),
        StrategyName.ph_cond: (0, 0, ph + h),
    }[variant]
    return PlaceholderLayout(strategy=variant, horizon=horizon, tokens_per_step=tokens_per_step,
                             latent_slots=slots[0], latent_width=slots[1], action_slots=slots[2])


def default_lambda(variant: Union[StrategyName, str]) -> float:
    return DEFAULT_LAMBDA[StrategyName(variant)]


def resolve_align_layer(num_layers: int, choice: Union[int, str, None] = None) -> int:
    """1-indexed alignment layer: ceil(0.6 N) by default, or early / final / an explicit index."""
    if choice is None or choice == "default":
        return math.ceil(0.6 * num_layers)
    if choice == "early":
        return max(1, math.ceil(num_layers / 4))
    if choice == "final":
        return num_layers
    layer = int(choice)
    if not 1 <= layer <= num_layers:
        raise ValueError(f"align layer {layer} outside 1..{num_layers}")
    return layer


@dataclass
class ResolvedStrategy:
    variant: StrategyName
    lambda_latent: float
    align_layer: int
    layout: PlaceholderLayout

    @property
    def needs_image_lam(self) -> bool:
        return self.variant in IMAGE_TARGET_VARIANTS

    @property
    def needs_action_lam(self) -> bool:
        return self.variant in ACTION_TARGET_VARIANTS

    @property
    def has_latent_loss(self) -> bool:
        return self.needs_image_lam or self.needs_action_lam


def resolve_strategy(config: StrategyConfig, backbone: BackboneConfig, horizon: int, tokens_per_step: int,
                     image_codes: int = 16, action_codes: int = 256) -> ResolvedStrategy:
    lam = default_lambda(config.variant) if config.lambda_latent is None else config.lambda_latent
    return ResolvedStrategy(variant=config.variant, lambda_latent=lam,
                            align_layer=resolve_align_layer(backbone.layers, config.align_layer),
                            layout=build_layout(config.variant, horizon, tokens_per_step, image_codes, action_codes))


@dataclass
class LatentTargets:
    """Frozen latent model outputs per training sample."""

    z_img: Optional[np.ndarray] = None
    c_img: Optional[np.ndarray] = None
    z_act: Optional[np.ndarray] = None
    c_act: Optional[np.ndarray] = None

    def take(self, index: np.ndarray) -> "LatentTargets":
        return LatentTargets(*(None if v is None else v[index] for v in (self.z_img, self.c_img, self.z_act, self.c_act)))


class StrategyHeads(Module):
    """Auxiliary heads on placeholder states; discarded at inference."""

    def __init__(self, variant: StrategyName, hidden: int, image_dim: int, action_latent_dim: int,
                 image_codes: int, action_codes: int, seed: int):
        rng = np.random.default_rng([seed, 1])
        self.variant = variant
        if variant == StrategyName.la_align:
            self.align = Linear(hidden, image_dim, rng)
        elif variant in (StrategyName.la_direct, StrategyName.la_cond):
            self.explicit = Linear(hidden, image_codes, rng)
        elif variant == StrategyName.la_tok:
            self.tok = Linear(hidden, action_codes, rng)
        elif variant == StrategyName.direct_c:
            self.regress = MLP(hidden, hidden, image_dim, rng)
        elif variant == StrategyName.tok_c:
            self.regress = MLP(hidden, hidden, action_latent_dim, rng)


# ------------------------------------------------------------------- losses


def loss_align(nu: Tensor, c_img: np.ndarray, projection: Linear) -> Tensor:
    """
    -mean cos(phi_align(nu), target) over batch and chunk steps.

    nu: (B, H, d_hidden) at the action placeholders; c_img: (B, H, P, d) or (B, H, d).
    P token embeddings are mean-pooled to one target per step.
    """
    target = np.asarray(c_img, dtype=np.float32)
    if target.ndim == 4:
        target = target.mean(axis=2)
    projected = projection(nu)
    if projected.shape != target.shape:
        raise ShapeError(f"loss_align: incompatible shapes {projected.shape} and {target.shape}")
    return -tc.cosine_similarity(projected, Tensor(target)).mean()


def _token_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Sum of per-position cross-entropy, mean over batch."""
    per_token = tc.cross_entropy(logits, targets, reduction="none")
    return per_token.sum() * (1.0 / logits.shape[0])


def loss_direct(nu: Tensor, z_img: np.ndarray, head: Linear) -> Tensor:
    """
    Token CE of phi_explicit(nu) against z^img.

    nu: (B, P*H, d_hidden); z_img: (B, H, P). Step h owns positions h*P .. h*P+P-1.
    """
    batch = nu.shape[0]
    targets = np.asarray(z_img, dtype=np.int64).reshape(batch, -1)
    if targets.shape[1] != nu.shape[1]:
        raise ShapeError(f"loss_direct: incompatible shapes {nu.shape} and {np.shape(z_img)}")
    return _token_loss(head(nu), targets)


def loss_cond(output: BackboneOutput, z_img: np.ndarray, head: Linear) -> Tensor:
    """Latent segment of the split layout; the action segment feeds the head separately."""
    return loss_direct(output.placeholder_states(len(output.states), "latent"), z_img, head)


def loss_tok(nu: Tensor, z_act: np.ndarray, head: Linear) -> Tensor:
    """Token CE over H latent placeholders against z^act."""
    targets = np.asarray(z_act, dtype=np.int64)
    if targets.shape != nu.shape[:2]:
        raise ShapeError(f"loss_tok: incompatible shapes {nu.shape} and {targets.shape}")
    return _token_loss(head(nu), targets)


def loss_continuous(nu: Tensor, target: np.ndarray, head: MLP) -> Tensor:
    """MSE between regressed placeholder states and continuous latents (B, slots, d)."""
    batch = nu.shape[0]
    target = np.asarray(target, dtype=np.float32).reshape(batch, nu.shape[1], -1)
    predicted = head(nu)
    if predicted.shape != target.shape:
        raise ShapeError(f"loss_continuous: incompatible shapes {predicted.shape} and {target.shape}")
    return tc.mse(predicted, target)


def action_loss(predicted: Tensor, actions: np.ndarray) -> Tensor:
    """Squared error summed over the chunk, mean over batch."""
    diff = predicted - Tensor(np.asarray(actions, dtype=np.float32))
    return (diff * diff).sum() * (1.0 / predicted.shape[0])


def total_loss(l_action: Tensor, l_latent: Optional[Tensor], lam: float) -> Tensor:
    """L_action + lambda * L_latent; the latent term is left out of the graph when lambda is 0."""
    if l_latent is None or lam == 0:
        return l_action
    return l_action + l_latent * lam


def latent_loss(strategy: ResolvedStrategy, heads: StrategyHeads, output: BackboneOutput,
                targets: LatentTargets) -> Optional[Tensor]:
    variant = strategy.variant
    final = len(output.states)
    if variant == StrategyName.la_align:
        return loss_align(output.placeholder_states(strategy.align_layer, "action"), targets.c_img, heads.align)
    if variant == StrategyName.la_direct:
        return loss_direct(output.placeholder_states(final, "latent"), targets.z_img, heads.explicit)
    if variant == StrategyName.la_cond:
        return loss_cond(output, targets.z_img, heads.explicit)
    if variant == StrategyName.la_tok:
        return loss_tok(output.placeholder_states(final, "latent"), targets.z_act, heads.tok)
    if variant == StrategyName.direct_c:
        return loss_continuous(output.placeholder_states(final, "latent"), targets.c_img, heads.regress)
    if variant == StrategyName.tok_c:
        return loss_continuous(output.placeholder_states(final, "latent"), targets.c_act, heads.regress)
    return None


def strategy_losses(policy: Policy, heads: StrategyHeads, strategy: ResolvedStrategy, observations: np.ndarray,
                    instruction_ids: np.ndarray, states: np.ndarray, actions: np.ndarray,
                    targets: LatentTargets) -> Dict[str, Optional[Tensor]]:
    """Forward one batch and assemble the weighted objective."""
    predicted, output = policy.predict(observations, instruction_ids, states)
    l_action = action_loss(predicted, actions)
    l_latent = latent_loss(strategy, heads, output, targets) if strategy.lambda_latent != 0 else None
    return {"action": l_action, "latent": l_latent, "total": total_loss(l_action, l_latent, strategy.lambda_latent)}

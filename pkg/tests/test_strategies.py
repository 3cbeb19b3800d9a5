"""
Tests for placeholder layouts and the latent supervision losses
"""
import math

import numpy as np
import pytest

from app.models.schemas import BackboneConfig, StrategyConfig, StrategyName
from app.services import tensor_core as tc
from app.services.layers import MLP, Linear
from app.services.policy_backbone import Policy
from app.services.strategies import (LatentTargets, StrategyHeads, action_loss, build_layout, default_lambda,
                                     loss_align, loss_continuous, loss_direct, loss_tok, resolve_align_layer,
                                     resolve_strategy, strategy_losses, total_loss)
from app.services.tensor_core import ShapeError, Tensor

SMALL = BackboneConfig(layers=2, hidden=16, heads=2, ff_dim=32, head_hidden=32)


def identity_projection(dim: int) -> Linear:
    projection = Linear(dim, dim, np.random.default_rng(0))
    projection.weight.data[:] = np.eye(dim, dtype=np.float32)
    projection.bias.data[:] = 0
    return projection


def zero_head(hidden: int, classes: int) -> Linear:
    head = Linear(hidden, classes, np.random.default_rng(0), zero_init=True)
    head.bias.data[:] = 0
    return head


def batch(size=2, seed=0):
    rng = np.random.default_rng(seed)
    observations = rng.uniform(0, 1, (size, 16, 16, 3)).astype(np.float32)
    ids = np.arange(size) % 2
    states = rng.uniform(0, 1, (size, 18)).astype(np.float32)
    actions = rng.uniform(-1, 1, (size, 4, 3)).astype(np.float32)
    return observations, ids, states, actions


@pytest.mark.parametrize("variant,latent,width,action", [
    ("baseline", 0, 0, 8),
    ("la_align", 0, 0, 8),
    ("la_direct", 32, 16, 0),
    ("la_cond", 32, 16, 8),
    ("la_tok", 8, 256, 0),
    ("direct_c", 32, 0, 0),
    ("tok_c", 8, 0, 0),
    ("ph_direct", 0, 0, 32),
    ("ph_cond", 0, 0, 40),
])
def test_layout_per_variant(variant, latent, width, action):
    """Slot counts for H=8, P=4"""
    layout = build_layout(variant, 8, 4)
    assert (layout.latent_slots, layout.latent_width, layout.action_slots) == (latent, width, action)
    assert layout.total_length == latent + action


def test_layouts_follow_slot_formulas_for_random_sizes():
    """H, P*H and P*H+H slot counts hold for random (H, P)"""
    rng = np.random.default_rng(9)
    for _ in range(10):
        h, p = int(rng.integers(1, 17)), int(rng.integers(1, 9))
        expected = {"baseline": (0, h), "la_align": (0, h), "la_direct": (p * h, 0), "la_cond": (p * h, h),
                    "la_tok": (h, 0), "direct_c": (p * h, 0), "tok_c": (h, 0), "ph_direct": (0, p * h),
                    "ph_cond": (0, p * h + h)}
        for variant, slots in expected.items():
            layout = build_layout(variant, h, p)
            assert (layout.latent_slots, layout.action_slots) == slots, (variant, h, p)


@pytest.mark.parametrize("name", ["align", "direct", "tok"])
def test_latent_losses_pass_grad_check(name):
    """Latent losses differentiate correctly with respect to placeholder states"""
    rng = np.random.default_rng(10)
    with tc.precision(np.float64):
        if name == "align":
            head = Linear(4, 3, rng)
            target = rng.standard_normal((2, 2, 3))
            fn = lambda x: loss_align(x, target, head)
            shape = (2, 2, 4)
        elif name == "direct":
            head = Linear(4, 16, rng)
            target = rng.integers(0, 16, (2, 2, 3))
            fn = lambda x: loss_direct(x, target, head)
            shape = (2, 6, 4)
        else:
            head = Linear(4, 256, rng)
            target = rng.integers(0, 256, (2, 3))
            fn = lambda x: loss_tok(x, target, head)
            shape = (2, 3, 4)
    assert tc.grad_check(fn, rng.standard_normal(shape)) < 1e-4


def test_default_lambdas():
    """Alignment 1.0, explicit and continuous variants 0.1, controls 0"""
    assert default_lambda("la_align") == 1.0
    for variant in ("la_direct", "la_cond", "la_tok", "direct_c", "tok_c"):
        assert default_lambda(variant) == 0.1
    for variant in ("baseline", "ph_direct", "ph_cond"):
        assert default_lambda(variant) == 0.0


def test_resolve_align_layer():
    """Default ceil(0.6 N); early, final and explicit choices; out of range raises"""
    assert resolve_align_layer(6) == 4
    assert resolve_align_layer(29) == 18
    assert resolve_align_layer(6, "early") == 2
    assert resolve_align_layer(6, "final") == 6
    assert resolve_align_layer(6, 3) == 3
    for bad in (0, 7):
        with pytest.raises(ValueError):
            resolve_align_layer(6, bad)


def test_resolve_strategy_uses_explicit_lambda():
    """An explicit lambda overrides the variant default, including zero"""
    assert resolve_strategy(StrategyConfig(variant="la_tok"), SMALL, 4, 4).lambda_latent == 0.1
    resolved = resolve_strategy(StrategyConfig(variant="la_tok", lambda_latent=0.0), SMALL, 4, 4)
    assert resolved.lambda_latent == 0.0
    assert resolved.needs_action_lam and not resolved.needs_image_lam


def test_align_loss_extremes():
    """Parallel gives -1, orthogonal 0, anti-parallel +1"""
    projection = identity_projection(2)
    nu = Tensor(np.array([[[1.0, 0.0]]], dtype=np.float32))
    assert loss_align(nu, np.array([[[2.0, 0.0]]]), projection).item() == pytest.approx(-1.0, abs=1e-6)
    assert loss_align(nu, np.array([[[0.0, 3.0]]]), projection).item() == pytest.approx(0.0, abs=1e-6)
    assert loss_align(nu, np.array([[[-1.0, 0.0]]]), projection).item() == pytest.approx(1.0, abs=1e-6)


def test_align_loss_pools_tokens_per_step():
    """P token targets per step are mean-pooled before comparison"""
    projection = identity_projection(2)
    nu = Tensor(np.array([[[1.0, 1.0]]], dtype=np.float32))
    tokens = np.array([[[[1.0, 0.0], [0.0, 1.0]]]])
    assert loss_align(nu, tokens, projection).item() == pytest.approx(-1.0, abs=1e-6)
    with pytest.raises(ShapeError):
        loss_align(nu, np.zeros((1, 2, 2)), projection)


def test_direct_loss_uniform_logits():
    """Uniform logits over 16 codes cost ln 16 per supervised position"""
    nu = Tensor(np.random.default_rng(1).standard_normal((2, 32, 8)).astype(np.float32))
    z_img = np.random.default_rng(2).integers(0, 16, (2, 8, 4))
    loss = loss_direct(nu, z_img, zero_head(8, 16)).item()
    assert loss / 32 == pytest.approx(math.log(16), rel=1e-5)
    assert math.log(16) == pytest.approx(2.7726, abs=1e-4)


def test_direct_loss_perfect_prediction_is_zero():
    """A confident correct head drives the loss to zero"""
    head = zero_head(8, 16)
    head.bias.data[3] = 60.0
    nu = Tensor(np.zeros((1, 8, 8), dtype=np.float32))
    assert loss_direct(nu, np.full((1, 2, 4), 3), head).item() == pytest.approx(0.0, abs=1e-6)


def test_direct_loss_rejects_bad_targets():
    """Indices outside the codebook or a wrong token count raise"""
    nu = Tensor(np.zeros((1, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError):
        loss_direct(nu, np.full((1, 2, 4), 16), zero_head(8, 16))
    with pytest.raises(ShapeError):
        loss_direct(nu, np.zeros((1, 3, 4)), zero_head(8, 16))


def test_tok_loss_uniform_logits():
    """Uniform logits over 256 codes cost ln 256 at each of the H=8 positions"""
    nu = Tensor(np.random.default_rng(3).standard_normal((3, 8, 8)).astype(np.float32))
    z_act = np.random.default_rng(4).integers(0, 256, (3, 8))
    loss = loss_tok(nu, z_act, zero_head(8, 256)).item()
    assert loss == pytest.approx(8 * math.log(256), rel=1e-5)
    assert math.log(256) == pytest.approx(5.5452, abs=1e-4)
    with pytest.raises(ValueError):
        loss_tok(nu, np.full((3, 8), 256), zero_head(8, 256))


def test_continuous_loss():
    """Zero at the target; a zero head costs the mean squared target"""
    rng = np.random.default_rng(5)
    head = MLP(8, 8, 4, rng)
    nu = Tensor(rng.standard_normal((2, 3, 8)).astype(np.float32))
    assert loss_continuous(nu, head(nu).data, head).item() == pytest.approx(0.0, abs=1e-10)

    head.fc2.weight.data[:] = 0
    head.fc2.bias.data[:] = 0
    target = rng.standard_normal((2, 3, 4)).astype(np.float32)
    assert loss_continuous(nu, target, head).item() == pytest.approx(float((target ** 2).mean()), rel=1e-5)


def test_continuous_loss_gradient():
    """Gradient with respect to the placeholder states matches finite differences"""
    rng = np.random.default_rng(6)
    with tc.precision(np.float64):
        head = MLP(4, 6, 3, rng)
    target = rng.standard_normal((2, 2, 3))
    error = tc.grad_check(lambda x: loss_continuous(x, target, head), rng.standard_normal((2, 2, 4)))
    assert error < 1e-4


def test_action_loss_sums_chunk_and_averages_batch():
    """Squared error summed over H x m, averaged over samples"""
    predicted = Tensor(np.zeros((2, 4, 3), dtype=np.float32))
    actions = np.ones((2, 4, 3))
    actions[1] *= 2
    assert action_loss(predicted, actions).item() == pytest.approx((12 + 48) / 2)


def test_total_loss_weighting():
    """L_action + lambda * L_latent; lambda 0 returns L_action itself"""
    l_action = Tensor(np.array(0.5))
    l_latent = Tensor(np.array(2.0))
    assert total_loss(l_action, l_latent, 0.1).item() == pytest.approx(0.7)
    assert total_loss(l_action, l_latent, 0.0) is l_action
    assert total_loss(l_action, None, 0.1) is l_action


def test_cond_latent_logits_ignore_action_placeholders():
    """Latent predictions in the split layout do not depend on action placeholders, over 20 replacements"""
    policy = Policy(SMALL, build_layout("la_cond", 4, 4), 3, seed=0)
    heads = StrategyHeads(StrategyName.la_cond, 16, 8, 16, 16, 256, seed=0)
    observations, ids, _, _ = batch()
    base = policy.backbone.forward(observations, ids)
    final = len(base.states)
    logits = heads.explicit(base.placeholder_states(final, "latent")).data
    rng = np.random.default_rng(7)
    for _ in range(20):
        replaced = Tensor(rng.standard_normal((4, 16)).astype(np.float32))
        swapped = policy.backbone.forward(observations, ids, {"action": replaced})
        assert np.abs(heads.explicit(swapped.placeholder_states(final, "latent")).data - logits).max() < 1e-6
    assert not np.allclose(swapped.placeholder_states(final, "action").data,
                           base.placeholder_states(final, "action").data)


def test_align_with_zero_lambda_matches_baseline():
    """la_align at lambda 0 computes exactly the baseline objective"""
    observations, ids, states, actions = batch()
    totals = []
    for variant in ("baseline", "la_align"):
        strategy = resolve_strategy(StrategyConfig(variant=variant, lambda_latent=0.0), SMALL, 4, 4)
        policy = Policy(SMALL, strategy.layout, 3, seed=1)
        heads = StrategyHeads(strategy.variant, 16, 8, 16, 16, 256, seed=1)
        losses = strategy_losses(policy, heads, strategy, observations, ids, states, actions, LatentTargets())
        assert losses["latent"] is None
        totals.append(losses["total"].item())
    assert totals[0] == totals[1]


def test_strategy_losses_for_every_latent_variant():
    """Each latent variant yields a finite latent term and a weighted total"""
    rng = np.random.default_rng(8)
    observations, ids, states, actions = batch(seed=2)
    targets = LatentTargets(z_img=rng.integers(0, 16, (2, 4, 4)), c_img=rng.standard_normal((2, 4, 4, 8)),
                            z_act=rng.integers(0, 256, (2, 4)), c_act=rng.standard_normal((2, 4, 16)))
    for variant in ("la_align", "la_direct", "la_cond", "la_tok", "direct_c", "tok_c"):
        strategy = resolve_strategy(StrategyConfig(variant=variant), SMALL, 4, 4)
        policy = Policy(SMALL, strategy.layout, 3, seed=0)
        heads = StrategyHeads(strategy.variant, 16, 8, 16, 16, 256, seed=0)
        losses = strategy_losses(policy, heads, strategy, observations, ids, states, actions, targets)
        latent = losses["latent"].item()
        assert np.isfinite(latent), variant
        assert losses["total"].item() == pytest.approx(losses["action"].item() + strategy.lambda_latent * latent,
                                                       rel=1e-5), variant


def test_latent_targets_take_subsets_rows():
    """take() indexes every present target and keeps absent ones absent"""
    targets = LatentTargets(z_img=np.arange(6).reshape(3, 2))
    subset = targets.take(np.array([2, 0]))
    np.testing.assert_array_equal(subset.z_img, [[4, 5], [0, 1]])
    assert subset.c_act is None

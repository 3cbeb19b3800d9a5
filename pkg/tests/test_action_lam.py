"""
Tests for the action latent model and its codebook
"""
import numpy as np
import pytest

from app.models.schemas import ActionLamConfig, FrequencyFeatures
from app.services import tensor_core as tc
from app.services.action_lam import (ActionChunk, ActionLam, ActionNormalizer, export_tokens, feature_width,
                                     fft_features, pad_or_truncate)
from app.services.codebook import Codebook, codebook_usage, nearest_codes
from app.services.tensor_core import Tensor


def small_config(**overrides) -> ActionLamConfig:
    values = dict(horizon=4, latent_dim=16, codebook_size=16, heads=2, transformer_layers=1, ff_dim=32,
                  decoder_hidden=32, batch_size=8)
    values.update(overrides)
    return ActionLamConfig(**values)


def random_chunks(n, horizon=4, dim=3, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, size=(n, horizon, dim)).astype(np.float32)


# ==================== Chunks and features ====================

def test_pad_repeats_last_row():
    """T=3, H=8: rows 3..7 equal row 2"""
    actions = np.arange(9, dtype=np.float32).reshape(3, 3) / 10
    chunk = pad_or_truncate(actions, 8)
    assert chunk.values.shape == (8, 3)
    for row in range(3, 8):
        np.testing.assert_array_equal(chunk.values[row], actions[2])


def test_pad_keeps_exact_and_truncates_long():
    """T=H is unchanged, T>H keeps the first H rows"""
    actions = np.random.default_rng(0).uniform(-1, 1, (12, 3)).astype(np.float32)
    np.testing.assert_array_equal(pad_or_truncate(actions[:8], 8).values, actions[:8])
    np.testing.assert_array_equal(pad_or_truncate(actions, 8).values, actions[:8])


def test_pad_rejects_empty():
    """T=0 is an error"""
    with pytest.raises(ValueError):
        pad_or_truncate(np.zeros((0, 3)), 8)


def test_chunk_rejects_unnormalized_values():
    """Values beyond [-1, 1] are rejected"""
    with pytest.raises(ValueError):
        ActionChunk(np.full((4, 3), 1.5))


def test_normalizer_maps_into_unit_range():
    """Normalized actions lie in [-1, 1] and denormalize back"""
    actions = np.random.default_rng(1).normal(0, 3, (50, 3)).astype(np.float32)
    normalizer = ActionNormalizer.fit(actions)
    normalized = normalizer.normalize(actions)
    assert normalized.min() >= -1.0 and normalized.max() <= 1.0
    np.testing.assert_allclose(normalizer.denormalize(normalized), actions, atol=1e-4)
    restored = ActionNormalizer.from_dict(normalizer.to_dict())
    np.testing.assert_array_equal(restored.low, normalizer.low)


def test_fft_features_of_zero_chunk():
    """All-zero chunk gives all-zero features"""
    out = fft_features(ActionChunk(np.zeros((8, 3))))
    assert out.shape == (8, feature_width(3, 8))
    assert not np.any(out.data)


def test_fft_features_of_constant_chunk():
    """Constant c: DC real bin H*c, everything else zero"""
    c = 0.25
    out = fft_features(ActionChunk(np.full((8, 3), c))).data
    bins = 8 // 2 + 1
    real = out[:, 3:3 + bins]
    imag = out[:, 3 + bins:]
    np.testing.assert_allclose(real[:, 0], 8 * c, atol=1e-5)
    np.testing.assert_allclose(real[:, 1:], 0, atol=1e-5)
    np.testing.assert_allclose(imag, 0, atol=1e-5)


def test_fft_features_of_cosine():
    """cos(2 pi t / H) concentrates at bin 1 with magnitude H/2"""
    horizon = 8
    t = np.arange(horizon)
    wave = np.cos(2 * np.pi * t / horizon)
    values = np.stack([wave, wave, wave], axis=1)
    out = fft_features(ActionChunk(values)).data[0]
    bins = horizon // 2 + 1
    magnitude = np.hypot(out[3:3 + bins], out[3 + bins:])
    # direct O(H^2) DFT
    oracle = np.abs([sum(wave[n] * np.exp(-2j * np.pi * k * n / horizon) for n in range(horizon))
                     for k in range(bins)])
    np.testing.assert_allclose(magnitude, oracle, atol=1e-5)
    assert magnitude[1] == pytest.approx(4.0, abs=1e-5)
    assert np.argmax(magnitude) == 1


def test_fft_features_are_differentiable():
    """Spectrum features pass the finite-difference check"""
    rng = np.random.default_rng(2)
    weights = rng.standard_normal((1, 6, 3 + 2 * 4))
    error = tc.grad_check(lambda x: (fft_features(x.reshape(1, 6, 3)) * weights).sum(), rng.uniform(-1, 1, 18))
    assert error < 1e-4


# ==================== Codebook ====================

def test_nearest_code_by_l2():
    """[0.9, 1.2] picks e_1 = [1, 1]"""
    codes = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert nearest_codes(np.array([[0.9, 1.2]]), codes)[0] == 1


def test_nearest_code_exact_match_and_tie():
    """Exact match picks that code; equidistant picks the lowest index"""
    codes = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert nearest_codes(np.array([[0.0, 0.0]]), codes)[0] == 0
    assert nearest_codes(np.array([[0.5, 0.5]]), codes)[0] == 0


def test_quantize_matches_brute_force():
    """Every row maps to a code at minimal distance"""
    rng = np.random.default_rng(3)
    codebook = Codebook(32, 8, rng)
    c = Tensor(rng.standard_normal((4, 5, 8)).astype(np.float32) * 0.1)
    q = codebook.quantize(c)
    table = codebook.embeddings.data.astype(np.float64)
    for b in range(4):
        for h in range(5):
            distances = ((table - c.data[b, h]) ** 2).sum(axis=1)
            assert distances[q.indices[b, h]] <= distances.min() + 1e-12
            np.testing.assert_array_equal(q.embeddings.data[b, h], codebook.embeddings.data[q.indices[b, h]])


def test_commitment_zero_for_exact_code():
    """A latent equal to a code contributes no commitment loss"""
    codebook = Codebook(4, 2, np.random.default_rng(0))
    c = Tensor(codebook.embeddings.data[2:3].copy())
    q = codebook.quantize(c)
    assert q.indices[0] == 2
    assert tc.mse(c, tc.stop_gradient(q.embeddings)).item() == 0.0


def test_ema_update_recurrence():
    """gamma=0.9, N=1, m=[1,0], assigned [3,0] -> N'=1, m'=[1.2,0], e=[1.2,0]"""
    codebook = Codebook(1, 2, np.random.default_rng(0), decay=0.9, eps=1e-12)
    codebook.ema_sums.data = np.array([[1.0, 0.0]], dtype=np.float32)
    codebook.ema_update(np.array([0]), np.array([[3.0, 0.0]]))
    assert codebook.ema_counts.data[0] == pytest.approx(1.0)
    np.testing.assert_allclose(codebook.ema_sums.data[0], [1.2, 0.0], atol=1e-6)
    np.testing.assert_allclose(codebook.embeddings.data[0], [1.2, 0.0], atol=1e-5)


def test_ema_update_with_no_assignments():
    """Empty batch leaves embeddings unchanged up to smoothing"""
    codebook = Codebook(8, 4, np.random.default_rng(1))
    before = codebook.embeddings.data.copy()
    codebook.ema_update(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))
    np.testing.assert_allclose(codebook.embeddings.data, before, atol=1e-4)


def test_ema_update_zero_decay_takes_mean():
    """gamma=0: assigned codes become the mean of their vectors"""
    codebook = Codebook(3, 2, np.random.default_rng(2), decay=0.0, eps=1e-9)
    vectors = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 5.0]])
    codebook.ema_update(np.array([0, 0, 2]), vectors)
    np.testing.assert_allclose(codebook.embeddings.data[0], [2.0, 3.0], atol=1e-5)
    np.testing.assert_allclose(codebook.embeddings.data[2], [5.0, 5.0], atol=1e-5)


def test_ema_converges_to_planted_cluster_means():
    """K=2 codes settle on the means of two planted clusters within 500 updates"""
    rng = np.random.default_rng(9)
    centers = np.array([[-1.0, -1.0], [1.0, 1.0]])
    labels = rng.integers(0, 2, 200)
    vectors = centers[labels] + rng.normal(0, 0.1, (200, 2))
    codebook = Codebook(2, 2, rng, decay=0.9)
    codebook.embeddings.data = np.array([[-0.1, -0.1], [0.1, 0.1]], dtype=np.float32)
    codebook.ema_sums.data = codebook.embeddings.data.copy()
    for _ in range(500):
        codebook.ema_update(nearest_codes(vectors, codebook.embeddings.data), vectors)
    means = np.stack([vectors[labels == k].mean(axis=0) for k in range(2)])
    order = np.argsort(codebook.embeddings.data[:, 0])
    assert np.linalg.norm(codebook.embeddings.data[order] - means, axis=1).max() < 1e-2


def test_lookup_rejects_out_of_range():
    """Indices >= K raise"""
    codebook = Codebook(4, 2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        codebook.lookup(np.array([4]))


def test_codebook_usage():
    """Uniform use of 4 codes has perplexity 4"""
    used, perplexity = codebook_usage(np.array([0, 1, 2, 3, 0, 1, 2, 3]), 16)
    assert used == 4
    assert perplexity == pytest.approx(4.0)
    assert codebook_usage(np.zeros(0, dtype=np.int64), 16) == (0, 0.0)


# ==================== Model ====================

def test_default_loss_weights():
    """lambda_mask 0.1 and beta 0.25 by default"""
    config = ActionLamConfig()
    assert (config.lambda_mask, config.beta) == (0.1, 0.25)
    assert config.codebook_size == 256


def test_encode_shape_and_determinism():
    """H=8, m=7 gives 8 x 128 latents, identically on repeat"""
    model = ActionLam(ActionLamConfig(action_dim=7))
    chunk = np.random.default_rng(0).uniform(-1, 1, (8, 7)).astype(np.float32)
    first = model.encode(chunk).data
    assert first.shape == (1, 8, 128)
    assert np.array_equal(first, model.encode(chunk).data)


def test_encode_without_frequency_features():
    """Time-domain-only encoder accepts raw actions"""
    model = ActionLam(small_config(frequency_features=FrequencyFeatures.none))
    assert model.encoder.input_proj.weight.shape[0] == 3
    assert model.encode(random_chunks(2)).shape == (2, 4, 16)


def test_decode_zero_input_gives_output_bias():
    """Zero z_q through a zeroed final layer returns the bias at every step"""
    model = ActionLam(small_config())
    model.decoder.fc2.weight.data[:] = 0
    model.decoder.fc2.bias.data[:] = [0.1, -0.2, 0.3]
    out = model.decode(Tensor(np.zeros((1, 4, 16), dtype=np.float32))).data
    np.testing.assert_allclose(out[0], np.tile([0.1, -0.2, 0.3], (4, 1)), atol=1e-7)


def test_decode_is_per_timestep():
    """Identical z_q rows decode to identical rows"""
    model = ActionLam(small_config())
    row = np.random.default_rng(0).standard_normal(16).astype(np.float32)
    out = model.decode(Tensor(np.tile(row, (1, 4, 1)))).data
    for h in range(1, 4):
        np.testing.assert_array_equal(out[0, h], out[0, 0])


def test_mask_loss_empty_mask_is_zero():
    """No masked steps means zero loss"""
    model = ActionLam(small_config())
    loss = model.mask_consistency_loss(random_chunks(2), np.zeros((2, 4), dtype=bool))
    assert loss.item() == 0.0


def test_zero_mask_ratio_removes_mask_term():
    """mask_ratio = 0 leaves rec + beta * commit exactly"""
    model = ActionLam(small_config(mask_ratio=0.0))
    losses = model.compute_losses(random_chunks(4, seed=7))
    assert losses["mask"].item() == 0.0
    assert losses["total"].item() == pytest.approx(losses["rec"].item() + 0.25 * losses["commit"].item(), rel=1e-6)


def test_mask_loss_matches_direct_evaluation():
    """M = {2}: loss equals the element mean of the masked pipeline evaluated step by step"""
    model = ActionLam(small_config())
    chunks = random_chunks(3, seed=4)
    mask = np.zeros((3, 4), dtype=bool)
    mask[:, 2] = True
    loss = model.mask_consistency_loss(chunks, mask).item()

    with tc.no_grad():
        c = model.encode(chunks).data
        masked = c.copy()
        masked[:, 2] = 0
        reencoded = model.encode(model.decode(Tensor(masked))).data
    expected = ((reencoded[:, 2] - c[:, 2]) ** 2).mean()
    assert loss == pytest.approx(float(expected), rel=1e-4)


def test_mask_sampling_never_empty_for_positive_ratio():
    """Masks are drawn per step with at least one attempt to be non-empty"""
    model = ActionLam(small_config(mask_ratio=0.5))
    mask = model.sample_mask(64)
    assert mask.shape == (64, 4)
    assert 0.3 < mask.mean() < 0.7


def test_train_step_reports_all_losses():
    """train_step returns finite rec, commit, mask and total"""
    model = ActionLam(small_config())
    optimizer = model.make_optimizer()
    losses = model.train_step(random_chunks(8), optimizer)
    assert set(losses) == {"rec", "commit", "mask", "total"}
    assert all(np.isfinite(v) for v in losses.values())
    assert optimizer.state.step == 1


def test_train_step_lowers_reconstruction():
    """Repeated steps on a fixed batch with two codes lower rec loss"""
    model = ActionLam(small_config(codebook_size=2, learning_rate=1e-3))
    optimizer = model.make_optimizer()
    batch = random_chunks(8, seed=5)
    history = [model.train_step(batch, optimizer)["rec"] for _ in range(60)]
    assert np.mean(history[-10:]) < np.mean(history[:10])


def test_loss_terms_share_element_mean_scale():
    """At default sizes the weighted mask term stays on the scale of reconstruction"""
    model = ActionLam(ActionLamConfig())
    mask = np.zeros((16, 8), dtype=bool)
    mask[:, [1, 5]] = True
    losses = model.compute_losses(random_chunks(16, horizon=8, seed=11), mask)
    assert 0.1 * losses["mask"].item() < 10 * losses["rec"].item()


def test_default_training_lowers_reconstruction():
    """200 steps at the default architecture, weights and learning rate reduce rec loss"""
    model = ActionLam(ActionLamConfig())
    optimizer = model.make_optimizer()
    batch = random_chunks(32, horizon=8, seed=12)
    history = [model.train_step(batch, optimizer)["rec"] for _ in range(200)]
    assert np.mean(history[-10:]) < np.mean(history[:10])


def test_optimizer_excludes_codebook():
    """Codebook rows move only by EMA"""
    model = ActionLam(small_config())
    names = set(model.make_optimizer().params)
    assert not any(name.startswith("codebook.") for name in names)
    assert any(name.startswith("encoder.") for name in names)


def test_tokenize_returns_h_indices():
    """H=8 chunk -> 8 indices in [0, 256), identical on repeat"""
    model = ActionLam(ActionLamConfig(latent_dim=32, heads=2, ff_dim=64, decoder_hidden=64))
    chunk = np.random.default_rng(6).uniform(-1, 1, (8, 3)).astype(np.float32)
    first = model.tokenize(chunk)
    assert first.indices.shape == (8,)
    assert first.indices.min() >= 0 and first.indices.max() < 256
    np.testing.assert_array_equal(first.indices, model.tokenize(chunk).indices)


def test_tokenize_pads_short_windows():
    """Windows shorter than H are padded before encoding"""
    model = ActionLam(small_config())
    short = random_chunks(1, horizon=2)[0]
    assert model.tokenize(short).indices.shape == (4,)


def test_detokenize_rejects_bad_index():
    """Indices outside the codebook raise"""
    model = ActionLam(small_config())
    with pytest.raises(ValueError):
        model.detokenize(np.array([0, 1, 16, 2]))


def test_detokenize_shape():
    """Tokens decode back to an H x m chunk"""
    model = ActionLam(small_config())
    out = model.detokenize(model.tokenize(random_chunks(1)[0]).indices)
    assert out.shape == (4, 3)


def test_save_and_load_preserve_tokens(tmp_path):
    """Checkpoint round trip keeps weights, codebook and normalizer"""
    normalizer = ActionNormalizer(np.array([-1.0, -1.0, 0.0]), np.array([1.0, 1.0, 1.0]))
    model = ActionLam(small_config(), normalizer)
    model.train_step(random_chunks(8), model.make_optimizer())
    path = tmp_path / "action_lam.latb"
    model.save(path)
    restored = ActionLam.load(path)
    chunks = random_chunks(4, seed=7)
    np.testing.assert_array_equal(restored.tokenize_batch(chunks).indices, model.tokenize_batch(chunks).indices)
    np.testing.assert_array_equal(restored.normalizer.high, normalizer.high)


def test_export_tokens(tmp_path):
    """One line per chunk with space-separated indices"""
    path = tmp_path / "tokens.txt"
    export_tokens(path, [np.array([1, 2, 3, 4]), np.array([0, 0, 5, 5])])
    assert path.read_text().splitlines() == ["1 2 3 4", "0 0 5 5"]


@pytest.mark.slow
def test_round_trip_after_training():
    """Trained model reconstructs within ten times its training loss"""
    config = small_config(horizon=8, codebook_size=64, latent_dim=32, learning_rate=1e-3)
    model = ActionLam(config)
    optimizer = model.make_optimizer()
    rng = np.random.default_rng(8)
    t = np.linspace(0, 1, 8)[None, :, None]
    data = np.clip(np.sin(2 * np.pi * (t + rng.uniform(0, 1, (64, 1, 3)))) * 0.8, -1, 1).astype(np.float32)
    for _ in range(500):
        losses = model.train_step(data[rng.integers(0, 64, 16)], optimizer)
    reconstructed = np.stack([model.detokenize(model.tokenize(chunk).indices) for chunk in data])
    assert np.mean((reconstructed - data) ** 2) < 10 * max(losses["rec"], 1e-4)


@pytest.mark.slow
def test_reconstruction_beats_constant_predictor():
    """Sinusoid-plus-trend chunks reconstruct at a tenth of the data variance per dimension"""
    config = small_config(horizon=8, codebook_size=256, latent_dim=32, learning_rate=1e-3, batch_size=64)
    model = ActionLam(config)
    optimizer = model.make_optimizer()
    rng = np.random.default_rng(10)
    t = np.linspace(0, 1, 8)[None, :, None]
    phase = rng.uniform(0, 1, (512, 1, 3))
    slope = rng.uniform(-0.5, 0.5, (512, 1, 3))
    data = np.clip(0.5 * np.sin(2 * np.pi * (t + phase)) + slope * t, -1, 1).astype(np.float32)
    for _ in range(5000):
        model.train_step(data[rng.integers(0, 512, 64)], optimizer)
    with tc.no_grad():
        q = model.quantize(model.encode(data))
        reconstructed = model.decode(q.embeddings).data
    per_dim_mse = ((reconstructed - data) ** 2).mean(axis=(0, 1))
    assert np.all(per_dim_mse * 10 <= data.reshape(-1, 3).var(axis=0))

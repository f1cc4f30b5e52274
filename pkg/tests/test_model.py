import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dbvae.diffcore import AdamState, ShapeError, Var, check_gradients, softmax_cross_entropy
from dbvae.model import (
    BadMagicError,
    LatentStats,
    LossWeights,
    Model,
    ModelConfig,
    TruncatedCheckpointError,
    UnsupportedVersionError,
    checkpoint_bytes,
    forward_loss,
    kl_divergence,
    load_checkpoint,
    parse_checkpoint,
    predict,
    predict_from_logits,
    reconstruction_loss,
    reparameterize,
    save_checkpoint,
    total_loss,
    train_step,
)

MINI = ModelConfig(image_side=8, num_categories=3, latent_dim=4, filters=(2, 2), dense_width=6)


def latent(mu, logvar):
    return LatentStats(Var(np.asarray(mu, dtype=np.float64)), Var(np.asarray(logvar, dtype=np.float64)))


@pytest.fixture(scope="module")
def default_model():
    m = Model(ModelConfig())
    return m, m.init_params(np.random.default_rng(0))


# ---------------------------------------------------------------- encode / decode


def test_encode_output_shapes(default_model):
    m, p = default_model
    x = np.random.default_rng(1).random((3, 1, 64, 64), dtype=np.float32)
    logits, lat = m.encode(p, x)
    assert logits.shape == (3, 8)
    assert lat.mu.shape == (3, 32) and lat.logvar.shape == (3, 32)


def test_encode_identical_inputs_identical_rows(default_model):
    m, p = default_model
    img = np.random.default_rng(2).random((1, 1, 64, 64), dtype=np.float32)
    logits, lat = m.encode(p, np.concatenate([img, img]))
    for arr in (logits.value, lat.mu.value, lat.logvar.value):
        assert arr[0].tobytes() == arr[1].tobytes()


def test_encode_rejects_wrong_shape(default_model):
    m, p = default_model
    with pytest.raises(ShapeError):
        m.encode(p, np.zeros((1, 1, 32, 32), np.float32))


def test_decode_shape_range_and_determinism(default_model):
    m, p = default_model
    z = np.random.default_rng(3).normal(size=(4, 32)).astype(np.float32)
    out = m.decode(p, z).value
    assert out.shape == (4, 1, 64, 64)
    assert np.all(out > 0) and np.all(out < 1)
    assert out.tobytes() == m.decode(p, z).value.tobytes()


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(image_side=60)
    with pytest.raises(ValueError):
        ModelConfig(latent_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(mode="gan")
    with pytest.raises(ValueError):
        LossWeights(kl_weight=-1)


def test_cnn_mode_forces_zero_vae_weight():
    assert ModelConfig(mode="cnn").effective_vae_weight == 0.0
    assert ModelConfig(mode="dbvae").effective_vae_weight == 1.0


# ---------------------------------------------------------------- reparameterize


def test_reparameterize_zero_noise_gives_mu():
    mu = np.random.default_rng(4).normal(size=(3, 5))
    z = reparameterize(latent(mu, np.ones((3, 5))), np.zeros((3, 5))).value
    np.testing.assert_array_equal(z, mu)


def test_reparameterize_unit_variance():
    r = np.random.default_rng(5)
    mu, e = r.normal(size=(3, 5)), r.normal(size=(3, 5))
    np.testing.assert_allclose(reparameterize(latent(mu, np.zeros((3, 5))), e).value, mu + e)


def test_reparameterize_monte_carlo_mean():
    r = np.random.default_rng(6)
    n = 10**6
    mu = np.array([0.7, -1.3])
    logvar = np.array([0.4, -0.8])
    eps = r.standard_normal((n, 2))
    z = reparameterize(latent(np.tile(mu, (n, 1)), np.tile(logvar, (n, 1))), eps).value
    se = np.exp(0.5 * logvar) / math.sqrt(n)
    assert np.all(np.abs(z.mean(axis=0) - mu) < 3 * se)


def test_reparameterize_shape_mismatch():
    with pytest.raises(ShapeError):
        reparameterize(latent(np.zeros((2, 3)), np.zeros((2, 3))), np.zeros((2, 4)))


# ---------------------------------------------------------------- KL / reconstruction


def test_kl_zero_at_prior():
    assert kl_divergence(latent(np.zeros((4, 6)), np.zeros((4, 6)))).value == 0


def test_kl_single_dimension_unit_mean():
    assert kl_divergence(latent([[1.0]], [[0.0]])).value == pytest.approx(0.5, abs=1e-15)


def kl_monte_carlo(mu, logvar, n, rng):
    """Batch-mean KL estimated as E_q[log q(z) - log p(z)] with n samples per row."""
    total = 0.0
    for m, lv in zip(mu, logvar):
        std = np.exp(0.5 * lv)
        eps = rng.standard_normal((n, m.size))
        z = m + std * eps
        log_q = -0.5 * (eps ** 2 + lv + math.log(2 * math.pi))
        log_p = -0.5 * (z ** 2 + math.log(2 * math.pi))
        total += (log_q - log_p).sum(axis=1).mean()
    return total / len(mu)


def test_kl_matches_monte_carlo():
    r = np.random.default_rng(7)
    mu, lv = r.normal(size=(2, 3)), r.uniform(-1, 1, size=(2, 3))
    assert float(kl_divergence(latent(mu, lv)).value) == pytest.approx(kl_monte_carlo(mu, lv, 10**6, r), abs=1e-2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_kl_is_nonnegative(seed):
    r = np.random.default_rng(seed)
    mu, lv = r.normal(size=(3, 4)) * 3, r.normal(size=(3, 4)) * 3
    assert kl_divergence(latent(mu, lv)).value >= 0


def test_reconstruction_loss_cases():
    x = np.random.default_rng(8).random((2, 1, 4, 4))
    assert reconstruction_loss(x, x).value == 0
    assert reconstruction_loss(np.zeros((2, 1, 4, 4)), np.ones((2, 1, 4, 4))).value == 1
    y = np.random.default_rng(9).random((2, 1, 4, 4))
    direct = sum(abs(a - b) for a, b in zip(x.ravel(), y.ravel())) / x.size
    assert reconstruction_loss(x.astype(np.float32), y.astype(np.float32)).value == pytest.approx(direct, abs=1e-6)
    with pytest.raises(ShapeError):
        reconstruction_loss(x, y[:1])


# ---------------------------------------------------------------- total loss


def random_loss_inputs(seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(4, 8))
    labels = r.integers(0, 8, 4)
    x, x_hat = r.random((4, 1, 8, 8)), r.random((4, 1, 8, 8))
    return logits, labels, x, x_hat, latent(r.normal(size=(4, 5)), r.normal(size=(4, 5)))


def test_total_loss_cnn_mode_is_cross_entropy():
    logits, labels, x, x_hat, lat = random_loss_inputs(10)
    total, parts = total_loss(logits, labels, x, x_hat, lat, LossWeights(), mode="cnn")
    assert total.value == softmax_cross_entropy(logits, labels).value
    assert set(parts) == {"classification", "total"}


def test_total_loss_zero_vae_term():
    logits, labels, x, _, _ = random_loss_inputs(11)
    w = LossWeights(classification_weight=2.0)
    total, _ = total_loss(logits, labels, x, x.copy(), latent(np.zeros((4, 5)), np.zeros((4, 5))), w)
    assert total.value == pytest.approx(2.0 * softmax_cross_entropy(logits, labels).value, abs=1e-12)


def test_total_loss_is_weighted_sum_of_components():
    logits, labels, x, x_hat, lat = random_loss_inputs(12)
    w = LossWeights(classification_weight=0.7, vae_weight=1.3, kl_weight=5e-4, reconstruction_weight=0.9)
    total, parts = total_loss(logits, labels, x, x_hat, lat, w)
    by_hand = (0.7 * parts["classification"]
               + 1.3 * (0.9 * parts["reconstruction"] + 5e-4 * parts["kl"]))
    assert parts["total"] == pytest.approx(by_hand, abs=1e-6)
    assert float(total.value) == parts["total"]


def mini_loss_fn(model, labels, x, eps):
    def loss_fn(p):
        return forward_loss(model, p, x, labels, eps)[0]
    return loss_fn


def test_full_dbvae_loss_gradient_check():
    model = Model(MINI)
    r = np.random.default_rng(13)
    params = model.init_params(r, np.float64)
    params = {k: v + r.normal(0, 0.05, v.shape) for k, v in params.items()}
    x = r.random((2, 1, 8, 8))
    eps = r.standard_normal((2, 4))
    err = check_gradients(mini_loss_fn(model, np.array([0, 2]), x, eps), params)
    assert err < 1e-4


def test_trunk_gradient_check_cnn_mode():
    model = Model(replace(MINI, mode="cnn"))
    r = np.random.default_rng(14)
    params = model.init_params(r, np.float64)
    trunk = {k: v + r.normal(0, 0.05, v.shape) for k, v in params.items() if k.startswith(("trunk.", "logits."))}
    x = r.random((3, 1, 8, 8))
    err = check_gradients(lambda p: forward_loss(model, {**params, **p}, x, np.array([0, 1, 2]))[0], trunk)
    assert err < 1e-4


# ---------------------------------------------------------------- training


SMALL = ModelConfig(image_side=16, num_categories=2, latent_dim=4, filters=(4, 8), dense_width=16)


def toy_set(n=50, seed=15):
    r = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    x = r.random((n, 1, 16, 16)).astype(np.float32) * 0.3
    x[labels == 1, :, :8] += 0.6
    return x, labels


def test_first_step_is_finite_and_bounded():
    model = Model(ModelConfig())
    r = np.random.default_rng(16)
    params = model.init_params(r)
    x = r.random((4, 1, 64, 64), dtype=np.float32)
    _, _, parts = train_step(model, params, AdamState.for_params(params), x, np.arange(4), r)
    assert all(math.isfinite(v) for v in parts.values())
    assert parts["classification"] <= math.log(8) + 1


def test_train_step_is_deterministic():
    def run():
        model = Model(SMALL)
        params = model.init_params(np.random.default_rng(17))
        adam = AdamState.for_params(params)
        r = np.random.default_rng(18)
        x, y = toy_set(8)
        for _ in range(10):
            params, adam, _ = train_step(model, params, adam, x, y, r)
        return b"".join(v.tobytes() for v in params.values())
    assert run() == run()


def test_overfits_toy_set():
    model = Model(SMALL)
    params = model.init_params(np.random.default_rng(19))
    adam = AdamState.for_params(params)
    r = np.random.default_rng(20)
    x, y = toy_set()
    for _ in range(200):
        params, adam, _ = train_step(model, params, adam, x, y, r)
    logits, _ = model.encode(params, x)
    assert float(softmax_cross_entropy(logits, y).value) < 0.1


# ---------------------------------------------------------------- predict


def test_predict_argmax_and_ties():
    logits = np.zeros((2, 8))
    logits[0, 3] = 5
    np.testing.assert_array_equal(predict_from_logits(logits), [3, 0])
    tied = np.zeros((1, 8))
    tied[0, [2, 6]] = 1.0
    assert predict_from_logits(tied)[0] == 2


def test_batch_predict_equals_per_image(default_model):
    m, p = default_model
    x = np.random.default_rng(21).random((6, 1, 64, 64), dtype=np.float32)
    batch = predict(m, p, x)
    single = [predict(m, p, x[i:i + 1])[0] for i in range(6)]
    np.testing.assert_array_equal(batch, single)


# ---------------------------------------------------------------- checkpoints


@pytest.fixture
def trained_small():
    model = Model(SMALL)
    params = model.init_params(np.random.default_rng(22))
    adam = AdamState.for_params(params)
    x, y = toy_set(8)
    r = np.random.default_rng(23)
    for _ in range(3):
        params, adam, _ = train_step(model, params, adam, x, y, r)
    return model, params, adam


def test_checkpoint_round_trip_is_byte_identical(tmp_path, trained_small):
    model, params, adam = trained_small
    a, b = tmp_path / "a.dbvw", tmp_path / "b.dbvw"
    save_checkpoint(params, model.config, adam, a, seed=42)
    state = load_checkpoint(a)
    save_checkpoint(state.params, state.config, state.adam, b, seed=state.seed)
    assert a.read_bytes() == b.read_bytes()
    assert state.seed == 42 and state.adam.step == 3 and state.config == model.config


def test_checkpoint_predictions_survive_reload(tmp_path, trained_small):
    model, params, adam = trained_small
    save_checkpoint(params, model.config, adam, tmp_path / "c.dbvw")
    state = load_checkpoint(tmp_path / "c.dbvw")
    x = np.random.default_rng(24).random((100, 1, 16, 16), dtype=np.float32)
    np.testing.assert_array_equal(predict(model, params, x), predict(Model(state.config), state.params, x))


def test_checkpoint_errors(trained_small):
    model, params, adam = trained_small
    data = checkpoint_bytes(params, model.config, adam)
    assert data[:4] == b"DBVW"
    with pytest.raises(BadMagicError):
        parse_checkpoint(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        parse_checkpoint(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(TruncatedCheckpointError):
        parse_checkpoint(data[:-5])

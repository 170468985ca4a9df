import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fdd import diffusion, forest, nn, rfae, synth
from oracles import finite_difference_grads, max_rel_error


def _moons_pipeline(n=200, noise=0.05, n_trees=80, t=4, seed_data=1, seed_forest=2):
    X, y = synth.make_two_moons(n, noise=noise, seed=seed_data)
    f = forest.fit_forest(X, y, forest.ForestConfig(n_trees=n_trees, seed=seed_forest))
    K = forest.proximity_matrix(f)
    op = diffusion.operator_from_proximity(K)
    coords = diffusion.potential_coordinates(op, t, 2)
    return X, y, K, coords


def _one_nn_agreement(Z, y):
    d2 = diffusion.pairwise_sq_dists(Z)
    np.fill_diagonal(d2, np.inf)
    return (y[np.argmin(d2, axis=1)] == y).mean()


# ---------------------------------------------------------------------------
# KL reconstruction
# ---------------------------------------------------------------------------


def test_kl_zero_for_identical_distributions():
    p = np.array([0.2, 0.3, 0.5])
    assert rfae.kl_reconstruction(p, p) == 0.0


def test_kl_closed_form_log_two():
    assert rfae.kl_reconstruction(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(
        math.log(2.0), abs=1e-12
    )


def test_kl_zero_log_zero_convention():
    p = np.array([0.0, 1.0])
    p_hat = np.array([0.3, 0.7])
    assert rfae.kl_reconstruction(p, p_hat) == pytest.approx(math.log(1.0 / 0.7), abs=1e-12)


def test_kl_infinite_support_mismatch_raises():
    with pytest.raises(ValueError, match="infinite"):
        rfae.kl_reconstruction(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_kl_nonnegative_random_pairs(seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(5))
    q = rng.dirichlet(np.ones(5))
    assert rfae.kl_reconstruction(p, q) >= -1e-12


# ---------------------------------------------------------------------------
# composite loss
# ---------------------------------------------------------------------------


def _tiny_model(lam, seed=0, n_prox=6, d=2, act="tanh"):
    enc = nn.Mlp([n_prox, 5, d], [act, "identity"], seed=seed)
    dec = nn.Mlp([d, 5, n_prox], [act, "identity"], seed=seed + 1)
    return rfae.RfaeModel(enc, dec, lam, d, n_prox, np.zeros(d), np.ones(d), input_scale=float(n_prox))


def test_loss_decomposes_into_terms():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(6), size=4)
    ZG = rng.normal(size=(4, 2))
    for lam in (0.0, 0.3, 1.0):
        model = _tiny_model(lam)
        total, kl, geo, _, _ = rfae.rfae_loss_and_grads(model, P, ZG)
        assert total == pytest.approx(lam * kl + (1 - lam) * geo, abs=1e-12)


def test_lambda_one_geometry_term_has_no_gradient():
    rng = np.random.default_rng(1)
    P = rng.dirichlet(np.ones(6), size=5)
    model = _tiny_model(1.0)
    _, _, _, enc_a, dec_a = rfae.rfae_loss_and_grads(model, P, rng.normal(size=(5, 2)))
    _, _, _, enc_b, dec_b = rfae.rfae_loss_and_grads(model, P, rng.normal(size=(5, 2)) + 100.0)
    for a, b in zip(enc_a + dec_a, enc_b + dec_b):
        assert np.array_equal(a, b)


def test_composite_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    P = rng.dirichlet(np.ones(6), size=4)
    ZG = rng.normal(size=(4, 2))
    for lam in (0.0, 0.5, 1.0):
        model = _tiny_model(lam, seed=3)
        params = model.encoder.params + model.decoder.params

        def loss():
            total, _, _, _, _ = rfae.rfae_loss_and_grads(model, P, ZG)
            return total

        _, _, _, enc_grads, dec_grads = rfae.rfae_loss_and_grads(model, P, ZG)
        fd = finite_difference_grads(loss, params, h=1e-5)
        assert max_rel_error(enc_grads + dec_grads, fd) < 1e-4


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_lambda_validation_and_alignment_checks():
    K = np.eye(4) * 0.0 + 0.25
    coords = np.zeros((4, 2))
    with pytest.raises(ValueError, match="lambda"):
        rfae.train_rfae(K, coords, lam=1.5)
    with pytest.raises(ValueError, match="align"):
        rfae.train_rfae(K, np.zeros((3, 2)), lam=0.5)


def test_lambda_zero_drives_latents_to_targets():
    X, y, K, coords = _moons_pipeline()
    cfg = rfae.RfaeConfig(
        epochs=800, lr_max=1e-2, batch_size=32, hidden=(64,),
        patience=10**9, val_fraction=0.0, seed=0,
    )
    model, log = rfae.train_rfae(K, coords, lam=0.0, config=cfg)
    P = rfae.renormalize_rows(K.K)
    ZG = (coords.Z - model.target_mean) / model.target_std
    z = rfae.encode(model, P)
    err = np.mean(np.sum((z - ZG) ** 2, axis=1))
    assert err < 1e-3, err
    # per-sample alignment: encoding of a training sample lands near its target
    assert np.median(np.linalg.norm(z - ZG, axis=1)) < 0.1


def test_trained_latents_separate_two_moons():
    X, y, K, coords = _moons_pipeline(noise=0.04, n_trees=120)
    cfg = rfae.RfaeConfig(epochs=600, lr_max=1e-2, patience=100, hidden=(128,), seed=0)
    model, _ = rfae.train_rfae(K, coords, lam=0.5, config=cfg)
    z = rfae.encode(model, rfae.renormalize_rows(K.K))
    assert _one_nn_agreement(z, y) >= 0.95


def test_encode_is_deterministic_for_identical_rows():
    X, y, K, coords = _moons_pipeline(n=120, n_trees=60)
    cfg = rfae.RfaeConfig(epochs=50, lr_max=3e-3, seed=0)
    model, _ = rfae.train_rfae(K, coords, lam=0.5, config=cfg)
    row = rfae.renormalize_rows(K.K)[10]
    a = rfae.encode(model, row)
    b = rfae.encode(model, row.copy())
    assert np.abs(a - b).max() < 1e-6


def test_encode_length_mismatch():
    model = _tiny_model(0.5)
    with pytest.raises(ValueError, match="length"):
        rfae.encode(model, np.ones(7) / 7)


def test_default_latent_dimension_is_two():
    assert rfae.RfaeConfig().latent_dim == 2


def test_decoder_emits_probability_rows():
    model = _tiny_model(0.5, seed=9)
    z = np.random.default_rng(4).normal(size=(8, 2))
    p_hat = rfae.decode(model, z)
    assert (p_hat > 0).all()
    assert np.abs(p_hat.sum(axis=1) - 1.0).max() < 1e-6


def test_training_log_matches_decomposition(tmp_path):
    X, y, K, coords = _moons_pipeline(n=100, n_trees=60)
    cfg = rfae.RfaeConfig(epochs=20, lr_max=3e-3, seed=0)
    model, log = rfae.train_rfae(K, coords, lam=0.4, config=cfg)
    for row in log:
        assert row.total == pytest.approx(0.4 * row.kl + 0.6 * row.geo, abs=1e-9)
    path = tmp_path / "log.csv"
    rfae.write_training_log(log, path)
    assert path.read_text().startswith("epoch,total,kl,geo,lr\n")


# ---------------------------------------------------------------------------
# plain autoencoder baseline
# ---------------------------------------------------------------------------


def test_plain_ae_rank_limited_embeddings_reconstruct():
    rng = np.random.default_rng(3)
    E = rng.normal(size=(200, 2)) @ rng.normal(size=(2, 10))
    cfg = rfae.RfaeConfig(epochs=1000, lr_max=1e-2, hidden=(64,), patience=10**9, val_fraction=0.0, seed=0)
    _, mse = rfae.train_plain_ae(E, 2, cfg)
    assert mse < 1e-4, mse


def test_plain_ae_near_constant_embeddings_tiny_mse():
    rng = np.random.default_rng(5)
    E = 0.01 * rng.normal(size=(120, 8))
    cfg = rfae.RfaeConfig(epochs=150, lr_max=3e-3, hidden=(16,), seed=0)
    _, mse = rfae.train_plain_ae(E, 2, cfg)
    assert mse < 1e-3


def test_plain_ae_mse_grows_with_intrinsic_dimension():
    rng = np.random.default_rng(6)
    low = rng.normal(size=(150, 2)) @ rng.normal(size=(2, 12))
    high = rng.normal(size=(150, 8)) @ rng.normal(size=(8, 12))
    cfg = rfae.RfaeConfig(epochs=300, lr_max=3e-3, hidden=(32,), patience=10**9, val_fraction=0.0, seed=0)
    _, mse_low = rfae.train_plain_ae(low, 2, cfg)
    _, mse_high = rfae.train_plain_ae(high, 2, cfg)
    assert mse_high > mse_low


def test_plain_ae_latent_dim_guard():
    with pytest.raises(ValueError, match="latent dim"):
        rfae.train_plain_ae(np.zeros((10, 4)), 4)

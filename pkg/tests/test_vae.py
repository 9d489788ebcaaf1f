"""VAE objective, training loop determinism/resume, and the basic-ability
metrics (reconstruction, prior validity, uniqueness, novelty)."""

import math

import numpy as np
import pytest

import dagspace.autodiff as ad
from dagspace import dag as dg
from dagspace import encoder as enc
from dagspace import vae
from dagspace.autodiff import Tensor


def tiny_config(**kw):
    base = dict(domain=dg.DOMAIN_BN, hidden=12, latent=4, epochs=3,
                batch_size=4, lr=1e-3, seed=0)
    base.update(kw)
    return vae.TrainConfig(**base)


def tiny_dataset(n=10, seed=0):
    return [dg.random_bn_dag(np.random.default_rng([seed, i]))
            for i in range(n)]


# ---------------------------------------------------------------------------
# Config


def test_config_validation():
    with pytest.raises(ValueError):
        vae.TrainConfig(alpha=0.0)
    with pytest.raises(ValueError):
        vae.TrainConfig(lr_decay=1.0)


def test_bidirectional_defaults_per_domain():
    assert vae.TrainConfig(domain=dg.DOMAIN_NN).bidirectional is True
    assert vae.TrainConfig(domain=dg.DOMAIN_BN).bidirectional is False
    assert vae.TrainConfig(domain=dg.DOMAIN_BN, bidirectional=True).bidirectional is True


def test_config_json_round_trip():
    c = tiny_config(alpha=0.1, bidirectional=True)
    assert vae.TrainConfig.from_json_obj(c.to_json_obj()) == c


# ---------------------------------------------------------------------------
# Objective


def test_kld_closed_form_matches_formula():
    rng = np.random.default_rng(0)
    mu = rng.normal(size=(3, 5))
    logvar = rng.normal(size=(3, 5))
    expected = 0.5 * np.sum(np.exp(logvar) + mu ** 2 - 1.0 - logvar)
    with ad.no_grad():
        got = float(vae.kld_standard_normal(mu, logvar).data)
    assert abs(got - expected) < 1e-12


def test_kld_zero_at_standard_normal():
    with ad.no_grad():
        assert float(vae.kld_standard_normal(np.zeros((2, 4)),
                                             np.zeros((2, 4))).data) == 0.0


def test_kld_matches_monte_carlo_small():
    """Spot MC check at modest sample count; the full-tolerance version
    runs in the acceptance suite."""
    rng = np.random.default_rng(1)
    mu = np.array([[0.7, -0.3]])
    logvar = np.array([[0.5, -1.0]])
    z = mu + np.exp(logvar / 2) * rng.standard_normal((200_000, 2))
    # KL = E_q[log q(z) - log p(z)]
    logq = -0.5 * (((z - mu) ** 2) / np.exp(logvar) + logvar + math.log(2 * math.pi))
    logp = -0.5 * (z ** 2 + math.log(2 * math.pi))
    mc = float((logq - logp).sum(axis=1).mean())
    with ad.no_grad():
        closed = float(vae.kld_standard_normal(mu, logvar).data)
    assert abs(mc - closed) < 2e-2


def test_kld_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        vae.kld_standard_normal(np.zeros((1, 3)), np.zeros((1, 4)))


def test_reparameterize_mean_and_scale():
    mu = Tensor(np.array([[1.0, -2.0]]))
    logvar = Tensor(np.array([[0.0, 2.0]]))
    with ad.no_grad():
        at_zero = vae.reparameterize(mu, logvar, np.zeros((1, 2)))
        np.testing.assert_array_equal(at_zero.data, mu.data)
        shifted = vae.reparameterize(mu, logvar, np.ones((1, 2)))
    np.testing.assert_allclose(shifted.data - mu.data,
                               [[1.0, math.e]], rtol=1e-12)


def test_reparameterize_clamps_extreme_logvar():
    with ad.no_grad():
        out = vae.reparameterize(Tensor(np.zeros((1, 1))),
                                 Tensor(np.full((1, 1), 50.0)),
                                 np.ones((1, 1)))
    assert out.data[0, 0] == pytest.approx(math.exp(5.0))


def test_elbo_components_add_up():
    config = tiny_config()
    model = vae.Model.build(config)
    dags = tiny_dataset(3)
    eps = np.random.default_rng(2).standard_normal((3, config.latent))
    with ad.no_grad():
        loss, nll, kld = vae.elbo_loss_batch(dags, model, eps, config.alpha)
    assert float(loss.data) == pytest.approx(nll + config.alpha * kld, rel=1e-12)
    assert nll > 0 and kld >= 0


# ---------------------------------------------------------------------------
# Training loop


def test_train_rejects_bad_input():
    config = tiny_config()
    with pytest.raises(ValueError, match="empty"):
        vae.train([], config)
    bad = dg.make_dag([dg.BN_VOCAB.index("A")] * 2, [], dg.DOMAIN_BN)
    with pytest.raises(ValueError, match="invalid"):
        vae.train([bad], config)


def test_train_reduces_loss_and_is_deterministic():
    data = tiny_dataset(12)
    config = tiny_config(epochs=5)
    _, hist1 = vae.train(data, config)
    _, hist2 = vae.train(data, config)
    assert hist1 == hist2
    assert len(hist1) == 5
    assert hist1[-1] < hist1[0]


def test_plateau_schedule_decays_lr():
    config = tiny_config(plateau_patience=3, lr_decay=0.5)
    state = vae.init_train_state(tiny_dataset(4), config)
    lr0 = state.adam.lr
    vae._update_schedule(state, config, 10.0)  # improvement
    for _ in range(3):
        vae._update_schedule(state, config, 10.0)  # stagnation
    assert state.adam.lr == pytest.approx(lr0 * 0.5)
    assert state.epochs_since_improvement == 0


def test_checkpoint_resume_equals_uninterrupted(tmp_path):
    """Train 4 epochs straight vs 2 + checkpoint + resume 2: byte-identical
    parameters and identical loss history."""
    data = tiny_dataset(8)
    full = tiny_config(epochs=4)
    model_a, hist_a = vae.train(data, full)

    half = tiny_config(epochs=2)
    state = vae.init_train_state(data, half)
    vae.train(data, half, state)
    path = tmp_path / "ck.json"
    vae.save_train_checkpoint(path, state, half)

    resumed, config_b = vae.load_train_checkpoint(path)
    config_b.epochs = 4
    model_b, hist_b = vae.train(data, config_b, resumed)

    assert hist_a == hist_b
    for pa, pb in zip(model_a.parameters(), model_b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)


def test_checkpoint_round_trip_preserves_model_outputs(tmp_path):
    data = tiny_dataset(6)
    config = tiny_config(epochs=1)
    state = vae.init_train_state(data, config)
    vae.train(data, config, state)
    path = tmp_path / "ck.json"
    vae.save_train_checkpoint(path, state, config)
    model = vae.load_model(path)
    d = data[0]
    a = enc.encode(d, state.model.encoder, state.model.vocab)
    b = enc.encode(d, model.encoder, model.vocab)
    np.testing.assert_array_equal(a.mu, b.mu)
    np.testing.assert_array_equal(a.logvar, b.logvar)
    assert model.node_cap == state.model.node_cap


# ---------------------------------------------------------------------------
# Metrics


def test_metric_key_strips_endpoints_and_relabels():
    d = dg.random_bn_dag(np.random.default_rng(0))
    wrapped = dg.with_virtual_endpoints(d, dg.BN_VOCAB)
    assert vae.metric_key(wrapped, dg.BN_VOCAB) == vae.metric_key(d, dg.BN_VOCAB)


def test_metric_reconstruction_perfect_decoder_scores_one():
    config = tiny_config()
    model = vae.Model.build(config)
    test_set = tiny_dataset(3, seed=5)
    holder = {}
    model.decode = lambda z, rng: holder["d"]

    def run():
        total = 0.0
        rng = np.random.default_rng(0)
        for d in test_set:
            holder["d"] = d
            total += vae.metric_reconstruction(model, [d], rng, n_z=2, n_decode=2)
        return total / len(test_set)

    assert run() == 1.0


def test_rescale_prior_samples_stats():
    rng = np.random.default_rng(3)
    train_mus = rng.normal(loc=2.0, scale=3.0, size=(500, 4))
    zs = rng.standard_normal((20_000, 4))
    out = vae.rescale_prior_samples(zs, train_mus)
    np.testing.assert_allclose(out.mean(axis=0), train_mus.mean(axis=0), atol=0.15)
    np.testing.assert_allclose(out.std(axis=0), train_mus.std(axis=0), rtol=0.05)


def test_metric_prior_validity_counts_consistent():
    config = tiny_config()
    model = vae.Model.build(config)
    train_mus = np.random.default_rng(4).normal(size=(20, config.latent))
    frac, valid = vae.metric_prior_validity(model, train_mus,
                                            np.random.default_rng(5),
                                            n_z=20, n_decode=3)
    assert frac == pytest.approx(len(valid) / 60)
    for d in valid:
        assert dg.is_valid(d, model.vocab)


def test_metric_unique_novel_hand_case():
    a = dg.random_bn_dag(np.random.default_rng(0))
    b = dg.random_bn_dag(np.random.default_rng(1))
    assert vae.metric_key(a, dg.BN_VOCAB) != vae.metric_key(b, dg.BN_VOCAB)
    decodes = [a, a, b]
    training_keys = {vae.metric_key(a, dg.BN_VOCAB)}
    uniq, novel = vae.metric_unique_novel(decodes, training_keys, dg.BN_VOCAB)
    assert uniq == pytest.approx(2 / 3)
    assert novel == pytest.approx(1 / 3)
    assert vae.metric_unique_novel([], set(), dg.BN_VOCAB) == (None, None)


def test_evaluate_basic_report_fields():
    config = tiny_config()
    model = vae.Model.build(config)
    train = tiny_dataset(5)
    report = vae.evaluate_basic(model, train, train[:2], seed=0, n_prior=5)
    obj = report.to_json_obj()
    assert set(obj) == {"reconstruction", "prior_validity", "uniqueness",
                        "novelty", "invalid_prior_decodes"}
    assert 0.0 <= report.reconstruction <= 1.0
    assert 0.0 <= report.prior_validity <= 1.0
    assert report.invalid_prior_decodes == 50 - round(report.prior_validity * 50)

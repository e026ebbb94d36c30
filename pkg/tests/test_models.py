import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from davam import autodiff as ad
from davam import models as M
from davam import prior as pr
from davam import quantizer as Q
from davam.autodiff import Tensor
from davam.corpus import BOS, EOS, PAD
from davam.errors import ConfigError, ContractError, NumericDomainError
from davam.seqnet import attention, decoder_lstm_step, output_logits, zero_state
from davam.train import Adam

from toys import TOY_SENTENCES, tiny_model, toy_batch, toy_vocab


def _gkl(mu, sigma, mu_hat, sigma_hat):
    return float(M.gaussian_kl(M.GaussianPosterior(Tensor(mu), Tensor(sigma)),
                               pr.GaussianPriorStep(Tensor(mu_hat), Tensor(sigma_hat))).data)


# -- KL terms --------------------------------------------------------------------------

def test_gaussian_kl_examples():
    rng = np.random.default_rng(0)
    mu, sigma = rng.normal(size=(3, 2)), rng.uniform(0.5, 2, size=(3, 2))
    assert abs(_gkl(mu, sigma, mu, sigma)) < 1e-12
    one = np.ones((1, 1))
    assert _gkl(one, one, np.zeros((1, 1)), one) == pytest.approx(0.5, abs=1e-15)


def test_gaussian_kl_monte_carlo_small():
    rng = np.random.default_rng(1)
    mu, sigma = rng.normal(size=(2, 3)), rng.uniform(0.5, 1.5, size=(2, 3))
    mu_hat, sigma_hat = rng.normal(size=(2, 3)), rng.uniform(0.5, 1.5, size=(2, 3))
    n = 200_000
    x = mu + sigma * rng.standard_normal((n, 2, 3))
    logq = -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma)
    logp = -0.5 * ((x - mu_hat) / sigma_hat) ** 2 - np.log(sigma_hat)
    samples = (logq - logp).sum(axis=(1, 2))
    se = samples.std() / math.sqrt(n)
    assert abs(_gkl(mu, sigma, mu_hat, sigma_hat) - samples.mean()) < 3 * se


@given(st.integers(0, 100_000))
def test_gaussian_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    mu, mu_hat = rng.normal(size=(4, 3)) * 3, rng.normal(size=(4, 3)) * 3
    s, s_hat = np.exp(rng.normal(size=(4, 3))), np.exp(rng.normal(size=(4, 3)))
    assert _gkl(mu, s, mu_hat, s_hat) >= 0.0


def test_gaussian_kl_rejects_bad_scale():
    z = np.zeros((1, 1))
    with pytest.raises(NumericDomainError):
        _gkl(z, z, z, np.ones((1, 1)))


def test_gaussian_kl_masked_batch():
    rng = np.random.default_rng(2)
    mu, s = rng.normal(size=(2, 3, 2)), rng.uniform(0.5, 1, size=(2, 3, 2))
    mh, sh = rng.normal(size=(2, 3, 2)), rng.uniform(0.5, 1, size=(2, 3, 2))
    mask = np.array([[1, 1, 0], [1, 0, 0]])
    got = M.gaussian_kl(M.GaussianPosterior(Tensor(mu), Tensor(s)),
                        pr.GaussianPriorStep(Tensor(mh), Tensor(sh)), mask).data
    for b in range(2):
        n = int(mask[b].sum())
        assert got[b] == pytest.approx(_gkl(mu[b, :n], s[b, :n], mh[b, :n], sh[b, :n]), abs=1e-12)


def test_standard_normal_kl_zero_at_prior():
    assert float(ad.tsum(M.standard_normal_kl(Tensor(np.zeros((2, 3))), Tensor(np.ones((2, 3))))).data) == 0.0


def test_discrete_kl_examples():
    z = np.array([1, 0])
    assert float(M.discrete_kl(z, np.eye(2)[z]).data) == 0.0
    assert float(M.discrete_kl(z, np.full((2, 4), 0.25)).data) == pytest.approx(2 * math.log(4))
    assert 2 * math.log(4) == pytest.approx(2.772589, abs=1e-6)


def test_discrete_kl_floors_zero_probability(caplog):
    got = float(M.discrete_kl(np.array([0]), np.array([[0.0, 1.0]])).data)
    assert got == pytest.approx(-math.log(1e-10))
    assert "clamping" in caplog.text


def test_discrete_kl_has_no_encoder_or_decoder_gradient():
    model = tiny_model("davam")
    model.codebook_ready = True
    batch = toy_batch()
    model.registry.zero_grad()
    z = M.posterior_indices(batch, model)
    kl = ad.tsum(M.discrete_kl(z, pr.prior_forward(model.prior, z).gamma, batch.mask))
    kl.backward()
    for name, t in model.registry.group("phi", "theta").items():
        assert t.grad is None, name
    assert any(t.grad is not None for t in model.registry.group("psi").values())


# -- registry and container ---------------------------------------------------------------

def test_registry_rejects_duplicates_and_unknown_groups():
    reg = M.ParameterRegistry()
    reg.add("phi", {"a": Tensor(np.zeros(1))})
    with pytest.raises(ContractError):
        reg.add("theta", {"a": Tensor(np.zeros(1))})
    with pytest.raises(ContractError):
        reg.add("omega", {"b": Tensor(np.zeros(1))})


def test_unknown_kind():
    with pytest.raises(ConfigError):
        tiny_model("transformer")


@pytest.mark.parametrize("kind", M.KINDS)
def test_groups_partition_parameters(kind):
    model = tiny_model(kind)
    names = set(model.registry)
    groups = [set(model.registry.group(g)) for g in M.GROUPS]
    assert set().union(*groups) == names
    assert sum(len(g) for g in groups) == len(names)
    if kind in M.DISCRETE_KINDS:
        assert set(model.trainable("one")) == groups[0] | groups[1]
    assert set(model.trainable("two")) == groups[2]


@pytest.mark.parametrize("kind", M.KINDS)
def test_astype_and_state_roundtrip(kind):
    model = tiny_model(kind, dtype=np.float32)
    wide = model.astype(np.float64)
    for k, v in model.state_arrays().items():
        assert wide.state_arrays()[k].dtype == np.float64
        np.testing.assert_array_equal(wide.state_arrays()[k], v.astype(np.float64))
    other = tiny_model(kind, seed=9, dtype=np.float32)
    other.load_arrays(model.state_arrays())
    for k, v in model.state_arrays().items():
        assert np.array_equal(other.state_arrays()[k], v)


# -- reconstruction oracle ------------------------------------------------------------------

def _logsoftmax(x):
    m = x.max()
    return x - m - math.log(np.exp(x - m).sum())


def _rec_oracle(model, ids, values=None, const=None, init=None):
    """Unbatched step-by-step decoding with a numpy log-softmax."""
    states = model.initial_state(1, None if init is None else Tensor(init[None]))
    prev_h = states[-1][0]
    total = 0.0
    for i in range(len(ids) - 1):
        if values is not None:
            ctx = attention(Tensor(values), Tensor(prev_h.data[0]), None, model.attn).context
            ctx = Tensor(ctx.data[None])
        else:
            ctx = None if const is None else Tensor(const[None])
        prev_h, states = decoder_lstm_step(np.array([ids[i]]), ctx, states, model.decoder)
        logits = output_logits(prev_h, ctx, model.decoder).data[0]
        total -= _logsoftmax(logits)[ids[i + 1]]
    return total


@pytest.mark.parametrize("kind", M.KINDS)
def test_rec_matches_independent_oracle(kind):
    model = tiny_model(kind, seed=3)
    vocab = toy_vocab()
    sents = TOY_SENTENCES[:3]
    batch = toy_batch(sents, vocab)
    if kind in M.DISCRETE_KINDS:
        model.codebook_ready = True
    if kind in ("gavam", "vae"):
        fwd = (M.gavam_forward if kind == "gavam" else M.vae_forward)
        lb = fwd(batch, model, deterministic=True)
    else:
        lb = M.stage_one_loss(batch, model, beta=0.25)
    with ad.no_grad():
        for b, s in enumerate(sents):
            ids = vocab.encode(s)
            one = toy_batch([s], vocab)
            h = model.encoder_states(one) if kind != "lstm_lm" else None
            if kind == "davam":
                hl = model.to_latent(h).data[0]
                ref = _rec_oracle(model, ids, values=model.book.codes[Q.nearest_codes(hl, model.book.codes)])
            elif kind == "davam_q":
                hl = model.to_latent(h).data[0, -1]
                e = model.book.codes[Q.nearest_codes(hl[None], model.book.codes)[0]]
                ref = _rec_oracle(model, ids, const=e, init=e)
            elif kind == "gavam":
                ref = _rec_oracle(model, ids, values=model.mu_head(h).data[0])
            elif kind == "vae":
                mu = model.mu_head(h).data[0, -1]
                ref = _rec_oracle(model, ids, const=mu, init=mu)
            else:
                ref = _rec_oracle(model, ids)
            assert lb.rec_per_sentence[b] == pytest.approx(ref, abs=1e-8), (kind, b)


# -- DAVAM ----------------------------------------------------------------------------------

def test_davam_beta_zero_codes_equal_states_gives_rec():
    model = tiny_model("davam", K=32)
    batch = toy_batch(TOY_SENTENCES[:3])
    with ad.no_grad():
        h = model.to_latent(model.encoder_states(batch)).data
    rows = h[batch.mask]
    codes = np.concatenate([rows, model.book.codes[len(rows):]])
    model.book = Q.CodeBook.from_codes(codes)
    model.codebook_ready = True
    q = M.davam_forward(batch, model, beta=0.0)
    cont = M.davam_forward(batch, model, beta=0.0, quantize_latents=False)
    assert float(q.total.data) == pytest.approx(q.rec, abs=1e-12)
    np.testing.assert_array_equal(q.rec_per_sentence, cont.rec_per_sentence)


def test_davam_commitment_matches_quantizer():
    model = tiny_model("davam")
    model.codebook_ready = True
    batch = toy_batch()
    lb = M.davam_forward(batch, model, beta=0.7)
    h = lb.extras["h"]
    e = model.book.codes[lb.extras["z"]]
    per = 0.7 * (((h - e) ** 2).sum(-1) * batch.mask).sum(-1)
    assert lb.commit == pytest.approx(per.mean(), abs=1e-12)
    assert float(lb.total.data) == pytest.approx(lb.rec + lb.commit, abs=1e-12)
    assert lb.kl == 0.0


def test_davam_total_invariant_to_batch_order():
    model = tiny_model("davam", seed=1)
    model.codebook_ready = True
    sents = TOY_SENTENCES[:4]
    a = M.davam_forward(toy_batch(sents), model, 0.3)
    b = M.davam_forward(toy_batch(sents[::-1]), model, 0.3)
    assert float(a.total.data) == pytest.approx(float(b.total.data), abs=1e-12)


def test_davam_grad_check_frozen_indices(monkeypatch):
    # With frozen indices the snapped values do not move with h, so finite
    # differences cannot see the straight-through path. Replacing the snap by
    # h + (e - h_0) keeps the forward value at the base point and makes the
    # straight-through gradient the true one.
    model = tiny_model("davam", seed=2)
    model.codebook_ready = True
    batch = toy_batch()
    z = M.posterior_indices(batch, model)
    with ad.no_grad():
        h0 = model.to_latent(model.encoder_states(batch)).data
    offset = Tensor(model.book.codes[z] - h0)
    monkeypatch.setattr(M, "quantize", lambda h, book, indices=None: (z, h + offset))
    params = model.trainable("one")
    report = ad.grad_check(lambda: M.davam_forward(batch, model, 0.5).total, params)
    assert report.max_rel_error < 1e-4, sorted(report.per_parameter.items(), key=lambda kv: -kv[1])[:3]


def test_davam_loss_decreases_on_toy_corpus():
    vocab = toy_vocab()
    sents = (TOY_SENTENCES * 3)[:20]
    batch = toy_batch(sents, vocab)
    model = tiny_model("davam", seed=0, hidden_dim=8, latent_dim=4)
    with ad.no_grad():
        h = model.to_latent(model.encoder_states(batch)).data[batch.mask]
    model.book = Q.kmeans_init(h, 16, iters=5)
    model.codebook_ready = True
    params = list(model.trainable("one").values())
    opt = Adam(params, 0.02)
    losses = []
    for _ in range(50):
        model.registry.zero_grad()
        lb = M.davam_forward(batch, model, beta=0.25)
        lb.total.backward()
        opt.step()
        Q.ema_update(model.book, lb.extras["h"][batch.mask], lb.extras["z"][batch.mask])
        losses.append(float(lb.total.data))
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")[::10]
    assert np.all(np.diff(smooth) < 0), smooth


# -- DAVAM-q, GAVAM, VAE, LM -----------------------------------------------------------------

def test_davam_q_single_commitment_term():
    model = tiny_model("davam_q")
    model.codebook_ready = True
    batch = toy_batch()
    lb = M.davam_q_forward(batch, model, beta=1.0)
    assert lb.extras["z"].shape == (2,)
    h, e = lb.extras["h"], model.book.codes[lb.extras["z"]]
    assert lb.commit == pytest.approx(((h - e) ** 2).sum(-1).mean(), abs=1e-12)


def test_davam_q_empty_sentence_finite():
    model = tiny_model("davam_q")
    model.codebook_ready = True
    lb = M.davam_q_forward(toy_batch([""]), model, beta=1.0)
    assert np.isfinite(lb.rec) and lb.n_predicted == 1


def test_gavam_seeded_and_kl_consistent():
    model = tiny_model("gavam")
    batch = toy_batch()
    a = M.gavam_forward(batch, model, noise_seed=4)
    b = M.gavam_forward(batch, model, noise_seed=4)
    assert float(a.total.data) == float(b.total.data)
    z = Tensor(a.extras["z"])
    post = M.GaussianPosterior(Tensor(a.extras["mu"]), Tensor(a.extras["sigma"]))
    kl = M.gaussian_kl(post, pr.gaussian_prior_step(model.gprior, z), batch.mask).data
    np.testing.assert_array_equal(kl, a.kl_per_sentence)


def test_gavam_collapsed_posterior_is_deterministic():
    model = tiny_model("gavam")
    model.sigma_head.W.data[:] = 0.0
    model.sigma_head.b.data[:] = -60.0
    batch = toy_batch()
    a = M.gavam_forward(batch, model, noise_seed=1)
    b = M.gavam_forward(batch, model, noise_seed=2)
    np.testing.assert_allclose(a.extras["z"], a.extras["mu"], atol=1e-5)
    np.testing.assert_allclose(a.extras["z"], b.extras["z"], atol=1e-5)


def test_gavam_trains_prior_jointly():
    model = tiny_model("gavam")
    model.registry.zero_grad()
    M.gavam_forward(toy_batch(), model, noise_seed=0).total.backward()
    assert set(model.trainable("one")) == set(model.registry)
    assert all(t.grad is not None for t in model.registry.group("psi").values())


def test_vae_anneal_zero_and_prior_match():
    model = tiny_model("vae")
    batch = toy_batch()
    lb = M.vae_forward(batch, model, anneal_weight=0.0, noise_seed=0)
    assert float(lb.total.data) == pytest.approx(lb.rec, abs=1e-12)
    lb1 = M.vae_forward(batch, model, anneal_weight=1.0, noise_seed=0)
    assert float(lb1.total.data) == pytest.approx(lb1.rec + lb1.kl, abs=1e-12)


def test_lstm_lm_uniform_logits():
    model = tiny_model("lstm_lm")
    model.decoder.out.W.data[:] = 0.0
    model.decoder.out.b.data[:] = 0.0
    batch = toy_batch()
    lb = M.lstm_lm_forward(batch, model)
    V = model.dims.vocab_size
    per_token = lb.rec_per_sentence.sum() / lb.n_predicted
    assert per_token == pytest.approx(math.log(V), abs=1e-12)


def test_forward_kind_mismatch():
    with pytest.raises(ConfigError):
        M.davam_forward(toy_batch(), tiny_model("gavam"), 0.1)


# -- free-running decoding ---------------------------------------------------------------------

def test_sample_decode_respects_caps_and_markers():
    model = tiny_model("lstm_lm", seed=5)
    out = M.sample_decode(model, 20, np.arange(1, 21), np.random.default_rng(0))
    for i, ids in enumerate(out):
        assert len(ids) <= i + 1
        assert not ({PAD, BOS, EOS} & set(ids))
    again = M.sample_decode(model, 20, np.arange(1, 21), np.random.default_rng(0))
    assert out == again

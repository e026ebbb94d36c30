"""Model assemblies and their losses.

Kinds:

* ``davam``   - per-step encoder states snapped to a code book, attention over
                the quantised sequence, categorical autoregressive prior.
* ``davam_q`` - only the last encoder state is quantised; its code is the
                decoder's initial state and a constant per-step input.
* ``gavam``   - Gaussian per-step latents, attention over samples, Gaussian
                autoregressive prior trained jointly.
* ``vae``     - one Gaussian latent from the last state, N(0, I) prior.
* ``lstm_lm`` - the decoder alone.

All losses are per-sentence sums over tokens (nats); ``LossBreakdown``
reports their mean over the sentences of the batch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from davam import autodiff as ad
from davam import prior as pr
from davam.autodiff import Tensor
from davam.errors import ConfigError, ContractError, NumericDomainError
from davam.quantizer import CodeBook, commitment_loss, quantize
from davam.seqnet import (AttentionParams, DecoderParams, Linear, LstmParams, attention,
                          decoder_lstm_step, encode, output_logits, project_values, token_nll,
                          uniform_param, zero_state)

KINDS = ("davam", "davam_q", "gavam", "vae", "lstm_lm")
DISCRETE_KINDS = ("davam", "davam_q")
GROUPS = ("phi", "theta", "psi")
SIGMA_FLOOR = 1e-6


@dataclass
class ModelDims:
    vocab_size: int
    embed_dim: int = 128
    hidden_dim: int = 256
    latent_dim: int = 32
    attn_dim: int | None = None
    K: int = 512
    num_layers: int = 1
    prior_channels: int = 64
    prior_layers: int = 16
    prior_kernel: int = 3
    init_scale: float = 0.1

    def to_dict(self):
        return asdict(self)


class ParameterRegistry:
    """Named trainable tensors partitioned into the phi / theta / psi groups."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._group_of: dict[str, str] = {}

    def add(self, group: str, params: dict):
        if group not in GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        for name, t in params.items():
            if name in self._tensors:
                raise ContractError(f"parameter {name!r} registered twice")
            self._tensors[name] = t
            self._group_of[name] = group

    def __getitem__(self, name) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name):
        return name in self._tensors

    def __iter__(self):
        return iter(self._tensors)

    def items(self):
        return self._tensors.items()

    def group_of(self, name) -> str:
        return self._group_of[name]

    def group(self, *groups) -> dict[str, Tensor]:
        return {n: t for n, t in self._tensors.items() if self._group_of[n] in groups}

    def zero_grad(self):
        for t in self._tensors.values():
            t.grad = None


@dataclass
class LossBreakdown:
    total: Tensor  # what gets differentiated
    rec: float  # mean over sentences of summed token NLL
    kl: float
    commit: float
    rec_per_sentence: np.ndarray
    kl_per_sentence: np.ndarray
    n_predicted: int
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        return {"rec": self.rec, "kl": self.kl, "commit": self.commit,
                "total": float(self.total.data)}


@dataclass
class GaussianPosterior:
    mu: Tensor
    sigma: Tensor


# -- KL terms ------------------------------------------------------------------------

def gaussian_kl(post: GaussianPosterior, prior_step: pr.GaussianPriorStep, mask=None):
    """sum_t sum_d KL(N(mu, sigma^2) || N(mu_hat, sigma_hat^2)).

    Inputs (T, D) give a scalar; (B, T, D) with an optional (B, T) mask give
    a (B,) tensor of per-sentence sums.
    """
    mu, sigma = ad.as_tensor(post.mu), ad.as_tensor(post.sigma)
    mu_hat, sigma_hat = ad.as_tensor(prior_step.mu_hat), ad.as_tensor(prior_step.sigma_hat)
    if not (mu.shape == sigma.shape == mu_hat.shape == sigma_hat.shape):
        raise ContractError("posterior and prior shapes differ")
    if np.any(sigma.data <= 0) or np.any(sigma_hat.data <= 0):
        raise NumericDomainError("Gaussian KL needs strictly positive scales")
    var, var_hat = sigma * sigma, sigma_hat * sigma_hat
    diff = mu_hat - mu
    per_dim = 0.5 * (2.0 * (ad.log(sigma_hat) - ad.log(sigma)) - 1.0 + (var + diff * diff) / var_hat)
    per_step = ad.tsum(per_dim, axis=-1)
    if mask is not None:
        per_step = per_step * np.asarray(mask, dtype=mu.dtype)
    return ad.tsum(per_step, axis=-1)


def standard_normal_kl(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    zeros = Tensor(np.zeros(mu.shape, dtype=mu.dtype))
    ones = Tensor(np.ones(mu.shape, dtype=mu.dtype))
    post = GaussianPosterior(ad.reshape(mu, mu.shape[:-1] + (1, mu.shape[-1])),
                             ad.reshape(sigma, sigma.shape[:-1] + (1, sigma.shape[-1])))
    prior = pr.GaussianPriorStep(ad.reshape(zeros, post.mu.shape), ad.reshape(ones, post.mu.shape))
    return gaussian_kl(post, prior)


def discrete_kl(z, gamma, mask=None):
    """KL between the one-hot posterior on z and Cat(gamma): -sum_t log gamma_{t, z_t}.

    The posterior entropy term vanishes, so nothing here depends on encoder
    or decoder parameters.
    """
    return pr.categorical_nll(z, gamma, mask)


# -- model container --------------------------------------------------------------------

class Model:
    """Parameters of one model kind plus its code book and prior."""

    def __init__(self, kind: str, dims: ModelDims, seed: int = 0, dtype=np.float32):
        if kind not in KINDS:
            raise ConfigError(f"unknown model kind {kind!r}; expected one of {KINDS}")
        self.kind = kind
        self.dims = dims
        self.dtype = np.dtype(dtype)
        self.registry = ParameterRegistry()
        self.book: CodeBook | None = None
        self.prior = None
        self.gprior = None
        self.has_prior = False
        self.codebook_ready = False
        rng = np.random.default_rng(seed)
        d, s = dims, dims.init_scale
        H, L, E = d.hidden_dim, d.latent_dim, d.embed_dim

        self.enc_embed = self.enc_layers = None
        if kind != "lstm_lm":
            self.enc_embed = uniform_param(rng, (d.vocab_size, E), s, dtype)
            self.enc_layers = [LstmParams.init(rng, E if i == 0 else H, H, dtype, s)
                               for i in range(d.num_layers)]
            phi = {"enc.embed": self.enc_embed}
            for i, layer in enumerate(self.enc_layers):
                phi.update(layer.params(f"enc.lstm{i}"))
            if kind in DISCRETE_KINDS:
                self.to_latent = Linear.init(rng, H, L, dtype, s)
                phi.update(self.to_latent.params("enc.to_latent"))
            else:
                self.mu_head = Linear.init(rng, H, L, dtype, s)
                self.sigma_head = Linear.init(rng, H, L, dtype, s)
                phi.update(self.mu_head.params("enc.mu"))
                phi.update(self.sigma_head.params("enc.sigma"))
            self.registry.add("phi", phi)

        ctx = 0 if kind == "lstm_lm" else L
        self.decoder = DecoderParams.init(rng, d.vocab_size, E, H, ctx, d.num_layers, dtype, s)
        theta = self.decoder.params("dec")
        self.attn = self.init_proj = None
        if kind in ("davam", "gavam"):
            self.attn = AttentionParams.init(rng, L, H, d.attn_dim or H, dtype, s)
            theta.update(self.attn.params("attn"))
        if kind in ("davam_q", "vae"):
            self.init_proj = Linear.init(rng, L, H, dtype, s)
            theta.update(self.init_proj.params("dec.init"))
        self.registry.add("theta", theta)

        if kind in DISCRETE_KINDS:
            self.prior = pr.DiscretePrior.init(rng, d.K, d.prior_channels, d.prior_layers,
                                               d.prior_kernel, dtype)
            self.registry.add("psi", self.prior.params("prior"))
            self.book = CodeBook.random(d.K, L, seed=int(rng.integers(2**31)), dtype=dtype,
                                        scale=0.1)
        elif kind == "gavam":
            self.gprior = pr.GaussianPrior.init(rng, L, d.prior_channels, d.prior_layers,
                                                d.prior_kernel, dtype)
            self.registry.add("psi", self.gprior.params("gprior"))

    # -- parameter utilities ---------------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: t.data for name, t in self.registry.items()}
        if self.book is not None:
            out["codebook.codes"] = self.book.codes
            out["codebook.ema_counts"] = self.book.ema_counts
            out["codebook.ema_sums"] = self.book.ema_sums
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, t in self.registry.items():
            t.data = np.array(arrays[name], dtype=self.dtype)
        if self.book is not None:
            self.book.codes = np.array(arrays["codebook.codes"], dtype=self.dtype)
            self.book.ema_counts = np.array(arrays["codebook.ema_counts"], dtype=self.dtype)
            self.book.ema_sums = np.array(arrays["codebook.ema_sums"], dtype=self.dtype)

    def astype(self, dtype) -> "Model":
        """Copy with every tensor cast to ``dtype`` (used for float64 evaluation)."""
        rebuilt = Model(self.kind, self.dims, seed=0, dtype=dtype)
        rebuilt.load_arrays({k: v.astype(dtype) for k, v in self.state_arrays().items()})
        rebuilt.has_prior = self.has_prior
        rebuilt.codebook_ready = self.codebook_ready
        if self.book is not None:
            rebuilt.book.decay, rebuilt.book.eps = self.book.decay, self.book.eps
        return rebuilt

    def trainable(self, stage: str = "one") -> dict[str, Tensor]:
        if stage == "two":
            return self.registry.group("psi")
        if self.kind == "gavam":
            return self.registry.group("phi", "theta", "psi")
        return self.registry.group("phi", "theta")

    # -- building blocks ---------------------------------------------------------------
    def encoder_states(self, batch):
        return encode(batch.token_ids, self.enc_embed, self.enc_layers).h

    def last_states(self, batch, h):
        B = batch.size
        return h[np.arange(B), batch.lengths - 1]

    def gaussian_posterior(self, h) -> GaussianPosterior:
        return GaussianPosterior(self.mu_head(h), ad.softplus(self.sigma_head(h)) + SIGMA_FLOOR)

    def initial_state(self, batch_size, latent=None):
        states = zero_state(self.decoder.layers, batch_size, self.dtype)
        if latent is not None and self.init_proj is not None:
            h0 = ad.tanh(self.init_proj(latent))
            states[0] = (h0, states[0][1])
        return states

    def teacher_forced_rec(self, batch, values=None, values_mask=None, const_ctx=None,
                           init_latent=None):
        """Per-sentence reconstruction NLL (B,) with gold previous tokens."""
        ids = batch.token_ids
        B, T = ids.shape
        states = self.initial_state(B, init_latent)
        projected = project_values(values, self.attn) if values is not None else None
        prev_h = states[-1][0]
        hs, ctxs = [], []
        for i in range(T - 1):
            if values is not None:
                ctx = attention(values, prev_h, values_mask, self.attn, projected).context
            else:
                ctx = const_ctx
            prev_h, states = decoder_lstm_step(ids[:, i], ctx, states, self.decoder)
            hs.append(prev_h)
            ctxs.append(ctx)
        h_all = ad.stack(hs, axis=1)
        ctx_all = ad.stack(ctxs, axis=1) if ctxs[0] is not None else None
        logits = output_logits(h_all, ctx_all, self.decoder)
        return token_nll(logits, ids[:, 1:], batch.mask[:, 1:])


def _breakdown(rec_b, kl_b, commit_b, total, batch, **extras) -> LossBreakdown:
    rec_arr = np.asarray(rec_b.data, dtype=np.float64)
    kl_arr = np.zeros_like(rec_arr) if kl_b is None else np.asarray(
        kl_b.data if isinstance(kl_b, Tensor) else kl_b, dtype=np.float64)
    commit = 0.0 if commit_b is None else float(np.mean(commit_b.data))
    return LossBreakdown(total, float(rec_arr.mean()), float(kl_arr.mean()), commit,
                         rec_arr, kl_arr, batch.num_predicted(), extras)


def _check_kind(model, *kinds):
    if model.kind not in kinds:
        raise ConfigError(f"operation needs a {' or '.join(kinds)} model, got {model.kind}")


# -- forwards ---------------------------------------------------------------------------

def davam_forward(batch, model: Model, beta: float, indices=None, quantize_latents=None) -> LossBreakdown:
    """Stage-one objective: reconstruction + beta * commitment.

    Before the code book has been initialised (``model.codebook_ready`` is
    False) the continuous states are attended directly and no commitment is
    charged; ``extras['h']`` then supplies samples for K-means.
    """
    _check_kind(model, "davam")
    use_q = model.codebook_ready if quantize_latents is None else quantize_latents
    h = model.to_latent(model.encoder_states(batch))
    if use_q:
        z, values = quantize(h, model.book, indices)
        commit = commitment_loss(h, model.book, z, beta, batch.mask)
    else:
        z, values, commit = None, h, None
    rec = model.teacher_forced_rec(batch, values=values, values_mask=batch.mask)
    per = rec if commit is None else rec + commit
    total = ad.mean(per)
    return _breakdown(rec, None, commit, total, batch, z=z, h=h.data)


def davam_q_forward(batch, model: Model, beta: float, indices=None, quantize_latents=None) -> LossBreakdown:
    """Last encoder state only; its code seeds the decoder and is fed at every step."""
    _check_kind(model, "davam_q")
    use_q = model.codebook_ready if quantize_latents is None else quantize_latents
    h = model.to_latent(model.last_states(batch, model.encoder_states(batch)))
    if use_q:
        z, q = quantize(h, model.book, indices)
        commit = commitment_loss(ad.reshape(h, (h.shape[0], 1, h.shape[1])), model.book,
                                 z[:, None], beta)
    else:
        z, q, commit = None, h, None
    rec = model.teacher_forced_rec(batch, const_ctx=q, init_latent=q)
    per = rec if commit is None else rec + commit
    return _breakdown(rec, None, commit, ad.mean(per), batch, z=z, h=h.data)


def gavam_forward(batch, model: Model, noise_seed=None, deterministic=False) -> LossBreakdown:
    """Reconstruction + sum_t KL(q(z_t|x) || p(z_t|z_<t)); phi, theta, psi trained jointly.

    The prior is teacher-forced on the same latents the decoder attends to
    (samples in training, means when ``deterministic``).
    """
    _check_kind(model, "gavam")
    post = model.gaussian_posterior(model.encoder_states(batch))
    if deterministic:
        z = post.mu
    else:
        eps = np.random.default_rng(noise_seed).standard_normal(post.mu.shape).astype(model.dtype)
        z = post.mu + post.sigma * eps
    prior_step = pr.gaussian_prior_step(model.gprior, z)
    kl = gaussian_kl(post, prior_step, batch.mask)
    rec = model.teacher_forced_rec(batch, values=z, values_mask=batch.mask)
    return _breakdown(rec, kl, None, ad.mean(rec + kl), batch, z=z.data,
                      mu=post.mu.data, sigma=post.sigma.data)


def vae_forward(batch, model: Model, anneal_weight: float = 1.0, noise_seed=None,
                deterministic=False) -> LossBreakdown:
    """Single latent from the last state; total = rec + anneal_weight * KL(q || N(0, I))."""
    _check_kind(model, "vae")
    h = model.last_states(batch, model.encoder_states(batch))
    post = model.gaussian_posterior(h)
    if deterministic:
        z = post.mu
    else:
        eps = np.random.default_rng(noise_seed).standard_normal(post.mu.shape).astype(model.dtype)
        z = post.mu + post.sigma * eps
    kl = standard_normal_kl(post.mu, post.sigma)
    rec = model.teacher_forced_rec(batch, const_ctx=z, init_latent=z)
    total = ad.mean(rec + kl * float(anneal_weight))
    return _breakdown(rec, kl, None, total, batch, mu=post.mu.data, sigma=post.sigma.data)


def lstm_lm_forward(batch, model: Model) -> LossBreakdown:
    _check_kind(model, "lstm_lm")
    rec = model.teacher_forced_rec(batch)
    return _breakdown(rec, None, None, ad.mean(rec), batch)


def posterior_indices(batch, model: Model) -> np.ndarray:
    """Code indices of the frozen posterior: (B, T) for davam, (B, 1) for davam_q."""
    _check_kind(model, *DISCRETE_KINDS)
    with ad.no_grad():
        h = model.to_latent(model.encoder_states(batch))
        if model.kind == "davam_q":
            h = model.last_states(batch, h)
            z, _ = quantize(h, model.book)
            return z[:, None]
        z, _ = quantize(h, model.book)
        return z


def stage_one_loss(batch, model: Model, beta=0.0, anneal_weight=1.0, noise_seed=None) -> LossBreakdown:
    """Dispatch to the training objective of ``model.kind``."""
    if model.kind == "davam":
        return davam_forward(batch, model, beta)
    if model.kind == "davam_q":
        return davam_q_forward(batch, model, beta)
    if model.kind == "gavam":
        return gavam_forward(batch, model, noise_seed)
    if model.kind == "vae":
        return vae_forward(batch, model, anneal_weight, noise_seed)
    return lstm_lm_forward(batch, model)


# -- free-running decoding -----------------------------------------------------------------

def sample_decode(model: Model, n: int, max_steps, rng, temperature=1.0, values=None,
                  values_mask=None, const_ctx=None, init_latent=None) -> list[list[int]]:
    """Sample token ids step by step until EOS or ``max_steps`` (int or per-row array)."""
    from davam.corpus import BOS, EOS, PAD

    caps = np.broadcast_to(np.asarray(max_steps), (n,))
    with ad.no_grad():
        states = model.initial_state(n, init_latent)
        projected = project_values(values, model.attn) if values is not None else None
        prev_h = states[-1][0]
        prev = np.full(n, BOS, dtype=np.int64)
        out = [[] for _ in range(n)]
        done = np.zeros(n, dtype=bool)
        for step in range(int(caps.max())):
            if values is not None:
                ctx = attention(values, prev_h, values_mask, model.attn, projected).context
            else:
                ctx = const_ctx
            prev_h, states = decoder_lstm_step(prev, ctx, states, model.decoder)
            logits = output_logits(prev_h, ctx, model.decoder).data.astype(np.float64)
            logits[:, PAD] = -np.inf
            logits[:, BOS] = -np.inf
            tok = pr._draw(logits, temperature, rng)
            for b in range(n):
                if done[b]:
                    continue
                if tok[b] == EOS or step + 1 >= caps[b]:
                    done[b] = True
                    if tok[b] == EOS:
                        continue
                out[b].append(int(tok[b]))
            if done.all():
                break
            prev = tok
    return out

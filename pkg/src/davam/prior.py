"""Autoregressive priors over latent sequences.

Both priors share one topology: the input sequence is shifted right by one
position behind a learned start vector, then passed through a stack of
residual causal 1-D convolutions. Output position t therefore sees
z_1 .. z_{t-1} and nothing else.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from davam import autodiff as ad
from davam.autodiff import Tensor
from davam.errors import ContractError
from davam.seqnet import Linear, uniform_param, zeros_param

log = logging.getLogger(__name__)

NLL_FLOOR = 1e-10
SIGMA_FLOOR = 1e-6


@dataclass
class ConvLayer:
    W: Tensor  # (kernel, C, C)
    b: Tensor  # (C,)


@dataclass
class CausalConvStack:
    start: Tensor  # (C,)
    layers: list
    kernel: int

    @property
    def channels(self) -> int:
        return self.start.shape[0]

    @property
    def receptive_field(self) -> int:
        """Number of past latent positions an output can see."""
        return len(self.layers) * (self.kernel - 1) + 1

    @classmethod
    def init(cls, rng, channels=64, num_layers=16, kernel=3, dtype=np.float32):
        scale = 0.5 / math.sqrt(kernel * channels)
        layers = [
            ConvLayer(uniform_param(rng, (kernel, channels, channels), scale, dtype),
                      zeros_param((channels,), dtype))
            for _ in range(num_layers)
        ]
        return cls(uniform_param(rng, (channels,), 0.1, dtype), layers, kernel)

    def hidden(self, x):
        """x: (B, T, C) per-position inputs -> (B, T, C) features causal in z_{<t}."""
        B, T, C = x.shape
        start = ad.expand(ad.expand(self.start, 0, 1), 0, B)
        h = start if T == 1 else ad.concat([start, x[:, : T - 1]], axis=1)
        for layer in self.layers:
            h = h + ad.causal_conv1d(ad.relu(h), layer.W, layer.b)
        return ad.relu(h)

    def params(self, prefix):
        out = {f"{prefix}.start": self.start}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}.conv{i}.W"] = layer.W
            out[f"{prefix}.conv{i}.b"] = layer.b
        return out


@dataclass
class PriorOutput:
    gamma: Tensor  # (B, T, K) or (T, K)
    logits: Tensor


@dataclass
class DiscretePrior:
    """Categorical prior p(z_t | z_{<t}) = Cat(gamma_t)."""

    embed: Tensor  # (K, C)
    stack: CausalConvStack
    out: Linear  # C -> K

    @property
    def K(self) -> int:
        return self.embed.shape[0]

    @classmethod
    def init(cls, rng, K, channels=64, num_layers=16, kernel=3, dtype=np.float32):
        return cls(
            uniform_param(rng, (K, channels), 0.1, dtype),
            CausalConvStack.init(rng, channels, num_layers, kernel, dtype),
            Linear.init(rng, channels, K, dtype, scale=0.5 / math.sqrt(channels)),
        )

    def params(self, prefix="prior"):
        out = {f"{prefix}.embed": self.embed}
        out.update(self.stack.params(f"{prefix}.stack"))
        out.update(self.out.params(f"{prefix}.out"))
        return out

    def logits(self, z):
        z = np.asarray(z, dtype=np.int64)
        if z.size and (z.min() < 0 or z.max() >= self.K):
            raise ContractError(f"latent index out of range [0, {self.K})")
        return self.out(self.stack.hidden(ad.embedding(self.embed, z)))


def prior_forward(prior: DiscretePrior, z) -> PriorOutput:
    """gamma_t for every position of z, shape (T,) or (B, T)."""
    z = np.asarray(z, dtype=np.int64)
    single = z.ndim == 1
    logits = prior.logits(z[None] if single else z)
    gamma = ad.softmax(logits, axis=-1)
    if single:
        return PriorOutput(gamma[0], logits[0])
    return PriorOutput(gamma, logits)


def categorical_nll(z, gamma, mask=None, floor=NLL_FLOOR):
    """-sum_t log gamma_{t, z_t}; summed over the last axis of z.

    Probabilities below ``floor`` are clamped (and logged): an infinite value
    only means the prior is untrained.
    """
    gamma = ad.as_tensor(gamma)
    z = np.asarray(z, dtype=np.int64)
    lead = np.indices(z.shape)
    picked = gamma[tuple(lead) + (z,)]
    if np.any(picked.data < floor):
        log.warning("prior assigns probability < %g to an observed code; clamping", floor)
    logp = ad.log(ad.clamp_min(picked, floor))
    if mask is not None:
        logp = logp * np.asarray(mask, dtype=gamma.dtype)
    return -ad.tsum(logp, axis=-1)


def prior_nll(z, gamma, mask=None):
    """Stage-two objective: cross-entropy between observed codes and gamma."""
    return categorical_nll(z, gamma, mask)


def nll_from_logits(z, logits, mask=None):
    """Same quantity as :func:`prior_nll`, computed through log-softmax for training."""
    z = np.asarray(z, dtype=np.int64)
    logp = ad.log_softmax(logits, axis=-1)
    lead = np.indices(z.shape)
    picked = logp[tuple(lead) + (z,)]
    if mask is not None:
        picked = picked * np.asarray(mask, dtype=logits.dtype)
    return -ad.tsum(picked, axis=-1)


def sample_prior(prior: DiscretePrior, T: int, temperature: float = 1.0, seed=None, n=None):
    """Ancestral sampling of latent index sequences, left to right.

    ``temperature`` rescales logits; 0 means greedy argmax. Returns shape (T,)
    when ``n`` is None, else (n, T).
    """
    if T < 1:
        raise ContractError("sequence length must be at least 1")
    if temperature < 0:
        raise ContractError("temperature must be non-negative")
    rng = np.random.default_rng(seed)
    count = 1 if n is None else n
    z = np.zeros((count, T), dtype=np.int64)
    with ad.no_grad():
        for t in range(T):
            logits = prior.logits(z[:, : t + 1]).data[:, t].astype(np.float64)
            z[:, t] = _draw(logits, temperature, rng)
    return z[0] if n is None else z


def _draw(logits, temperature, rng):
    if temperature == 0:
        return np.argmax(logits, axis=-1)
    scaled = logits / temperature
    scaled -= scaled.max(axis=-1, keepdims=True)
    p = np.exp(scaled)
    p /= p.sum(axis=-1, keepdims=True)
    u = rng.random((p.shape[0], 1))
    idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1)


# -- Gaussian prior ----------------------------------------------------------------

@dataclass
class GaussianPriorStep:
    mu_hat: Tensor  # (..., D)
    sigma_hat: Tensor  # (..., D), positive


@dataclass
class GaussianPrior:
    """p(z_t | z_{<t}) = N(mu_hat_t, diag(sigma_hat_t^2)) from the same causal stack."""

    inp: Linear  # D -> C
    stack: CausalConvStack
    out: Linear  # C -> 2D

    @property
    def dim(self) -> int:
        return self.inp.W.shape[0]

    @classmethod
    def init(cls, rng, latent_dim, channels=64, num_layers=16, kernel=3, dtype=np.float32):
        return cls(
            Linear.init(rng, latent_dim, channels, dtype),
            CausalConvStack.init(rng, channels, num_layers, kernel, dtype),
            Linear.init(rng, channels, 2 * latent_dim, dtype, scale=0.5 / math.sqrt(channels)),
        )

    def params(self, prefix="gprior"):
        out = self.inp.params(f"{prefix}.inp")
        out.update(self.stack.params(f"{prefix}.stack"))
        out.update(self.out.params(f"{prefix}.out"))
        return out


def gaussian_prior_step(prior: GaussianPrior, z_prefix) -> GaussianPriorStep:
    """Prior parameters at every position of a continuous sequence.

    z_prefix: (B, T, D) or (T, D). Output row t depends on rows < t only; the
    next-step prediction after a prefix of length T-1 is the last row.
    """
    z_prefix = ad.as_tensor(z_prefix)
    single = z_prefix.ndim == 2
    x = ad.reshape(z_prefix, (1,) + z_prefix.shape) if single else z_prefix
    raw = prior.out(prior.stack.hidden(prior.inp(x)))
    D = prior.dim
    mu = raw[..., :D]
    sigma = ad.softplus(raw[..., D:]) + SIGMA_FLOOR
    if single:
        return GaussianPriorStep(mu[0], sigma[0])
    return GaussianPriorStep(mu, sigma)


def sample_gaussian_prior(prior: GaussianPrior, T: int, seed=None, n=1, dtype=np.float64):
    """Ancestral sampling of (n, T, D) continuous latents."""
    if T < 1:
        raise ContractError("sequence length must be at least 1")
    rng = np.random.default_rng(seed)
    z = np.zeros((n, T, prior.dim), dtype=dtype)
    with ad.no_grad():
        for t in range(T):
            step = gaussian_prior_step(prior, Tensor(z[:, : t + 1]))
            mu = step.mu_hat.data[:, t]
            sd = step.sigma_hat.data[:, t]
            z[:, t] = mu + sd * rng.standard_normal(mu.shape)
    return z

"""Code book, nearest-neighbour quantisation, K-means initialisation, EMA updates."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from davam import autodiff as ad
from davam.autodiff import Tensor
from davam.errors import ConfigError, ContractError

log = logging.getLogger(__name__)

EMA_DECAY = 0.99
EMA_EPS = 1e-5


@dataclass
class CodeBook:
    codes: np.ndarray  # (K, D)
    ema_counts: np.ndarray  # (K,)
    ema_sums: np.ndarray  # (K, D)
    decay: float = EMA_DECAY
    eps: float = EMA_EPS

    @property
    def K(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @classmethod
    def from_codes(cls, codes, counts=None, decay=EMA_DECAY, eps=EMA_EPS):
        codes = np.array(codes, copy=True)
        counts = np.ones(len(codes), dtype=codes.dtype) if counts is None else np.asarray(counts, dtype=codes.dtype)
        return cls(codes, counts.copy(), codes * counts[:, None], decay, eps)

    @classmethod
    def random(cls, K, dim, seed=0, dtype=np.float32, scale=1.0, **kw):
        rng = np.random.default_rng(seed)
        return cls.from_codes(rng.normal(0.0, scale, size=(K, dim)).astype(dtype), **kw)

    def copy(self) -> "CodeBook":
        return CodeBook(self.codes.copy(), self.ema_counts.copy(), self.ema_sums.copy(),
                        self.decay, self.eps)


def nearest_codes(h: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """argmin_j ||h_i - e_j||, smallest index on ties. Differences are formed
    explicitly so an exact match always has distance zero."""
    if codes.shape[0] == 0:
        raise ContractError("empty code book")
    if h.shape[-1] != codes.shape[1]:
        raise ContractError(f"dim mismatch: h {h.shape} vs codes {codes.shape}")
    flat = h.reshape(-1, h.shape[-1])
    out = np.empty(flat.shape[0], dtype=np.int64)
    step = max(1, 2_000_000 // max(1, codes.size))
    for s in range(0, flat.shape[0], step):
        diff = flat[s:s + step, None, :] - codes[None, :, :]
        out[s:s + step] = np.argmin(np.einsum("nkd,nkd->nk", diff, diff), axis=1)
    return out.reshape(h.shape[:-1])


def quantize(h, book: CodeBook, indices=None):
    """Snap each row of ``h`` (Tensor, (..., D)) to its nearest code.

    Returns (z, quantized) where z holds integer indices with the leading
    shape of h, and quantized carries the code values forward while the
    backward pass copies its gradient straight to h. Pass ``indices`` to
    reuse a fixed assignment.
    """
    h = ad.as_tensor(h)
    if book.K == 0:
        raise ContractError("empty code book")
    if h.shape[-1] != book.dim:
        raise ContractError(f"h dim {h.shape[-1]} != code dim {book.dim}")
    if h.data.size == 0:
        raise ContractError("nothing to quantize")
    z = nearest_codes(h.data, book.codes) if indices is None else np.asarray(indices, dtype=np.int64)
    e = Tensor(book.codes[z].astype(h.dtype, copy=False))
    return z, ad.straight_through(h, e)


def posterior_entropy(z) -> np.ndarray:
    """Entropy of the one-hot posterior at each position: identically zero."""
    z = np.asarray(z)
    return np.zeros(z.shape, dtype=np.float64)


def _lloyd_step(samples, codes, rng):
    assign = nearest_codes(samples, codes)
    K = codes.shape[0]
    counts = np.bincount(assign, minlength=K).astype(samples.dtype)
    sums = np.zeros_like(codes)
    np.add.at(sums, assign, samples)
    new = codes.copy()
    used = counts > 0
    new[used] = sums[used] / counts[used, None]
    for k in np.flatnonzero(~used):
        new[k] = samples[rng.integers(len(samples))]
    return new


def kmeans_objective(samples, codes) -> float:
    assign = nearest_codes(samples, codes)
    d = samples - codes[assign]
    return float(np.sum(d * d))


def kmeans_init(samples, K: int, iters: int = 10, seed=0, decay=EMA_DECAY, eps=EMA_EPS) -> CodeBook:
    """K distinct sampled rows refined by ``iters`` Lloyd iterations.

    Empty clusters are re-seeded from a random sample. EMA statistics start
    from the final cluster counts and sums.
    """
    samples = np.asarray(samples)
    N = samples.shape[0]
    if N < K:
        raise ContractError(f"kmeans_init needs at least K={K} samples, got {N}")
    rng = np.random.default_rng(seed)
    codes = samples[rng.choice(N, size=K, replace=False)].copy()
    for _ in range(iters):
        codes = _lloyd_step(samples, codes, rng)
    assign = nearest_codes(samples, codes)
    counts = np.bincount(assign, minlength=K).astype(samples.dtype)
    sums = np.zeros_like(codes)
    np.add.at(sums, assign, samples)
    return CodeBook(codes, counts, sums, decay, eps)


def ema_update(book: CodeBook, h, z) -> None:
    """In-place exponential moving average update of counts, sums and codes."""
    h = np.asarray(h.data if isinstance(h, Tensor) else h)
    flat_h = h.reshape(-1, book.dim)
    flat_z = np.asarray(z, dtype=np.int64).reshape(-1)
    if flat_h.shape[0] != flat_z.shape[0]:
        raise ContractError("h and z disagree on the number of vectors")
    dtype = book.codes.dtype
    n = np.bincount(flat_z, minlength=book.K).astype(dtype)
    batch_sums = np.zeros((book.K, book.dim), dtype=dtype)
    np.add.at(batch_sums, flat_z, flat_h.astype(dtype, copy=False))
    d = dtype.type(book.decay)
    one_minus = dtype.type(1.0 - book.decay)
    book.ema_counts = d * book.ema_counts + one_minus * n
    book.ema_sums = d * book.ema_sums + one_minus * batch_sums
    book.codes = book.ema_sums / np.maximum(book.ema_counts, dtype.type(book.eps))[:, None]


def commitment_loss(h, book: CodeBook, z, beta: float, mask=None):
    """beta * sum_t ||h_t - sg(e_{z_t})||^2 per sentence.

    h: (B, T, D) with mask (B, T) gives a (B,) tensor; h: (T, D) gives a scalar.
    """
    if beta < 0:
        raise ConfigError(f"beta must be non-negative, got {beta}")
    h = ad.as_tensor(h)
    e = ad.stop_gradient(Tensor(book.codes[np.asarray(z)].astype(h.dtype, copy=False)))
    diff = h - e
    sq = ad.tsum(diff * diff, axis=-1)
    if mask is not None:
        sq = sq * np.asarray(mask, dtype=h.dtype)
    per = ad.tsum(sq, axis=-1)
    return per * beta


def usage_entropy(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def dead_codes(usage_window, threshold_frac: float = 1e-3) -> np.ndarray:
    """Codes whose assignment count over the window falls below
    ``threshold_frac`` of the uniform share (total / K)."""
    usage = np.asarray(usage_window, dtype=np.float64)
    share = usage.sum() / len(usage)
    return np.flatnonzero(usage < threshold_frac * share)


def dead_code_restart(book: CodeBook, usage_window, recent_states, seed=None,
                      threshold_frac: float = 1e-3) -> int:
    """Re-seed under-used codes from random recent encoder states."""
    dead = dead_codes(usage_window, threshold_frac)
    if len(dead) == 0:
        return 0
    recent = np.asarray(recent_states).reshape(-1, book.dim)
    if len(recent) == 0:
        return 0
    rng = np.random.default_rng(seed)
    picks = recent[rng.integers(len(recent), size=len(dead))]
    floor = book.codes.dtype.type(1.0)
    for k, vec in zip(dead, picks):
        book.codes[k] = vec
        book.ema_counts[k] = max(book.ema_counts[k], floor)
        book.ema_sums[k] = vec * book.ema_counts[k]
    log.info("restarted %d dead codes", len(dead))
    return int(len(dead))

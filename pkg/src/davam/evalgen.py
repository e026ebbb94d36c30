"""Held-out evaluation, generation from scratch, diversity and augmentation."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from davam import autodiff as ad
from davam import models as M
from davam import prior as pr
from davam.checkpoint import Checkpoint
from davam.corpus import Vocab, encode_corpus, make_batches, sample_lengths
from davam.errors import ConfigError, ContractError, StateError

log = logging.getLogger(__name__)

LENGTH_BUCKETS = (10, 20, 30, 40, 50)
AUGMENT_RATIOS = (0.5, 1.0, 2.0, 4.0)


@dataclass
class EvalReport:
    rec: float  # mean per-sentence summed NLL, nats
    ppl: float
    kl: float | None  # mean over sentences of KL / latent length
    kl_total: float | None  # mean per-sentence KL, nats
    tokens: int
    sentences: int

    def as_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True)


@dataclass
class DiversityReport:
    ent: float
    dist1: float
    dist2: float


def format_table(rows: Sequence[dict], columns: Sequence[str], floatfmt="{:.3f}") -> str:
    """Aligned plain-text table."""
    def cell(v):
        if v is None:
            return "n/a"
        if isinstance(v, float):
            return floatfmt.format(v)
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def report_table(reports: dict) -> str:
    """``{name: EvalReport}`` as a Model / Rec / PPL / KL table."""
    rows = [{"Model": name, "Rec": r.rec, "PPL": r.ppl, "KL": r.kl} for name, r in reports.items()]
    return format_table(rows, ["Model", "Rec", "PPL", "KL"], "{:.2f}")


# -- evaluation ---------------------------------------------------------------------------

def _model_of(ckpt):
    return ckpt.model if isinstance(ckpt, Checkpoint) else ckpt


def _dataset(ckpt, corpus, vocab: Vocab | None):
    model = _model_of(ckpt)
    ck_vocab = ckpt.vocab if isinstance(ckpt, Checkpoint) else None
    if vocab is not None and ck_vocab is not None and vocab != ck_vocab:
        raise ConfigError("corpus vocabulary differs from the checkpoint vocabulary")
    if len(corpus) and isinstance(corpus[0], str):
        use = vocab or ck_vocab
        if use is None:
            raise ConfigError("raw sentences need a vocabulary")
        max_len = 100
        if isinstance(ckpt, Checkpoint):
            max_len = int(ckpt.config.get("max_len", max_len))
        corpus = encode_corpus(corpus, use, max_len)
    V = model.dims.vocab_size
    for seq in corpus:
        if max(seq) >= V or min(seq) < 0:
            raise ConfigError(f"token id out of range for a vocabulary of {V}")
    return corpus


def _batch_terms(model: M.Model, batch):
    """Per-sentence rec, KL and latent length for one batch (no sampling)."""
    kind = model.kind
    kl = None
    if kind == "davam":
        lb = M.davam_forward(batch, model, 0.0)
        if model.has_prior:
            z = lb.extras["z"]
            kl = pr.nll_from_logits(z, model.prior.logits(z), batch.mask).data
        T = batch.lengths
    elif kind == "davam_q":
        lb = M.davam_q_forward(batch, model, 0.0)
        if model.has_prior:
            z = lb.extras["z"][:, None]
            kl = pr.nll_from_logits(z, model.prior.logits(z)).data
        T = np.ones(batch.size)
    elif kind == "gavam":
        lb = M.gavam_forward(batch, model, deterministic=True)
        kl, T = lb.kl_per_sentence, batch.lengths
    elif kind == "vae":
        lb = M.vae_forward(batch, model, deterministic=True)
        kl, T = lb.kl_per_sentence, np.ones(batch.size)
    else:
        lb = M.lstm_lm_forward(batch, model)
        kl, T = np.zeros(batch.size), np.ones(batch.size)
    return lb.rec_per_sentence, kl, np.asarray(T, dtype=np.float64)


def evaluate(ckpt, corpus, batch_size=32, vocab: Vocab | None = None, dtype=np.float64) -> EvalReport:
    """Teacher-forced Rec / PPL / KL over a held-out corpus.

    The model is evaluated in ``dtype`` (float64 by default). Sentences are
    scored in corpus order regardless of batching, and sums are accumulated
    in that order, so the result does not depend on ``batch_size`` beyond
    rounding.
    """
    model = _model_of(ckpt)
    dataset = _dataset(ckpt, corpus, vocab)
    if not dataset:
        raise ContractError("empty evaluation corpus")
    if dtype is not None and model.dtype != np.dtype(dtype):
        model = model.astype(dtype)
    recs, kls, Ts = [], [], []
    have_kl = True
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            batch = next(make_batches(chunk, len(chunk), shuffle_seed=None, bucket=False))
            rec, kl, T = _batch_terms(model, batch)
            recs.append(np.asarray(rec, dtype=np.float64))
            Ts.append(T)
            if kl is None:
                have_kl = False
            else:
                kls.append(np.asarray(kl, dtype=np.float64))
    rec = np.concatenate(recs)
    tokens = int(sum(len(s) - 1 for s in dataset))
    total = math.fsum(rec.tolist())
    ppl = math.exp(total / tokens)
    kl_mean = kl_total = None
    if have_kl:
        kl = np.concatenate(kls)
        T = np.concatenate(Ts)
        kl_total = math.fsum(kl.tolist()) / len(kl)
        kl_mean = math.fsum((kl / T).tolist()) / len(kl)
    report = EvalReport(total / len(rec), ppl, kl_mean, kl_total, tokens, len(rec))
    for v in (report.rec, report.ppl):
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite evaluation result {report}")
    return report


# -- generation ------------------------------------------------------------------------------

def _latent_lengths(ckpt: Checkpoint, n, length_mode, rng_seed):
    if length_mode in (None, "auto", "hist"):
        if not ckpt.length_hist:
            raise StateError("checkpoint carries no length histogram; pass a fixed length")
        return sample_lengths(ckpt.length_hist, n, seed=rng_seed)
    words = int(length_mode)
    if words < 1:
        raise ContractError("fixed length must be at least 1 word")
    return np.full(n, words + 2, dtype=np.int64)


def generate_from_scratch(ckpt: Checkpoint, n: int, length_mode="auto", seed=0,
                          temperature: float = 1.0) -> list[str]:
    """Sample ``n`` sentences with no source input.

    The latent length T (framed, BOS/EOS included) comes from the training
    length histogram or from a fixed word count. Latents come from the
    model's prior; the decoder samples until EOS or 2T tokens.
    """
    model = ckpt.model
    if n < 0:
        raise ContractError("n must be non-negative")
    if model.kind in M.DISCRETE_KINDS and not model.has_prior:
        raise StateError(f"{model.kind} checkpoint has no trained prior: run stage two (prior) first")
    if n == 0:
        return []
    ss = np.random.SeedSequence(seed)
    len_seed, lat_seed, tok_seed = ss.spawn(3)
    lengths = _latent_lengths(ckpt, n, length_mode, len_seed)
    tok_rng = np.random.default_rng(tok_seed)
    lat_rng = np.random.default_rng(lat_seed)
    out: list[list[int] | None] = [None] * n
    kind = model.kind
    D = model.dims.latent_dim

    if kind in ("davam", "gavam"):
        for T in np.unique(lengths):
            rows = np.flatnonzero(lengths == T)
            T = int(T)
            sub_seed = int(lat_rng.integers(2**63))
            if kind == "davam":
                z = pr.sample_prior(model.prior, T, temperature, seed=sub_seed, n=len(rows))
                values = ad.Tensor(model.book.codes[z])
            else:
                values = ad.Tensor(pr.sample_gaussian_prior(model.gprior, T, seed=sub_seed,
                                                            n=len(rows), dtype=model.dtype))
            mask = np.ones((len(rows), T), dtype=bool)
            ids = M.sample_decode(model, len(rows), 2 * T, tok_rng, temperature,
                                  values=values, values_mask=mask)
            for r, seq in zip(rows, ids):
                out[r] = seq
    else:
        if kind == "davam_q":
            z = pr.sample_prior(model.prior, 1, temperature, seed=lat_rng.integers(2**63), n=n)
            lat = ad.Tensor(model.book.codes[z[:, 0]])
        elif kind == "vae":
            lat = ad.Tensor(lat_rng.standard_normal((n, D)).astype(model.dtype))
        else:
            lat = None
        ids = M.sample_decode(model, n, 2 * lengths, tok_rng, temperature,
                              const_ctx=lat, init_latent=lat)
        out = ids
    return [ckpt.vocab.decode(seq) for seq in out]


# -- diversity ---------------------------------------------------------------------------------

def diversity(sentences: Sequence[str]) -> DiversityReport:
    """Pooled unigram entropy and distinct-1 / distinct-2 ratios."""
    if not sentences:
        raise ContractError("diversity needs at least one sentence")
    unigrams = Counter()
    bigrams = Counter()
    for s in sentences:
        words = s.split()
        unigrams.update(words)
        bigrams.update(zip(words, words[1:]))
    n1 = sum(unigrams.values())
    if n1 == 0:
        raise ContractError("sentences contain no tokens")
    n2 = sum(bigrams.values())
    p = np.array(sorted(unigrams.values()), dtype=np.float64) / n1
    ent = float(-(p * np.log(p)).sum())
    dist2 = len(bigrams) / n2 if n2 else 0.0
    return DiversityReport(max(ent, 0.0), len(unigrams) / n1, dist2)


# -- fluency proxy -------------------------------------------------------------------------------

def fluency_proxy(sentences: Sequence[str], reference: Checkpoint, vocab: Vocab | None = None,
                  batch_size=32) -> float:
    """Mean per-sentence perplexity under a reference LSTM language model.

    A stand-in for an external pretrained scorer; its values are only
    comparable with each other.
    """
    if reference.model.kind != "lstm_lm":
        raise ConfigError("the fluency reference must be an lstm_lm checkpoint")
    if vocab is not None and vocab != reference.vocab:
        raise ConfigError("sentence vocabulary differs from the reference vocabulary")
    if not sentences:
        raise ContractError("no sentences to score")
    dataset = encode_corpus(list(sentences), reference.vocab, int(reference.config.get("max_len", 100)))
    model = reference.model.astype(np.float64)
    ppls = []
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            batch = next(make_batches(chunk, len(chunk), shuffle_seed=None, bucket=False))
            rec = M.lstm_lm_forward(batch, model).rec_per_sentence
            ppls.extend(np.exp(rec / (batch.lengths - 1)).tolist())
    return float(np.mean(ppls))


# -- augmentation ----------------------------------------------------------------------------------

@dataclass
class AugmentRow:
    base_size: int
    ratio: float
    ppl_base: float
    ppl_aug: float


def augment(base_corpus: Sequence[str], ratio: float, davam_ckpt: Checkpoint, lm_config,
            test_corpus: Sequence[str], valid_corpus: Sequence[str] | None = None,
            seed: int = 0) -> AugmentRow:
    """Train one LM on the base corpus and one on base + generated sentences.

    Both use the generator's vocabulary and the same config and seed; the
    returned pair is test perplexity for each.
    """
    from davam.train import PreparedCorpus, train_stage_one

    if ratio < 0:
        raise ContractError("ratio must be non-negative")
    cfg = lm_config.replace(model_kind="lstm_lm")
    vocab = davam_ckpt.vocab
    n_gen = int(round(ratio * len(base_corpus)))
    generated = generate_from_scratch(davam_ckpt, n_gen, "auto", seed=seed) if n_gen else []
    generated = [s for s in generated if s.strip()]
    valid = list(valid_corpus or test_corpus)

    def fit(train_sents):
        data = PreparedCorpus(vocab, encode_corpus(train_sents, vocab, cfg.max_len),
                              encode_corpus(valid, vocab, cfg.max_len))
        ckpt, _ = train_stage_one(data, cfg)
        return evaluate(ckpt, list(test_corpus)).ppl

    ppl_base = fit(list(base_corpus))
    ppl_aug = ppl_base if n_gen == 0 else fit(list(base_corpus) + generated)
    log.info("augment base=%d ratio=%g: ppl %.2f -> %.2f", len(base_corpus), ratio, ppl_base, ppl_aug)
    return AugmentRow(len(base_corpus), float(ratio), ppl_base, ppl_aug)


def augment_table(rows: Sequence[AugmentRow]) -> str:
    return format_table([asdict(r) for r in rows], ["base_size", "ratio", "ppl_base", "ppl_aug"], "{:.2f}")

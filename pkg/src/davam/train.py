"""Two-stage training: stage one fits encoder/decoder (and the code book by
EMA), stage two fits the autoregressive prior on frozen posterior codes."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from davam import autodiff as ad
from davam import models as M
from davam import prior as pr
from davam.checkpoint import Checkpoint
from davam.corpus import build_vocab, encode_corpus, length_histogram, make_batches, Vocab
from davam.errors import ConfigError, ModelKindError, NumericAbort, NumericDomainError
from davam.quantizer import (dead_code_restart, ema_update, kmeans_init, usage_entropy)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    model_kind: str = "davam"
    K: int = 512
    latent_dim: int = 32
    hidden_dim: int = 256
    embed_dim: int = 128
    attn_dim: int = 0  # 0 means hidden_dim
    num_layers: int = 1
    batch_size: int = 32
    epochs: int = 100
    warmup_epochs: int = 10
    beta_start: float = 0.1
    beta_max: float = 5.0
    optimizer: str = "sgd"
    lr: float = 1.0
    lr_decay_factor: float = 0.5
    plateau_patience: int = 2
    max_decays: int = 5
    clip_norm: float = 5.0
    seed: int = 0
    max_vocab: int = 20000
    max_len: int = 100
    init_scale: float = 0.1
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    kmeans_iters: int = 10
    kmeans_epoch: int = 1  # epochs on continuous states before K-means
    kmeans_max_samples: int = 50000
    dead_code_restart: bool = True
    dead_code_threshold: float = 1e-3
    vae_anneal_epochs: int = 10
    prior_channels: int = 64
    prior_layers: int = 16
    prior_kernel: int = 3
    prior_epochs: int = 30
    prior_lr: float = 1e-3
    prior_optimizer: str = "adam"
    prior_batch_size: int = 64
    prior_patience: int = 5
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.model_kind not in M.KINDS:
            raise ConfigError(f"model_kind must be one of {M.KINDS}, got {self.model_kind!r}")
        if self.beta_start > self.beta_max:
            raise ConfigError("beta_start must not exceed beta_max")
        if self.beta_start < 0:
            raise ConfigError("beta_start must be non-negative")
        for name in ("K", "latent_dim", "hidden_dim", "embed_dim", "num_layers", "batch_size",
                     "epochs", "lr", "clip_norm", "max_vocab", "prior_channels", "prior_layers",
                     "prior_kernel", "prior_batch_size", "prior_lr", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.kmeans_epoch < 1:
            raise ConfigError("kmeans_epoch must be at least 1")
        for name in ("warmup_epochs", "plateau_patience", "max_decays", "kmeans_iters",
                     "vae_anneal_epochs", "prior_epochs", "attn_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.lr_decay_factor < 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1)")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be sgd or adam")
        if self.prior_optimizer not in ("sgd", "adam"):
            raise ConfigError("prior_optimizer must be sgd or adam")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self):
        return dataclasses.asdict(self)

    def dims(self, vocab_size: int) -> M.ModelDims:
        return M.ModelDims(
            vocab_size=vocab_size, embed_dim=self.embed_dim, hidden_dim=self.hidden_dim,
            latent_dim=self.latent_dim, attn_dim=self.attn_dim or None, K=self.K,
            num_layers=self.num_layers, prior_channels=self.prior_channels,
            prior_layers=self.prior_layers, prior_kernel=self.prior_kernel,
            init_scale=self.init_scale,
        )

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _parse_value(raw: str, typ):
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(raw, types[key])
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


# -- schedules -----------------------------------------------------------------------

def anneal_beta(epoch: int, cfg: TrainConfig) -> float:
    """beta_start through warm-up, then a linear ramp to beta_max over
    ``warmup_epochs`` epochs, then constant."""
    W = cfg.warmup_epochs
    if epoch < W:
        return cfg.beta_start
    if W == 0 or epoch >= 2 * W:
        return cfg.beta_max
    return cfg.beta_start + (cfg.beta_max - cfg.beta_start) * (epoch - W) / W


def vae_anneal_weight(epoch: int, cfg: TrainConfig) -> float:
    if cfg.vae_anneal_epochs == 0:
        return 1.0
    return min(1.0, epoch / cfg.vae_anneal_epochs)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without improvement; stop once ``max_decays`` decays are used up."""

    def __init__(self, lr, factor=0.5, patience=2, max_decays=5):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.max_decays = max_decays
        self.best = math.inf
        self.bad_epochs = 0
        self.decays = 0
        self.stopped = False

    def step(self, val_loss: float) -> bool:
        """Record one epoch; returns True when this epoch is the best so far."""
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.bad_epochs = 0
            if self.decays >= self.max_decays:
                self.stopped = True
            else:
                self.lr *= self.factor
                self.decays += 1
        return False

    def reset_best(self):
        self.best = math.inf
        self.bad_epochs = 0


# -- optimisers ------------------------------------------------------------------------

def clip_grad_norm(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= p.data.dtype.type(self.lr) * p.grad


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= self.b1
            m += (1 - self.b1) * p.grad
            v *= self.b2
            v += (1 - self.b2) * p.grad * p.grad
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


# -- logs ------------------------------------------------------------------------------

class TrainLog:
    """Append-only per-epoch records, written as JSON lines."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def append(self, record: dict):
        self.records.append(dict(record))
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @staticmethod
    def read(path) -> list[dict]:
        with open(path, encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]


# -- helpers -------------------------------------------------------------------------------

@dataclass
class PreparedCorpus:
    vocab: Vocab
    train: list
    valid: list

    @classmethod
    def from_splits(cls, splits: dict, cfg: TrainConfig, vocab: Vocab | None = None):
        vocab = vocab or build_vocab(splits["train"], cfg.max_vocab)
        train = encode_corpus(splits["train"], vocab, cfg.max_len)
        valid = encode_corpus(splits.get("valid") or splits["train"], vocab, cfg.max_len)
        return cls(vocab, train, valid)


def _prepare(corpus, cfg) -> PreparedCorpus:
    if isinstance(corpus, PreparedCorpus):
        return corpus
    return PreparedCorpus.from_splits(corpus, cfg)


def validation_losses(model: M.Model, dataset, batch_size=64) -> dict:
    """Deterministic per-sentence means of rec and kl over a dataset."""
    rec = kl = 0.0
    n = 0
    with ad.no_grad():
        for batch in make_batches(dataset, batch_size, shuffle_seed=None):
            if model.kind == "davam":
                lb = M.davam_forward(batch, model, 0.0)
            elif model.kind == "davam_q":
                lb = M.davam_q_forward(batch, model, 0.0)
            elif model.kind == "gavam":
                lb = M.gavam_forward(batch, model, deterministic=True)
            elif model.kind == "vae":
                lb = M.vae_forward(batch, model, deterministic=True)
            else:
                lb = M.lstm_lm_forward(batch, model)
            rec += float(lb.rec_per_sentence.sum())
            kl += float(lb.kl_per_sentence.sum())
            n += batch.size
    return {"rec": rec / n, "kl": kl / n}


def encoder_latents(model: M.Model, dataset, batch_size=64) -> np.ndarray:
    """Continuous pre-quantisation states of a dataset, one row per valid position
    (one per sentence for davam_q)."""
    rows = []
    with ad.no_grad():
        for batch in make_batches(dataset, batch_size, shuffle_seed=None):
            h = model.to_latent(model.encoder_states(batch))
            if model.kind == "davam_q":
                rows.append(model.last_states(batch, h).data)
            else:
                rows.append(h.data[batch.mask])
    return np.concatenate(rows)


def _dump_batch(out_dir, batch, epoch, step):
    if out_dir is None:
        return None
    path = Path(out_dir) / "numeric_abort_batch.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"epoch": epoch, "step": step,
                                "token_ids": batch.token_ids.tolist(),
                                "lengths": batch.lengths.tolist()}), encoding="utf-8")
    return str(path)


# -- stage one -------------------------------------------------------------------------------

def train_stage_one(corpus, cfg: TrainConfig, out_dir=None, log_path=None,
                    model: M.Model | None = None):
    """Fit phi and theta (plus psi for GAVAM). Returns (Checkpoint, TrainLog).

    For the discrete kinds the first epoch runs without quantisation and
    collects encoder states; K-means over them initialises the code book.
    The best-validation state is retained.
    """
    data = _prepare(corpus, cfg)
    dtype = np.dtype(cfg.dtype)
    if model is None:
        model = M.Model(cfg.model_kind, cfg.dims(len(data.vocab)), seed=cfg.seed, dtype=dtype)
    discrete = model.kind in M.DISCRETE_KINDS
    if discrete:
        model.book.decay, model.book.eps = cfg.ema_decay, cfg.ema_eps
    train_log = TrainLog(log_path)
    params = list(model.trainable("one").values())
    opt = Adam(params, cfg.lr) if cfg.optimizer == "adam" else SGD(params, cfg.lr)
    sched = PlateauSchedule(cfg.lr, cfg.lr_decay_factor, cfg.plateau_patience, cfg.max_decays)
    best_state = None
    recent = []

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        beta = anneal_beta(epoch, cfg)
        weight = vae_anneal_weight(epoch, cfg)
        opt.lr = sched.lr
        sums = {"rec": 0.0, "kl": 0.0, "commit": 0.0}
        n_sent = 0
        usage = np.zeros(model.dims.K) if discrete else None
        restarts = 0
        for step, batch in enumerate(make_batches(data.train, cfg.batch_size,
                                                  shuffle_seed=[cfg.seed, epoch])):
            model.registry.zero_grad()
            noise = [cfg.seed, epoch, step]
            try:
                lb = M.stage_one_loss(batch, model, beta=beta, anneal_weight=weight, noise_seed=noise)
                finite = bool(np.isfinite(lb.total.data))
            except NumericDomainError:
                finite = False
            if not finite:
                dump = _dump_batch(out_dir, batch, epoch, step)
                raise NumericAbort(f"non-finite loss at epoch {epoch} step {step}", dump)
            lb.total.backward()
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            if discrete:
                h = lb.extras["h"]
                valid = h[batch.mask] if model.kind == "davam" else h
                if model.codebook_ready:
                    z = lb.extras["z"]
                    zv = z[batch.mask] if model.kind == "davam" else z
                    ema_update(model.book, valid, zv)
                    usage += np.bincount(zv, minlength=model.dims.K)
                recent.append(valid.copy())
                recent = recent[-20:]
            sums["rec"] += lb.rec * batch.size
            sums["kl"] += lb.kl * batch.size
            sums["commit"] += lb.commit * batch.size
            n_sent += batch.size

        if discrete and not model.codebook_ready and epoch + 1 >= cfg.kmeans_epoch:
            pool = encoder_latents(model, data.train)
            if len(pool) > cfg.kmeans_max_samples:
                pick = np.random.default_rng([cfg.seed, 7]).choice(len(pool), cfg.kmeans_max_samples, replace=False)
                pool = pool[np.sort(pick)]
            model.book = kmeans_init(pool, model.dims.K, cfg.kmeans_iters, seed=cfg.seed,
                                     decay=cfg.ema_decay, eps=cfg.ema_eps)
            model.codebook_ready = True
            sched.reset_best()
            best_state = None
        elif discrete and model.codebook_ready and cfg.dead_code_restart:
            restarts = dead_code_restart(model.book, usage, np.concatenate(recent),
                                         seed=[cfg.seed, epoch, 1], threshold_frac=cfg.dead_code_threshold)

        val = validation_losses(model, data.valid)
        val_loss = val["rec"] + val["kl"]
        record = {
            "epoch": epoch, "rec": sums["rec"] / n_sent, "kl": sums["kl"] / n_sent,
            "commit": sums["commit"] / n_sent, "val_rec": val["rec"], "val_kl": val["kl"],
            "val_loss": val_loss, "lr": opt.lr, "beta": beta,
            "usage_entropy": usage_entropy(usage) if usage is not None else None,
            "restarts": restarts,
        }
        improved = sched.step(val_loss)
        if improved:
            best_state = ({k: v.copy() for k, v in model.state_arrays().items()}, epoch)
        record["wall_time"] = time.perf_counter() - t0
        train_log.append(record)
        log.info("epoch %d rec %.3f val_rec %.3f kl %.3f lr %.4g beta %.3g", epoch, record["rec"],
                 val["rec"], val["kl"], opt.lr, beta)
        if sched.stopped:
            break

    if best_state is not None:
        model.load_arrays(best_state[0])
    hist = length_histogram(data.train)
    return Checkpoint(model, data.vocab, cfg.to_dict(), hist), train_log


# -- stage two ----------------------------------------------------------------------------------

def latent_dataset(model: M.Model, dataset, batch_size=64) -> list[np.ndarray]:
    """Posterior code sequences of every sentence, in dataset order."""
    out = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start:start + batch_size]
        batch = next(make_batches(chunk, len(chunk), shuffle_seed=None, bucket=False))
        z = M.posterior_indices(batch, model)
        for i in range(batch.size):
            n = int(batch.lengths[i]) if model.kind == "davam" else 1
            out.append(z[i, :n].copy())
    return out


def _pad_codes(seqs):
    width = max(len(s) for s in seqs)
    z = np.zeros((len(seqs), width), dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        z[i, : len(s)] = s
        mask[i, : len(s)] = True
    return z, mask


def prior_dataset_nll(prior: pr.DiscretePrior, seqs, batch_size=128) -> float:
    """Mean per-sequence -sum_t log gamma_{t,z_t}."""
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(seqs), batch_size):
            z, mask = _pad_codes(seqs[start:start + batch_size])
            total += float(pr.nll_from_logits(z, prior.logits(z), mask).data.sum())
    return total / len(seqs)


def fit_prior(prior: pr.DiscretePrior, train_seqs, valid_seqs, cfg: TrainConfig, log_fn=None):
    """Minimise the code cross-entropy w.r.t. the prior parameters only."""
    params = list(prior.params("prior").values())
    for p in params:
        p.requires_grad = True
    opt = Adam(params, cfg.prior_lr) if cfg.prior_optimizer == "adam" else SGD(params, cfg.prior_lr)
    best, best_state, bad = math.inf, None, 0
    history = []
    order_rng = np.random.default_rng([cfg.seed, 2])
    for epoch in range(cfg.prior_epochs):
        lengths = np.array([len(s) for s in train_seqs])
        order = np.lexsort((order_rng.permutation(len(train_seqs)), lengths))
        chunks = [order[i:i + cfg.prior_batch_size] for i in range(0, len(order), cfg.prior_batch_size)]
        train_nll, count = 0.0, 0
        for ci in order_rng.permutation(len(chunks)):
            z, mask = _pad_codes([train_seqs[i] for i in chunks[ci]])
            for p in params:
                p.grad = None
            nll = pr.nll_from_logits(z, prior.logits(z), mask)
            loss = ad.mean(nll)
            loss.backward()
            clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            train_nll += float(nll.data.sum())
            count += len(chunks[ci])
        val = prior_dataset_nll(prior, valid_seqs)
        rec = {"epoch": epoch, "prior_nll": train_nll / count, "val_prior_nll": val}
        history.append(rec)
        if log_fn:
            log_fn(rec)
        if val < best - 1e-6:
            best, bad = val, 0
            best_state = [p.data.copy() for p in params]
        else:
            bad += 1
            if cfg.prior_patience and bad >= cfg.prior_patience:
                break
    if best_state is not None:
        for p, arr in zip(params, best_state):
            p.data = arr
    return history


def train_stage_two(corpus, ckpt: Checkpoint, cfg: TrainConfig | None = None, log_path=None):
    """Fit the categorical prior on codes from the frozen stage-one posterior.

    Encoder, decoder and code book are left bit-identical.
    """
    model = ckpt.model
    if model.kind not in M.DISCRETE_KINDS:
        raise ModelKindError(f"stage two applies to davam / davam_q, not {model.kind}")
    if not model.codebook_ready:
        raise ConfigError("stage-one checkpoint has no initialised code book")
    cfg = cfg or TrainConfig(**ckpt.config)
    if isinstance(corpus, PreparedCorpus):
        data = corpus
    else:
        data = PreparedCorpus.from_splits(corpus, cfg, vocab=ckpt.vocab)
    train_seqs = latent_dataset(model, data.train)
    valid_seqs = latent_dataset(model, data.valid)
    train_log = TrainLog(log_path)
    uniform = float(np.mean([len(s) for s in valid_seqs])) * math.log(model.dims.K)
    log.info("stage two: uniform bound %.3f nats/sentence", uniform)
    fit_prior(model.prior, train_seqs, valid_seqs, cfg, train_log.append)
    model.has_prior = True
    return ckpt, train_log


def train(corpus, cfg: TrainConfig, out_dir=None):
    """Stage one, then stage two for the discrete kinds."""
    data = _prepare(corpus, cfg)
    ckpt, log1 = train_stage_one(data, cfg, out_dir)
    if ckpt.model.kind in M.DISCRETE_KINDS:
        ckpt, _ = train_stage_two(data, ckpt, cfg)
    return ckpt, log1

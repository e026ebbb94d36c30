"""Corpus ingestion: vocabulary, sentence framing, padded batches."""

from __future__ import annotations

import logging
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from davam.errors import ConfigError, IngestionError

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "[s]", "[/s]")
DEFAULT_MAX_LEN = 100


class Vocab:
    """Token <-> id map. Ids 0..3 are PAD, UNK, BOS, EOS."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise IngestionError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @property
    def tokens(self):
        """Non-reserved tokens in id order."""
        return self.itos[len(RESERVED):]

    def encode(self, text: str, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
        return encode_sentence(text, self, max_len)

    def decode(self, ids: Iterable[int], strip: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if strip and i in (PAD, BOS):
                continue
            if strip and i == EOS:
                break
            words.append(self.itos[i])
        return " ".join(words)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            for tok in self.itos:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            lines = [line.rstrip("\n") for line in f]
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise IngestionError(f"{path}: missing reserved header")
        return cls(lines[len(RESERVED):])


def read_sentences(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def build_vocab(corpus, max_size: int) -> Vocab:
    """Most frequent tokens first, ties broken lexicographically.

    ``corpus`` is a path to a one-sentence-per-line file or a list of sentences.
    """
    sentences = read_sentences(corpus) if isinstance(corpus, (str, os.PathLike)) else list(corpus)
    counts = Counter(tok for s in sentences for tok in s.split())
    if not counts:
        raise IngestionError("cannot build a vocabulary from an empty corpus")
    if max_size < len(RESERVED):
        raise ConfigError(f"max_size must be at least {len(RESERVED)}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked if tok not in RESERVED][: max_size - len(RESERVED)]
    return Vocab(keep)


def encode_sentence(text: str, vocab: Vocab, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """BOS + token ids + EOS; words past ``max_len - 2`` are dropped."""
    ids = [vocab.id(tok) for tok in text.split()]
    return [BOS] + ids[: max_len - 2] + [EOS]


def encode_corpus(sentences: Sequence[str], vocab: Vocab, max_len: int = DEFAULT_MAX_LEN):
    out = []
    truncated = 0
    for s in sentences:
        n = len(s.split())
        if n + 2 > max_len:
            truncated += 1
        out.append(encode_sentence(s, vocab, max_len))
    if truncated:
        log.info("truncated %d sentences to %d tokens", truncated, max_len)
    return out


@dataclass
class Batch:
    token_ids: np.ndarray  # (B, T_max) int64
    lengths: np.ndarray  # (B,) int64, BOS and EOS included
    mask: np.ndarray  # (B, T_max) bool

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.token_ids.shape[1]

    def num_predicted(self) -> int:
        """Tokens the decoder predicts: everything after BOS."""
        return int((self.lengths - 1).sum())


def pad_batch(seqs: Sequence[Sequence[int]]) -> Batch:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max())
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    mask = np.arange(width)[None, :] < lengths[:, None]
    return Batch(ids, lengths, mask)


def make_batches(dataset: Sequence[Sequence[int]], batch_size: int, shuffle_seed=None,
                 bucket: bool = True) -> Iterator[Batch]:
    """One epoch of padded batches.

    With ``bucket`` the sentences are sorted by length (random tie order) and
    cut into consecutive chunks, so a batch only spans neighbouring lengths.
    The chunk order is shuffled. ``shuffle_seed=None`` keeps corpus order.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(dataset) == 0:
        raise IngestionError("empty dataset")
    n = len(dataset)
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    if bucket:
        tie = rng.permutation(n) if rng is not None else np.arange(n)
        lengths = np.array([len(s) for s in dataset])
        order = np.lexsort((tie, lengths))
    else:
        order = rng.permutation(n) if rng is not None else np.arange(n)
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if rng is not None:
        chunks = [chunks[i] for i in rng.permutation(len(chunks))]
    for chunk in chunks:
        yield pad_batch([dataset[i] for i in chunk])


def length_histogram(dataset: Sequence[Sequence[int]]) -> dict[int, float]:
    """Empirical distribution of framed lengths T (BOS/EOS included)."""
    if len(dataset) == 0:
        raise IngestionError("empty dataset")
    counts = Counter(len(s) for s in dataset)
    total = sum(counts.values())
    return {t: c / total for t, c in sorted(counts.items())}


def sample_lengths(hist: dict[int, float], n: int, seed=None) -> np.ndarray:
    rng = np.random.default_rng(seed)
    values = np.array(sorted(hist), dtype=np.int64)
    probs = np.array([hist[v] for v in values], dtype=np.float64)
    return rng.choice(values, size=n, p=probs / probs.sum())


def average_length(sentences: Sequence[str]) -> float:
    """Mean word count per sentence, the way dataset summaries usually report it."""
    if not sentences:
        raise IngestionError("empty corpus")
    return sum(len(s.split()) for s in sentences) / len(sentences)


def load_splits(corpus_dir) -> dict[str, list[str]]:
    """Read train.txt / valid.txt / test.txt from a corpus directory."""
    corpus_dir = Path(corpus_dir)
    splits = {}
    for name in ("train", "valid", "test"):
        path = corpus_dir / f"{name}.txt"
        if path.exists():
            splits[name] = read_sentences(path)
    if not splits.get("train"):
        raise IngestionError(f"{corpus_dir}: no train.txt or it is empty")
    return splits


# -- synthetic grammar ---------------------------------------------------------

_NOUNS = {
    "animal": "dog cat horse bird fox wolf bear mouse rabbit goat sheep cow lion tiger duck owl deer frog snake pig",
    "person": "man woman boy girl teacher doctor farmer child student king queen baker singer driver nurse pilot writer judge sailor artist",
    "thing": "book car house ball table chair box door window cup bottle letter song picture lamp key bag hat coat boat",
}
_VERBS = {
    "animal": "chases bites sees follows hears finds smells watches catches hunts",
    "person": "reads buys sells paints carries opens builds writes cleans fixes",
    "thing": "hits breaks moves covers holds blocks touches",
}
_ADJS = ("big small old young red blue green happy sad quiet loud fast slow tall short "
         "dark bright warm cold heavy light strange tiny huge gentle angry").split()
_ADVS = "quickly slowly often rarely again today loudly quietly".split()
_PREPS = "near under behind beside above inside".split()
_PLACES = "park garden river forest street market school kitchen field city".split()
_DETS = ["the", "a", "this", "every"]


def _zipf(rng, items):
    w = 1.0 / np.arange(1, len(items) + 1)
    return items[rng.choice(len(items), p=w / w.sum())]


def synthetic_grammar(n: int, seed: int = 0) -> list[str]:
    """Sentences from a small typed grammar (about 200 word types).

    Subjects agree with verb classes and objects, so the text has long range
    structure a latent sequence can summarise.
    """
    rng = np.random.default_rng(seed)
    nouns = {k: v.split() for k, v in _NOUNS.items()}
    verbs = {k: v.split() for k, v in _VERBS.items()}
    objects = {"animal": ["animal", "person"], "person": ["thing", "animal"], "thing": ["thing"]}

    def noun_phrase(kind):
        words = [_DETS[rng.choice(4, p=[0.55, 0.25, 0.1, 0.1])]]
        if rng.random() < 0.5:
            words.append(_zipf(rng, _ADJS))
        words.append(_zipf(rng, nouns[kind]))
        return words

    out = []
    for _ in range(n):
        kind = ("animal", "person", "thing")[rng.choice(3, p=[0.4, 0.45, 0.15])]
        question = rng.random() < 0.15
        words = (["does"] if question else []) + noun_phrase(kind)
        verb = _zipf(rng, verbs[kind])
        if question:
            verb = verb[:-2] if verb.endswith(("ches", "shes", "xes")) else verb[:-1]
        words.append(verb)
        obj_kind = objects[kind][rng.choice(len(objects[kind]))]
        words += noun_phrase(obj_kind)
        if rng.random() < 0.3:
            words.append(_zipf(rng, _ADVS))
        if rng.random() < 0.4:
            words += [_zipf(rng, _PREPS), "the", _zipf(rng, _PLACES)]
        if not question and rng.random() < 0.2:
            words += ["and", "then"] + noun_phrase(kind)[-1:] + ["sleeps" if kind != "thing" else "falls"]
        words.append("?" if question else ".")
        out.append(" ".join(words))
    return out


def write_synthetic_corpus(out_dir, n_train=2000, n_valid=200, n_test=200, seed=0):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sents = synthetic_grammar(n_train + n_valid + n_test, seed)
    parts = {
        "train": sents[:n_train],
        "valid": sents[n_train:n_train + n_valid],
        "test": sents[n_train + n_valid:],
    }
    for name, lines in parts.items():
        with open(out_dir / f"{name}.txt", "w", encoding="utf-8", newline="\n") as f:
            f.write("\n".join(lines) + "\n")
    return parts

"""Sensitivity sweeps over K, beta_max and latent dimension."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from davam.evalgen import evaluate, format_table
from davam.train import PreparedCorpus, TrainConfig, train_stage_one

log = logging.getLogger(__name__)

# grids from the original sensitivity study
PAPER_GRIDS = {
    "K": [128, 256, 512, 1024],
    "beta_max": [0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0],
    "latent_dim": [8, 16, 32, 64, 128, 256],
}


@dataclass
class SweepPoint:
    param: str
    value: float
    rec: float
    ppl: float
    epochs: int


def run_sweep(splits: dict, base: TrainConfig, param: str, values, eval_split="valid"):
    """Train one stage-one model per value and report held-out Rec.

    Every run shares the vocabulary, data order and seed; only ``param``
    changes.
    """
    if param not in PAPER_GRIDS:
        raise ValueError(f"unsupported sweep parameter {param!r}")
    data = PreparedCorpus.from_splits(splits, base)
    held_out = splits.get(eval_split) or splits["valid"]
    points = []
    for v in values:
        cfg = base.replace(**{param: type(getattr(base, param))(v)})
        if param == "beta_max" and cfg.beta_start > cfg.beta_max:
            cfg = cfg.replace(beta_start=cfg.beta_max)
        ckpt, log_ = train_stage_one(data, cfg)
        rep = evaluate(ckpt, held_out)
        points.append(SweepPoint(param, float(v), rep.rec, rep.ppl, len(log_)))
        log.info("sweep %s=%s rec %.3f", param, v, rep.rec)
    return points


def sweep_table(points) -> str:
    return format_table([asdict(p) for p in points], ["param", "value", "rec", "ppl", "epochs"])


# -- trend checks ------------------------------------------------------------------------------

def non_increasing(recs, rel_tol=0.0) -> bool:
    """Each value at most the previous one, with a relative slack."""
    recs = np.asarray(recs, dtype=np.float64)
    return bool(np.all(recs[1:] <= recs[:-1] * (1 + rel_tol)))


def interior_minimum(recs) -> bool:
    recs = np.asarray(recs, dtype=np.float64)
    i = int(np.argmin(recs))
    return 0 < i < len(recs) - 1


def flat_within(recs, frac=0.10) -> bool:
    """All values within ``frac`` of their mean."""
    recs = np.asarray(recs, dtype=np.float64)
    m = recs.mean()
    return bool(np.all(np.abs(recs - m) <= frac * m))

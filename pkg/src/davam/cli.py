"""Command-line front end.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numeric abort,
4 stage or model-kind mismatch. Results go to stdout, diagnostics to stderr.
The environment variable DAVAM_SEED overrides every seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

from davam import __version__
from davam import evalgen as EG
from davam import sweep as SW
from davam import train as TR
from davam.checkpoint import file_digest, load_checkpoint, save_checkpoint
from davam.corpus import load_splits, write_synthetic_corpus
from davam.errors import (CheckpointError, ConfigError, IngestionError, ModelKindError,
                          NumericAbort, NumericDomainError, StateError)
from davam.models import DISCRETE_KINDS

log = logging.getLogger("davam")

SEED_ENV = "DAVAM_SEED"
EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_STAGE = 1, 2, 3, 4


@dataclass
class RunManifest:
    command: str
    argv: list
    version: str = __version__
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    corpus_digests: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)
    checkpoint_sha256: str | None = None

    def write(self, out_dir):
        path = Path(out_dir) / "manifest.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, path)
        return path


def corpus_digests(corpus_dir) -> dict:
    out = {}
    for name in ("train", "valid", "test"):
        p = Path(corpus_dir) / f"{name}.txt"
        if p.exists():
            out[name] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def seed_override(seed):
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return seed
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _load_config(path):
    cfg = TR.load_config(path) if path else TR.TrainConfig()
    seed = seed_override(cfg.seed)
    return cfg.replace(seed=seed) if seed != cfg.seed else cfg


def _load_ckpt(path, expect_kind=None):
    try:
        return load_checkpoint(path, expect_kind)
    except FileNotFoundError:
        raise IngestionError(f"no checkpoint at {path}") from None


# -- commands ------------------------------------------------------------------------------

def cmd_train(args):
    cfg = _load_config(args.config)
    splits = load_splits(args.corpus)
    out = Path(args.out)
    manifest = RunManifest("train", sys.argv[1:], config=cfg.to_dict(), seeds={"seed": cfg.seed},
                           corpus_digests=corpus_digests(args.corpus),
                           inputs={"config": args.config, "corpus": str(args.corpus)})
    manifest.artifacts = {"checkpoint": str(out / "model.ckpt"), "log": str(out / "trainlog.jsonl"),
                          "manifest": str(out / "manifest.json")}
    manifest.write(out)
    ckpt, _ = TR.train_stage_one(splits, cfg, out_dir=out, log_path=out / "trainlog.jsonl")
    manifest.checkpoint_sha256 = save_checkpoint(ckpt, out / "model.ckpt")
    manifest.write(out)
    print(f"stage one done: {out / 'model.ckpt'} sha256={manifest.checkpoint_sha256}")
    return 0


def cmd_prior(args):
    ckpt = _load_ckpt(args.from_, expect_kind=DISCRETE_KINDS)
    cfg = TR.TrainConfig(**ckpt.config)
    if args.config:
        cfg = TR.load_config(args.config)
    cfg = cfg.replace(seed=seed_override(cfg.seed))
    for key in ("prior_epochs", "prior_lr"):
        v = getattr(args, key)
        if v is not None:
            cfg = cfg.replace(**{key: v})
    splits = load_splits(args.corpus)
    out = Path(args.out)
    manifest = RunManifest("prior", sys.argv[1:], config=cfg.to_dict(), seeds={"seed": cfg.seed},
                           corpus_digests=corpus_digests(args.corpus),
                           inputs={"checkpoint": str(args.from_), "checkpoint_sha256": file_digest(args.from_),
                                   "corpus": str(args.corpus)})
    manifest.artifacts = {"checkpoint": str(out / "model.ckpt"), "log": str(out / "priorlog.jsonl")}
    manifest.write(out)
    ckpt, _ = TR.train_stage_two(splits, ckpt, cfg, log_path=out / "priorlog.jsonl")
    manifest.checkpoint_sha256 = save_checkpoint(ckpt, out / "model.ckpt")
    manifest.write(out)
    print(f"stage two done: {out / 'model.ckpt'} sha256={manifest.checkpoint_sha256}")
    return 0


def _length_arg(text):
    if text in ("auto", "hist"):
        return "auto"
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("length must be an integer or 'auto'") from None


def cmd_generate(args):
    ckpt = _load_ckpt(args.ckpt)
    seed = seed_override(args.seed)
    if args.out:
        RunManifest("generate", sys.argv[1:], seeds={"seed": seed},
                    inputs={"checkpoint": str(args.ckpt), "checkpoint_sha256": file_digest(args.ckpt)},
                    artifacts={"sentences": str(Path(args.out) / "generated.txt")}).write(args.out)
    sents = EG.generate_from_scratch(ckpt, args.n, args.length, seed=seed, temperature=args.temperature)
    text = "".join(s + "\n" for s in sents)
    if args.out:
        (Path(args.out) / "generated.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if args.diversity and sents:
        d = EG.diversity(sents)
        print(json.dumps(asdict(d)), file=sys.stderr)
    return 0


def cmd_eval(args):
    ckpt = _load_ckpt(args.ckpt)
    splits = load_splits(args.corpus)
    if args.split not in splits:
        raise IngestionError(f"{args.corpus}: no {args.split}.txt")
    report = EG.evaluate(ckpt, splits[args.split], batch_size=args.batch_size)
    print(EG.report_table({ckpt.kind: report}))
    print(report.to_json())
    return 0


def cmd_augment(args):
    ckpt = _load_ckpt(args.ckpt, expect_kind=DISCRETE_KINDS)
    cfg = _load_config(args.config)
    splits = load_splits(args.base_corpus)
    if "test" not in splits:
        raise IngestionError(f"{args.base_corpus}: augmentation needs test.txt")
    seed = seed_override(args.seed)
    base_sizes = args.base_size or [len(splits["train"])]
    out = Path(args.out) if args.out else None
    if out:
        RunManifest("augment", sys.argv[1:], config=cfg.to_dict(), seeds={"seed": seed},
                    corpus_digests=corpus_digests(args.base_corpus),
                    inputs={"checkpoint": str(args.ckpt), "checkpoint_sha256": file_digest(args.ckpt)},
                    artifacts={"table": str(out / "augment.jsonl")}).write(out)
    rows = []
    for size in base_sizes:
        base = splits["train"][:size]
        for ratio in args.ratio:
            rows.append(EG.augment(base, ratio, ckpt, cfg, splits["test"], splits.get("valid"), seed=seed))
    print(EG.augment_table(rows))
    if out:
        with open(out / "augment.jsonl", "w", encoding="utf-8") as f:
            for r in rows:
                f.write(json.dumps(asdict(r)) + "\n")
    return 0


def cmd_sweep(args):
    cfg = _load_config(args.config)
    splits = load_splits(args.corpus)
    values = args.values or SW.PAPER_GRIDS[args.param]
    points = SW.run_sweep(splits, cfg, args.param, values)
    print(SW.sweep_table(points))
    recs = [p.rec for p in points]
    if args.param == "K":
        print(f"trend rec non-increasing in K: {SW.non_increasing(recs)}")
    elif args.param == "beta_max":
        print(f"trend rec minimised at interior beta_max: {SW.interior_minimum(recs)}")
    else:
        print(f"trend rec flat within 10% across latent dims: {SW.flat_within(recs)}")
    return 0


def cmd_synth(args):
    write_synthetic_corpus(args.out, args.n_train, args.n_valid, args.n_test, seed=seed_override(args.seed))
    print(f"wrote synthetic corpus to {args.out}")
    return 0


# -- entry point ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="davam", description="Discrete variational attention models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="stage one")
    s.add_argument("--config", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("prior", help="stage two: fit the latent prior")
    s.add_argument("--from", dest="from_", required=True, help="stage-one checkpoint")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="override the config stored in the checkpoint")
    s.add_argument("--prior-epochs", dest="prior_epochs", type=int, default=None)
    s.add_argument("--prior-lr", dest="prior_lr", type=float, default=None)
    s.set_defaults(func=cmd_prior)

    s = sub.add_parser("generate", help="sample sentences from scratch")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, default=10)
    s.add_argument("--length", type=_length_arg, default="auto")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--out", default=None)
    s.add_argument("--diversity", action="store_true", help="print Ent / Dist-1 / Dist-2 to stderr")
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("eval", help="Rec / PPL / KL on a held-out split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("augment", help="LM perplexity with and without generated data")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--base-corpus", required=True)
    s.add_argument("--ratio", type=float, nargs="+", default=list(EG.AUGMENT_RATIOS))
    s.add_argument("--base-size", type=int, nargs="*", default=None)
    s.add_argument("--config", default=None, help="LSTM-LM training config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("sweep", help="sensitivity sweep over one hyperparameter")
    s.add_argument("--param", choices=sorted(SW.PAPER_GRIDS), required=True)
    s.add_argument("--values", type=float, nargs="*", default=None)
    s.add_argument("--config", default=None)
    s.add_argument("--corpus", required=True)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("synth", help="write a synthetic grammar corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=2000)
    s.add_argument("--n-valid", type=int, default=200)
    s.add_argument("--n-test", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (StateError, ModelKindError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestionError, CheckpointError, OSError, UnicodeDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, NumericDomainError, FloatingPointError) as exc:
        dump = getattr(exc, "dump_path", None)
        print(f"numeric abort: {exc}" + (f" (batch dumped to {dump})" if dump else ""), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

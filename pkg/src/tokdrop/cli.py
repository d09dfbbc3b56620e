"""``tokdrop`` command line: corpus -> vocabulary -> packed data -> pretraining -> reports.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .corpus import IngestionError, Vocabulary, build_vocab, encode_corpus, read_documents
from .encoder import Encoder, EncoderConfig
from .importance import (ImportanceTable, SelectionStrategy, Strategy, build_drop_plan,
                         dump_scores, kept_count, protected_positions, score_sequence)
from .packing import PackStats, PackedBatch, apply_mlm_mask, pack, read_packed, write_packed
from .synthetic import write_synthetic_corpus
from .trainer import (METHODS, Pretrainer, TrainConfig, account_flops, evaluate_mlm,
                      make_probe_task, run_pretraining, toy_finetune_probe)

logger = logging.getLogger("tokdrop")


class UsageError(Exception):
    """Bad flags, config keys or input files (exit code 2)."""


@dataclass
class RunConfig:
    """Everything a pretraining run reads, flattened into one namespace."""

    vocab: str = ""
    data: str = ""
    out_dir: str = "run"
    variant: str = "drop"
    drop_rate: float = 0.5
    stage2_fraction: float = 0.0
    steps: int = 1000
    seed: int = 0
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_steps: int = -1
    weight_decay: float = 0.01
    log_interval: int = 10
    checkpoint_interval: int = 0
    table_beta: float = 0.9
    random_fraction: float = 0.05
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 2
    resume: str = ""

    @classmethod
    def keys(cls):
        return {f.name: f.type for f in fields(cls)}

    def validate(self):
        if self.variant not in METHODS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {sorted(METHODS)}")
        for name in ("vocab", "data"):
            if not getattr(self, name):
                raise UsageError(f"config key {name!r} is required")
            if not Path(getattr(self, name)).is_file():
                raise UsageError(f"{name} file not found: {getattr(self, name)}")
        try:
            self.train_config()
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        if self.d_model % self.n_heads:
            raise UsageError("d_model must be divisible by n_heads")
        return self

    def train_config(self) -> TrainConfig:
        return TrainConfig(total_steps=self.steps, stage2_fraction=self.stage2_fraction,
                           batch_size=self.batch_size, peak_lr=self.peak_lr,
                           warmup_steps=self.warmup_steps, weight_decay=self.weight_decay,
                           seed=self.seed, drop_rate=self.drop_rate,
                           log_interval=self.log_interval,
                           checkpoint_interval=self.checkpoint_interval,
                           table_beta=self.table_beta, random_fraction=self.random_fraction)


_CASTS = {"str": str, "int": int, "float": float}


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    keys = RunConfig.keys()
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise UsageError(f"config line {n}: unknown key {key!r}")
        out[key] = _cast(key, value)
    return out


def _cast(key, value):
    kind = RunConfig.keys()[key]
    try:
        return _CASTS[kind if isinstance(kind, str) else kind.__name__](value)
    except ValueError as exc:
        raise UsageError(f"config key {key!r}: cannot parse {value!r} as {kind}") from exc


def load_run_config(path, overrides: dict) -> RunConfig:
    values = {}
    if path:
        try:
            values = parse_config_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


# commands ---------------------------------------------------------------------


def cmd_gen_corpus(args):
    write_synthetic_corpus(args.out, args.tokens, args.seed)
    print(json.dumps({"out": args.out, "tokens": args.tokens, "seed": args.seed}))


def cmd_build_vocab(args):
    docs = read_documents(args.corpus)
    vocab = build_vocab(docs, args.max_size)
    vocab.save(args.out)
    print(json.dumps({"out": args.out, "size": len(vocab), "tokens": int(vocab.freq.sum())}))


def cmd_pack(args):
    vocab = _load_vocab(args.vocab)
    docs = encode_corpus(read_documents(args.corpus), vocab)
    stats = PackStats()
    seqs = list(pack(docs, args.length, packed=not args.no_pack, keep_tail=args.keep_tail,
                     stats=stats))
    write_packed(args.out, seqs, args.length)
    pad = int(sum((s.tokens == 0).sum() for s in seqs))
    print(json.dumps({"out": args.out, "sequences": len(seqs), "pad": pad,
                      "tokens_in": stats.tokens_in, "tokens_out": stats.tokens_out,
                      "truncated": stats.truncated}))


def cmd_pretrain(args):
    overrides = {"variant": args.variant, "drop_rate": args.drop_rate,
                 "stage2_fraction": args.stage2_fraction, "steps": args.steps,
                 "seed": args.seed, "out_dir": args.out, "vocab": args.vocab, "data": args.data,
                 "log_interval": args.log_interval, "batch_size": args.batch_size,
                 "peak_lr": args.peak_lr, "n_layers": args.n_layers, "d_model": args.d_model,
                 "n_heads": args.n_heads, "checkpoint_interval": args.checkpoint_interval,
                 "resume": args.resume}
    rc = load_run_config(args.config, overrides)
    vocab = _load_vocab(rc.vocab)
    T, data = _load_packed(rc.data)
    out = Path(rc.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variant = METHODS[rc.variant][0]
    cfg = rc.train_config()
    if rc.resume:
        trainer = Pretrainer.resume(rc.resume, Path(rc.resume).with_suffix(".table"), cfg, vocab)
    else:
        enc = Encoder(EncoderConfig(len(vocab), rc.n_layers, rc.d_model, rc.n_heads, T, variant),
                      seed=rc.seed)
        trainer = Pretrainer(enc, cfg, rc.variant, vocab)
    manifest = {"seed": rc.seed, "config": {f.name: getattr(rc, f.name) for f in fields(rc)}}
    (out / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log = run_pretraining(trainer, data, out, out / "metrics.jsonl")
    report = account_flops(rc.drop_rate if cfg.stage1_steps else 0.0, trainer.encoder.config, T)
    flops = {"seed": rc.seed, "analytic_per_sequence": report.to_dict(),
             "measured_total": trainer.flops, "steps": cfg.total_steps}
    (out / "flops.json").write_text(json.dumps(flops, indent=2, sort_keys=True) + "\n")
    last = log[-1] if log else {}
    print(json.dumps({"out": str(out), "steps": trainer.step, "final_loss": last.get("mlm_loss"),
                      "flops": trainer.flops}))


def cmd_report(args):
    if args.kind in ("scores", "histogram"):
        table = ImportanceTable.load(_need(args.table, "--table"))
        vocab = _load_vocab(_need(args.vocab, "--vocab"))
        ranked, rows = dump_scores(table, vocab, args.bins)
        if args.kind == "scores":
            text = "".join(f"{tok}\t{score!r}\n" for tok, score in ranked)
        else:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(["bucket_low", "bucket_high", "count"])
            w.writerows([repr(lo), repr(hi), c] for lo, hi, c in rows)
            text = buf.getvalue()
    elif args.kind == "flops":
        if args.variant not in METHODS:
            raise UsageError(f"unknown variant {args.variant!r}")
        enc = EncoderConfig(8, args.n_layers, args.d_model, args.n_heads, args.length,
                            METHODS[args.variant][0])
        text = json.dumps(account_flops(args.drop_rate, enc, args.length).to_dict(),
                          sort_keys=True) + "\n"
    else:
        text = _examples_report(args)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _examples_report(args):
    """Annotated sequences: kept tokens are wrapped in asterisks."""
    table = ImportanceTable.load(_need(args.table, "--table"))
    vocab = _load_vocab(_need(args.vocab, "--vocab"))
    T, data = _load_packed(_need(args.data, "--data"))
    M = kept_count(T, args.drop_rate)
    strategy = SelectionStrategy(Strategy.CUMULATIVE_LOSS)
    lines = []
    for i, seq in enumerate(data[: args.count]):
        seq = apply_mlm_mask(seq, [args.seed, i], len(vocab))
        scores = score_sequence(seq, table, strategy)
        plan = build_drop_plan(scores, M, strategy, protected_positions(seq))
        kept = set(plan.keep_idx.tolist())
        toks = vocab.decode(seq.tokens)
        lines.append(" ".join(f"*{t}*" if j in kept else t for j, t in enumerate(toks)))
    return "\n".join(lines) + "\n"


def cmd_probe(args):
    vocab = _load_vocab(args.vocab)
    enc = Encoder.load(args.checkpoint)[0]
    docs = encode_corpus(read_documents(args.corpus), vocab)
    task = make_probe_task(docs, len(vocab), args.length, args.n_train, args.n_val, seed=args.seed)
    acc = toy_finetune_probe(enc, task, epochs=args.epochs, lr=args.lr, seed=args.seed)
    print(json.dumps({"checkpoint": args.checkpoint, "accuracy": acc, "seed": args.seed}))


def cmd_evaluate(args):
    enc = Encoder.load(args.checkpoint)[0]
    _, data = _load_packed(args.data)
    print(json.dumps({"checkpoint": args.checkpoint,
                      "mlm_loss": evaluate_mlm(enc, data[: args.limit], args.seed)}))


def _need(value, flag):
    if not value:
        raise UsageError(f"{flag} is required for this report")
    return value


def _load_vocab(path):
    try:
        return Vocabulary.load(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load vocabulary {path}: {exc}") from exc


def _load_packed(path):
    try:
        return read_packed(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load packed data {path}: {exc}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="tokdrop", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-corpus", help="write a synthetic English-like corpus")
    s.add_argument("--tokens", type=int, default=1_000_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_corpus)

    s = sub.add_parser("build-vocab", help="count tokens and write a vocabulary file")
    s.add_argument("corpus", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--max-size", type=int, default=4096)
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("pack", help="pack a corpus into fixed-length sequences")
    s.add_argument("corpus", nargs="+")
    s.add_argument("--vocab", required=True)
    s.add_argument("--length", type=int, default=128)
    s.add_argument("--out", required=True)
    s.add_argument("--no-pack", action="store_true", help="one padded sentence pair per sequence")
    s.add_argument("--keep-tail", action="store_true")
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("pretrain", help="run stage-1 (+ optional stage-2) pretraining")
    s.add_argument("--config")
    s.add_argument("--variant", choices=sorted(METHODS))
    s.add_argument("--drop-rate", type=float)
    s.add_argument("--stage2-fraction", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--vocab")
    s.add_argument("--data")
    s.add_argument("--log-interval", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--peak-lr", type=float)
    s.add_argument("--n-layers", type=int)
    s.add_argument("--d-model", type=int)
    s.add_argument("--n-heads", type=int)
    s.add_argument("--checkpoint-interval", type=int)
    s.add_argument("--resume", help="checkpoint to continue from (its .table sits alongside)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("report", help="score dumps, histograms, FLOP reports, annotated examples")
    s.add_argument("kind", choices=["scores", "histogram", "flops", "examples"])
    s.add_argument("--table")
    s.add_argument("--vocab")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--bins", type=int, default=20)
    s.add_argument("--variant", default="drop")
    s.add_argument("--drop-rate", type=float, default=0.5)
    s.add_argument("--n-layers", type=int, default=12)
    s.add_argument("--d-model", type=int, default=128)
    s.add_argument("--n-heads", type=int, default=2)
    s.add_argument("--length", type=int, default=128)
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("probe", help="fine-tune a checkpoint on the marker co-occurrence task")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--corpus", nargs="+", required=True)
    s.add_argument("--length", type=int, default=64)
    s.add_argument("--n-train", type=int, default=1000)
    s.add_argument("--n-val", type=int, default=1000)
    s.add_argument("--epochs", type=int, default=4)
    s.add_argument("--lr", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("evaluate", help="full-sequence MLM loss of a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--limit", type=int, default=512)
    s.add_argument("--seed", type=int, default=1234)
    s.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, IngestionError, FileNotFoundError) as exc:
        print(f"tokdrop: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal error")
        print(f"tokdrop: internal error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Desk-scale pretraining comparison shared by the slow acceptance criteria.

Each arm trains in its own directory with periodic checkpoints, so an
interrupted run resumes where it stopped. Evaluation results are cached in
``results.json`` next to the final checkpoint.
"""

import functools
import json
import os
import re
import time
from pathlib import Path

import numpy as np

from tokdrop.corpus import build_vocab, encode_corpus
from tokdrop.encoder import Encoder, EncoderConfig
from tokdrop.packing import pack
from tokdrop.synthetic import synthetic_documents
from tokdrop.trainer import (METHODS, Pretrainer, TrainConfig, evaluate_mlm, make_probe_task,
                             run_pretraining, toy_finetune_probe)

DESK = {
    "corpus_tokens": 5_000_000,
    "corpus_seed": 0,
    "vocab_size": 4096,
    "T": 128,
    "n_layers": 4,
    "d_model": 128,
    "n_heads": 2,
    "steps": 20_000,
    "batch_size": 16,
    "peak_lr": float(os.environ.get("TOKDROP_DESK_LR", "1e-3")),
    "drop_rate": 0.5,
    "seed": 0,
    "val_sequences": 512,
    "probe_seeds": (0, 1, 2),
    "probe_epochs": 4,
    "probe_lr": 1e-4,
}

RUN_ROOT = Path(os.environ.get("TOKDROP_ACCEPT_DIR", Path(__file__).resolve().parents[1] / "acceptance_runs"))


@functools.lru_cache(maxsize=1)
def desk_data():
    """``(vocab, val_docs, train_seqs, val_seqs)``; 2% of documents are held out."""
    docs = synthetic_documents(DESK["corpus_tokens"], DESK["corpus_seed"])
    vocab = build_vocab(docs, DESK["vocab_size"])
    encoded = encode_corpus(docs, vocab)
    n_val = len(encoded) // 50
    train = list(pack(encoded[n_val:], DESK["T"]))
    val = list(pack(encoded[:n_val], DESK["T"]))[: DESK["val_sequences"]]
    return vocab, encoded[:n_val], train, val


def new_trainer(method, vocab, seed=None):
    seed = DESK["seed"] if seed is None else seed
    cfg = EncoderConfig(len(vocab), DESK["n_layers"], DESK["d_model"], DESK["n_heads"], DESK["T"],
                        METHODS[method][0])
    train_cfg = TrainConfig(total_steps=DESK["steps"], stage2_fraction=0.0,
                            batch_size=DESK["batch_size"], peak_lr=DESK["peak_lr"], seed=seed,
                            drop_rate=DESK["drop_rate"], log_interval=100,
                            checkpoint_interval=1000)
    return Pretrainer(Encoder(cfg, seed=seed), train_cfg, method, vocab)


def _latest_checkpoint(out):
    steps = [int(m.group(1)) for p in out.glob("step_*.ckpt")
             if (m := re.fullmatch(r"step_(\d+)\.ckpt", p.name))]
    return max(steps) if steps else None


def train_arm(method):
    """Train (or resume) one arm; return its directory."""
    vocab, _, train, _ = desk_data()
    out = RUN_ROOT / method
    out.mkdir(parents=True, exist_ok=True)
    if (out / "final.ckpt").exists():
        return out
    last = _latest_checkpoint(out)
    if last is None:
        trainer = new_trainer(method, vocab)
    else:
        trainer = Pretrainer.resume(out / f"step_{last}.ckpt", out / f"step_{last}.table",
                                    vocab=vocab)
        # drop metric rows written after the checkpoint we resume from
        path = out / "metrics.jsonl"
        rows = [r for r in path.read_text().splitlines() if json.loads(r)["step"] <= last]
        path.write_text("".join(r + "\n" for r in rows))
    t0 = time.time()
    run_pretraining(trainer, train, out, out / "metrics.jsonl")
    (out / "train_seconds.txt").write_text(f"{time.time() - t0:.1f}\n")
    return out


def arm_results(method):
    """Train if needed, then evaluate; cached in ``results.json``."""
    out = train_arm(method)
    path = out / "results.json"
    if path.exists():
        return json.loads(path.read_text())
    vocab, val_docs, _, val = desk_data()
    enc = Encoder.load(out / "final.ckpt")[0]
    trainer = Pretrainer.resume(out / "final.ckpt", out / "final.table", vocab=vocab)
    probe = []
    for s in DESK["probe_seeds"]:
        task = make_probe_task(val_docs, len(vocab), length=64, n_train=1000, n_val=1000, seed=s)
        probe.append(toy_finetune_probe(enc, task, epochs=DESK["probe_epochs"],
                                        lr=DESK["probe_lr"], seed=s))
    res = {"method": method, "measured_flops": trainer.flops, "val_mlm_loss": evaluate_mlm(enc, val),
           "probe_accuracy": probe, "probe_mean": float(np.mean(probe)), "desk": DESK | {"probe_seeds": list(DESK["probe_seeds"])}}
    path.write_text(json.dumps(res, indent=2) + "\n")
    return res


if __name__ == "__main__":
    import sys

    for m in sys.argv[1:] or ["baseline", "drop"]:
        print(m, "->", train_arm(m), flush=True)

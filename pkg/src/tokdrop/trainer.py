"""Pretraining loop, optimizer, learning-rate schedule, FLOP accounting and the probe."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import tensor as tn
from .corpus import CLS, N_RESERVED, SEP, Vocabulary
from .encoder import Encoder, EncoderConfig, Variant
from .importance import ImportanceTable, SelectionStrategy, Strategy, kept_count, plan_batch
from .packing import PackedBatch, PackedSequence, apply_mlm_mask
from .tensor import Tensor

logger = logging.getLogger(__name__)

DROP_RATES = (0.0, 0.25, 0.5, 0.625, 0.75)

# CLI method name -> (encoder variant, selection strategy)
METHODS = {
    "baseline": (Variant.BASELINE, None),
    "drop": (Variant.DROP, Strategy.CUMULATIVE_LOSS),
    "pass": (Variant.PASS, Strategy.CUMULATIVE_LOSS),
    "avg": (Variant.AVG, None),
    "rand": (Variant.DROP, Strategy.RANDOM),
    "half-rand": (Variant.DROP, Strategy.HALF_RANDOM),
    "freq": (Variant.DROP, Strategy.FREQUENCY),
    "layer-rearranged": (Variant.LAYER_REARRANGED, Strategy.CUMULATIVE_LOSS),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 1000
    stage2_fraction: float = 0.1
    batch_size: int = 16
    peak_lr: float = 1e-4
    warmup_steps: int = -1  # -1: 1% of total_steps
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    seed: int = 0
    drop_rate: float = 0.5
    log_interval: int = 10
    checkpoint_interval: int = 0
    table_beta: float = 0.9
    random_fraction: float = 0.05

    def __post_init__(self):
        if self.warmup_steps < 0:
            self.warmup_steps = int(0.01 * self.total_steps)
        if not 0.0 <= self.stage2_fraction < 1.0:
            raise ValueError(f"stage2_fraction must lie in [0, 1), got {self.stage2_fraction}")
        if not 0.0 <= self.drop_rate < 1.0:
            raise ValueError(f"drop_rate must lie in [0, 1), got {self.drop_rate}")
        if self.total_steps < 0 or self.batch_size < 1 or self.log_interval < 1:
            raise ValueError("total_steps, batch_size and log_interval must be positive")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")

    @property
    def stage1_steps(self):
        return int(round((1.0 - self.stage2_fraction) * self.total_steps))


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then linear decay reaching 0 at ``total_steps``."""
    w, n, peak = config.warmup_steps, config.total_steps, config.peak_lr
    if not 0 <= step <= n:
        raise ValueError(f"step {step} outside [0, {n}]")
    if step < w:
        return peak * step / w
    if n == w:
        return peak
    return peak * (n - step) / (n - w)


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied to matrices only (biases and layernorm vectors are exempt)
    and is scaled by the learning rate, so ``lr = 0`` leaves parameters fixed.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps=1e-6, weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            if self.weight_decay and p.ndim >= 2:
                p.data -= (lr * self.weight_decay) * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# FLOP accounting -----------------------------------------------------------


def layer_rows(enc: EncoderConfig, T: int, M: int):
    """``(query_rows, key_value_rows)`` per layer for one sequence."""
    rows = [(T, T)] * enc.n_layers
    half = enc.half_layers
    if enc.variant is Variant.BASELINE or not half or M >= T:
        return rows
    if enc.variant is Variant.AVG:
        qkv = [(T // 2, T // 2)] * len(half)
    elif enc.variant is Variant.PASS:
        qkv = [(M, T)] * len(half)
    else:
        qkv = [(M, T)] + [(M, M)] * (len(half) - 1)
    for i, r in zip(half, qkv):
        rows[i] = r
    return rows


def mlp_flops(rows, d, d_ff):
    return 2 * rows * (d * d_ff + d_ff * d)


def attention_flops(rows_q, rows_kv, d):
    proj = 2 * rows_q * d * d * 2 + 2 * rows_kv * d * d * 2  # Q, O and K, V
    return proj + 2 * 2 * rows_q * rows_kv * d  # scores and weighted values


@dataclass
class FlopReport:
    mlp_flops_baseline: int
    mlp_flops_actual: int
    attention_flops_baseline: int
    attention_flops_actual: int
    savings_fraction: float
    total_savings_fraction: float
    kept_rows: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def account_flops(drop_rate: float, enc: EncoderConfig, T: int | None = None) -> FlopReport:
    """Analytic forward FLOPs of the encoder stack for one length-``T`` sequence."""
    T = T or enc.max_len
    M = kept_count(T, drop_rate)
    d, f = enc.d_model, enc.d_ff
    rows = layer_rows(enc, T, M)
    mlp_b = enc.n_layers * mlp_flops(T, d, f)
    att_b = enc.n_layers * attention_flops(T, T, d)
    mlp_a = sum(mlp_flops(q, d, f) for q, _ in rows)
    att_a = sum(attention_flops(q, kv, d) for q, kv in rows)
    return FlopReport(
        mlp_b, mlp_a, att_b, att_a,
        float(1 - Fraction(mlp_a, mlp_b)),
        float(1 - Fraction(mlp_a + att_a, mlp_b + att_b)),
        [q for q, _ in rows],
    )


# training -------------------------------------------------------------------


def _rng_seed(*parts):
    return [int(p) for p in parts]


class Pretrainer:
    """Owns the encoder, optimizer state and importance table of one run."""

    def __init__(self, encoder: Encoder, config: TrainConfig, method: str = "baseline",
                 vocab: Vocabulary | None = None, table: ImportanceTable | None = None):
        variant, strategy = METHODS[method]
        if encoder.config.variant is not variant:
            raise ValueError(f"method {method!r} needs a {variant.value} encoder, "
                             f"got {encoder.config.variant.value}")
        if strategy is Strategy.FREQUENCY and vocab is None:
            raise ValueError("frequency-based dropping needs vocabulary counts")
        self.encoder = encoder
        self.config = config
        self.method = method
        self.vocab = vocab
        self.strategy = strategy
        self.table = table or ImportanceTable(encoder.config.vocab_size, config.table_beta)
        self.opt = AdamW(encoder.parameters(), (config.beta1, config.beta2), config.eps,
                         config.weight_decay)
        self.step = 0
        self.flops = 0
        self.running_loss = float("nan")

    @property
    def vocab_size(self):
        return self.encoder.config.vocab_size

    def assemble(self, seqs, step):
        """Mask a list of raw sequences with step-derived seeds."""
        seed = self.config.seed
        return PackedBatch([apply_mlm_mask(s, _rng_seed(seed, step, i), self.vocab_size)
                            for i, s in enumerate(seqs)])

    def plans_for(self, batch, step):
        """Plans for this step, or None when every layer should see every row."""
        enc = self.encoder.config
        M = kept_count(batch.T, self.config.drop_rate)
        if step >= self.config.stage1_steps or enc.variant is Variant.BASELINE or M >= batch.T:
            return None, batch.T
        if enc.variant is Variant.AVG:
            return [], batch.T // 2
        strategy = SelectionStrategy(self.strategy, self.config.random_fraction,
                                     _rng_seed(self.config.seed, step))
        return plan_batch(batch, self.table, strategy, M, self.vocab,
                          _rng_seed(self.config.seed, step, 7)), M

    def train_step(self, batch: PackedBatch, step: int | None = None) -> dict:
        step = self.step if step is None else step
        plans, M = self.plans_for(batch, step)
        full = plans is None
        enc = self.encoder
        enc.zero_grad()
        before = tn.FLOPS.total
        with tn.Tape() as tape:
            logits, _ = enc.forward(batch, None if full else (plans or None), full=full)
            loss, per = tn.cross_entropy(logits, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite MLM loss {value} at step {step}")
        tape.backward(loss)
        lr = lr_at(step, self.config)
        self.opt.step(lr)
        self.table.update(batch.labels, per)
        self.flops += tn.FLOPS.total - before
        self.step = step + 1
        self.running_loss = value
        rows = layer_rows(enc.config, batch.T, batch.T if full else M)
        kept = sum(q for q, _ in rows) / (enc.config.n_layers * batch.T)
        return {"step": self.step, "stage": 1 if step < self.config.stage1_steps else 2,
                "mlm_loss": value, "lr": lr, "flops_cumulative": self.flops,
                "tokens_kept_fraction": kept}

    # persistence

    def save(self, path, table_path=None):
        extra = {"step": self.step, "flops": self.flops, "adam_t": self.opt.t,
                 "method": self.method, "train_config": asdict(self.config)}
        self.encoder.save(path, extra=extra, moments=(self.opt.m, self.opt.v))
        if table_path is not None:
            self.table.save(table_path)

    @classmethod
    def resume(cls, ckpt_path, table_path, config=None, vocab=None):
        enc, extra, moments = Encoder.load(ckpt_path)
        config = config or TrainConfig(**extra["train_config"])
        tr = cls(enc, config, extra["method"], vocab, ImportanceTable.load(table_path))
        if moments is not None:
            tr.opt.m = [m.astype(p.dtype) for m, p in zip(moments[0], enc.parameters())]
            tr.opt.v = [v.astype(p.dtype) for v, p in zip(moments[1], enc.parameters())]
        tr.opt.t = extra["adam_t"]
        tr.step = extra["step"]
        tr.flops = extra["flops"]
        return tr


def batch_indices(step, batch_size, n, seed):
    """Sequence indices for ``step``: epoch-wise shuffles, wrapping around forever."""
    start = step * batch_size
    out = []
    for pos in range(start, start + batch_size):
        epoch, k = divmod(pos, n)
        perm = _epoch_perm(seed, epoch, n)
        out.append(int(perm[k]))
    return out


_PERM_CACHE: dict = {}


def _epoch_perm(seed, epoch, n):
    key = (seed, epoch, n)
    if key not in _PERM_CACHE:
        if len(_PERM_CACHE) > 4:
            _PERM_CACHE.clear()
        _PERM_CACHE[key] = np.random.default_rng(_rng_seed(seed, epoch, 11)).permutation(n)
    return _PERM_CACHE[key]


def run_pretraining(trainer: Pretrainer, data: list[PackedSequence], out_dir=None,
                    metrics_path=None, until: int | None = None) -> list[dict]:
    """Train from ``trainer.step`` to ``until`` (default ``total_steps``); return the metrics log.

    Writes JSON-lines metrics every ``log_interval`` steps and, when
    ``checkpoint_interval`` is set, resumable checkpoints plus table snapshots.
    A non-finite loss leaves a diagnostic checkpoint behind before raising.
    """
    cfg = trainer.config
    if not data:
        raise ValueError("no training sequences")
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = []
    sink = open(metrics_path, "a" if trainer.step else "w", encoding="utf-8") if metrics_path else None
    window = []
    try:
        stop = cfg.total_steps if until is None else min(until, cfg.total_steps)
        while trainer.step < stop:
            step = trainer.step
            idx = batch_indices(step, cfg.batch_size, len(data), cfg.seed)
            batch = trainer.assemble([data[i] for i in idx], step)
            try:
                rec = trainer.train_step(batch, step)
            except TrainingDiverged:
                if out_dir:
                    trainer.save(out_dir / f"diverged_{step}.ckpt", out_dir / f"diverged_{step}.table")
                raise
            window.append(rec["mlm_loss"])
            if rec["step"] % cfg.log_interval == 0:
                rec = dict(rec, mlm_loss=float(np.mean(window)))
                window = []
                log.append(rec)
                if sink:
                    sink.write(json.dumps(rec) + "\n")
                    sink.flush()
            if out_dir and cfg.checkpoint_interval and rec["step"] % cfg.checkpoint_interval == 0:
                trainer.save(out_dir / f"step_{rec['step']}.ckpt", out_dir / f"step_{rec['step']}.table")
    finally:
        if sink:
            sink.close()
    if out_dir:
        tag = "final" if trainer.step >= cfg.total_steps else f"step_{trainer.step}"
        trainer.save(out_dir / f"{tag}.ckpt", out_dir / f"{tag}.table")
    return log


def evaluate_mlm(encoder: Encoder, data: list[PackedSequence], seed: int = 1234,
                 batch_size: int = 32) -> float:
    """Mean masked-token NLL with every layer on every row (fixed masks)."""
    V = encoder.config.vocab_size
    total, count = 0.0, 0
    for s in range(0, len(data), batch_size):
        chunk = data[s:s + batch_size]
        batch = PackedBatch([apply_mlm_mask(q, _rng_seed(seed, s + i), V)
                             for i, q in enumerate(chunk)])
        if not len(batch.labels):
            continue
        logits, _ = encoder.forward(batch, full=True)
        _, per = tn.cross_entropy(logits, batch.labels)
        total += float(per.sum())
        count += per.size
    return total / max(count, 1)


# fine-tuning probe ------------------------------------------------------------


@dataclass
class ProbeTask:
    """Binary sequence classification: does the marker pair co-occur?"""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    markers: tuple


def make_probe_task(docs: list[list[list[int]]], vocab_size: int, length: int = 64,
                    n_train: int = 1000, n_val: int = 1000, markers=None,
                    seed: int = 0) -> ProbeTask:
    """Sequences cut from real sentences with markers planted at random positions.

    Positives hold both markers; negatives hold exactly one of them or neither,
    so neither marker alone decides the label.
    """
    rng = np.random.default_rng(seed)
    stream = [t for d in docs for s in d for t in s]
    if markers is None:
        markers = (N_RESERVED + 40, N_RESERVED + 41)
    a, b = markers
    body = length - 2
    xs, ys = [], []
    n = n_train + n_val
    for k in range(n):
        start = int(rng.integers(0, max(1, len(stream) - body)))
        toks = np.array(stream[start:start + body], dtype=np.int64)
        if len(toks) < body:
            toks = np.resize(toks, body)
        hits = (toks == a) | (toks == b)
        toks[hits] = rng.integers(N_RESERVED + 100, vocab_size, hits.sum()) \
            if vocab_size > N_RESERVED + 100 else N_RESERVED
        label = k % 2
        if label:
            planted = [a, b]
        else:
            planted = [[a], [b], []][int(rng.integers(3))]
        pos = rng.choice(body, size=len(planted), replace=False)
        toks[pos] = planted
        xs.append(np.r_[CLS, toks, SEP])
        ys.append(label)
    order = rng.permutation(n)
    x = np.stack(xs)[order]
    y = np.array(ys)[order]
    return ProbeTask(x[:n_train], y[:n_train], x[n_train:], y[n_train:], (a, b))


def _classify(encoder, head_w, head_b, tokens):
    h = encoder.hidden(tokens, full=True)
    cls = tn.reshape(tn.gather_rows(h, np.zeros((h.shape[0], 1), np.int64)), (h.shape[0], -1))
    return tn.add(tn.matmul(cls, head_w), head_b)


def toy_finetune_probe(encoder: Encoder | str | Path, task: ProbeTask, epochs: int = 4,
                       lr: float = 1e-4, batch_size: int = 32, seed: int = 0) -> float:
    """Fine-tune a copy of ``encoder`` plus a [CLS] head; return validation accuracy.

    The encoder always runs full (no dropping). ``epochs=0`` scores the
    untouched model with a freshly initialised head.
    """
    if isinstance(encoder, (str, Path)):
        encoder = Encoder.load(encoder)[0]
    enc = Encoder(encoder.config)
    for name, p in encoder.params.items():
        enc.params[name].data = p.data.copy()
    rng = np.random.default_rng(seed)
    d = enc.config.d_model
    dt = np.dtype(enc.config.dtype)
    head_w = Tensor(rng.normal(0, 0.02, (d, 2)).astype(dt), requires_grad=True, name="cls_w")
    head_b = Tensor(np.zeros(2, dt), requires_grad=True, name="cls_b")
    params = enc.parameters() + [head_w, head_b]
    opt = AdamW(params, eps=1e-6, weight_decay=0.01)
    n = len(task.train_y)
    steps = epochs * math.ceil(n / batch_size)
    warm = max(1, steps // 10)
    k = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            for p in params:
                p.grad = None
            with tn.Tape() as tape:
                logits = _classify(enc, head_w, head_b, task.train_x[idx])
                loss, _ = tn.cross_entropy(logits, task.train_y[idx])
            tape.backward(loss)
            rate = lr * min(1.0, (k + 1) / warm) * max(0.0, (steps - k) / steps)
            opt.step(rate)
            k += 1
    correct = 0
    for s in range(0, len(task.val_y), 256):
        logits = _classify(enc, head_w, head_b, task.val_x[s:s + 256])
        correct += int((logits.data.argmax(axis=1) == task.val_y[s:s + 256]).sum())
    return correct / len(task.val_y)

"""Per-token importance scores and the keep/drop plans built from them.

The cumulative-loss table keeps, for every vocabulary id, an exponential moving
average of the MLM loss observed whenever that token was a prediction target.
Tokens the model already predicts well end up with small averages and are the
first to be dropped from the middle layers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .corpus import CLS, MASK, PAD, SEP, Vocabulary
from .packing import PackedSequence

SPECIAL_SCORE = 1e4
PAD_SCORE = -1e4
DEFAULT_SCORE = 10.0
# frequency and random scorers need specials above any possible score
FORCED_SCORE = 1e9

TABLE_MAGIC = b"TDIT"


class PlanError(ValueError):
    """The requested kept count cannot hold every protected position."""


class Strategy(str, Enum):
    CUMULATIVE_LOSS = "cumulative_loss"
    HALF_RANDOM = "cumulative_loss_half_random"
    RANDOM = "random"
    FREQUENCY = "frequency"


@dataclass
class SelectionStrategy:
    variant: Strategy = Strategy.CUMULATIVE_LOSS
    random_fraction: float = 0.05
    rng_seed: int | tuple = 0

    def __post_init__(self):
        self.variant = Strategy(self.variant)


class ImportanceTable:
    """Cumulative-loss vector over the vocabulary."""

    FIXED = {MASK: SPECIAL_SCORE, CLS: SPECIAL_SCORE, SEP: SPECIAL_SCORE, PAD: PAD_SCORE}

    def __init__(self, vocab_size: int, beta: float = 0.9, default_value: float = DEFAULT_SCORE):
        if not 0.0 < beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {beta}")
        self.beta = float(beta)
        self.default_value = float(default_value)
        self.m = np.full(vocab_size, self.default_value, dtype=np.float64)
        for i, v in self.FIXED.items():
            self.m[i] = v
        self.step = 0

    def __len__(self):
        return len(self.m)

    def copy(self):
        t = ImportanceTable.__new__(ImportanceTable)
        t.beta, t.default_value, t.step, t.m = self.beta, self.default_value, self.step, self.m.copy()
        return t

    def update(self, ids, losses):
        """Fold ``(id, loss)`` events into the table in the order given.

        Entries of reserved ids never change. Repeated ids within one call are
        applied one after another, so the result equals a sequential fold.
        """
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        losses = np.asarray(losses, dtype=np.float64).reshape(-1)
        if ids.shape != losses.shape:
            raise ValueError("ids and losses differ in length")
        live = ~np.isin(ids, list(self.FIXED))
        if np.any(losses[live] < 0) or not np.all(np.isfinite(losses[live])):
            raise ValueError("MLM losses must be finite and non-negative")
        b, c = self.beta, 1.0 - self.beta
        m = self.m
        for i, loss in zip(ids[live].tolist(), losses[live].tolist()):
            m[i] = b * m[i] + c * loss
        self.step += 1
        return self

    def save(self, path):
        """Binary: magic, |V|, beta, default value, step, then |V| little-endian doubles."""
        with open(path, "wb") as f:
            f.write(TABLE_MAGIC + struct.pack("<QddQ", len(self.m), self.beta,
                                              self.default_value, self.step))
            f.write(self.m.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ImportanceTable":
        raw = Path(path).read_bytes()
        if raw[:4] != TABLE_MAGIC:
            raise ValueError(f"{path}: not an importance table")
        n, beta, default, step = struct.unpack_from("<QddQ", raw, 4)
        t = cls(n, beta, default)
        t.m = np.frombuffer(raw, "<f8", n, 4 + struct.calcsize("<QddQ")).astype(np.float64)
        t.step = step
        return t


def update_table(table: ImportanceTable, ids, losses) -> ImportanceTable:
    return table.update(ids, losses)


def protected_positions(seq: PackedSequence) -> np.ndarray:
    """Positions that must survive every plan: specials and all MLM targets."""
    t = seq.tokens
    keep = (t == CLS) | (t == SEP) | (t == MASK)
    keep[seq.mask_positions] = True
    return keep


def score_sequence(seq: PackedSequence, table: ImportanceTable | None,
                   strategy: SelectionStrategy, vocab: Vocabulary | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Importance score of every position of ``seq``; higher means keep."""
    tokens = seq.tokens
    variant = strategy.variant
    protect = protected_positions(seq)
    if variant in (Strategy.CUMULATIVE_LOSS, Strategy.HALF_RANDOM):
        scores = table.m[tokens].copy()
        scores[protect] = SPECIAL_SCORE
        return scores
    if variant is Strategy.FREQUENCY:
        if vocab is None:
            raise ValueError("frequency scoring needs the vocabulary counts")
        freq = vocab.freq[tokens].astype(np.float64)
        # ids are assigned by descending count, so the id fraction breaks ties toward
        # treating the lower id as the more frequent token
        scores = -freq + tokens / (len(vocab) + 1.0)
    elif variant is Strategy.RANDOM:
        rng = rng if rng is not None else np.random.default_rng(strategy.rng_seed)
        scores = rng.random(len(tokens))
    else:
        raise ValueError(f"unknown strategy {variant}")
    scores[protect] = FORCED_SCORE
    scores[tokens == PAD] = PAD_SCORE
    return scores


@dataclass
class DropPlan:
    sigma: np.ndarray
    M: int
    keep_idx: np.ndarray
    drop_idx: np.ndarray

    @property
    def T(self):
        return len(self.sigma)

    @classmethod
    def keep_all(cls, T):
        ar = np.arange(T)
        return cls(ar, T, ar, ar[:0])


def build_drop_plan(scores, M: int, strategy: SelectionStrategy | None = None,
                    protected=None, rng: np.random.Generator | None = None) -> DropPlan:
    """Keep the ``M`` highest-scoring positions; both index sets come back ascending.

    Ties are broken by position. ``protected`` marks positions that must be
    kept (defaults to scores at or above the special-token score). With the
    half-random strategy the last ``J = int(random_fraction * T)`` kept ranks
    are re-drawn uniformly from ranks ``M-J+1..T``; protected positions in that
    window keep their slot.
    """
    scores = np.asarray(scores, dtype=np.float64)
    T = len(scores)
    protected = scores >= SPECIAL_SCORE if protected is None else np.asarray(protected, bool)
    n_prot = int(protected.sum())
    if not n_prot <= M <= T:
        raise PlanError(f"kept count {M} must lie in [{n_prot}, {T}]")
    # lexsort uses the last key as primary: descending score, then ascending position
    sigma = np.lexsort((np.arange(T), -scores))
    keep = sigma[:M]
    if strategy is not None and strategy.variant is Strategy.HALF_RANDOM:
        J = min(int(strategy.random_fraction * T), M)
        if J > 0:
            rng = rng if rng is not None else np.random.default_rng(strategy.rng_seed)
            window = sigma[M - J:M]
            stay = window[protected[window]]
            pool = sigma[M - J:]
            pool = pool[~protected[pool]]
            chosen = rng.choice(pool, size=J - len(stay), replace=False)
            keep = np.concatenate([sigma[:M - J], stay, chosen])
    keep_idx = np.sort(keep)
    mask = np.ones(T, bool)
    mask[keep_idx] = False
    return DropPlan(sigma, M, keep_idx, np.flatnonzero(mask))


def kept_count(T: int, drop_rate: float) -> int:
    """Uniform kept count for a drop rate (rounded to the nearest row)."""
    if not 0.0 <= drop_rate < 1.0:
        raise ValueError(f"drop rate must lie in [0, 1), got {drop_rate}")
    return int(round((1.0 - drop_rate) * T))


def plan_batch(batch, table, strategy: SelectionStrategy, M: int, vocab=None, seed=0):
    """One plan per sequence of ``batch``, sharing ``M``."""
    plans = []
    for b, seq in enumerate(batch.sequences):
        rng = np.random.default_rng([*np.atleast_1d(seed).tolist(), b])
        scores = score_sequence(seq, table, strategy, vocab, rng)
        plans.append(build_drop_plan(scores, M, strategy, protected_positions(seq), rng))
    return plans


def dump_scores(table: ImportanceTable, vocab: Vocabulary, bins: int = 20):
    """Tokens sorted by descending score plus a histogram over the whole vocabulary.

    Histogram rows are ``(low, high, count)``. Reserved ids get their own
    degenerate buckets, so the counts sum to ``|V|``.
    """
    order = np.lexsort((np.arange(len(table)), -table.m))
    ranked = [(vocab.tokens[i], float(table.m[i])) for i in order]
    fixed = np.array(sorted(table.FIXED))
    free = np.ones(len(table), bool)
    free[fixed] = False
    vals = table.m[free]
    rows = []
    if (table.m[fixed] == PAD_SCORE).any():
        rows.append((PAD_SCORE, PAD_SCORE, int((table.m[fixed] == PAD_SCORE).sum())))
    if vals.size:
        lo, hi = np.floor(vals.min()), np.ceil(vals.max())
        if hi == lo:
            hi = lo + 1
        counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
        rows += [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]
    if (table.m[fixed] == SPECIAL_SCORE).any():
        rows.append((SPECIAL_SCORE, SPECIAL_SCORE, int((table.m[fixed] == SPECIAL_SCORE).sum())))
    return ranked, rows

"""Fixed-length sequence packing and MLM masking."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .corpus import CLS, MASK, N_RESERVED, PAD, SEP

logger = logging.getLogger(__name__)

MASK_RATE = 0.15
MIN_LENGTH = 8

PACKED_MAGIC = b"TDPK"
PACKED_VERSION = 1


@dataclass
class PackedSequence:
    tokens: np.ndarray
    mask_positions: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    mask_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.mask_positions = np.asarray(self.mask_positions, dtype=np.int64)
        self.mask_labels = np.asarray(self.mask_labels, dtype=np.int64)

    @property
    def original_at_mask(self):
        return self.mask_labels

    def __len__(self):
        return len(self.tokens)

    def special_mask(self):
        t = self.tokens
        return (t == CLS) | (t == SEP) | (t == PAD)

    def __eq__(self, other):
        return (isinstance(other, PackedSequence)
                and np.array_equal(self.tokens, other.tokens)
                and np.array_equal(self.mask_positions, other.mask_positions)
                and np.array_equal(self.mask_labels, other.mask_labels))


@dataclass
class PackStats:
    sequences: int = 0
    tokens_in: int = 0
    tokens_out: int = 0
    truncated: int = 0
    pad: int = 0
    dropped_tail: int = 0


def _pair_sequences(sentences, T, stats):
    """Non-packed mode: ``[CLS] a [SEP] b [SEP]`` padded to ``T``."""
    sentences = list(sentences)
    budget = T - 3
    for i in range(0, len(sentences), 2):
        a = list(sentences[i])
        b = list(sentences[i + 1]) if i + 1 < len(sentences) else []
        while len(a) + len(b) > budget:
            (a if len(a) >= len(b) else b).pop()
            stats.truncated += 1
        toks = [CLS] + a + [SEP] + (b + [SEP] if b else [])
        stats.tokens_out += len(a) + len(b)
        stats.pad += T - len(toks)
        stats.sequences += 1
        yield PackedSequence(toks + [PAD] * (T - len(toks)))


def pack(docs: Iterable[list[list[int]]], T: int, packed: bool = True,
         keep_tail: bool = False, stats: PackStats | None = None) -> Iterator[PackedSequence]:
    """Turn a stream of tokenized documents into length-``T`` sequences.

    Packed mode concatenates sentences (each followed by ``[SEP]``) across
    document boundaries behind a leading ``[CLS]`` until exactly ``T`` tokens
    are filled; a sentence that crosses the boundary continues in the next
    sequence. The final partial buffer is dropped unless ``keep_tail``, in
    which case it is padded. Non-packed mode emits one padded sentence pair
    per sequence.
    """
    if T < MIN_LENGTH:
        raise ValueError(f"sequence length must be at least {MIN_LENGTH}, got {T}")
    stats = stats if stats is not None else PackStats()

    def sentences():
        for doc in docs:
            for sent in doc:
                if not sent:
                    continue
                stats.tokens_in += len(sent)
                if len(sent) > T - 2:
                    logger.warning("truncating %d-token sentence to %d tokens", len(sent), T - 2)
                    stats.truncated += len(sent) - (T - 2)
                    sent = sent[: T - 2]
                yield sent

    if not packed:
        yield from _pair_sequences(sentences(), T, stats)
        return

    buf = [CLS]
    for sent in sentences():
        rest = list(sent) + [SEP]
        while rest:
            room = T - len(buf)
            buf.extend(rest[:room])
            rest = rest[room:]
            if len(buf) == T:
                stats.tokens_out += sum(1 for t in buf if t >= N_RESERVED)
                stats.sequences += 1
                yield PackedSequence(buf)
                buf = [CLS]
            if rest == [SEP]:
                # a lone separator would open the next sequence; the boundary already separates
                rest = []
    n_tail = sum(1 for t in buf if t >= N_RESERVED)
    if n_tail:
        if keep_tail:
            stats.tokens_out += n_tail
            stats.pad += T - len(buf)
            stats.sequences += 1
            yield PackedSequence(buf + [PAD] * (T - len(buf)))
        else:
            stats.dropped_tail += n_tail


def apply_mlm_mask(seq: PackedSequence, rng_seed, vocab_size: int,
                   rate: float = MASK_RATE) -> PackedSequence:
    """Select ``int(rate * n)`` of the ``n`` maskable positions and corrupt them.

    Each selected position becomes ``[MASK]`` with probability 0.8, a uniformly
    random non-reserved id with probability 0.1, and stays as is otherwise.
    ``[CLS]``, ``[SEP]`` and ``[PAD]`` are never selected.
    """
    rng = np.random.default_rng(rng_seed)
    tokens = seq.tokens.copy()
    maskable = np.flatnonzero(~seq.special_mask())
    n = int(rate * len(maskable) + 1e-9)
    pos = np.sort(rng.choice(maskable, size=n, replace=False)) if n else maskable[:0]
    labels = tokens[pos].copy()
    u = rng.random(n)
    repl = rng.integers(N_RESERVED, vocab_size, size=n) if vocab_size > N_RESERVED else labels
    tokens[pos[u < 0.8]] = MASK
    rand = (u >= 0.8) & (u < 0.9)
    tokens[pos[rand]] = repl[rand]
    return PackedSequence(tokens, pos, labels)


@dataclass
class PackedBatch:
    """Uniform-length batch with flattened MLM targets."""

    sequences: list[PackedSequence]

    def __post_init__(self):
        lengths = {len(s) for s in self.sequences}
        if len(lengths) != 1:
            raise ValueError(f"batch sequences must share one length, got {sorted(lengths)}")
        self.tokens = np.stack([s.tokens for s in self.sequences])
        T = self.tokens.shape[1]
        self.mask_flat = np.concatenate(
            [s.mask_positions + b * T for b, s in enumerate(self.sequences)]).astype(np.int64)
        self.labels = np.concatenate([s.mask_labels for s in self.sequences]).astype(np.int64)

    @property
    def T(self):
        return self.tokens.shape[1]

    def __len__(self):
        return len(self.sequences)


def write_packed(path, seqs: Iterable[PackedSequence], T: int) -> int:
    """Binary records, little-endian: header then per sequence ids and mask metadata."""
    seqs = list(seqs)
    with open(path, "wb") as f:
        f.write(PACKED_MAGIC + struct.pack("<IIQ", PACKED_VERSION, T, len(seqs)))
        for s in seqs:
            if len(s) != T:
                raise ValueError(f"sequence length {len(s)} != {T}")
            f.write(s.tokens.astype("<i4").tobytes())
            f.write(struct.pack("<I", len(s.mask_positions)))
            f.write(s.mask_positions.astype("<i4").tobytes())
            f.write(s.mask_labels.astype("<i4").tobytes())
    return len(seqs)


def read_packed(path) -> tuple[int, list[PackedSequence]]:
    raw = Path(path).read_bytes()
    if raw[:4] != PACKED_MAGIC:
        raise ValueError(f"{path}: not a packed-data file")
    version, T, count = struct.unpack_from("<IIQ", raw, 4)
    if version != PACKED_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = 4 + struct.calcsize("<IIQ")
    seqs = []
    for _ in range(count):
        toks = np.frombuffer(raw, "<i4", T, off)
        off += 4 * T
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        pos = np.frombuffer(raw, "<i4", n, off)
        off += 4 * n
        lab = np.frombuffer(raw, "<i4", n, off)
        off += 4 * n
        seqs.append(PackedSequence(toks, pos, lab))
    return T, seqs

"""Word-level tokenizer, vocabulary with corpus frequencies, and text encoding.

Corpus files hold one document per line; sentences end with ``.``, ``!`` or
``?``. Terminal punctuation only delimits sentences and never becomes a token.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

logger = logging.getLogger(__name__)

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]")
# ids that never come from text; [UNK] is an ordinary (if lossy) token
RESERVED_IDS = frozenset((PAD, CLS, SEP, MASK))
N_RESERVED = len(SPECIAL_TOKENS)

_TOKEN_RE = re.compile(r"[^\W_]+(?:'[^\W_]+)?|[.!?]|[^\w\s]")
_TERMINAL = frozenset(".!?")


class IngestionError(ValueError):
    """Corpus is empty or unreadable."""


def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def split_sentences(tokens: list[str]) -> list[list[str]]:
    sentences, cur = [], []
    for tok in tokens:
        if tok in _TERMINAL:
            if cur:
                sentences.append(cur)
            cur = []
        else:
            cur.append(tok)
    if cur:
        sentences.append(cur)
    return sentences


@dataclass
class Vocabulary:
    tokens: list[str]
    freq: np.ndarray
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.freq = np.asarray(self.freq, dtype=np.int64)
        if len(self.tokens) != len(self.freq):
            raise ValueError("token list and frequency vector differ in length")
        if tuple(self.tokens[:N_RESERVED]) != SPECIAL_TOKENS:
            raise ValueError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def save(self, path):
        lines = [f"{tok}\t{int(c)}\n" for tok, c in zip(self.tokens, self.freq)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens, freq = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            tok, count = line.rsplit("\t", 1)
            tokens.append(tok)
            freq.append(int(count))
        return cls(tokens, freq)


def build_vocab(corpus: Iterable[str] | str, max_size: int) -> Vocabulary:
    """Count tokens over ``corpus`` (documents) and keep the most frequent.

    The vocabulary holds at most ``max_size`` entries: the five reserved ids
    followed by up to ``max_size - 5`` corpus tokens in descending frequency,
    ties broken by first occurrence. Occurrences of tokens that did not make the
    cut are credited to ``[UNK]``, so the counts always sum to the corpus size.
    """
    if max_size < N_RESERVED:
        raise ValueError(f"max_size must be at least {N_RESERVED}")
    if isinstance(corpus, str):
        corpus = [corpus]
    counts: Counter[str] = Counter()
    for doc in corpus:
        counts.update(t for t in tokenize(doc) if t not in _TERMINAL)
    if not counts:
        raise IngestionError("corpus contains no tokens")
    # Counter keeps first-insertion order and sorted() is stable
    ranked = sorted(counts.items(), key=lambda kv: -kv[1])
    kept = ranked[: max_size - N_RESERVED]
    unk = sum(c for _, c in ranked[max_size - N_RESERVED:])
    tokens = list(SPECIAL_TOKENS) + [t for t, _ in kept]
    freq = [0, 0, 0, 0, unk] + [c for _, c in kept]
    return Vocabulary(tokens, freq)


def encode(doc: str, vocab: Vocabulary) -> list[list[int]]:
    """Split a document into sentences of token ids; unknown words map to [UNK]."""
    return [[vocab.id(t) for t in sent] for sent in split_sentences(tokenize(doc))]


def read_documents(paths) -> list[str]:
    """Read corpus files, one non-blank document per line."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    docs = []
    for p in paths:
        try:
            text = Path(p).read_text(encoding="utf-8")
        except OSError as exc:
            raise IngestionError(f"cannot read corpus file {p}: {exc}") from exc
        docs.extend(line for line in text.splitlines() if line.strip())
    return docs


def encode_corpus(docs: Iterable[str], vocab: Vocabulary) -> list[list[list[int]]]:
    return [s for s in (encode(d, vocab) for d in docs) if s]

"""Deterministic English-like text for offline experiments.

Documents are generated from a small phrase-structure grammar over real
function words and pronounceable pseudo-word content words. Each document has
a topic that biases its content words, verbs agree in number with their
subjects, and lexical choices follow a Zipf law, so the text shows the usual
split between frequent, predictable function words and rare, hard content
words.
"""

from __future__ import annotations

import random
from itertools import accumulate
from pathlib import Path


def _cum(weights):
    return list(accumulate(weights))


_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "dr", "gl", "kr", "pl", "st", "tr", "sk", "th", "sh", "ch"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee", "oa"]
_CODAS = ["", "", "", "n", "r", "l", "m", "s", "k", "nd", "rt", "st"]

_DET_SG = ["the", "a", "this", "that", "every", "one", "no", "each"]
_DET_SG_W = _cum([40, 25, 8, 6, 3, 2, 2, 3])
_DET_PL = ["the", "some", "these", "those", "many", "few", "two", "all"]
_DET_PL_W = _cum([40, 12, 8, 6, 6, 3, 3, 4])
_PREPS = ["in", "on", "with", "from", "near", "under", "over", "after", "before",
          "without", "about", "of", "to", "at", "by"]
_PREPS_W = _cum([14, 9, 10, 6, 3, 3, 3, 3, 3, 2, 4, 16, 10, 5, 4])
_CONJ = ["and", "but", "because", "while", "so", "although", "when"]
_CONJ_W = _cum([30, 12, 8, 5, 6, 3, 6])
_PRONOUNS = {"he": "sg", "she": "sg", "it": "sg", "they": "pl", "we": "pl", "you": "pl"}
_MODALS = ["will", "can", "must", "should", "may"]
_INTENS = ["very", "quite", "rather", "too"]


def _pseudo_words(rng, n, taken, suffix=""):
    words = []
    while len(words) < n:
        syl = rng.choice([1, 2, 2, 2, 3])
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(syl))
        w += rng.choice(_CODAS) + suffix
        if w not in taken and len(w) > 2:
            taken.add(w)
            words.append(w)
    return words


def _zipf(n, s=1.07):
    return list(accumulate(1.0 / (r + 1) ** s for r in range(n)))



class _Lexicon:
    def __init__(self, rng, n_nouns, n_verbs, n_adj, n_adv, n_topics):
        taken = set(_DET_SG + _DET_PL + _PREPS + _CONJ + list(_PRONOUNS) + _MODALS + _INTENS
                    + ["is", "are", "was", "were", "has", "have", "had", "not", "did"])
        self.nouns = _pseudo_words(rng, n_nouns, taken)
        # plural forms and verb inflections must not collide with other words
        for w in self.nouns:
            taken.add(w + "s")
        self.verbs = _pseudo_words(rng, n_verbs, taken)
        for w in self.verbs:
            taken.update((w + "s", w + "ed"))
        self.adjs = _pseudo_words(rng, n_adj, taken)
        self.advs = _pseudo_words(rng, n_adv, taken, suffix="ly")
        self.noun_w = _zipf(n_nouns)
        self.verb_w = _zipf(n_verbs)
        self.adj_w = _zipf(n_adj)
        self.adv_w = _zipf(n_adv)
        self.topics = []
        for _ in range(n_topics):
            self.topics.append((rng.sample(range(n_nouns), 30), rng.sample(range(n_verbs), 12),
                                rng.sample(range(n_adj), 8)))


class _DocWriter:
    def __init__(self, lex, rng):
        self.lex = lex
        self.rng = rng
        self.topic = rng.choice(lex.topics)
        self.past = rng.random() < 0.5
        self.hero = self.topic[0][rng.randrange(5)]

    def _pick(self, words, weights, topical):
        rng = self.rng
        if topical and rng.random() < 0.55:
            return words[rng.choice(topical)]
        return rng.choices(words, cum_weights=weights)[0]

    def noun(self, plural):
        lex, rng = self.lex, self.rng
        w = lex.nouns[self.hero] if rng.random() < 0.12 else \
            self._pick(lex.nouns, lex.noun_w, self.topic[0])
        return w + "s" if plural else w

    def np(self, allow_pp=True, subject=False):
        rng = self.rng
        if subject and rng.random() < 0.18:
            pron = rng.choice(list(_PRONOUNS))
            return [pron], _PRONOUNS[pron] == "pl"
        plural = rng.random() < 0.35
        if plural:
            det = rng.choices(_DET_PL, cum_weights=_DET_PL_W)[0]
        else:
            det = rng.choices(_DET_SG, cum_weights=_DET_SG_W)[0]
        if not plural and det == "a" and rng.random() < 0.3:
            det = "an"
        out = [det]
        if rng.random() < 0.35:
            if rng.random() < 0.15:
                out.append(rng.choice(_INTENS))
            out.append(self._pick(self.lex.adjs, self.lex.adj_w, self.topic[2]))
        out.append(self.noun(plural))
        if allow_pp and rng.random() < 0.15:
            out += self.pp()
        return out, plural

    def pp(self):
        prep = self.rng.choices(_PREPS, cum_weights=_PREPS_W)[0]
        obj, _ = self.np(allow_pp=False)
        return [prep] + obj

    def verb(self, plural, past):
        v = self._pick(self.lex.verbs, self.lex.verb_w, self.topic[1])
        if past:
            return v + "ed"
        return v if plural else v + "s"

    def clause(self):
        rng = self.rng
        subj, plural = self.np(subject=True)
        past = self.past if rng.random() < 0.85 else not self.past
        kind = rng.random()
        out = list(subj)
        if kind < 0.5:
            if rng.random() < 0.12:
                out.append(rng.choices(self.lex.advs, cum_weights=self.lex.adv_w)[0])
            out.append(self.verb(plural, past))
            out += self.np()[0]
            if rng.random() < 0.3:
                out += self.pp()
        elif kind < 0.7:
            out.append(self.verb(plural, past))
            if rng.random() < 0.3:
                out.append(rng.choices(self.lex.advs, cum_weights=self.lex.adv_w)[0])
            if rng.random() < 0.5:
                out += self.pp()
        elif kind < 0.9:
            be = ("were" if plural else "was") if past else ("are" if plural else "is")
            out.append(be)
            if rng.random() < 0.1:
                out.append("not")
            if rng.random() < 0.25:
                out.append(rng.choice(_INTENS))
            out.append(self._pick(self.lex.adjs, self.lex.adj_w, self.topic[2]))
        else:
            out.append(rng.choice(_MODALS))
            out.append(self._pick(self.lex.verbs, self.lex.verb_w, self.topic[1]))
            out += self.np()[0]
        return out

    def sentence(self):
        rng = self.rng
        words = self.clause()
        while rng.random() < 0.3 and len(words) < 30:
            words += [","] if rng.random() < 0.5 else []
            words.append(rng.choices(_CONJ, cum_weights=_CONJ_W)[0])
            words += self.clause()
        text = " ".join(words).replace(" ,", ",")
        end = "." if rng.random() < 0.9 else rng.choice("!?")
        return text[0].upper() + text[1:] + end


def synthetic_documents(n_tokens: int, seed: int = 0, n_nouns: int = 2400, n_verbs: int = 700,
                        n_adj: int = 500, n_adv: int = 120, n_topics: int = 60) -> list[str]:
    """Generate documents until roughly ``n_tokens`` tokens have been written.

    Token counts follow :func:`tokdrop.corpus.tokenize` (commas count, the
    terminal mark does not). Output is a pure function of the arguments.
    """
    rng = random.Random(seed)
    lex = _Lexicon(rng, n_nouns, n_verbs, n_adj, n_adv, n_topics)
    docs, total = [], 0
    while total < n_tokens:
        w = _DocWriter(lex, rng)
        sents = []
        for _ in range(rng.randint(4, 14)):
            s = w.sentence()
            total += s.count(" ") + 1 + s.count(",")
            sents.append(s)
        docs.append(" ".join(sents))
    return docs


def write_synthetic_corpus(path, n_tokens: int, seed: int = 0) -> Path:
    path = Path(path)
    path.write_text("\n".join(synthetic_documents(n_tokens, seed)) + "\n", encoding="utf-8")
    return path

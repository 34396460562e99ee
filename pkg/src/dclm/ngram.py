"""Interpolated modified Kneser-Ney n-gram model with ARPA import/export.

Counts follow the usual "adjusted count" convention: the highest order
uses raw counts; lower orders use continuation counts (number of distinct
left neighbours) except for n-grams that begin with ``<s>``, which keep
their raw count because nothing can precede the sentence start.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from dclm.corpus import Dialog, DialogWindow, Lexicon, encode_turn

BOS_SYMBOL = "<s>"
FALLBACK_DISCOUNT = 0.75


@dataclass(frozen=True)
class Discounts:
    d1: float
    d2: float
    d3plus: float

    def __call__(self, count: int) -> float:
        if count <= 0:
            return 0.0
        return self.d1 if count == 1 else self.d2 if count == 2 else self.d3plus

    @classmethod
    def from_count_of_counts(cls, n1: int, n2: int, n3: int, n4: int) -> Discounts:
        """Chen-Goodman estimates, each D_i capped at i - 0.01 so D(c) < c.

        Too few statistics (a zero count-of-count, or an estimate <= 0 that
        would leave a context no mass for unseen words) fall back to 0.75.
        """
        fallback = cls(FALLBACK_DISCOUNT, FALLBACK_DISCOUNT, FALLBACK_DISCOUNT)
        if min(n1, n2, n3, n4) == 0:
            return fallback
        y = n1 / (n1 + 2 * n2)
        raw = (1 - 2 * y * n2 / n1, 2 - 3 * y * n3 / n2, 3 - 4 * y * n4 / n3)
        if min(raw) <= 0:
            return fallback
        return cls(*(min(d, i - 0.01) for i, d in enumerate(raw, start=1)))


class CountTrie:
    """Adjusted n-gram counts and per-context statistics for orders 1..N.

    ``counts[n]`` maps an n-gram tuple to its adjusted count;
    ``contexts[n]`` maps an (n-1)-gram context to
    ``(total, n_1, n_2, n_3plus)`` over its order-n extensions.
    """

    def __init__(self, order: int, bos: int):
        self.order = order
        self.bos = bos
        self.raw: list[Counter] = [Counter() for _ in range(order + 1)]
        self.counts: list[dict] = [{} for _ in range(order + 1)]
        self.contexts: list[dict] = [{} for _ in range(order + 1)]

    def add_sequence(self, ids: Sequence[int]) -> None:
        s = [self.bos] + list(ids)
        for i in range(1, len(s)):
            for n in range(1, self.order + 1):
                if i - n + 1 < 0:
                    break
                self.raw[n][tuple(s[i - n + 1:i + 1])] += 1

    def finalize(self) -> None:
        top = self.order
        self.counts[top] = dict(self.raw[top])
        for n in range(top - 1, 0, -1):
            left = Counter(g[1:] for g in self.raw[n + 1])
            adj = {}
            for g, c in self.raw[n].items():
                adj[g] = c if g[0] == self.bos else left[g]
            self.counts[n] = adj
        for n in range(1, top + 1):
            ctx: dict[tuple, list[int]] = defaultdict(lambda: [0, 0, 0, 0])
            for g, c in self.counts[n].items():
                st = ctx[g[:-1]]
                st[0] += c
                st[min(c, 3)] += 1
            self.contexts[n] = {h: tuple(v) for h, v in ctx.items()}

    def count_of_counts(self, n: int) -> tuple[int, int, int, int]:
        cc = Counter(self.counts[n].values())
        return cc[1], cc[2], cc[3], cc[4]

    def continuation_count(self, token: int) -> int:
        return self.counts[1].get((token,), 0) if self.order > 1 else 0


def train_counts(sequences: Iterable[Sequence[int]], order: int, bos: int) -> CountTrie:
    trie = CountTrie(order, bos)
    for seq in sequences:
        trie.add_sequence(seq)
    trie.finalize()
    return trie


class KneserNeyLM:
    """Modified Kneser-Ney LM over ids ``0..vocab_size-1``; ``<s>`` gets id ``vocab_size``."""

    def __init__(self, vocab_size: int, order: int = 5, cross_turn: bool = False):
        self.vocab_size = vocab_size
        self.order = order
        self.bos = vocab_size
        self.cross_turn = cross_turn
        self.trie = CountTrie(order, self.bos)
        self.trie.finalize()
        self.discounts: list[Discounts | None] = [None] * (order + 1)
        self._estimate_discounts()

    def fit(self, sequences: Iterable[Sequence[int]]) -> KneserNeyLM:
        self.trie = train_counts(sequences, self.order, self.bos)
        self._estimate_discounts()
        return self

    def _estimate_discounts(self) -> None:
        for n in range(1, self.order + 1):
            self.discounts[n] = Discounts.from_count_of_counts(*self.trie.count_of_counts(n))

    def interpolation_weight(self, context: tuple) -> float:
        """Mass left for the lower order after discounting (1 for unseen contexts)."""
        n = len(context) + 1
        st = self.trie.contexts[n].get(context)
        if st is None:
            return 1.0
        d = self.discounts[n]
        return (d.d1 * st[1] + d.d2 * st[2] + d.d3plus * st[3]) / st[0]

    def prob(self, history: Sequence[int], token: int) -> float:
        h = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        return self._prob(h, token)

    def _prob(self, h: tuple, token: int) -> float:
        n = len(h) + 1
        lower = self._prob(h[1:], token) if h else 1.0 / self.vocab_size
        st = self.trie.contexts[n].get(h)
        if st is None:
            return lower
        c = self.trie.counts[n].get(h + (token,), 0)
        d = self.discounts[n]
        gamma = (d.d1 * st[1] + d.d2 * st[2] + d.d3plus * st[3]) / st[0]
        return max(c - d(c), 0.0) / st[0] + gamma * lower

    def logprob(self, history: Sequence[int], token: int) -> float:
        return math.log(self.prob(history, token))

    # -- evaluation ------------------------------------------------------

    def _history(self, window: DialogWindow) -> list[int]:
        if not self.cross_turn:
            return [self.bos]
        hist = [self.bos]
        for t in window.context_turns:
            hist.extend(int(i) for i in t.ids)
        return hist

    def score_windows(self, windows) -> list[dict[str, np.ndarray]]:
        out = []
        for w in windows:
            hist = self._history(w)
            tt = w.target_turn
            lp = np.empty(len(tt))
            for t, tok in enumerate(tt.ids):
                lp[t] = self.logprob(hist, int(tok))
                hist.append(int(tok))
            out.append({"token": tt.ids, "pos": tt.pos, "da": tt.da, "logprob": lp})
        return out

    def perplexity(self, windows) -> float:
        recs = self.score_windows(windows)
        total = sum(-r["logprob"].sum() for r in recs)
        count = sum(len(r["logprob"]) for r in recs)
        return math.exp(total / count)

    # -- ARPA ------------------------------------------------------------

    def to_arpa(self, words: Sequence[str], header: Sequence[str] = ()) -> str:
        """Backoff-form ARPA text; every listed probability is the interpolated one."""
        sym = list(words) + [BOS_SYMBOL]

        def name(g):
            return " ".join(sym[i] for i in g)

        def log10(x):
            return repr(math.log10(x)) if x > 0 else "-99"

        sections = []
        unigrams = [(i,) for i in range(self.vocab_size)] + [(self.bos,)]
        listed = [unigrams] + [sorted(self.trie.counts[n]) for n in range(2, self.order + 1)]
        for n, grams in enumerate(listed, start=1):
            lines = []
            for g in grams:
                p = 0.0 if g == (self.bos,) else self._prob(g[:-1], g[-1])
                line = f"{log10(p)}\t{name(g)}"
                if n < self.order and g in self.trie.contexts[n + 1]:
                    line += f"\t{log10(self.interpolation_weight(g))}"
                lines.append(line)
            sections.append(lines)
        out = list(header)
        out += ["", "\\data\\"]
        out += [f"ngram {n}={len(s)}" for n, s in enumerate(sections, start=1)]
        for n, lines in enumerate(sections, start=1):
            out += ["", f"\\{n}-grams:"] + lines
        out += ["", "\\end\\", ""]
        return "\n".join(out)


def turn_streams(dialogs: Sequence[Dialog], lex: Lexicon, cross_turn: bool = False,
                 max_turn_len: int = 160) -> list[list[int]]:
    """Training sequences: one per turn, or one per dialog when ``cross_turn``."""
    seqs = []
    for d in dialogs:
        enc = [encode_turn(t, lex, max_turn_len).ids.tolist() for t in d.turns]
        if cross_turn:
            seqs.append([i for t in enc for i in t])
        else:
            seqs.extend(enc)
    return seqs


class ArpaLM:
    """Backoff scorer reading an ARPA file; shares ``score_windows`` with :class:`KneserNeyLM`."""

    def __init__(self, probs: dict[tuple, float], backoffs: dict[tuple, float], order: int,
                 words: list[str], header: list[str]):
        self.probs = probs
        self.backoffs = backoffs
        self.order = order
        self.words = words
        self.header = header
        self.vocab_size = len(words)
        self.bos = self.vocab_size
        self.cross_turn = False

    @classmethod
    def read(cls, text: str, words: Sequence[str]) -> ArpaLM:
        index = {w: i for i, w in enumerate(words)}
        index[BOS_SYMBOL] = len(words)
        header, probs, backoffs = [], {}, {}
        order = 0
        section = None
        for raw in text.splitlines():
            line = raw.strip()
            if section is None:
                if line == "\\data\\":
                    section = "data"
                else:
                    header.append(raw)
                continue
            if not line or line.startswith("ngram "):
                continue
            if line.startswith("\\") and line.endswith("-grams:"):
                section = int(line[1:line.index("-")])
                order = max(order, section)
                continue
            if line == "\\end\\":
                break
            parts = line.split("\t") if "\t" in line else line.split()
            lp = float(parts[0])
            toks = parts[1].split() if "\t" in line else parts[1:1 + section]
            rest = parts[2:] if "\t" in line else parts[1 + section:]
            try:
                g = tuple(index[t] for t in toks)
            except KeyError as err:
                raise ValueError(f"ARPA word {err} not in vocabulary") from None
            probs[g] = 10.0 ** lp
            if rest:
                backoffs[g] = 10.0 ** float(rest[0])
        return cls(probs, backoffs, order, list(words), header)

    def prob(self, history: Sequence[int], token: int) -> float:
        h = tuple(history)[-(self.order - 1):] if self.order > 1 else ()
        return self._prob(h, token)

    def _prob(self, h: tuple, token: int) -> float:
        p = self.probs.get(h + (token,))
        if p is not None:
            return p
        if not h:
            return 0.0
        return self.backoffs.get(h, 1.0) * self._prob(h[1:], token)

    def logprob(self, history, token) -> float:
        return math.log(self.prob(history, token))

    _history = KneserNeyLM._history
    score_windows = KneserNeyLM.score_windows
    perplexity = KneserNeyLM.perplexity

"""Synthetic two-speaker dialogs with a controllable cross-turn dependency.

``self-echo``
    turn k repeats the content of turn k-2 (the same speaker's previous turn)
``cross-echo``
    turn k repeats the content of turn k-1 (the other speaker's turn)
``none``
    every token is drawn uniformly and independently

Echoed tokens are resampled with probability ``noise`` so the dependency is
strong but not perfect.  Dialog ids are spread round-robin over the
``sw00``..``sw13`` folder prefixes so the regular folder split applies.
"""

from __future__ import annotations

import numpy as np

from dclm.corpus import Dialog, Turn, Utterance

DEPENDENCIES = ("self-echo", "cross-echo", "none")
POS_TAGS = ("NN", "VB", "PRP", "IN", "RB", "UH", "DT", "JJ")
DA_TAGS = ("sd", "b", "sv", "aa", "ba")
N_FOLDERS = 14


def token_name(i: int) -> str:
    return f"w{i:03d}"


def generate_synthetic(dialog_count: int, vocab_size: int, dependency: str,
                       rng: np.random.Generator, turns_per_dialog: int = 6,
                       min_len: int = 2, max_len: int = 5, noise: float = 0.02) -> list[Dialog]:
    if vocab_size < 10:
        raise ValueError("vocab_size must be at least 10")
    if dependency not in DEPENDENCIES:
        raise ValueError(f"dependency must be one of {DEPENDENCIES}, got {dependency!r}")
    lag = {"self-echo": 2, "cross-echo": 1, "none": 0}[dependency]
    dialogs = []
    for n in range(dialog_count):
        contents: list[np.ndarray] = []
        turns = []
        for k in range(turns_per_dialog):
            if lag and k >= lag:
                src = contents[k - lag]
                resample = rng.random(len(src)) < noise
                toks = np.where(resample, rng.integers(0, vocab_size, len(src)), src)
            else:
                length = int(rng.integers(min_len, max_len + 1))
                toks = rng.integers(0, vocab_size, length)
            contents.append(toks)
            words = [token_name(int(t)) for t in toks]
            pos = [POS_TAGS[int(t) % len(POS_TAGS)] for t in toks]
            if len(words) >= 4 and rng.random() < 0.3:
                cut = len(words) // 2
                spans = [(0, cut), (cut, len(words))]
            else:
                spans = [(0, len(words))]
            utts = [Utterance(words[a:b], pos[a:b], DA_TAGS[int(rng.integers(len(DA_TAGS)))])
                    for a, b in spans]
            turns.append(Turn("AB"[k % 2], utts))
        dialogs.append(Dialog(f"sw{n % N_FOLDERS:02d}_{n:05d}", turns))
    return dialogs

import json
import sys

import numpy as np
import pytest

from dclm.corpus import Dialog, Turn, Utterance


def central_diff(f, x, eps=1e-4):
    """Independent finite-difference oracle (kept separate from dclm.gradcheck)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        up = f()
        x[i] = old - eps
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def make_dialog(dialog_id, turns):
    """``turns`` is a list of (speaker, [(tokens, da), ...]); POS tags default to NN."""
    out = []
    for speaker, utts in turns:
        out.append(Turn(speaker, [Utterance(list(toks), ["NN"] * len(toks), da) for toks, da in utts]))
    return Dialog(dialog_id, out)


def simple_dialog(dialog_id, token_turns, da="sd"):
    return make_dialog(dialog_id, [("AB"[i % 2], [(toks, da)]) for i, toks in enumerate(token_turns)])


def record(dialog_id, turns):
    return json.dumps({"dialog_id": dialog_id, "turns": [
        {"speaker": s, "utterances": [{"tokens": t, "pos": ["NN"] * len(t), "da": "sd"}]}
        for s, t in turns]})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)

import math

import numpy as np
import pytest

from dclm.corpus import build_vocab, make_windows
from dclm.evaluator import (EvalReport, TagStats, aggregate, evaluate, headline_gain,
                            relative_change, render_perplexity_table, render_tag_table)
from dclm.models import DialogLM, ModelConfig, Variant
from dclm.ngram import KneserNeyLM, turn_streams
from dclm.synthetic import generate_synthetic


class UniformScorer:
    def __init__(self, v):
        self.v = v

    def score_windows(self, windows):
        return [{"token": w.target_turn.ids, "pos": w.target_turn.pos, "da": w.target_turn.da,
                 "logprob": np.full(len(w.target_turn), -math.log(self.v))} for w in windows]


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic(150, 40, "cross-echo", np.random.default_rng(0))
    lex = build_vocab(ds)
    return ds, lex, make_windows(ds, 2, lex)


@pytest.fixture(scope="module")
def neural(data):
    _, lex, _ = data
    cfg = ModelConfig(vocab_size=lex.words.size, embed_dim=8, hidden_dim=8)
    return DialogLM.create(Variant.CCDCLM, cfg, np.random.default_rng(0), k=2)


def check_partitions(report):
    for name in ("pos", "da"):
        part = report.partition(name)
        assert sum(s.token_count for s in part.values()) == report.overall.token_count
        total = math.fsum(s.total_neg_logprob for s in part.values())
        assert abs(total - report.overall.total_neg_logprob) <= 1e-6


def test_uniform_scorer_is_flat_everywhere(data):
    ds, lex, ws = data
    r = evaluate(UniformScorer(10), ws, 2, lex)
    assert r.perplexity == pytest.approx(10.0, rel=1e-12)
    for part in (r.per_pos, r.per_da):
        for s in part.values():
            assert s.perplexity == pytest.approx(10.0, rel=1e-12)
    assert r.overall.token_count == sum(len(w.target_turn) for w in ws)


def test_partition_identity_neural(data, neural):
    _, lex, ws = data
    check_partitions(evaluate(neural, ws, 2, lex))


def test_partition_identity_ngram(data):
    ds, lex, ws = data
    lm = KneserNeyLM(lex.words.size, 3).fit(turn_streams(ds, lex))
    r = evaluate(lm, ws, 2, lex)
    check_partitions(r)
    assert r.variant == "KneserNeyLM"


def test_report_does_not_depend_on_window_order(data, neural):
    _, lex, ws = data
    a = evaluate(neural, ws, 2, lex)
    shuffled = [ws[i] for i in np.random.default_rng(3).permutation(len(ws))]
    b = evaluate(neural, shuffled, 2, lex)
    assert a.to_json() == b.to_json()


@pytest.mark.parametrize("threads", [2, 3])
def test_threads_give_identical_reports(data, neural, threads):
    _, lex, ws = data
    assert evaluate(neural, ws, 2, lex, threads=threads).to_json() == \
        evaluate(neural, ws, 2, lex).to_json()


def test_k_mismatch_rejected(data, neural):
    ds, lex, _ = data
    with pytest.raises(ValueError, match="K=2"):
        evaluate(neural, make_windows(ds, 3, lex), 3, lex)
    with pytest.raises(ValueError):
        evaluate(neural, [], 2, lex)


def test_relative_change(data, neural):
    ds, lex, ws = data
    r = evaluate(neural, ws, 2, lex, model_id="a")
    same = relative_change(r, r)
    assert same["overall"] == 0.0
    assert all(v == 0.0 for v in same["pos"].values())
    flat = evaluate(UniformScorer(lex.words.size), ws, 2, lex, model_id="u")
    ch = relative_change(r, flat)
    assert ch["overall"] == pytest.approx(100 * (r.perplexity - lex.words.size) / lex.words.size)
    fewer = evaluate(neural, ws[:-3], 2, lex)
    with pytest.raises(ValueError):
        relative_change(fewer, r)


def test_relative_change_partition_mismatch():
    a = EvalReport("a", "x", 1, TagStats(4, 4.0), {"NN": TagStats(4, 4.0)}, {"sd": TagStats(4, 4.0)})
    b = EvalReport("b", "x", 1, TagStats(4, 4.0), {"VB": TagStats(4, 4.0)}, {"sd": TagStats(4, 4.0)})
    with pytest.raises(ValueError, match="pos"):
        relative_change(a, b)


def test_headline_gain():
    assert round(headline_gain(58.4, 60.4), 2) == 3.31
    assert headline_gain(60.4, 60.4) == 0.0
    assert headline_gain(30.0, 60.0) == 50.0
    assert headline_gain(66.0, 60.0) < 0
    with pytest.raises(ValueError):
        headline_gain(0.0, 60.0)


def test_aggregate_by_hand(data):
    _, lex, _ = data
    nn, vb = lex.pos.encode("NN"), lex.pos.encode("VB")
    sd, b = lex.da.encode("sd"), lex.da.encode("b")
    recs = [{"token": np.array([2, 3]), "pos": np.array([nn, vb]), "da": np.array([sd, sd]),
             "logprob": np.array([-1.0, -2.0])},
            {"token": np.array([4]), "pos": np.array([nn]), "da": np.array([b]),
             "logprob": np.array([-3.0])}]
    r = aggregate(recs, lex, "m", "v", 1)
    assert r.overall == TagStats(3, 6.0)
    assert r.per_pos == {"NN": TagStats(2, 4.0), "VB": TagStats(1, 2.0)}
    assert r.per_da == {"sd": TagStats(2, 3.0), "b": TagStats(1, 3.0)}
    assert r.perplexity == pytest.approx(math.exp(2.0))
    with pytest.raises(ValueError):
        aggregate([], lex, "m", "v", 1)


def test_json_roundtrip(data, neural):
    _, lex, ws = data
    r = evaluate(neural, ws, 2, lex, model_id="ccd")
    back = EvalReport.from_json(r.to_json())
    assert back == r
    assert back.dumps() == r.dumps()


def test_renderers(data, neural):
    _, lex, ws = data
    base = evaluate(UniformScorer(lex.words.size), ws, 2, lex, model_id="uniform", variant="flat")
    r = evaluate(neural, ws, 2, lex, model_id="ccd")
    table = render_perplexity_table([base, r])
    lines = table.splitlines()
    assert "K=2" in lines[0]
    assert lines[2].startswith("ccd")          # lower perplexity first
    assert f"{lex.words.size:.2f}" in lines[3]
    tags = render_tag_table([r], base, "da")
    assert "Statement-non-opinion" in tags and "<eot>" not in tags
    assert len(tags.splitlines()) == 2 + 5
    pos = render_tag_table([r], base, "pos", top=3)
    assert len(pos.splitlines()) == 2 + 3


def test_top_tags_excludes_sentinel(data, neural):
    _, lex, ws = data
    r = evaluate(neural, ws, 2, lex)
    assert "<eot>" in r.per_pos
    top = r.top_tags("pos", 20)
    assert "<eot>" not in top
    counts = [r.per_pos[t].token_count for t in top]
    assert counts == sorted(counts, reverse=True)

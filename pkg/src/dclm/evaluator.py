"""Last-turn perplexity reports with per-POS and per-dialog-act partitions."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from dclm.corpus import EOT, Lexicon
from dclm.models import SCORE_BATCH, window_sort_key

# Display names for the most common SwDA dialog-act tags.
DA_NAMES = {
    "sd": "Statement-non-opinion",
    "b": "Acknowledge",
    "sv": "Statement-opinion",
    "aa": "Agree/Accept",
    "ba": "Appreciation",
    "%": "Uninterpretable",
    "qy": "Yes-No-Question",
    "x": "Non-verbal",
    "ny": "Yes-Answers",
    "fc": "Conventional-closing",
}


@dataclass
class TagStats:
    token_count: int
    total_neg_logprob: float

    @property
    def perplexity(self) -> float:
        return math.exp(self.total_neg_logprob / self.token_count)

    def to_json(self) -> dict:
        return {"token_count": self.token_count, "total_neg_logprob": self.total_neg_logprob,
                "perplexity": self.perplexity}


@dataclass
class EvalReport:
    model_id: str
    variant: str
    k: int
    overall: TagStats
    per_pos: dict[str, TagStats] = field(default_factory=dict)
    per_da: dict[str, TagStats] = field(default_factory=dict)
    baseline_id: str | None = None

    @property
    def perplexity(self) -> float:
        return self.overall.perplexity

    def partition(self, name: str) -> dict[str, TagStats]:
        return {"pos": self.per_pos, "da": self.per_da}[name]

    def top_tags(self, name: str, n: int = 5) -> list[str]:
        """The ``n`` most frequent tags of a partition, excluding the ``<eot>`` sentinel."""
        part = self.partition(name)
        tags = [t for t in part if t != EOT]
        return sorted(tags, key=lambda t: (-part[t].token_count, t))[:n]

    def to_json(self) -> dict:
        return {
            "model_id": self.model_id, "variant": self.variant, "k": self.k,
            "baseline_id": self.baseline_id,
            "overall": self.overall.to_json(),
            "per_pos_tag": {t: s.to_json() for t, s in sorted(self.per_pos.items())},
            "per_da_tag": {t: s.to_json() for t, s in sorted(self.per_da.items())},
        }

    @classmethod
    def from_json(cls, obj: dict) -> EvalReport:
        def stats(d):
            return TagStats(int(d["token_count"]), float(d["total_neg_logprob"]))
        return cls(obj["model_id"], obj["variant"], int(obj["k"]), stats(obj["overall"]),
                   {t: stats(s) for t, s in obj["per_pos_tag"].items()},
                   {t: stats(s) for t, s in obj["per_da_tag"].items()},
                   obj.get("baseline_id"))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _partition(values: np.ndarray, keys: np.ndarray, names) -> dict[str, TagStats]:
    out = {}
    for key in np.unique(keys):
        sel = values[keys == key]
        out[names[int(key)]] = TagStats(int(sel.size), math.fsum(sel.tolist()))
    return out


def aggregate(records, lex: Lexicon, model_id: str, variant: str, k: int) -> EvalReport:
    """Fold per-token score records into a report.

    Sums use ``math.fsum`` so the report does not depend on record order.
    """
    records = list(records)
    if not records:
        raise ValueError("no records to aggregate")
    nll = np.concatenate([-r["logprob"] for r in records])
    pos = np.concatenate([r["pos"] for r in records])
    da = np.concatenate([r["da"] for r in records])
    overall = TagStats(int(nll.size), math.fsum(nll.tolist()))
    return EvalReport(model_id, variant, k, overall,
                      _partition(nll, pos, lex.pos.id_to_token),
                      _partition(nll, da, lex.da.id_to_token))


def evaluate(model, windows, k: int, lex: Lexicon, model_id: str = "model",
             variant: str | None = None, threads: int = 1) -> EvalReport:
    """Score the last turn of every window and build an :class:`EvalReport`.

    ``model`` is anything with ``score_windows(windows)``; neural models
    carrying a ``k`` attribute must match the requested ``k``.
    """
    windows = list(windows)
    if not windows:
        raise ValueError("cannot evaluate an empty window set")
    model_k = getattr(model, "k", None)
    if model_k is not None and model_k != k:
        raise ValueError(f"model was trained with K={model_k}, evaluation requested K={k}")
    if any(w.k != k for w in windows):
        raise ValueError(f"evaluation windows must all have K={k}")
    if variant is None:
        v = getattr(model, "variant", None)
        variant = getattr(v, "value", None) or type(model).__name__
    if threads > 1:
        # chunk along batch boundaries of the sorted order so every batch, and
        # hence every logprob, is the same as in a single-threaded run
        windows = sorted(windows, key=window_sort_key)
        n_batches = -(-len(windows) // SCORE_BATCH)
        per = -(-n_batches // threads) * SCORE_BATCH
        chunks = [windows[i:i + per] for i in range(0, len(windows), per)]
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(model.score_windows, chunks))
        records = [r for part in parts for r in part]
    else:
        records = model.score_windows(windows)
    return aggregate(records, lex, model_id, variant, k)


def relative_change(report: EvalReport, baseline: EvalReport) -> dict:
    """Percent perplexity change ``100 (ppl - ppl_base) / ppl_base``; negative is a gain."""
    def pct(a: TagStats, b: TagStats) -> float:
        return 100.0 * (a.perplexity - b.perplexity) / b.perplexity

    if report.overall.token_count != baseline.overall.token_count:
        raise ValueError("reports cover different test sets (token counts differ)")
    out = {"overall": pct(report.overall, baseline.overall)}
    for name in ("pos", "da"):
        mine, base = report.partition(name), baseline.partition(name)
        if set(mine) != set(base) or any(mine[t].token_count != base[t].token_count for t in mine):
            raise ValueError(f"{name} partitions differ between {report.model_id} "
                             f"and {baseline.model_id}")
        out[name] = {t: pct(mine[t], base[t]) for t in sorted(mine)}
    return out


def headline_gain(contextual_ppl: float, single_turn_ppl: float) -> float:
    """Relative perplexity reduction (percent) of a contextual model over the single-turn one."""
    if contextual_ppl <= 0 or single_turn_ppl <= 0:
        raise ValueError("perplexities must be positive")
    return 100.0 * (single_turn_ppl - contextual_ppl) / single_turn_ppl


# ---------------------------------------------------------------------------
# text rendering


def render_perplexity_table(reports: list[EvalReport]) -> str:
    """One row per model, one perplexity column per K seen."""
    ks = sorted({r.k for r in reports})
    rows = {}
    for r in reports:
        rows.setdefault(r.model_id, (r.variant, {}))[1][r.k] = r.perplexity
    head = f"{'Model':<24}{'Variant':<14}" + "".join(f"{'K=' + str(k):>10}" for k in ks)
    lines = [head, "-" * len(head)]
    order = sorted(rows, key=lambda m: min(rows[m][1].values()))
    for mid in order:
        variant, vals = rows[mid]
        cells = "".join(f"{vals[k]:>10.2f}" if k in vals else f"{'-':>10}" for k in ks)
        lines.append(f"{mid:<24}{variant:<14}{cells}")
    return "\n".join(lines)


def render_tag_table(reports: list[EvalReport], baseline: EvalReport, partition: str,
                     top: int = 5) -> str:
    """Relative change (%) per frequent tag against ``baseline``, one column per model."""
    tags = baseline.top_tags(partition, top)
    changes = [relative_change(r, baseline)[partition] for r in reports]
    label = "POS Tag" if partition == "pos" else "DA Tag"
    width = 24
    head = f"{label:<{width}}" + "".join(f"{r.model_id:>14}" for r in reports)
    lines = [head, "-" * len(head)]
    for t in tags:
        name = DA_NAMES.get(t, t) if partition == "da" else t
        lines.append(f"{name:<{width}}" + "".join(f"{c[t]:>14.1f}" for c in changes))
    return "\n".join(lines)

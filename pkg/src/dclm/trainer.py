"""Mini-batch training with Adam, global-norm clipping, dropout and output-layer L2."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from dclm.models import Batch, DialogLM, ModelConfig, Variant, apply_embeddings, build_params
from dclm.optim import AdamState, adam_step, clip_by_global_norm, global_norm
from dclm.tensor import Tape, add, backward, mul

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    k: int = 3
    batch_size: int = 16
    max_epochs: int = 15
    patience: int = 5
    seed: int = 0
    keep_prob: float = 0.8
    clip_norm: float = 5.0
    l2_lambda: float = 1e-4
    alpha: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    bucket_batches: int = 50

    def validate(self) -> None:
        for name in ("k", "batch_size", "patience", "bucket_batches"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float          # mean nats per target token, dropout active
    valid_perplexity: float
    steps: int
    clip_count: int
    max_grad_norm: float
    wall_time: float = 0.0

    def to_json(self, timing: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not timing:
            d.pop("wall_time")
        return d


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    initial_valid_perplexity: float = math.nan

    def to_jsonl(self, timing: bool = False) -> str:
        return "".join(json.dumps(r.to_json(timing), sort_keys=True) + "\n" for r in self.records)

    def write(self, path, timing: bool = False) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl(timing))


def make_batches(windows, batch_size: int, rng: np.random.Generator,
                 bucket_batches: int = 50) -> list[list]:
    """Shuffle, bucket by target-turn length inside chunks, then shuffle batch order."""
    order = rng.permutation(len(windows))
    chunk = batch_size * bucket_batches
    batches = []
    for s in range(0, len(order), chunk):
        part = sorted(order[s:s + chunk], key=lambda i: len(windows[i].target_turn))
        batches.extend(part[j:j + batch_size] for j in range(0, len(part), batch_size))
    perm = rng.permutation(len(batches))
    return [[windows[i] for i in batches[b]] for b in perm]


def evaluate_validation(model: DialogLM, windows, batch_size: int = 64) -> float:
    """Perplexity over the target turns of ``windows`` (eval mode)."""
    windows = list(windows)
    if not windows:
        raise ValueError("cannot evaluate an empty window set")
    total, count = 0.0, 0
    for rec in model.score_windows(windows, batch_size):
        total -= float(rec["logprob"].sum())
        count += len(rec["logprob"])
    return math.exp(total / count)


def batch_objective(model: DialogLM, batch: Batch, l2_lambda: float, training: bool,
                    rng: np.random.Generator | None):
    """Mean window loss plus ``l2_lambda * (|W_o|^2 + |b_o|^2)``; returns (loss, forward result)."""
    res = model.forward(batch, training=training, rng=rng)
    loss = mul(res.loss, 1.0 / batch.size)
    if l2_lambda:
        loss = add(loss, mul(model.l2_penalty(), l2_lambda))
    return loss, res


def train_step(model: DialogLM, batch: Batch, adam: AdamState, tc: TrainConfig,
               rng: np.random.Generator | None, training: bool = True):
    model.params.zero_grad()
    with Tape():
        loss, res = batch_objective(model, batch, tc.l2_lambda, training, rng)
        if not np.isfinite(loss.values).all():
            raise DivergenceError(f"non-finite training loss at Adam step {adam.step + 1}")
        backward(loss)
    grads, norm = clip_by_global_norm(model.params.grads(), tc.clip_norm)
    if not math.isfinite(norm):
        raise DivergenceError(f"non-finite gradient norm at Adam step {adam.step + 1}")
    clipped = global_norm(grads)
    assert clipped <= tc.clip_norm + 1e-9, f"post-clip norm {clipped} exceeds {tc.clip_norm}"
    adam_step(model.params, grads, adam)
    return loss.item(), res, norm


def train(variant, model_config: ModelConfig, tc: TrainConfig, train_windows, valid_windows,
          params=None, on_epoch=None, embeddings=None) -> tuple[DialogLM, TrainLog]:
    """Train with early stopping on validation perplexity; returns the best model.

    ``embeddings`` (see :func:`dclm.models.load_embedding_file`) replaces the
    random initial word vectors wherever a row is given.
    """
    tc.validate()
    variant = Variant.parse(variant)
    train_windows, valid_windows = list(train_windows), list(valid_windows)
    if not train_windows or not valid_windows:
        raise ValueError("training and validation window sets must be nonempty")
    for w in train_windows + valid_windows:
        if w.k != tc.k:
            raise ValueError(f"window from {w.dialog_id} has K={w.k}, config says K={tc.k}")
    cfg = dataclasses.replace(model_config, keep_prob=tc.keep_prob, l2_lambda=tc.l2_lambda)
    rng = np.random.default_rng(tc.seed)
    if params is None:
        params = build_params(variant, cfg, rng)
    if embeddings is not None:
        apply_embeddings(params, embeddings)
    model = DialogLM(variant, cfg, params, k=tc.k)
    adam = AdamState(tc.alpha, tc.beta1, tc.beta2, tc.epsilon)
    tlog = TrainLog()
    best = model.params.copy()
    if tc.max_epochs == 0:
        return model, tlog
    tlog.initial_valid_perplexity = evaluate_validation(model, valid_windows)
    best_ppl = math.inf
    stale = 0
    for epoch in range(1, tc.max_epochs + 1):
        t0 = time.perf_counter()
        nll, tokens, clips, max_norm, steps = 0.0, 0.0, 0, 0.0, 0
        for chunk in make_batches(train_windows, tc.batch_size, rng, tc.bucket_batches):
            _, res, norm = train_step(model, Batch.from_windows(chunk), adam, tc, rng)
            nll += float(res.window_losses().sum())
            tokens += float(res.mask.sum())
            clips += norm > tc.clip_norm
            max_norm = max(max_norm, norm)
            steps += 1
        ppl = evaluate_validation(model, valid_windows)
        rec = EpochRecord(epoch, nll / tokens, ppl, steps, int(clips), max_norm,
                          time.perf_counter() - t0)
        tlog.records.append(rec)
        log.info("%s epoch %d: train %.4f nats/token, valid ppl %.3f, %d clips",
                 variant.value, epoch, rec.train_loss, ppl, clips)
        if on_epoch is not None:
            on_epoch(rec)
        if ppl < best_ppl:
            best_ppl, best, stale = ppl, model.params.copy(), 0
            tlog.best_epoch = epoch
        else:
            stale += 1
            if stale >= tc.patience:
                break
    return DialogLM(variant, cfg, best, k=tc.k), tlog

"""Central finite-difference checks of tape gradients for whole models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dclm.corpus import build_vocab, make_windows
from dclm.models import Batch, DialogLM, ModelConfig, Variant
from dclm.synthetic import generate_synthetic
from dclm.tensor import Tape, backward
from dclm.trainer import batch_objective

# Gradient entries below this magnitude are compared in absolute terms:
# central differences on an O(10)-nat loss cannot resolve them further.
GRAD_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def numeric_gradient(f, x: np.ndarray, eps: float = 1e-4) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)
    return g


@dataclass
class GradCheckResult:
    variant: str
    seed: int
    per_param: dict[str, float]

    @property
    def max_error(self) -> float:
        return max(self.per_param.values())


def toy_windows(vocab_size: int, k: int, rng: np.random.Generator, n_windows: int = 2,
                max_len: int = 6):
    """Random short-turn windows whose lexicon has exactly ``vocab_size`` word ids."""
    n_words = vocab_size - 2
    while True:
        dialogs = generate_synthetic(max(4, n_windows), max(n_words, 10), "none", rng,
                                     turns_per_dialog=k, min_len=1, max_len=max_len)
        lex = build_vocab(dialogs, cap=n_words)
        if lex.words.size == vocab_size:
            return make_windows(dialogs, k, lex)[:n_windows], lex


def check_model(model: DialogLM, batch: Batch, eps: float = 1e-4, l2_lambda: float = 1e-4
                ) -> dict[str, float]:
    """Max relative error per parameter between tape gradients and central differences."""
    model.params.zero_grad()
    with Tape():
        loss, _ = batch_objective(model, batch, l2_lambda, training=False, rng=None)
        backward(loss)
    analytic = {name: p.grad.copy() for name, p in model.params.items()}

    def f():
        return batch_objective(model, batch, l2_lambda, training=False, rng=None)[0].item()

    out = {}
    for name, p in model.params.items():
        numeric = numeric_gradient(f, p.values, eps)
        out[name] = float(relative_error(analytic[name], numeric).max())
    return out


def gradcheck_variant(variant, dims: int = 8, vocab_size: int = 20, k: int = 3, seed: int = 0,
                      eps: float = 1e-4) -> GradCheckResult:
    variant = Variant.parse(variant)
    rng = np.random.default_rng(seed)
    windows, lex = toy_windows(vocab_size, k, rng)
    cfg = ModelConfig(vocab_size=vocab_size, embed_dim=dims, hidden_dim=dims,
                      external_state_dim=dims, da_vocab_size=lex.da.size, da_embed_dim=dims,
                      keep_prob=1.0)
    # larger init than training so gate saturation and all paths are exercised
    cfg.init_scale = 0.5
    cfg.embed_init_scale = 0.5
    model = DialogLM.create(variant, cfg, rng)
    errs = check_model(model, Batch.from_windows(windows), eps)
    return GradCheckResult(variant.value, seed, errs)

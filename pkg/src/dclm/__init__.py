"""LSTM language models that condition on the preceding turns of a dialog.

A small float64 autodiff core (:mod:`dclm.tensor`) drives seven model
variants, a modified Kneser-Ney baseline, training with early stopping and
per-tag perplexity evaluation.
"""

from dclm.corpus import Dialog, Lexicon, build_vocab, make_windows, read_corpus
from dclm.evaluator import EvalReport, evaluate, headline_gain
from dclm.models import DialogLM, ModelConfig, Variant
from dclm.ngram import KneserNeyLM
from dclm.trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Dialog", "DialogLM", "EvalReport", "KneserNeyLM", "Lexicon", "ModelConfig", "TrainConfig",
    "Variant", "build_vocab", "evaluate", "headline_gain", "make_windows", "read_corpus", "train",
]

"""LSTM language models over dialog windows with different context wiring.

Every variant is the same word-level LSTM LM.  They differ only in

* the context vector ``c`` concatenated to the word embedding at every
  step of the target turn, and
* the initial recurrent state ``h_0`` of the target turn.

==============  ======================================  =========================
variant         c                                       h_0
==============  ======================================  =========================
SingleTurn      none                                    zeros
BoWContext      mean embedding of all context tokens    zeros
DRNNLM          none                                    final state of turn k-1
CCDCLM          final hidden of turn k-1                zeros
IDCLM           final hidden of turn k-1                final state of turn k-2
ESIDCLM         external state s_{k-1}                  final state of turn k-2
DACLM           DA-tag RNN over context dialog acts     zeros
==============  ======================================  =========================

Turn inputs are ``<eot> w_1 ... w_{T-1}`` with targets ``w_1 ... w_T`` where
``w_T`` is ``<eot>``; the "final state" of a turn is the state after its last
input, i.e. after reading every content word.
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, fields

import numpy as np

from dclm.corpus import EOT_ID, DialogWindow
from dclm.layers import LstmState, dropout_mask, log_softmax_values, lstm_bias, lstm_step, \
    softmax_cross_entropy, uniform_init
from dclm.params import ParameterSet
from dclm.tensor import Tensor, concat, embedding, embedding_bag, matmul, add, mul, reshape, \
    stack, sum_


class Variant(str, enum.Enum):
    SingleTurn = "SingleTurn"
    BoWContext = "BoWContext"
    DRNNLM = "DRNNLM"
    CCDCLM = "CCDCLM"
    IDCLM = "IDCLM"
    ESIDCLM = "ESIDCLM"
    DACLM = "DACLM"

    @classmethod
    def parse(cls, name) -> Variant:
        if isinstance(name, Variant):
            return name
        key = str(name).replace("-", "").replace("_", "").lower()
        for v in cls:
            if v.value.lower() == key:
                return v
        raise ValueError(f"unknown variant {name!r}; choose from {[v.value for v in cls]}")


CONTEXT_DIM_SOURCE = {
    Variant.SingleTurn: None,
    Variant.BoWContext: "embed_dim",
    Variant.DRNNLM: None,
    Variant.CCDCLM: "hidden_dim",
    Variant.IDCLM: "hidden_dim",
    Variant.ESIDCLM: "external_state_dim",
    Variant.DACLM: "external_state_dim",
}

OUTPUT_PARAMS = ("out.w", "out.b")
SCORE_BATCH = 64


@dataclass
class ModelConfig:
    vocab_size: int
    embed_dim: int
    hidden_dim: int
    external_state_dim: int | None = None
    da_vocab_size: int | None = None
    da_embed_dim: int | None = None
    keep_prob: float = 0.8
    l2_lambda: float = 1e-4
    init_scale: float = 0.08
    embed_init_scale: float = 0.1
    forget_bias: float = 1.0
    loss_all_turns: bool = False

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> ModelConfig:
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})

    def validate(self, variant: Variant) -> None:
        for name in ("vocab_size", "embed_dim", "hidden_dim"):
            if getattr(self, name) is None or getattr(self, name) <= 0:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError("keep_prob must lie in (0, 1]")
        if variant in (Variant.ESIDCLM, Variant.DACLM) and not self.external_state_dim:
            raise ValueError(f"{variant.value} needs external_state_dim")
        if variant is Variant.DACLM and not (self.da_vocab_size and self.da_embed_dim):
            raise ValueError("DACLM needs da_vocab_size and da_embed_dim")
        if variant is Variant.DACLM and self.loss_all_turns:
            raise ValueError("loss_all_turns is not supported for DACLM")

    def context_dim(self, variant: Variant) -> int:
        src = CONTEXT_DIM_SOURCE[variant]
        return 0 if src is None else getattr(self, src)


def param_shapes(variant: Variant, cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    variant = Variant.parse(variant)
    e, h, v = cfg.embed_dim, cfg.hidden_dim, cfg.vocab_size
    shapes = {
        "embed": (v, e),
        "lstm.w_x": (e + cfg.context_dim(variant), 4 * h),
        "lstm.w_h": (h, 4 * h),
        "lstm.b": (4 * h,),
        "out.w": (h, v),
        "out.b": (v,),
    }
    s = cfg.external_state_dim
    if variant is Variant.ESIDCLM:
        shapes.update({"es.w_x": (h, 4 * s), "es.w_h": (s, 4 * s), "es.b": (4 * s,)})
    if variant is Variant.DACLM:
        de = cfg.da_embed_dim
        shapes.update({"da.embed": (cfg.da_vocab_size, de), "da.w_x": (de, 4 * s),
                       "da.w_h": (s, 4 * s), "da.b": (4 * s,)})
    return dict(sorted(shapes.items()))


def build_params(variant, cfg: ModelConfig, rng: np.random.Generator) -> ParameterSet:
    """Initialise exactly the parameters ``variant`` needs, in sorted-name order."""
    variant = Variant.parse(variant)
    cfg.validate(variant)
    params = ParameterSet()
    for name, shape in param_shapes(variant, cfg).items():
        if name.endswith("embed"):
            value = uniform_init(rng, shape, cfg.embed_init_scale)
        elif name in ("lstm.b", "es.b", "da.b"):
            value = lstm_bias(shape[0] // 4, cfg.forget_bias)
        elif name == "out.b":
            value = np.zeros(shape)
        else:
            value = uniform_init(rng, shape, cfg.init_scale)
        params.add(name, value)
    return params


def load_embedding_file(path, vocab, embed_dim: int) -> tuple[np.ndarray, int]:
    """Read ``word v_1 ... v_d`` text lines (word2vec/GloVe text layout).

    Returns a ``[vocab.size, embed_dim]`` array holding the vectors of
    in-vocabulary words and NaN rows elsewhere, plus the number of rows
    filled.  A leading ``count dim`` header line is skipped.
    """
    table = np.full((vocab.size, embed_dim), np.nan)
    filled = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                continue
            if len(parts) - 1 != embed_dim:
                raise ValueError(f"{path}:{lineno}: vector has {len(parts) - 1} values, "
                                 f"embed_dim is {embed_dim}")
            word = parts[0].lower()
            if word in vocab and np.isnan(table[vocab.encode(word), 0]):
                table[vocab.encode(word)] = np.array(parts[1:], dtype=np.float64)
                filled += 1
    return table, filled


def apply_embeddings(params: ParameterSet, table: np.ndarray) -> None:
    """Overwrite rows of ``params["embed"]`` where ``table`` is not NaN."""
    emb = params["embed"].values
    if table.shape != emb.shape:
        raise ValueError(f"embedding table {table.shape} does not match {emb.shape}")
    keep = ~np.isnan(table).any(axis=1)
    emb[keep] = table[keep]


# ---------------------------------------------------------------------------
# batching


@dataclass
class TurnBatch:
    inputs: np.ndarray   # [B, L] ids fed to the LSTM
    targets: np.ndarray  # [B, L] ids to predict
    mask: np.ndarray     # [B, L] 1.0 on real positions
    lengths: np.ndarray  # [B]

    @property
    def width(self) -> int:
        return self.inputs.shape[1]


def _turn_batch(ids_list) -> TurnBatch:
    lengths = np.array([len(x) for x in ids_list], dtype=np.int64)
    width = int(lengths.max())
    b = len(ids_list)
    targets = np.full((b, width), EOT_ID, dtype=np.int64)
    inputs = np.full((b, width), EOT_ID, dtype=np.int64)
    mask = np.zeros((b, width))
    for r, ids in enumerate(ids_list):
        n = len(ids)
        targets[r, :n] = ids
        inputs[r, 1:n] = ids[:-1]
        mask[r, :n] = 1.0
    return TurnBatch(inputs, targets, mask, lengths)


@dataclass
class Batch:
    windows: list[DialogWindow]
    turns: list[TurnBatch]          # K entries, last is the target
    da_seq: np.ndarray              # [B, M] context dialog-act ids
    da_mask: np.ndarray             # [B, M]

    @property
    def size(self) -> int:
        return len(self.windows)

    @property
    def k(self) -> int:
        return len(self.turns)

    @classmethod
    def from_windows(cls, windows) -> Batch:
        windows = list(windows)
        if not windows:
            raise ValueError("empty batch")
        k = windows[0].k
        if any(w.k != k for w in windows):
            raise ValueError("all windows in a batch must have the same K")
        turns = [_turn_batch([w.turns[j].ids for w in windows]) for j in range(k)]
        das = [np.concatenate([t.da_list for t in w.context_turns]).astype(np.int64)
               if w.context_turns else np.zeros(0, dtype=np.int64) for w in windows]
        m = max(len(d) for d in das)
        da_seq = np.zeros((len(windows), m), dtype=np.int64)
        da_mask = np.zeros((len(windows), m))
        for r, d in enumerate(das):
            da_seq[r, :len(d)] = d
            da_mask[r, :len(d)] = 1.0
        return cls(windows, turns, da_seq, da_mask)


@dataclass
class ForwardResult:
    loss: Tensor                 # sum of per-window target-turn losses (plus context turns if enabled)
    token_logprobs: np.ndarray   # [B, L] natural-log probability of each target token, 0 on padding
    mask: np.ndarray             # [B, L]
    target_h0: LstmState
    target_context: np.ndarray | None
    target_logits: np.ndarray | None = None

    def window_losses(self) -> np.ndarray:
        return -(self.token_logprobs * self.mask).sum(axis=1)


def window_sort_key(w: DialogWindow):
    return (len(w.target_turn), w.dialog_id, w.start, w.target_turn.ids.tobytes())


# ---------------------------------------------------------------------------
# the model


class DialogLM:
    """A variant, its configuration and its parameters."""

    def __init__(self, variant, config: ModelConfig, params: ParameterSet, k: int | None = None):
        self.variant = Variant.parse(variant)
        self.config = config
        config.validate(self.variant)
        expected = param_shapes(self.variant, config)
        got = dict(params.manifest())
        if got != expected:
            raise ValueError(f"parameters do not match {self.variant.value} manifest: "
                             f"expected {expected}, got {got}")
        self.params = params
        self.k = k

    @classmethod
    def create(cls, variant, config: ModelConfig, rng: np.random.Generator, k: int | None = None
               ) -> DialogLM:
        return cls(variant, config, build_params(variant, config, rng), k)

    # -- forward ---------------------------------------------------------

    def forward(self, batch: Batch, training: bool = False, rng: np.random.Generator | None = None,
                keep_logits: bool = False) -> ForwardResult:
        if self.k is not None and batch.k != self.k:
            raise ValueError(f"model was configured for K={self.k}, window has K={batch.k}")
        if training and self.config.keep_prob < 1.0 and rng is None:
            raise ValueError("training mode with dropout needs an rng")
        p = self.params
        cfg = self.config
        v = self.variant
        bsz = batch.size
        hd = cfg.hidden_dim
        keep = cfg.keep_prob
        ctx_dim = cfg.context_dim(v)
        zero_state = LstmState.zeros(hd, bsz)
        context_loss = []

        def run_turn(tb: TurnBatch, h0: LstmState, ctx):
            state = h0
            hs = []
            full = tb.mask.all()
            for t in range(tb.width):
                x = embedding(p["embed"], tb.inputs[:, t])
                if ctx is not None:
                    x = concat([x, ctx], axis=-1)
                if training and keep < 1.0:
                    x = mul(x, dropout_mask(x.shape, keep, rng))
                state = lstm_step(state, x, p["lstm.w_x"], p["lstm.w_h"], p["lstm.b"],
                                  mask=None if full else tb.mask[:, t])
                hs.append(state.hidden)
            return state, hs

        def output(tb: TurnBatch, hs):
            hid = reshape(stack(hs, axis=1), (bsz * tb.width, hd))
            if training and keep < 1.0:
                hid = mul(hid, dropout_mask(hid.shape, keep, rng))
            logits = add(matmul(hid, p["out.w"]), p["out.b"])
            nll = softmax_cross_entropy(logits, tb.targets.reshape(-1))
            loss = sum_(mul(nll, tb.mask.reshape(-1)))
            return loss, -nll.values.reshape(bsz, tb.width), logits.values

        def add_context_loss(tb, hs):
            if cfg.loss_all_turns:
                context_loss.append(output(tb, hs)[0])

        zero_ctx = Tensor(np.zeros((bsz, ctx_dim))) if ctx_dim else None
        ctx_turns = batch.turns[:-1]
        h0, ctx = zero_state, zero_ctx

        if v is Variant.SingleTurn:
            if cfg.loss_all_turns:
                for tb in ctx_turns:
                    add_context_loss(tb, run_turn(tb, zero_state, None)[1])
        elif v is Variant.BoWContext:
            if cfg.loss_all_turns:
                for j, tb in enumerate(ctx_turns):
                    c_j = self._bow(batch.turns[:j]) if j else zero_ctx
                    add_context_loss(tb, run_turn(tb, zero_state, c_j)[1])
            if ctx_turns:
                ctx = self._bow(ctx_turns)
        elif v is Variant.DRNNLM:
            state = zero_state
            for tb in ctx_turns:
                state, hs = run_turn(tb, state, None)
                add_context_loss(tb, hs)
            h0 = state
        elif v is Variant.CCDCLM:
            prev = zero_ctx
            for tb in ctx_turns:
                state, hs = run_turn(tb, zero_state, prev)
                add_context_loss(tb, hs)
                prev = state.hidden
            ctx = prev
        elif v is Variant.IDCLM:
            # Context turns chain only to their own speaker's previous turn, so
            # turn k-2 reaches the target through h_0 alone.
            finals: list[LstmState] = []
            for j, tb in enumerate(ctx_turns):
                start = finals[j - 2] if j >= 2 else zero_state
                state, hs = run_turn(tb, start, zero_ctx)
                add_context_loss(tb, hs)
                finals.append(state)
            n = len(finals)
            h0 = finals[n - 2] if n >= 2 else zero_state
            ctx = finals[n - 1].hidden if n >= 1 else zero_ctx
        elif v is Variant.ESIDCLM:
            es = LstmState.zeros(cfg.external_state_dim, bsz)
            finals = []
            for j, tb in enumerate(ctx_turns):
                start = finals[j - 2] if j >= 2 else zero_state
                state, hs = run_turn(tb, start, es.hidden)
                add_context_loss(tb, hs)
                finals.append(state)
                es = lstm_step(es, state.hidden, p["es.w_x"], p["es.w_h"], p["es.b"])
            n = len(finals)
            h0 = finals[n - 2] if n >= 2 else zero_state
            ctx = es.hidden
        elif v is Variant.DACLM:
            da = LstmState.zeros(cfg.external_state_dim, bsz)
            for m in range(batch.da_seq.shape[1]):
                x = embedding(p["da.embed"], batch.da_seq[:, m])
                da = lstm_step(da, x, p["da.w_x"], p["da.w_h"], p["da.b"], mask=batch.da_mask[:, m])
            ctx = da.hidden

        target = batch.turns[-1]
        _, hs = run_turn(target, h0, ctx)
        loss, logprobs, logits = output(target, hs)
        for extra in context_loss:
            loss = add(loss, extra)
        return ForwardResult(
            loss=loss,
            token_logprobs=logprobs * target.mask,
            mask=target.mask,
            target_h0=LstmState(Tensor(h0.hidden.values.copy()), Tensor(h0.cell.values.copy())),
            target_context=None if ctx is None else ctx.values.copy(),
            target_logits=logits.reshape(bsz, target.width, -1) if keep_logits else None,
        )

    def _bow(self, turns: list[TurnBatch]) -> Tensor:
        ids = np.concatenate([tb.targets for tb in turns], axis=1)
        mask = np.concatenate([tb.mask for tb in turns], axis=1)
        weights = mask / mask.sum(axis=1, keepdims=True)
        return embedding_bag(self.params["embed"], ids, weights)

    def forward_window(self, window: DialogWindow, training: bool = False,
                       rng: np.random.Generator | None = None) -> ForwardResult:
        return self.forward(Batch.from_windows([window]), training=training, rng=rng)

    def l2_penalty(self) -> Tensor:
        w, b = self.params["out.w"], self.params["out.b"]
        return add(sum_(mul(w, w)), sum_(mul(b, b)))

    # -- scoring ---------------------------------------------------------

    def score_windows(self, windows, batch_size: int = SCORE_BATCH) -> list[dict[str, np.ndarray]]:
        """Per-token records for each window's target turn, in input order.

        Each record dict holds aligned arrays ``token``, ``pos``, ``da`` and
        ``logprob`` (natural log).
        """
        windows = list(windows)
        out: list[dict | None] = [None] * len(windows)
        # Batches depend only on window content, never on input order, so each
        # logprob is bit-identical however the caller orders the windows.
        order = sorted(range(len(windows)), key=lambda i: window_sort_key(windows[i]))
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            res = self.forward(Batch.from_windows([windows[i] for i in idx]))
            for r, i in enumerate(idx):
                tt = windows[i].target_turn
                n = len(tt)
                out[i] = {"token": tt.ids, "pos": tt.pos, "da": tt.da,
                          "logprob": res.token_logprobs[r, :n].copy()}
        return out

    def score_turn(self, window: DialogWindow) -> dict[str, np.ndarray]:
        return self.score_windows([window])[0]

    def next_token_distributions(self, window: DialogWindow) -> np.ndarray:
        """Log-probability over the vocabulary at every target position, ``[T, V]``."""
        res = self.forward(Batch.from_windows([window]), keep_logits=True)
        return log_softmax_values(res.target_logits[0])

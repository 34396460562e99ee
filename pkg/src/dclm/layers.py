"""Layer primitives: LSTM cell, softmax cross-entropy, dropout, initialisers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dclm.tensor import DTYPE, ShapeError, Tensor, _record, as_tensor, sigmoid_values


@dataclass
class LstmState:
    hidden: Tensor
    cell: Tensor

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int | None = None) -> LstmState:
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    @property
    def hidden_dim(self) -> int:
        return self.hidden.shape[-1]


def lstm_step(state: LstmState, x: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor,
              mask=None) -> LstmState:
    """One step of a forget-gate LSTM without peepholes.

    Gate layout along the last axis of ``w_x``/``w_h``/``b`` is
    input, forget, output, candidate.  ``x`` is ``[in_dim]`` or
    ``[batch, in_dim]``.  Rows where ``mask`` is 0 keep their previous
    state, which is how padded time steps are skipped.
    """
    x = as_tensor(x)
    h, c = state.hidden, state.cell
    hd = h.shape[-1]
    if w_x.shape != (x.shape[-1], 4 * hd) or w_h.shape != (hd, 4 * hd) or b.shape != (4 * hd,):
        raise ShapeError(
            f"lstm_step: input {x.shape}, hidden {h.shape} incompatible with "
            f"w_x {w_x.shape}, w_h {w_h.shape}, b {b.shape}")
    if x.shape[:-1] != h.shape[:-1]:
        raise ShapeError(f"lstm_step: batch mismatch between input {x.shape} and state {h.shape}")

    xv, hv, cv = x.values, h.values, c.values
    z = xv @ w_x.values + hv @ w_h.values + b.values
    gates = sigmoid_values(z[..., :3 * hd])
    i, f, o = gates[..., :hd], gates[..., hd:2 * hd], gates[..., 2 * hd:]
    g = np.tanh(z[..., 3 * hd:])
    c_new = f * cv + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    if mask is not None:
        m = np.asarray(mask, dtype=DTYPE).reshape(h.shape[:-1] + (1,))
        h_out = m * h_new + (1.0 - m) * hv
        c_out = m * c_new + (1.0 - m) * cv
    else:
        m = None
        h_out, c_out = h_new, c_new
    out_h, out_c = Tensor(h_out), Tensor(c_out)

    def back(grads):
        gh, gc = grads
        if m is not None:
            gh_keep, gc_keep = (1.0 - m) * gh, (1.0 - m) * gc
            gh, gc = m * gh, m * gc
        else:
            gh_keep = gc_keep = 0.0
        d_o = gh * tc
        dc = gc + gh * o * (1.0 - tc * tc)
        d_f = dc * cv
        d_i = dc * g
        d_g = dc * i
        dz = np.concatenate([d_i * i * (1.0 - i), d_f * f * (1.0 - f),
                             d_o * o * (1.0 - o), d_g * (1.0 - g * g)], axis=-1)
        x2 = xv.reshape(-1, xv.shape[-1])
        h2 = hv.reshape(-1, hd)
        dz2 = dz.reshape(-1, 4 * hd)
        return [dz @ w_x.values.T,
                dz @ w_h.values.T + gh_keep,
                dc * f + gc_keep,
                x2.T @ dz2,
                h2.T @ dz2,
                dz2.sum(axis=0)]

    _record([x, h, c, w_x, w_h, b], [out_h, out_c], back)
    return LstmState(out_h, out_c)


def log_softmax_values(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_values(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_values(logits))


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Negative log-probability of ``target`` under ``softmax(logits)``.

    ``logits`` of shape ``[vocab]`` with an integer target gives a scalar;
    ``[batch, vocab]`` with a ``[batch]`` target array gives per-row losses.
    """
    logits = as_tensor(logits)
    vocab = logits.shape[-1]
    tgt = np.asarray(target, dtype=np.int64)
    if tgt.shape != logits.shape[:-1]:
        raise ShapeError(f"softmax_cross_entropy: targets {tgt.shape} vs logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= vocab):
        raise ValueError(f"softmax_cross_entropy: target out of range [0, {vocab})")
    logp = log_softmax_values(logits.values)
    picked = np.take_along_axis(logp, tgt[..., None], axis=-1)[..., 0]
    out = Tensor(-picked)

    def back(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        return [g[0][..., None] * (p - onehot)]

    _record([logits], [out], back)
    return out


def dropout_mask(shape, keep_prob: float, rng: np.random.Generator | None,
                 training: bool = True) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(keep_prob) / keep_prob, ones in eval mode."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return np.ones(shape)
    return (rng.random(shape) < keep_prob) / keep_prob


def uniform_init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


def lstm_bias(hidden_dim: int, forget_bias: float = 1.0) -> np.ndarray:
    b = np.zeros(4 * hidden_dim)
    b[hidden_dim:2 * hidden_dim] = forget_bias
    return b

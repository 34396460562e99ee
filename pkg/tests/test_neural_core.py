import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, rel_err
from dclm.layers import (LstmState, dropout_mask, lstm_bias, lstm_step, softmax_cross_entropy,
                         softmax_values)
from dclm.optim import AdamState, adam_step, clip_by_global_norm, global_norm
from dclm.params import (CheckpointError, ParameterSet, dumps_checkpoint, load_checkpoint,
                         loads_checkpoint, save_checkpoint)
from dclm.tensor import (ShapeError, Tape, Tensor, add, backward, concat, matmul, mean, mul,
                         sigmoid, slice_, sum_, tanh)


# -- tensor ops ----------------------------------------------------------------

def test_matmul_hand_example():
    out = matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    assert out.values.tolist() == [[3.0], [7.0]]


def test_tanh_of_zeros():
    assert np.array_equal(tanh(Tensor(np.zeros(4))).values, np.zeros(4))


def test_mean_gradient_is_one_over_n():
    x = Tensor(np.arange(10.0), requires_grad=True)
    with Tape():
        backward(mean(x))
    assert np.allclose(x.grad, 0.1, rtol=0, atol=1e-15)


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    with Tape():
        backward(sum_(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_aliased_product_gets_summed_gradient():
    x = Tensor([1.5, -2.0, 0.25], requires_grad=True)
    with Tape():
        backward(sum_(mul(x, x)))
    assert np.array_equal(x.grad, 2 * x.values)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = mul(x, 2.0)
        with pytest.raises(ShapeError):
            backward(y)


def test_backward_clears_the_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = sum_(x)
        backward(loss)
        assert tape.nodes == []


@pytest.mark.parametrize("op,a,b", [
    (matmul, (2, 3), (2, 3)),
    (add, (2, 3), (4,)),
    (mul, (3,), (2,)),
])
def test_shape_errors_name_op_and_shapes(op, a, b):
    with pytest.raises(ShapeError) as err:
        op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    assert op.__name__ in str(err.value)
    assert str(a) in str(err.value) and str(b) in str(err.value)


def test_concat_shape_error():
    with pytest.raises(ShapeError, match="concat"):
        concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_composite_gradient_matches_finite_differences(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    c = Tensor(rng.normal(size=(2,)), requires_grad=True)

    def f():
        h = tanh(add(matmul(a, b), c))
        s = sigmoid(concat([h, slice_(a, (slice(None), slice(0, 2)))], axis=1))
        return mean(mul(s, s))

    with Tape():
        backward(f())
    for t in (a, b, c):
        num = central_diff(lambda: f().item(), t.values)
        assert rel_err(t.grad, num) < 1e-6


def test_ops_outside_tape_record_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    y = sum_(mul(x, x))
    assert y.tape is None
    with pytest.raises(ShapeError):
        backward(y)


def test_sigmoid_is_finite_for_large_inputs():
    out = sigmoid(Tensor([-1e3, 0.0, 1e3])).values
    assert np.all(np.isfinite(out))
    assert out.tolist() == [0.0, 0.5, 1.0]


# -- lstm ----------------------------------------------------------------------

def _lstm_weights(rng, in_dim, hd, scale=0.5):
    return (Tensor(rng.uniform(-scale, scale, (in_dim, 4 * hd)), requires_grad=True),
            Tensor(rng.uniform(-scale, scale, (hd, 4 * hd)), requires_grad=True),
            Tensor(rng.uniform(-scale, scale, 4 * hd), requires_grad=True))


def test_lstm_zero_fixed_point():
    hd, in_dim = 5, 3
    st0 = LstmState.zeros(hd)
    out = lstm_step(st0, Tensor(np.zeros(in_dim)), Tensor(np.zeros((in_dim, 4 * hd))),
                    Tensor(np.zeros((hd, 4 * hd))), Tensor(np.zeros(4 * hd)))
    assert np.array_equal(out.hidden.values, np.zeros(hd))
    assert np.array_equal(out.cell.values, np.zeros(hd))


def test_lstm_saturated_forget_gate_preserves_cell(rng):
    hd, in_dim = 4, 3
    b = np.zeros(4 * hd)
    b[hd:2 * hd] = 1e4       # forget gate -> 1
    b[:hd] = -1e4            # input gate -> 0
    cell = rng.normal(size=hd)
    st0 = LstmState(Tensor(rng.normal(size=hd)), Tensor(cell.copy()))
    out = lstm_step(st0, Tensor(rng.normal(size=in_dim)), Tensor(rng.normal(size=(in_dim, 4 * hd))),
                    Tensor(rng.normal(size=(hd, 4 * hd))), Tensor(b))
    assert np.array_equal(out.cell.values, cell)
    assert np.array_equal(st0.cell.values, cell)  # input state untouched


def _lstm_reference(h, c, x, wx, wh, b):
    # plain numpy, written out gate by gate
    hd = h.shape[-1]
    z = x @ wx + h @ wh + b
    i = 1 / (1 + np.exp(-z[:hd]))
    f = 1 / (1 + np.exp(-z[hd:2 * hd]))
    o = 1 / (1 + np.exp(-z[2 * hd:3 * hd]))
    g = np.tanh(z[3 * hd:])
    c2 = f * c + i * g
    return o * np.tanh(c2), c2


def test_lstm_forward_matches_reference(rng):
    wx, wh, b = _lstm_weights(rng, 6, 8)
    h, c, x = rng.normal(size=8), rng.normal(size=8), rng.normal(size=6)
    out = lstm_step(LstmState(Tensor(h), Tensor(c)), Tensor(x), wx, wh, b)
    hr, cr = _lstm_reference(h, c, x, wx.values, wh.values, b.values)
    assert np.allclose(out.hidden.values, hr, atol=1e-14)
    assert np.allclose(out.cell.values, cr, atol=1e-14)
    assert np.all(np.abs(out.hidden.values) < 1)


@pytest.mark.parametrize("seed", range(5))
def test_lstm_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    wx, wh, b = _lstm_weights(rng, 8, 8)
    h = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    x = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
    mask = np.array([1.0, 0.0])
    proj = rng.normal(size=(2, 8))

    def f():
        s = lstm_step(LstmState(h, c), x, wx, wh, b, mask=mask)
        s = lstm_step(s, x, wx, wh, b)
        return add(sum_(mul(s.hidden, proj)), sum_(mul(s.cell, s.cell)))

    with Tape():
        backward(f())
    for t in (h, c, x, wx, wh, b):
        num = central_diff(lambda: f().item(), t.values)
        assert rel_err(t.grad, num, floor=1e-6) <= 1e-4


def test_lstm_mask_keeps_state(rng):
    wx, wh, b = _lstm_weights(rng, 3, 4)
    h, c = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    out = lstm_step(LstmState(Tensor(h), Tensor(c)), Tensor(rng.normal(size=(2, 3))), wx, wh, b,
                    mask=np.array([0.0, 1.0]))
    assert np.array_equal(out.hidden.values[0], h[0])
    assert np.array_equal(out.cell.values[0], c[0])
    assert not np.array_equal(out.hidden.values[1], h[1])


def test_lstm_dimension_mismatch():
    with pytest.raises(ShapeError):
        lstm_step(LstmState.zeros(4), Tensor(np.zeros(3)), Tensor(np.zeros((2, 16))),
                  Tensor(np.zeros((4, 16))), Tensor(np.zeros(16)))


def test_lstm_bias_sets_forget_lane_only():
    b = lstm_bias(3, 1.0)
    assert b.tolist() == [0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0]


# -- softmax cross-entropy ---------------------------------------------------

def test_uniform_logits_give_log_vocab():
    for t in range(10):
        assert math.isclose(softmax_cross_entropy(Tensor(np.zeros(10)), t).item(), math.log(10),
                            rel_tol=0, abs_tol=1e-15)


def test_saturated_target_gives_zero_loss():
    logits = np.zeros(10)
    logits[3] = 1000.0
    loss = softmax_cross_entropy(Tensor(logits), 3).item()
    assert 0.0 <= loss < 1e-12


def test_softmax_cross_entropy_gradient(rng):
    logits = Tensor(rng.normal(size=50) * 3, requires_grad=True)
    with Tape():
        backward(softmax_cross_entropy(logits, 17))
    num = central_diff(lambda: softmax_cross_entropy(Tensor(logits.values), 17).item(), logits.values)
    assert rel_err(logits.grad, num, floor=1e-6) <= 1e-4
    # closed form: softmax - onehot
    p = np.exp(logits.values - logits.values.max())
    p /= p.sum()
    p[17] -= 1
    assert np.allclose(logits.grad, p, atol=1e-14)


def test_softmax_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros(5)), 5)
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((2, 5))), np.array([0, -1]))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e3, 1e3)))
def test_softmax_sums_to_one(logits):
    p = softmax_values(logits)
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1.0) <= 1e-12


# -- dropout -------------------------------------------------------------------

def test_dropout_identity_cases():
    assert np.array_equal(dropout_mask((7,), 1.0, np.random.default_rng(0)), np.ones(7))
    assert np.array_equal(dropout_mask((7,), 0.5, None, training=False), np.ones(7))


def test_dropout_keep_fraction_and_mean():
    m = dropout_mask((100_000,), 0.8, np.random.default_rng(7))
    assert abs(np.count_nonzero(m) / m.size - 0.8) <= 0.01
    assert abs(m.mean() - 1.0) <= 0.01
    assert set(np.unique(m)) == {0.0, 1.25}


def test_dropout_rejects_bad_keep_prob():
    with pytest.raises(ValueError):
        dropout_mask((3,), 0.0, np.random.default_rng(0))


# -- clipping ----------------------------------------------------------------

def test_clip_boundary_unchanged():
    g = {"w": np.array([3.0, 4.0])}
    out, norm = clip_by_global_norm(g, 5.0)
    assert norm == 5.0 and np.array_equal(out["w"], [3.0, 4.0])


def test_clip_exact_halving():
    out, norm = clip_by_global_norm({"w": np.array([6.0, 8.0])}, 5.0)
    assert norm == 10.0 and np.array_equal(out["w"], [3.0, 4.0])


@pytest.mark.parametrize("seed", range(10))
def test_clip_random_norm_and_direction(seed):
    rng = np.random.default_rng(seed)
    g = {"a": rng.normal(size=(4, 3)) * 10, "b": rng.normal(size=7) * 10}
    out, _ = clip_by_global_norm(g, 5.0)
    assert global_norm(out) <= 5.0 + 1e-9
    flat_in = np.concatenate([g["a"].ravel(), g["b"]])
    flat_out = np.concatenate([out["a"].ravel(), out["b"]])
    cos = flat_in @ flat_out / (np.linalg.norm(flat_in) * np.linalg.norm(flat_out))
    assert abs(cos - 1.0) <= 1e-12


def test_clip_rejects_nonpositive_norm():
    with pytest.raises(ValueError):
        clip_by_global_norm({"w": np.ones(2)}, 0.0)


# -- adam ----------------------------------------------------------------------

def test_adam_zero_gradient_fixed_point(rng):
    ps = ParameterSet({"w": Tensor(rng.normal(size=(3, 2)))})
    before = ps["w"].values.copy()
    st_ = AdamState()
    for _ in range(20):
        adam_step(ps, {"w": np.zeros((3, 2))}, st_)
    assert np.array_equal(ps["w"].values, before)


def test_adam_first_step_is_alpha():
    ps = ParameterSet({"w": Tensor(np.zeros(4))})
    g = np.array([0.3, -2.0, 5.0, -1e-3])
    adam_step(ps, {"w": g}, AdamState())
    assert np.allclose(ps["w"].values, -0.001 * np.sign(g), rtol=1e-4, atol=0)


def _scalar_adam(x, steps, alpha=0.001, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= alpha * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_quadratic_matches_scalar_recurrence():
    # alpha 0.01: at the default 0.001 a 200-step run only moves x by ~0.2
    ps = ParameterSet({"x": Tensor(np.array(1.0))})
    state = AdamState(alpha=0.01)
    for _ in range(200):
        adam_step(ps, {"x": 2 * ps["x"].values}, state)
    ref = _scalar_adam(1.0, 200, alpha=0.01)
    assert abs(ps["x"].values - ref) < 1e-12
    assert abs(ref) < 0.05
    assert np.all(state.v["x"] >= 0)


def test_adam_shape_mismatch():
    ps = ParameterSet({"w": Tensor(np.zeros(3))})
    with pytest.raises(ShapeError):
        adam_step(ps, {"w": np.zeros(4)}, AdamState())


# -- parameter sets and checkpoints ------------------------------------------

def test_parameter_set_sorted_and_unique():
    ps = ParameterSet()
    ps.add("z", np.zeros(1))
    ps.add("a", np.zeros(2))
    assert ps.names() == ["a", "z"]
    with pytest.raises(KeyError):
        ps.add("a", np.zeros(2))
    with pytest.raises(ValueError):
        ps.add("b", ps["z"])


def test_checkpoint_roundtrip_bit_exact(tmp_path, rng):
    ps = ParameterSet({"emb": Tensor(rng.normal(size=(5, 3))), "b": Tensor(rng.normal(size=4)),
                       "s": Tensor(np.array(np.pi)), "ünï": Tensor(np.array([-0.0, 1e-308]))})
    path = tmp_path / "p.dclm"
    save_checkpoint(path, ps, {"variant": "IDCLM"})
    back, meta = load_checkpoint(path)
    assert meta == {"variant": "IDCLM"}
    assert back.manifest() == ps.manifest()
    for name, t in ps.items():
        assert back[name].values.tobytes() == t.values.tobytes()
    assert dumps_checkpoint(back, meta) == path.read_bytes()


def test_checkpoint_layout_header():
    raw = dumps_checkpoint(ParameterSet({"ab": Tensor(np.array([[1.0, 2.0]]))}))
    assert raw[:4] == b"DCLM"
    assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[12:14] == (2).to_bytes(2, "little") and raw[14:16] == b"ab"
    assert raw[16] == 2
    assert raw[17:25] == (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[25:], "<f8").tolist() == [1.0, 2.0]


def test_checkpoint_corrupt():
    with pytest.raises(CheckpointError):
        loads_checkpoint(b"NOPE")
    good = dumps_checkpoint(ParameterSet({"w": Tensor(np.ones(3))}))
    with pytest.raises(CheckpointError):
        loads_checkpoint(good[:-5])
    with pytest.raises(CheckpointError):
        loads_checkpoint(good + b"junk")

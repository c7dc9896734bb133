import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from camel import nn
from camel.errors import ConfigError, DataError, InvariantError
from camel.nn import Parameter, Tape, constant

from oracles import central_difference


def p(value, name="p"):
    return Parameter(np.asarray(value, dtype=float), name)


# -- linear ------------------------------------------------------------------

def test_linear_identity_weights():
    y = nn.linear(constant([[1.0, 2.0]]), p(np.eye(2)), p([[0.0, 0.0]]))
    np.testing.assert_array_equal(y.value, [[1.0, 2.0]])


def test_linear_zero_input_passes_bias():
    rng = np.random.default_rng(0)
    y = nn.linear(constant([[0.0, 0.0]]), p(rng.normal(size=(2, 2))), p([[3.0, -1.0]]))
    np.testing.assert_array_equal(y.value, [[3.0, -1.0]])


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    expected = [[b[0, o] + sum(x[r, i] * w[i, o] for i in range(3)) for o in range(4)] for r in range(2)]
    y = nn.linear(constant(x), p(w), p(b))
    np.testing.assert_allclose(y.value, expected, rtol=0, atol=1e-14)


def test_linear_shape_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        nn.linear(constant(np.ones((2, 3))), p(np.ones((2, 4))), p(np.zeros((1, 4))))
    with pytest.raises(ConfigError):
        nn.linear(constant(np.ones((2, 3))), p(np.ones((3, 4))), p(np.zeros((1, 3))))


# -- relu ----------------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(nn.relu(constant([[-1.0, 0.0, 2.0]])).value, [[0.0, 0.0, 2.0]])
    x = np.array([[0.5, 3.0, 1e-3]])
    np.testing.assert_array_equal(nn.relu(constant(x)).value, x)


def test_relu_gradient_mask_matches_finite_differences():
    x = p([[-1.3, 0.7, 2.0, -0.2, 0.05]])
    weights = np.array([[0.3, -1.1, 0.8, 2.0, -0.5]])

    def loss():
        return float((nn.relu(x).value * weights).sum())

    with Tape() as tape:
        y = nn.relu(x)
        out = nn.linear(y, constant(weights.T))
    tape.backward(out)
    np.testing.assert_allclose(x.grad, central_difference(loss, x, 1e-5), atol=1e-9)
    np.testing.assert_array_equal(x.grad, [[0.0, -1.1, 0.8, 0.0, -0.5]])


def test_relu_gradient_at_zero_is_zero():
    x = p([[0.0]])
    with Tape() as tape:
        out = nn.linear(nn.relu(x), constant([[1.0]]))
    tape.backward(out)
    assert x.grad[0, 0] == 0.0


# -- softmax / cross-entropy ---------------------------------------------------

def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(nn.softmax_rows(constant([[0.0, 0.0, 0.0]])).value, [[1 / 3] * 3], atol=1e-15)
    y = nn.softmax_rows(constant([[1000.0, 0.0]])).value
    assert np.all(np.isfinite(y))
    np.testing.assert_allclose(y, [[1.0, 0.0]], atol=1e-300)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 7)),
                  elements=st.floats(-500, 500, allow_nan=False)))
def test_softmax_rows_are_simplexes(z):
    y = nn.softmax_rows(constant(z)).value
    assert np.all(y >= 0) and np.all(y <= 1)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_cross_entropy_uniform_is_log_c():
    for c in (2, 3, 7):
        loss = nn.cross_entropy_mean(constant(np.zeros((4, c))), [0, 1, 1, 0])
        assert loss.value == pytest.approx(math.log(c), abs=1e-15)


def test_cross_entropy_confident_correct_is_zero():
    logits = np.array([[500.0, 0.0, 0.0], [0.0, 0.0, 500.0]])
    assert nn.cross_entropy_mean(constant(logits), [0, 2]).value == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_matches_per_row_formula():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(4, 3)) * 2
    y = [2, 0, 1, 1]
    expected = sum(-z[r, y[r]] + math.log(sum(math.exp(v) for v in z[r])) for r in range(4)) / 4
    assert nn.cross_entropy_mean(constant(z), y).value == pytest.approx(expected, abs=1e-14)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(4)
    z = p(rng.normal(size=(4, 3)))
    y = [2, 0, 1, 1]
    with Tape() as tape:
        loss = nn.cross_entropy_mean(z, y)
    tape.backward(loss)
    fd = central_difference(lambda: float(nn.cross_entropy_mean(constant(z.value), y).value), z, 1e-5)
    np.testing.assert_allclose(z.grad, fd, atol=1e-9)


def test_cross_entropy_label_out_of_range_names_stream_and_index():
    with pytest.raises(DataError, match=r"stream 2, index 1"):
        nn.cross_entropy_mean(constant(np.zeros((3, 2))), [0, 2, 1], stream=2)
    with pytest.raises(DataError):
        nn.cross_entropy_mean(constant(np.zeros((2, 2))), [-1, 0])


# -- attention -----------------------------------------------------------------

def reference_attention(query, context, heads, wq, wk, wv, wo):
    """One row, one head at a time, with plain Python softmax."""
    bsz, d = query.shape
    dk = d // heads
    out = np.zeros((bsz, d))
    weights = np.zeros((bsz, heads, context.shape[1]))
    for b in range(bsz):
        q = query[b] @ wq
        ks = [context[b, m] @ wk for m in range(context.shape[1])]
        vs = [context[b, m] @ wv for m in range(context.shape[1])]
        concat = []
        for h in range(heads):
            sl = slice(h * dk, (h + 1) * dk)
            scores = [float(q[sl] @ k[sl]) / math.sqrt(dk) for k in ks]
            mx = max(scores)
            e = [math.exp(s - mx) for s in scores]
            a = [v / sum(e) for v in e]
            weights[b, h] = a
            concat.append(sum(ai * v[sl] for ai, v in zip(a, vs)))
        out[b] = np.concatenate(concat) @ wo
    return out, weights


def _attention(rng, d=4, heads=2):
    return nn.MultiHeadAttention(d, heads, rng)


def test_attention_single_token_ignores_query():
    rng = np.random.default_rng(5)
    att = _attention(rng)
    ctx = rng.normal(size=(3, 1, 4))
    out1 = att(constant(rng.normal(size=(3, 4))), constant(ctx)).value
    out2 = att(constant(rng.normal(size=(3, 4))), constant(ctx)).value
    expected = ctx[:, 0, :] @ att.w_v.value @ att.w_o.value
    np.testing.assert_allclose(out1, expected, atol=1e-14)
    np.testing.assert_allclose(out2, expected, atol=1e-14)
    np.testing.assert_array_equal(att.last_weights, 1.0)


def test_attention_identical_tokens_equal_single_token():
    rng = np.random.default_rng(6)
    att = _attention(rng)
    q = constant(rng.normal(size=(2, 4)))
    tok = rng.normal(size=(2, 1, 4))
    single = att(q, constant(tok)).value
    repeated = att(q, constant(np.repeat(tok, 3, axis=1))).value
    np.testing.assert_allclose(repeated, single, atol=1e-14)


def test_attention_matches_unbatched_reference():
    rng = np.random.default_rng(7)
    att = _attention(rng)
    q, ctx = rng.normal(size=(2, 4)), rng.normal(size=(2, 2, 4))
    got = att(constant(q), constant(ctx)).value
    want, weights = reference_attention(q, ctx, 2, att.w_q.value, att.w_k.value, att.w_v.value, att.w_o.value)
    np.testing.assert_allclose(got, want, atol=1e-13)
    np.testing.assert_allclose(att.last_weights, weights, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.sampled_from([(2, 1), (4, 2), (6, 3), (8, 2)]), st.integers(0, 2**32 - 1))
def test_attention_weights_sum_to_one(bsz, m, dims, seed):
    d, heads = dims
    rng = np.random.default_rng(seed)
    att = nn.MultiHeadAttention(d, heads, rng)
    att(constant(rng.normal(size=(bsz, d)) * 5), constant(rng.normal(size=(bsz, m, d)) * 5))
    np.testing.assert_allclose(att.last_weights.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    att = _attention(rng)
    q, ctx = p(rng.normal(size=(2, 4))), p(rng.normal(size=(2, 3, 4)))
    probe = rng.normal(size=(4, 1))
    ones = constant(np.ones((1, 2)))

    def loss():
        return float((att(constant(q.value), constant(ctx.value)).value @ probe).sum())

    with Tape() as tape:
        scalar = nn.linear(ones, nn.linear(att(q, ctx), constant(probe)))
    tape.backward(scalar)
    for t in (q, ctx, *att.parameters()):
        np.testing.assert_allclose(t.grad, central_difference(loss, t, 1e-5), rtol=1e-6, atol=1e-9)


def test_attention_rejects_indivisible_width():
    with pytest.raises(ConfigError, match="divisible"):
        nn.MultiHeadAttention(5, 2, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        nn.scaled_dot_attention(constant(np.ones((1, 5))), constant(np.ones((1, 1, 5))),
                                constant(np.ones((1, 1, 5))), 2)


# -- backward / tape -----------------------------------------------------------

def test_independent_parameter_gets_zero_grad():
    used, unused = p([[1.0, 2.0]]), p([[5.0]])
    with Tape() as tape:
        loss = nn.cross_entropy_mean(used, [1])
    tape.backward(loss)
    assert np.all(unused.grad == 0.0)
    assert np.any(used.grad != 0.0)


def test_backward_without_forward_is_error():
    tape = Tape()
    with pytest.raises(InvariantError):
        tape.backward(constant(1.0))
    x = p([[1.0, 2.0]])
    with Tape() as tape:
        loss = nn.cross_entropy_mean(x, [0])
    tape.backward(loss)
    with pytest.raises(InvariantError):
        tape.backward(loss)


def test_frozen_parameter_receives_no_gradient_and_no_update():
    rng = np.random.default_rng(9)
    w_frozen = p(rng.normal(size=(3, 3)))
    w_frozen.frozen = True
    w_live = p(rng.normal(size=(3, 2)))
    before = w_frozen.value.copy()
    opt = nn.Adam(lr=0.1)
    for _ in range(5):
        with Tape() as tape:
            loss = nn.cross_entropy_mean(nn.linear(nn.linear(constant(rng.normal(size=(4, 3))), w_frozen), w_live),
                                         [0, 1, 1, 0])
        tape.backward(loss)
        assert np.all(w_frozen.grad == 0.0)
        opt.step([w_frozen, w_live])
    np.testing.assert_array_equal(w_frozen.value, before)
    assert w_frozen not in opt.states


def test_inference_outside_tape_records_nothing():
    x = p([[1.0, -2.0]])
    y = nn.relu(x)
    assert not y.requires_grad


# -- adam ----------------------------------------------------------------------

def test_adam_zero_gradient_keeps_value_and_counts_step():
    w = p([[0.5, -0.25]])
    opt = nn.Adam()
    opt.step([w])
    opt.step([w])
    np.testing.assert_array_equal(w.value, [[0.5, -0.25]])
    assert opt.states[w].t == 2


@pytest.mark.parametrize("g", [3.0, -0.01, 250.0])
def test_adam_first_step_is_lr_times_sign(g):
    w = p([[1.0]])
    w.grad[...] = g
    nn.adam_step([w], nn.Adam(lr=1e-3))
    assert w.value[0, 0] - 1.0 == pytest.approx(-1e-3 * math.copysign(1, g), rel=1e-6)
    assert w.grad[0, 0] == 0.0


def test_adam_quadratic_trajectory():
    # x <- x - lr * m_hat / (sqrt(v_hat) + eps) on f(x) = x^2 from x = 1, lr = 0.1
    expected = [0.9000000005, 0.8004122286917928, 0.7015862729460303]
    w = p([[1.0]])
    opt = nn.Adam(lr=0.1)
    for want in expected:
        w.grad[...] = 2 * w.value
        opt.step([w])
        assert w.value[0, 0] == pytest.approx(want, abs=1e-15)


def test_mix_slice_and_concat_gradients():
    rng = np.random.default_rng(10)
    wts = p(rng.dirichlet(np.ones(3), size=4))
    experts = [p(rng.normal(size=(4, 2)), f"e{i}") for i in range(3)]
    probe = rng.normal(size=(2, 1))
    ones = constant(np.ones((1, 4)))

    def loss():
        return float((nn.mix(constant(wts.value), [constant(e.value) for e in experts]).value @ probe).sum())

    with Tape() as tape:
        out = nn.mix(wts, experts)
        padded = nn.concat([out, constant(np.zeros((4, 1)))])
        scalar = nn.linear(ones, nn.linear(nn.slice_cols(padded, 0, 2), constant(probe)))
    tape.backward(scalar)
    for t in (wts, *experts):
        np.testing.assert_allclose(t.grad, central_difference(loss, t, 1e-5), atol=1e-9)


def test_mix_is_weighted_sum():
    w = constant([[0.25, 0.75]])
    out = nn.mix(w, [constant([[1.0, 2.0]]), constant([[3.0, -1.0]])])
    np.testing.assert_allclose(out.value, [[2.5, -0.25]], atol=1e-15)


def test_glorot_uniform_bounds():
    w = nn.glorot_uniform(np.random.default_rng(0), 50, 8)
    limit = math.sqrt(6 / 58)
    assert w.shape == (50, 8)
    assert np.all(np.abs(w) <= limit)
    assert np.abs(w).max() > 0.8 * limit

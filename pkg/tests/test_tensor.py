import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iiet import tensor as T
from iiet.tensor import ConfigurationError, NonFiniteError, ShapeError, Tensor

F64 = np.float64


def p(x):
    return T.parameter(np.asarray(x, dtype=F64))


def rng(seed=0):
    return np.random.default_rng(seed)


def weighted_sum(x, seed=1):
    # random projection so every output coordinate matters to the loss
    w = Tensor(rng(seed).standard_normal(x.shape))
    return T.total(x * w)


# --------------------------------------------------------------------------- #
# forward values
# --------------------------------------------------------------------------- #


def test_matmul_identity_and_dot():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((T.tensor(np.eye(2)) @ a).data, a.data)
    assert (T.tensor([[1.0, 2.0]]) @ T.tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_example():
    a = p([[1.0, 1.0], [1.0, 1.0]])
    b = Tensor(np.array([[2.0, 0.0], [0.0, 2.0]]))
    T.backward(T.total(a @ b))
    np.testing.assert_allclose(a.grad, [[2.0, 2.0], [2.0, 2.0]], atol=1e-12)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        T.tensor(np.ones((2, 3))) @ T.tensor(np.ones((2, 2)))


def test_silu_values():
    assert T.silu(T.tensor([0.0])).data[0] == 0.0
    assert T.silu(T.tensor([1.0])).data[0] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    x = p([0.0])
    T.backward(T.total(T.silu(x)))
    assert x.grad[0] == pytest.approx(0.5, abs=1e-15)


def test_silu_extreme_inputs_stay_finite():
    out = T.silu(T.tensor([-1e4, 1e4]))
    np.testing.assert_allclose(out.data, [0.0, 1e4])


def test_rms_norm_values():
    out = T.rms_norm(T.tensor([[2.0, 2.0, 2.0, 2.0]]), T.tensor(np.ones(4)))
    np.testing.assert_allclose(out.data, np.ones((1, 4)), atol=1e-6)
    zero = T.rms_norm(T.tensor([[0.0, 0.0]]), T.tensor(np.ones(2)))
    np.testing.assert_array_equal(zero.data, [[0.0, 0.0]])


def test_rms_norm_gain_shape():
    with pytest.raises(ShapeError):
        T.rms_norm(T.tensor(np.ones((2, 4))), T.tensor(np.ones(3)))


def test_cross_entropy_values():
    v = 256
    ce = T.softmax_cross_entropy(T.tensor(np.zeros((3, v))), [0, 5, 255])
    assert ce.item() == pytest.approx(math.log(256), abs=1e-12)
    assert T.softmax_cross_entropy(T.tensor([[50.0, 0.0, 0.0]]), [0]).item() == pytest.approx(0.0, abs=1e-20)
    assert T.softmax_cross_entropy(T.tensor([[1.0, 0.0]]), [1]).item() == pytest.approx(math.log(1 + math.e), abs=1e-12)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.softmax_cross_entropy(T.tensor(np.zeros((2, 4))), [0, 4])


def test_mse_values():
    assert T.mse(T.tensor([[1.0, 2.0]]), T.tensor([[1.0, 2.0]])).item() == 0.0
    assert T.mse(T.tensor([[1.0, 0.0]]), T.tensor([[0.0, 0.0]])).item() == 1.0
    assert T.mse(T.tensor([[1.0, 1.0], [0.0, 0.0]]), T.tensor(np.zeros((2, 2)))).item() == 1.0
    with pytest.raises(ShapeError):
        T.mse(T.tensor(np.ones((2, 2))), T.tensor(np.ones((2, 3))))


def test_kl_values():
    assert T.kl_with_temperature(T.tensor([[1.0, 0.0]]), T.tensor([[1.0, 0.0]]), 1.0).item() == 0.0
    assert T.kl_with_temperature(T.tensor([[1.0, 0.0]]), T.tensor([[1.0, 0.0]]), 2.0).item() == 0.0
    # log-ratio is exactly 1 on the first class and -1 on the second
    s1 = 1 / (1 + math.exp(-1))
    expected = s1 - (1 - s1)
    got = T.kl_with_temperature(T.tensor([[1.0, 0.0]]), T.tensor([[0.0, 1.0]]), 1.0).item()
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(0.46212, abs=1e-5)


def test_kl_rejects_nonpositive_tau():
    for tau in (0.0, -1.0):
        with pytest.raises(ConfigurationError):
            T.kl_with_temperature(T.tensor([[1.0]]), T.tensor([[1.0]]), tau)


def test_kl_teacher_gets_no_gradient():
    t, s = p([[0.3, -0.2, 1.0]]), p([[0.1, 0.0, 0.5]])
    T.backward(T.kl_with_temperature(t, s, 2.0))
    assert t.grad is None and s.grad is not None


def test_rope_position_zero_is_identity():
    x = rng().standard_normal((1, 2, 1, 8))
    np.testing.assert_array_equal(T.rope_apply(T.tensor(x), [0]).data, x)


def test_rope_first_pair_rotates_by_position():
    x = np.zeros((1, 1, 1, 4))
    x[..., 0] = 1.0
    for pos in (1, 2, 7):
        out = T.rope_apply(T.tensor(x), [pos]).data[0, 0, 0]
        np.testing.assert_allclose(out[:2], [math.cos(pos), math.sin(pos)], atol=1e-15)


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ConfigurationError):
        T.rope_apply(T.tensor(np.ones((1, 1, 2, 3))), [0, 1])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6).map(lambda k: 2 * k), st.integers(0, 2**31 - 1))
def test_rope_preserves_norm(pos, dh, seed):
    x = rng(seed).standard_normal((1, 1, 1, dh))
    out = T.rope_apply(T.tensor(x), [pos]).data
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(x), rel=1e-6)


def test_rope_scores_depend_on_relative_position():
    r = rng(3)
    q, k = r.standard_normal((1, 1, 1, 8)), r.standard_normal((1, 1, 1, 8))

    def score(m, n):
        return float(np.sum(T.rope_apply(T.tensor(q), [m]).data * T.rope_apply(T.tensor(k), [n]).data))

    assert score(5, 2) == pytest.approx(score(13, 10), abs=1e-12)


def test_attention_is_causal():
    r = rng(4)
    q, k, v = (r.standard_normal((1, 2, 5, 4)) for _ in range(3))
    out = T.causal_attention(T.tensor(q), T.tensor(k), T.tensor(v)).data
    v2 = v.copy()
    v2[:, :, 3:] += 100.0
    k2 = k.copy()
    k2[:, :, 3:] -= 7.0
    out2 = T.causal_attention(T.tensor(q), T.tensor(k2), T.tensor(v2)).data
    np.testing.assert_array_equal(out[:, :, :3], out2[:, :, :3])
    # first query attends only to itself
    np.testing.assert_allclose(out[:, :, 0], v[:, :, 0], atol=1e-15)


def test_attention_offset_matches_full_rows():
    r = rng(5)
    q, k, v = (r.standard_normal((1, 1, 6, 4)) for _ in range(3))
    full = T.causal_attention(T.tensor(q), T.tensor(k), T.tensor(v)).data
    tail = T.causal_attention(T.tensor(q[:, :, 4:]), T.tensor(k), T.tensor(v), offset=4).data
    np.testing.assert_allclose(tail, full[:, :, 4:], atol=1e-14)


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        T.embedding(T.tensor(np.ones((4, 2))), [0, 4])


def test_add_shape_error():
    with pytest.raises(ShapeError):
        T.tensor(np.ones((2, 3))) + T.tensor(np.ones((4,)))


def test_nonfinite_is_surfaced():
    with np.errstate(over="ignore"):
        with pytest.raises(NonFiniteError):
            T.tensor([1e308]) * T.tensor([1e308])
        with T.finite_checks(False):
            out = T.tensor([1e308]) * T.tensor([1e308])
    assert np.isinf(out.data[0])


# --------------------------------------------------------------------------- #
# tape behaviour
# --------------------------------------------------------------------------- #


def test_backward_sum_and_square():
    x = p(rng().standard_normal((2, 3, 4)))
    T.backward(T.total(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
    y = p([3.0])
    T.backward(T.total(y * y))
    assert y.grad[0] == 6.0


def test_backward_requires_scalar():
    x = p([1.0, 2.0])
    with pytest.raises(ShapeError):
        T.backward(x * 2.0)
    T.current_graph().clear()


def test_backward_accumulates_and_clears_tape():
    x = p([1.0, 2.0])
    T.backward(T.total(x * 3.0))
    assert len(T.current_graph()) == 0
    T.backward(T.total(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_reused_node_gets_summed_contributions():
    x = p([2.0])
    y = x * x
    T.backward(T.total(y + y + y))
    assert x.grad[0] == 12.0


def test_no_grad_records_nothing():
    x = p([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad and len(T.current_graph()) == 0


def test_default_dtype_context():
    with T.default_dtype(np.float32):
        assert T.tensor([1, 2]).dtype == np.float32
    assert T.tensor([1, 2]).dtype == np.float64


def test_backward_is_linear():
    r = rng(7)
    x = p(r.standard_normal((3, 4)))
    w = Tensor(r.standard_normal((4, 2)))

    def f():
        return T.total(T.silu(x @ w))

    def g():
        return T.mean(T.rms_norm(x, Tensor(np.ones(4))) * x)

    grads = []
    for fn in (f, g, lambda: f() * 2.5 + g() * -0.75):
        x.grad = None
        T.backward(fn())
        grads.append(x.grad.copy())
    np.testing.assert_allclose(grads[2], 2.5 * grads[0] - 0.75 * grads[1], atol=1e-12)


def test_forward_and_backward_are_deterministic():
    def run():
        x = p(rng(9).standard_normal((2, 3)))
        T.backward(T.softmax_cross_entropy(x, [0, 2]))
        return x.grad

    np.testing.assert_array_equal(run(), run())


def test_grad_check_quadratic_is_exact():
    x = p([3.0])
    assert T.grad_check(lambda: T.total(x * x), [x]) < 1e-9


# --------------------------------------------------------------------------- #
# gradient suite: every operator, several shapes and seeds, 64-bit
# --------------------------------------------------------------------------- #

OP_TOL = 1e-6


def _case_add(r):
    a, b = p(r.standard_normal((3, 4))), p(r.standard_normal((4,)))
    return (lambda: weighted_sum(a + b)), [a, b]


def _case_sub(r):
    a, b = p(r.standard_normal((2, 1, 3))), p(r.standard_normal((2, 5, 3)))
    return (lambda: weighted_sum(a - b)), [a, b]


def _case_mul(r):
    a, b = p(r.standard_normal((2, 3, 4))), p(r.standard_normal((1, 4)))
    return (lambda: weighted_sum(a * b)), [a, b]


def _case_neg(r):
    a = p(r.standard_normal((5,)))
    return (lambda: weighted_sum(-a)), [a]


def _case_matmul(r):
    a, b = p(r.standard_normal((2, 3, 4))), p(r.standard_normal((4, 5)))
    return (lambda: weighted_sum(a @ b)), [a, b]


def _case_concat(r):
    a, b = p(r.standard_normal((2, 3))), p(r.standard_normal((2, 4)))
    return (lambda: weighted_sum(T.concat([a, b], axis=1))), [a, b]


def _case_transpose(r):
    a = p(r.standard_normal((3, 4)))
    return (lambda: weighted_sum(a.T)), [a]


def _case_reshape_permute(r):
    a = p(r.standard_normal((2, 3, 4)))
    return (lambda: weighted_sum(T.permute(T.reshape(a, (6, 2, 2)), (2, 0, 1)))), [a]


def _case_getitem(r):
    a = p(r.standard_normal((4, 5)))
    return (lambda: weighted_sum(a[1:3]) + weighted_sum(a[[0, 0, 3]], seed=2)), [a]


def _case_mean(r):
    a = p(r.standard_normal((3, 3)))
    return (lambda: T.mean(a * a)), [a]


def _case_silu(r):
    a = p(3 * r.standard_normal((4, 6)))
    return (lambda: weighted_sum(T.silu(a))), [a]


def _case_rms_norm(r):
    x, g = p(r.standard_normal((3, 8))), p(r.standard_normal(8))
    return (lambda: weighted_sum(T.rms_norm(x, g))), [x, g]


def _case_embedding(r):
    w = p(r.standard_normal((6, 4)))
    ids = np.array([[0, 3, 3], [5, 1, 0]])
    return (lambda: weighted_sum(T.embedding(w, ids))), [w]


def _case_rope(r):
    x = p(r.standard_normal((2, 2, 5, 6)))
    return (lambda: weighted_sum(T.rope_apply(x, np.arange(3, 8)))), [x]


def _case_attention(r):
    q, k, v = (p(r.standard_normal((2, 2, 4, 4))) for _ in range(3))
    return (lambda: weighted_sum(T.causal_attention(q, k, v))), [q, k, v]


def _case_attention_offset(r):
    q = p(r.standard_normal((1, 2, 2, 4)))
    k, v = (p(r.standard_normal((1, 2, 5, 4))) for _ in range(2))
    return (lambda: weighted_sum(T.causal_attention(q, k, v, offset=3))), [q, k, v]


def _case_linear_combination(r):
    base = p(r.standard_normal((2, 3)))
    c = p(r.standard_normal(3))
    es = [p(r.standard_normal((2, 3))) for _ in range(3)]
    return (lambda: weighted_sum(T.linear_combination(base, c, es))), [base, c, *es]


def _case_cross_entropy(r):
    z = p(r.standard_normal((4, 8)))
    t = r.integers(0, 8, size=4)
    return (lambda: T.softmax_cross_entropy(z, t)), [z]


def _case_mse(r):
    a, b = p(r.standard_normal((3, 4))), p(r.standard_normal((3, 4)))
    return (lambda: T.mse(a, b)), [a, b]


def _case_kl(r):
    t = Tensor(r.standard_normal((3, 5)))
    s = p(r.standard_normal((3, 5)))
    return (lambda: T.kl_with_temperature(t, s, 2.0)), [s]


GRAD_CASES = {name[6:]: fn for name, fn in globals().items() if name.startswith("_case_")}


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("op", sorted(GRAD_CASES))
def test_operator_gradients(op, seed):
    f, params = GRAD_CASES[op](rng(seed))
    assert T.grad_check(f, params) < OP_TOL


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 5))
def test_cross_entropy_nonnegative(logits, target):
    target = target % len(logits)
    assert T.softmax_cross_entropy(T.tensor([logits]), [target]).item() >= 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.25, 8.0), st.floats(-5, 5))
def test_kl_nonnegative_and_shift_invariant(seed, tau, shift):
    r = rng(seed)
    t = r.standard_normal((2, 6))
    s = r.standard_normal((2, 6))
    assert T.kl_with_temperature(T.tensor(t), T.tensor(s), tau).item() >= 0.0
    shifted = T.kl_with_temperature(T.tensor(t), T.tensor(t + shift), tau).item()
    assert shifted == pytest.approx(0.0, abs=1e-12)

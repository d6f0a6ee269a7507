import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iiet import tensor as T
from iiet.integrators import (DivergenceError, HistoryStack, ScalarIVP, ShapeDriftError, SolverSpec, dlcl_step,
                              euler_step, iie_step, pc_step, rk_step, solve_scalar_ivp, solver_step)
from iiet.tensor import ConfigurationError, Tensor


class Counted:
    """Block function wrapper that counts evaluations."""

    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, y):
        self.calls += 1
        return self.fn(y)


def scalar_F(lam=-2.0, h=0.25):
    return lambda y: h * lam * y


# --------------------------------------------------------------------------- #
# SolverSpec
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("kwargs", [
    dict(kind="rk"), dict(kind="rk", order=0), dict(kind="rk", order=5), dict(kind="pc", order=None),
    dict(kind="euler", order=2), dict(kind="euler", iterations=1), dict(kind="iie"), dict(kind="iie", iterations=-1),
    dict(kind="dlcl", iterations=0), dict(kind="newton"),
])
def test_spec_rejects_irrelevant_or_missing_fields(kwargs):
    with pytest.raises(ConfigurationError):
        SolverSpec(**kwargs)


def test_spec_eval_counts():
    assert SolverSpec("euler").evals_per_block() == 1
    assert SolverSpec("rk", order=3).evals_per_block() == 3
    assert SolverSpec("pc", order=2).evals_per_block() == 3
    assert SolverSpec("iie", iterations=3).evals_per_block(3) == 4


def test_initial_coefficients():
    c = SolverSpec("iie", iterations=2).init_coefficients(3)
    np.testing.assert_array_equal(c["alpha"], [1.0, 0.0, 0.0, 0.0])
    rk = SolverSpec("rk", order=3).init_coefficients(0)
    np.testing.assert_array_equal(rk["gamma"], np.full(3, 1 / 3))
    np.testing.assert_array_equal(rk["beta"], [[0, 0, 0], [1, 0, 0], [0.5, 0.5, 0]])
    pc = SolverSpec("pc", order=2).init_coefficients(0)
    assert float(pc["ema_gamma"]) == 0.5 and float(pc["corrector_alpha"]) == 1.0 and float(pc["corrector_beta"]) == 0.0


# --------------------------------------------------------------------------- #
# HistoryStack
# --------------------------------------------------------------------------- #


def test_history_append_and_update_top():
    h = HistoryStack()
    h.append(1.0)
    h.append(2.0)
    h.update(5.0)
    assert list(h.entries) == [1.0, 5.0] and len(h) == 2
    assert h.window(3) == [1.0, 5.0]
    with pytest.raises(IndexError):
        HistoryStack().update(1.0)


# --------------------------------------------------------------------------- #
# step rules
# --------------------------------------------------------------------------- #


def test_euler_examples():
    v = np.array([1.0, -2.0])
    np.testing.assert_array_equal(euler_step(lambda y: 0 * y, v), v)
    assert euler_step(scalar_F(), 1.0) == 0.5
    np.testing.assert_array_equal(euler_step(lambda y: y, v), 2 * v)


def test_shape_drift_is_an_error():
    with pytest.raises(ShapeDriftError):
        euler_step(lambda y: y[:1], np.ones(3))
    with pytest.raises(ShapeDriftError):
        euler_step(lambda y: T.reshape(y, (3, 1)), Tensor(np.ones(3)))


def test_rk_examples():
    F = scalar_F()
    assert rk_step(F, 1.0, [1.0], np.zeros((1, 1))) == euler_step(F, 1.0)
    heun = rk_step(lambda y: y, 1.0, [0.5, 0.5], [[0, 0], [1, 0]])
    assert heun == 2.5
    assert rk_step(lambda y: y, 1.0, [0.0, 0.0], [[0, 0], [1, 0]]) == 1.0


def test_pc_examples():
    y1 = pc_step(lambda y: y, 1.0, HistoryStack(), [[0, 0], [1, 0]], 0.5, 1.0, 0.0)
    assert y1 == 3.25
    assert pc_step(lambda y: y, 1.0, HistoryStack(), [[0, 0], [1, 0]], 0.5, 0.0, 0.0) == 1.0
    # gamma = 1: predictor uses only the last stage
    calls = []
    pc_step(lambda y: calls.append(y) or y, 1.0, HistoryStack(), [[0, 0], [1, 0]], 1.0, 1.0, 0.0)
    assert calls[-1] == 1.0 + 2.0


def test_pc_corrector_window_truncates():
    h = HistoryStack()
    outs = []
    for _ in range(4):
        outs.append(pc_step(lambda y: 0 * y + 1.0, 0.0, h, [[0]], 0.5, 0.0, 1.0))
    # first stage of every block is 1; window holds at most three entries
    assert outs == [1.0, 2.0, 3.0, 3.0]


def test_iie_oracle_iterates():
    its = []
    out = iie_step(scalar_F(), 1.0, HistoryStack(), [1.0], 2, its)
    assert its == [0.5, 0.75, 0.625] and out == 0.625


@pytest.mark.parametrize("r,expected", [(0, 0.5), (1, 0.75), (2, 0.625), (3, 0.6875)])
def test_scalar_ivp_iie_values(r, expected):
    assert solve_scalar_ivp(ScalarIVP(-2.0, 1.0, 0.25), "iie", r)[-1] == pytest.approx(expected, abs=1e-12)


def test_scalar_ivp_implicit_and_explicit():
    ivp = ScalarIVP(-2.0, 1.0, 0.25, steps=3)
    np.testing.assert_allclose(solve_scalar_ivp(ivp, "implicit_euler"), [1, 2 / 3, 4 / 9, 8 / 27], atol=1e-15)
    np.testing.assert_allclose(solve_scalar_ivp(ivp, "euler"), [1, 0.5, 0.25, 0.125], atol=1e-15)


def test_scalar_ivp_r3_error():
    y = solve_scalar_ivp(ScalarIVP(-2.0, 1.0, 0.25), "iie", 3)[-1]
    assert abs(y - 2 / 3) == pytest.approx(0.5 ** 3 / 6, abs=1e-15)


def test_divergence_error():
    with pytest.raises(DivergenceError, match="< 1"):
        solve_scalar_ivp(ScalarIVP(-5.0, 1.0, 0.5), "iie", 1)
    with pytest.raises(DivergenceError):
        solve_scalar_ivp(ScalarIVP(-4.0, 1.0, 0.25), "iie", 0)


def test_scalar_ivp_validation():
    with pytest.raises(ConfigurationError):
        ScalarIVP(-1.0, 1.0, 0.0)
    with pytest.raises(ConfigurationError):
        ScalarIVP(-1.0, 1.0, 0.1, steps=0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-0.95, 0.95).filter(lambda z: abs(z) > 1e-3), st.floats(-3, 3).filter(lambda y: abs(y) > 1e-3),
       st.integers(1, 12))
def test_fixed_point_contraction(z, y0, r):
    its = []
    iie_step(lambda y: z * y, y0, HistoryStack(), [1.0], r, its)
    star = y0 / (1 - z)
    for prev, cur in zip(its, its[1:]):
        assert abs(cur - star) == pytest.approx(abs(z) * abs(prev - star), rel=1e-9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-0.9, 0.9), st.floats(0.1, 2.0))
def test_iie_limit_is_implicit_euler(z, y0):
    r = 1
    while abs(z) ** (r + 1) * abs(y0 - y0 / (1 - z)) >= 1e-10 and r < 400:
        r += 1
    got = iie_step(lambda y: z * y, y0, HistoryStack(), [1.0], r)
    assert abs(got - y0 / (1 - z)) < 1e-10


# --------------------------------------------------------------------------- #
# reduction chain (bit level)
# --------------------------------------------------------------------------- #


def _net_F(seed=0):
    W = np.random.default_rng(seed).standard_normal((4, 4)) * 0.3
    return lambda y: T.silu(y @ Tensor(W))


def test_rk1_equals_euler_bitwise():
    y = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
    F = _net_F()
    np.testing.assert_array_equal(rk_step(F, y, [1.0], [[0.0]]).data, euler_step(F, y).data)


def test_iie0_equals_dlcl_bitwise():
    r = np.random.default_rng(2)
    y = Tensor(r.standard_normal((3, 4)))
    prior = [Tensor(r.standard_normal((3, 4))) for _ in range(3)]
    alpha = Tensor(np.array([0.9, 0.1, -0.2, 0.3]))
    outs = []
    for step in (lambda F, h: iie_step(F, y, h, alpha, 0), lambda F, h: dlcl_step(F, y, h, alpha)):
        h = HistoryStack()
        for e in prior:
            h.append(e)
        outs.append(step(_net_F(), h).data)
    np.testing.assert_array_equal(outs[0], outs[1])


def test_dlcl_zero_history_equals_euler_bitwise():
    r = np.random.default_rng(3)
    y = Tensor(r.standard_normal((3, 4)))
    h = HistoryStack()
    for _ in range(2):
        h.append(Tensor(r.standard_normal((3, 4))))
    out = dlcl_step(_net_F(), y, h, Tensor(np.array([1.0, 0.0, 0.0])))
    np.testing.assert_array_equal(out.data, euler_step(_net_F(), y).data)


def test_dlcl_linear_merge():
    h = HistoryStack()
    h.append(2.0)
    h.append(4.0)
    out = dlcl_step(lambda y: 0.0 * y, 1.0, h, [0.0, 0.5, 0.5])
    assert out == 1.0 + 0.5 * (2.0 + 4.0)


# --------------------------------------------------------------------------- #
# evaluation counts and gradient flow
# --------------------------------------------------------------------------- #


@pytest.mark.parametrize("o", [1, 2, 3, 4])
def test_rk_and_pc_eval_counts(o):
    beta = np.tril(np.ones((o, o)), -1)
    F = Counted(lambda y: 0.1 * y)
    rk_step(F, 1.0, np.full(o, 1 / o), beta)
    assert F.calls == o
    F = Counted(lambda y: 0.1 * y)
    pc_step(F, 1.0, HistoryStack(), beta, 0.5, 1.0, 0.0)
    assert F.calls == o + 1


@pytest.mark.parametrize("r", [0, 1, 3, 6])
def test_iie_eval_count(r):
    F = Counted(lambda y: 0.1 * y)
    iie_step(F, 1.0, HistoryStack(), [1.0], r)
    assert F.calls == r + 1


def test_solver_step_dispatch_appends_iterates():
    spec = SolverSpec("iie", iterations=2)
    its = []
    solver_step(spec, scalar_F(), 1.0, HistoryStack(), {"alpha": [1.0]}, 2, its)
    assert len(its) == 3
    its = []
    solver_step(SolverSpec("euler"), scalar_F(), 1.0, HistoryStack(), {}, 0, its)
    assert its == [0.5]


def test_gradients_flow_through_all_iterations():
    r = np.random.default_rng(5)
    W = T.parameter(r.standard_normal((4, 4)) * 0.3)
    alpha = T.parameter(np.array([0.8, 0.3]))
    y = T.parameter(r.standard_normal((2, 4)))
    prior = Tensor(r.standard_normal((2, 4)))

    def loss():
        h = HistoryStack()
        h.append(prior)
        out = iie_step(lambda v: T.silu(v @ W), y, h, alpha, 3)
        return T.total(out * out)

    assert T.grad_check(loss, [W, alpha, y]) < 1e-7

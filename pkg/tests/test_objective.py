import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import oracles
from dafh.errors import EmptyGroupError, InvalidArgument, NumericFailure
from dafh.models import GroupMLP, LogisticModel, TrainedSystem, init_system
from dafh.objective import (
    LossTable, assigned_accuracy, balance_penalty, build_loss_table, decomposition_check,
    exact_objective, lower_bound_objective, pooled_constant, soft_losses, surrogate_objective,
    surrogate_value, surrogate_value_and_grad,
)

from conftest import make_dataset

seeds = st.integers(0, 2**32 - 1)


def test_exact_objective_all_zero():
    assert exact_objective(LossTable(np.zeros((4, 3)), [0, 1, 0, 1], 2)) == 0.0


def test_exact_objective_hand_value():
    t = LossTable([[1, 0, 1], [1, 1, 0]], [0, 1], 2)
    assert exact_objective(t) == 1.5


def test_exact_objective_empty_group():
    with pytest.raises(EmptyGroupError, match="empty group"):
        exact_objective(LossTable([[0, 1, 0]], [0], 2))


def test_lower_bound_hand_value():
    t = LossTable([[0, 0, 1]], [0], 2)
    assert lower_bound_objective(t) == 0.25
    assert decomposition_check(t) == 0.0
    assert lower_bound_objective(LossTable(np.zeros((3, 3)), [0, 1, 1], 2)) == 0.0


def test_accuracy_extremes():
    assert assigned_accuracy(LossTable(np.zeros((3, 3)), [0, 1, 0], 2)) == 1.0
    assert assigned_accuracy(LossTable(np.ones((3, 3)), [0, 1, 0], 2)) == 0.0


def test_loss_table_validation():
    with pytest.raises(InvalidArgument):
        LossTable(np.zeros((2, 2)), [0, 1], 2)
    with pytest.raises(InvalidArgument):
        LossTable(np.zeros((2, 3)), [0, 2], 2)


def test_group_risks_nan_for_empty_group():
    r = LossTable([[1, 0, 1], [0, 1, 1]], [0, 0], 2).group_risks()
    assert r[0].tolist() == [0.5, 0.5, 1.0]
    assert np.all(np.isnan(r[1]))


@given(seeds)
def test_exact_objective_matches_nested_loops(seed):
    t = oracles.random_table(np.random.default_rng(seed), n_max=10, nonempty=True)
    assert abs(exact_objective(t) - oracles.exact_objective(t)) <= 1e-12


@given(seeds)
def test_decomposition_identity(seed):
    t = oracles.random_table(np.random.default_rng(seed))
    assert abs(decomposition_check(t)) <= 1e-12
    assert abs(lower_bound_objective(t) - oracles.lower_bound(t)) <= 1e-12
    assert abs(assigned_accuracy(t) - oracles.accuracy(t)) <= 1e-12


@given(seeds)
def test_n_denominator_identity(seed):
    t = oracles.random_table(np.random.default_rng(seed))
    lhs = oracles.exact_objective(t, denom="n")
    assert abs(lhs - (pooled_constant(t) + lower_bound_objective(t))) <= 1e-12


@given(seeds)
def test_surrogate_with_hard_inputs_is_the_lower_bound(seed):
    t = oracles.random_table(np.random.default_rng(seed))
    value = surrogate_objective(t.pi, t.hard_losses[:, 1:], 0.0)
    assert abs(value - lower_bound_objective(t)) <= 1e-12


def test_loss_table_csv(tmp_path):
    t = LossTable([[1, 0, 1], [0, 1, 0]], [1, 0], 2)
    t.to_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text() == "index,assignment,L0,L1,L2\n0,1,1,0,1\n1,0,0,1,0\n"


def test_build_loss_table_threshold_convention():
    s = init_system(2, 2, 0)
    d = make_dataset(np.ones((3, 2)), [-1, -1, -1])
    t = build_loss_table(s, d)
    assert np.all(t.hard_losses == 1.0)
    assert t.group_sizes.sum() == 3


def test_build_loss_table_matches_per_sample():
    s = oracles.random_system(5, 3, 3)
    x = np.random.default_rng(0).normal(size=(20, 3))
    y = np.where(np.random.default_rng(1).random(20) < 0.5, -1, 1)
    t = build_loss_table(s, make_dataset(x, y))
    for i in range(20):
        for c, m in enumerate([s.pooled] + s.decoupled):
            p = 1 / (1 + math.exp(-(x[i] @ m.weights + m.bias)))
            assert t.hard_losses[i, c] == float((1 if p >= 0.5 else -1) != y[i])


# -- surrogate ---------------------------------------------------------------

def test_balance_penalty():
    assert balance_penalty(np.array([0.5, 0.5])) == 0.0
    assert balance_penalty(np.full(3, 1 / 3)) == pytest.approx(0.0, abs=1e-15)
    assert balance_penalty(np.array([0.7, 0.3])) < 0
    assert balance_penalty(np.array([1.0, 0.0])) == pytest.approx(-math.log(2))


def test_soft_losses_range_and_direction():
    s = oracles.random_system(1, 2, 2)
    x = np.random.default_rng(2).normal(size=(50, 2))
    y = np.where(np.arange(50) % 2 == 0, 1, -1)
    L = soft_losses(s, x, y)
    assert np.all((L >= 0) & (L <= 1))
    correct = np.column_stack([(np.where(x @ m.weights + m.bias >= 0, 1, -1) == y)
                               for m in s.decoupled])
    assert np.all(L[correct] <= 0.5) and np.all(L[~correct] >= 0.5)


def test_single_sample_hand_evaluation():
    # d=1, K=2; hidden layer fixed to a single active unit
    W1 = np.zeros((100, 1)); W1[0, 0] = 1.0
    W2 = np.zeros((2, 100)); W2[0, 0] = 2.0
    mlp = GroupMLP(W1, np.zeros(100), W2, np.array([0.0, 0.5]))
    h1, h2 = LogisticModel([0.7], -0.2), LogisticModel([-1.1], 0.3)
    s = TrainedSystem(mlp, [h1, h2], LogisticModel([0.0], 0.0))
    x, y, lam, tau = 0.8, -1, 10.0, 1.0
    z0, z1 = 2.0 * 0.8, 0.5
    p0 = math.exp(z0) / (math.exp(z0) + math.exp(z1)); p1 = 1 - p0
    sig = lambda t: 1 / (1 + math.exp(-t))
    L = [abs(sig(tau * (sig(w * x + b) - 0.5)) - 0.0) for w, b in ((0.7, -0.2), (-1.1, 0.3))]
    core = (L[0] - 4 * p0 * L[0] + L[1] - 4 * p1 * L[1]) / 4
    gamma = -(p0 * math.log(2 * p0) + p1 * math.log(2 * p1))
    expect = core + lam * gamma
    got = surrogate_value(s, np.array([[x]]), np.array([y]), lam, tau)
    assert abs(got - expect) <= 1e-12


def test_identical_decoupled_models_give_zero_group_gradient():
    s = oracles.random_system(3, 3, 3)
    for m in s.decoupled[1:]:
        m.weights = s.decoupled[0].weights.copy()
        m.bias = s.decoupled[0].bias
    x = np.random.default_rng(3).normal(size=(8, 3))
    y = np.array([1, -1] * 4)
    g = surrogate_value_and_grad(s, (x, y), 0.0)
    for arr in g.mlp.values():
        assert np.max(np.abs(arr)) <= 1e-15


def test_gradient_shapes():
    s = oracles.random_system(0, 4, 3)
    g = surrogate_value_and_grad(s, (np.ones((5, 4)), np.ones(5)), 1.0)
    for name in ("W1", "b1", "W2", "b2"):
        assert g.mlp[name].shape == getattr(s.group, name).shape
    assert all(gw.shape == (4,) for gw, _ in g.decoupled)
    assert g.lam == 1.0 and g.gamma <= 0


def test_gradient_rejects_bad_batches():
    s = oracles.random_system(0, 2, 2)
    with pytest.raises(InvalidArgument):
        surrogate_value_and_grad(s, (np.zeros((0, 2)), np.zeros(0)), 1.0)
    with pytest.raises(InvalidArgument):
        surrogate_value_and_grad(s, (np.zeros((3, 3)), np.ones(3)), 1.0)


def test_non_finite_gradient_names_block():
    s = oracles.random_system(0, 2, 2)
    s.group.W2[0, :] = 1e6  # saturates the softmax, pbar hits 0, log(0) in the penalty
    x = np.abs(np.random.default_rng(0).normal(size=(4, 2))) + 1
    with pytest.raises(NumericFailure, match="block"):
        surrogate_value_and_grad(s, (x, np.ones(4)), 1.0)


@pytest.mark.parametrize("seed", range(12))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, K, n = int(rng.integers(1, 5)), int(rng.integers(2, 4)), int(rng.integers(1, 9))
    s = oracles.random_system(seed, d, K)
    x = rng.normal(size=(n, d))
    y = np.where(rng.random(n) < 0.5, -1, 1)
    lam = float(rng.choice([0.0, 1.0, 10.0]))
    tau = float(rng.choice([1.0, 3.0]))
    g = surrogate_value_and_grad(s, (x, y), lam, tau)
    for name, where in oracles.parameter_slots(s):
        a = oracles.analytic_entry(g, where)
        f = oracles.finite_difference(s, x, y, lam, tau, where)
        assert abs(a - f) <= 1e-4 * max(1.0, abs(a)), name

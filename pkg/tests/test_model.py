import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adprog.model import (DegenerateRegionError, ModelError, ModelParams, SimConfig,
                          accumulate_amyloid, build_graph, compute_activity, compute_cognition,
                          compute_cost, compute_reward, default_graph, init_amyloid_rate,
                          initial_state, rollout, rollout_batch, step_amyloid, step_atrophy,
                          zero_action)


def path_graph(n):
    A = np.zeros((n, n))
    for i in range(n - 1):
        A[i, i + 1] = A[i + 1, i] = 1.0
    return build_graph([f"r{i}" for i in range(n)], A)


# graph -----------------------------------------------------------------

def test_two_node_laplacian():
    np.testing.assert_array_equal(default_graph().laplacian, [[1, -1], [-1, 1]])


def test_isolated_node():
    g = build_graph(["a"], [[0.0]])
    np.testing.assert_array_equal(g.laplacian, [[0.0]])


def test_three_node_path():
    np.testing.assert_array_equal(path_graph(3).laplacian, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


@pytest.mark.parametrize("adj", [
    [[0, 1], [2, 0]],          # asymmetric
    [[0, -1], [-1, 0]],        # negative
    [[1, 1], [1, 0]],          # self loop
    [[0, 1, 0], [1, 0, 1]],    # not square
])
def test_bad_adjacency_rejected(adj):
    with pytest.raises(ModelError):
        build_graph(["a", "b", "c"][:len(adj)], adj)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_laplacian_rows_sum_to_zero_and_psd(n, seed):
    r = np.random.default_rng(seed)
    A = r.uniform(0, 2, (n, n)) * (r.random((n, n)) < 0.6)
    A = np.triu(A, 1)
    A = A + A.T
    g = build_graph([str(i) for i in range(n)], A)
    assert np.all(np.abs(g.laplacian.sum(axis=1)) <= 1e-12)
    assert np.linalg.eigvalsh(g.laplacian).min() > -1e-12


# single steps ------------------------------------------------------------

def test_step_amyloid_example():
    np.testing.assert_allclose(step_amyloid([1.0, 0.0], default_graph(), 0.1), [0.9, 0.1])


def test_step_amyloid_fixed_points():
    g = default_graph()
    np.testing.assert_array_equal(step_amyloid([0.3, 0.1], g, 0.0), [0.3, 0.1])
    np.testing.assert_array_equal(step_amyloid([0.5, 0.5], g, 0.2), [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.floats(0, 1), st.floats(0.1, 2), st.integers(0, 2**31 - 1))
def test_amyloid_mass_conserved(n, beta, dt, seed):
    r = np.random.default_rng(seed)
    A = np.triu(r.uniform(0, 1, (n, n)), 1)
    g = build_graph([str(i) for i in range(n)], A + A.T)
    D = r.uniform(0, 1, n)
    assert abs(step_amyloid(D, g, beta, dt).sum() - D.sum()) <= 1e-12


def test_accumulate_amyloid():
    np.testing.assert_array_equal(accumulate_amyloid([0, 0], [1, 0]), [1, 0])
    np.testing.assert_array_equal(accumulate_amyloid([0.4, 0.2], [0, 0]), [0.4, 0.2])
    np.testing.assert_allclose(accumulate_amyloid([1.3, 1.2], [0.02, 0.01]), [1.32, 1.21])


def test_activity():
    np.testing.assert_array_equal(compute_activity([4.0], [2.0], 1.0, 1), [2.0])
    np.testing.assert_array_equal(compute_activity([4.0], [2.0], 1.0, 2), [1.0])
    np.testing.assert_array_equal(compute_activity([0.0, 0.0], [2.0, 3.0]), [0.0, 0.0])
    with pytest.raises(DegenerateRegionError):
        compute_activity([1.0], [0.0])


def test_cognition_and_cost():
    assert compute_cognition(np.array([7.0, 3.0])) == 10.0
    assert compute_cognition(np.array([0.0, 0.0])) == 0.0
    assert compute_cost(np.array([2.0, 0.5])) == 2.5


def test_step_atrophy():
    np.testing.assert_allclose(step_atrophy([3.5], [0.1], [1.0], 0.5, 0.1), [3.35])
    np.testing.assert_array_equal(step_atrophy([3.5, 2.0], [0.1, 0.2], [1, 1], 0.0, 0.0), [3.5, 2.0])
    np.testing.assert_array_equal(step_atrophy([3.5, 2.0], [0, 0], [0, 0], 0.5, 0.1), [3.5, 2.0])


# reward ----------------------------------------------------------------

def test_reward_examples():
    assert compute_reward(10.0, 0.0, 10.0, 1.0) == 0.0
    assert compute_reward(8.0, 3.0, 10.0, 2.0, penalized=False) == -7.0
    assert compute_reward(10.4, 0.0, 10.0, 1.0) == pytest.approx(-0.4 * 100 ** 0.4)
    assert compute_reward(10.4, 0.0, 10.0, 1.0) == pytest.approx(-2.5238, abs=1e-4)


def test_reward_clamped():
    assert compute_reward(20.0, 0.0, 10.0, 1.0) == -2000.0
    assert compute_reward(0.0, -5000.0, 10.0, 1.0) == 2000.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 10), st.floats(0, 50), st.floats(0, 8))
def test_penalized_matches_plain_below_demand(C, M, lam):
    a = compute_reward(C, M, 10.0, lam, penalized=True)
    b = compute_reward(C, M, 10.0, lam, penalized=False)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 30), st.floats(0, 1e4), st.floats(0, 8))
def test_reward_within_bounds(C, M, lam):
    r = compute_reward(C, M, 10.0, lam)
    assert -2000.0 <= r <= 2000.0


# phi -> D initialisation -----------------------------------------------------

def test_init_rate_isolated_node():
    g = build_graph(["a"], [[0.0]])
    np.testing.assert_allclose(init_amyloid_rate([2.0], g, 0.1, 70.0), [0.1])


def test_init_rate_linear_in_phi():
    g = default_graph()
    np.testing.assert_array_equal(init_amyloid_rate([0.0, 0.0], g, 0.05, 75.0), [0.0, 0.0])
    small = init_amyloid_rate([1.3e-9, 1.2e-9], g, 0.05, 75.0)
    assert np.all(np.abs(small) < 1e-9)


def test_init_rate_two_node_oracle():
    # Independent evaluation: H = [[1,-1],[-1,1]] has eigenpairs
    # nu=0 with u=(1,1)/sqrt2 and nu=2 with u=(1,-1)/sqrt2.
    beta, t_po, phi = 0.05, 25.0, np.array([1.3, 1.2])
    s = beta * t_po
    u0 = np.array([1.0, 1.0]) / math.sqrt(2)
    u2 = np.array([1.0, -1.0]) / math.sqrt(2)
    Ht = np.outer(u0, u0) / s + np.outer(u2, u2) * 2 * math.exp(-2 * s) / (1 - math.exp(-2 * s))
    expected = np.maximum(beta * Ht @ phi, 0)
    got = init_amyloid_rate(phi, default_graph(), beta, 50.0 + t_po)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)
    # frozen values of the same oracle
    np.testing.assert_allclose(got, [0.05044713, 0.04955287], atol=1e-8)


def test_init_rate_young_subject_uses_floor():
    g = default_graph()
    with pytest.warns(RuntimeWarning):
        young = init_amyloid_rate([1.3, 1.2], g, 0.05, 45.0)
    np.testing.assert_allclose(young, init_amyloid_rate([1.3, 1.2], g, 0.05, 51.0))


# rollout -------------------------------------------------------------------

P0 = ModelParams(alpha1=0.0, alpha2_gamma=0.0, beta=0.0)


def test_zero_action_fixed_point():
    s0 = initial_state([3.0, 3.2], [0.1, 0.05], [1.0, 0.8], [9.0, 1.0], P0)
    tr = rollout(s0, zero_action, P0, SimConfig())
    assert len(tr.states) == 11
    for s in tr.states:
        np.testing.assert_array_equal(s.X, s0.X)
        np.testing.assert_array_equal(s.I, s0.I)
        np.testing.assert_array_equal(s.D, s0.D)


def test_actions_clipped_and_floored():
    s0 = initial_state([3.0, 3.2], [0.0, 0.0], [1.0, 0.8], [9.0, 1.0], P0)
    tr = rollout(s0, lambda X, I, t: np.full_like(I, -10.0), P0, SimConfig())
    I = tr.I
    np.testing.assert_array_equal(I[1], [7.0, 0.0])
    np.testing.assert_array_equal(I[2], [5.0, 0.0])
    np.testing.assert_array_equal(I[5:], 0.0)


def test_state_consistency_and_monotone_atrophy(rng):
    p = ModelParams(alpha1=0.3, alpha2_gamma=0.05, beta=0.02, lambda_=1.5)
    X0 = rng.uniform(2.5, 4.5, (20, 2))
    D0 = rng.uniform(0, 0.2, (20, 2))
    src = lambda X, I, t: rng.uniform(-3, 3, I.shape)
    b = rollout_batch(X0, D0, np.zeros_like(X0), np.full((20, 2), 5.0), default_graph(), p,
                      SimConfig(), src)
    np.testing.assert_array_equal(b.C, b.I.sum(axis=2))
    np.testing.assert_array_equal(b.M, b.Y.sum(axis=2))
    np.testing.assert_array_equal(b.Y, b.I / b.X)
    assert np.all(np.diff(b.X, axis=1) <= 0)
    assert np.all(np.abs(b.actions) <= 3) and np.all(np.abs(np.diff(b.I, axis=1)) <= 2 + 1e-12)
    assert np.all((b.rewards >= -2000) & (b.rewards <= 2000))


def test_collapse_freezes_trajectory():
    p = ModelParams(alpha1=5.0, alpha2_gamma=0.0, beta=0.0)
    s0 = initial_state([1.0, 3.0], [0.3, 0.0], [0, 0], [5.0, 5.0], p)
    tr = rollout(s0, zero_action, p, SimConfig())
    assert tr.truncated == "region_collapse"
    assert len(tr.states) < 11
    assert all(np.all(s.X > 0) for s in tr.states)


def test_frozen_state_keeps_earning_reward():
    p = ModelParams(alpha1=5.0, alpha2_gamma=0.0, beta=0.0)
    b = rollout_batch([[1.0, 3.0]], [[0.3, 0.0]], [[0, 0]], [[5.0, 5.0]], default_graph(), p,
                      SimConfig(), zero_action)
    n = int(b.length[0])
    assert b.collapsed[0] and n < 10
    # after the collapse the frozen state repeats its last reward
    np.testing.assert_array_equal(b.rewards[0, n:], b.rewards[0, n - 1])
    assert np.all(b.rewards[0] < 0)


def test_rollout_deterministic(rng):
    p = ModelParams(alpha1=0.3, alpha2_gamma=0.05, beta=0.02)
    s0 = initial_state([3.0, 3.2], [0.1, 0.05], [1.0, 0.8], [9.0, 1.0], p)
    src = lambda X, I, t: np.sin(X * t)
    a = rollout(s0, src, p, SimConfig())
    b = rollout(s0, src, p, SimConfig())
    for x, y in zip(a.states, b.states):
        assert np.array_equal(x.X, y.X) and np.array_equal(x.I, y.I)
    assert np.array_equal(a.rewards, b.rewards)


def test_config_validation():
    with pytest.raises(ModelError):
        SimConfig(c_task=0)
    with pytest.raises(ModelError):
        SimConfig(reward_floor=1, reward_ceiling=0)
    with pytest.raises(ModelError):
        ModelParams(alpha1=-1, alpha2_gamma=0, beta=0)
    with pytest.raises(ModelError):
        ModelParams(alpha1=0, alpha2_gamma=0, beta=0, activity_exponent=3)

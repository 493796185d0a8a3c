"""Interior-point QP solver tests.

The workhorse oracle enumerates every active set of a small random QP:
for each subset of inequalities treated as equalities, solve the linear
KKT system, keep candidates that are primal feasible with nonnegative
multipliers, and take the best objective.  That is exact for strictly
convex problems and independent of the solver under test.
"""

import numpy as np
import pytest
import scipy.sparse as sp
from itertools import combinations

from transactive.qp import solve_qp


def _active_set_oracle(h_mat, q, a_eq, b_eq, g_ineq, h_ineq):
    n = q.size
    p = 0 if a_eq is None else a_eq.shape[0]
    m = g_ineq.shape[0]
    best = None
    for r in range(m + 1):
        for subset in combinations(range(m), r):
            rows = [g_ineq[list(subset)]] if subset else []
            if p:
                rows.insert(0, a_eq)
            cons = np.vstack(rows) if rows else np.zeros((0, n))
            rhs = np.concatenate(
                ([b_eq] if p else []) + ([h_ineq[list(subset)]] if subset else [])
            ) if cons.shape[0] else np.zeros(0)
            k = cons.shape[0]
            kkt = np.block([[h_mat, cons.T], [cons, np.zeros((k, k))]])
            vec = np.concatenate([-q, rhs])
            try:
                sol = np.linalg.solve(kkt, vec)
            except np.linalg.LinAlgError:
                continue
            if np.abs(kkt @ sol - vec).max() > 1e-8:
                continue  # near-singular system, solution untrustworthy
            x = sol[:n]
            mult = sol[n + p:]
            if (g_ineq @ x - h_ineq).max(initial=-1.0) > 1e-8:
                continue
            if mult.size and mult.min() < -1e-8:
                continue
            val = 0.5 * x @ h_mat @ x + q @ x
            if best is None or val < best[0] - 1e-12:
                best = (val, x)
    return best


def test_unconstrained_matches_linear_solve():
    rng = np.random.default_rng(0)
    mat = rng.normal(size=(5, 5))
    h_mat = mat @ mat.T + np.eye(5)
    q = rng.normal(size=5)
    res = solve_qp(h_mat, q)
    assert res.status == "optimal"
    np.testing.assert_allclose(res.x, np.linalg.solve(h_mat, -q), atol=1e-8)


def test_equality_dual_sign_convention():
    # min 0.5 x^2  s.t.  x = 3  ->  x* = 3, stationarity x + y = 0 so y = -3
    res = solve_qp(np.eye(1), np.zeros(1), a_eq=np.eye(1), b_eq=np.array([3.0]))
    assert res.status == "optimal"
    assert res.x[0] == pytest.approx(3.0, abs=1e-9)
    assert res.y[0] == pytest.approx(-3.0, abs=1e-9)


def test_box_constrained_projection():
    # min ||x - c||^2 over the unit box; solution is the clipped center
    c = np.array([1.7, -0.4, 0.5])
    g = np.vstack([np.eye(3), -np.eye(3)])
    h = np.concatenate([np.ones(3), np.zeros(3)])
    res = solve_qp(2 * np.eye(3), -2 * c, g_ineq=g, h_ineq=h)
    assert res.status == "optimal"
    np.testing.assert_allclose(res.x, np.clip(c, 0, 1), atol=1e-8)
    # the binding upper bound's multiplier equals the gradient magnitude there
    assert res.z[0] == pytest.approx(2 * (c[0] - 1.0), abs=1e-7)


def test_random_qps_match_active_set_enumeration():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(50):
        n = rng.integers(2, 6)
        m = rng.integers(1, 8)
        p = rng.integers(0, 3)
        mat = rng.normal(size=(n, n))
        h_mat = mat @ mat.T + 0.5 * np.eye(n)
        q = rng.normal(size=n)
        x_hat = rng.normal(size=n)
        g_ineq = rng.normal(size=(m, n))
        h_ineq = g_ineq @ x_hat + rng.uniform(0.1, 2.0, size=m)
        a_eq = rng.normal(size=(p, n)) if p else None
        b_eq = a_eq @ x_hat if p else None
        best = _active_set_oracle(h_mat, q, a_eq, b_eq, g_ineq, h_ineq)
        if best is None:
            continue
        res = solve_qp(h_mat, q, a_eq, b_eq, g_ineq, h_ineq)
        assert res.status == "optimal"
        assert res.objective == pytest.approx(best[0], abs=1e-6)
        np.testing.assert_allclose(res.x, best[1], atol=1e-5)
        checked += 1
    assert checked >= 40


def test_kkt_residuals_small_after_polish():
    rng = np.random.default_rng(7)
    n, m, p = 8, 12, 3
    mat = rng.normal(size=(n, n))
    h_mat = mat @ mat.T + np.eye(n)
    q = rng.normal(size=n)
    x_hat = rng.normal(size=n)
    g_ineq = rng.normal(size=(m, n))
    h_ineq = g_ineq @ x_hat + rng.uniform(0.05, 1.0, size=m)
    a_eq = rng.normal(size=(p, n))
    b_eq = a_eq @ x_hat
    res = solve_qp(h_mat, q, a_eq, b_eq, g_ineq, h_ineq)
    assert res.status == "optimal"
    stat = h_mat @ res.x + q + a_eq.T @ res.y + g_ineq.T @ res.z
    assert np.abs(stat).max() < 1e-6
    assert np.abs(a_eq @ res.x - b_eq).max() < 1e-6
    assert (g_ineq @ res.x - h_ineq).max() < 1e-6
    assert np.abs(res.z * res.s).max() < 1e-6
    assert res.z.min() >= 0


def test_linear_program_vertex():
    # min -x1 - 2 x2  s.t. x >= 0, x1 + x2 <= 1  -> (0, 1)
    g = np.array([[-1.0, 0.0], [0.0, -1.0], [1.0, 1.0]])
    h = np.array([0.0, 0.0, 1.0])
    res = solve_qp(np.zeros((2, 2)), np.array([-1.0, -2.0]), g_ineq=g, h_ineq=h)
    assert res.status == "optimal"
    np.testing.assert_allclose(res.x, [0.0, 1.0], atol=1e-7)
    assert res.objective == pytest.approx(-2.0, abs=1e-7)


def test_infeasible_is_detected():
    # x <= -1 and x >= 1 cannot hold together
    g = np.array([[1.0], [-1.0]])
    h = np.array([-1.0, -1.0])
    res = solve_qp(np.eye(1), np.zeros(1), g_ineq=g, h_ineq=h, max_iter=100)
    assert res.status == "infeasible"


def test_sparse_inputs_accepted():
    h_mat = sp.eye(4) * 2.0
    q = -np.arange(4.0)
    g = sp.vstack([sp.eye(4), -sp.eye(4)])
    h = np.concatenate([np.full(4, 0.8), np.zeros(4)])
    res = solve_qp(h_mat, q, g_ineq=g, h_ineq=h)
    assert res.status == "optimal"
    np.testing.assert_allclose(res.x, np.minimum(np.arange(4.0) / 2.0, 0.8), atol=1e-8)


def test_degenerate_inequalities_still_solve():
    # duplicated rows make the active set degenerate; solver must not break
    g = np.array([[1.0, 1.0], [1.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    h = np.array([1.0, 1.0, 0.0, 0.0])
    res = solve_qp(2 * np.eye(2), np.array([-4.0, -4.0]), g_ineq=g, h_ineq=h)
    assert res.status == "optimal"
    np.testing.assert_allclose(res.x, [0.5, 0.5], atol=1e-6)


def test_equality_only_system():
    # min 0.5||x||^2 s.t. sum(x) = 4 over 4 vars -> all ones
    res = solve_qp(np.eye(4), np.zeros(4),
                   a_eq=np.ones((1, 4)), b_eq=np.array([4.0]))
    assert res.status == "optimal"
    np.testing.assert_allclose(res.x, np.ones(4), atol=1e-9)
    assert res.y[0] == pytest.approx(-1.0, abs=1e-9)

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from storage_lmp.dispatch import build_network_qp, build_pool_qp
from storage_lmp.qp import QpProblem, Status, TooLarge, active_set_oracle, solve
from storage_lmp.qp.oracle import OracleInfeasible


def random_qp(seed, n=None, m=None, me=None, definite=True):
    """Feasible-by-construction QP; box rows keep semidefinite cases bounded."""
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 9))
    m = m if m is not None else int(rng.integers(1, 11))
    me = me if me is not None else int(rng.integers(0, min(3, n)))
    M = rng.normal(size=(n, n))
    H = M @ M.T + (0.1 * np.eye(n) if definite else 0.0)
    if not definite:
        H = M[:, : max(1, n // 2)] @ M[:, : max(1, n // 2)].T
    q = rng.normal(size=n) * 3
    x0 = rng.normal(size=n)
    G = rng.normal(size=(m, n))
    h = G @ x0 + rng.uniform(0, 1, m) * (rng.random(m) < 0.7)
    if not definite:
        G = np.vstack([G, np.eye(n), -np.eye(n)])
        h = np.concatenate([h, np.full(2 * n, 3.0)])
    A = rng.normal(size=(me, n))
    return QpProblem(H, q, A, A @ x0, G, h)


# ---- small closed forms


def test_equality_1d():
    prob = QpProblem([[1.0]], [0.0], [[1.0]], [3.0], np.zeros((0, 1)), [])
    for sol in (solve(prob), active_set_oracle(prob)):
        assert sol.x[0] == pytest.approx(3.0, abs=1e-9)
        assert sol.y_eq[0] == pytest.approx(-3.0, abs=1e-9)


def test_active_bound_1d():
    prob = QpProblem([[1.0]], [0.0], np.zeros((0, 1)), [], [[-1.0]], [-1.0])
    for sol in (solve(prob), active_set_oracle(prob)):
        assert sol.status is Status.OPTIMAL
        assert sol.x[0] == pytest.approx(1.0, abs=1e-9)
        assert sol.y_in[0] == pytest.approx(1.0, abs=1e-9)


def test_pool_example_objective(pool42):
    sol = solve(build_pool_qp(pool42, 10.0))
    assert sol.objective == pytest.approx(225.0, abs=1e-6)
    np.testing.assert_allclose(sol.x[:2], [15.0, 15.0], atol=1e-6)


def test_oracle_pool_no_storage(pool42):
    sol = active_set_oracle(build_pool_qp(pool42, 0.0))
    assert sol.objective == pytest.approx(250.0, abs=1e-9)
    np.testing.assert_allclose(sol.x[:2], [10.0, 20.0], atol=1e-9)


def test_oracle_matches_on_four_by_six():
    for seed in range(100):
        prob = random_qp(seed, n=4, m=6, me=0)
        assert solve(prob).objective == pytest.approx(active_set_oracle(prob).objective, abs=1e-6)


# ---- oracle agreement


@pytest.mark.parametrize("seed", range(60))
def test_ipm_matches_oracle(seed):
    prob = random_qp(1000 + seed)
    ref = active_set_oracle(prob)
    sol = solve(prob)
    assert sol.status is Status.OPTIMAL
    assert abs(sol.objective - ref.objective) <= 1e-6 * (1 + abs(ref.objective))
    np.testing.assert_allclose(sol.x, ref.x, atol=1e-5)


@pytest.mark.parametrize("seed", range(30))
def test_ipm_matches_oracle_semidefinite(seed):
    prob = random_qp(5000 + seed, n=3, m=3, definite=False)
    ref = active_set_oracle(prob)
    sol = solve(prob)
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(ref.objective, abs=1e-6)


def test_oracle_bound():
    prob = QpProblem(np.eye(1), [0.0], np.zeros((0, 1)), [], np.ones((21, 1)), np.ones(21))
    with pytest.raises(TooLarge):
        active_set_oracle(prob)


def test_oracle_infeasible():
    prob = QpProblem(np.eye(1), [0.0], np.zeros((0, 1)), [], [[1.0], [-1.0]], [0.0, -1.0])
    with pytest.raises(OracleInfeasible):
        active_set_oracle(prob)


# ---- solver contract


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_kkt_contract(seed):
    prob = random_qp(seed)
    sol = solve(prob, tol=1e-8)
    assert sol.status is Status.OPTIMAL
    assert set(sol.residuals) == {"stationarity", "primal_eq", "primal_in", "complementarity"}
    assert sol.max_residual() <= 1e-8
    assert sol.y_in.min() >= -1e-8
    assert sol.objective == pytest.approx(prob.objective(sol.x), abs=1e-12, rel=1e-12)
    assert sol.residuals == pytest.approx(prob.residuals(sol.x, sol.y_eq, sol.y_in), abs=1e-15)


@pytest.mark.parametrize("seed", range(10))
def test_equality_duals_are_sensitivities(seed):
    prob = random_qp(200 + seed, n=6, m=4, me=2)
    sol = solve(prob)
    rng = np.random.default_rng(seed)
    direction = rng.normal(size=prob.n_eq)
    delta = 1e-4 * (1 + np.abs(prob.beq).max()) * direction
    # central difference cancels the curvature term
    up = QpProblem(prob.H, prob.q, prob.Aeq, prob.beq + delta, prob.Ain, prob.bin)
    dn = QpProblem(prob.H, prob.q, prob.Aeq, prob.beq - delta, prob.Ain, prob.bin)
    su, sd = solve(up), solve(dn)
    assert su.optimal and sd.optimal
    fd = (su.objective - sd.objective) / 2
    assert fd == pytest.approx(-sol.y_eq @ delta, rel=1e-3, abs=1e-8)


@pytest.mark.parametrize("s", [1e-3, 0.5, 7.0, 1e3])
def test_scaling_covariance(s):
    prob = random_qp(77, n=6, m=4, me=1)
    base, scaled = solve(prob), solve(prob.scaled(s))
    np.testing.assert_allclose(scaled.x, base.x, atol=1e-6)
    assert scaled.objective == pytest.approx(s * base.objective, rel=1e-7, abs=1e-9)
    np.testing.assert_allclose(scaled.y_in, s * base.y_in, atol=1e-6 * max(s, 1))
    np.testing.assert_allclose(scaled.y_eq, s * base.y_eq, atol=1e-6 * max(s, 1))


def test_infeasible_detected():
    prob = QpProblem(np.eye(2), np.zeros(2), np.zeros((0, 2)), [],
                     [[1.0, 0.0], [-1.0, 0.0]], [0.0, -1.0])
    assert solve(prob).status is Status.INFEASIBLE


def test_inconsistent_equalities_detected():
    prob = QpProblem(np.eye(2), np.zeros(2), [[1.0, 1.0], [1.0, 1.0]], [1.0, 2.0],
                     [[1.0, 0.0]], [5.0])
    assert solve(prob).status is Status.INFEASIBLE


def test_max_iter_reported():
    prob = random_qp(3)
    sol = solve(prob, max_iter=1)
    assert sol.status is Status.MAX_ITER
    assert set(sol.residuals) == {"stationarity", "primal_eq", "primal_in", "complementarity"}


def test_asymmetric_hessian_rejected():
    with pytest.raises(ValueError):
        QpProblem([[1.0, 1.0], [0.0, 1.0]], [0, 0], np.zeros((0, 2)), [], np.zeros((0, 2)), [])


def test_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        QpProblem(np.eye(2), [0.0, 0.0, 0.0], np.zeros((0, 2)), [], np.zeros((0, 2)), [])


def test_sparse_and_dense_paths_agree(threebus):
    prob = build_network_qp(threebus, 120.0)
    s, d = solve(prob, sparse=True), solve(prob, sparse=False)
    assert s.status is Status.OPTIMAL and d.status is Status.OPTIMAL
    assert s.objective == pytest.approx(d.objective, rel=1e-9)
    assert s.max_residual() <= 1e-8 and d.max_residual() <= 1e-8


def test_json_dump_reloads():
    prob = random_qp(5, me=1)
    sol = solve(prob)
    data = json.loads(prob.to_json(sol))
    again = QpProblem(data["H"], data["q"], data["Aeq"], data["beq"], data["Ain"], data["bin"])
    np.testing.assert_array_equal(again.H, prob.H)
    assert data["solution"]["status"] == "Optimal"
    assert again.objective(data["solution"]["x"]) == pytest.approx(sol.objective)


def test_cross_check_against_cvxopt():
    cvxopt = pytest.importorskip("cvxopt")
    cvxopt.solvers.options.update(show_progress=False, abstol=1e-12, reltol=1e-12, feastol=1e-12)
    for seed in range(20):
        prob = random_qp(9000 + seed, me=1)
        m = cvxopt.matrix
        res = cvxopt.solvers.qp(m(prob.H), m(prob.q), m(prob.Ain), m(prob.bin),
                                m(prob.Aeq), m(prob.beq))
        assert solve(prob).objective == pytest.approx(res["primal objective"], abs=1e-6)

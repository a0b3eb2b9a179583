import numpy as np
import pytest

from storage_lmp import Bus, Line, NetworkInstance, PoolInstance, QuadraticCost
from storage_lmp import parametric as pm
from storage_lmp.dispatch import build_pool_qp, solve_dispatch
from storage_lmp.qp import active_set_oracle


def closed_form_pool42(E):
    # g = (10 + u, 20 - u) with u = min(E/2, 5)
    u = min(E / 2, 5.0)
    return 0.5 * ((10 + u) ** 2 + (20 - u) ** 2)


@pytest.fixture(scope="module")
def pool_sweep(pool42):
    return pm.sweep(pool42, np.arange(0.0, 21.0, 2.0))


@pytest.fixture(scope="module")
def tb_sweep(threebus):
    return pm.sweep(threebus, np.arange(0.0, 201.0, 4.0))


# ---- grids


def test_grid_validation():
    with pytest.raises(pm.GridError):
        pm.check_grid([0.0, 2.0, 1.0])
    with pytest.raises(pm.GridError):
        pm.check_grid([-1.0, 2.0])
    with pytest.raises(pm.GridError):
        pm.check_grid([])
    with pytest.raises(pm.GridError):
        pm.sweep(PoolInstance(QuadraticCost(1.0), [1.0, 2.0]), [1.0, 1.0])


def test_default_grid_shape(pool42, tier, threebus):
    for inst in (pool42, tier, threebus):
        g = pm.default_grid(inst)
        assert g.size == 51 and g[0] == 0.0
        tot = pm.total_demand(inst)
        assert g[-1] >= 2.0 * (tot.max() - tot.min())


def test_sufficient_capacity_pool42(pool42):
    # cumulative deviation from the mean 15 peaks at 5
    assert pm.sufficient_capacity(pool42) == pytest.approx(10.0)


# ---- sweep


def test_pool_sweep_two_points(pool42):
    res = pm.sweep(pool42, [0.0, 10.0])
    np.testing.assert_allclose(res.cost, [250.0, 225.0], atol=1e-6)
    assert res.kind == "pool"
    assert np.isnan(res.marginal[0]) and res.marginal[1] == pytest.approx(2.5, abs=1e-6)


def test_pool_sweep_closed_form(pool_sweep):
    expect = [closed_form_pool42(E) for E in pool_sweep.grid]
    np.testing.assert_allclose(pool_sweep.cost, expect, atol=1e-6)
    # at E = 0 every rho >= 5 certifies optimality; elsewhere it is the slope
    np.testing.assert_allclose(pool_sweep.rho[1:], [max(5 - E / 2, 0.0) for E in pool_sweep.grid[1:]],
                               atol=1e-6)
    assert pool_sweep.rho[0] >= 5.0 - 1e-6


def test_flat_pool_sweep_constant():
    res = pm.sweep(PoolInstance(QuadraticCost(1.0, 2.0), [5.0] * 4), [0.0, 1.0, 7.0])
    np.testing.assert_allclose(res.cost, res.cost[0], atol=1e-8)


def test_parallel_sweep_matches_serial(pool42):
    grid = [0.0, 3.0, 6.0, 9.0]
    a, b = pm.sweep(pool42, grid, jobs=1), pm.sweep(pool42, grid, jobs=2)
    np.testing.assert_array_equal(a.grid, b.grid)
    np.testing.assert_allclose(a.cost, b.cost, rtol=0, atol=1e-12)


def test_sweep_without_zero_still_has_baseline(threebus):
    res = pm.sweep(threebus, [50.0, 60.0])
    assert res.baseline.E == 0.0
    assert res.prices[0].spatial is not None


def test_point_failure_names_index():
    # 5 MW at bus 2 through a 1 MW line is unservable without storage
    inst = NetworkInstance((Bus(1, QuadraticCost(1.0)), Bus(2)), (Line(1, 2, 1.0, 1.0),),
                           np.array([[0.0, 0.0], [5.0, 5.0]]))
    with pytest.raises(pm.PointFailed) as info:
        pm.sweep(inst, [0.0, 1.0])
    assert info.value.index == 0 and info.value.E == 0.0


def test_index_of(pool_sweep):
    assert pool_sweep.index_of(10.0) == 5
    with pytest.raises(KeyError):
        pool_sweep.index_of(3.0)


# ---- convexity


def test_convexity_two_point_example():
    rep = pm.check_convexity([0.0, 10.0], [250.0, 225.0])
    assert rep.monotone and rep.convex and rep.second.size == 0


def test_convexity_quadratic_samples():
    assert pm.check_convexity([0.0, 1.0, 2.0], [0.0, 1.0, 4.0]).convex


def test_convexity_arithmetic_example():
    rep = pm.check_convexity([0.0, 1.0, 2.0], [3.0, 1.0, 2.5])
    assert rep.convex and rep.second[0] == pytest.approx(3.5)
    assert not rep.monotone and rep.monotone_failures == (2,)
    assert not rep.passed


def test_concave_flagged():
    rep = pm.check_convexity([0.0, 1.0, 2.0, 3.0], [10.0, 9.5, 8.0, 5.0])
    assert rep.monotone and not rep.convex
    assert rep.convex_failures == (1, 2)


def test_nonuniform_grid_second_difference():
    g = np.array([0.0, 1.0, 3.0, 3.5])
    np.testing.assert_allclose(pm.second_differences(g, g ** 2), 2.0 * np.array([1.5, 1.25]) ** 2)


def test_threebus_curve_convex(tb_sweep, threebus):
    rep = pm.check_convexity(tb_sweep)
    assert rep.passed, (rep.worst_first, rep.worst_second)
    # spot-check three points against direct solves
    for E in (12.0, 100.0, 188.0):
        k = tb_sweep.index_of(E)
        assert tb_sweep.cost[k] == pytest.approx(solve_dispatch(threebus, E).objective, abs=1e-6)


# ---- bounds


def test_bounds_example(pool42):
    res = pm.sweep(pool42, [0.0, 5.0, 10.0])
    np.testing.assert_allclose(res.ubmci, [20.0, 17.5, 15.0], atol=1e-6)
    np.testing.assert_allclose(res.lbmci, [10.0, 12.5, 15.0], atol=1e-6)
    assert pm.check_bound_monotonicity(res).passed
    oracle = active_set_oracle(build_pool_qp(pool42, 5.0))
    np.testing.assert_allclose(oracle.x[:2], [12.5, 17.5], atol=1e-9)


def test_bounds_flat():
    res = pm.sweep(PoolInstance(QuadraticCost(1.0), [3.0, 3.0, 3.0]), [0.0, 1.0, 2.0])
    rep = pm.check_bound_monotonicity(res)
    assert rep.passed
    np.testing.assert_allclose(res.ubmci, res.lbmci, atol=1e-7)


def test_bounds_wrong_model(tb_sweep):
    with pytest.raises(pm.WrongModel):
        pm.check_bound_monotonicity(tb_sweep)


def test_bound_failures_reported(pool_sweep):
    import dataclasses
    broken = dataclasses.replace(pool_sweep, ubmci=pool_sweep.ubmci[::-1])
    assert pm.check_bound_monotonicity(broken).ub_failures


# ---- convergence


def test_target_pool42(pool42):
    assert pm.convergence_target(pool42) == pytest.approx(15.0)


def test_target_tier(tier):
    hourly = np.array([4.0] * 9 + [12.0] * 4 + [6.0] * 11)
    assert pm.convergence_target(tier) == pytest.approx(2.0 * hourly.mean())
    assert pm.convergence_target(tier) == pytest.approx(12.5)


def test_target_single_bus_network():
    net = NetworkInstance((Bus(1, QuadraticCost(2.0, 1.0)),), (), np.array([[1.0, 5.0]]))
    np.testing.assert_allclose(pm.convergence_target(net), [2.0 * 3.0 + 1.0])


def test_target_threebus_oracle(threebus):
    np.testing.assert_allclose(pm.convergence_target(threebus),
                               pm.convergence_target(threebus, oracle=True), atol=1e-7)


def test_detect_convergence_pool42(pool_sweep):
    assert pm.detect_convergence(pool_sweep, tol=1e-6) == 10.0


def test_detect_convergence_flat():
    res = pm.sweep(PoolInstance(QuadraticCost(1.0), [2.0] * 3), [0.0, 1.0, 2.0])
    assert pm.detect_convergence(res, tol=1e-6) == 0.0


def test_not_reached(pool42):
    with pytest.raises(pm.NotReached):
        pm.detect_convergence(pm.sweep(pool42, [0.0, 2.0, 4.0]), tol=1e-6)


def test_convergence_must_persist(pool_sweep):
    import dataclasses
    # a single early hit does not count if later points leave the band
    prices = list(pool_sweep.prices)
    prices[1] = prices[-1]
    res = dataclasses.replace(pool_sweep, prices=tuple(prices))
    assert pm.detect_convergence(res, tol=1e-6) == 10.0
    prices[4] = prices[-1]
    res = dataclasses.replace(pool_sweep, prices=tuple(prices))
    assert pm.detect_convergence(res, tol=1e-6) == 8.0


# ---- marginal value


def test_equal_marginal_value_pool(pool_sweep):
    sol = pool_sweep.solutions[2]
    rep = pm.check_equal_marginal_value(sol, pool_sweep)
    assert rep.passed and rep.sums.size == 1
    assert rep.rho == pytest.approx(3.0, abs=1e-6)


def test_equal_marginal_value_network(threebus):
    fine = pm.sweep(threebus, np.arange(40.0, 81.0, 1.0))
    checked = 0
    for sol in fine.solutions:
        rep = pm.check_equal_marginal_value(sol, fine)
        assert rep.rho_nonnegative and rep.spread <= 1e-6 and rep.deviation <= 1e-6
        if rep.slope_checked:
            checked += 1
            assert rep.slope_rel_error <= 0.05
        assert rep.passed
    assert checked >= 5


def test_marginal_value_zero_past_convergence(threebus):
    E = 2.0 * pm.default_grid(threebus)[-1]
    res = pm.sweep(threebus, [E - 10.0, E, E + 10.0])
    assert abs(res.solutions[1].duals.rho) <= 1e-8
    assert abs(res.marginal[1]) <= 1e-6


def test_marginal_value_with_regularization(threebus):
    sol = solve_dispatch(threebus, 80.0, reg=1e-4)
    rep = pm.check_equal_marginal_value(sol, reg=1e-4)
    assert rep.spread <= 1e-6 and rep.deviation <= 1e-6


# ---- large-capacity limit


def test_p3_single_bus_network():
    d = np.array([[2.0, 9.0, 4.0]])
    net = NetworkInstance((Bus(1, QuadraticCost(1.0)),), (), d)
    rep = pm.verify_p3_equivalence(net, 2.0 * float(d.max() - d.min()))
    np.testing.assert_allclose(rep.g_limit, [5.0])
    assert rep.passed


def test_p3_threebus(threebus):
    E = 2.0 * pm.default_grid(threebus)[-1]
    rep = pm.verify_p3_equivalence(threebus, E, oracle=True)
    assert rep.passed, rep


def test_p3_pool(tier):
    rep = pm.verify_p3_equivalence(tier, 2.0 * pm.default_grid(tier)[-1])
    assert rep.passed and rep.g_limit[0] == pytest.approx(6.25)


def test_p3_below_threshold(pool42):
    with pytest.raises(pm.NotConverged):
        pm.verify_p3_equivalence(pool42, 4.0)


# ---- other curve properties


def test_jensen_floor(pool_sweep, pool42):
    assert pm.jensen_floor(pool42) == pytest.approx(225.0)
    assert pm.check_jensen(pool_sweep)
    assert pool_sweep.cost[-1] == pytest.approx(225.0, abs=1e-6)


def test_jensen_wrong_model(tb_sweep):
    with pytest.raises(pm.WrongModel):
        pm.check_jensen(tb_sweep)


@pytest.mark.parametrize("case", ["pool42", "threebus"])
def test_continuity(case, request):
    inst = request.getfixturevalue(case)
    rep = pm.continuity_probe(inst, 0.0, 8.0)
    assert rep.passed, rep


# ---- export


def test_summary_roundtrip(pool_sweep):
    text = pm.sweep_summary_csv(pool_sweep)
    table = pm.read_table(text, pm.SUMMARY_HEADER)
    assert table["E"].size == 11
    np.testing.assert_allclose(table["cost"], pool_sweep.cost, rtol=1e-9)
    np.testing.assert_allclose(table["ubmci"], pool_sweep.ubmci, rtol=1e-8, atol=1e-8)


def test_detail_roundtrip(tb_sweep):
    table = pm.read_table(pm.sweep_detail_csv(tb_sweep), pm.DETAIL_HEADER)
    assert table["E"].size == tb_sweep.grid.size * 3 * 24
    np.testing.assert_allclose(table["p"].reshape(-1, 3, 24),
                               np.array([p.p for p in tb_sweep.prices]), rtol=1e-8)


def test_read_table_rejects_wrong_header(pool_sweep):
    with pytest.raises(ValueError):
        pm.read_table(pm.sweep_summary_csv(pool_sweep), pm.DETAIL_HEADER)


def test_probe_marginal_value(threebus):
    sol = solve_dispatch(threebus, 60.0)
    rep = pm.probe_marginal_value(threebus, sol, h=0.01)
    assert rep.slope_checked and rep.slope_rel_error <= 0.05 and rep.passed
    # below 2h there is no room for the probe
    assert not pm.probe_marginal_value(threebus, solve_dispatch(threebus, 0.01), h=0.01).slope_checked

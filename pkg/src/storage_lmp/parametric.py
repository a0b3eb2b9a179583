"""Sweeps over total storage capacity E and checks on the resulting curves."""
from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dispatch import (DispatchSolution, PriceSchedule, compute_prices, mci_bounds,
                       solve_dispatch, solve_flow)
from .model import NetworkInstance, PoolInstance

log = logging.getLogger(__name__)


class GridError(ValueError):
    pass


class PointFailed(RuntimeError):
    """A grid point could not be solved; ``cause`` holds the original error."""

    def __init__(self, index: int, E: float, cause: Exception):
        super().__init__(f"grid point {index} (E={E:g}): {cause}")
        self.index = index
        self.E = E
        self.cause = cause


class WrongModel(TypeError):
    pass


class NotReached(RuntimeError):
    pass


class NotConverged(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepResult:
    instance: NetworkInstance | PoolInstance = field(repr=False)
    grid: np.ndarray
    cost: np.ndarray
    solutions: tuple[DispatchSolution, ...] = field(repr=False)
    prices: tuple[PriceSchedule, ...] = field(repr=False)
    baseline: DispatchSolution = field(repr=False)
    ubmci: np.ndarray
    lbmci: np.ndarray
    ubmci_bus: np.ndarray = field(repr=False)
    lbmci_bus: np.ndarray = field(repr=False)
    siting: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    marginal: np.ndarray = field(repr=False)

    @property
    def kind(self) -> str:
        return "pool" if isinstance(self.instance, PoolInstance) else "network"

    def index_of(self, E: float) -> int:
        hits = np.flatnonzero(np.isclose(self.grid, E, rtol=0, atol=1e-9 * (1 + abs(E))))
        if not hits.size:
            raise KeyError(f"E={E:g} is not on the grid")
        return int(hits[0])


def check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float).ravel()
    if g.size == 0:
        raise GridError("empty grid")
    if not np.all(np.isfinite(g)) or g.min() < 0:
        raise GridError("grid values must be finite and non-negative")
    if np.any(np.diff(g) <= 0):
        raise GridError("grid must be strictly increasing")
    return g


def total_demand(instance) -> np.ndarray:
    if isinstance(instance, PoolInstance):
        return instance.demand
    return instance.demand.sum(axis=0)


def sufficient_capacity(instance) -> float:
    """Capacity that lets every bus flatten its own load around its mean.

    With ``x0 = e/2`` the state of charge runs ``e/2 + cumsum(mean - d)``, so
    twice the largest cumulative excursion per bus is enough.
    """
    d = instance.demand[None] if isinstance(instance, PoolInstance) else instance.demand
    cum = np.cumsum(d.mean(axis=1, keepdims=True) - d, axis=1)
    return float(2.0 * np.abs(cum).max(axis=1).sum())


def default_grid(instance, points: int = 51) -> np.ndarray:
    tot = total_demand(instance)
    top = max(2.0 * float(tot.max() - tot.min()), 1.5 * sufficient_capacity(instance))
    if top <= 0:
        top = 1.0
    return np.linspace(0.0, top, points)


def _solve_point(args):
    instance, E, reg, tol = args
    return solve_dispatch(instance, E, reg=reg, tol=tol)


def _run(instance, grid, reg, tol, jobs):
    tasks = [(instance, float(E), reg, tol) for E in grid]
    if jobs is None:
        jobs = os.cpu_count() or 1
    if jobs <= 1 or len(tasks) <= 1:
        out = []
        for k, task in enumerate(tasks):
            try:
                out.append(_solve_point(task))
            except Exception as exc:  # noqa: BLE001 - re-raised with the point index
                raise PointFailed(k, task[1], exc) from exc
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_solve_point, t) for t in tasks]
        out = []
        for k, fut in enumerate(futures):
            try:
                out.append(fut.result())
            except Exception as exc:  # noqa: BLE001
                raise PointFailed(k, tasks[k][1], exc) from exc
        return out


def sweep(instance: NetworkInstance | PoolInstance, grid, jobs: int | None = 1,
          reg: float = 0.0, tol: float = 1e-8) -> SweepResult:
    """Solve the dispatch at every grid capacity; results ordered by grid index."""
    grid = check_grid(grid)
    sols = _run(instance, grid, reg, tol, jobs)
    if grid[0] == 0.0:
        base = sols[0]
    else:
        try:
            base = solve_dispatch(instance, 0.0, reg=reg, tol=tol)
        except Exception as exc:  # noqa: BLE001
            raise PointFailed(-1, 0.0, exc) from exc
    prices = tuple(compute_prices(s, baseline_flows=base.netflow) for s in sols)
    cost = np.array([s.objective for s in sols])
    ub = np.array([mci_bounds(p)[0] for p in prices])
    lb = np.array([mci_bounds(p)[1] for p in prices])
    per_bus = [mci_bounds(p, "per-bus") for p in prices]
    marginal = np.full(grid.size, np.nan)
    if grid.size > 1:
        marginal[1:] = -np.diff(cost) / np.diff(grid)
    return SweepResult(
        instance=instance, grid=grid, cost=cost, solutions=tuple(sols), prices=prices,
        baseline=base, ubmci=ub, lbmci=lb,
        ubmci_bus=np.array([u for u, _ in per_bus]), lbmci_bus=np.array([v for _, v in per_bus]),
        siting=np.array([s.e for s in sols]), rho=np.array([s.duals.rho for s in sols]),
        marginal=marginal)


# ---------------------------------------------------------------------------
# curve checks


@dataclass(frozen=True)
class ConvexityReport:
    first: np.ndarray
    second: np.ndarray
    monotone: bool
    convex: bool
    monotone_failures: tuple[int, ...]   # 1-based step numbers
    convex_failures: tuple[int, ...]     # index of the middle point
    worst_first: float
    worst_second: float

    @property
    def passed(self) -> bool:
        return self.monotone and self.convex


def second_differences(grid, values) -> np.ndarray:
    """Slope change scaled by the mean spacing (plain second difference on a uniform grid)."""
    grid = np.asarray(grid, float)
    values = np.asarray(values, float)
    h = np.diff(grid)
    slope = np.diff(values) / h
    return np.diff(slope) * 0.5 * (h[:-1] + h[1:])


def check_convexity(sweep_or_grid, cost=None, tol: float = 1e-6) -> ConvexityReport:
    """Non-increasing, convex cost curve test; accepts a SweepResult or (grid, cost)."""
    if cost is None:
        grid, cost = sweep_or_grid.grid, sweep_or_grid.cost
    else:
        grid = sweep_or_grid
    grid = np.asarray(grid, float)
    cost = np.asarray(cost, float)
    if grid.size < 2:
        raise ValueError("need at least two grid points")
    first = np.diff(cost)
    second = second_differences(grid, cost) if grid.size >= 3 else np.zeros(0)
    mono_bad = tuple(int(k) + 1 for k in np.flatnonzero(first > tol))
    conv_bad = tuple(int(k) + 1 for k in np.flatnonzero(second < -tol))
    return ConvexityReport(first, second, not mono_bad, not conv_bad, mono_bad, conv_bad,
                           float(first.max()), float(second.min(initial=np.inf)))


@dataclass(frozen=True)
class BoundReport:
    ub_steps: np.ndarray
    lb_steps: np.ndarray
    ub_failures: tuple[int, ...]
    lb_failures: tuple[int, ...]

    @property
    def passed(self) -> bool:
        return not self.ub_failures and not self.lb_failures


def check_bound_monotonicity(sweep: SweepResult, tol: float = 1e-6) -> BoundReport:
    """UBMCI non-increasing and LBMCI non-decreasing along the grid (pool model only)."""
    if sweep.kind != "pool":
        raise WrongModel("bound monotonicity only holds for the pool model")
    du, dl = np.diff(sweep.ubmci), np.diff(sweep.lbmci)
    return BoundReport(du, dl, tuple(int(k) + 1 for k in np.flatnonzero(du > tol)),
                       tuple(int(k) + 1 for k in np.flatnonzero(dl < -tol)))


# ---------------------------------------------------------------------------
# large-capacity limit


def convergence_target(instance: NetworkInstance | PoolInstance, oracle: bool = False):
    """Prices the dispatch settles to once storage is plentiful.

    Pool: scalar ``a*mean(d) + b``. Network: per-bus ``a_n*g_n + b_n`` from the
    time-averaged single-period problem; load buses take its balance price.
    """
    if isinstance(instance, PoolInstance):
        return float(instance.cost.marginal(instance.demand.mean()))
    g, price, _, _ = solve_flow(instance, instance.demand.mean(axis=1), oracle=oracle)
    a, b, _ = instance.cost_arrays()
    gen = np.array([bus.cost is not None for bus in instance.buses])
    return np.where(gen, np.nan_to_num(a) * g + np.nan_to_num(b), price)


def price_gap(prices: PriceSchedule, target) -> float:
    t = np.asarray(target, float)
    t = t.reshape(-1, 1) if t.ndim else t
    return float(np.abs(prices.p - t).max())


def detect_convergence(sweep: SweepResult, tol: float = 1e-4, target=None) -> float:
    """Smallest grid E from which every price stays within ``tol`` of the target."""
    if target is None:
        target = convergence_target(sweep.instance)
    ok = np.array([price_gap(p, target) <= tol for p in sweep.prices])
    if not ok[-1]:
        raise NotReached(f"prices still {price_gap(sweep.prices[-1], target):.3g} from the "
                         f"limit at E={sweep.grid[-1]:g}")
    k = len(ok) - 1
    while k > 0 and ok[k - 1]:
        k -= 1
    return float(sweep.grid[k])


def marginal_value_sums(solution: DispatchSolution) -> np.ndarray:
    """Per-bus dual pressure on the siting variable: sum(lambda) + phi0/2 + phiT/2."""
    d = solution.duals
    return d.lam.sum(axis=1) + 0.5 * d.phi0 + 0.5 * d.phiT


@dataclass(frozen=True)
class MarginalValueReport:
    E: float
    rho: float
    sums: np.ndarray
    spread: float               # max pairwise difference of the per-bus sums
    deviation: float            # max |sum_n - rho|
    rho_nonnegative: bool
    slope: float | None         # backward -dC/dE from the sweep, when available
    slope_checked: bool
    slope_rel_error: float | None
    tol: float

    @property
    def passed(self) -> bool:
        ok = self.rho_nonnegative and self.spread <= self.tol and self.deviation <= self.tol
        if self.slope_checked:
            ok = ok and self.slope_rel_error <= 0.05
        return ok


def _smooth_at(sweep: SweepResult, k: int, level: float = 0.01) -> bool:
    """Backward slope usable: both neighbouring slopes exist and differ by < level."""
    if k < 1 or k + 1 >= sweep.grid.size:
        return False
    s0, s1 = sweep.marginal[k], sweep.marginal[k + 1]
    scale = max(abs(s0), abs(s1))
    return scale > 0 and abs(s1 - s0) < level * scale


def check_equal_marginal_value(solution: DispatchSolution, sweep: SweepResult | None = None,
                               tol: float = 1e-6, rho_tol: float = 1e-8,
                               reg: float = 0.0) -> MarginalValueReport:
    """Every bus values one more unit of storage at rho."""
    sums = marginal_value_sums(solution) - 2.0 * reg * solution.e
    rho = solution.duals.rho
    spread = float(sums.max() - sums.min())
    deviation = float(np.abs(sums - rho).max())
    slope = rel = None
    checked = False
    if sweep is not None:
        try:
            k = sweep.index_of(solution.E)
        except KeyError:
            k = -1
        if k >= 1:
            slope = float(sweep.marginal[k])
            if _smooth_at(sweep, k) and slope > 0:
                checked = True
                rel = abs(rho - slope) / abs(slope)
    return MarginalValueReport(solution.E, rho, sums, spread, deviation, rho >= -rho_tol,
                               slope, checked, rel, tol)


def probe_marginal_value(instance, solution: DispatchSolution, h: float, reg: float = 0.0,
                         tol: float = 1e-8, level: float = 0.01) -> MarginalValueReport:
    """Like :func:`check_equal_marginal_value`, with the slope taken from two
    extra solves at ``E - h`` and ``E - 2h`` instead of the sweep grid."""
    rep = check_equal_marginal_value(solution, reg=reg)
    E = solution.E
    if E < 2 * h:
        return rep
    c1 = solve_dispatch(instance, E - h, reg=reg, tol=tol).objective
    c2 = solve_dispatch(instance, E - 2 * h, reg=reg, tol=tol).objective
    s1, s0 = (c1 - solution.objective) / h, (c2 - c1) / h
    scale = max(abs(s0), abs(s1))
    smooth = s1 > 0 and abs(s1 - s0) < level * scale
    rel = abs(rep.rho - s1) / s1 if smooth else None
    return MarginalValueReport(rep.E, rep.rho, rep.sums, rep.spread, rep.deviation,
                               rep.rho_nonnegative, s1, smooth, rel, rep.tol)


@dataclass(frozen=True)
class P3Report:
    E: float
    variation: float            # max over generators of max_t g - min_t g
    g_limit: np.ndarray         # single-period optimum per bus
    g_mismatch: float
    objective: float
    objective_limit: float      # T * single-period objective
    objective_rel_error: float
    tol: float
    rel_tol: float

    @property
    def passed(self) -> bool:
        return (self.variation <= self.tol and self.g_mismatch <= self.tol
                and self.objective_rel_error <= self.rel_tol)


def verify_p3_equivalence(instance: NetworkInstance | PoolInstance, E_large: float,
                          tol: float = 1e-4, rel_tol: float = 1e-6,
                          oracle: bool = False, solution: DispatchSolution | None = None) -> P3Report:
    """Large-capacity dispatch is time-flat and matches the time-averaged problem."""
    sol = solution if solution is not None else solve_dispatch(instance, E_large)
    T = sol.horizon
    if isinstance(instance, PoolInstance):
        dbar = float(instance.demand.mean())
        g_lim = np.array([dbar])
        obj_lim = T * float(instance.cost(dbar))
        gen = np.array([True])
    else:
        g_lim, _, obj1, _ = solve_flow(instance, instance.demand.mean(axis=1), oracle=oracle)
        obj_lim = T * obj1
        gen = sol.generator_mask
    g = sol.g[gen]
    variation = float((g.max(axis=1) - g.min(axis=1)).max(initial=0.0))
    if variation > tol:
        raise NotConverged(f"generation still varies by {variation:.3g} over time at E={E_large:g}")
    mismatch = float(np.abs(g - g_lim[gen, None]).max(initial=0.0))
    rel = abs(sol.objective - obj_lim) / max(1.0, abs(obj_lim))
    return P3Report(float(E_large), variation, g_lim, mismatch, sol.objective, obj_lim, rel,
                    tol, rel_tol)


# ---------------------------------------------------------------------------
# further curve properties


def jensen_floor(pool: PoolInstance) -> float:
    """Cost with perfectly flattened generation, a lower bound for every E."""
    return pool.horizon * float(pool.cost(pool.demand.mean()))


def check_jensen(sweep: SweepResult, tol: float = 1e-6) -> bool:
    if sweep.kind != "pool":
        raise WrongModel("the flat-generation floor is a pool-model property")
    return bool(np.all(sweep.cost >= jensen_floor(sweep.instance) - tol))


@dataclass(frozen=True)
class ContinuityReport:
    coarse_jump: float
    fine_jump: float
    lipschitz: float
    lipschitz_ok: bool

    @property
    def shrink(self) -> float:
        return self.coarse_jump / self.fine_jump if self.fine_jump > 0 else np.inf

    @property
    def passed(self) -> bool:
        return self.lipschitz_ok and self.shrink >= 5.0


def continuity_probe(instance, start: float, stop: float, points: int = 5,
                     refine: int = 10, tol: float = 1e-8) -> ContinuityReport:
    """Compare the largest cost jump on a coarse grid and on one ``refine`` times finer."""
    coarse = np.linspace(start, stop, points)
    fine = np.linspace(start, start + (stop - start) / refine, points)
    c_coarse = np.array([solve_dispatch(instance, E, tol=tol).objective for E in coarse])
    c_fine = np.array([solve_dispatch(instance, E, tol=tol).objective for E in fine])
    jc = float(np.abs(np.diff(c_coarse)).max())
    jf = float(np.abs(np.diff(c_fine)).max())
    slopes = np.abs(np.diff(c_coarse) / np.diff(coarse))
    lip = float(max(slopes.max(), (np.abs(np.diff(c_fine)) / np.diff(fine)).max()))
    h = coarse[1] - coarse[0]
    return ContinuityReport(jc, jf, lip, jc <= lip * h * (1 + 1e-12) + 1e-12)


# ---------------------------------------------------------------------------
# export


def _f(v) -> str:
    return format(float(v), ".9g")


DETAIL_HEADER = ["E", "bus", "t", "g", "u", "p"]
SUMMARY_HEADER = ["E", "cost", "rho", "ubmci", "lbmci"]


def sweep_detail_csv(sweep: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DETAIL_HEADER)
    for E, sol, pr in zip(sweep.grid, sweep.solutions, sweep.prices):
        for i, bus in enumerate(sol.bus_ids):
            for t in range(sol.horizon):
                w.writerow([_f(E), bus, t + 1, _f(sol.g[i, t]), _f(sol.u[i, t]), _f(pr.p[i, t])])
    return buf.getvalue()


def sweep_summary_csv(sweep: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for k, E in enumerate(sweep.grid):
        w.writerow([_f(E), _f(sweep.cost[k]), _f(sweep.rho[k]), _f(sweep.ubmci[k]),
                    _f(sweep.lbmci[k])])
    return buf.getvalue()


def read_table(text: str, header: list[str]) -> dict[str, np.ndarray]:
    """Parse one of the sweep tables back into float columns, checking the header."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != header:
        raise ValueError(f"expected header {header}, got {rows[0] if rows else None}")
    body = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(header))
    return {name: body[:, k] for k, name in enumerate(header)}

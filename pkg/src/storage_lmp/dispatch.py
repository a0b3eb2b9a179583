"""Dispatch problems as QPs, and the prices and MCI read off their duals.

Variable layout of the network problem, each block bus-major ``[n, t]``::

    g (N*T) | u (N*T) | x (N*T) | theta (N*T) | e (N)

The balance row at ``(n, t)`` is ``g - u - sum_lines Y*(theta_n - theta_m) = d``.
Its multiplier is ``nu``; the price is ``p = -nu = dC*/dd``.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .model import (NetworkInstance, PoolInstance, UserProfile, ZeroLoad, check_network)
from .qp import QpProblem, QpSolution, Status, solve

log = logging.getLogger(__name__)


class DispatchInfeasible(RuntimeError):
    pass


class SolveFailed(RuntimeError):
    pass


class MissingBaseline(ValueError):
    pass


class BusMismatch(KeyError):
    pass


# ---------------------------------------------------------------------------
# problem builders


class _Rows:
    """Sparse row accumulator."""

    def __init__(self, ncol):
        self.ncol = ncol
        self.r, self.c, self.v = [], [], []
        self.rhs = []
        self.names = []

    def add(self, cols, vals, rhs, name=""):
        k = len(self.rhs)
        self.r.extend([k] * len(cols))
        self.c.extend(cols)
        self.v.extend(vals)
        self.rhs.append(rhs)
        self.names.append(name)
        return k

    def matrix(self):
        return sp.csr_matrix((self.v, (self.r, self.c)), shape=(len(self.rhs), self.ncol))

    def vector(self):
        return np.asarray(self.rhs, dtype=float)


@dataclass(frozen=True)
class NetworkLayout:
    n_bus: int
    horizon: int

    @property
    def nt(self):
        return self.n_bus * self.horizon

    def g(self, n, t):
        return n * self.horizon + t

    def u(self, n, t):
        return self.nt + n * self.horizon + t

    def x(self, n, t):
        return 2 * self.nt + n * self.horizon + t

    def theta(self, n, t):
        return 3 * self.nt + n * self.horizon + t

    def e(self, n):
        return 4 * self.nt + n

    @property
    def n_var(self):
        return 4 * self.nt + self.n_bus


@dataclass(frozen=True)
class NetworkRows:
    """Row indices of each named constraint family."""
    balance: np.ndarray
    soc: np.ndarray
    terminal: np.ndarray
    ref: np.ndarray
    load_fix: np.ndarray
    line_fwd: np.ndarray
    line_bwd: np.ndarray
    x_upper: np.ndarray
    x_lower: np.ndarray
    budget: int


def _line_terms(instance, theta_col, n_idx):
    """(cols, vals) of sum over incident lines of Y*(theta_n - theta_m) at bus n."""
    cols, vals = [], []
    bus_id = instance.buses[n_idx].id
    for line in instance.lines:
        if bus_id not in (line.from_bus, line.to_bus):
            continue
        other = line.to_bus if line.from_bus == bus_id else line.from_bus
        m_idx = instance.bus_index(other)
        cols += [theta_col(n_idx), theta_col(m_idx)]
        vals += [line.susceptance, -line.susceptance]
    return cols, vals


def _cost_diag(instance):
    """Quadratic/linear coefficient per bus; zero for hard-fixed load buses."""
    a = np.zeros(instance.n_bus)
    b = np.zeros(instance.n_bus)
    free = np.zeros(instance.n_bus, dtype=bool)
    for k, bus in enumerate(instance.buses):
        cost = bus.cost or bus.penalty
        if cost is not None:
            a[k], b[k], free[k] = cost.a, cost.b, True
    return a, b, free


def build_network_qp(instance: NetworkInstance, E: float, reg: float = 0.0,
                     with_rows: bool = False):
    """Storage-augmented multi-period DC dispatch as a sparse QP.

    ``reg`` adds ``reg * sum(e**2)`` to stabilize non-unique siting.
    """
    check_network(instance)
    if E < 0:
        raise ValueError("total storage capacity must be non-negative")
    N, T = instance.n_bus, instance.horizon
    L = NetworkLayout(N, T)
    a, b, free = _cost_diag(instance)
    hdiag = np.zeros(L.n_var)
    q = np.zeros(L.n_var)
    for n in range(N):
        for t in range(T):
            hdiag[L.g(n, t)] = a[n]
            q[L.g(n, t)] = b[n]
        hdiag[L.e(n)] = 2.0 * reg
    eq = _Rows(L.n_var)
    ineq = _Rows(L.n_var)
    d = instance.demand
    balance = np.empty((N, T), dtype=int)
    soc = np.empty((N, T), dtype=int)
    for n in range(N):
        for t in range(T):
            cols, vals = _line_terms(instance, lambda k: L.theta(k, t), n)
            balance[n, t] = eq.add([L.g(n, t), L.u(n, t)] + cols, [1.0, -1.0] + [-v for v in vals],
                                   d[n, t], f"balance[{n},{t}]")
    for n in range(N):
        for t in range(T):
            if t == 0:
                soc[n, t] = eq.add([L.x(n, 0), L.e(n), L.u(n, 0)], [1.0, -0.5, -1.0], 0.0, f"soc[{n},0]")
            else:
                soc[n, t] = eq.add([L.x(n, t), L.x(n, t - 1), L.u(n, t)], [1.0, -1.0, -1.0], 0.0,
                                   f"soc[{n},{t}]")
    terminal = np.array([eq.add([L.x(n, T - 1), L.e(n)], [1.0, -0.5], 0.0, f"terminal[{n}]")
                         for n in range(N)], dtype=int)
    ref = np.array([eq.add([L.theta(0, t)], [1.0], 0.0, f"ref[{t}]") for t in range(T)], dtype=int)
    load_fix = []
    for n in range(N):
        if not free[n]:
            load_fix += [eq.add([L.g(n, t)], [1.0], 0.0, f"loadbus[{n},{t}]") for t in range(T)]
    line_fwd = np.empty((instance.n_line, T), dtype=int)
    line_bwd = np.empty((instance.n_line, T), dtype=int)
    for k, line in enumerate(instance.lines):
        i, j = instance.bus_index(line.from_bus), instance.bus_index(line.to_bus)
        y = line.susceptance
        for t in range(T):
            cols = [L.theta(i, t), L.theta(j, t)]
            line_fwd[k, t] = ineq.add(cols, [y, -y], line.fmax, f"line+[{k},{t}]")
            line_bwd[k, t] = ineq.add(cols, [-y, y], line.fmax, f"line-[{k},{t}]")
    x_upper = np.empty((N, T), dtype=int)
    x_lower = np.empty((N, T), dtype=int)
    for n in range(N):
        for t in range(T):
            x_upper[n, t] = ineq.add([L.x(n, t), L.e(n)], [1.0, -1.0], 0.0, f"xmax[{n},{t}]")
            x_lower[n, t] = ineq.add([L.x(n, t)], [-1.0], 0.0, f"xmin[{n},{t}]")
    budget = ineq.add([L.e(n) for n in range(N)], [1.0] * N, float(E), "budget")
    names = ([f"g[{n},{t}]" for n in range(N) for t in range(T)]
             + [f"u[{n},{t}]" for n in range(N) for t in range(T)]
             + [f"x[{n},{t}]" for n in range(N) for t in range(T)]
             + [f"theta[{n},{t}]" for n in range(N) for t in range(T)]
             + [f"e[{n}]" for n in range(N)])
    prob = QpProblem(sp.diags(hdiag, format="csr"), q, eq.matrix(), eq.vector(),
                     ineq.matrix(), ineq.vector(), tuple(names), tuple(eq.names), tuple(ineq.names))
    if not with_rows:
        return prob
    rows = NetworkRows(balance, soc, terminal, ref, np.asarray(load_fix, dtype=int),
                       line_fwd, line_bwd, x_upper, x_lower, budget)
    return prob, L, rows


@dataclass(frozen=True)
class PoolRows:
    balance: np.ndarray
    soc: np.ndarray
    terminal: int
    x_upper: np.ndarray
    x_lower: np.ndarray


def build_pool_qp(pool: PoolInstance, E: float, with_rows: bool = False):
    """Pool-model dispatch over ``(g_t, u_t, x_t)`` with ``E`` as data."""
    if E < 0:
        raise ValueError("total storage capacity must be non-negative")
    T = pool.horizon
    g = lambda t: t
    u = lambda t: T + t
    x = lambda t: 2 * T + t
    n = 3 * T
    hdiag = np.zeros(n)
    q = np.zeros(n)
    hdiag[:T] = pool.cost.a
    q[:T] = pool.cost.b
    eq = _Rows(n)
    ineq = _Rows(n)
    balance = np.array([eq.add([g(t), u(t)], [1.0, -1.0], pool.demand[t], f"balance[{t}]")
                        for t in range(T)])
    soc = [eq.add([x(0), u(0)], [1.0, -1.0], 0.5 * E, "soc[0]")]
    soc += [eq.add([x(t), x(t - 1), u(t)], [1.0, -1.0, -1.0], 0.0, f"soc[{t}]") for t in range(1, T)]
    terminal = eq.add([x(T - 1)], [1.0], 0.5 * E, "terminal")
    x_upper = np.array([ineq.add([x(t)], [1.0], float(E), f"xmax[{t}]") for t in range(T)])
    x_lower = np.array([ineq.add([x(t)], [-1.0], 0.0, f"xmin[{t}]") for t in range(T)])
    names = tuple([f"g[{t}]" for t in range(T)] + [f"u[{t}]" for t in range(T)]
                  + [f"x[{t}]" for t in range(T)])
    prob = QpProblem(sp.diags(hdiag, format="csr"), q, eq.matrix(), eq.vector(),
                     ineq.matrix(), ineq.vector(), names, tuple(eq.names), tuple(ineq.names))
    if not with_rows:
        return prob
    return prob, PoolRows(balance, np.asarray(soc), terminal, x_upper, x_lower)


def build_flow_qp(instance: NetworkInstance, demand) -> tuple[QpProblem, np.ndarray]:
    """Single-period dispatch over ``(g_n, theta_n)`` for one demand vector.

    Returns the QP and the balance-row indices.
    """
    check_network(instance)
    N = instance.n_bus
    demand = np.asarray(demand, float).ravel()
    a, b, free = _cost_diag(instance)
    H = np.concatenate([a, np.zeros(N)])
    q = np.concatenate([b, np.zeros(N)])
    th = lambda n: N + n
    eq = _Rows(2 * N)
    ineq = _Rows(2 * N)
    balance = []
    for n in range(N):
        cols, vals = _line_terms(instance, th, n)
        balance.append(eq.add([n] + cols, [1.0] + [-v for v in vals], demand[n], f"balance[{n}]"))
    eq.add([th(0)], [1.0], 0.0, "ref")
    for n in range(N):
        if not free[n]:
            eq.add([n], [1.0], 0.0, f"loadbus[{n}]")
    for k, line in enumerate(instance.lines):
        i, j = instance.bus_index(line.from_bus), instance.bus_index(line.to_bus)
        y = line.susceptance
        ineq.add([th(i), th(j)], [y, -y], line.fmax, f"line+[{k}]")
        ineq.add([th(i), th(j)], [-y, y], line.fmax, f"line-[{k}]")
    names = tuple([f"g[{n}]" for n in range(N)] + [f"theta[{n}]" for n in range(N)])
    prob = QpProblem(np.diag(H), q, eq.matrix().toarray(), eq.vector(),
                     ineq.matrix().toarray(), ineq.vector(), names, tuple(eq.names), tuple(ineq.names))
    return prob, np.asarray(balance)


def build_p3_qp(instance: NetworkInstance) -> QpProblem:
    """Time-averaged single-period problem (the large-storage limit)."""
    return build_flow_qp(instance, instance.demand.mean(axis=1))[0]


# ---------------------------------------------------------------------------
# solutions


@dataclass(frozen=True)
class Duals:
    nu: np.ndarray
    pi: np.ndarray          # net signed line multiplier, forward minus backward
    xi: np.ndarray
    lam: np.ndarray
    mu: np.ndarray
    phi0: np.ndarray
    phiT: np.ndarray
    rho: float
    pi_fwd: np.ndarray = field(default=None, repr=False)
    pi_bwd: np.ndarray = field(default=None, repr=False)


@dataclass(frozen=True)
class DispatchSolution:
    kind: str               # "network" or "pool"
    bus_ids: tuple[int, ...]
    g: np.ndarray
    u: np.ndarray
    x: np.ndarray
    theta: np.ndarray
    flow: np.ndarray
    netflow: np.ndarray
    e: np.ndarray
    E: float
    objective: float
    duals: Duals
    demand: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    qp: QpSolution = field(repr=False, default=None)

    @property
    def horizon(self):
        return self.g.shape[1]

    @property
    def generator_mask(self):
        return np.isfinite(self.a) & (self.a > 0)


def _oriented_nu(y_bal, g, a, b, gen, tol):
    """Orient the balance multipliers so that ``a*g + b + nu = 0`` at generators."""
    if not gen.any():
        return y_bal
    target = a[gen, None] * g[gen] + b[gen, None]
    plus = np.abs(target + y_bal[gen]).max()
    minus = np.abs(target - y_bal[gen]).max()
    if minus < plus:
        log.warning("balance multipliers came back with flipped sign; reorienting")
        return -y_bal
    return y_bal


def _check_status(sol: QpSolution, what: str):
    if sol.status is Status.INFEASIBLE:
        raise DispatchInfeasible(f"{what} is infeasible")
    if sol.status is not Status.OPTIMAL:
        raise SolveFailed(f"{what}: solver stopped with status {sol.status.value}, "
                          f"residuals {sol.residuals}")


def _solve_network(instance: NetworkInstance, E: float, reg: float, tol: float) -> DispatchSolution:
    prob, L, rows = build_network_qp(instance, E, reg=reg, with_rows=True)
    sol = solve(prob, tol=tol)
    _check_status(sol, f"network dispatch at E={E:g}")
    N, T = instance.n_bus, instance.horizon
    v = sol.x
    g = v[:L.nt].reshape(N, T)
    u = v[L.nt:2 * L.nt].reshape(N, T)
    x = v[2 * L.nt:3 * L.nt].reshape(N, T)
    theta = v[3 * L.nt:4 * L.nt].reshape(N, T)
    e = v[4 * L.nt:]
    flow = np.zeros((instance.n_line, T))
    netflow = np.zeros((N, T))
    for k, line in enumerate(instance.lines):
        i, j = instance.bus_index(line.from_bus), instance.bus_index(line.to_bus)
        flow[k] = line.susceptance * (theta[i] - theta[j])
        netflow[i] += flow[k]
        netflow[j] -= flow[k]
    a, b, _ = instance.cost_arrays()
    gen = np.array([bus.cost is not None for bus in instance.buses])
    a_gen = np.where(gen, a, np.nan)
    b_gen = np.where(gen, b, np.nan)
    y, z = sol.y_eq, sol.y_in
    nu = _oriented_nu(y[rows.balance], g, a, b, gen, tol)
    xi = y[rows.soc]
    duals = Duals(
        nu=nu, pi=z[rows.line_fwd] - z[rows.line_bwd], xi=xi,
        lam=z[rows.x_upper], mu=z[rows.x_lower],
        phi0=xi[:, 0].copy(), phiT=y[rows.terminal], rho=float(z[rows.budget]),
        pi_fwd=z[rows.line_fwd], pi_bwd=z[rows.line_bwd])
    cost = 0.0
    for k, bus in enumerate(instance.buses):
        c = bus.cost or bus.penalty
        if c is not None:
            cost += float(np.sum(c(g[k])))
    return DispatchSolution("network", tuple(b_.id for b_ in instance.buses), g, u, x, theta, flow,
                            netflow, e, float(E), cost, duals, instance.demand, a_gen, b_gen, sol)


def _solve_pool(pool: PoolInstance, E: float, tol: float) -> DispatchSolution:
    prob, rows = build_pool_qp(pool, E, with_rows=True)
    sol = solve(prob, tol=tol)
    _check_status(sol, f"pool dispatch at E={E:g}")
    T = pool.horizon
    v = sol.x
    g, u, x = v[:T][None], v[T:2 * T][None], v[2 * T:][None]
    a = np.array([pool.cost.a])
    b = np.array([pool.cost.b])
    y, z = sol.y_eq, sol.y_in
    nu = _oriented_nu(y[rows.balance][None], g, a, b, np.array([True]), tol)
    xi = y[rows.soc][None]
    lam = z[rows.x_upper][None]
    phiT = np.array([y[rows.terminal]])
    # dC*/dE through every row whose right-hand side carries E
    rho = float(lam.sum() + 0.5 * xi[0, 0] + 0.5 * phiT[0])
    duals = Duals(nu=nu, pi=np.zeros((0, T)), xi=xi, lam=lam, mu=z[rows.x_lower][None],
                  phi0=xi[:, 0].copy(), phiT=phiT, rho=rho)
    cost = float(np.sum(pool.cost(g)))
    return DispatchSolution("pool", (1,), g, u, x, np.zeros((1, T)), np.zeros((0, T)),
                            np.zeros((1, T)), np.array([float(E)]), float(E), cost, duals,
                            pool.demand[None], a, b, sol)


def solve_dispatch(instance: NetworkInstance | PoolInstance, E: float, reg: float = 0.0,
                   tol: float = 1e-8) -> DispatchSolution:
    if isinstance(instance, PoolInstance):
        return _solve_pool(instance, E, tol)
    return _solve_network(instance, E, reg, tol)


def solve_flow(instance: NetworkInstance, demand, tol: float = 1e-8, oracle: bool = False):
    """Single-period dispatch; returns ``(g, prices, objective_with_fixed_costs, QpSolution)``."""
    from .qp import active_set_oracle
    prob, balance = build_flow_qp(instance, demand)
    sol = active_set_oracle(prob) if oracle else solve(prob, tol=tol)
    _check_status(sol, "single-period dispatch")
    N = instance.n_bus
    g = sol.x[:N]
    _, _, c = instance.cost_arrays()
    fixed = float(np.nansum(c))
    return g, -sol.y_eq[balance], sol.objective + fixed, sol


# ---------------------------------------------------------------------------
# prices and MCI


@dataclass(frozen=True)
class PriceSchedule:
    bus_ids: tuple[int, ...]
    p: np.ndarray
    clmp: np.ndarray
    vlmp: np.ndarray
    temporal: np.ndarray
    spatial: np.ndarray | None
    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    demand: np.ndarray = field(repr=False)
    kind: str = "network"

    def bus_row(self, bus_id: int) -> int:
        if self.kind == "pool":
            return 0
        try:
            return self.bus_ids.index(bus_id)
        except ValueError:
            raise BusMismatch(f"bus {bus_id} not in the instance") from None


def compute_prices(solution: DispatchSolution, baseline_flows=None,
                   require_split: bool = False) -> PriceSchedule:
    """LMPs with their constant/variant and temporal/spatial decompositions.

    Constant and variant parts only exist at generator buses (NaN elsewhere).
    """
    a = solution.a[:, None]
    b = solution.b[:, None]
    p = -solution.duals.nu
    clmp = a * solution.demand + b
    vlmp = a * (solution.u + solution.netflow)
    temporal = a * solution.u
    if solution.kind == "pool":
        spatial = np.zeros_like(p)
    elif baseline_flows is None:
        if require_split:
            raise MissingBaseline("spatial split needs the E=0 net flows")
        spatial = None
    else:
        spatial = a * (solution.netflow - np.asarray(baseline_flows))
    return PriceSchedule(solution.bus_ids, p, clmp, vlmp, temporal, spatial,
                         solution.a, solution.b, solution.demand, solution.kind)


@dataclass(frozen=True)
class MciRecord:
    user_id: str
    bus_id: int
    mci: float
    cmci: float
    vmci: float


def mci_weights(user: UserProfile) -> np.ndarray:
    total = user.l1
    if not total > 0:
        raise ZeroLoad(f"user {user.user_id} has zero total load")
    return user.load / total


def compute_mci(prices: PriceSchedule, user: UserProfile) -> MciRecord:
    """Load-weighted average of the user's bus prices, split like the LMP."""
    w = mci_weights(user)
    row = prices.bus_row(user.bus_id)
    if w.size != prices.p.shape[1]:
        raise ValueError(f"user {user.user_id}: profile length {w.size} != horizon {prices.p.shape[1]}")
    mci = float(prices.p[row] @ w)
    cmci = float(prices.clmp[row] @ w)
    return MciRecord(user.user_id, user.bus_id, mci, cmci, mci - cmci)


def mci_bounds(prices: PriceSchedule, scope: str = "global"):
    """Largest and smallest MCI attainable by any profile: the price extremes."""
    if scope == "global":
        return float(prices.p.max()), float(prices.p.min())
    if scope == "per-bus":
        return prices.p.max(axis=1), prices.p.min(axis=1)
    raise ValueError(f"unknown scope {scope!r}")


# ---------------------------------------------------------------------------
# export


def _fmt(v) -> str:
    return format(float(v), ".9g")


def solution_to_dict(sol: DispatchSolution, prices: PriceSchedule | None = None) -> dict:
    d = sol.duals
    out = {
        "kind": sol.kind, "E": sol.E, "objective": sol.objective, "bus_ids": list(sol.bus_ids),
        "g": sol.g.tolist(), "u": sol.u.tolist(), "x": sol.x.tolist(), "theta": sol.theta.tolist(),
        "flow": sol.flow.tolist(), "netflow": sol.netflow.tolist(), "e": sol.e.tolist(),
        "duals": {"nu": d.nu.tolist(), "pi": d.pi.tolist(), "xi": d.xi.tolist(),
                  "lambda": d.lam.tolist(), "mu": d.mu.tolist(), "phi0": d.phi0.tolist(),
                  "phiT": d.phiT.tolist(), "rho": d.rho},
    }
    if sol.qp is not None:
        out["residuals"] = dict(sol.qp.residuals)
        out["status"] = sol.qp.status.value
    if prices is not None:
        out["prices"] = {"p": prices.p.tolist(), "clmp": prices.clmp.tolist(),
                         "vlmp": prices.vlmp.tolist()}
    return out


def solution_to_json(sol, prices=None) -> str:
    # NaN is not valid JSON; load-bus decompositions are emitted as null
    def clean(o):
        if isinstance(o, float) and not np.isfinite(o):
            return None
        if isinstance(o, list):
            return [clean(v) for v in o]
        if isinstance(o, dict):
            return {k: clean(v) for k, v in o.items()}
        return o
    return json.dumps(clean(solution_to_dict(sol, prices)), indent=1, sort_keys=True) + "\n"


SOLUTION_CSV_HEADER = ["bus", "t", "g", "u", "x", "p", "clmp", "vlmp"]


def solution_to_csv(sol: DispatchSolution, prices: PriceSchedule) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SOLUTION_CSV_HEADER)
    for n, bus in enumerate(sol.bus_ids):
        for t in range(sol.horizon):
            w.writerow([bus, t + 1] + [_fmt(v) for v in (sol.g[n, t], sol.u[n, t], sol.x[n, t],
                                                          prices.p[n, t], prices.clmp[n, t],
                                                          prices.vlmp[n, t])])
    return buf.getvalue()


def read_solution_csv(text: str) -> dict[str, np.ndarray]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or list(rows[0].keys()) != SOLUTION_CSV_HEADER:
        raise ValueError("not a solution CSV")
    return {k: np.array([float(r[k]) for r in rows]) for k in SOLUTION_CSV_HEADER}

"""Command-line front end: solve, sweep, mci, cluster, verify."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import parametric as pm
from . import profiling as prof
from .dispatch import (DispatchInfeasible, SolveFailed, compute_mci, compute_prices,
                       solution_to_csv, solution_to_json, solve_dispatch)
from .model import (CaseError, NetworkInstance, ZeroLoad, load_case, read_users,
                    validate_network)

log = logging.getLogger("storage_lmp")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_INFEASIBLE = 0, 1, 2, 3


class InputError(Exception):
    pass


def f9(v) -> str:
    return format(float(v), ".9g")


def parse_grid(spec: str) -> np.ndarray:
    """``start:stop:step`` (stop included when it lands on the grid) or ``a,b,c``."""
    try:
        if ":" in spec:
            start, stop, step = (float(p) for p in spec.split(":"))
            if step <= 0 or stop < start:
                raise InputError(f"grid {spec!r} is not increasing")
            n = int(np.floor((stop - start) / step + 1e-9))
            grid = start + step * np.arange(n + 1)
        else:
            grid = np.array([float(p) for p in spec.split(",") if p.strip()])
    except ValueError:
        raise InputError(f"cannot parse grid {spec!r}") from None
    try:
        return pm.check_grid(grid)
    except pm.GridError as exc:
        raise InputError(f"grid {spec!r}: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    case: str
    users: str | None
    storage: float | None
    grid: np.ndarray | None
    out: Path
    tol: float
    seed: int
    k: int
    radius: float
    reg: float
    norm: str
    jobs: int | None
    method: str

    @classmethod
    def from_args(cls, ns) -> "RunConfig":
        grid = parse_grid(ns.grid) if ns.grid else None
        if ns.storage is not None and ns.storage < 0:
            raise InputError("--storage must be non-negative")
        return cls(ns.case, ns.users, ns.storage, grid, Path(ns.out), ns.tol, ns.seed, ns.k,
                   ns.radius, ns.reg, ns.norm, ns.jobs, ns.method)


def _load(cfg: RunConfig):
    inst = load_case(cfg.case)
    if isinstance(inst, NetworkInstance):
        problems = validate_network(inst)
        if problems:
            raise CaseError("invalid case: " + "; ".join(problems))
    return inst


def _users(cfg: RunConfig, horizon: int):
    if not cfg.users:
        raise InputError("this command needs --users")
    path = Path(cfg.users)
    if not path.exists():
        raise InputError(f"users file not found: {path}")
    users = read_users(path)
    if not users:
        raise InputError("users file has no rows")
    for u in users:
        if u.load.size != horizon:
            raise InputError(f"user {u.user_id}: {u.load.size} periods, case has {horizon}")
    return users


def _grid(cfg: RunConfig, inst) -> np.ndarray:
    return cfg.grid if cfg.grid is not None else pm.default_grid(inst)


def _write(cfg: RunConfig, name: str, text: str) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: RunConfig) -> int:
    inst = _load(cfg)
    E = cfg.storage if cfg.storage is not None else 0.0
    sol = solve_dispatch(inst, E, reg=cfg.reg, tol=cfg.tol)
    base = solve_dispatch(inst, 0.0, reg=cfg.reg, tol=cfg.tol) if E > 0 else sol
    prices = compute_prices(sol, baseline_flows=base.netflow)
    _write(cfg, "solution.json", solution_to_json(sol, prices))
    _write(cfg, "solution.csv", solution_to_csv(sol, prices))
    print(f"objective {f9(sol.objective)}")
    print(f"rho {f9(sol.duals.rho)}")
    for n, bus in enumerate(sol.bus_ids):
        p = prices.p[n]
        print(f"bus {bus} price min {f9(p.min())} mean {f9(p.mean())} max {f9(p.max())}")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    inst = _load(cfg)
    sw = pm.sweep(inst, _grid(cfg, inst), jobs=cfg.jobs, reg=cfg.reg, tol=cfg.tol)
    _write(cfg, "sweep_summary.csv", pm.sweep_summary_csv(sw))
    _write(cfg, "sweep_detail.csv", pm.sweep_detail_csv(sw))
    print(f"points {sw.grid.size}")
    if sw.grid.size >= 2:
        rep = pm.check_convexity(sw)
        print(f"convexity {'pass' if rep.passed else 'fail'} "
              f"(max first difference {f9(rep.worst_first)}, min second difference "
              f"{f9(rep.worst_second) if rep.second.size else 'n/a'})")
    try:
        print(f"E_con {f9(pm.detect_convergence(sw))}")
    except pm.NotReached as exc:
        print(f"E_con not reached: {exc}")
    return EXIT_OK


def _mci_rows(sw, users):
    rows = []
    for u in users:
        for E, pr in zip(sw.grid, sw.prices):
            rec = compute_mci(pr, u)
            rows.append((u.user_id, u.bus_id, E, rec.mci, rec.cmci, rec.vmci))
    return rows


def cmd_mci(cfg: RunConfig) -> int:
    inst = _load(cfg)
    users = _users(cfg, inst.horizon)
    grid = cfg.grid if cfg.grid is not None else np.array([cfg.storage or 0.0])
    sw = pm.sweep(inst, grid, jobs=cfg.jobs, reg=cfg.reg, tol=cfg.tol)
    rows = _mci_rows(sw, users)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user_id", "bus_id", "E", "mci", "cmci", "vmci"])
    for r in rows:
        w.writerow([r[0], r[1]] + [f9(v) for v in r[2:]])
        print(f"{r[0]} bus {r[1]} E {f9(r[2])} mci {f9(r[3])} cmci {f9(r[4])} vmci {f9(r[5])}")
    _write(cfg, "mci.csv", buf.getvalue())
    for E, ub, lb in zip(sw.grid, sw.ubmci, sw.lbmci):
        print(f"E {f9(E)} ubmci {f9(ub)} lbmci {f9(lb)}")
    return EXIT_OK


def cmd_cluster(cfg: RunConfig) -> int:
    inst = _load(cfg)
    users = _users(cfg, inst.horizon)
    if cfg.method == "greedy":
        if cfg.grid is not None:
            sw = pm.sweep(inst, cfg.grid, jobs=cfg.jobs, reg=cfg.reg, tol=cfg.tol)
            dyn = prof.group_dynamics(sw, users, cfg.radius)
            _write(cfg, "clusters.csv", prof.dynamics_csv(dyn))
            for E, n in zip(dyn.grid, dyn.counts):
                print(f"E {f9(E)} clusters {n}")
            return EXIT_OK
        E = cfg.storage or 0.0
        sw = pm.sweep(inst, [E], reg=cfg.reg, tol=cfg.tol)
        values = prof.user_mci(sw, users)[:, 0]
        clusters = prof.greedy_1d_cluster(list(zip([u.user_id for u in users], values)), cfg.radius)
        _write(cfg, "clusters.csv", prof.assignment_csv(clusters, E))
        print(f"clusters {len(clusters)}")
        for cl in clusters:
            lo, hi = cl.interval
            print(f"cluster {cl.label} size {cl.size} mci [{f9(lo)}, {f9(hi)}]")
        return EXIT_OK
    X = np.array([prof.normalize_profile(u, cfg.norm) for u in users])
    clusters = prof.kmeans(X, k=cfg.k, seed=cfg.seed, ids=[u.user_id for u in users])
    _write(cfg, "clusters.csv", prof.assignment_csv(clusters))
    print(f"clusters {len(clusters)}")
    if cfg.grid is not None:
        sw = pm.sweep(inst, cfg.grid, jobs=cfg.jobs, reg=cfg.reg, tol=cfg.tol)
        ts = prof.mci_trajectories(sw, users, clusters, norm=cfg.norm)
        _write(cfg, "trajectories.csv", prof.trajectory_csv(ts))
        print(f"trajectories {len(ts.keys)}")
    return EXIT_OK


def _verify_checks(cfg: RunConfig, inst, report: dict) -> None:
    checks = report["checks"]
    grid = _grid(cfg, inst)
    sw = pm.sweep(inst, grid, jobs=cfg.jobs, reg=cfg.reg, tol=cfg.tol)
    report["grid"] = [float(v) for v in sw.grid]
    report["cost"] = [float(v) for v in sw.cost]

    worst = max(max(s.qp.residuals.values()) for s in sw.solutions)
    checks["kkt"] = {"passed": bool(worst <= cfg.tol), "max_residual": worst}

    if sw.grid.size >= 3:
        rep = pm.check_convexity(sw)
        checks["convexity"] = {"passed": rep.passed, "max_first_difference": rep.worst_first,
                               "min_second_difference": rep.worst_second,
                               "monotone_failures": list(rep.monotone_failures),
                               "convex_failures": list(rep.convex_failures)}
    else:
        checks["convexity"] = {"skipped": "fewer than three grid points"}

    if sw.kind == "pool":
        b = pm.check_bound_monotonicity(sw)
        checks["bound_monotonicity"] = {"passed": b.passed, "ub_failures": list(b.ub_failures),
                                        "lb_failures": list(b.lb_failures)}
        checks["jensen_floor"] = {"passed": pm.check_jensen(sw), "floor": pm.jensen_floor(inst)}
        checks["equal_marginal_value"] = {"skipped": "network-only check"}
    else:
        checks["bound_monotonicity"] = {"skipped": "network bounds need not be monotone"}
        checks["jensen_floor"] = {"skipped": "pool-only check"}
        reps = [pm.check_equal_marginal_value(s, sw, reg=cfg.reg) for s in sw.solutions]
        improving = [k for k, m in enumerate(sw.marginal) if np.isfinite(m) and m > 1e-9]
        # the grid is usually too coarse for the slope comparison; probe a few
        # points with two nearby solves instead
        h = 1e-3 * float(np.diff(sw.grid).min()) if sw.grid.size > 1 else 0.0
        for k in improving[::max(1, len(improving) // 6)] if h > 0 else []:
            if not reps[k].slope_checked:
                reps[k] = pm.probe_marginal_value(inst, sw.solutions[k], h, reg=cfg.reg,
                                                  tol=cfg.tol)
        improving = [reps[k] for k in improving]
        slope = [r for r in improving if r.slope_checked]
        checks["equal_marginal_value"] = {
            "passed": all(r.rho_nonnegative for r in reps) and all(r.passed for r in improving),
            "points": len(improving), "slope_points": len(slope),
            "max_spread": max((r.spread for r in improving), default=0.0),
            "max_deviation": max((r.deviation for r in improving), default=0.0),
            "max_slope_rel_error": max((r.slope_rel_error for r in slope), default=0.0),
            "min_rho": float(sw.rho.min()),
        }

    try:
        E_con = pm.detect_convergence(sw)
        checks["convergence"] = {"passed": True, "E_con": E_con}
    except pm.NotReached as exc:
        checks["convergence"] = {"passed": False, "error": str(exc)}
    E_large = 2.0 * float(sw.grid[-1])
    try:
        r = pm.verify_p3_equivalence(inst, E_large)
        checks["p3_equivalence"] = {"passed": r.passed, "E": E_large, "variation": r.variation,
                                    "mismatch": r.g_mismatch,
                                    "objective_rel_error": r.objective_rel_error}
    except pm.NotConverged as exc:
        checks["p3_equivalence"] = {"passed": False, "E": E_large, "error": str(exc)}


def cmd_verify(cfg: RunConfig) -> int:
    report = {"case": str(cfg.case), "checks": {}}
    code = EXIT_OK
    try:
        inst = _load(cfg)
        _verify_checks(cfg, inst, report)
    except (CaseError, InputError) as exc:
        report["error"] = str(exc)
        code = EXIT_INPUT
    except (DispatchInfeasible, pm.PointFailed) as exc:
        report["error"] = str(exc)
        cause = getattr(exc, "cause", exc)
        code = EXIT_INFEASIBLE if isinstance(cause, DispatchInfeasible) else EXIT_CHECK
    failed = [name for name, c in report["checks"].items() if c.get("passed") is False]
    report["failed"] = failed
    report["passed"] = code == EXIT_OK and not failed
    _write(cfg, "verify_report.json", json.dumps(report, indent=1, sort_keys=True, default=float) + "\n")
    for name, c in report["checks"].items():
        state = "skipped" if "skipped" in c else ("pass" if c["passed"] else "FAIL")
        print(f"{name}: {state}")
    if "error" in report:
        print(f"error: {report['error']}", file=sys.stderr)
        return code
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "sweep": cmd_sweep, "mci": cmd_mci, "cluster": cmd_cluster,
            "verify": cmd_verify}
HELP = {"solve": "dispatch and prices at one storage capacity",
        "sweep": "parametric sweep over a capacity grid",
        "mci": "per-user MCI along a capacity grid",
        "cluster": "group users by load profile or by MCI",
        "verify": "run the structural checks and write verify_report.json"}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--case", required=True, help="case JSON path or bundled case name")
    common.add_argument("--users", help="users CSV (user_id,bus_id,t1,...)")
    common.add_argument("--storage", type=float, help="total storage capacity E (MWh)")
    common.add_argument("--grid", help="capacity grid start:stop:step or a,b,c")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--tol", type=float, default=1e-8, help="solver KKT tolerance")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--k", type=int, default=25, help="k-means cluster count")
    common.add_argument("--radius", type=float, default=0.5, help="greedy clustering radius")
    common.add_argument("--reg", type=float, default=0.0, help="siting regularization weight")
    common.add_argument("--norm", choices=("l1", "l2"), default="l1")
    common.add_argument("--jobs", type=int, default=None, help="parallel sweep workers")
    common.add_argument("--method", choices=("greedy", "kmeans"), default="greedy")
    parser = argparse.ArgumentParser(prog="storage-lmp",
                                     description="Storage-augmented DC dispatch, prices and MCI.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DISPATCH_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    ns = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.from_args(ns)
        return COMMANDS[ns.command](cfg)
    except (CaseError, InputError, ZeroLoad, prof.InvalidK, pm.GridError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DispatchInfeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except pm.PointFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE if isinstance(exc.cause, DispatchInfeasible) else EXIT_CHECK
    except SolveFailed as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except KeyError as exc:  # BusMismatch and unknown ids
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

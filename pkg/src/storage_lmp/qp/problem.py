from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.sparse as sp


class Status(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    MAX_ITER = "MaxIter"


def _as_matrix(m, ncol):
    if m is None:
        return sp.csr_matrix((0, ncol))
    if sp.issparse(m):
        return sp.csr_matrix(m, dtype=float)
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m.reshape(1, -1) if m.size else m.reshape(0, ncol)
    return m


def _as_vector(v, n):
    if v is None:
        return np.zeros(n)
    return np.asarray(v, dtype=float).ravel()


@dataclass(frozen=True)
class QpProblem:
    """``min 0.5 x'Hx + q'x  s.t.  Aeq x = beq,  Ain x <= bin``.

    Matrices may be dense arrays or scipy sparse matrices.
    """

    H: object
    q: np.ndarray
    Aeq: object = None
    beq: np.ndarray = None
    Ain: object = None
    bin: np.ndarray = None
    variable_names: tuple[str, ...] = field(default=(), repr=False)
    eq_names: tuple[str, ...] = field(default=(), repr=False)
    in_names: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).ravel()
        n = q.size
        H = self.H
        H = sp.csr_matrix(H, dtype=float) if sp.issparse(H) else np.asarray(H, dtype=float).reshape(n, n)
        Aeq = _as_matrix(self.Aeq, n)
        Ain = _as_matrix(self.Ain, n)
        beq = _as_vector(self.beq, Aeq.shape[0])
        bin_ = _as_vector(self.bin, Ain.shape[0])
        for name, val in (("H", H), ("q", q), ("Aeq", Aeq), ("beq", beq), ("Ain", Ain), ("bin", bin_)):
            object.__setattr__(self, name, val)
        if H.shape != (n, n):
            raise ValueError(f"H has shape {H.shape}, expected {(n, n)}")
        if Aeq.shape[1] != n or Ain.shape[1] != n:
            raise ValueError("constraint matrices do not match the number of variables")
        if beq.size != Aeq.shape[0] or bin_.size != Ain.shape[0]:
            raise ValueError("right-hand sides do not match constraint rows")
        asym = H - H.T
        asym = abs(asym).max() if sp.issparse(asym) else np.abs(asym).max(initial=0.0)
        if asym > 1e-12:
            raise ValueError(f"H is not symmetric (max asymmetry {asym:.3g})")
        if not self.variable_names:
            object.__setattr__(self, "variable_names", tuple(f"x{k}" for k in range(n)))

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def n_eq(self) -> int:
        return self.Aeq.shape[0]

    @property
    def n_in(self) -> int:
        return self.Ain.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.H) or sp.issparse(self.Aeq) or sp.issparse(self.Ain)

    def dense(self) -> "QpProblem":
        todense = lambda m: m.toarray() if sp.issparse(m) else m
        return QpProblem(todense(self.H), self.q, todense(self.Aeq), self.beq,
                         todense(self.Ain), self.bin, self.variable_names,
                         self.eq_names, self.in_names)

    def scaled(self, s: float) -> "QpProblem":
        return QpProblem(self.H * s, self.q * s, self.Aeq, self.beq, self.Ain, self.bin,
                         self.variable_names, self.eq_names, self.in_names)

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ (self.H @ x) + self.q @ x)

    def residuals(self, x, y_eq, y_in) -> dict[str, float]:
        """KKT residual norms under ``L = f + y_eq'(Aeq x - beq) + y_in'(Ain x - bin)``."""
        x = np.asarray(x, float)
        grad = self.H @ x + self.q + self.Aeq.T @ y_eq + self.Ain.T @ y_in
        slack = self.Ain @ x - self.bin
        req = self.Aeq @ x - self.beq
        return {
            "stationarity": float(np.abs(grad).max(initial=0.0)),
            "primal_eq": float(np.abs(req).max(initial=0.0)),
            "primal_in": float(max(slack.max(initial=0.0), 0.0)),
            "complementarity": float(abs(y_in @ slack)),
        }

    def to_json(self, solution: "QpSolution | None" = None) -> str:
        dense = self.dense()
        out = {
            "H": dense.H.tolist(), "q": self.q.tolist(),
            "Aeq": dense.Aeq.tolist(), "beq": self.beq.tolist(),
            "Ain": dense.Ain.tolist(), "bin": self.bin.tolist(),
            "variable_names": list(self.variable_names),
        }
        if solution is not None:
            out["solution"] = solution.to_dict()
        return json.dumps(out)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    y_eq: np.ndarray
    y_in: np.ndarray
    objective: float
    status: Status
    residuals: dict[str, float]
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def max_residual(self) -> float:
        return max(self.residuals.values())

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(), "y_eq": self.y_eq.tolist(), "y_in": self.y_in.tolist(),
            "objective": self.objective, "status": self.status.value,
            "residuals": dict(self.residuals), "iterations": self.iterations,
        }

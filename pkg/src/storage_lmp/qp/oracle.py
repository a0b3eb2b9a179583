"""Exhaustive active-set oracle for small convex QPs (test ground truth).

Equalities are eliminated through an orthonormal null-space basis; every
subset of inequality rows up to the null-space dimension is then tried as
the active set and the KKT point of least objective is returned.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .. import _accel
from .problem import QpProblem, QpSolution, Status


class TooLarge(ValueError):
    pass


class OracleInfeasible(ValueError):
    pass


def _conflicts(Gr, hr, tol):
    """Rows that cannot be active together: opposite normals, positive gap."""
    m = Gr.shape[0]
    out = np.zeros((m, m), dtype=np.uint8)
    if m < 2:
        return out
    norms = np.linalg.norm(Gr, axis=1)
    for i in range(m):
        if norms[i] <= tol:
            continue
        diff = np.abs(Gr + Gr[i]).max(axis=1)
        opp = (diff <= tol * (1 + norms[i])) & (hr + hr[i] > tol)
        opp[i] = False
        out[i, opp] = 1
    return out


def active_set_oracle(problem: QpProblem, max_rows: int = 20, exhaustive: bool = True,
                      kernels=None) -> QpSolution:
    """Ground-truth solve by active-set enumeration.

    Raises :class:`TooLarge` above ``max_rows`` inequality rows and
    :class:`OracleInfeasible` when no KKT point exists.
    """
    kernels = kernels or _accel.kernels
    if problem.n_in > max_rows:
        raise TooLarge(f"{problem.n_in} inequality rows exceed the enumeration bound {max_rows}")
    p = problem.dense()
    H, q, A, b, G, h = p.H, p.q, p.Aeq, p.beq, p.Ain, p.bin
    n = p.n
    if p.n_eq:
        xp, *_ = sla.lstsq(A, b)
        if np.abs(A @ xp - b).max() > 1e-9 * (1 + np.abs(b).max()):
            raise OracleInfeasible("equality system is inconsistent")
        Z = sla.null_space(A, rcond=1e-12)
    else:
        xp = np.zeros(n)
        Z = np.eye(n)
    d = Z.shape[1]
    Hr = Z.T @ H @ Z
    Hr = 0.5 * (Hr + Hr.T)
    qr = Z.T @ (H @ xp + q)
    Gr = G @ Z
    hr = h - G @ xp
    scale = 1 + max(np.abs(hr).max(initial=0.0), np.abs(qr).max(initial=0.0))
    ptol = 1e-9 * scale
    dtol = 1e-9 * scale
    conflict = _conflicts(Gr, hr, 1e-12)
    found, obj, w, z, _ = kernels.enumerate_kkt(
        np.ascontiguousarray(Hr), np.ascontiguousarray(qr), np.ascontiguousarray(Gr),
        np.ascontiguousarray(hr), conflict, min(d, p.n_in), ptol, dtol, 1e-11, exhaustive)
    if not found:
        raise OracleInfeasible("no KKT point among enumerated active sets")
    x = xp + Z @ w
    z = np.maximum(z, 0.0)
    if p.n_eq:
        y, *_ = sla.lstsq(A.T, -(H @ x + q + G.T @ z))
    else:
        y = np.zeros(0)
    res = problem.residuals(x, y, z)
    return QpSolution(x, y, z, problem.objective(x), Status.OPTIMAL, res, 0)

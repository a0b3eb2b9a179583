"""Primal-dual interior-point solver for convex QPs.

Mehrotra predictor-corrector on the inequality block, equality rows kept in
the reduced KKT system. Near convergence an iterated active-set crossover
solves the KKT system on the guessed active rows, which both sharpens the
multipliers to rounding level and rescues degenerate problems whose central
path stalls before the tolerance is reached.
"""
from __future__ import annotations

import logging

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .problem import QpProblem, QpSolution, Status

log = logging.getLogger(__name__)

# systems at or above this size are factorized sparse when the inputs are sparse
SPARSE_THRESHOLD = 400


class _Factor:
    def __init__(self, K, use_sparse: bool):
        self.sparse = use_sparse
        if use_sparse:
            self.lu = spla.splu(sp.csc_matrix(K), permc_spec="MMD_AT_PLUS_A")
        else:
            self.lu = sla.lu_factor(np.asarray(K), check_finite=False)

    def solve(self, rhs):
        if self.sparse:
            return self.lu.solve(rhs)
        return sla.lu_solve(self.lu, rhs, check_finite=False)


def _block(blocks, use_sparse):
    if use_sparse:
        return sp.bmat(blocks, format="csc")
    return np.block([[b.toarray() if sp.issparse(b) else b for b in row] for row in blocks])


def _diag(v, use_sparse):
    return sp.diags(v) if use_sparse else np.diag(v)


def _zeros(r, c, use_sparse):
    return sp.csr_matrix((r, c)) if use_sparse else np.zeros((r, c))


class _Kernel:
    """Reduced Newton system ``[[H + G'WG + dI, A'], [A, -dI]]`` with refinement."""

    def __init__(self, prob: QpProblem, use_sparse: bool):
        self.p = prob
        self.sp = use_sparse
        cvt = (lambda m: sp.csr_matrix(m)) if use_sparse else (lambda m: m.toarray() if sp.issparse(m) else m)
        self.H, self.A, self.G = cvt(prob.H), cvt(prob.Aeq), cvt(prob.Ain)
        scale = max(1.0, float(abs(self.H).max()) if prob.n else 1.0)
        self.reg = 1e-11 * scale

    def factor(self, w):
        n, me = self.p.n, self.p.n_eq
        M = self.H + self.G.T @ _diag(w, self.sp) @ self.G
        self.M = M
        self.K0 = _block([[M, self.A.T], [self.A, _zeros(me, me, self.sp)]], self.sp)
        # a zero pivot from cancellation under extreme weights: regularize harder,
        # refinement against K0 recovers the accuracy
        reg = self.reg
        for _ in range(4):
            D = np.concatenate([np.full(n, reg), np.full(me, -reg)])
            try:
                self.f = _Factor(self.K0 + _diag(D, self.sp), self.sp)
                return
            except RuntimeError:
                reg *= 1e3
        K = self.K0 + _diag(D, self.sp)
        self.f = _Factor(K.toarray() if sp.issparse(K) else K, False)

    def solve(self, rx, ry, refine=3):
        rhs = np.concatenate([rx, ry])
        sol = self.f.solve(rhs)
        for _ in range(refine):
            r = rhs - self.K0 @ sol
            if np.abs(r).max(initial=0.0) <= 1e-14 * (1 + np.abs(rhs).max(initial=0.0)):
                break
            sol = sol + self.f.solve(r)
        n = self.p.n
        return sol[:n], sol[n:]


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return min(1.0, float(np.min(-v[neg] / dv[neg])))


def _equality_only(prob: QpProblem, use_sparse: bool) -> QpSolution:
    kern = _Kernel(prob, use_sparse)
    kern.factor(np.zeros(0))
    x, y = kern.solve(-prob.q, prob.beq, refine=10)
    y_in = np.zeros(0)
    res = prob.residuals(x, y, y_in)
    return QpSolution(x, y, y_in, prob.objective(x), Status.OPTIMAL, res, 1)


def _polish(prob: QpProblem, x, y, z, s, use_sparse, rounds: int = 12):
    """Active-set crossover from a near-optimal interior point.

    Solves the KKT system on the guessed active set by proximal iterative
    refinement (so flat directions stay near the interior point), then adds
    violated rows and drops rows with negative multipliers until stable.
    """
    n, me = prob.n, prob.n_eq
    H = prob.H
    G_all = sp.csr_matrix(prob.Ain) if use_sparse else prob.dense().Ain
    scale = max(1.0, float(abs(H).max()) if n else 1.0)
    delta = 1e-9 * scale
    ptol = 1e-12 * (1.0 + np.abs(prob.bin).max(initial=0.0))
    ntol = 1e-12 * (1.0 + np.abs(prob.q).max(initial=0.0))
    active = z > s
    best, best_err = None, np.inf
    for _ in range(rounds):
        act = np.flatnonzero(active)
        ma = act.size
        G = G_all[act]
        K0 = _block([[H, prob.Aeq.T, G.T],
                     [prob.Aeq, _zeros(me, me, use_sparse), _zeros(me, ma, use_sparse)],
                     [G, _zeros(ma, me, use_sparse), _zeros(ma, ma, use_sparse)]], use_sparse)
        D = np.concatenate([np.full(n, delta), np.full(me + ma, -delta)])
        try:
            f = _Factor(K0 + _diag(D, use_sparse), use_sparse)
        except (RuntimeError, ValueError, np.linalg.LinAlgError):
            return best
        rhs = np.concatenate([-prob.q, prob.beq, prob.bin[act]])
        sol = np.concatenate([x, y, z[act]])
        for _ in range(40):
            r = rhs - K0 @ sol
            if np.abs(r).max(initial=0.0) <= 1e-15 * (1 + np.abs(rhs).max(initial=0.0)):
                break
            sol = sol + f.solve(r)
        if not np.all(np.isfinite(sol)):
            return best
        xp = sol[:n]
        zp = np.zeros(prob.n_in)
        zp[act] = sol[n + me:]
        cand = (xp, sol[n:n + me], zp)
        err = max(max(prob.residuals(*cand).values()), -zp.min(initial=0.0))
        if err < best_err:
            best, best_err = cand, err
        viol = (G_all @ xp - prob.bin > ptol) & ~active
        neg = zp < -ntol
        if not viol.any() and not neg.any():
            break
        active = (active | viol) & ~neg
    return best


def _certified(prob: QpProblem, cand, tol: float) -> bool:
    return max(prob.residuals(*cand).values()) <= tol and cand[2].min(initial=0.0) >= -tol


def _phase_one(prob: QpProblem, tol: float, max_iter: int, use_sparse: bool) -> float:
    """Smallest uniform relaxation ``t`` of the inequalities that admits a point."""
    n, m = prob.n, prob.n_in
    ones = np.ones((m, 1))
    if use_sparse:
        Ain = sp.bmat([[prob.Ain, sp.csr_matrix(-ones)], [None, sp.csr_matrix([[-1.0]])]], format="csr")
        Aeq = sp.bmat([[prob.Aeq, sp.csr_matrix((prob.n_eq, 1))]], format="csr")
        H = sp.diags(np.concatenate([np.full(n, 1e-8), [0.0]]))
    else:
        dense = prob.dense()
        Ain = np.block([[dense.Ain, -ones], [np.zeros((1, n)), -np.ones((1, 1))]])
        Aeq = np.hstack([dense.Aeq, np.zeros((prob.n_eq, 1))])
        H = np.diag(np.concatenate([np.full(n, 1e-8), [0.0]]))
    q = np.zeros(n + 1)
    q[-1] = 1.0
    aux = QpProblem(H, q, Aeq, prob.beq, Ain, np.concatenate([prob.bin, [0.0]]))
    sol = _ipm(aux, tol, max_iter, use_sparse, allow_phase_one=False)
    if sol.status is Status.OPTIMAL or sol.residuals["primal_eq"] <= 1e-6:
        return float(sol.x[-1])
    return np.inf


def _ipm(prob: QpProblem, tol: float, max_iter: int, use_sparse: bool,
         allow_phase_one: bool = True) -> QpSolution:
    m = prob.n_in
    H, A, b, G, h, q = prob.H, prob.Aeq, prob.beq, prob.Ain, prob.bin, prob.q
    kern = _Kernel(prob, use_sparse)

    # starting point: least-squares fit of the slacks with unit weights
    kern.factor(np.ones(m))
    x, y = kern.solve(-q + G.T @ h, b)
    s = h - G @ x
    s = np.maximum(s, 1.0)
    z = np.ones(m)

    scale_q = 1.0 + np.abs(q).max(initial=0.0)
    scale_b = 1.0 + max(np.abs(b).max(initial=0.0), np.abs(h).max(initial=0.0))
    inner_tol = min(tol, 1e-9)
    stalled = 0
    it = 0
    status = Status.MAX_ITER
    polished = None
    next_polish = 1e-6
    for it in range(1, max_iter + 1):
        rd = H @ x + q + A.T @ y + G.T @ z
        rp = A @ x - b
        rg = G @ x + s - h
        mu = float(s @ z) / m
        err_d = np.abs(rd).max(initial=0.0) / scale_q
        err_p = max(np.abs(rp).max(initial=0.0), np.abs(rg).max(initial=0.0)) / scale_b
        if max(err_d, err_p) <= inner_tol and mu <= inner_tol * 1e-2:
            status = Status.OPTIMAL
            break
        # degenerate problems can stall short of the absolute certificate;
        # try the crossover each time mu falls another decade near the optimum
        gap = m * mu / (1.0 + abs(prob.objective(x)))
        if max(err_d, err_p) <= 1e-6 and gap <= next_polish:
            next_polish = gap * 0.1
            cand = _polish(prob, x, y, z, s, use_sparse)
            if cand is not None and _certified(prob, cand, tol):
                polished = cand
                break
        if not np.all(np.isfinite(x)) or np.abs(x).max(initial=0.0) > 1e14:
            break
        kern.factor(z / s)

        def direction(rsz):
            rx = -rd - G.T @ ((-rsz + z * rg) / s)
            dx, dy = kern.solve(rx, -rp)
            ds = -rg - G @ dx
            dz = (-rsz - z * ds) / s
            return dx, dy, ds, dz

        dx, dy, ds, dz = direction(s * z)
        a_aff = min(_max_step(s, ds), _max_step(z, dz))
        mu_aff = float((s + a_aff * ds) @ (z + a_aff * dz)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, dy, ds, dz = direction(s * z + ds * dz - sigma * mu)
        tau = max(0.99, 1.0 - mu)
        alpha = min(1.0, tau * min(_max_step(s, ds), _max_step(z, dz)))
        x = x + alpha * dx
        y = y + alpha * dy
        s = s + alpha * ds
        z = z + alpha * dz
        # guard against slacks collapsing to exactly zero
        s = np.maximum(s, 1e-300)
        z = np.maximum(z, 1e-300)
        stalled = stalled + 1 if alpha < 1e-3 else 0
        if stalled >= 3:
            log.debug("ipm stalled at iteration %d (mu=%.3g)", it, mu)
            break
        log.debug("it %3d mu %.3e alpha %.3f rd %.2e rp %.2e rg %.2e", it, mu, alpha,
                  np.abs(rd).max(initial=0), np.abs(rp).max(initial=0), np.abs(rg).max(initial=0))

    best = (x, y, z)
    best_res = prob.residuals(x, y, z)
    if polished is not None:
        best, best_res = polished, prob.residuals(*polished)
    elif status is Status.OPTIMAL or max(best_res.values()) < 1e-4 * scale_b:
        polished = _polish(prob, x, y, z, s, use_sparse)
        if polished is not None:
            res = prob.residuals(*polished)
            ok_sign = polished[2].min(initial=0.0) >= -tol
            if ok_sign and max(res.values()) <= max(best_res.values()):
                best, best_res = polished, res
    x, y, z = best
    if max(best_res.values()) <= tol and z.min(initial=0.0) >= -tol:
        status = Status.OPTIMAL
    elif status is Status.OPTIMAL:
        # converged by the scaled test but not to the absolute certificate
        status = Status.MAX_ITER
    if status is not Status.OPTIMAL and allow_phase_one:
        t = _phase_one(prob, 1e-9, max_iter, use_sparse)
        if t > max(1e3 * tol, 1e-6 * scale_b):
            status = Status.INFEASIBLE
    return QpSolution(x, y, z, prob.objective(x), status, best_res, it)


def solve(problem: QpProblem, tol: float = 1e-8, max_iter: int = 100,
          sparse: bool | None = None) -> QpSolution:
    """Solve a convex QP, returning primal/dual optimum and KKT residuals.

    ``status`` is ``Optimal`` only if all four residual norms are <= ``tol``
    and the inequality multipliers are >= ``-tol``.
    """
    size = problem.n + problem.n_eq
    use_sparse = problem.is_sparse and size >= SPARSE_THRESHOLD if sparse is None else sparse
    if problem.n_in == 0:
        sol = _equality_only(problem, use_sparse)
        if sol.max_residual() > tol:
            status = Status.INFEASIBLE if sol.residuals["primal_eq"] > 1e-6 else Status.MAX_ITER
            sol = QpSolution(sol.x, sol.y_eq, sol.y_in, sol.objective, status, sol.residuals, 1)
        return sol
    return _ipm(problem, tol, max_iter, use_sparse)

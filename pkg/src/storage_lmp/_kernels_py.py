"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and results; the enumeration is vectorized per cardinality
with batched SVD solves instead of a scalar elimination loop.
"""
from __future__ import annotations

import itertools

import numpy as np

IMPLEMENTATION = "python"

_CHUNK = 20000


def _combos(m, k, conflict):
    it = itertools.combinations(range(m), k)
    while True:
        block = np.fromiter(itertools.chain.from_iterable(itertools.islice(it, _CHUNK)),
                            dtype=np.intp)
        if block.size == 0:
            return
        block = block.reshape(-1, k)
        if k >= 2 and conflict.any():
            bad = np.zeros(len(block), dtype=bool)
            for a in range(k):
                for b in range(a + 1, k):
                    bad |= conflict[block[:, a], block[:, b]]
            block = block[~bad]
        if len(block):
            yield block


def enumerate_kkt(Hr, qr, Gr, hr, conflict, max_card, ptol, dtol, sing_tol, exhaustive):
    Hr = np.asarray(Hr, float)
    qr = np.asarray(qr, float)
    Gr = np.asarray(Gr, float)
    hr = np.asarray(hr, float)
    conflict = np.asarray(conflict, bool)
    d, m = Hr.shape[0], Gr.shape[0]
    found, best_obj = False, 0.0
    best_w, best_z = np.zeros(d), np.zeros(m)
    n_solved = 0
    for k in range(min(max_card, m) + 1):
        blocks = [np.zeros((1, 0), dtype=np.intp)] if k == 0 else _combos(m, k, conflict)
        for block in blocks:
            B, N = len(block), d + k
            n_solved += B
            if N == 0:
                sol = np.zeros((B, 0))
                good = np.ones(B, dtype=bool)
            else:
                K = np.zeros((B, N, N))
                K[:, :d, :d] = Hr
                rows = Gr[block]                      # (B, k, d)
                K[:, d:, :d] = rows
                K[:, :d, d:] = rows.transpose(0, 2, 1)
                rhs = np.empty((B, N))
                rhs[:, :d] = -qr
                rhs[:, d:] = hr[block]
                scale = np.abs(K).reshape(B, -1).max(axis=1)
                scale[scale == 0] = 1.0
                u, sv, vt = np.linalg.svd(K)
                # pivot-size singularity test scaled like the compiled kernel
                good = sv[:, -1] > sing_tol * scale * 1e2
                sol = np.zeros((B, N))
                if good.any():
                    ug, sg, vg = u[good], sv[good], vt[good]
                    tmp = np.einsum("bji,bj->bi", ug, rhs[good]) / sg
                    sol[good] = np.einsum("bji,bj->bi", vg, tmp)
            w = sol[:, :d]
            z = sol[:, d:]
            ok = good & np.all(z >= -dtol, axis=1)
            if m:
                ok &= np.all(w @ Gr.T - hr <= ptol, axis=1)
            if not ok.any():
                continue
            obj = 0.5 * np.einsum("bi,ij,bj->b", w, Hr, w) + w @ qr
            cand = np.flatnonzero(ok)
            pick = cand[np.argmin(obj[cand])] if exhaustive else cand[0]
            if not found or obj[pick] < best_obj:
                found, best_obj = True, float(obj[pick])
                best_w = w[pick].copy()
                best_z = np.zeros(m)
                best_z[block[pick]] = z[pick]
                if not exhaustive:
                    return found, best_obj, best_w, best_z, n_solved
    return found, best_obj, best_w, best_z, n_solved


def greedy_runs(sorted_values, radius):
    v = np.asarray(sorted_values, float)
    starts = []
    i, n = 0, v.size
    while i < n:
        starts.append(i)
        # last index j with v[j] <= v[i] + radius
        i = int(np.searchsorted(v, v[i] + radius, side="right"))
    return np.asarray(starts, dtype=np.intp)

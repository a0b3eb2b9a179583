# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: active-set enumeration and the greedy 1-D scan."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from libc.stdlib cimport malloc, free

cnp.import_array()

IMPLEMENTATION = "cython"


cdef int _lu_solve(double* K, double* rhs, int N, double thresh) noexcept nogil:
    """Gaussian elimination with partial pivoting, row-major K, solution left in rhs.

    Returns 0 on success, 1 if a pivot falls below ``thresh``.
    """
    cdef int i, j, r, piv
    cdef double best, tmp, f
    for i in range(N):
        piv = i
        best = fabs(K[i * N + i])
        for r in range(i + 1, N):
            tmp = fabs(K[r * N + i])
            if tmp > best:
                best = tmp
                piv = r
        if best <= thresh:
            return 1
        if piv != i:
            for j in range(N):
                tmp = K[i * N + j]
                K[i * N + j] = K[piv * N + j]
                K[piv * N + j] = tmp
            tmp = rhs[i]
            rhs[i] = rhs[piv]
            rhs[piv] = tmp
        for r in range(i + 1, N):
            f = K[r * N + i] / K[i * N + i]
            if f != 0.0:
                for j in range(i, N):
                    K[r * N + j] -= f * K[i * N + j]
                rhs[r] -= f * rhs[i]
    for i in range(N - 1, -1, -1):
        tmp = rhs[i]
        for j in range(i + 1, N):
            tmp -= K[i * N + j] * rhs[j]
        rhs[i] = tmp / K[i * N + i]
    return 0


def enumerate_kkt(double[:, ::1] Hr, double[::1] qr, double[:, ::1] Gr, double[::1] hr,
                  unsigned char[:, ::1] conflict, int max_card, double ptol, double dtol,
                  double sing_tol, bint exhaustive):
    """Enumerate active sets of ``min 0.5 w'Hr w + qr'w s.t. Gr w <= hr``.

    Returns ``(found, objective, w, z, n_solved)`` for the KKT point of least
    objective (the first one found when ``exhaustive`` is false).
    """
    cdef int d = Hr.shape[0]
    cdef int m = Gr.shape[0]
    cdef int k, i, j, a, b, N, ok, pos
    cdef double obj, best_obj = 0.0, kmax, viol, acc
    cdef bint found = False, bad
    cdef long n_solved = 0
    cdef int Nmax = d + (max_card if max_card < m else m)
    cdef int* idx = <int*> malloc((m + 1) * sizeof(int))
    cdef double* K = <double*> malloc((Nmax * Nmax + 1) * sizeof(double))
    cdef double* rhs = <double*> malloc((Nmax + 1) * sizeof(double))
    best_w = np.zeros(d)
    best_z = np.zeros(m)
    cdef double[::1] bw = best_w
    cdef double[::1] bz = best_z
    try:
        for k in range(0, (max_card if max_card < m else m) + 1):
            N = d + k
            for i in range(k):
                idx[i] = i
            while True:
                bad = False
                for a in range(k):
                    for b in range(a + 1, k):
                        if conflict[idx[a], idx[b]]:
                            bad = True
                            break
                    if bad:
                        break
                if not bad:
                    kmax = 0.0
                    for i in range(N * N):
                        K[i] = 0.0
                    for i in range(d):
                        for j in range(d):
                            K[i * N + j] = Hr[i, j]
                            if fabs(Hr[i, j]) > kmax:
                                kmax = fabs(Hr[i, j])
                        rhs[i] = -qr[i]
                    for a in range(k):
                        for j in range(d):
                            K[(d + a) * N + j] = Gr[idx[a], j]
                            K[j * N + d + a] = Gr[idx[a], j]
                            if fabs(Gr[idx[a], j]) > kmax:
                                kmax = fabs(Gr[idx[a], j])
                        rhs[d + a] = hr[idx[a]]
                    n_solved += 1
                    if N == 0 or _lu_solve(K, rhs, N, sing_tol * (kmax if kmax > 0 else 1.0)) == 0:
                        ok = 1
                        for a in range(k):
                            if rhs[d + a] < -dtol:
                                ok = 0
                                break
                        if ok:
                            for i in range(m):
                                acc = -hr[i]
                                for j in range(d):
                                    acc += Gr[i, j] * rhs[j]
                                if acc > ptol:
                                    ok = 0
                                    break
                        if ok:
                            obj = 0.0
                            for i in range(d):
                                acc = 0.0
                                for j in range(d):
                                    acc += Hr[i, j] * rhs[j]
                                obj += 0.5 * rhs[i] * acc + qr[i] * rhs[i]
                            if not found or obj < best_obj:
                                found = True
                                best_obj = obj
                                for i in range(d):
                                    bw[i] = rhs[i]
                                for i in range(m):
                                    bz[i] = 0.0
                                for a in range(k):
                                    bz[idx[a]] = rhs[d + a]
                                if not exhaustive:
                                    return found, best_obj, best_w, best_z, n_solved
                # next combination
                if k == 0:
                    break
                pos = k - 1
                while pos >= 0 and idx[pos] == m - k + pos:
                    pos -= 1
                if pos < 0:
                    break
                idx[pos] += 1
                for i in range(pos + 1, k):
                    idx[i] = idx[i - 1] + 1
        return found, best_obj, best_w, best_z, n_solved
    finally:
        free(idx)
        free(K)
        free(rhs)


def greedy_runs(double[::1] sorted_values, double radius):
    """Start index of each run: maximal stretches with value <= anchor + radius."""
    cdef Py_ssize_t n = sorted_values.shape[0]
    cdef Py_ssize_t i = 0, j, count = 0
    starts = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] out = starts
    with nogil:
        while i < n:
            out[count] = i
            count += 1
            j = i
            while j + 1 < n and sorted_values[j + 1] <= sorted_values[i] + radius:
                j += 1
            i = j + 1
    return starts[:count]

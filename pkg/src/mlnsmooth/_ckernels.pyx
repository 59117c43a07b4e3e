# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled clause kernels; see ``_pykernels`` for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log1p, fabs

cnp.import_array()

cdef double TOL = 1e-9

ctypedef cnp.intp_t idx_t


cdef inline double _softplus(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def truth_batch(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] coef,
                const double[::1] bias, const cnp.uint8_t[:, ::1] worlds):
    cdef Py_ssize_t S = worlds.shape[0], F = bias.shape[0]
    cdef Py_ssize_t s, f, k
    cdef double a
    out = np.empty((S, F), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] o = out
    with nogil:
        for s in range(S):
            for f in range(F):
                a = bias[f]
                for k in range(indptr[f], indptr[f + 1]):
                    if worlds[s, indices[k]]:
                        a += coef[k]
                o[s, f] = a <= TOL
    return out


def score_batch(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] coef,
                const double[::1] bias, const double[::1] w, const double[::1] sensor,
                const cnp.uint8_t[:, ::1] worlds):
    cdef Py_ssize_t S = worlds.shape[0], L = worlds.shape[1], F = bias.shape[0]
    cdef Py_ssize_t s, f, k, i
    cdef double a, tot
    out = np.empty(S, dtype=np.float64)
    cdef double[::1] o = out
    with nogil:
        for s in range(S):
            tot = 0.0
            for i in range(L):
                if worlds[s, i]:
                    tot += sensor[i]
            for f in range(F):
                a = bias[f]
                for k in range(indptr[f], indptr[f + 1]):
                    if worlds[s, indices[k]]:
                        a += coef[k]
                if a <= TOL:
                    tot += w[f]
            o[s] = tot
    return out


def pll_batch(const idx_t[::1] indptr, const idx_t[::1] indices, const double[::1] coef,
              const double[::1] bias, const double[::1] w, const double[::1] sensor,
              const cnp.uint8_t[:, ::1] worlds, const cnp.uint8_t[::1] ungrouped):
    cdef Py_ssize_t S = worlds.shape[0], L = worlds.shape[1], F = bias.shape[0]
    cdef Py_ssize_t s, f, k, i, j, n, maxcol
    cdef double a, c, delta, p1, ti, f0, f1

    # column (predicate -> clause) view of the CSR rows
    rows = np.repeat(np.arange(F, dtype=np.intp), np.diff(np.asarray(indptr)))
    order = np.lexsort((rows, np.asarray(indices)))
    colptr_np = np.searchsorted(np.asarray(indices)[order], np.arange(L + 1)).astype(np.intp)
    cdef idx_t[::1] colptr = colptr_np
    cdef idx_t[::1] crow = np.ascontiguousarray(rows[order])
    cdef double[::1] ccoef = np.ascontiguousarray(np.asarray(coef)[order])
    maxcol = int(np.diff(colptr_np).max()) if L else 0

    pll_np = np.zeros(S, dtype=np.float64)
    grad_np = np.zeros((S, F), dtype=np.float64)
    cdef double[::1] pll = pll_np
    cdef double[:, ::1] grad = grad_np
    cdef double[::1] act = np.empty(F, dtype=np.float64)
    cdef double[::1] b0 = np.empty(max(maxcol, 1), dtype=np.float64)
    cdef double[::1] b1 = np.empty(max(maxcol, 1), dtype=np.float64)

    with nogil:
        for s in range(S):
            for f in range(F):
                a = bias[f]
                for k in range(indptr[f], indptr[f + 1]):
                    if worlds[s, indices[k]]:
                        a += coef[k]
                act[f] = a
            for i in range(L):
                if not ungrouped[i]:
                    continue
                ti = worlds[s, i]
                delta = sensor[i]
                n = 0
                for k in range(colptr[i], colptr[i + 1]):
                    f = crow[k]
                    c = ccoef[k]
                    f1 = 1.0 if act[f] + c * (1.0 - ti) <= TOL else 0.0
                    f0 = 1.0 if act[f] - c * ti <= TOL else 0.0
                    b0[n] = f0
                    b1[n] = f1
                    n += 1
                    delta += w[f] * (f1 - f0)
                p1 = _sigmoid(delta)
                if ti > 0:
                    pll[s] -= _softplus(-delta)
                else:
                    pll[s] -= _softplus(delta)
                n = 0
                for k in range(colptr[i], colptr[i + 1]):
                    f = crow[k]
                    grad[s, f] += (1.0 if act[f] <= TOL else 0.0) - (1.0 - p1) * b0[n] - p1 * b1[n]
                    n += 1
    return pll_np, grad_np

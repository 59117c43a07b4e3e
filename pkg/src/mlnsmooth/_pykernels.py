"""Pure numpy versions of the clause kernels.

Signatures mirror the compiled ``_ckernels`` module exactly. Clause rows are
passed in CSR form ``(indptr, indices, coef)``; worlds are ``uint8`` arrays of
shape ``(S, L)``.
"""
import numpy as np

TOL = 1e-9


def _dense(indptr, indices, coef, L):
    F = len(indptr) - 1
    A = np.zeros((F, L))
    rows = np.repeat(np.arange(F), np.diff(indptr))
    A[rows, indices] = coef
    return A


def truth_batch(indptr, indices, coef, bias, worlds):
    A = _dense(indptr, indices, coef, worlds.shape[1])
    act = worlds @ A.T + bias
    return (act <= TOL).astype(np.uint8)


def score_batch(indptr, indices, coef, bias, w, sensor, worlds):
    truth = truth_batch(indptr, indices, coef, bias, worlds)
    return truth @ w + worlds @ sensor


def pll_batch(indptr, indices, coef, bias, w, sensor, worlds, ungrouped):
    """Pseudo-log-likelihood and its weight gradient for every world.

    Returns ``(pll, grad)`` with shapes ``(S,)`` and ``(S, F)``. Only
    predicates with ``ungrouped[i] != 0`` get a conditional term.
    """
    S, L = worlds.shape
    A = _dense(indptr, indices, coef, L)
    T = worlds.astype(np.float64)
    act = T @ A.T + bias
    ft = (act <= TOL).astype(np.float64)
    pll = np.zeros(S)
    grad = np.zeros((S, A.shape[0]))
    for i in range(L):
        if not ungrouped[i]:
            continue
        R = np.flatnonzero(A[:, i])
        ti = T[:, i]
        c = A[R, i]
        f1 = (act[:, R] + np.outer(1.0 - ti, c) <= TOL).astype(np.float64)
        f0 = (act[:, R] - np.outer(ti, c) <= TOL).astype(np.float64)
        delta = sensor[i] + (f1 - f0) @ w[R]
        p1 = 0.5 * (1.0 + np.tanh(0.5 * delta))
        pll -= np.where(ti > 0, np.logaddexp(0.0, -delta), np.logaddexp(0.0, delta))
        grad[:, R] += ft[:, R] - (1.0 - p1)[:, None] * f0 - p1[:, None] * f1
    return pll, grad

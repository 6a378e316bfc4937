"""Dense two-phase tableau simplex for small linear programs.

Solves ``max c.x  s.t.  A x = b, x >= 0`` with ``b >= 0``.  Bland's rule
(lowest eligible index enters, lowest basis index breaks ratio ties) rules
out cycling, so the result is deterministic for a given input.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

TOL = 1e-11


class LPResult(NamedTuple):
    status: str          # "optimal", "infeasible" or "unbounded"
    x: np.ndarray | None
    value: float


def _pivot(T, row, col):
    T[row] /= T[row, col]
    for i in range(T.shape[0]):
        if i != row and T[i, col] != 0.0:
            T[i] -= T[i, col] * T[row]


def _run(T, basis, n_cols, max_iter):
    """Maximise the objective held in the last row (stored negated) over the
    first ``n_cols`` columns.  Returns False when unbounded."""
    obj = T[-1]
    for _ in range(max_iter):
        enter = next((j for j in range(n_cols) if obj[j] < -TOL), None)
        if enter is None:
            return True
        col = T[:-1, enter]
        best, leave = np.inf, None
        for i in range(len(col)):
            if col[i] > TOL:
                ratio = T[i, -1] / col[i]
                if ratio < best - TOL or (abs(ratio - best) <= TOL and basis[i] < basis[leave]):
                    best, leave = ratio, i
        if leave is None:
            return False
        _pivot(T, leave, enter)
        basis[leave] = enter
    raise RuntimeError("simplex did not terminate")


def solve(c, A, b, max_iter=10_000) -> LPResult:
    c = np.asarray(c, dtype=float)
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float)
    m, n = A.shape
    if np.any(b < 0):
        raise ValueError("right-hand side must be nonnegative")
    # phase 1: artificial basis, minimise their sum
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[-1, :n] = -A.sum(axis=0)
    T[-1, -1] = -b.sum()
    basis = list(range(n, n + m))
    _run(T, basis, n + m, max_iter)
    if -T[-1, -1] > 1e-9 * max(1.0, b.sum()):
        return LPResult("infeasible", None, float("nan"))
    # drive remaining artificials out of the basis where possible
    for i, v in enumerate(basis):
        if v >= n:
            j = next((j for j in range(n) if abs(T[i, j]) > TOL), None)
            if j is not None:
                _pivot(T, i, j)
                basis[i] = j
    keep = [i for i, v in enumerate(basis) if v < n]
    T2 = np.zeros((len(keep) + 1, n + 1))
    T2[:-1, :n] = T[keep, :n]
    T2[:-1, -1] = T[keep, -1]
    basis = [basis[i] for i in keep]
    T2[-1, :n] = -c
    for i, v in enumerate(basis):
        if T2[-1, v] != 0.0:
            T2[-1] -= T2[-1, v] * T2[i]
    if not _run(T2, basis, n, max_iter):
        return LPResult("unbounded", None, float("inf"))
    x = np.zeros(n)
    for i, v in enumerate(basis):
        x[v] = T2[i, -1]
    return LPResult("optimal", x, float(c @ x))

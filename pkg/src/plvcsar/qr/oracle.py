"""Exhaustive vertex enumeration for small check-loss problems.

Some minimizer of the check loss interpolates ``m`` observations, so the
global optimum is the best exact fit over all ``m``-subsets of rows. Cost is
``C(n, m)`` small solves; intended for tests with ``n <= 12``.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from . import check_loss_sum


def vertex_enumeration(X, y, tau):
    """Return ``(coef, objective)`` of the best exact-fit vertex."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, m = X.shape
    best_obj = np.inf
    best = None
    for rows in combinations(range(n), m):
        idx = list(rows)
        Xh = X[idx]
        if abs(np.linalg.det(Xh)) < 1e-12:
            continue
        b = np.linalg.solve(Xh, y[idx])
        obj = check_loss_sum(y - X @ b, tau)
        if obj < best_obj:
            best_obj, best = obj, b
    if best is None:
        raise ValueError("no nonsingular m-subset of rows")
    return best, best_obj

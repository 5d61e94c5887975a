"""Normalized B-spline bases for the varying coefficients.

Knots sit at empirical quantiles of the smoothing variable with
``degree + 1``-fold boundary knots, so the basis has
``interior_knot_count + degree + 1`` functions that sum to one on the
support.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateSupportError, DimensionError, ParameterDomainError

log = logging.getLogger(__name__)

__all__ = [
    "SplineBasis",
    "VaryingCoefBlock",
    "build_pi",
    "default_knot_candidates",
    "eval_basis",
    "make_knots",
    "sic",
    "select_knots",
]


@dataclass(frozen=True)
class SplineBasis:
    interior_knot_count: int
    degree: int
    knot_vector: np.ndarray

    @property
    def basis_dim(self):
        return self.interior_knot_count + self.degree + 1

    @property
    def lower(self):
        return float(self.knot_vector[0])

    @property
    def upper(self):
        return float(self.knot_vector[-1])

    @property
    def interior_knots(self):
        h = self.degree
        return self.knot_vector[h + 1: len(self.knot_vector) - h - 1]

    def __call__(self, u):
        return eval_basis(u, self)


@dataclass(frozen=True)
class VaryingCoefBlock:
    pi_matrix: np.ndarray
    q: int
    basis_dim: int

    @property
    def q_kn(self):
        return self.q * self.basis_dim

    def columns(self, l):
        """Column slice of the ``l``-th varying coefficient (0-based)."""
        return slice(l * self.basis_dim, (l + 1) * self.basis_dim)


def _spread_collisions(interior, lo, hi):
    """Make interior knots strictly increasing inside ``(lo, hi)``.

    A knot that coincides with its left neighbour moves to the midpoint of
    that neighbour and the next larger value; a backward pass does the same
    against the right boundary.
    """
    g = np.concatenate([[lo], np.asarray(interior, dtype=float), [hi]])
    k = len(interior)
    for j in range(1, k + 1):
        if g[j] <= g[j - 1]:
            ahead = g[j + 1:][g[j + 1:] > g[j - 1]]
            g[j] = 0.5 * (g[j - 1] + (ahead[0] if ahead.size else hi))
    for j in range(k, 0, -1):
        if g[j] >= g[j + 1]:
            behind = g[:j][g[:j] < g[j + 1]]
            g[j] = 0.5 * (behind.max() + g[j + 1])
    return g[1:-1]


def make_knots(u_values, k_n, degree=3):
    """Knot vector with ``k_n`` interior knots at empirical quantiles of ``u_values``."""
    u = np.asarray(u_values, dtype=float).ravel()
    if u.size == 0:
        raise DegenerateSupportError("no smoothing-variable values")
    if k_n < 0 or degree < 0:
        raise ParameterDomainError(f"need k_n >= 0 and degree >= 0, got {k_n}, {degree}")
    lo, hi = float(u.min()), float(u.max())
    if np.unique(u).size < 2:
        raise DegenerateSupportError("smoothing variable needs at least two distinct values")
    probs = np.arange(1, k_n + 1) / (k_n + 1)
    interior = np.quantile(u, probs) if k_n else np.empty(0)
    gaps = np.diff(np.concatenate([[lo], interior, [hi]]))
    if k_n and np.any(gaps <= 1e-12 * (hi - lo)):
        log.info("interior knot collision at %s; spreading toward midpoints", interior)
        interior = _spread_collisions(interior, lo, hi)
    knots = np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])
    return SplineBasis(int(k_n), int(degree), knots)


def _basis_matrix(u, t, degree):
    """Cox-de Boor recursion for all basis functions at the points ``u``."""
    nb = len(t) - degree - 1
    # locate the span; the right boundary belongs to the last nonempty span
    last = len(t) - degree - 2
    span = np.searchsorted(t, u, side="right") - 1
    span = np.clip(span, degree, last)
    N = np.zeros((u.size, degree + 1))
    N[:, 0] = 1.0
    left = np.empty((u.size, degree + 1))
    right = np.empty((u.size, degree + 1))
    for j in range(1, degree + 1):
        left[:, j] = u - t[span + 1 - j]
        right[:, j] = t[span + j] - u
        saved = np.zeros(u.size)
        for r in range(j):
            denom = right[:, r + 1] + left[:, j - r]
            temp = np.divide(N[:, r], denom, out=np.zeros(u.size), where=denom != 0)
            N[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        N[:, j] = saved
    B = np.zeros((u.size, nb))
    rows = np.arange(u.size)
    for r in range(degree + 1):
        B[rows, span - degree + r] = N[:, r]
    return B


def eval_basis(u, basis):
    """Evaluate all basis functions at ``u`` (scalar or 1-d array).

    Points outside the knot range are clamped to it with a warning.
    """
    scalar = np.ndim(u) == 0
    uu = np.atleast_1d(np.asarray(u, dtype=float))
    lo, hi = basis.lower, basis.upper
    if np.any(uu < lo) or np.any(uu > hi):
        warnings.warn("basis evaluated outside the knot range; clamping", RuntimeWarning, stacklevel=2)
        uu = np.clip(uu, lo, hi)
    B = _basis_matrix(uu, basis.knot_vector, basis.degree)
    return B[0] if scalar else B


def build_pi(Z, U, basis):
    """Row ``i`` is ``(Z[i,0] * pi(U[i]), ..., Z[i,q-1] * pi(U[i]))``."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    U = np.asarray(U, dtype=float).ravel()
    if Z.shape[0] != U.shape[0]:
        raise DimensionError(f"Z has {Z.shape[0]} rows but U has {U.shape[0]}")
    n, q = Z.shape
    d = basis.basis_dim
    if q == 0:
        return VaryingCoefBlock(np.zeros((n, 0)), 0, d)
    B = eval_basis(U, basis)
    pi = (Z[:, :, None] * B[:, None, :]).reshape(n, q * d)
    return VaryingCoefBlock(pi, q, d)


def sic(objective, n, p, q_kn, extra=2):
    """Schwarz-type criterion ``log(objective) + log(n)/(2n) * (extra + p + q_kn)``.

    ``extra`` counts the spatial coefficient and the instrument
    coefficients. A zero objective (perfect interpolation) returns ``-inf``.
    """
    if n < 1:
        raise ParameterDomainError("n must be positive")
    if objective < 0:
        raise ParameterDomainError("objective must be nonnegative")
    penalty = math.log(n) / (2.0 * n) * (extra + p + q_kn)
    if objective == 0:
        warnings.warn("zero check loss: SIC saturates at -inf", RuntimeWarning, stacklevel=2)
        return -math.inf
    return math.log(objective) + penalty


def default_knot_candidates(n):
    return list(range(0, math.ceil(n ** 0.25) + 1))


def select_knots(dataset, tau, candidate_kns=None, config=None):
    """Interior knot count minimizing SIC of the full IVQR fit.

    Ties go to the smaller count. Returns ``(k_n, {k_n: sic})``.
    """
    from .ivqr import IvqrConfig, fit_with_knots

    cfg = config or IvqrConfig(tau=tau)
    if cfg.tau != tau:
        cfg = cfg.replace(tau=tau)
    n = dataset.n
    cands = sorted(set(candidate_kns if candidate_kns is not None else default_knot_candidates(n)))
    if not cands:
        raise ParameterDomainError("no candidate knot counts")
    q = dataset.q
    p = dataset.p
    scores = {}
    for k in cands:
        q_kn = q * (k + cfg.degree + 1)
        if q_kn + p + 2 >= n:
            continue
        est = fit_with_knots(dataset, cfg, k)
        scores[k] = est.sic
    if not scores:
        raise ParameterDomainError("every candidate knot count is infeasible for this sample size")
    best = min(scores, key=lambda k: (scores[k], k))
    return best, scores

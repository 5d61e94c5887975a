"""Exact linear quantile regression.

The check-loss problem is solved with a Frisch-Newton interior point method
(compiled kernel when available, numpy otherwise), then snapped to the
nearest optimal vertex: the ``m`` observations with the smallest interior
point residuals define a basis whose exact fit is accepted when it does not
increase the objective. The dual certificate of that vertex is recorded on
the fit.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from ..errors import DegenerateDesignError, DimensionError, ParameterDomainError, SolverError

__all__ = [
    "BACKEND",
    "CheckLossProblem",
    "QrFit",
    "SolverConfig",
    "check_loss",
    "check_loss_sum",
    "psi",
    "solve_qr",
]


def _check_tau(tau):
    if not (0.0 < tau < 1.0):
        raise ParameterDomainError(f"tau must lie in (0, 1), got {tau!r}")


def check_loss(u, tau):
    """Check loss ``u * (tau - 1{u < 0})``; vectorizes over ``u``."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = u * (tau - (u < 0))
    return float(out) if out.ndim == 0 else out


def check_loss_sum(u, tau):
    u = np.asarray(u, dtype=float)
    return float(np.sum(u * (tau - (u < 0))))


def psi(u, tau):
    """Quantile score ``tau - 1{u < 0}``, with ``psi(0) = tau``."""
    _check_tau(tau)
    u = np.asarray(u, dtype=float)
    out = tau - (u < 0).astype(float)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class SolverConfig:
    gap_tol: float = 1e-8
    rank_tol: float = 1e-10
    max_iter: int = 200
    polish: bool = True
    backend: str | None = None


@dataclass(frozen=True)
class CheckLossProblem:
    design: np.ndarray
    response: np.ndarray
    tau: float

    def validate(self, rank_tol=1e-10):
        X = np.asarray(self.design, dtype=float)
        y = np.asarray(self.response, dtype=float)
        if X.ndim != 2:
            raise DimensionError(f"design must be 2-d, got shape {X.shape}")
        if y.shape != (X.shape[0],):
            raise DimensionError(f"response shape {y.shape} does not match design {X.shape}")
        _check_tau(self.tau)
        n, m = X.shape
        if not (n >= m >= 1):
            raise DegenerateDesignError(f"need n >= m >= 1, got n={n}, m={m}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise DimensionError("design and response must be finite")
        sv = np.linalg.svd(X, compute_uv=False)
        if sv[-1] <= rank_tol * sv[0]:
            raise DegenerateDesignError(
                f"design is rank deficient (smallest/largest singular value {sv[-1] / sv[0]:.3e})"
            )
        return X, y


@dataclass
class QrFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    objective: float
    n_interpolated: int
    degenerate: bool = False
    iterations: int = 0
    duality_gap: float = 0.0
    basis: np.ndarray | None = field(default=None, repr=False)


def _zero_tol(y):
    return 1e-9 * (1.0 + float(np.max(np.abs(y))))


def _select_basis(X, order):
    """Greedy: first rows in ``order`` that are linearly independent."""
    m = X.shape[1]
    Q = np.zeros((0, m))
    rows = []
    for i in order:
        x = X[i]
        r = x - Q.T @ (Q @ x)
        nr = np.linalg.norm(r)
        if nr > 1e-9 * max(1.0, np.linalg.norm(x)):
            Q = np.vstack([Q, r / nr])
            rows.append(i)
            if len(rows) == m:
                break
    return np.array(rows, dtype=int) if len(rows) == m else None


def _vertex(X, y, tau, coef):
    """Exact fit through the ``m`` rows nearest the interior point solution.

    Returns ``(coef, basis, certified)`` or ``None``.
    """
    n, m = X.shape
    order = np.argsort(np.abs(y - X @ coef), kind="stable")
    h = order[:m]
    lu = lu_factor(X[h], check_finite=False)
    diag = np.abs(np.diag(lu[0]))
    if diag.min() <= 1e-10 * max(diag.max(), 1e-300):
        h = _select_basis(X, order)
        if h is None:
            return None
        lu = lu_factor(X[h], check_finite=False)
    bv = lu_solve(lu, y[h], check_finite=False)
    r = y - X @ bv
    nonbasic = np.ones(n, dtype=bool)
    nonbasic[h] = False
    g = X[nonbasic].T @ (tau - (r[nonbasic] < 0))
    # multipliers of the basic observations
    v = lu_solve(lu, -g, trans=1, check_finite=False)
    tol = 1e-9
    certified = bool(np.all(v >= tau - 1.0 - tol) and np.all(v <= tau + tol))
    return bv, h, certified


def solve_qr(problem, config=None, check_rank=True):
    """Minimize the summed check loss of ``response - design @ b`` over ``b``.

    Parameters
    ----------
    problem : CheckLossProblem
    config : SolverConfig, optional
    check_rank : bool
        Skip the SVD rank check when the caller already validated the design
        (the grid search reuses one design for every grid point).

    Returns
    -------
    QrFit

    Raises
    ------
    DegenerateDesignError
        If the design is numerically rank deficient.
    SolverError
        If the interior point method stalls and no optimal vertex is found.
    """
    cfg = config or SolverConfig()
    if check_rank:
        X, y = problem.validate(cfg.rank_tol)
    else:
        X = np.asarray(problem.design, dtype=float)
        y = np.asarray(problem.response, dtype=float)
    tau = float(problem.tau)
    _check_tau(tau)

    from . import _kernel

    kernel = _kernel.KERNELS[cfg.backend] if cfg.backend else _kernel.fnb_solve
    coef, iters, gap, status = kernel(X, y, tau, cfg.gap_tol, cfg.max_iter)
    coef = np.asarray(coef, dtype=float)

    basis = None
    certified = False
    if cfg.polish or status != 0:
        snap = _vertex(X, y, tau, coef) if np.all(np.isfinite(coef)) else None
        if snap is not None:
            bv, h, certified = snap
            obj_ipm = check_loss_sum(y - X @ coef, tau) if status == 0 else np.inf
            obj_v = check_loss_sum(y - X @ bv, tau)
            if certified or obj_v <= obj_ipm + 1e-12 * max(1.0, abs(obj_ipm)):
                coef, basis = bv, h
    if status != 0 and not certified:
        raise SolverError(
            "interior point iteration did not converge",
            {"iterations": iters, "duality_gap": gap, "status": status},
        )

    resid = y - X @ coef
    n_interp = int(np.sum(np.abs(resid) <= _zero_tol(y)))
    return QrFit(
        coefficients=coef,
        residuals=resid,
        objective=check_loss_sum(resid, tau),
        n_interpolated=n_interp,
        degenerate=basis is None or not certified,
        iterations=int(iters),
        duality_gap=float(gap),
        basis=basis,
    )


from ._kernel import BACKEND  # noqa: E402

"""Quantile rank-score tests for the linear and the varying coefficients.

Both tests fit the model under the null hypothesis, project the tested
regressors off the (density weighted) retained design and compare the
score vector ``n^-1/2 sum G_i psi_tau(e_i)`` with its estimated covariance.

The constancy test offers three sets of tested directions:

``"spline"``   ``Z_1 * pi(U)`` with the constant direction removed, so the
               score only sees departures of ``gamma_1`` from a constant
``"linear"``   ``Z_1 * U``, one direction per tested covariate
``"literal"``  ``Z_1`` itself, projected off the null design
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2, norm

from .errors import DegenerateDesignError, DimensionError, ParameterDomainError, SingularMatrixError
from .ivqr import IvqrConfig, fit_design, kernel_density_at_zero, residual_bandwidth
from .model import assemble_design
from .qr import CheckLossProblem, psi, solve_qr
from .spline import build_pi

log = logging.getLogger(__name__)

REFERENCES = ("chi_square", "normal_approx")
DENSITY_FLOOR = 1e-8
PINV_COND = 1e10

__all__ = [
    "RankScoreResult",
    "SparsityWeights",
    "estimate_sparsity",
    "rank_score_statistic",
    "reference_pvalue",
    "rs_beta_test",
    "rs_constancy_test",
]


@dataclass
class SparsityWeights:
    B: np.ndarray
    bandwidth: float

    @property
    def sqrt_B(self):
        return np.sqrt(self.B)


@dataclass
class RankScoreResult:
    statistic: float
    df: int
    reference: str
    p_value: float
    levels: tuple = (0.01, 0.05, 0.10)
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def reject_at(self):
        return {a: bool(self.p_value < a) for a in self.levels}

    def rejects(self, alpha=0.05):
        return bool(self.p_value < alpha)

    def to_dict(self):
        return {
            "statistic": self.statistic,
            "df": self.df,
            "reference": self.reference,
            "p_value": self.p_value,
        }


def estimate_sparsity(residuals, tau, rule="hall_sheather", scale=1.0, bandwidth=None, mode="powell"):
    """Density of each error at zero, ``phi(e_i / h) / h``.

    ``mode="homoscedastic"`` replaces the per-observation values by their mean.
    Values below ``1e-8`` are floored with a warning.
    """
    r = np.asarray(residuals, dtype=float).ravel()
    if mode not in ("powell", "homoscedastic"):
        raise ParameterDomainError(f"unknown sparsity mode {mode!r}")
    h = residual_bandwidth(r, tau, rule, scale) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ParameterDomainError("sparsity bandwidth must be positive")
    f = kernel_density_at_zero(r, tau, bandwidth=h)
    if mode == "homoscedastic":
        f = np.full_like(f, f.mean())
    low = f < DENSITY_FLOOR
    if np.any(low):
        warnings.warn(f"{int(low.sum())} density weights floored at {DENSITY_FLOOR}", RuntimeWarning, stacklevel=2)
        f = np.where(low, DENSITY_FLOOR, f)
    return SparsityWeights(B=f, bandwidth=h)


def reference_pvalue(statistic, df, reference="chi_square"):
    """Upper-tail probability of ``statistic``.

    For ``normal_approx`` the statistic is already standardized and the
    one-sided upper tail is returned.
    """
    if reference == "chi_square":
        if statistic < 0:
            raise ParameterDomainError("a chi-square statistic cannot be negative")
        return float(chi2.sf(statistic, df))
    if reference == "normal_approx":
        return float(norm.sf(statistic))
    raise ParameterDomainError(f"unknown reference {reference!r}; choose from {REFERENCES}")


def _weighted_projection(Xstar, sqrt_B):
    """``P = B^1/2 X (X' B X)^-1 X' B^1/2`` as an explicit n x n matrix."""
    Xw = sqrt_B[:, None] * Xstar
    Q, R = np.linalg.qr(Xw)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= 1e-12 * d.max():
        raise DegenerateDesignError("retained design is rank deficient under the density weights")
    return Q @ Q.T


def rank_score_statistic(tested, retained, residuals, tau, weights, weighted=False):
    """``(RS, S_n, Q_n, G)`` for the tested columns given the null residuals.

    ``G = (I - P) tested`` with ``P`` the density-weighted projection on the
    retained columns; ``weighted=True`` uses ``(I - P) B^1/2 tested``.
    """
    T = np.asarray(tested, dtype=float)
    if T.ndim == 1:
        T = T[:, None]
    n = T.shape[0]
    if T.shape[1] == 0:
        raise DimensionError("no tested columns")
    P = _weighted_projection(retained, weights.sqrt_B)
    base = weights.sqrt_B[:, None] * T if weighted else T
    G = base - P @ base
    s = psi(residuals, tau)
    S_n = G.T @ s / math.sqrt(n)
    Q_n = (G * (s ** 2)[:, None]).T @ G / n
    scale = np.linalg.norm(T)
    if not np.any(np.abs(G) > 1e-12 * max(scale, 1.0)):
        raise SingularMatrixError("projected tested block G is zero", math.inf)
    cond = np.linalg.cond(Q_n)
    if not np.isfinite(cond):
        raise SingularMatrixError("score covariance Q_n is singular", cond)
    if cond > PINV_COND:
        warnings.warn(f"Q_n is ill conditioned (cond {cond:.2e}); using a pseudo-inverse", RuntimeWarning, stacklevel=2)
        Qinv = np.linalg.pinv(Q_n)
    else:
        Qinv = np.linalg.inv(Q_n)
    stat = float(S_n @ Qinv @ S_n)
    return max(stat, 0.0), S_n, Q_n, G


def _null_fit(y, design, cfg, null_fit):
    """Coefficients of the null model: ``(rho, coefs over X_tilde)``.

    ``null_fit="ivqr"`` runs the grid search; ``"naive_qr"`` puts the lag
    in the regression as if it were exogenous and drops the instruments.
    """
    if null_fit == "ivqr":
        est = fit_design(y, design, cfg)
        return est.rho_hat, est.coefficients, est
    if null_fit == "naive_qr":
        E = design.block_index["E"]
        keep = np.ones(design.X_tilde.shape[1], dtype=bool)
        keep[E] = False
        Xq = np.column_stack([design.D, design.X_tilde[:, keep]])
        fit = solve_qr(CheckLossProblem(Xq, y, cfg.tau), cfg.solver)
        coefs = np.zeros(design.X_tilde.shape[1])
        coefs[keep] = fit.coefficients[1:]
        return float(fit.coefficients[0]), coefs, fit
    raise ParameterDomainError(f"unknown null fit {null_fit!r}")


def _columns(idx, width, what):
    idx = sorted(set(int(i) for i in np.atleast_1d(idx)))
    if not idx:
        raise ParameterDomainError(f"empty set of {what}")
    if idx[0] < 0 or idx[-1] >= width:
        raise ParameterDomainError(f"{what} {idx} out of range for {width} columns")
    return idx


def rs_beta_test(dataset, basis, beta_partition, tau, config=None, null_fit="ivqr",
                 sparsity="powell", weighted=False):
    """Rank-score test of ``H0: beta_j(tau) = 0`` for the columns in ``beta_partition`` (0-based).

    The null model is fitted on ``(D, X_2, Pi)``; its residuals exclude the
    instrument term. Reference distribution is chi-square with as many
    degrees of freedom as tested columns.
    """
    cfg = (config or IvqrConfig(tau=tau)).replace(tau=tau)
    tested = _columns(beta_partition, dataset.p, "tested linear columns")
    kept = [j for j in range(dataset.p) if j not in tested]
    X1 = dataset.X[:, tested]
    X2 = dataset.X[:, kept]
    design = assemble_design(dataset, basis, cfg.instruments, linear=X2)
    rho, coefs, fit = _null_fit(dataset.y, design, cfg, null_fit)
    E = design.block_index["E"]
    coefs_noE = coefs.copy()
    coefs_noE[E] = 0.0
    resid = dataset.y - rho * design.D - design.X_tilde @ coefs_noE
    retained = np.column_stack([design.D, X2, design.pi.pi_matrix])
    w = estimate_sparsity(resid, tau, cfg.bandwidth, cfg.bandwidth_scale, mode=sparsity)
    stat, S_n, Q_n, G = rank_score_statistic(X1, retained, resid, tau, w, weighted=weighted)
    df = len(tested)
    return RankScoreResult(
        statistic=stat,
        df=df,
        reference="chi_square",
        p_value=reference_pvalue(stat, df, "chi_square"),
        diagnostics={"rho_null": rho, "bandwidth": w.bandwidth, "score": S_n, "null_fit": null_fit},
    )


def _spline_directions(Z1, U, basis):
    """``Z_1 * pi(U)`` minus one basis column per covariate.

    The basis sums to one, so the dropped column leaves the span of
    ``[Z_1, directions]`` equal to the span of ``Z_1 * pi(U)``.
    """
    block = build_pi(Z1, U, basis)
    d = block.basis_dim
    cols = [j for j in range(block.pi_matrix.shape[1]) if j % d != 0]
    return block.pi_matrix[:, cols]


def rs_constancy_test(dataset, basis, varying_subset, tau, config=None, null_fit="ivqr",
                      sparsity="powell", directions="spline", reference=None, weighted=False):
    """Rank-score test that the varying coefficients in ``varying_subset`` (0-based) are constant.

    The null model treats those coefficients as constants and keeps splines
    on the others. ``reference=None`` picks the normal approximation when
    the basis has more than ``n^(1/5)`` interior knots and chi-square
    otherwise; the normal statistic is ``(RS - df) / sqrt(2 df)``.
    """
    cfg = (config or IvqrConfig(tau=tau)).replace(tau=tau)
    if basis is None:
        raise ParameterDomainError("the constancy test needs a spline basis")
    if directions not in ("spline", "linear", "literal"):
        raise ParameterDomainError(f"unknown direction set {directions!r}")
    tested = _columns(varying_subset, dataset.q, "tested varying coefficients")
    others = [j for j in range(dataset.q) if j not in tested]
    Z1 = dataset.Zstar[:, tested]
    Z2 = dataset.Zstar[:, others]
    if not np.any(Z1):
        raise SingularMatrixError("tested varying covariates are identically zero", math.inf)
    linear = np.column_stack([dataset.X, Z1])
    design = assemble_design(dataset, basis, cfg.instruments, linear=linear, varying=Z2)
    rho, coefs, fit = _null_fit(dataset.y, design, cfg, null_fit)
    bi = design.block_index
    coefs_noE = coefs.copy()
    coefs_noE[bi["E"]] = 0.0
    resid = dataset.y - rho * design.D - design.X_tilde @ coefs_noE
    gamma_const = coefs[bi["X"]][dataset.p:]
    X_breve = np.column_stack([design.D, dataset.X, design.pi.pi_matrix])
    w = estimate_sparsity(resid, tau, cfg.bandwidth, cfg.bandwidth_scale, mode=sparsity)
    if directions == "spline":
        T = _spline_directions(Z1, dataset.U, basis)
        retained = np.column_stack([X_breve, Z1])
    elif directions == "linear":
        T = Z1 * dataset.U[:, None]
        retained = np.column_stack([X_breve, Z1])
    else:
        T = Z1
        retained = X_breve
    stat, S_n, Q_n, G = rank_score_statistic(T, retained, resid, tau, w, weighted=weighted)
    df = T.shape[1]

    # re-estimate the remaining curves with gamma_1 held at its null value;
    # reported only
    step2 = solve_qr(CheckLossProblem(X_breve, dataset.y - Z1 @ gamma_const, tau), cfg.solver)

    if reference is None:
        reference = "normal_approx" if basis.interior_knot_count > dataset.n ** 0.2 else "chi_square"
    if reference == "normal_approx":
        value = (stat - df) / math.sqrt(2.0 * df)
    elif reference == "chi_square":
        value = stat
    else:
        raise ParameterDomainError(f"unknown reference {reference!r}; choose from {REFERENCES}")
    return RankScoreResult(
        statistic=float(value),
        df=df,
        reference=reference,
        p_value=reference_pvalue(value, df, reference),
        diagnostics={
            "rank_score": stat,
            "rho_null": rho,
            "gamma_constant": gamma_const,
            "bandwidth": w.bandwidth,
            "step2_coefficients": step2.coefficients,
            "step2_objective": step2.objective,
            "directions": directions,
            "null_fit": null_fit,
        },
    )

"""Instrumental-variable quantile regression with a spatial-lag grid search.

For every candidate spatial coefficient ``rho_j`` the response
``y - rho_j * W y`` is regressed (check loss) on ``[X, Pi, E]``; the
estimate of ``rho`` is the grid point whose instrument coefficients are
closest to zero in the ``A``-weighted norm, and the remaining coefficients
are read off the fit at that grid point.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .errors import ParameterDomainError, SingularMatrixError
from .model import assemble_design
from .qr import CheckLossProblem, SolverConfig, solve_qr
from .spline import eval_basis, make_knots, sic

__all__ = [
    "CovarianceBundle",
    "IVQREstimate",
    "IvqrConfig",
    "RhoGrid",
    "asymptotic_cov",
    "confidence_intervals",
    "estimate",
    "estimate_naive_qr",
    "eval_varying_coef",
    "fit_design",
    "fit_with_knots",
    "kernel_density_at_zero",
    "residual_bandwidth",
    "step1_profile",
    "step2_grid_search",
]


@dataclass(frozen=True)
class RhoGrid:
    lo: float = -0.99
    hi: float = 0.99
    step: float = 0.01

    def __post_init__(self):
        if not (-1.0 < self.lo < self.hi < 1.0):
            raise ParameterDomainError(f"rho grid must satisfy -1 < lo < hi < 1, got {self.lo}, {self.hi}")
        if self.step <= 0:
            raise ParameterDomainError("rho grid step must be positive")

    @classmethod
    def parse(cls, text):
        """Parse ``"lo:hi:step"``."""
        try:
            lo, hi, step = (float(t) for t in text.split(":"))
        except ValueError:
            raise ParameterDomainError(f"rho grid must look like lo:hi:step, got {text!r}") from None
        return cls(lo, hi, step)

    def values(self):
        k = int(math.floor((self.hi - self.lo) / self.step + 1e-9))
        return np.round(self.lo + self.step * np.arange(k + 1), 12)


@dataclass(frozen=True)
class IvqrConfig:
    tau: float = 0.5
    rho_grid: RhoGrid = field(default_factory=RhoGrid)
    weight_A: str = "identity"
    k_n: int | None = None
    knot_candidates: tuple | None = None
    degree: int = 3
    instruments: str = "wx_wz"
    bandwidth: str = "hall_sheather"
    bandwidth_scale: float = 1.0
    ci_rate: str = "sqrt_n"
    sic_penalty: str = "full"
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not (0.0 < self.tau < 1.0):
            raise ParameterDomainError(f"tau must lie in (0, 1), got {self.tau}")
        if self.weight_A not in ("identity", "inverse_zeta_cov"):
            raise ParameterDomainError(f"unknown weight_A {self.weight_A!r}")
        if self.bandwidth not in ("hall_sheather", "bofinger"):
            raise ParameterDomainError(f"unknown bandwidth rule {self.bandwidth!r}")
        if self.ci_rate not in ("sqrt_n", "n"):
            raise ParameterDomainError(f"unknown ci_rate {self.ci_rate!r}")
        if self.sic_penalty not in ("full", "fixed"):
            raise ParameterDomainError(f"unknown sic_penalty {self.sic_penalty!r}")
        if self.bandwidth_scale <= 0:
            raise ParameterDomainError("bandwidth_scale must be positive")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class IVQREstimate:
    tau: float
    rho_hat: float
    beta_hat: np.ndarray
    theta_hat: np.ndarray
    zeta_hat: np.ndarray
    basis: object
    profile: dict
    design: object
    y: np.ndarray
    objective: float
    sic: float
    method: str = "ivqr"
    q: int = 0

    @property
    def k_n(self):
        return None if self.basis is None else self.basis.interior_knot_count

    @property
    def residuals(self):
        """``y - rho D - [X, Pi, E] eta`` at the estimate."""
        return self.y - self.rho_hat * self.design.D - self.design.X_tilde @ self.coefficients

    @property
    def coefficients(self):
        return np.concatenate([self.beta_hat, self.theta_hat, self.zeta_hat])

    def theta(self, l):
        d = self.basis.basis_dim
        return self.theta_hat[l * d:(l + 1) * d]

    def gamma(self, l, u):
        return eval_varying_coef(self, l, u)

    def to_dict(self):
        out = {
            "method": self.method,
            "tau": self.tau,
            "rho_hat": self.rho_hat,
            "beta_hat": self.beta_hat.tolist(),
            "theta_hat": self.theta_hat.tolist(),
            "zeta_hat": self.zeta_hat.tolist(),
            "k_n": self.k_n,
            "objective": self.objective,
            "sic": self.sic,
        }
        if self.basis is not None:
            out["knot_vector"] = self.basis.knot_vector.tolist()
            out["degree"] = self.basis.degree
        if self.profile:
            out["profile"] = {
                "rho": self.profile["rho"].tolist(),
                "zeta_norm": self.profile["zeta_norm"].tolist(),
                "objective": self.profile["objective"].tolist(),
            }
        return out


# Step 1 and Step 2 --------------------------------------------------------


def step1_profile(rho, tau, design, y, solver=None, check_rank=True):
    """Quantile regression of ``y - rho D`` on the assembled design.

    Returns ``(beta, theta, zeta, objective)``.
    """
    if not (-1.0 < rho < 1.0):
        raise ParameterDomainError(f"|rho| must be below 1, got {rho}")
    fit = solve_qr(CheckLossProblem(design.X_tilde, y - rho * design.D, tau), solver, check_rank=check_rank)
    c = fit.coefficients
    bi = design.block_index
    return c[bi["X"]], c[bi["Pi"]], c[bi["E"]], fit.objective


def step2_grid_search(profiles, A=None):
    """Grid point minimizing ``zeta' A zeta``.

    ``profiles`` is a sequence of ``(rho_j, zeta_j)`` pairs. ``A`` is one
    matrix for every grid point, a list with one matrix per grid point, or
    ``None`` for the identity. Exact ties go to the smallest ``|rho|``.
    """
    profiles = list(profiles)
    if not profiles:
        raise ParameterDomainError("empty profile")
    best = None
    for j, (rho, zeta) in enumerate(profiles):
        zeta = np.asarray(zeta, dtype=float)
        Aj = A[j] if isinstance(A, (list, tuple)) else A
        val = float(zeta @ zeta) if Aj is None else float(zeta @ np.asarray(Aj) @ zeta)
        key = (val, abs(rho))
        if best is None or key < best[0]:
            best = (key, rho)
    return best[1]


def _zeta_weight(design, y_j, resid, tau, cfg):
    """Inverse plug-in covariance of the instrument coefficients at one grid point."""
    n = design.X_tilde.shape[0]
    f = kernel_density_at_zero(resid, tau, cfg.bandwidth, cfg.bandwidth_scale)
    Xt = design.X_tilde
    J = Xt.T @ (f[:, None] * Xt) / n
    S = tau * (1 - tau) * Xt.T @ Xt / n
    Jinv = np.linalg.pinv(J)
    V = (Jinv @ S @ Jinv.T)[design.block_index["E"], design.block_index["E"]] / n
    return np.linalg.pinv(V)


def fit_design(y, design, config, method="ivqr", q=0):
    """Run the grid search on an already assembled design."""
    cfg = config
    tau = cfg.tau
    grid = cfg.rho_grid.values()
    Xt = design.X_tilde
    # validates rank once for the whole grid
    CheckLossProblem(Xt, y, tau).validate(cfg.solver.rank_tol)
    dim = Xt.shape[1]
    coefs = np.empty((grid.size, dim))
    objs = np.empty(grid.size)
    weights = [] if cfg.weight_A == "inverse_zeta_cov" else None
    for j, rho in enumerate(grid):
        yj = y - rho * design.D
        fit = solve_qr(CheckLossProblem(Xt, yj, tau), cfg.solver, check_rank=False)
        coefs[j] = fit.coefficients
        objs[j] = fit.objective
        if weights is not None:
            weights.append(_zeta_weight(design, yj, fit.residuals, tau, cfg))
    zetas = coefs[:, design.block_index["E"]]
    if weights is None:
        znorm = np.einsum("ij,ij->i", zetas, zetas)
    else:
        znorm = np.array([z @ Aj @ z for z, Aj in zip(zetas, weights)])
    jhat = _argmin_tiebreak(znorm, grid)
    rho_hat = float(grid[jhat])
    c = coefs[jhat]
    bi = design.block_index
    n = y.size
    extra = 2 if cfg.sic_penalty == "fixed" else 1 + design.m_E
    return IVQREstimate(
        tau=tau,
        rho_hat=rho_hat,
        beta_hat=c[bi["X"]].copy(),
        theta_hat=c[bi["Pi"]].copy(),
        zeta_hat=c[bi["E"]].copy(),
        basis=design.basis,
        profile={"rho": grid, "zeta_norm": znorm, "objective": objs, "coefficients": coefs},
        design=design,
        y=y,
        objective=float(objs[jhat]),
        sic=sic(float(objs[jhat]), n, design.p, design.q_kn, extra=extra),
        method=method,
        q=q,
    )


def _argmin_tiebreak(values, grid):
    vmin = values.min()
    ties = np.flatnonzero(values == vmin)
    return int(ties[np.argmin(np.abs(grid[ties]))])


def fit_with_knots(dataset, config, k_n):
    basis = make_knots(dataset.U, k_n, config.degree) if dataset.q else None
    design = assemble_design(dataset, basis, config.instruments)
    return fit_design(dataset.y, design, config, q=dataset.q)


def estimate(dataset, config=None):
    """Three-step IVQR estimate; knots are chosen by SIC unless ``config.k_n`` is set."""
    from .spline import select_knots

    cfg = config or IvqrConfig()
    if dataset.q == 0:
        return fit_with_knots(dataset, cfg, 0)
    k = cfg.k_n
    if k is None:
        k, _ = select_knots(dataset, cfg.tau, cfg.knot_candidates, cfg)
    return fit_with_knots(dataset, cfg, k)


def _naive_design(dataset, basis):
    from .model import AssembledDesign
    from .spline import build_pi

    n = dataset.n
    D = dataset.W @ dataset.y
    pi = build_pi(dataset.Zstar, dataset.U, basis) if dataset.q else None
    P = pi.pi_matrix if pi is not None else np.zeros((n, 0))
    Xt = np.column_stack([D, dataset.X, P])
    p, qk = dataset.p, P.shape[1]
    bi = {"rho": slice(0, 1), "X": slice(1, 1 + p), "Pi": slice(1 + p, 1 + p + qk), "E": slice(1 + p + qk, 1 + p + qk)}
    return AssembledDesign(D=D, X_tilde=Xt, E=np.zeros((n, 0)), block_index=bi, basis=basis, pi=pi)


def _naive_fit(dataset, cfg, k):
    basis = make_knots(dataset.U, k, cfg.degree) if dataset.q else None
    design = _naive_design(dataset, basis)
    fit = solve_qr(CheckLossProblem(design.X_tilde, dataset.y, cfg.tau), cfg.solver)
    c = fit.coefficients
    bi = design.block_index
    # the lag enters as a regressor here, so the residual convention differs:
    # expose a design whose X_tilde excludes D for `residuals`
    est_design = dataclasses.replace(
        design,
        X_tilde=design.X_tilde[:, 1:],
        block_index={key: slice(s.start - 1, s.stop - 1) for key, s in bi.items() if key != "rho"},
    )
    n = dataset.n
    return IVQREstimate(
        tau=cfg.tau,
        rho_hat=float(c[0]),
        beta_hat=c[bi["X"]].copy(),
        theta_hat=c[bi["Pi"]].copy(),
        zeta_hat=np.zeros(0),
        basis=basis,
        profile={},
        design=est_design,
        y=dataset.y,
        objective=fit.objective,
        sic=sic(fit.objective, n, dataset.p, est_design.q_kn, extra=1),
        method="naive_qr",
        q=dataset.q,
    )


def estimate_naive_qr(dataset, config=None):
    """Ordinary quantile regression with ``W y`` as an exogenous regressor.

    Knots are chosen by SIC of this fit unless ``config.k_n`` is set.
    """
    from .spline import default_knot_candidates

    cfg = config or IvqrConfig()
    if dataset.q == 0:
        return _naive_fit(dataset, cfg, 0)
    if cfg.k_n is not None:
        return _naive_fit(dataset, cfg, cfg.k_n)
    cands = cfg.knot_candidates or default_knot_candidates(dataset.n)
    fits = []
    for k in sorted(set(cands)):
        if dataset.q * (k + cfg.degree + 1) + dataset.p + 2 >= dataset.n:
            continue
        fits.append(_naive_fit(dataset, cfg, k))
    if not fits:
        raise ParameterDomainError("every candidate knot count is infeasible for this sample size")
    return min(fits, key=lambda e: (e.sic, e.k_n))


def eval_varying_coef(estimate, l, u):
    """``pi(u)' theta_l`` for the ``l``-th varying coefficient (0-based)."""
    if estimate.basis is None or not (0 <= l < estimate.q):
        raise IndexError(f"varying coefficient index {l} out of range (q={estimate.q})")
    B = eval_basis(u, estimate.basis)
    return B @ estimate.theta(l)


# Inference ------------------------------------------------------------------


def hall_sheather(n, tau, alpha=0.05):
    """Hall-Sheather bandwidth on the probability scale."""
    x = norm.ppf(tau)
    return n ** (-1 / 3) * norm.ppf(1 - alpha / 2) ** (2 / 3) * (1.5 * norm.pdf(x) ** 2 / (2 * x ** 2 + 1)) ** (1 / 3)


def bofinger(n, tau):
    x = norm.ppf(tau)
    return n ** (-1 / 5) * (4.5 * norm.pdf(x) ** 4 / (2 * x ** 2 + 1) ** 2) ** (1 / 5)


def residual_bandwidth(resid, tau, rule="hall_sheather", scale=1.0):
    """Kernel bandwidth in residual units.

    The probability-scale window ``[tau - h, tau + h]`` is mapped through the
    normal quantile function and its half-width,
    ``(Phi^-1(tau + h) - Phi^-1(tau - h)) / 2``, is multiplied by a robust
    residual scale ``min(sd, IQR / 1.34)``. Using the half-width keeps the
    Gaussian kernel's standard deviation equal to the window radius; the
    full width oversmooths and biases the density at zero downward.
    """
    resid = np.asarray(resid, dtype=float)
    n = resid.size
    h = hall_sheather(n, tau) if rule == "hall_sheather" else bofinger(n, tau)
    h = min(h, 0.999 * min(tau, 1 - tau))
    spread = 0.5 * (norm.ppf(tau + h) - norm.ppf(tau - h))
    q75, q25 = np.quantile(resid, [0.75, 0.25])
    kappa = min(np.std(resid, ddof=1), (q75 - q25) / 1.34)
    if not kappa > 0:
        kappa = max(np.std(resid, ddof=1), np.mean(np.abs(resid)))
    bw = scale * spread * kappa
    if not bw > 0:
        raise ParameterDomainError("residual bandwidth is zero")
    return float(bw)


def kernel_density_at_zero(resid, tau, rule="hall_sheather", scale=1.0, bandwidth=None):
    """Per-observation Gaussian-kernel density weights ``phi(r_i / h) / h``."""
    resid = np.asarray(resid, dtype=float)
    h = residual_bandwidth(resid, tau, rule, scale) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ParameterDomainError("bandwidth must be positive")
    return norm.pdf(resid / h) / h


@dataclass
class CovarianceBundle:
    Omega: np.ndarray
    J_eta: np.ndarray
    J_rho: np.ndarray
    S: np.ndarray
    H: np.ndarray
    K: np.ndarray
    M: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    L3_per_l: list
    Lambda_beta: np.ndarray
    Lambda_rho: float
    A: np.ndarray
    bandwidth: float
    n: int

    def gamma_variance(self, estimate, l, u):
        """Asymptotic variance of ``sqrt(n) (gamma_l(u) - truth)`` along ``u``."""
        d = estimate.basis.basis_dim
        L2l = self.L2[l * d:(l + 1) * d]
        B = np.atleast_2d(eval_basis(np.asarray(u, dtype=float), estimate.basis))
        G = B @ L2l
        return np.einsum("ij,jk,ik->i", G, self.S, G)

    def to_dict(self):
        return {
            "n": self.n,
            "bandwidth": self.bandwidth,
            "Lambda_beta": self.Lambda_beta.tolist(),
            "Lambda_rho": self.Lambda_rho,
            "K": self.K.ravel().tolist(),
        }


def _inv(Mat, what):
    cond = np.linalg.cond(Mat)
    if not np.isfinite(cond) or cond > 1e14:
        raise SingularMatrixError(f"{what} is singular", cond)
    return np.linalg.inv(Mat)


def asymptotic_cov(estimate, design=None, config=None):
    """Plug-in sandwich matrices for the IVQR estimate.

    The densities in ``Omega`` are Gaussian-kernel weights of the residuals
    ``y - rho D - [X, Pi, E] eta``.
    """
    design = design or estimate.design
    cfg = config or IvqrConfig(tau=estimate.tau)
    tau = estimate.tau
    Xt = design.X_tilde
    n, dim = Xt.shape
    D = design.D
    resid = estimate.y - estimate.rho_hat * D - Xt @ estimate.coefficients
    bw = residual_bandwidth(resid, tau, cfg.bandwidth, cfg.bandwidth_scale)
    f = kernel_density_at_zero(resid, tau, bandwidth=bw)
    J_eta = Xt.T @ (f[:, None] * Xt) / n
    J_rho = (Xt.T @ (f * D) / n)[:, None]
    S = tau * (1 - tau) * (Xt.T @ Xt) / n
    Jinv = _inv(J_eta, "J_eta")
    bi = design.block_index
    Jb, Jt, Jz = Jinv[bi["X"]], Jinv[bi["Pi"]], Jinv[bi["E"]]
    mE = Jz.shape[0]
    if cfg.weight_A == "inverse_zeta_cov":
        V = (Jz @ S @ Jz.T) / n
        A = np.linalg.pinv(V)
    else:
        A = np.eye(mE)
    H = Jz.T @ A @ Jz
    JHJ = J_rho.T @ H @ J_rho
    K = _inv(JHJ, "J_rho' H J_rho") @ J_rho.T @ H
    M = np.eye(dim) - J_rho @ K
    L1 = Jb @ M
    L2 = Jt @ M
    Lambda_beta = L1 @ S @ L1.T
    Lambda_rho = float((K @ S @ K.T)[0, 0])
    L3 = []
    if estimate.basis is not None and estimate.q:
        d = estimate.basis.basis_dim
        for l in range(estimate.q):
            Pl = design.pi.pi_matrix[:, l * d:(l + 1) * d]
            L3.append(Pl @ L2[l * d:(l + 1) * d])
    return CovarianceBundle(
        Omega=f, J_eta=J_eta, J_rho=J_rho, S=S, H=H, K=K, M=M, L1=L1, L2=L2,
        L3_per_l=L3, Lambda_beta=Lambda_beta, Lambda_rho=Lambda_rho, A=A,
        bandwidth=bw, n=n,
    )


@dataclass
class IntervalSet:
    alpha: float
    z: float
    beta_lower: np.ndarray
    beta_upper: np.ndarray
    beta_se: np.ndarray
    rho_lower: float
    rho_upper: float
    u_grid: np.ndarray
    gamma_hat: list
    gamma_lower: list
    gamma_upper: list

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "z": self.z,
            "beta_lower": self.beta_lower.tolist(),
            "beta_upper": self.beta_upper.tolist(),
            "beta_se": self.beta_se.tolist(),
            "rho_interval": [self.rho_lower, self.rho_upper],
        }


def confidence_intervals(estimate, bundle, alpha=0.05, u_grid=None, rate="sqrt_n"):
    """Pointwise normal intervals for ``beta``, ``rho`` and each ``gamma_l(u)``.

    ``rate="sqrt_n"`` divides the asymptotic standard deviation by
    ``sqrt(n)``; ``rate="n"`` divides by ``n``.
    """
    if not (0.0 < alpha <= 1.0):
        raise ParameterDomainError(f"alpha must lie in (0, 1], got {alpha}")
    n = bundle.n
    denom = math.sqrt(n) if rate == "sqrt_n" else float(n)
    z = float(norm.ppf(1 - alpha / 2))
    sd_beta = np.sqrt(np.clip(np.diag(bundle.Lambda_beta), 0, None))
    se = sd_beta / denom
    rho_se = math.sqrt(max(bundle.Lambda_rho, 0.0)) / denom
    if u_grid is None:
        u_grid = np.linspace(estimate.basis.lower, estimate.basis.upper, 101) if estimate.basis is not None else np.zeros(0)
    u_grid = np.asarray(u_grid, dtype=float)
    gh, gl, gu = [], [], []
    for l in range(estimate.q):
        g = eval_varying_coef(estimate, l, u_grid)
        sd = np.sqrt(np.clip(bundle.gamma_variance(estimate, l, u_grid), 0, None)) / denom
        gh.append(g)
        gl.append(g - z * sd)
        gu.append(g + z * sd)
    return IntervalSet(
        alpha=alpha, z=z,
        beta_lower=estimate.beta_hat - z * se, beta_upper=estimate.beta_hat + z * se, beta_se=se,
        rho_lower=estimate.rho_hat - z * rho_se, rho_upper=estimate.rho_hat + z * rho_se,
        u_grid=u_grid, gamma_hat=gh, gamma_lower=gl, gamma_upper=gu,
    )

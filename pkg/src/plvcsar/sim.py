"""Simulation designs and the Monte Carlo harness.

Two designs are provided, each in a varying-coefficient form and a
constant-coefficient form:

``ex1_plvc``       homoscedastic, gamma_1(u) = 1 - 0.5 eta u, gamma_2(u) = 1 + sin(sqrt(2) pi u)
``ex2_plvc_hetero`` error scaled by (1 + 0.5 Z_1), gamma_2(u) = 0.5 u^2 - u + 1
``ex1_sar`` / ``ex2_sar_hetero``  the same with gamma_1 = gamma_2 = 1

All share U ~ U[0, 2], X ~ N(0, 1), e ~ N(0, 1) and errors centred at the
target quantile, ``eps = e - Phi^-1(tau)``.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.stats import norm

from .errors import DgpError, HarnessError, ParameterDomainError, PlvcsarError
from .model import Dataset, build_weight_matrix

log = logging.getLogger(__name__)

EXAMPLES = ("ex1_plvc", "ex2_plvc_hetero", "ex1_sar", "ex2_sar_hetero")
MADE_POINTS = 200
MADE_TRIM = 0.025

__all__ = [
    "DgpSpec",
    "EXAMPLES",
    "MonteCarloReport",
    "RejectionTable",
    "bias",
    "comparison_table",
    "confidence_band",
    "draw_components",
    "estimation_table",
    "gamma_truth",
    "generate",
    "made",
    "made_grid",
    "rmse",
    "run_model_comparison",
    "run_monte_carlo",
    "size_power_study",
    "write_csv",
    "write_json",
]


@dataclass(frozen=True)
class DgpSpec:
    example: str = "ex1_plvc"
    n: int = 100
    tau: float = 0.5
    rho: float = 0.5
    beta: float = 1.0
    eta: float = 1.0
    weight_r: float = 0.3
    seed: int = 0
    noise_scale: float = 1.0

    def __post_init__(self):
        if self.example not in EXAMPLES:
            raise ParameterDomainError(f"unknown example {self.example!r}; choose from {', '.join(EXAMPLES)}")
        if self.n < 20:
            raise ParameterDomainError(f"n must be at least 20, got {self.n}")
        if not (0.0 < self.tau < 1.0):
            raise ParameterDomainError(f"tau must lie in (0, 1), got {self.tau}")
        for name in ("rho", "beta", "eta", "weight_r", "noise_scale"):
            if not math.isfinite(getattr(self, name)):
                raise ParameterDomainError(f"{name} must be finite")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    @property
    def heteroscedastic(self):
        return self.example.startswith("ex2")

    @property
    def varying(self):
        return self.example.endswith(("plvc", "plvc_hetero"))


def gamma_truth(spec, l, u):
    """True coefficient curve ``l`` (0-based) of the design at ``u``."""
    u = np.asarray(u, dtype=float)
    if not spec.varying:
        return np.ones_like(u)
    if l == 0:
        return 1.0 - 0.5 * spec.eta * u
    if spec.heteroscedastic:
        return 0.5 * u ** 2 - u + 1.0
    return 1.0 + np.sin(math.sqrt(2.0) * math.pi * u)


@lru_cache(maxsize=16)
def _weights(n, r):
    W = build_weight_matrix(n, r)
    W.setflags(write=False)
    return W


def _factor_spatial(A, rho):
    lu = lu_factor(A, check_finite=False)
    if np.min(np.abs(np.diag(lu[0]))) < 1e-12 * max(np.abs(A).max(), 1.0):
        raise DgpError(f"I - rho W is singular for rho={rho}")
    return lu


@lru_cache(maxsize=16)
def _spatial_lu(n, r, rho):
    return _factor_spatial(np.eye(n) - rho * _weights(n, r), rho)


def draw_components(spec):
    """Covariates, errors and the non-spatial part of the response for ``spec``.

    Returns a dict with ``U, X, Z1, Z2, eps, rhs``; ``rhs`` is what
    ``(I - rho W) y`` must equal.
    """
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    n = spec.n
    U = rng.uniform(0.0, 2.0, n)
    X = rng.standard_normal(n)
    if spec.heteroscedastic:
        Z1 = rng.standard_normal(n)
        Z2 = rng.uniform(-2.0, 2.0, n)
    else:
        Z1 = rng.uniform(-2.0, 2.0, n)
        Z2 = rng.normal(1.0, 1.0, n)
    e = rng.standard_normal(n)
    eps = spec.noise_scale * (e - norm.ppf(spec.tau))
    if spec.heteroscedastic:
        eps = (1.0 + 0.5 * Z1) * eps
    rhs = X * spec.beta + Z1 * gamma_truth(spec, 0, U) + Z2 * gamma_truth(spec, 1, U) + eps
    return {"U": U, "X": X, "Z1": Z1, "Z2": Z2, "eps": eps, "rhs": rhs}


def generate(spec, W=None):
    """Draw one dataset; deterministic in ``spec.seed``.

    ``W`` overrides the default weight matrix (the draws do not depend on it).
    """
    c = draw_components(spec)
    n = spec.n
    if W is None:
        W = _weights(n, spec.weight_r)
        y = lu_solve(_spatial_lu(n, spec.weight_r, spec.rho), c["rhs"])
    else:
        y = lu_solve(_factor_spatial(np.eye(n) - spec.rho * np.asarray(W, dtype=float), spec.rho), c["rhs"])
    return Dataset(y=y, X=c["X"][:, None], Zstar=np.column_stack([c["Z1"], c["Z2"]]), U=c["U"], W=W)


# Metrics ------------------------------------------------------------------


def bias(estimates, truth):
    e = np.asarray(estimates, dtype=float)
    if e.size == 0:
        raise ParameterDomainError("no estimates")
    return float(np.mean(e - truth))


def rmse(estimates, truth):
    e = np.asarray(estimates, dtype=float)
    if e.size == 0:
        raise ParameterDomainError("no estimates")
    return float(np.sqrt(np.mean((e - truth) ** 2)))


def made_grid(lo=0.0, hi=2.0, points=MADE_POINTS, trim=MADE_TRIM):
    """Equally spaced points over the central ``1 - 2 trim`` share of ``[lo, hi]``."""
    w = hi - lo
    return np.linspace(lo + trim * w, hi - trim * w, points)


def made(gamma_hat, gamma_true, grid=None):
    """Mean absolute deviation between two curves over ``grid``.

    Either argument may be a callable or an array already evaluated on the grid.
    """
    grid = made_grid() if grid is None else np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ParameterDomainError("empty MADE grid")
    a = gamma_hat(grid) if callable(gamma_hat) else np.asarray(gamma_hat, dtype=float)
    b = gamma_true(grid) if callable(gamma_true) else np.asarray(gamma_true, dtype=float)
    return float(np.mean(np.abs(a - b)))


# Monte Carlo ----------------------------------------------------------------


@dataclass
class MonteCarloReport:
    spec: DgpSpec
    estimator: str
    fitted_model: str
    requested: int
    rejected: int
    parameters: dict
    made: dict
    draws: dict = field(repr=False, default_factory=dict)
    coverage: dict = field(default_factory=dict)
    failures: list = field(repr=False, default_factory=list)
    seconds: float = 0.0

    @property
    def replicates(self):
        return self.requested - self.rejected

    def to_dict(self):
        return {
            "spec": dataclasses.asdict(self.spec),
            "estimator": self.estimator,
            "fitted_model": self.fitted_model,
            "requested": self.requested,
            "replicates": self.replicates,
            "rejected": self.rejected,
            "parameters": self.parameters,
            "made": self.made,
            "coverage": self.coverage,
            "seconds": self.seconds,
        }


def _sar_view(dataset):
    """The same data with every varying coefficient treated as a constant."""
    return dataset.replace(
        X=np.column_stack([dataset.X, dataset.Zstar]),
        Zstar=np.zeros((dataset.n, 0)),
        x_names=(),
        z_names=(),
    )


def _replicate(job):
    """One Monte Carlo draw. Returns ``(index, record or None, error text)``."""
    from .ivqr import IvqrConfig, asymptotic_cov, confidence_intervals, estimate, estimate_naive_qr

    index, spec, estimator, fitted_model, config, coverage_alpha = job
    cfg = (config or IvqrConfig(tau=spec.tau)).replace(tau=spec.tau)
    try:
        ds = generate(spec)
        q = ds.q
        if fitted_model == "sar":
            ds = _sar_view(ds)
        fit = estimate(ds, cfg) if estimator == "ivqr" else estimate_naive_qr(ds, cfg)
        grid = made_grid()
        rec = {"rho": fit.rho_hat, "beta": float(fit.beta_hat[0]), "k_n": fit.k_n}
        for l in range(q):
            truth = gamma_truth(spec, l, grid)
            if fitted_model == "sar":
                curve = np.full_like(grid, fit.beta_hat[1 + l])
            else:
                with _quiet():
                    curve = fit.gamma(l, grid)
            rec[f"gamma{l + 1}"] = made(curve, truth)
        if coverage_alpha is not None:
            bundle = asymptotic_cov(fit, config=cfg)
            ci = confidence_intervals(fit, bundle, coverage_alpha, u_grid=np.zeros(0), rate=cfg.ci_rate)
            rec["beta_covered"] = bool(ci.beta_lower[0] <= spec.beta <= ci.beta_upper[0])
            rec["rho_covered"] = bool(ci.rho_lower <= spec.rho <= ci.rho_upper)
        return index, rec, None
    except (PlvcsarError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


@contextmanager
def _quiet():
    # curves are evaluated slightly past the knot range on small samples
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def _run_jobs(fn, jobs, workers):
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [fn(j) for j in jobs]


def _check_failures(requested, failures):
    if len(failures) > 0.05 * requested:
        raise HarnessError(
            f"{len(failures)} of {requested} replicates failed (more than 5%); first: {failures[0][1]}"
        )


def run_monte_carlo(spec, estimator="ivqr", reps=1000, config=None, fitted_model="plvc",
                    workers=None, coverage_alpha=None):
    """Repeat ``generate`` + fit ``reps`` times; replicate ``i`` uses seed ``spec.seed + i``.

    ``fitted_model="sar"`` fits constant coefficients to every covariate.
    Failed replicates are logged and dropped; more than 5% failures raise
    :class:`HarnessError`.
    """
    if reps < 1:
        raise ParameterDomainError("reps must be at least 1")
    if estimator not in ("ivqr", "naive_qr"):
        raise ParameterDomainError(f"unknown estimator {estimator!r}")
    if fitted_model not in ("plvc", "sar"):
        raise ParameterDomainError(f"unknown fitted model {fitted_model!r}")
    t0 = time.perf_counter()
    jobs = [(i, spec.replace(seed=spec.seed + i), estimator, fitted_model, config, coverage_alpha) for i in range(reps)]
    results = sorted(_run_jobs(_replicate, jobs, workers), key=lambda r: r[0])
    failures = [(i, err) for i, rec, err in results if rec is None]
    for i, err in failures:
        log.warning("replicate %d failed: %s", i, err)
    _check_failures(reps, failures)
    recs = [rec for _, rec, _ in results if rec is not None]
    draws = {"rho": np.array([r["rho"] for r in recs]), "beta": np.array([r["beta"] for r in recs])}
    params = {
        "rho": {"bias": bias(draws["rho"], spec.rho), "rmse": rmse(draws["rho"], spec.rho)},
        "beta": {"bias": bias(draws["beta"], spec.beta), "rmse": rmse(draws["beta"], spec.beta)},
    }
    made_vals = {}
    for key in sorted(k for k in recs[0] if k.startswith("gamma")):
        draws[key] = np.array([r[key] for r in recs])
        made_vals[key] = float(draws[key].mean())
    cov = {}
    if coverage_alpha is not None:
        for key in ("beta", "rho"):
            cov[key] = float(np.mean([r[f"{key}_covered"] for r in recs]))
    return MonteCarloReport(
        spec=spec,
        estimator=estimator,
        fitted_model=fitted_model,
        requested=reps,
        rejected=len(failures),
        parameters=params,
        made=made_vals,
        draws=draws,
        coverage=cov,
        failures=failures,
        seconds=time.perf_counter() - t0,
    )


def run_model_comparison(spec_pair, reps=1000, config=None, workers=None):
    """Fit varying- and constant-coefficient models to data from each design in ``spec_pair``.

    ``spec_pair`` is ``(varying design, constant design)``. Returns
    ``{(underlying, fitted): MonteCarloReport}`` with labels ``"plvc"`` / ``"sar"``.
    """
    plvc_spec, sar_spec = spec_pair
    if not plvc_spec.varying or sar_spec.varying:
        raise ParameterDomainError("spec_pair must be (varying-coefficient design, constant-coefficient design)")
    out = {}
    for label, spec in (("plvc", plvc_spec), ("sar", sar_spec)):
        for fitted in ("plvc", "sar"):
            out[(label, fitted)] = run_monte_carlo(spec, "ivqr", reps, config, fitted, workers)
    return out


def _test_replicate(job):
    from .ivqr import IvqrConfig
    from .spline import make_knots, select_knots

    index, spec, test, null_fits, config, alpha, test_options = job
    cfg = (config or IvqrConfig(tau=spec.tau)).replace(tau=spec.tau)
    try:
        ds = generate(spec)
        k = cfg.k_n if cfg.k_n is not None else select_knots(ds, spec.tau, cfg.knot_candidates, cfg)[0]
        basis = make_knots(ds.U, k, cfg.degree)
        out = {}
        for nf in null_fits:
            # density floors on far outliers are routine here
            with _quiet():
                res = _run_test(ds, basis, test, spec.tau, cfg, nf, test_options)
            out[nf] = (res.statistic, res.p_value < alpha)
        return index, out, None
    except (PlvcsarError, np.linalg.LinAlgError) as exc:
        return index, None, f"{type(exc).__name__}: {exc}"


def _run_test(ds, basis, test, tau, cfg, null_fit, options):
    from .ranktest import rs_beta_test, rs_constancy_test

    if test == "beta":
        return rs_beta_test(ds, basis, [0], tau, cfg, null_fit=null_fit, **options)
    return rs_constancy_test(ds, basis, [0], tau, cfg, null_fit=null_fit, **options)


@dataclass
class RejectionTable:
    test: str
    dial: str
    dial_values: list
    null_fits: tuple
    rates: dict
    statistics: dict = field(repr=False, default_factory=dict)
    rejected_replicates: dict = field(default_factory=dict)

    def rows(self):
        header = [self.dial] + [f"{nf}" for nf in self.null_fits]
        body = [[v] + [self.rates[v][nf] for nf in self.null_fits] for v in self.dial_values]
        return header, body

    def to_dict(self):
        return {
            "test": self.test,
            "dial": self.dial,
            "rates": {str(v): self.rates[v] for v in self.dial_values},
            "rejected_replicates": {str(v): n for v, n in self.rejected_replicates.items()},
        }


def size_power_study(test, dial_values, spec, reps=1000, config=None, null_fits=("naive_qr", "ivqr"),
                     alpha=0.05, workers=None, test_options=None):
    """Rejection rate at level ``alpha`` for each dial value.

    ``test="beta"`` sets ``spec.beta`` to the dial value and tests ``beta = 0``;
    ``test="constancy"`` sets ``spec.eta`` and tests that ``gamma_1`` is constant.
    """
    if test not in ("beta", "constancy"):
        raise ParameterDomainError(f"unknown test {test!r}")
    dial_values = [float(v) for v in dial_values]
    if 0.0 not in dial_values:
        raise ParameterDomainError("dial values must include 0 (the size point)")
    if test == "constancy" and not spec.varying:
        raise ParameterDomainError("the constancy study needs a varying-coefficient design")
    dial = "beta" if test == "beta" else "eta"
    rates, stats, rejected = {}, {}, {}
    for v in dial_values:
        base = spec.replace(**{dial: v})
        jobs = [(i, base.replace(seed=base.seed + i), test, tuple(null_fits), config, alpha, test_options or {})
                for i in range(reps)]
        results = sorted(_run_jobs(_test_replicate, jobs, workers), key=lambda r: r[0])
        failures = [(i, err) for i, rec, err in results if rec is None]
        for i, err in failures:
            log.warning("%s=%s replicate %d failed: %s", dial, v, i, err)
        _check_failures(reps, failures)
        recs = [rec for _, rec, _ in results if rec is not None]
        rates[v] = {nf: float(np.mean([r[nf][1] for r in recs])) for nf in null_fits}
        stats[v] = {nf: np.array([r[nf][0] for r in recs]) for nf in null_fits}
        rejected[v] = len(failures)
    return RejectionTable(test, dial, dial_values, tuple(null_fits), rates, stats, rejected)


def confidence_band(spec, config=None, alpha=0.05, u_grid=None):
    """Truth, estimate and pointwise band of every varying coefficient on one draw.

    Returns ``{"u": grid, "gamma1": {"truth", "estimate", "lower", "upper"}, ...}``.
    """
    from .ivqr import IvqrConfig, asymptotic_cov, confidence_intervals, estimate

    cfg = (config or IvqrConfig(tau=spec.tau)).replace(tau=spec.tau)
    ds = generate(spec)
    fit = estimate(ds, cfg)
    grid = made_grid() if u_grid is None else np.asarray(u_grid, dtype=float)
    bundle = asymptotic_cov(fit, config=cfg)
    with _quiet():
        ci = confidence_intervals(fit, bundle, alpha, grid, cfg.ci_rate)
    out = {"u": grid}
    for l in range(ds.q):
        out[f"gamma{l + 1}"] = {
            "truth": gamma_truth(spec, l, grid),
            "estimate": ci.gamma_hat[l],
            "lower": ci.gamma_lower[l],
            "upper": ci.gamma_upper[l],
        }
    return out


# Emitters -------------------------------------------------------------------


def estimation_table(reports):
    """Rows ``n, parameter, metric`` by columns ``estimator@tau``.

    ``reports`` maps ``(n, tau, estimator)`` to a report.
    """
    ns = sorted({k[0] for k in reports})
    cols = sorted({(k[2], k[1]) for k in reports}, key=lambda c: (c[0] != "naive_qr", c[1]))
    header = ["n", "parameter", "metric"] + [f"{est}@{tau:g}" for est, tau in cols]
    rows = []
    first = next(iter(reports.values()))
    params = list(first.parameters) + list(first.made)
    for n in ns:
        for p in params:
            metrics = ("bias", "rmse") if p in first.parameters else ("made",)
            for m in metrics:
                row = [n, p, m]
                for est, tau in cols:
                    r = reports.get((n, tau, est))
                    if r is None:
                        row.append("")
                    elif m == "made":
                        row.append(round(r.made[p], 4))
                    else:
                        row.append(round(r.parameters[p][m], 4))
                rows.append(row)
    return header, rows


def comparison_table(results):
    """Rows per (underlying, fitted) pair with bias and RMSE of rho and beta."""
    header = ["underlying", "fitted", "rho_bias", "rho_rmse", "beta_bias", "beta_rmse"]
    rows = []
    for (under, fitted), r in sorted(results.items()):
        rows.append([under, fitted] + [round(r.parameters[p][m], 4) for p in ("rho", "beta") for m in ("bias", "rmse")])
    return header, rows


def write_csv(header, rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=_jsonable)

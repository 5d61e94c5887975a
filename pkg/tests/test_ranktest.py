import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2

from plvcsar.errors import DegenerateDesignError, ParameterDomainError, SingularMatrixError
from plvcsar.ivqr import IvqrConfig, RhoGrid
from plvcsar.qr import psi
from plvcsar.ranktest import (
    SparsityWeights,
    _weighted_projection,
    estimate_sparsity,
    rank_score_statistic,
    reference_pvalue,
    rs_beta_test,
    rs_constancy_test,
)
from plvcsar.sim import DgpSpec, generate
from plvcsar.spline import make_knots

CFG = IvqrConfig(rho_grid=RhoGrid(-0.9, 0.9, 0.05))


def test_sparsity_at_zero_residuals():
    w = estimate_sparsity(np.zeros(10), 0.5, bandwidth=0.25)
    np.testing.assert_allclose(w.B, 1 / (0.25 * math.sqrt(2 * math.pi)))


def test_sparsity_scaling(rng):
    r = rng.uniform(-1, 1, 50)
    a = estimate_sparsity(r, 0.5, bandwidth=0.3)
    b = estimate_sparsity(4 * r, 0.5, bandwidth=1.2)
    np.testing.assert_allclose(b.B, a.B / 4)


def test_sparsity_gaussian_convolution(rng):
    h = 0.5
    with pytest.warns(RuntimeWarning, match="floored"):
        w = estimate_sparsity(rng.standard_normal(20_000), 0.5, bandwidth=h)
    target = 1 / math.sqrt(2 * math.pi * (1 + h * h))
    assert abs(w.B.mean() - target) < 0.15 * target


def test_sparsity_modes(rng):
    r = rng.standard_normal(40)
    w = estimate_sparsity(r, 0.5, mode="homoscedastic")
    assert np.ptp(w.B) == 0
    with pytest.warns(RuntimeWarning, match="floored"):
        estimate_sparsity(np.r_[np.zeros(10), 1e3], 0.5, bandwidth=1.0)
    with pytest.raises(ParameterDomainError):
        estimate_sparsity(r, 0.5, mode="other")


def test_reference_pvalues():
    assert reference_pvalue(3.8415, 1) == pytest.approx(0.05, abs=1e-5)
    assert reference_pvalue(0.0, 4) == 1.0
    assert reference_pvalue(1.95996, 1, "normal_approx") == pytest.approx(0.025, abs=1e-6)
    with pytest.raises(ParameterDomainError):
        reference_pvalue(-1.0, 1)
    with pytest.raises(ParameterDomainError):
        reference_pvalue(1.0, 1, "t")


@given(st.floats(0, 50), st.integers(1, 10))
def test_pvalue_consistency(stat, df):
    assert abs(reference_pvalue(stat, df) - chi2.sf(stat, df)) < 1e-12


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1), st.integers(8, 60), st.integers(1, 5))
def test_projection_idempotent(seed, n, k):
    rng = np.random.default_rng(seed)
    k = min(k, n - 1)
    X = rng.standard_normal((n, k))
    sb = np.sqrt(rng.uniform(0.1, 2.0, n))
    P = _weighted_projection(X, sb)
    assert np.linalg.norm(P @ P - P) < 1e-8
    np.testing.assert_allclose(P, P.T, atol=1e-12)
    Xw = sb[:, None] * X
    ref = Xw @ np.linalg.solve(X.T @ (sb[:, None] ** 2 * X), Xw.T)
    np.testing.assert_allclose(P, ref, atol=1e-8)


def test_projection_rank_deficient(rng):
    X = rng.standard_normal((10, 1))
    with pytest.raises(DegenerateDesignError):
        _weighted_projection(np.column_stack([X, 2 * X]), np.ones(10))


def _statistic_case(rng, n=60):
    Xs = np.column_stack([np.ones(n), rng.standard_normal((n, 2))])
    X1 = rng.standard_normal((n, 2))
    r = rng.standard_normal(n)
    w = SparsityWeights(B=rng.uniform(0.2, 1.0, n), bandwidth=0.4)
    return Xs, X1, r, w


def test_statistic_formula(rng):
    Xs, X1, r, w = _statistic_case(rng)
    n = r.size
    stat, S, Q, G = rank_score_statistic(X1, Xs, r, 0.5, w)
    P = _weighted_projection(Xs, w.sqrt_B)
    np.testing.assert_allclose(G, X1 - P @ X1, atol=1e-12)
    s = psi(r, 0.5)
    S_ref = sum(G[i] * s[i] for i in range(n)) / math.sqrt(n)
    Q_ref = sum(np.outer(G[i], G[i]) * s[i] ** 2 for i in range(n)) / n
    np.testing.assert_allclose(S, S_ref, atol=1e-12)
    np.testing.assert_allclose(Q, Q_ref, atol=1e-12)
    assert stat == pytest.approx(S_ref @ np.linalg.solve(Q_ref, S_ref))
    assert stat >= 0
    sw, *_ = rank_score_statistic(X1, Xs, r, 0.5, w, weighted=True)
    assert sw >= 0


@given(st.floats(0.01, 100))
@settings(max_examples=25)
def test_statistic_scale_invariance(c):
    rng = np.random.default_rng(7)
    Xs, X1, r, w = _statistic_case(rng)
    a = rank_score_statistic(X1, Xs, r, 0.3, w)[0]
    b = rank_score_statistic(c * X1, Xs, r, 0.3, w)[0]
    assert b == pytest.approx(a, rel=1e-8, abs=1e-8)


def test_statistic_zero_tested_block(rng):
    Xs, X1, r, w = _statistic_case(rng)
    with pytest.raises(SingularMatrixError):
        rank_score_statistic(np.zeros((r.size, 1)), Xs, r, 0.5, w)
    # a retained column is annihilated only once it carries the density weights
    with pytest.raises(SingularMatrixError):
        rank_score_statistic(Xs[:, 1:2], Xs, r, 0.5, w, weighted=True)


def test_statistic_ill_conditioned_warns(rng):
    Xs, X1, r, w = _statistic_case(rng)
    T = np.column_stack([X1[:, 0], X1[:, 0] + 1e-9 * X1[:, 1]])
    with pytest.warns(RuntimeWarning, match="pseudo-inverse"):
        rank_score_statistic(T, Xs, r, 0.5, w)


@pytest.fixture(scope="module")
def draw():
    return generate(DgpSpec(n=120, seed=31, beta=0.0))


def test_beta_test_result(draw):
    basis = make_knots(draw.U, 1)
    res = rs_beta_test(draw, basis, [0], 0.5, CFG)
    assert res.df == 1 and res.reference == "chi_square"
    assert res.p_value == pytest.approx(chi2.sf(res.statistic, 1), abs=1e-12)
    assert set(res.reject_at) == {0.01, 0.05, 0.1}
    naive = rs_beta_test(draw, basis, [0], 0.5, CFG, null_fit="naive_qr")
    assert naive.statistic >= 0
    with pytest.raises(ParameterDomainError):
        rs_beta_test(draw, basis, [3], 0.5, CFG)
    with pytest.raises(ParameterDomainError):
        rs_beta_test(draw, basis, [0], 0.5, CFG, null_fit="ols")


def test_beta_test_detects_strong_effect():
    ds = generate(DgpSpec(n=150, seed=3, beta=1.5))
    res = rs_beta_test(ds, make_knots(ds.U, 1), [0], 0.5, CFG)
    assert res.p_value < 1e-4


@pytest.mark.parametrize("directions,df", [("spline", 4), ("linear", 1), ("literal", 1)])
def test_constancy_directions(draw, directions, df):
    basis = make_knots(draw.U, 1)
    res = rs_constancy_test(draw, basis, [0], 0.5, CFG, directions=directions)
    assert res.df == df and res.reference == "chi_square"
    assert res.statistic >= 0
    assert res.diagnostics["gamma_constant"].shape == (1,)
    assert np.isfinite(res.diagnostics["step2_objective"])


def test_constancy_normal_mode(draw):
    basis = make_knots(draw.U, 3)
    assert 3 > draw.n ** 0.2
    res = rs_constancy_test(draw, basis, [0], 0.5, CFG)
    assert res.reference == "normal_approx"
    rs = res.diagnostics["rank_score"]
    assert res.statistic == pytest.approx((rs - res.df) / math.sqrt(2 * res.df))


def test_constancy_detects_strong_slope():
    ds = generate(DgpSpec(n=200, seed=5, eta=2.0))
    res = rs_constancy_test(ds, make_knots(ds.U, 1), [0], 0.5, CFG)
    assert res.p_value < 1e-3


def test_constancy_zero_column(draw):
    ds = draw.replace(Zstar=np.column_stack([np.zeros(draw.n), draw.Zstar[:, 1]]))
    with pytest.raises(SingularMatrixError):
        rs_constancy_test(ds, make_knots(ds.U, 1), [0], 0.5, CFG)


def test_constancy_bad_options(draw):
    basis = make_knots(draw.U, 1)
    with pytest.raises(ParameterDomainError):
        rs_constancy_test(draw, basis, [0], 0.5, CFG, directions="cubic")
    with pytest.raises(ParameterDomainError):
        rs_constancy_test(draw, None, [0], 0.5, CFG)
    with pytest.raises(ParameterDomainError):
        rs_constancy_test(draw, basis, [0], 0.5, CFG, reference="f")


def test_tests_are_deterministic(draw):
    basis = make_knots(draw.U, 1)
    a = rs_constancy_test(draw, basis, [0], 0.5, CFG)
    b = rs_constancy_test(draw, basis, [0], 0.5, CFG)
    assert a.statistic == b.statistic

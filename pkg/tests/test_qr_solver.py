import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from plvcsar.errors import DegenerateDesignError, DimensionError, ParameterDomainError, SolverError
from plvcsar.qr import CheckLossProblem, SolverConfig, check_loss, check_loss_sum, psi, solve_qr
from plvcsar.qr import _kernel
from plvcsar.qr.oracle import vertex_enumeration


def _random_instance(rng, n, m):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, m - 1))])
    y = X @ rng.standard_normal(m) + rng.standard_normal(n)
    return X, y


@pytest.mark.parametrize("u,tau,expected", [(1.0, 0.5, 0.5), (-2.0, 0.25, 1.5), (0.0, 0.9, 0.0)])
def test_check_loss_values(u, tau, expected):
    assert check_loss(u, tau) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("u,tau,expected", [(0.3, 0.5, 0.5), (-0.3, 0.5, -0.5), (-1.0, 0.25, -0.75), (0.0, 0.3, 0.3)])
def test_psi_values(u, tau, expected):
    assert psi(u, tau) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_tau_domain(tau):
    with pytest.raises(ParameterDomainError):
        check_loss(1.0, tau)
    with pytest.raises(ParameterDomainError):
        psi(1.0, tau)
    with pytest.raises(ParameterDomainError):
        solve_qr(CheckLossProblem(np.ones((3, 1)), np.arange(3.0), tau))


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(0.01, 0.99))
def test_check_loss_nonnegative_and_zero_only_at_zero(u, tau):
    v = check_loss(u, tau)
    assert v >= 0
    assert (v == 0) == (u == 0)


def test_median_of_three():
    fit = solve_qr(CheckLossProblem(np.ones((3, 1)), np.array([1.0, 2.0, 3.0]), 0.5))
    assert fit.coefficients[0] == pytest.approx(2.0, abs=1e-9)


def test_lower_quartile_of_four_is_a_flat_face():
    # every value in [1, 2] attains the minimum 1.5; compare objectives only
    y = np.array([1.0, 2.0, 3.0, 4.0])
    fit = solve_qr(CheckLossProblem(np.ones((4, 1)), y, 0.25))
    scan = min(check_loss_sum(y - c, 0.25) for c in y)
    assert fit.objective == pytest.approx(scan, abs=1e-9)
    assert scan == pytest.approx(1.5)
    assert 1.0 - 1e-9 <= fit.coefficients[0] <= 2.0 + 1e-9


def test_two_column_matches_pair_enumeration(rng):
    X = np.column_stack([np.ones(6), rng.standard_normal(6)])
    y = rng.standard_normal(6)
    best = np.inf
    for i, j in itertools.combinations(range(6), 2):
        A = X[[i, j]]
        if abs(np.linalg.det(A)) < 1e-12:
            continue
        b = np.linalg.solve(A, y[[i, j]])
        best = min(best, check_loss_sum(y - X @ b, 0.5))
    fit = solve_qr(CheckLossProblem(X, y, 0.5))
    assert fit.objective == pytest.approx(best, abs=1e-8)


def test_oracle_equivalence_small_instances(rng):
    for _ in range(150):
        n = int(rng.integers(4, 13))
        m = int(rng.integers(1, 4))
        tau = float(rng.choice([0.25, 0.5, 0.75]))
        X, y = _random_instance(rng, n, m)
        _, best = vertex_enumeration(X, y, tau)
        fit = solve_qr(CheckLossProblem(X, y, tau))
        assert abs(fit.objective - best) <= 1e-8 * max(1.0, best)


def test_fit_record_consistency(rng):
    X, y = _random_instance(rng, 60, 4)
    fit = solve_qr(CheckLossProblem(X, y, 0.3))
    np.testing.assert_allclose(fit.residuals, y - X @ fit.coefficients, atol=1e-12)
    assert fit.objective == pytest.approx(check_loss_sum(fit.residuals, 0.3), rel=1e-12)
    assert fit.objective >= 0
    if not fit.degenerate:
        assert fit.n_interpolated >= X.shape[1]


def test_rank_deficient_design_raises():
    X = np.column_stack([np.ones(5), np.arange(5.0), 2 * np.arange(5.0)])
    with pytest.raises(DegenerateDesignError):
        solve_qr(CheckLossProblem(X, np.arange(5.0), 0.5))


def test_shape_errors():
    with pytest.raises(DimensionError):
        solve_qr(CheckLossProblem(np.ones((4, 1)), np.ones(3), 0.5))
    with pytest.raises(DegenerateDesignError):
        solve_qr(CheckLossProblem(np.ones((2, 3)), np.ones(2), 0.5))


def test_iteration_cap_without_certificate_raises(monkeypatch, rng):
    X, y = _random_instance(rng, 40, 3)

    def stalled(X, y, tau, eps, max_iter):
        return np.full(X.shape[1], np.nan), max_iter, 1.0, 1

    monkeypatch.setitem(_kernel.KERNELS, "python", stalled)
    with pytest.raises(SolverError) as err:
        solve_qr(CheckLossProblem(X, y, 0.5), SolverConfig(backend="python"))
    assert err.value.diagnostics["status"] == 1
    assert "duality_gap" in err.value.diagnostics


@pytest.mark.skipif("cython" not in _kernel.KERNELS, reason="compiled kernel not built")
def test_compiled_and_numpy_kernels_agree(rng):
    for n, m in [(30, 2), (100, 8), (250, 15)]:
        X, y = _random_instance(rng, n, m)
        for tau in (0.1, 0.5, 0.9):
            a = _kernel.KERNELS["python"](X, y, tau, 1e-8, 200)
            b = _kernel.KERNELS["cython"](X, y, tau, 1e-8, 200)
            assert a[3] == b[3] == 0
            assert a[1] == b[1]
            np.testing.assert_allclose(a[0], b[0], rtol=1e-9, atol=1e-9)


def test_backends_give_same_fit(rng):
    X, y = _random_instance(rng, 80, 5)
    fits = [solve_qr(CheckLossProblem(X, y, 0.4), SolverConfig(backend=b)) for b in _kernel.KERNELS]
    for f in fits[1:]:
        assert f.objective == pytest.approx(fits[0].objective, rel=1e-10)


def test_read_only_inputs_accepted(rng):
    X, y = _random_instance(rng, 30, 3)
    X.setflags(write=False)
    y.setflags(write=False)
    assert solve_qr(CheckLossProblem(X, y, 0.5)).objective > 0


@st.composite
def instances(draw):
    seed = draw(st.integers(0, 2**31 - 1))
    n = draw(st.integers(8, 40))
    m = draw(st.integers(1, 4))
    tau = draw(st.sampled_from([0.2, 0.5, 0.8]))
    rng = np.random.default_rng(seed)
    X, y = _random_instance(rng, n, m)
    return X, y, tau, rng


@given(instances())
def test_single_coordinate_perturbation_never_improves(inst):
    X, y, tau, _ = inst
    fit = solve_qr(CheckLossProblem(X, y, tau))
    scale = 1.0 + np.max(np.abs(fit.coefficients))
    delta = 1e-6 * scale
    for j in range(X.shape[1]):
        for sgn in (1.0, -1.0):
            b = fit.coefficients.copy()
            b[j] += sgn * delta
            assert check_loss_sum(y - X @ b, tau) >= fit.objective - 1e-9


@given(instances(), st.floats(0.1, 50.0))
def test_scale_equivariance(inst, c):
    X, y, tau, _ = inst
    a = solve_qr(CheckLossProblem(X, y, tau))
    b = solve_qr(CheckLossProblem(X, c * y, tau))
    assert b.objective == pytest.approx(c * a.objective, rel=1e-10, abs=1e-10)
    if not (a.degenerate or b.degenerate):
        np.testing.assert_allclose(b.coefficients, c * a.coefficients, rtol=1e-8, atol=1e-8 * c)


@given(instances())
def test_reparameterization_keeps_fitted_values(inst):
    X, y, tau, rng = inst
    m = X.shape[1]
    T = rng.standard_normal((m, m)) + 3 * np.eye(m)
    a = solve_qr(CheckLossProblem(X, y, tau))
    b = solve_qr(CheckLossProblem(X @ T, y, tau))
    assert b.objective == pytest.approx(a.objective, rel=1e-9, abs=1e-9)
    if not (a.degenerate or b.degenerate):
        np.testing.assert_allclose(X @ T @ b.coefficients, X @ a.coefficients, atol=1e-8)


@given(instances())
def test_matches_linear_program(inst):
    from scipy.optimize import linprog

    X, y, tau, _ = inst
    n, m = X.shape
    c = np.concatenate([np.zeros(m), tau * np.ones(n), (1 - tau) * np.ones(n)])
    A = np.hstack([X, np.eye(n), -np.eye(n)])
    lp = linprog(c, A_eq=A, b_eq=y, bounds=[(None, None)] * m + [(0, None)] * (2 * n), method="highs")
    fit = solve_qr(CheckLossProblem(X, y, tau))
    assert fit.objective == pytest.approx(lp.fun, rel=1e-8, abs=1e-8)

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import kstest

import plvcsar.ivqr as ivqr_mod
from plvcsar.errors import DgpError, HarnessError, ParameterDomainError, SolverError
from plvcsar.ivqr import IvqrConfig, RhoGrid
from plvcsar.model import build_weight_matrix
from plvcsar.sim import (
    DgpSpec,
    bias,
    comparison_table,
    confidence_band,
    draw_components,
    estimation_table,
    gamma_truth,
    generate,
    made,
    made_grid,
    rmse,
    run_model_comparison,
    run_monte_carlo,
    size_power_study,
    write_csv,
    write_json,
)

FAST = IvqrConfig(rho_grid=RhoGrid(-0.9, 0.9, 0.05), k_n=1)


def test_metric_examples():
    t = 0.5
    assert bias([t, t], t) == 0 and rmse([t, t], t) == 0
    assert bias([t + 1] * 3, t) == pytest.approx(1) and rmse([t + 1] * 3, t) == pytest.approx(1)
    assert bias([t + 1, t - 1], t) == pytest.approx(0) and rmse([t + 1, t - 1], t) == pytest.approx(1)
    g = made_grid()
    assert made(np.sin, np.sin, g) == 0
    assert made(lambda u: u + 0.2, lambda u: u) == pytest.approx(0.2)
    with pytest.raises(ParameterDomainError):
        bias([], 0)
    with pytest.raises(ParameterDomainError):
        made(np.sin, np.sin, [])


def test_made_grid_shape():
    g = made_grid()
    assert g.size == 200 and g[0] == pytest.approx(0.05) and g[-1] == pytest.approx(1.95)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=50), st.floats(-5, 5))
def test_rmse_decomposition(est, truth):
    e = np.array(est)
    lhs = rmse(e, truth) ** 2
    rhs = bias(e, truth) ** 2 + np.var(e)
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)
    assert rmse(e, truth) >= abs(bias(e, truth)) - 1e-12


def test_single_replicate_rmse_is_abs_bias():
    assert rmse([0.7], 0.5) == pytest.approx(abs(bias([0.7], 0.5)))


def test_spec_validation():
    with pytest.raises(ParameterDomainError):
        DgpSpec(n=10)
    with pytest.raises(ParameterDomainError):
        DgpSpec(example="ex3")
    with pytest.raises(ParameterDomainError):
        DgpSpec(beta=math.nan)


def test_truth_curves():
    spec = DgpSpec(eta=0.5)
    u = np.array([0.0, 1.0, 2.0])
    np.testing.assert_allclose(gamma_truth(spec, 0, u), [1.0, 0.75, 0.5])
    np.testing.assert_allclose(gamma_truth(spec, 1, u), 1 + np.sin(math.sqrt(2) * math.pi * u))
    np.testing.assert_allclose(gamma_truth(DgpSpec(example="ex2_plvc_hetero"), 1, u), [1.0, 0.5, 1.0])
    np.testing.assert_array_equal(gamma_truth(DgpSpec(example="ex1_sar"), 0, u), 1.0)


def test_generation_is_deterministic():
    a, b = generate(DgpSpec(seed=77)), generate(DgpSpec(seed=77))
    for name in ("y", "X", "Zstar", "U", "W"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.y.tobytes() != generate(DgpSpec(seed=78)).y.tobytes()


@settings(max_examples=20)
@given(st.sampled_from(["ex1_plvc", "ex2_plvc_hetero", "ex1_sar", "ex2_sar_hetero"]),
       st.floats(-0.9, 0.9), st.integers(0, 2**63 - 1))
def test_spatial_solve(example, rho, seed):
    spec = DgpSpec(example=example, n=60, rho=rho, seed=seed)
    ds = generate(spec)
    rhs = draw_components(spec)["rhs"]
    assert np.linalg.norm(ds.y - rho * ds.W @ ds.y - rhs) < 1e-10


def test_no_spatial_dependence_at_zero_rho():
    spec = DgpSpec(n=40, rho=0.0, seed=5)
    a = generate(spec)
    b = generate(spec, W=build_weight_matrix(40, 0.8))
    np.testing.assert_array_equal(a.y, b.y)


def test_singular_spatial_system():
    with pytest.raises(DgpError):
        generate(DgpSpec(n=30, rho=1.0, seed=1))
    with pytest.raises(DgpError):
        generate(DgpSpec(n=30, rho=1.0, seed=1), W=build_weight_matrix(30, 0.5))


def test_uniform_marginal():
    c = draw_components(DgpSpec(n=10_000, seed=3))
    assert kstest(c["U"], "uniform", args=(0, 2)).pvalue > 0.01


@pytest.mark.parametrize("tau,n", [(0.25, 100_000), (0.5, 1_000_000), (0.75, 1_000_000)])
def test_error_centred_at_target_quantile(tau, n):
    eps = draw_components(DgpSpec(n=n, tau=tau, seed=11))["eps"]
    assert abs(np.quantile(eps, tau)) < 0.01


def test_heteroscedastic_error_quantile():
    c = draw_components(DgpSpec(example="ex2_plvc_hetero", n=100_000, tau=0.25, seed=2))
    # (1 + 0.5 Z1) is positive for almost every draw, so the 25th percentile stays at 0
    pos = 1 + 0.5 * c["Z1"] > 0
    assert abs(np.quantile(c["eps"][pos], 0.25)) < 0.01


def test_noiseless_monte_carlo_recovers_truth():
    spec = DgpSpec(example="ex1_sar", n=60, seed=0, noise_scale=0.0)
    rep = run_monte_carlo(spec, "ivqr", 3, IvqrConfig(k_n=0))
    assert abs(rep.parameters["rho"]["bias"]) <= 0.01
    assert rep.replicates == 3 and rep.rejected == 0


def test_monte_carlo_report_and_determinism():
    spec = DgpSpec(n=60, seed=100)
    a = run_monte_carlo(spec, "ivqr", 4, FAST, coverage_alpha=0.05)
    b = run_monte_carlo(spec, "ivqr", 4, FAST, coverage_alpha=0.05)
    np.testing.assert_array_equal(a.draws["rho"], b.draws["rho"])
    assert set(a.made) == {"gamma1", "gamma2"}
    assert set(a.coverage) == {"beta", "rho"}
    for p in ("rho", "beta"):
        assert a.parameters[p]["rmse"] >= abs(a.parameters[p]["bias"])
    assert a.to_dict()["replicates"] == 4
    one = run_monte_carlo(spec, "naive_qr", 1, FAST)
    assert one.parameters["rho"]["rmse"] == pytest.approx(abs(one.parameters["rho"]["bias"]))


def test_parallel_matches_serial():
    spec = DgpSpec(n=60, seed=7)
    a = run_monte_carlo(spec, "ivqr", 4, FAST)
    b = run_monte_carlo(spec, "ivqr", 4, FAST, workers=2)
    np.testing.assert_array_equal(a.draws["rho"], b.draws["rho"])


def test_failure_harness(monkeypatch):
    real = ivqr_mod.estimate
    calls = {"n": 0}

    def flaky(ds, cfg):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise SolverError("stalled", {})
        return real(ds, cfg)

    monkeypatch.setattr(ivqr_mod, "estimate", flaky)
    with pytest.raises(HarnessError):
        run_monte_carlo(DgpSpec(n=40), "ivqr", 4, FAST)

    calls["n"] = 0

    def rare(ds, cfg):
        calls["n"] += 1
        if calls["n"] == 1:
            raise SolverError("stalled", {})
        return real(ds, cfg)

    monkeypatch.setattr(ivqr_mod, "estimate", rare)
    rep = run_monte_carlo(DgpSpec(n=40), "ivqr", 20, FAST)
    assert rep.rejected == 1 and rep.replicates == 19
    assert rep.draws["rho"].size == 19


def test_bad_harness_arguments():
    with pytest.raises(ParameterDomainError):
        run_monte_carlo(DgpSpec(), "ivqr", 0)
    with pytest.raises(ParameterDomainError):
        run_monte_carlo(DgpSpec(), "ols", 1)
    with pytest.raises(ParameterDomainError):
        size_power_study("beta", [0.5], DgpSpec(), 1)
    with pytest.raises(ParameterDomainError):
        size_power_study("constancy", [0.0], DgpSpec(example="ex1_sar"), 1)


def test_sar_fit_view():
    rep = run_monte_carlo(DgpSpec(n=60, seed=3), "ivqr", 2, FAST, fitted_model="sar")
    assert rep.fitted_model == "sar" and set(rep.made) == {"gamma1", "gamma2"}


def test_power_grows_with_dial():
    cfg = IvqrConfig(rho_grid=RhoGrid(-0.9, 0.9, 0.05), k_n=1)
    table = size_power_study("beta", [0.0, 0.25, 0.5], DgpSpec(n=100, seed=9000), reps=60, config=cfg)
    rates = [table.rates[v]["ivqr"] for v in (0.0, 0.25, 0.5)]
    assert rates[0] <= rates[1] <= rates[2]
    assert rates[2] > 0.6
    header, body = table.rows()
    assert header == ["beta", "naive_qr", "ivqr"] and len(body) == 3
    assert table.statistics[0.0]["ivqr"].size == 60


def test_model_comparison_prefers_matching_fit():
    cfg = IvqrConfig(rho_grid=RhoGrid(-0.9, 0.9, 0.02), k_n=1)
    res = run_model_comparison((DgpSpec(n=100, seed=4000), DgpSpec(example="ex1_sar", n=100, seed=4000)), 40, cfg)
    assert set(res) == {("plvc", "plvc"), ("plvc", "sar"), ("sar", "plvc"), ("sar", "sar")}
    for under in ("plvc", "sar"):
        other = "sar" if under == "plvc" else "plvc"
        assert res[(under, under)].parameters["rho"]["rmse"] <= res[(under, other)].parameters["rho"]["rmse"]
    header, rows = comparison_table(res)
    assert len(rows) == 4 and header[0] == "underlying"


def test_band_and_emitters(tmp_path):
    band = confidence_band(DgpSpec(n=100, seed=1), FAST)
    g2 = band["gamma2"]
    assert np.all(g2["lower"] <= g2["estimate"]) and np.all(g2["estimate"] <= g2["upper"])
    assert band["u"].size == 200
    rep = run_monte_carlo(DgpSpec(n=60, seed=1), "ivqr", 2, FAST)
    header, rows = estimation_table({(60, 0.5, "ivqr"): rep})
    assert header == ["n", "parameter", "metric", "ivqr@0.5"]
    assert [r[1:3] for r in rows][:2] == [["rho", "bias"], ["rho", "rmse"]]
    write_csv(header, rows, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "n,parameter,metric,ivqr@0.5"
    write_json({"x": np.arange(3), "y": np.float64(1.5)}, tmp_path / "t.json")
    assert '"y": 1.5' in (tmp_path / "t.json").read_text()

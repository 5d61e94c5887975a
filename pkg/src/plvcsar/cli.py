"""Command line entry point: ``plvcsar fit|test|simulate|knots``.

Every flag can also be given in a ``key=value`` config file passed with
``--config``; flags on the command line win.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
from scipy.stats import chi2, norm

from . import sim
from .errors import (
    DegenerateDesignError,
    DegenerateSupportError,
    DgpError,
    DimensionError,
    HarnessError,
    ParameterDomainError,
    PlvcsarError,
    SingularMatrixError,
    SolverError,
)
from .ivqr import IvqrConfig, RhoGrid, asymptotic_cov, confidence_intervals, estimate
from .model import INSTRUMENT_CHOICES, read_dataset
from .spline import make_knots, select_knots

log = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

PRESETS = {
    "table1": "varying vs constant coefficient fits, both designs, n=100",
    "table2": "QR vs IVQR, homoscedastic design, n in 100/200/500/800",
    "table3": "QR vs IVQR, heteroscedastic design, n in 100/200/500/800",
    "table4": "size and power of both rank-score tests, n=200, tau=0.5",
}
TABLE_TAUS = (0.25, 0.5, 0.75)
TABLE_NS = (100, 200, 500, 800)
DIAL = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5)


class UsageError(Exception):
    pass


def _tau_list(text, fallback="0.5"):
    if text is None:
        text = fallback
    try:
        taus = [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--tau must be a comma separated list of numbers, got {text!r}") from None
    if not taus:
        raise UsageError("--tau is empty")
    if any(not (0.0 < t < 1.0) for t in taus):
        raise UsageError(f"tau values must lie in (0, 1), got {taus}")
    if any(b <= a for a, b in zip(taus, taus[1:])):
        raise UsageError(f"tau values must be strictly increasing, got {taus}")
    return taus


def _add_common(p, data=True):
    if data:
        p.add_argument("--data", help="dataset CSV with columns y, x1.., z1.., u")
        p.add_argument("--weights", help="spatial weights: dense CSV or i,j,w triplets")
    p.add_argument("--tau", default=None, help="comma separated quantile levels (default 0.5)")
    p.add_argument("--knots", default="auto", help="interior knot count or 'auto' (SIC)")
    p.add_argument("--rho-grid", default="-0.99:0.99:0.01", help="lo:hi:step")
    p.add_argument("--instruments", default="wx_wz", choices=INSTRUMENT_CHOICES)
    p.add_argument("--ci-rate", default="sqrt_n", choices=("sqrt_n", "n"))
    p.add_argument("--bandwidth", default="hall_sheather", choices=("hall_sheather", "bofinger"))
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", default="csv", choices=("csv", "json"))


def build_parser():
    parser = argparse.ArgumentParser(prog="plvcsar", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="key=value file; command line flags override it")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate the model at each tau")
    _add_common(p)
    p.add_argument("--u-points", type=int, default=101, help="grid size for the curve output")

    p = sub.add_parser("test", help="rank-score tests")
    _add_common(p)
    p.add_argument("--hypothesis", action="append", default=[],
                   help="beta:<x column> or constancy:<z column>; repeatable")
    p.add_argument("--null-fit", default="ivqr", choices=("ivqr", "naive_qr"))

    p = sub.add_parser("simulate", help="Monte Carlo studies")
    _add_common(p, data=False)
    p.add_argument("--preset", help=f"one of {', '.join(PRESETS)}")
    p.add_argument("--example", default="ex1_plvc", help=f"one of {', '.join(sim.EXAMPLES)}")
    p.add_argument("--n", default=None, help="comma separated sample sizes")
    p.add_argument("--estimator", default="ivqr", choices=("ivqr", "naive_qr"))
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--band", action="store_true", help="also write confidence band data for one draw")

    p = sub.add_parser("knots", help="SIC score of each candidate knot count")
    _add_common(p)
    p.add_argument("--candidates", default=None, help="comma separated knot counts")
    return parser


def read_config_file(path):
    """``key=value`` lines; ``#`` starts a comment. Keys use flag spelling."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.lstrip("-").replace("-", "_")] = value
    return out


def _glue_negative_values(argv):
    # "--rho-grid -0.9:0.9:0.01" would otherwise read the range as a flag
    out, it = [], iter(argv)
    for a in it:
        if a == "--rho-grid":
            nxt = next(it, None)
            out.append(a if nxt is None else f"{a}={nxt}")
        else:
            out.append(a)
    return out


def parse_args(argv):
    parser = build_parser()
    argv = _glue_negative_values(argv)
    args = parser.parse_args(argv)
    if args.config:
        try:
            conf = read_config_file(args.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, value in conf.items():
            if key not in known or key == "help":
                raise UsageError(f"unknown config key {key!r} for '{args.command}'")
            action = known[key]
            if isinstance(action, argparse._AppendAction):
                value = [v.strip() for v in value.split(";") if v.strip()]
            elif isinstance(action, argparse._StoreTrueAction):
                value = value.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                value = action.type(value)
            if action.choices is not None and value not in action.choices:
                raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
            defaults[key] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def _ivqr_config(args, tau):
    try:
        grid = RhoGrid.parse(args.rho_grid)
    except ParameterDomainError as exc:
        raise UsageError(str(exc)) from None
    if args.knots == "auto":
        k = None
    else:
        try:
            k = int(args.knots)
        except ValueError:
            raise UsageError(f"--knots must be 'auto' or an integer, got {args.knots!r}") from None
        if k < 0:
            raise UsageError("--knots must be nonnegative")
    return IvqrConfig(tau=tau, rho_grid=grid, k_n=k, instruments=args.instruments,
                      ci_rate=args.ci_rate, bandwidth=args.bandwidth)


def _load(args):
    if not args.data or not args.weights:
        raise UsageError("--data and --weights are required")
    return read_dataset(args.data, args.weights)


def _write_table(header, rows, path_stem, fmt):
    path = f"{path_stem}.{fmt}"
    if fmt == "csv":
        sim.write_csv(header, rows, path)
    else:
        sim.write_json([dict(zip(header, r)) for r in rows], path)
    return path


def _tag(tau):
    return f"tau{tau:g}"


def cmd_fit(args):
    ds = _load(args)
    taus = _tau_list(args.tau)
    os.makedirs(args.out, exist_ok=True)
    curves = {}
    u_grid = np.linspace(ds.U.min(), ds.U.max(), args.u_points)
    for tau in taus:
        cfg = _ivqr_config(args, tau)
        est = estimate(ds, cfg)
        bundle = asymptotic_cov(est, config=cfg)
        ci = confidence_intervals(est, bundle, args.alpha, u_grid, cfg.ci_rate)
        payload = est.to_dict()
        payload["x_names"] = list(ds.x_names)
        payload["z_names"] = list(ds.z_names)
        payload["intervals"] = ci.to_dict()
        sim.write_json(payload, os.path.join(args.out, f"estimate_{_tag(tau)}.json"))
        header = ["parameter", "u", "estimate", "lower", "upper"]
        rows = [["rho", "", est.rho_hat, ci.rho_lower, ci.rho_upper]]
        for j, name in enumerate(ds.x_names):
            rows.append([name, "", est.beta_hat[j], ci.beta_lower[j], ci.beta_upper[j]])
        for l, name in enumerate(ds.z_names):
            for k, u in enumerate(u_grid):
                rows.append([name, u, ci.gamma_hat[l][k], ci.gamma_lower[l][k], ci.gamma_upper[l][k]])
        _write_table(header, rows, os.path.join(args.out, f"intervals_{_tag(tau)}"), args.format)
        curves[tau] = ci.gamma_hat
        print(f"tau={tau:g}  rho={est.rho_hat:.4f}  k_n={est.k_n}  "
              + "  ".join(f"{nm}={b:.4f}" for nm, b in zip(ds.x_names, est.beta_hat)))
    if ds.q:
        header = ["u"] + [f"{name}@{tau:g}" for name in ds.z_names for tau in taus]
        rows = [[u] + [curves[tau][l][k] for l in range(ds.q) for tau in taus] for k, u in enumerate(u_grid)]
        _write_table(header, rows, os.path.join(args.out, "gamma_curves"), args.format)
    return EXIT_OK


def _parse_hypotheses(items, ds):
    if not items:
        raise UsageError("no hypotheses given; use --hypothesis beta:<x column> or constancy:<z column>")
    out = []
    for item in items:
        kind, _, cols = item.partition(":")
        names = [c.strip() for c in cols.split(",") if c.strip()]
        if kind not in ("beta", "constancy") or not names:
            raise UsageError(f"bad hypothesis {item!r}; expected beta:<cols> or constancy:<cols>")
        pool = ds.x_names if kind == "beta" else ds.z_names
        missing = [c for c in names if c not in pool]
        if missing:
            raise UsageError(f"hypothesis {item!r}: unknown column(s) {missing}; available {list(pool)}")
        out.append((item, kind, [pool.index(c) for c in names]))
    return out


def decide(statistic, df, reference, alpha=0.05):
    """``(cutoff, reject)`` for a test statistic at level ``alpha``."""
    cut = float(chi2.isf(alpha, df)) if reference == "chi_square" else float(norm.isf(alpha))
    return cut, bool(statistic > cut)


def cmd_test(args):
    from .ranktest import rs_beta_test, rs_constancy_test

    ds = _load(args)
    hyps = _parse_hypotheses(args.hypothesis, ds)
    taus = _tau_list(args.tau)
    os.makedirs(args.out, exist_ok=True)
    header = ["tau", "hypothesis", "statistic", "df", "reference", "cutoff", "p_value", "decision"]
    rows = []
    for tau in taus:
        cfg = _ivqr_config(args, tau)
        k = cfg.k_n if cfg.k_n is not None else select_knots(ds, tau, None, cfg)[0]
        basis = make_knots(ds.U, k, cfg.degree) if ds.q else None
        for label, kind, idx in hyps:
            if kind == "beta":
                res = rs_beta_test(ds, basis, idx, tau, cfg, null_fit=args.null_fit)
            else:
                res = rs_constancy_test(ds, basis, idx, tau, cfg, null_fit=args.null_fit)
            cut, reject = decide(res.statistic, res.df, res.reference, args.alpha)
            rows.append([tau, label, round(res.statistic, 4), res.df, res.reference, round(cut, 4),
                         res.p_value, "reject" if reject else "accept"])
            print(f"tau={tau:g}  {label:<20} {res.statistic:10.4f}{' *' if reject else '  '}  cutoff {cut:.4f}")
    _write_table(header, rows, os.path.join(args.out, "tests"), args.format)
    return EXIT_OK


def _ints(text, what):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma separated integers, got {text!r}") from None


def cmd_simulate(args):
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    os.makedirs(args.out, exist_ok=True)
    if args.preset is not None and args.preset not in PRESETS:
        raise UsageError(f"unknown preset {args.preset!r}; valid presets: "
                         + ", ".join(f"{k} ({v})" for k, v in PRESETS.items()))
    if args.example not in sim.EXAMPLES:
        raise UsageError(f"unknown example {args.example!r}; valid examples: {', '.join(sim.EXAMPLES)}; "
                         f"valid presets: {', '.join(PRESETS)}")
    ns = _ints(args.n, "--n") if args.n else None
    cfg_for = lambda tau: _ivqr_config(args, tau)  # noqa: E731
    preset = args.preset
    stem = os.path.join(args.out, preset or "simulation")
    payload = {}

    if preset in ("table2", "table3"):
        example = "ex1_plvc" if preset == "table2" else "ex2_plvc_hetero"
        taus = _tau_list(args.tau, ",".join(map(str, TABLE_TAUS)))
        reports = {}
        for n in ns or TABLE_NS:
            for tau in taus:
                spec = sim.DgpSpec(example=example, n=n, tau=tau, seed=args.seed)
                for est in ("naive_qr", "ivqr"):
                    r = sim.run_monte_carlo(spec, est, args.reps, cfg_for(tau), workers=args.workers)
                    reports[(n, tau, est)] = r
                    payload[f"n={n},tau={tau:g},{est}"] = r.to_dict()
        header, rows = sim.estimation_table(reports)
    elif preset == "table1":
        taus = _tau_list(args.tau, ",".join(map(str, TABLE_TAUS)))
        header, rows = None, []
        for pair in (("ex1_plvc", "ex1_sar"), ("ex2_plvc_hetero", "ex2_sar_hetero")):
            for tau in taus:
                n = (ns or [100])[0]
                specs = tuple(sim.DgpSpec(example=e, n=n, tau=tau, seed=args.seed) for e in pair)
                res = sim.run_model_comparison(specs, args.reps, cfg_for(tau), workers=args.workers)
                h, rs = sim.comparison_table(res)
                header = ["example", "tau"] + h
                rows += [[pair[0][:3], tau] + r for r in rs]
                payload.update({f"{pair[0][:3]},tau={tau:g},{u}->{f}": r.to_dict() for (u, f), r in res.items()})
    elif preset == "table4":
        header, rows = ["example", "test", "dial", "naive_qr", "ivqr"], []
        n = (ns or [200])[0]
        tau = _tau_list(args.tau)[0]
        for example in ("ex1_plvc", "ex2_plvc_hetero"):
            spec = sim.DgpSpec(example=example, n=n, tau=tau, seed=args.seed)
            for test in ("beta", "constancy"):
                tab = sim.size_power_study(test, DIAL, spec, args.reps, cfg_for(tau), alpha=args.alpha,
                                           workers=args.workers)
                rows += [[example, test, v, tab.rates[v]["naive_qr"], tab.rates[v]["ivqr"]] for v in DIAL]
                payload[f"{example},{test}"] = tab.to_dict()
    else:
        taus = _tau_list(args.tau)
        reports = {}
        for n in ns or [100]:
            for tau in taus:
                spec = sim.DgpSpec(example=args.example, n=n, tau=tau, seed=args.seed)
                r = sim.run_monte_carlo(spec, args.estimator, args.reps, cfg_for(tau), workers=args.workers)
                reports[(n, tau, args.estimator)] = r
                payload[f"n={n},tau={tau:g},{args.estimator}"] = r.to_dict()
        header, rows = sim.estimation_table(reports)

    if args.format == "csv":
        sim.write_csv(header, rows, stem + ".csv")
    sim.write_json(payload, stem + ".json")
    for r in rows:
        print(",".join(str(v) for v in r))

    if args.band:
        tau = _tau_list(args.tau)[0]
        spec = sim.DgpSpec(example=args.example, n=(ns or [200])[0], tau=tau, seed=args.seed)
        band = sim.confidence_band(spec, cfg_for(tau), args.alpha)
        keys = [k for k in band if k != "u"]
        h = ["u"] + [f"{k}_{part}" for k in keys for part in ("truth", "estimate", "lower", "upper")]
        body = [[u] + [band[k][part][i] for k in keys for part in ("truth", "estimate", "lower", "upper")]
                for i, u in enumerate(band["u"])]
        sim.write_csv(h, body, os.path.join(args.out, "band.csv"))
    return EXIT_OK


def cmd_knots(args):
    ds = _load(args)
    taus = _tau_list(args.tau)
    cands = _ints(args.candidates, "--candidates") if args.candidates else None
    os.makedirs(args.out, exist_ok=True)
    header, rows = ["tau", "k_n", "sic", "selected"], []
    for tau in taus:
        best, scores = select_knots(ds, tau, cands, _ivqr_config(args, tau))
        for k, s in sorted(scores.items()):
            rows.append([tau, k, s, k == best])
        print(f"tau={tau:g}  selected k_n={best}  " + "  ".join(f"{k}:{s:.4f}" for k, s in sorted(scores.items())))
    _write_table(header, rows, os.path.join(args.out, "knots"), args.format)
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "simulate": cmd_simulate, "knots": cmd_knots}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"plvcsar: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"plvcsar: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DimensionError, DegenerateSupportError, DegenerateDesignError, OSError) as exc:
        print(f"plvcsar: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SolverError, SingularMatrixError, HarnessError, DgpError) as exc:
        print(f"plvcsar: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ParameterDomainError as exc:
        print(f"plvcsar: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PlvcsarError as exc:
        print(f"plvcsar: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

"""Command-line surface: estimation, testing, instrument-based estimation,
diagnostics, and Monte Carlo studies.

Exit codes: 0 success, 2 input or configuration error, 3 numerical failure.
Failures also emit a machine-readable JSON record on stderr. All numerical
work is delegated to the library modules; the CLI only parses, dispatches,
and serializes, so results are identical to direct library calls.
"""

from __future__ import annotations

import argparse
import configparser
import json
import math
import os
import re
import sys

import numpy as np

from . import simulation
from .data import ModelSpec, RestrictionSpec, diagnostics_report, load_panel_csv, resolve_bandwidth
from .errors import NumericalError, PanelValidationError
from .estimator import OptimizerConfig, minimize_profile
from .extensions import EndogenousSpec, lsmd_estimate
from .inference import bias_corrected, jackknife, lm_star, lr_star, uncorrected_tests, wald_star
from .simulation import (
    DgpConfig,
    McConfig,
    bias_fraction,
    estimator_rows,
    format_estimator_table,
    format_test_table,
    mc_estimators,
    mc_tests,
    run_table,
    test_rows,
    write_records_json,
    write_rows_csv,
)

THREADS_ENV_VAR = "IFEPANEL_THREADS"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _fail(code, kind, message):
    record = {"error": kind, "message": str(message)}
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    return code


def _resolve_threads(args):
    if getattr(args, "threads", None):
        return max(1, args.threads)
    try:
        return max(1, int(os.environ.get(THREADS_ENV_VAR, "1")))
    except ValueError:
        return 1


def _read_config(path):
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise PanelValidationError(f"config file {path!r} not found or unreadable")
    return parser


def _config_get(cfg, section, key, default=None):
    if cfg is None or not cfg.has_option(section, key):
        return default
    return cfg.get(section, key)


def _parse_bandwidth(text):
    if text is None or text == "auto":
        return "auto"
    return int(text)


def _optimizer_from(cfg, args):
    kwargs = {}
    if getattr(args, "starts", None):
        kwargs["n_starts"] = args.starts
    if cfg is not None and cfg.has_section("optimizer"):
        sec = cfg["optimizer"]
        for key, conv in (("n_starts", int), ("start_spread", float), ("max_iter", int),
                          ("grad_tol", float), ("step_tol", float), ("method", str)):
            if key in sec and key not in kwargs:
                kwargs[key] = conv(sec[key])
    return OptimizerConfig(**kwargs)


def _load_dataset(args, cfg):
    path = args.input or _config_get(cfg, "io", "input")
    if not path:
        raise PanelValidationError("no input file given")
    low_rank = args.low_rank or _config_get(cfg, "model", "low_rank", "")
    names = [s for s in re.split(r"[,\s]+", low_rank) if s] if low_rank else []
    return load_panel_csv(path, low_rank=names)


def _model_spec(args, cfg, d):
    factors = args.factors if args.factors is not None else _config_get(cfg, "model", "factors")
    if factors is None:
        raise PanelValidationError("the factor count (--factors) is required")
    bandwidth = _parse_bandwidth(
        args.bandwidth if args.bandwidth is not None else _config_get(cfg, "model", "bandwidth")
    )
    spec = ModelSpec(r=int(factors), bandwidth=bandwidth, optimizer=_optimizer_from(cfg, args))
    if spec.r > min(d.n_units, d.n_periods) - 1:
        raise PanelValidationError(
            f"factor count R={spec.r} exceeds min(N,T) - 1 = {min(d.n_units, d.n_periods) - 1}"
        )
    return spec


_TERM_RE = re.compile(r"^\s*([+-]?)\s*(?:(\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)\s*\*\s*)?([A-Za-z_]\w*)\s*$")


def parse_restriction(expressions, names):
    """Build a restriction from expressions like ``x1=0.5`` or ``2*x1-x2=0``."""
    rows, values = [], []
    index = {name: i for i, name in enumerate(names)}
    for expr in expressions:
        if "=" not in expr:
            raise PanelValidationError(f"restriction {expr!r} must contain '='")
        lhs, rhs = expr.rsplit("=", 1)
        try:
            values.append(float(rhs))
        except ValueError as exc:
            raise PanelValidationError(f"restriction {expr!r} has a non-numeric right side") from exc
        row = np.zeros(len(names))
        terms = re.findall(r"[+-]?[^+-]+", lhs)
        if not terms:
            raise PanelValidationError(f"restriction {expr!r} has an empty left side")
        for term in terms:
            match = _TERM_RE.match(term)
            if not match:
                raise PanelValidationError(f"cannot parse term {term!r} in restriction {expr!r}")
            sign, coef, name = match.groups()
            if name not in index:
                raise PanelValidationError(f"restriction names unknown regressor {name!r}")
            value = float(coef) if coef else 1.0
            row[index[name]] += -value if sign == "-" else value
        rows.append(row)
    return RestrictionSpec(h_matrix=np.vstack(rows), h_vector=np.array(values))


def _write_json(path, record):
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def run_estimate(args):
    cfg = _read_config(args.config) if args.config else None
    d = _load_dataset(args, cfg)
    spec = _model_spec(args, cfg, d)
    threads = _resolve_threads(args)
    fit = minimize_profile(d, spec, threads=threads)
    kernel = resolve_bandwidth(spec.bandwidth, d.n_periods)
    inf = bias_corrected(fit, d, kernel)
    jk = jackknife(d, spec, threads=threads) if args.jackknife else None
    report = diagnostics_report(d, spec.r, lambda_hat=fit.lambda_hat, f_hat=fit.f_hat)

    rows = []
    for k, name in enumerate(d.regressor_names):
        row = {
            "name": name,
            "beta_hat": float(fit.beta_hat[k]),
            "beta_star": float(inf.beta_star[k]),
            "std_err": float(inf.std_err[k]),
        }
        if jk is not None:
            row["jackknife"] = float(jk[k])
        rows.append(row)
    record = {
        "n": d.n_units,
        "t": d.n_periods,
        "k": d.n_regressors,
        "factors": spec.r,
        "bandwidth_used": inf.bandwidth_used,
        "kappa": inf.kappa,
        "objective": fit.objective,
        "converged": fit.converged,
        "n_restarts_agreeing": fit.n_restarts_agreeing,
        "degenerate_gap": fit.degenerate_gap,
        "coefficients": rows,
        "b1_hat": [float(v) for v in inf.b1_hat],
        "b2_hat": [float(v) for v in inf.b2_hat],
        "b3_hat": [float(v) for v in inf.b3_hat],
        "diagnostics": {
            "highrank_stat": report.highrank_stat,
            "lowrank_loading_eig": report.lowrank_loading_eig,
            "lowrank_factor_eig": report.lowrank_factor_eig,
            "pooled_noncollinearity_eig": report.pooled_noncollinearity_eig,
            "warnings": report.warnings,
        },
    }
    width = max(len(r["name"]) for r in rows)
    lines = [f"{'name':<{width}} {'beta_hat':>14} {'beta_star':>14} {'std_err':>14}"
             + (f" {'jackknife':>14}" if jk is not None else "")]
    for row in rows:
        line = (f"{row['name']:<{width}} {row['beta_hat']:>14.6f} "
                f"{row['beta_star']:>14.6f} {row['std_err']:>14.6f}")
        if jk is not None:
            line += f" {row['jackknife']:>14.6f}"
        lines.append(line)
    _emit(args, rows, record, "estimate", "\n".join(lines))
    return EXIT_OK


def _emit(args, rows, record, stem, human_text):
    """Write both serialized artifacts (when --output is set) and render stdout."""
    output = getattr(args, "output", None)
    if output:
        write_rows_csv(rows, f"{output}_{stem}.csv")
        _write_json(f"{output}_{stem}.json", record)
    fmt = getattr(args, "format", "table") or "table"
    if fmt == "csv":
        sys.stdout.write(simulation.rows_to_csv_text(rows))
    elif fmt == "json":
        print(json.dumps(record, indent=2, sort_keys=True))
    else:
        print(human_text)


def run_test(args):
    cfg = _read_config(args.config) if args.config else None
    d = _load_dataset(args, cfg)
    spec = _model_spec(args, cfg, d)
    expressions = list(args.restrict or [])
    if not expressions and cfg is not None and cfg.has_option("restriction", "restrict"):
        expressions = [s.strip() for s in cfg.get("restriction", "restrict").split(";") if s.strip()]
    if not expressions:
        raise PanelValidationError("no restriction given (--restrict)")
    rest = parse_restriction(expressions, d.regressor_names)
    threads = _resolve_threads(args)
    fit = minimize_profile(d, spec, threads=threads)
    kernel = resolve_bandwidth(spec.bandwidth, d.n_periods)
    inf = bias_corrected(fit, d, kernel)
    results = [
        wald_star(fit, inf, rest),
        lr_star(d, spec, rest, fit=fit, inf=inf),
        lm_star(d, spec, rest, kernel),
    ]
    results.extend(uncorrected_tests(fit, inf, rest, d, spec))
    rows = [
        {"variant": r.variant, "statistic": r.statistic, "df": r.df, "p_value": r.p_value}
        for r in results
    ]
    record = {"restrictions": expressions, "results": rows}
    lines = [f"{'variant':<6} {'statistic':>12} {'df':>4} {'p_value':>10}"]
    for row in rows:
        lines.append(f"{row['variant']:<6} {row['statistic']:>12.4f} {row['df']:>4d} {row['p_value']:>10.4f}")
    _emit(args, rows, record, "tests", "\n".join(lines))
    return EXIT_OK


def run_lsmd(args):
    cfg = _read_config(args.config) if args.config else None
    d = _load_dataset(args, cfg)
    endog_text = args.endog or _config_get(cfg, "lsmd", "endog", "")
    instr_text = args.instruments or _config_get(cfg, "lsmd", "instruments", "")
    endog_names = [s for s in re.split(r"[,\s]+", endog_text) if s]
    instr_names = [s for s in re.split(r"[,\s]+", instr_text) if s]
    if not endog_names or not instr_names:
        raise PanelValidationError("lsmd needs --endog and --instruments regressor names")
    for name in endog_names + instr_names:
        if name not in d.regressor_names:
            raise PanelValidationError(f"unknown regressor {name!r}")
    instr_idx = [d.regressor_names.index(name) for name in instr_names]
    keep_idx = [i for i in range(d.n_regressors) if i not in set(instr_idx)]
    instruments = [d.x[i] for i in instr_idx]
    from .data import PanelDataset

    core = PanelDataset(
        y=d.y,
        x=[d.x[i] for i in keep_idx],
        regressor_names=[d.regressor_names[i] for i in keep_idx],
        low_rank_flags=[d.low_rank_flags[i] for i in keep_idx],
    )
    endog_idx = [core.regressor_names.index(name) for name in endog_names]
    spec = _model_spec(args, cfg, core)
    es = EndogenousSpec(endog_idx=tuple(endog_idx), instruments=instruments)
    result = lsmd_estimate(core, spec, es)
    rows = []
    for name, value in zip(endog_names, result.beta_end):
        rows.append({"name": name, "role": "endogenous", "estimate": float(value)})
    exo_names = [n for n in core.regressor_names if n not in set(endog_names)]
    for name, value in zip(exo_names, result.beta_exo):
        rows.append({"name": name, "role": "exogenous", "estimate": float(value)})
    record = {
        "coefficients": rows,
        "gamma_norm": float(np.linalg.norm(result.gamma_path[-1][1])) if result.gamma_path else math.nan,
        "n_gamma_evaluations": len(result.gamma_path),
    }
    lines = [f"{row['name']:<12} {row['role']:<12} {row['estimate']:>14.6f}" for row in rows]
    _emit(args, rows, record, "lsmd", "\n".join(lines))
    return EXIT_OK


def run_diagnose(args):
    cfg = _read_config(args.config) if args.config else None
    d = _load_dataset(args, cfg)
    spec = _model_spec(args, cfg, d)
    lam = f = None
    if d.n_low_rank:
        fit = minimize_profile(d, spec, threads=_resolve_threads(args))
        lam, f = fit.lambda_hat, fit.f_hat
    report = diagnostics_report(d, spec.r, lambda_hat=lam, f_hat=f)
    record = {
        "highrank_stat": report.highrank_stat,
        "lowrank_loading_eig": report.lowrank_loading_eig,
        "lowrank_factor_eig": report.lowrank_factor_eig,
        "pooled_noncollinearity_eig": report.pooled_noncollinearity_eig,
        "warnings": report.warnings,
    }
    rows = [{"statistic": key, "value": value}
            for key, value in record.items() if key != "warnings"]
    lines = [f"{row['statistic']:<30} {row['value']}" for row in rows]
    lines.extend(f"note: {note}" for note in report.warnings)
    _emit(args, rows, record, "diagnostics", "\n".join(lines))
    return EXIT_OK


def _dgp_from_config(cfg, seed):
    sec = cfg["dgp"]
    return DgpConfig(
        n=sec.getint("n"),
        t=sec.getint("t"),
        rho0=sec.getfloat("rho0"),
        r_true=sec.getint("r_true", 1),
        rho_f=sec.getfloat("rho_f", 0.5),
        sigma_f=sec.getfloat("sigma_f", 0.5),
        burn_in=sec.getint("burn_in", 1000),
        error_dist=sec.get("error_dist", "student_t"),
        error_df=sec.getfloat("error_df", 5.0),
        error_sigma=sec.getfloat("error_sigma", 1.0),
        seed=seed,
    )


def _list_option(sec, key, default=""):
    return tuple(s for s in re.split(r"[,\s]+", sec.get(key, default)) if s)


def run_simulate(args):
    threads = _resolve_threads(args)
    outdir = args.output or "."
    if args.table:
        rows, records = run_table(args.table, scale=args.scale, seed=args.seed, threads=threads)
        os.makedirs(outdir, exist_ok=True)
        stem = os.path.join(outdir, f"table{args.table}")
        write_rows_csv(rows, f"{stem}_cells.csv")
        write_records_json(records, f"{stem}_records.json")
        if args.table in ("1", "2", "S1", "S2", "S3"):
            print(format_estimator_table(rows))
        elif args.table == "3":
            for row in rows:
                if row.get("kind") == "bias_fraction":
                    print(f"rho0={row['rho0']} M={row['m']}: fraction={row['fraction']}")
        elif args.table == "6":
            print(format_test_table(rows, ("size",)))
        elif args.table == "7":
            print(format_test_table(rows, ("power_left", "power_right")))
        else:
            print(format_test_table(rows, ("sc_power_left", "sc_power_right")))
        return EXIT_OK
    if not args.config:
        raise PanelValidationError("simulate needs either --table or --config")
    cfg = _read_config(args.config)
    if not cfg.has_section("dgp") or not cfg.has_section("mc"):
        raise PanelValidationError("simulate config must contain [dgp] and [mc] sections")
    sec = cfg["mc"]
    dgp = _dgp_from_config(cfg, args.seed)
    kind = sec.get("kind", "estimators")
    reps = sec.getint("reps")
    bandwidth = _parse_bandwidth(sec.get("bandwidth", "auto"))
    mc = McConfig(
        dgp=dgp,
        reps=reps,
        estimators=_list_option(sec, "estimators", "FLS") if kind == "estimators" else (),
        r_fit=sec.getint("r_fit", 1),
        bandwidth=bandwidth,
        tests=_list_option(sec, "tests") if kind == "tests" else (),
        alternatives=sec.get("alternatives", "none"),
        threads=threads,
    )
    meta = {"kind": kind, "rho0": dgp.rho0, "n": dgp.n, "t": dgp.t, "reps": reps}
    os.makedirs(outdir, exist_ok=True)
    stem = os.path.join(outdir, "mc")
    if kind == "estimators":
        summary = mc_estimators(mc)
        rows = estimator_rows(meta, summary)
        records = {"meta": meta, "summary": simulation.summary_record(summary)}
        print(format_estimator_table(rows))
    elif kind == "tests":
        summary = mc_tests(mc)
        rows = test_rows(meta, summary)
        records = {"meta": meta, "summary": simulation.summary_record(summary)}
        print(format_test_table(rows, ("size",)))
    elif kind == "bias_fraction":
        bands = [int(b) for b in _list_option(sec, "bandwidths", "1,2,3,4")]
        fr = bias_fraction(mc, bands)
        rows = [{**meta, "kind": "bias_fraction", **row} for row in fr]
        records = {"meta": meta, "fractions": fr}
        for row in fr:
            print(f"M={row['m']}: fraction={row['fraction']}")
    else:
        raise PanelValidationError(f"unknown simulate kind {kind!r}")
    write_rows_csv(rows, f"{stem}_cells.csv")
    write_records_json(records, f"{stem}_records.json")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ifepanel",
        description="Panel regression with interactive fixed effects: estimation, "
                    "bias-corrected inference, and Monte Carlo studies.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_input=True):
        if needs_input:
            p.add_argument("--input", help="long-format CSV with columns unit,time,y,x1..xK")
            p.add_argument("--factors", type=int, help="number of factors R")
            p.add_argument("--bandwidth", help="bias-correction bandwidth (integer or 'auto')")
            p.add_argument("--low-rank", dest="low_rank",
                           help="comma-separated regressor names declared rank one")
            p.add_argument("--starts", type=int, help="number of optimizer starts")
        p.add_argument("--config", help="flat key-value config file with sections")
        p.add_argument("--output", help="output path prefix (or directory for simulate)")
        p.add_argument("--format", choices=("csv", "json", "table"), default="table",
                       help="stdout rendering; file artifacts are always csv + json")
        p.add_argument("--threads", type=int, help="worker thread cap "
                       f"(default from ${THREADS_ENV_VAR} or 1)")

    p_est = sub.add_parser("estimate", help="fit the model and report corrected coefficients")
    add_common(p_est)
    p_est.add_argument("--jackknife", action="store_true",
                       help="also report the split-panel jackknife estimate")
    p_est.set_defaults(func=run_estimate)

    p_test = sub.add_parser("test", help="test linear restrictions on the coefficients")
    add_common(p_test)
    p_test.add_argument("--restrict", action="append",
                        help="restriction such as 'x1=0.5' or '2*x1-x2=0' (repeatable)")
    p_test.set_defaults(func=run_test)

    p_lsmd = sub.add_parser("lsmd", help="instrument-based estimation for endogenous regressors")
    add_common(p_lsmd)
    p_lsmd.add_argument("--endog", help="comma-separated endogenous regressor names")
    p_lsmd.add_argument("--instruments", help="comma-separated instrument column names")
    p_lsmd.set_defaults(func=run_lsmd)

    p_diag = sub.add_parser("diagnose", help="identification diagnostics for the regressor set")
    add_common(p_diag)
    p_diag.set_defaults(func=run_diagnose)

    p_sim = sub.add_parser("simulate", help="run a Monte Carlo study")
    add_common(p_sim, needs_input=False)
    p_sim.add_argument("--table", choices=simulation.TABLE_IDS,
                       help="preset study design to reproduce")
    p_sim.add_argument("--scale", type=float, default=1.0,
                       help="replication scale factor on the preset design")
    p_sim.add_argument("--seed", type=int, default=0, help="master seed")
    p_sim.set_defaults(func=run_simulate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (PanelValidationError, FileNotFoundError, configparser.Error, ValueError) as exc:
        return _fail(EXIT_CONFIG, type(exc).__name__, exc)
    except NumericalError as exc:
        return _fail(EXIT_NUMERICAL, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())

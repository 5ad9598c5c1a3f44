"""Batch command-line frontend: estimation, simulation studies, truth values.

Every command is seeded and fully reproducible: identical flags and inputs
produce identical output bytes (the run manifest's timing fields are the only
exception).  Exit codes: 0 success; 2 input or configuration error;
3 at least one requested estimand was not identifiable; 4 inference was
flagged unreliable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from datetime import datetime, timezone

from . import __version__
from .data import (
    ColumnSchema,
    FormulaSpec,
    ParseError,
    SchemaError,
    ValidationError,
    ingest_csv,
)
from .estimators import METHODS, EstimationError, _estimate_all
from .inference import _resample_deltas, _summarize
from .nuisance import FitError, ModelSpecs
from .simulation import (
    ConfigError,
    DGPConfig,
    StudyConfig,
    run_study,
    true_values,
)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NOT_IDENTIFIABLE = 3
EXIT_UNRELIABLE = 4


def _default_threads() -> int:
    raw = os.environ.get("QRL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _float_list(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _str_list(text: str) -> list[str]:
    return [tok.strip() for tok in text.split(",") if tok.strip()]


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, allow_nan=True)
        fh.write("\n")


def _write_manifest(out_path, command: str, config: dict, seed, started: float, warnings: dict) -> None:
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "qrlife", "version": __version__},
        "command": command,
        "config": config,
        "seed": seed,
        "started_utc": datetime.fromtimestamp(started, tz=timezone.utc).isoformat(),
        "duration_seconds": round(time.time() - started, 3),
        "warnings": warnings,
    }
    _write_json(f"{out_path}.manifest.json", manifest)


def _quantile_dict(q) -> dict:
    return {
        "theta": q.theta,
        "identifiable": q.identifiable,
        "candidates_scanned": q.candidates_scanned,
        "clamped_weights": q.clamped_weights,
    }


def cmd_estimate(args) -> int:
    started = time.time()
    schema = ColumnSchema(
        time=args.time_col,
        event=args.event_col,
        treatment=args.treat_col,
        covariates=tuple(_str_list(args.covariates)) if args.covariates else None,
    )
    data = ingest_csv(args.data, schema)
    default_terms = ",".join(data.covariate_names)
    specs = ModelSpecs(
        propensity=FormulaSpec.parse(args.ps_terms or default_terms, intercept=True),
        outcome=FormulaSpec.parse(args.outcome_terms or default_terms, intercept=False),
        censoring=FormulaSpec.parse(args.cens_terms or default_terms, intercept=False),
    )
    methods = [m.lower() for m in _str_list(args.method)]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"--method: unknown method {m!r}")
    t0s = _float_list(args.t0)
    taus = _float_list(args.tau)
    if args.boot < 2:
        raise ConfigError(f"--boot must be at least 2, got {args.boot}")
    if args.seed < 0:
        raise ConfigError(f"--seed must be nonnegative, got {args.seed}")

    results = []
    any_unidentifiable = False
    any_unreliable = False
    total_clamped = 0
    total_failed = 0
    for t0_idx, t0 in enumerate(t0s):
        points = _estimate_all(data, t0, taus, methods, specs)
        boot = _resample_deltas(
            data, t0, taus, methods, specs, args.boot,
            seed=(args.seed, 3, t0_idx), threads=args.threads,
        )
        for method in methods:
            for tau in taus:
                point = points[(method, tau)]
                block = {
                    "method": method,
                    "t0": t0,
                    "tau": tau,
                    "q1": _quantile_dict(point.q1),
                    "q0": _quantile_dict(point.q0),
                    "delta": point.delta,
                    "identifiable": point.identifiable,
                }
                total_clamped += point.q1.clamped_weights + point.q0.clamped_weights
                if point.identifiable:
                    summary = _summarize(point, boot[(method, tau)], args.boot, args.alpha, args.seed)
                    block.update(
                        se=summary.se,
                        wald_ci=list(summary.wald_ci),
                        percentile_ci=list(summary.percentile_ci),
                        replicates_used=summary.replicates_used,
                        replicates_failed=summary.replicates_failed,
                        B=summary.B,
                        unreliable=summary.unreliable,
                    )
                    total_failed += summary.replicates_failed
                    any_unreliable = any_unreliable or summary.unreliable
                else:
                    any_unidentifiable = True
                results.append(block)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "seed": args.seed,
        "alpha": args.alpha,
        "results": results,
    }
    _write_json(args.out, payload)
    config = {
        "data": str(args.data),
        "columns": {"time": args.time_col, "event": args.event_col, "treatment": args.treat_col,
                    "covariates": list(data.covariate_names)},
        "model_terms": {
            "propensity": specs.propensity.describe(),
            "outcome": specs.outcome.describe(),
            "censoring": specs.censoring.describe(),
        },
        "methods": methods,
        "t0s": t0s,
        "taus": taus,
        "boot": args.boot,
        "alpha": args.alpha,
        "threads": args.threads,
        "out": str(args.out),
    }
    warnings = {"clamped_weight_evaluations": total_clamped, "failed_replicates": total_failed}
    _write_manifest(args.out, "estimate", config, args.seed, started, warnings)
    if any_unidentifiable:
        return EXIT_NOT_IDENTIFIABLE
    if any_unreliable:
        return EXIT_UNRELIABLE
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.time()
    with open(args.config) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON ({exc})") from exc
    study = StudyConfig.from_dict(raw)
    report = run_study(study, threads=args.threads)
    report.write_csv(f"{args.out_prefix}.csv")
    report.write_json(f"{args.out_prefix}.json")
    flagged = sum(1 for c in report.cells if c.flagged)
    failures = sum(c.failures for c in report.cells)
    _write_manifest(
        args.out_prefix,
        "simulate",
        {"config": str(args.config), "study": report.to_dict()["study"], "threads": args.threads},
        study.seed,
        started,
        {"failed_replications": failures, "flagged_cells": flagged},
    )
    return EXIT_OK


def cmd_truth(args) -> int:
    started = time.time()
    config = DGPConfig(
        n=1, beta_t=args.beta_t, rho=args.rho, nu=args.nu, t0=args.t0,
        variant=args.variant, seed=args.seed,
    )
    values = true_values(config, args.tau, args.t0, args.samples)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "beta_t": args.beta_t,
        "t0": args.t0,
        "tau": args.tau,
        "variant": args.variant,
        "rho": args.rho,
        "nu": args.nu,
        "samples": args.samples,
        "seed": args.seed,
        "osqc": values.osqc,
        "psqc": values.psqc,
        "q0": values.q0,
        "q1": values.q1,
        "q0_ps": values.q0_ps,
        "q1_ps": values.q1_ps,
    }
    _write_json(args.out, payload)
    _write_manifest(args.out, "truth", {k: payload[k] for k in
                    ("beta_t", "t0", "tau", "variant", "rho", "nu", "samples")},
                    args.seed, started, {})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrlife",
        description="Residual-lifetime quantile contrasts for right-censored data",
    )
    parser.add_argument("--version", action="version", version=f"qrlife {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate quantile contrasts from a CSV file")
    est.add_argument("--data", required=True, help="input CSV with a header row")
    est.add_argument("--time-col", required=True)
    est.add_argument("--event-col", required=True)
    est.add_argument("--treat-col", required=True)
    est.add_argument("--covariates", default=None,
                     help="comma list of covariate columns (default: all unmapped columns)")
    est.add_argument("--t0", required=True, help="comma list of landmark times")
    est.add_argument("--tau", required=True, help="comma list of quantile levels in (0,1)")
    est.add_argument("--method", default="dr", help="comma list from km,iw,dr,ps")
    est.add_argument("--ps-terms", default=None,
                     help="propensity terms: name, name^2, name:name (comma list)")
    est.add_argument("--outcome-terms", default=None, help="outcome-model terms")
    est.add_argument("--cens-terms", default=None, help="censoring-model terms")
    est.add_argument("--boot", type=int, default=1000, help="bootstrap replicates (>= 2)")
    est.add_argument("--alpha", type=float, default=0.05)
    est.add_argument("--seed", type=int, required=True)
    est.add_argument("--threads", type=int, default=_default_threads())
    est.add_argument("--out", default="qrl_estimate.json", help="output JSON path")
    est.set_defaults(func=cmd_estimate)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    sim.add_argument("--config", required=True, help="JSON config: dgp / grid / mc sections")
    sim.add_argument("--out-prefix", required=True)
    sim.add_argument("--threads", type=int, default=_default_threads())
    sim.set_defaults(func=cmd_simulate)

    tru = sub.add_parser("truth", help="Monte Carlo truth for the built-in generative model")
    tru.add_argument("--beta-t", type=float, required=True)
    tru.add_argument("--t0", type=float, required=True)
    tru.add_argument("--tau", type=float, required=True)
    tru.add_argument("--variant", default="copula", choices=["copula", "independent"])
    tru.add_argument("--samples", type=int, default=10_000_000)
    tru.add_argument("--seed", type=int, required=True)
    tru.add_argument("--rho", type=float, default=0.2)
    tru.add_argument("--nu", type=float, default=1.5)
    tru.add_argument("--out", default="qrl_truth.json", help="output JSON path")
    tru.set_defaults(func=cmd_truth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SchemaError, ParseError, ValidationError, ConfigError, FitError,
            EstimationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Synthetic data generation, Monte Carlo truth oracle, and study runner.

The generative model draws three equicorrelated standard-normal covariates,
assigns treatment from a logistic model with a quadratic term, and draws
Weibull event times whose log-rate also carries the quadratic term, so that
dropping ``x1^2`` from a working model misspecifies it.  Censoring is
exponential with strong treatment- and covariate-dependence.

Two variants control how the two potential event times relate:

* ``copula`` - a two-stage construction: one shared uniform decides survival
  to the landmark in both arms (treatment can only extend survival when its
  rate effect is protective), and fresh per-arm uniforms generate the
  post-landmark residual, making residual life independent of the survival
  stage given covariates.
* ``independent`` - the two potential event times are drawn independently
  given covariates, which breaks both structural properties above while
  leaving the observed-survivor estimand identifiable.

The truth oracle simulates the latent outcomes without censoring and reads
off empirical quantiles; the study runner replays the full estimation
pipeline over a scenario grid and reports bias, SE, and coverage per cell.
"""

from __future__ import annotations

import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy.stats import norm

from .data import Dataset, FormulaSpec
from .estimators import METHODS
from .inference import _resample_deltas, _try_estimates
from .nuisance import FitError, ModelSpecs, fit_nuisances

__all__ = [
    "DGPConfig",
    "LatentOutcomes",
    "GeneratedSample",
    "TruthValues",
    "StudyConfig",
    "CellResult",
    "SimulationReport",
    "SCENARIOS",
    "generate",
    "true_values",
    "run_study",
    "scenario_model_specs",
]

SCENARIOS = ("CC", "CI", "IC", "II")

COVARIATE_NAMES = ("x1", "x2", "x3")

# Treatment assignment: logit P(A=1|X) = -0.5 + 0.5 x1 + 0.5 x2 - 0.2 x3 + x1^2
_PS_COEF = np.array([-0.5, 0.5, 0.5, -0.2, 1.0])
# Event-time Weibull rate: log rate = -1 + beta_t a + 0.5 x1 + 0.2 x2 + x1^2
_EVENT_INTERCEPT = -1.0
_EVENT_COEF = np.array([0.5, 0.2, 1.0])
# Censoring exponential rate: log rate = -0.5 - a + 0.1 x3 + 0.1 x1 x3
_CENS_INTERCEPT = -0.5
_CENS_TREAT = -1.0
_CENS_COEF = np.array([0.1, 0.1])


class ConfigError(ValueError):
    """A configuration value or config-file entry is invalid."""


@dataclass(frozen=True)
class DGPConfig:
    """Generative parameters.

    ``censor_shift`` is added to the censoring log-rate (a large negative
    value effectively removes censoring) and ``randomize=True`` replaces the
    confounded assignment model with a covariate-free coin flip; both
    default to the standard generative model.
    """

    n: int
    beta_t: float
    rho: float = 0.2
    nu: float = 1.5
    t0: float = 0.5
    variant: str = "copula"
    seed: int = 0
    censor_shift: float = 0.0
    randomize: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if not self.nu > 0:
            raise ConfigError(f"nu must be positive, got {self.nu}")
        if not -1.0 < self.rho < 1.0:
            raise ConfigError(f"rho must be in (-1, 1), got {self.rho}")
        if self.variant not in ("copula", "independent"):
            raise ConfigError(f"variant must be 'copula' or 'independent', got {self.variant!r}")
        if not self.t0 > 0:
            raise ConfigError(f"t0 must be positive, got {self.t0}")
        if self.seed < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")


@dataclass
class LatentOutcomes:
    """Per-subject potential outcomes retained for diagnostics and truth."""

    event_time_0: np.ndarray
    event_time_1: np.ndarray
    censor_time: np.ndarray
    alive_0: np.ndarray
    alive_1: np.ndarray


@dataclass
class GeneratedSample:
    dataset: Dataset
    latent: LatentOutcomes


def _chol(rho: float) -> np.ndarray:
    cov = np.full((3, 3), rho)
    np.fill_diagonal(cov, 1.0)
    return np.linalg.cholesky(cov)


def _event_rate(X: np.ndarray, a: float, beta_t: float) -> np.ndarray:
    return np.exp(_EVENT_INTERCEPT + beta_t * a + X[:, :2] @ _EVENT_COEF[:2] + _EVENT_COEF[2] * X[:, 0] ** 2)


def _weibull_time(neg_log_u: np.ndarray, rate: np.ndarray, nu: float) -> np.ndarray:
    return (neg_log_u / rate) ** (1.0 / nu)


def _potential_times(rng, X, config: DGPConfig):
    """Draw (T0, T1, alive_0, alive_1) for one chunk of covariates."""
    m = X.shape[0]
    rate0 = _event_rate(X, 0.0, config.beta_t)
    rate1 = _event_rate(X, 1.0, config.beta_t)
    if config.variant == "copula":
        shared = -np.log(rng.uniform(size=m))
        pre0 = _weibull_time(shared, rate0, config.nu)
        pre1 = _weibull_time(shared, rate1, config.nu)
        alive0 = pre0 > config.t0
        alive1 = pre1 > config.t0
        resid0 = _weibull_time(-np.log(rng.uniform(size=m)), rate0, config.nu)
        resid1 = _weibull_time(-np.log(rng.uniform(size=m)), rate1, config.nu)
        t0_pot = np.where(alive0, config.t0 + resid0, pre0)
        t1_pot = np.where(alive1, config.t0 + resid1, pre1)
    else:
        t0_pot = _weibull_time(-np.log(rng.uniform(size=m)), rate0, config.nu)
        t1_pot = _weibull_time(-np.log(rng.uniform(size=m)), rate1, config.nu)
        alive0 = t0_pot > config.t0
        alive1 = t1_pot > config.t0
    return t0_pot, t1_pot, alive0, alive1


def _generate(config: DGPConfig, rng: np.random.Generator) -> GeneratedSample:
    n = config.n
    X = rng.standard_normal((n, 3)) @ _chol(config.rho).T
    if config.randomize:
        p_treat = np.full(n, 1.0 / (1.0 + np.exp(0.5)))
    else:
        design = np.column_stack([np.ones(n), X, X[:, 0] ** 2])
        p_treat = 1.0 / (1.0 + np.exp(-(design @ np.append(_PS_COEF[:4], _PS_COEF[4]))))
    treat = (rng.uniform(size=n) < p_treat).astype(np.int8)
    t0_pot, t1_pot, alive0, alive1 = _potential_times(rng, X, config)
    cens_rate = np.exp(
        _CENS_INTERCEPT
        + _CENS_TREAT * treat
        + _CENS_COEF[0] * X[:, 2]
        + _CENS_COEF[1] * X[:, 0] * X[:, 2]
        + config.censor_shift
    )
    censor = rng.standard_exponential(n) / cens_rate
    t_obs = np.where(treat == 1, t1_pot, t0_pot)
    y = np.minimum(t_obs, censor)
    event = (t_obs <= censor).astype(np.int8)
    dataset = Dataset(X, treat, y, event, COVARIATE_NAMES)
    return GeneratedSample(dataset, LatentOutcomes(t0_pot, t1_pot, censor, alive0, alive1))


def generate(config: DGPConfig) -> GeneratedSample:
    """Draw one sample from the generative model (seeded by ``config.seed``)."""
    return _generate(config, np.random.default_rng(np.random.SeedSequence(config.seed)))


@dataclass
class TruthValues:
    """Monte Carlo values of the observed-survivor and always-survivor
    contrasts, with per-arm quantiles."""

    osqc: float
    psqc: float
    q0: float
    q1: float
    q0_ps: float
    q1_ps: float
    mc_samples: int


_TRUTH_CHUNK = 1_000_000


def _truth_quantiles(config: DGPConfig, taus, t0: float, mc_samples: int, rng) -> dict:
    """Empirical residual-life quantiles of the latent outcomes, uncensored."""
    cfg = replace(config, t0=t0)
    r0_parts, r1_parts, r0_ps_parts, r1_ps_parts = [], [], [], []
    done = 0
    while done < mc_samples:
        m = min(_TRUTH_CHUNK, mc_samples - done)
        X = rng.standard_normal((m, 3)) @ _chol(cfg.rho).T
        t0_pot, t1_pot, alive0, alive1 = _potential_times(rng, X, cfg)
        both = alive0 & alive1
        r0_parts.append(t0_pot[alive0] - t0)
        r1_parts.append(t1_pot[alive1] - t0)
        r0_ps_parts.append(t0_pot[both] - t0)
        r1_ps_parts.append(t1_pot[both] - t0)
        done += m
    r0 = np.concatenate(r0_parts)
    r1 = np.concatenate(r1_parts)
    r0_ps = np.concatenate(r0_ps_parts)
    r1_ps = np.concatenate(r1_ps_parts)
    if min(r0.size, r1.size, r0_ps.size) == 0:
        raise ConfigError(f"no landmark survivors at t0={t0}")
    out = {}
    for tau in taus:
        q0, q1 = (float(np.quantile(r, tau, method="inverted_cdf")) for r in (r0, r1))
        q0_ps, q1_ps = (
            float(np.quantile(r, tau, method="inverted_cdf")) for r in (r0_ps, r1_ps)
        )
        out[tau] = TruthValues(q1 - q0, q1_ps - q0_ps, q0, q1, q0_ps, q1_ps, mc_samples)
    return out


def true_values(config: DGPConfig, tau: float, t0: float, mc_samples: int) -> TruthValues:
    """Simulate the latent outcomes without censoring and read off the
    empirical residual-life quantiles among landmark survivors (observed
    contrast) and among subjects surviving under either arm (latent
    contrast)."""
    if mc_samples < 10_000:
        raise ConfigError(f"mc_samples must be at least 10^4, got {mc_samples}")
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    return _truth_quantiles(config, [tau], t0, mc_samples, rng)[tau]


def scenario_model_specs(scenario: str) -> ModelSpecs:
    """Working-model formulas for one misspecification scenario.

    The first letter grades the propensity model, the second the outcome
    model; a misspecified model omits the quadratic ``x1^2`` term.  The
    censoring model is always correctly specified (includes ``x1:x3``).
    """
    if scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    prop_ok = scenario[0] == "C"
    outcome_ok = scenario[1] == "C"
    prop_terms = [("linear", "x1"), ("linear", "x2"), ("linear", "x3")]
    if prop_ok:
        prop_terms.append(("square", "x1"))
    out_terms = [("linear", "x1"), ("linear", "x2")]
    if outcome_ok:
        out_terms.append(("square", "x1"))
    cens_terms = [("linear", "x3"), ("interaction", "x1", "x3")]
    return ModelSpecs(
        propensity=FormulaSpec(tuple(prop_terms), intercept=True),
        outcome=FormulaSpec(tuple(out_terms), intercept=False),
        censoring=FormulaSpec(tuple(cens_terms), intercept=False),
    )


@dataclass(frozen=True)
class StudyConfig:
    """Grid definition for a Monte Carlo study.

    ``bootstrap_B = 0`` skips resampling (no SE or coverage columns).
    """

    ns: tuple[int, ...]
    beta_ts: tuple[float, ...]
    t0s: tuple[float, ...]
    taus: tuple[float, ...]
    scenarios: tuple[str, ...]
    methods: tuple[str, ...]
    replications: int
    bootstrap_B: int
    alpha: float
    seed: int
    rho: float = 0.2
    nu: float = 1.5
    variant: str = "copula"
    censor_shift: float = 0.0
    randomize: bool = False
    truth_samples: int = 10_000_000

    def __post_init__(self):
        for sc in self.scenarios:
            if sc not in SCENARIOS:
                raise ConfigError(f"grid.scenarios: unknown scenario {sc!r}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"grid.methods: unknown method {m!r}")
        if self.replications < 1:
            raise ConfigError("mc.replications must be >= 1")
        if self.bootstrap_B < 0:
            raise ConfigError("mc.bootstrap_B must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("mc.alpha must be in (0, 1)")
        if self.seed < 0:
            raise ConfigError("mc.seed must be nonnegative")

    @classmethod
    def from_dict(cls, raw: dict) -> "StudyConfig":
        """Build from the documented config-file schema (dgp / grid / mc)."""

        def section(name):
            value = raw.get(name)
            if not isinstance(value, dict):
                raise ConfigError(f"{name}: missing or not a mapping")
            return value

        def need(sec, secname, key, kind=None):
            if key not in sec:
                raise ConfigError(f"{secname}.{key}: missing")
            value = sec[key]
            if kind is not None and not isinstance(value, kind):
                raise ConfigError(f"{secname}.{key}: expected {kind.__name__}, got {value!r}")
            return value

        def as_tuple(value):
            if isinstance(value, (list, tuple)):
                return tuple(value)
            return (value,)

        dgp = section("dgp")
        grid = section("grid")
        mc = section("mc")
        t0s = grid.get("t0s")
        if t0s is None:
            t0s = as_tuple(need(dgp, "dgp", "t0"))
        try:
            return cls(
                ns=tuple(int(v) for v in as_tuple(need(dgp, "dgp", "n"))),
                beta_ts=tuple(float(v) for v in as_tuple(need(dgp, "dgp", "beta_t"))),
                t0s=tuple(float(v) for v in as_tuple(t0s)),
                taus=tuple(float(v) for v in as_tuple(need(grid, "grid", "taus"))),
                scenarios=tuple(as_tuple(need(grid, "grid", "scenarios"))),
                methods=tuple(as_tuple(need(grid, "grid", "methods"))),
                replications=int(need(mc, "mc", "replications")),
                bootstrap_B=int(need(mc, "mc", "bootstrap_B")),
                alpha=float(mc.get("alpha", 0.05)),
                seed=int(need(mc, "mc", "seed")),
                rho=float(dgp.get("rho", 0.2)),
                nu=float(dgp.get("nu", 1.5)),
                variant=str(dgp.get("variant", "copula")),
                censor_shift=float(dgp.get("censor_shift", 0.0)),
                randomize=bool(dgp.get("randomize", False)),
                truth_samples=int(mc.get("truth_samples", 10_000_000)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config value: {exc}") from exc

    def dgp_cells(self) -> list[tuple[int, float, float]]:
        return list(itertools.product(self.ns, self.beta_ts, self.t0s))


@dataclass
class CellResult:
    """One report cell: a (scenario, method, n, tau, t0, beta_t) combination."""

    scenario: str
    method: str
    n: int
    tau: float
    t0: float
    beta_t: float
    variant: str
    truth: float
    truth_kind: str
    bias: float
    emp_se: float
    mean_boot_se: float
    coverage: float
    replications: int
    used: int
    failures: int
    flagged: bool


_CSV_COLUMNS = [
    "scenario", "method", "n", "tau", "t0", "beta_t", "variant", "truth",
    "truth_kind", "bias", "emp_se", "mean_boot_se", "coverage",
    "replications", "used", "failures", "flagged",
]


@dataclass
class SimulationReport:
    study: StudyConfig
    truths: list[dict]
    cells: list[CellResult]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "study": asdict(self.study),
            "truths": self.truths,
            "cells": [asdict(c) for c in self.cells],
        }

    def write_csv(self, path) -> None:
        def fmt(value):
            if isinstance(value, float) and np.isnan(value):
                return ""
            if isinstance(value, bool):
                return "1" if value else "0"
            return repr(value) if isinstance(value, float) else str(value)

        lines = [",".join(_CSV_COLUMNS)]
        for cell in self.cells:
            row = asdict(cell)
            lines.append(",".join(fmt(row[col]) for col in _CSV_COLUMNS))
        with open(path, "w", newline="") as fh:
            fh.write("\n".join(lines) + "\n")

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, allow_nan=True)
            fh.write("\n")


def _run_replication(args) -> tuple[int, int, list]:
    """Worker: one replication of one DGP cell, all scenarios/methods/taus."""
    study, d, r = args
    n, beta_t, t0 = study.dgp_cells()[d]
    config = DGPConfig(
        n=n, beta_t=beta_t, rho=study.rho, nu=study.nu, t0=t0, variant=study.variant,
        censor_shift=study.censor_shift, randomize=study.randomize,
    )
    rng = np.random.default_rng(np.random.SeedSequence(study.seed, spawn_key=(0, d, r)))
    data = _generate(config, rng).dataset
    rows = []
    weighted = any(m != "km" for m in study.methods)
    for s_idx, scenario in enumerate(study.scenarios):
        specs = scenario_model_specs(scenario)
        nuis = None
        if weighted:
            try:
                nuis = fit_nuisances(data, specs)
            except FitError:
                nuis = None
        points = _try_estimates(data, t0, study.taus, study.methods, specs, nuis=nuis)
        if study.bootstrap_B > 0:
            boot = _resample_deltas(
                data, t0, study.taus, study.methods, specs, study.bootstrap_B,
                seed=(study.seed, 1, d, r, s_idx), threads=1, warm=nuis,
            )
        else:
            boot = None
        for method in study.methods:
            for tau in study.taus:
                delta = points.get((method, tau))
                if boot is not None and delta is not None:
                    reps = boot[(method, tau)]
                    ok = reps[~np.isnan(reps)]
                    se = float(np.std(ok, ddof=1)) if ok.size >= 2 else float("nan")
                else:
                    se = float("nan")
                rows.append((scenario, method, tau, delta, se))
    return d, r, rows


def run_study(study: StudyConfig, threads: int = 1) -> SimulationReport:
    """Run the full scenario grid and aggregate bias, SE, and coverage.

    Replications are independent work units keyed by (DGP cell, replicate
    index); output is identical for a given seed regardless of ``threads``.
    """
    cells = study.dgp_cells()
    tasks = [(study, d, r) for d in range(len(cells)) for r in range(study.replications)]
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunk = max(1, len(tasks) // (threads * 8))
            outputs = list(pool.map(_run_replication, tasks, chunksize=chunk))
    else:
        outputs = [_run_replication(t) for t in tasks]
    by_rep = {(d, r): rows for d, r, rows in outputs}

    # Truth per unique (beta_t, t0), shared across sample sizes.
    truth_keys = sorted({(beta_t, t0) for _, beta_t, t0 in cells})
    truths: dict = {}
    for j, (beta_t, t0) in enumerate(truth_keys):
        config = DGPConfig(
            n=1, beta_t=beta_t, rho=study.rho, nu=study.nu, t0=t0, variant=study.variant,
            censor_shift=study.censor_shift, randomize=study.randomize,
        )
        rng = np.random.default_rng(np.random.SeedSequence(study.seed, spawn_key=(2, j)))
        truths[(beta_t, t0)] = _truth_quantiles(config, study.taus, t0, study.truth_samples, rng)

    z = float(norm.ppf(1.0 - study.alpha / 2.0))
    out_cells = []
    for d, (n, beta_t, t0) in enumerate(cells):
        for scenario in study.scenarios:
            for method in study.methods:
                for tau in study.taus:
                    truth_vals = truths[(beta_t, t0)][tau]
                    if method == "ps":
                        if study.variant == "copula":
                            truth, kind = truth_vals.psqc, "psqc"
                        else:
                            truth, kind = truth_vals.osqc, "osqc_fallback"
                    else:
                        truth, kind = truth_vals.osqc, "osqc"
                    deltas, ses = [], []
                    for r in range(study.replications):
                        for sc, m, tv, delta, se in by_rep[(d, r)]:
                            if sc == scenario and m == method and tv == tau:
                                if delta is not None:
                                    deltas.append(delta)
                                    ses.append(se)
                    deltas = np.asarray(deltas)
                    ses = np.asarray(ses)
                    used = deltas.size
                    failures = study.replications - used
                    bias = float(np.mean(deltas) - truth) if used else float("nan")
                    emp_se = float(np.std(deltas, ddof=1)) if used >= 2 else float("nan")
                    with_se = ses[~np.isnan(ses)] if used else np.empty(0)
                    mean_boot_se = float(np.mean(with_se)) if with_se.size else float("nan")
                    if with_se.size:
                        good = ~np.isnan(ses)
                        cover = np.abs(deltas[good] - truth) <= z * ses[good]
                        coverage = float(np.mean(cover))
                    else:
                        coverage = float("nan")
                    out_cells.append(
                        CellResult(
                            scenario=scenario, method=method, n=n, tau=tau, t0=t0,
                            beta_t=beta_t, variant=study.variant, truth=truth,
                            truth_kind=kind, bias=bias, emp_se=emp_se,
                            mean_boot_se=mean_boot_se, coverage=coverage,
                            replications=study.replications, used=used,
                            failures=failures,
                            flagged=failures > 0.1 * study.replications,
                        )
                    )
    truth_rows = [
        {
            "beta_t": beta_t,
            "t0": t0,
            "variant": study.variant,
            "taus": {
                repr(tau): asdict(tv) for tau, tv in truths[(beta_t, t0)].items()
            },
        }
        for (beta_t, t0) in truth_keys
    ]
    return SimulationReport(study, truth_rows, out_cells)

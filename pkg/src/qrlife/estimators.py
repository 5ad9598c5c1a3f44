"""Residual-lifetime quantile estimators for landmark survivors.

Four methods estimate the per-arm tau-quantile of remaining lifetime beyond a
landmark ``t0`` and difference the arms:

* ``km`` - naive Kaplan-Meier on each arm's landmark survivors (no adjustment),
* ``iw`` - inverse-probability weighting for treatment assignment combined
  with inverse-probability-of-censoring weighting,
* ``dr`` - the ``iw`` equation augmented with an outcome-regression term,
  consistent when either the propensity or the outcome model is correct
  (given a correct censoring model),
* ``ps`` - the ``iw`` equation reweighted by survival-probability ratios so
  the treated survivors match the covariate profile of subjects who would
  survive the landmark under either arm.

Each estimating function is a step function in the quantile candidate
``theta``; the solver returns the smallest candidate at which the function
becomes nonnegative (generalized inverse).  Candidates are the arm's observed
event residuals, so the solve is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, FormulaSpec, design_matrix
from .nuisance import (
    WEIGHT_FLOOR,
    CoxFit,
    FitError,
    ModelSpecs,
    NuisanceSet,
    fit_km,
    fit_nuisances,
)

__all__ = [
    "METHODS",
    "EstimationError",
    "EstimandSpec",
    "QuantileEstimate",
    "DeltaEstimate",
    "SelectionWeights",
    "u_iw",
    "u_dr",
    "solve_quantile",
    "selection_weights",
    "km_residual_quantile",
    "estimate_delta",
]

METHODS = ("km", "iw", "dr", "ps")


class EstimationError(ValueError):
    """The requested estimand cannot be computed on the given data."""


@dataclass(frozen=True)
class EstimandSpec:
    """One target: arm, landmark time, quantile level, and method."""

    arm: int
    t0: float
    tau: float
    method: str = "iw"

    def __post_init__(self):
        if self.arm not in (0, 1):
            raise EstimationError(f"arm must be 0 or 1, got {self.arm}")
        if not 0.0 < self.tau < 1.0:
            raise EstimationError(f"tau must be in (0, 1), got {self.tau}")
        if not self.t0 > 0.0:
            raise EstimationError(f"t0 must be positive, got {self.t0}")
        if self.method not in METHODS:
            raise EstimationError(f"method must be one of {METHODS}, got {self.method!r}")


@dataclass
class QuantileEstimate:
    """Solved residual-lifetime quantile for one arm.

    ``theta`` is ``None`` when the estimating function stays negative over
    every candidate (the quantile is not identifiable from the data).
    """

    theta: float | None
    candidates_scanned: int = 0
    clamped_weights: int = 0

    @property
    def identifiable(self) -> bool:
        return self.theta is not None


@dataclass
class DeltaEstimate:
    """Between-arm difference of residual-lifetime quantiles (arm 1 - arm 0)."""

    q1: QuantileEstimate
    q0: QuantileEstimate

    @property
    def delta(self) -> float | None:
        if self.q1.identifiable and self.q0.identifiable:
            return self.q1.theta - self.q0.theta
        return None

    @property
    def identifiable(self) -> bool:
        return self.delta is not None


@dataclass
class SelectionWeights:
    """Per-record reweighting toward the always-survivor covariate profile."""

    weights: np.ndarray
    clamped: int = 0


def _clamped(values: np.ndarray) -> tuple[np.ndarray, int]:
    hits = int(np.count_nonzero(values < WEIGHT_FLOOR))
    return np.maximum(values, WEIGHT_FLOOR), hits


def _propensity_for_arm(nuis: NuisanceSet, data: Dataset, arm: int) -> np.ndarray:
    e1 = nuis.propensity.predict(design_matrix(data, nuis.specs.propensity))
    return e1 if arm == 1 else 1.0 - e1


def u_iw(
    theta: float,
    spec: EstimandSpec,
    data: Dataset,
    nuis: NuisanceSet,
    extra_weights: SelectionWeights | None = None,
) -> float:
    """Inverse-weighted estimating function at one candidate ``theta``.

    Returns ``(1/n) sum_i w_i [I(A_i=a)/e_a(X_i)] [I(t0 < Y_i <= t0+theta,
    D_i=1)/G_a(Y_i|X_i) - tau I(Y_i > t0)/G_a(t0|X_i)]`` with probabilities
    floored at ``WEIGHT_FLOOR`` before division.
    """
    a, t0, tau = spec.arm, spec.t0, spec.tau
    y, d = data.follow_up, data.event
    mask = data.treatment == a
    ehat, _ = _clamped(_propensity_for_arm(nuis, data, a)[mask])
    cens_design = design_matrix(data, nuis.specs.censoring)[mask]
    g_y, _ = _clamped(nuis.censoring.survival(y[mask], cens_design, a))
    g_t0, _ = _clamped(nuis.censoring.survival(t0, cens_design, a))
    w = extra_weights.weights[mask] if extra_weights is not None else 1.0
    ya, da = y[mask], d[mask]
    in_window = (ya > t0) & (ya <= t0 + theta) & (da == 1)
    survive = ya > t0
    bracket = in_window / g_y - tau * survive / g_t0
    return float(np.sum(w * bracket / ehat) / data.n)


def u_dr(theta: float, spec: EstimandSpec, data: Dataset, nuis: NuisanceSet) -> float:
    """Augmented estimating function: ``u_iw`` minus the outcome-regression
    correction ``(1/n) sum_i [(I(A_i=a)-e_a)/e_a] [(mu_a(t0)-mu_a(t0+theta))
    - tau mu_a(t0)]`` evaluated at every subject's covariates.
    """
    a, t0, tau = spec.arm, spec.t0, spec.tau
    base = u_iw(theta, spec, data, nuis)
    ehat, _ = _clamped(_propensity_for_arm(nuis, data, a))
    in_arm = (data.treatment == a).astype(float)
    mult = (in_arm - ehat) / ehat
    out_design = design_matrix(data, nuis.specs.outcome)
    mu_t0 = nuis.outcome.survival(t0, out_design, a)
    mu_theta = nuis.outcome.survival(t0 + theta, out_design, a)
    bracket = (mu_t0 - mu_theta) - tau * mu_t0
    return base - float(np.sum(mult * bracket) / data.n)


def _event_candidates(data: Dataset, arm: int, t0: float) -> np.ndarray:
    y, d = data.follow_up, data.event
    mask = (data.treatment == arm) & (d == 1) & (y > t0)
    return np.unique(y[mask] - t0)


def solve_quantile(evaluator, data: Dataset, spec: EstimandSpec) -> QuantileEstimate:
    """Generalized inverse of a monotone-step estimating function.

    Scans ``{0} + sorted distinct event residuals`` of the arm in ascending
    order and returns the smallest candidate with ``evaluator(theta) >= 0``.
    With no event residuals, or a negative evaluator everywhere, the quantile
    is flagged non-identifiable.
    """
    candidates = _event_candidates(data, spec.arm, spec.t0)
    if candidates.size == 0:
        return QuantileEstimate(None, 0)
    scanned = 0
    for theta in np.concatenate(([0.0], candidates)):
        scanned += 1
        if evaluator(float(theta)) >= 0.0:
            return QuantileEstimate(float(theta), scanned)
    return QuantileEstimate(None, scanned)


def _selection_weights_on(out_design, treated, outcome_fit: CoxFit, t0: float) -> SelectionWeights:
    weights = np.ones(treated.shape[0])
    if np.any(treated):
        pi0 = outcome_fit.survival(t0, out_design[treated], 0)
        pi1, clamped = _clamped(outcome_fit.survival(t0, out_design[treated], 1))
        weights[treated] = pi0 / pi1
    else:
        clamped = 0
    return SelectionWeights(weights, clamped)


def selection_weights(
    data: Dataset, outcome_fit: CoxFit, t0: float, outcome_spec: FormulaSpec
) -> SelectionWeights:
    """Ratio weights ``P(T_0 > t0 | X)/P(T_1 > t0 | X)`` for treated records.

    Control records keep weight 1.  The denominator is floored at
    ``WEIGHT_FLOOR`` before division; the number of floored evaluations is
    reported.
    """
    return _selection_weights_on(
        design_matrix(data, outcome_spec), data.treatment == 1, outcome_fit, t0
    )


def km_residual_quantile(times, events, tau: float, t0: float, scale: str = "cdf") -> QuantileEstimate:
    """Unadjusted comparator: tau-quantile of the Kaplan-Meier curve of
    ``Y - t0`` among records with ``Y > t0``.

    ``scale="cdf"`` returns the smallest residual with ``1 - KM >= tau``.
    ``scale="survival"`` instead returns the level-tau crossing of the
    survival curve itself (``KM <= tau``); the two coincide at tau = 0.5.
    The naive method inside :func:`estimate_delta` and the study harness
    uses the survival-scale crossing.
    """
    y = np.asarray(times, dtype=float)
    d = np.asarray(events)
    survivors = y > t0
    if not np.any(survivors):
        raise EstimationError(f"no survivors beyond t0={t0}")
    return _km_quantile(y[survivors] - t0, d[survivors], tau, scale)


def _km_quantile(residuals, events, tau: float, scale: str = "cdf") -> QuantileEstimate:
    if scale not in ("cdf", "survival"):
        raise EstimationError(f"scale must be 'cdf' or 'survival', got {scale!r}")
    curve = fit_km(residuals, events)
    if curve.times.size == 0:
        return QuantileEstimate(None, 0)
    level = 1.0 - tau if scale == "cdf" else tau
    hit = np.flatnonzero(curve.surv <= level)
    if hit.size == 0:
        return QuantileEstimate(None, curve.times.size)
    return QuantileEstimate(float(curve.times[hit[0]]), curve.times.size)


# ---------------------------------------------------------------------------
# Vectorized estimation over all candidates, shared by every weighted method.
# ---------------------------------------------------------------------------


class _EvalContext:
    """Design matrices and shared propensity values, built once per dataset."""

    def __init__(self, data: Dataset, nuis: NuisanceSet):
        self.ps_design = design_matrix(data, nuis.specs.propensity)
        self.cens_design = design_matrix(data, nuis.specs.censoring)
        self.out_design = design_matrix(data, nuis.specs.outcome)
        self.e1 = nuis.propensity.predict(self.ps_design)


class _ArmProfile:
    """Per-arm ingredients of the estimating functions, tau-independent.

    The inverse-weighted estimating function at candidate ``theta_k`` is
    ``(cum_jumps[k] - tau * surv_mass) / n``; the selection-weighted variant
    swaps in the weighted sums; the augmented variant subtracts
    ``(aug_minus_mu[k] - tau * aug_mu_t0) / n``.
    """

    def __init__(self, data: Dataset, nuis: NuisanceSet, arm: int, t0: float,
                 ctx: _EvalContext, sel: SelectionWeights | None = None,
                 need_dr: bool = False):
        y, d = data.follow_up, data.event
        mask = data.treatment == arm
        self.n = data.n
        self.arm = arm
        self.t0 = t0
        self.n_survivors = int(np.count_nonzero(mask & (y > t0)))

        e_raw = ctx.e1 if arm == 1 else 1.0 - ctx.e1
        e_floored = e_raw < WEIGHT_FLOOR
        ehat_full = np.maximum(e_raw, WEIGHT_FLOOR)
        clamp_e_full = int(np.count_nonzero(e_floored))
        ehat = ehat_full[mask]
        cens_design = ctx.cens_design[mask]
        ya, da = y[mask], d[mask]
        survive = ya > t0
        ev = survive & (da == 1)
        g_t0, clamp_g0 = _clamped(nuis.censoring.survival(t0, cens_design, arm))
        g_y, clamp_gy = _clamped(nuis.censoring.survival(ya[ev], cens_design[ev], arm))
        self.clamp_iw = int(np.count_nonzero(e_floored[mask] & survive)) + clamp_g0 + clamp_gy

        res = ya[ev] - t0
        jumps = 1.0 / (ehat[ev] * g_y)
        order = np.argsort(res, kind="stable")
        res_s, jumps_s = res[order], jumps[order]
        self.candidates, first = np.unique(res_s, return_index=True)
        cum = np.cumsum(jumps_s)
        last = np.append(first[1:], res_s.size) - 1
        self.cum_jumps = cum[last] if res_s.size else np.empty(0)
        self.surv_mass = float(np.sum(survive / (ehat * g_t0)))

        if sel is not None:
            w = sel.weights[mask]
            cum_w = np.cumsum((w[ev] * jumps)[order])
            self.cum_jumps_sel = cum_w[last] if res_s.size else np.empty(0)
            self.surv_mass_sel = float(np.sum(w * survive / (ehat * g_t0)))
            self.clamp_sel = self.clamp_iw + (sel.clamped if arm == 1 else 0)

        if need_dr:
            in_arm = mask.astype(float)
            mult = (in_arm - ehat_full) / ehat_full
            risk = np.exp(np.minimum(ctx.out_design @ nuis.outcome.coefficients, 700.0))
            mu_t0 = np.exp(-nuis.outcome.cumhaz_before(t0, arm) * risk)
            cumhaz = nuis.outcome.cumhaz_before(t0 + np.concatenate(([0.0], self.candidates)), arm)
            mu_all = np.exp(-np.outer(risk, cumhaz))
            self.aug_mu_t0 = float(np.sum(mult * mu_t0))
            self.aug_minus_mu = np.sum(mult * mu_t0) - mult @ mu_all
            self.clamp_dr = self.clamp_iw + clamp_e_full

    def solve(self, method: str, tau: float) -> QuantileEstimate:
        if self.candidates.size == 0:
            return QuantileEstimate(None, 0, 0)
        if method == "ps":
            cum, mass, clamp = self.cum_jumps_sel, self.surv_mass_sel, self.clamp_sel
        else:
            cum, mass, clamp = self.cum_jumps, self.surv_mass, self.clamp_iw
        u = np.concatenate(([0.0], cum)) - tau * mass
        u /= self.n
        if method == "dr":
            u = u - (self.aug_minus_mu - tau * self.aug_mu_t0) / self.n
            clamp = self.clamp_dr
        nonneg = np.flatnonzero(u >= 0.0)
        scanned = u.size
        if nonneg.size == 0:
            return QuantileEstimate(None, scanned, clamp)
        k = nonneg[0]
        theta = 0.0 if k == 0 else float(self.candidates[k - 1])
        return QuantileEstimate(theta, scanned, clamp)


def _estimate_all(
    data: Dataset,
    t0: float,
    taus,
    methods,
    model_specs: ModelSpecs,
    nuis: NuisanceSet | None = None,
    warm: NuisanceSet | None = None,
) -> dict:
    """Solve every (method, tau) pair, sharing nuisance fits and profiles.

    Returns ``{(method, tau): DeltaEstimate}``.  Raises
    :class:`EstimationError` when an arm is absent or a required nuisance
    model cannot be fit.  ``nuis`` supplies prefit nuisances; ``warm`` only
    warm-starts fresh fits.
    """
    methods = list(methods)
    taus = list(taus)
    for m in methods:
        if m not in METHODS:
            raise EstimationError(f"unknown method {m!r}")
    counts = [int(np.count_nonzero(data.treatment == a)) for a in (0, 1)]
    if min(counts) == 0:
        raise EstimationError("both treatment arms are required")

    results: dict = {}
    if "km" in methods:
        per_arm = {}
        for arm in (0, 1):
            mask = data.treatment == arm
            ya, da = data.follow_up[mask], data.event[mask]
            if not np.any(ya > t0):
                per_arm[arm] = {tau: QuantileEstimate(None, 0) for tau in taus}
            else:
                per_arm[arm] = {
                    tau: _km_quantile(ya[ya > t0] - t0, da[ya > t0], tau, "survival")
                    for tau in taus
                }
        for tau in taus:
            results[("km", tau)] = DeltaEstimate(per_arm[1][tau], per_arm[0][tau])

    weighted = [m for m in methods if m != "km"]
    if weighted:
        if nuis is None:
            try:
                nuis = fit_nuisances(data, model_specs, warm=warm)
            except FitError as exc:
                raise EstimationError(f"nuisance fitting failed: {exc}") from exc
        ctx = _EvalContext(data, nuis)
        sel = (
            _selection_weights_on(ctx.out_design, data.treatment == 1, nuis.outcome, t0)
            if "ps" in weighted
            else None
        )
        need_dr = "dr" in weighted
        profiles = {
            arm: _ArmProfile(data, nuis, arm, t0, ctx, sel=sel, need_dr=need_dr)
            for arm in (0, 1)
        }
        for method in weighted:
            for tau in taus:
                results[(method, tau)] = DeltaEstimate(
                    profiles[1].solve(method, tau), profiles[0].solve(method, tau)
                )
    return results


def estimate_delta(
    data: Dataset,
    t0: float,
    tau: float,
    method: str,
    model_specs: ModelSpecs,
) -> DeltaEstimate:
    """Point estimate of the between-arm residual-life quantile contrast.

    Nuisance models are fit once on the full sample; each arm's quantile is
    then solved with the chosen method and the arms are differenced.
    """
    EstimandSpec(1, t0, tau, method)  # validates the estimand parameters
    return _estimate_all(data, t0, [tau], [method], model_specs)[(method, tau)]

"""Nuisance models: propensity logistic fit, stratified Cox fits, Kaplan-Meier.

Three fitted objects feed the weighted estimating equations:

* a logistic model for treatment assignment probability,
* a Cox model for the censoring distribution (event indicator flipped,
  stratified by treatment arm), and
* a Cox model for the outcome distribution (stratified by treatment arm).

Both Newton-type solvers stop when the score max-norm falls below
``SCORE_TOL`` and fall back to step-halving whenever a full step would
decrease the (partial) likelihood.  Survival evaluations are left-continuous,
``S(t) = exp(-H(t-) exp(x'b))``, so a subject's own jump never enters their
weight; baselines are carried forward flat beyond the last event time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import Dataset, FormulaSpec, design_matrix

__all__ = [
    "FitError",
    "LogisticFit",
    "StepFunction",
    "CoxFit",
    "KMCurve",
    "ModelSpecs",
    "NuisanceSet",
    "fit_logistic",
    "fit_cox",
    "fit_km",
    "survival_at",
    "fit_nuisances",
    "SCORE_TOL",
    "MAX_ITER",
    "WEIGHT_FLOOR",
]

SCORE_TOL = 1e-8
MAX_ITER = 100
MAX_HALVINGS = 20
# Floor applied to estimated probabilities before any division.
WEIGHT_FLOOR = 1e-6


def _ll_tolerance(ll: float) -> float:
    # noise floor for step acceptance: a Newton step whose apparent likelihood
    # change is below this is rounding error, not a real decrease
    return 1e-9 * (abs(ll) + 1.0)


class FitError(ValueError):
    """A nuisance model cannot be fit on the given data."""


def _bernoulli_loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # sum_i y_i eta_i - log(1 + exp(eta_i)), stable for large |eta|
    return float(np.sum(y * eta) - np.sum(np.logaddexp(0.0, eta)))


@dataclass
class LogisticFit:
    """Maximum-likelihood logistic regression on a fixed design matrix."""

    coefficients: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float

    def predict(self, design: np.ndarray) -> np.ndarray:
        """P(label = 1 | x) for each design row."""
        return expit(design @ self.coefficients)


def fit_logistic(design: np.ndarray, labels: np.ndarray, init=None) -> LogisticFit:
    """Fit by Newton-Raphson with step-halving.

    Converged when ``max |score component| < SCORE_TOL`` within ``MAX_ITER``
    iterations.  Under separation or a singular Hessian the last stable
    iterate is returned with ``converged=False``.  ``init`` warm-starts the
    iteration (zeros by default).
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise FitError("design and labels are not aligned")
    if y.min() == y.max():
        raise FitError("labels contain a single class")
    n, p = X.shape
    beta = np.zeros(p) if init is None else np.array(init, dtype=float)
    ll = _bernoulli_loglik(X @ beta, y)
    converged = False
    it = 0
    while it < MAX_ITER:
        prob = expit(X @ beta)
        score = X.T @ (y - prob)
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
        it += 1
        w = prob * (1.0 - prob)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(hess, score, rcond=None)
        if not np.all(np.isfinite(step)):
            break
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + step
            cand_ll = _bernoulli_loglik(X @ cand, y)
            if np.isfinite(cand_ll) and cand_ll >= ll - _ll_tolerance(ll):
                beta, ll = cand, cand_ll
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break  # likelihood cannot be improved along the Newton direction
    return LogisticFit(beta, converged, it, ll)


@dataclass
class StepFunction:
    """Right-continuous cumulative step function, zero before the first jump."""

    times: np.ndarray
    values: np.ndarray

    def left_value(self, t):
        """Value strictly before ``t`` (flat beyond the last jump)."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="left")
        padded = np.concatenate(([0.0], self.values))
        return padded[idx]


@dataclass
class CoxFit:
    """Stratified Cox model with Breslow ties and Breslow baselines.

    ``baseline[s]`` is the cumulative-hazard step function of stratum ``s``,
    jumping at that stratum's distinct event times.
    """

    coefficients: np.ndarray
    strata: tuple
    baseline: dict
    converged: bool
    iterations: int
    log_likelihood: float

    def _base(self, stratum) -> StepFunction:
        try:
            return self.baseline[stratum]
        except KeyError:
            raise FitError(f"unknown stratum {stratum!r}") from None

    def cumhaz_before(self, t, stratum):
        """Baseline cumulative hazard strictly before time(s) ``t``."""
        return self._base(stratum).left_value(t)

    def survival(self, t, design: np.ndarray, stratum) -> np.ndarray:
        """Left-continuous conditional survival ``P(T >= t | x)`` per row.

        ``t`` may be a scalar or one time per design row.
        """
        risk = np.exp(np.minimum(design @ self.coefficients, 700.0))
        return np.exp(-self.cumhaz_before(t, stratum) * risk)


def survival_at(fit: CoxFit, t: float, x_row: np.ndarray, stratum) -> float:
    """Conditional survival of one subject at time ``t`` (left-continuous)."""
    return float(fit.survival(t, np.atleast_2d(np.asarray(x_row, dtype=float)), stratum)[0])


class _CoxStratum:
    """Sorted arrays and risk-set offsets for one stratum, computed once."""

    def __init__(self, X, times, events):
        order = np.argsort(times, kind="stable")
        self.Xs = X[order]
        self.ts = times[order]
        ds = events[order]
        n, p = self.Xs.shape
        event_times = self.ts[ds == 1]
        self.uniq = np.unique(event_times)
        # index of the first subject with Y >= u: risk set = rows [start:]
        self.start = np.searchsorted(self.ts, self.uniq, side="left")
        self.counts = (
            np.searchsorted(event_times, self.uniq, side="right")
            - np.searchsorted(event_times, self.uniq, side="left")
        ).astype(float)
        self.sum_x_events = self.Xs[ds == 1].sum(axis=0)
        self.n_events = float(np.count_nonzero(ds))
        # flattened upper triangle of x x' per row, for the information matrix
        self.iu, self.ju = np.triu_indices(p)
        self.XO = self.Xs[:, self.iu] * self.Xs[:, self.ju]

    def evaluate(self, beta):
        """Breslow partial log-likelihood, score, and information.

        A risk-set sum that underflows to zero (wildly diverged ``beta``)
        yields ``ll = -inf``; the solver's step acceptance rejects it.
        """
        Xs, start, counts = self.Xs, self.start, self.counts
        n, p = Xs.shape
        eta = Xs @ beta
        shift = eta.max()
        e = np.exp(eta - shift)
        W = np.empty((n, 1 + p + self.XO.shape[1]))
        W[:, 0] = e
        W[:, 1 : 1 + p] = Xs * e[:, None]
        W[:, 1 + p :] = self.XO * e[:, None]
        S = np.cumsum(W[::-1], axis=0)[::-1][start]
        s0 = S[:, 0]
        s1 = S[:, 1 : 1 + p]
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = float(self.sum_x_events @ beta - counts @ np.log(s0) - self.n_events * shift)
            xbar = s1 / s0[:, None]
            score = self.sum_x_events - counts @ xbar
            flat = counts @ (S[:, 1 + p :] / s0[:, None]) - counts @ (
                xbar[:, self.iu] * xbar[:, self.ju]
            )
        info = np.empty((p, p))
        info[self.iu, self.ju] = flat
        info[self.ju, self.iu] = flat
        return ll, score, info

    def baseline(self, beta) -> StepFunction:
        if self.uniq.size == 0:
            return StepFunction(np.empty(0), np.empty(0))
        eta = self.Xs @ beta
        shift = eta.max()
        e = np.exp(eta - shift)
        s0 = np.cumsum(e[::-1])[::-1][self.start]
        jumps = self.counts / (s0 * np.exp(shift))
        return StepFunction(self.uniq, np.cumsum(jumps))


def fit_cox(
    design: np.ndarray, times: np.ndarray, events: np.ndarray, strata=None, init=None
) -> CoxFit:
    """Fit a stratified Cox model by Newton-Raphson on the Breslow partial
    likelihood, then compute per-stratum Breslow baseline cumulative hazards.

    Raises :class:`FitError` when there are no events at all.  Non-convergence
    within ``MAX_ITER`` iterations is flagged, keeping the last stable iterate.
    ``init`` warm-starts the iteration (zeros by default).
    """
    X = np.asarray(design, dtype=float)
    t = np.asarray(times, dtype=float)
    d = np.asarray(events, dtype=float).astype(np.int8)
    n, p = X.shape
    if strata is None:
        strata = np.zeros(n, dtype=np.int8)
    s = np.asarray(strata)
    if not (t.shape == (n,) and d.shape == (n,) and s.shape == (n,)):
        raise FitError("design, times, events, strata are not aligned")
    if d.sum() == 0:
        raise FitError("no events")
    labels = tuple(np.unique(s).tolist())
    per_stratum = [_CoxStratum(X[s == lab], t[s == lab], d[s == lab]) for lab in labels]
    active = [st for st in per_stratum if st.uniq.size]

    def objective(beta):
        ll = 0.0
        score = np.zeros(p)
        info = np.zeros((p, p))
        for st in active:
            ll_s, sc_s, info_s = st.evaluate(beta)
            ll += ll_s
            score += sc_s
            info += info_s
        return ll, score, info

    beta = np.zeros(p) if init is None else np.array(init, dtype=float)
    ll, score, info = objective(beta)
    if not np.isfinite(ll):  # unusable warm start
        beta = np.zeros(p)
        ll, score, info = objective(beta)
    converged = False
    it = 0
    while it < MAX_ITER:
        if np.max(np.abs(score)) < SCORE_TOL:
            converged = True
            break
        it += 1
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            step, *_ = np.linalg.lstsq(info, score, rcond=None)
        if not np.all(np.isfinite(step)):
            break
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            cand = beta + step
            cand_ll, cand_score, cand_info = objective(cand)
            if np.isfinite(cand_ll) and cand_ll >= ll - _ll_tolerance(ll):
                beta, ll, score, info = cand, cand_ll, cand_score, cand_info
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break

    baseline = {lab: st.baseline(beta) for lab, st in zip(labels, per_stratum)}
    return CoxFit(beta, labels, baseline, converged, it, ll)


@dataclass
class KMCurve:
    """Kaplan-Meier survival curve: ``times`` are jump points, ``surv`` the
    value at and after each jump.  Equals 1 before the first jump."""

    times: np.ndarray
    surv: np.ndarray
    n_risk: np.ndarray = field(default_factory=lambda: np.empty(0))

    def survival(self, t):
        """Right-continuous survival probability at time(s) ``t``."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate(([1.0], self.surv))
        return padded[idx]


def fit_km(times: np.ndarray, events: np.ndarray) -> KMCurve:
    """Product-limit estimator; ties resolved events-before-censorings."""
    t = np.asarray(times, dtype=float)
    d = np.asarray(events)
    if t.size == 0:
        raise FitError("empty input")
    order = np.argsort(t, kind="stable")
    ts, ds = t[order], d[order]
    uniq = np.unique(ts[ds == 1])
    if uniq.size == 0:
        return KMCurve(np.empty(0), np.empty(0))
    n_risk = ts.size - np.searchsorted(ts, uniq, side="left")
    ev_sorted = ts[ds == 1]
    n_event = np.searchsorted(ev_sorted, uniq, side="right") - np.searchsorted(
        ev_sorted, uniq, side="left"
    )
    surv = np.cumprod(1.0 - n_event / n_risk)
    return KMCurve(uniq, surv, n_risk.astype(float))


@dataclass(frozen=True)
class ModelSpecs:
    """Design formulas for the three nuisance models."""

    propensity: FormulaSpec
    outcome: FormulaSpec
    censoring: FormulaSpec


@dataclass
class NuisanceSet:
    """The fitted propensity, censoring, and outcome models plus their specs.

    ``degraded`` names the components that failed to converge; an empty tuple
    means every fit converged.
    """

    propensity: LogisticFit
    censoring: CoxFit
    outcome: CoxFit
    specs: ModelSpecs
    degraded: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.degraded


def fit_nuisances(data: Dataset, specs: ModelSpecs, warm: "NuisanceSet | None" = None) -> NuisanceSet:
    """Fit all three nuisance models on one dataset.

    The censoring model is a treatment-stratified Cox fit on the flipped
    event indicator.  When no subject is censored the censoring model is the
    exact degenerate limit (survival identically 1), not an error.  ``warm``
    supplies starting coefficients (e.g. the full-sample fits when refitting
    on bootstrap resamples); the convergence criterion is unchanged.
    """

    def start(fit, ncols):
        if warm is None or fit.coefficients.shape != (ncols,):
            return None
        return fit.coefficients

    prop_design = design_matrix(data, specs.propensity)
    prop = fit_logistic(
        prop_design, data.treatment, init=start(warm.propensity, prop_design.shape[1]) if warm else None
    )
    cens_design = design_matrix(data, specs.censoring)
    cens_events = 1 - data.event
    if cens_events.sum() == 0:
        labels = tuple(np.unique(data.treatment).tolist())
        cens = CoxFit(
            np.zeros(cens_design.shape[1]),
            labels,
            {lab: StepFunction(np.empty(0), np.empty(0)) for lab in labels},
            True,
            0,
            0.0,
        )
    else:
        cens = fit_cox(
            cens_design, data.follow_up, cens_events, data.treatment,
            init=start(warm.censoring, cens_design.shape[1]) if warm else None,
        )
    out_design = design_matrix(data, specs.outcome)
    outcome = fit_cox(
        out_design, data.follow_up, data.event, data.treatment,
        init=start(warm.outcome, out_design.shape[1]) if warm else None,
    )
    degraded = tuple(
        name
        for name, fit in (("propensity", prop), ("censoring", cens), ("outcome", outcome))
        if not fit.converged
    )
    return NuisanceSet(prop, cens, outcome, specs, degraded)

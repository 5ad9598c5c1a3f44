"""Shared fixture builders and property checks.

The check functions here are used both by the per-module unit tests and by
the consolidated property gate in test_acceptance.py.
"""

import numpy as np

from qrlife import (
    CoxFit,
    Dataset,
    EstimandSpec,
    FormulaSpec,
    LogisticFit,
    ModelSpecs,
    NuisanceSet,
    StepFunction,
    fit_km,
    fit_nuisances,
    solve_quantile,
    u_iw,
)
from qrlife.data import design_matrix


def linear_specs(names=("x1",), prop_intercept=True) -> ModelSpecs:
    terms = tuple(("linear", n) for n in names)
    return ModelSpecs(
        propensity=FormulaSpec(terms, intercept=prop_intercept),
        outcome=FormulaSpec(terms, intercept=False),
        censoring=FormulaSpec(terms, intercept=False),
    )


def small_random_dataset(rng, n_min=12, n_max=30) -> Dataset:
    """Random two-arm survival data suitable for nuisance fitting."""
    while True:
        n = int(rng.integers(n_min, n_max + 1))
        x = rng.normal(size=(n, 1))
        a = (rng.uniform(size=n) < 0.5).astype(int)
        t = rng.exponential(1.0, size=n) * np.exp(-0.3 * x[:, 0])
        c = rng.exponential(2.0, size=n)
        y = np.minimum(t, c)
        d = (t <= c).astype(int)
        both_arms = 0 < a.sum() < n
        if both_arms and d.sum() >= 2 and all(d[a == arm].sum() >= 1 for arm in (0, 1)):
            return Dataset(x, a, y, d, ("x1",))


def flat_cox(baselines: dict, p: int = 1) -> CoxFit:
    """Hand-set Cox fit: zero coefficients and given per-stratum baselines."""
    return CoxFit(np.zeros(p), tuple(baselines), dict(baselines), True, 0, 0.0)


def step_from_survival(times, survival) -> StepFunction:
    """Cumulative hazard whose ``exp(-H)`` hits the given survival values."""
    return StepFunction(np.asarray(times, dtype=float), -np.log(np.asarray(survival, dtype=float)))


def handmade_nuisances(data: Dataset, e_coef, cens_baselines, out_baselines,
                       specs: ModelSpecs) -> NuisanceSet:
    prop = LogisticFit(np.asarray(e_coef, dtype=float), True, 0, 0.0)
    cens = flat_cox(cens_baselines, p=design_matrix(data, specs.censoring).shape[1])
    out = flat_cox(out_baselines, p=design_matrix(data, specs.outcome).shape[1])
    return NuisanceSet(prop, cens, out, specs)


def u_iw_profile(data, nuis, arm, t0, tau):
    """Public-path evaluation of the inverse-weighted estimating function at
    {0} + every event-residual candidate of the arm."""
    spec = EstimandSpec(arm, t0, tau, "iw")
    y, d, a = data.follow_up, data.event, data.treatment
    mask = (a == arm) & (d == 1) & (y > t0)
    candidates = np.concatenate(([0.0], np.unique(y[mask] - t0)))
    return candidates, np.array([u_iw(th, spec, data, nuis) for th in candidates])


def check_u_iw_monotone(data, nuis, arm, t0, tau):
    _, values = u_iw_profile(data, nuis, arm, t0, tau)
    assert values[0] <= 0.0
    assert np.all(np.diff(values) >= -1e-15)


def dense_scan_root(data, nuis, arm, t0, tau, step=1e-4):
    """Independent dense-grid root of the inverse-weighted equation.

    Re-derives the weighted sums directly from the data arrays (no shared
    code with the solver) and returns the smallest grid point with a
    nonnegative value, or None.
    """
    y, d, a = data.follow_up, data.event, data.treatment
    mask = a == arm
    e1 = 1.0 / (1.0 + np.exp(-(design_matrix(data, nuis.specs.propensity) @ nuis.propensity.coefficients)))
    ehat = np.maximum(e1 if arm == 1 else 1.0 - e1, 1e-6)[mask]
    cd = design_matrix(data, nuis.specs.censoring)[mask]
    risk = np.exp(cd @ nuis.censoring.coefficients)
    base = nuis.censoring.baseline[arm]

    def g_at(tvals):
        idx = np.searchsorted(base.times, tvals, side="left")
        padded = np.concatenate(([0.0], base.values))
        return np.maximum(np.exp(-padded[idx] * risk), 1e-6)

    ya, da = y[mask], d[mask]
    g_y = g_at(ya)
    g_t0 = g_at(np.full(ya.shape, t0))
    survive = ya > t0
    if not np.any((da == 1) & survive):
        return None
    top = float((ya[(da == 1) & survive] - t0).max())
    grid = np.arange(0.0, top + step, step)
    in_window = ((da == 1) & survive)[:, None] & (ya[:, None] <= t0 + grid[None, :])
    terms = in_window / (ehat * g_y)[:, None] - (tau * survive / (ehat * g_t0))[:, None]
    values = terms.sum(axis=0) / data.n
    hits = np.flatnonzero(values >= 0.0)
    return None if hits.size == 0 else float(grid[hits[0]])


def km_left_survival(curve, t):
    """KM survival just before ``t`` (left limit)."""
    idx = np.searchsorted(curve.times, t, side="left")
    padded = np.concatenate(([1.0], curve.surv))
    return padded[idx]


def ipcw_event_cdf_equals_km(times, events):
    """Single-arm identity: the censoring-KM-weighted event CDF matches the
    event KM at every event time (requires tie-free data)."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    n = times.size
    g_curve = fit_km(times, 1 - events)
    km_events = fit_km(times, events)
    g_left = np.maximum(km_left_survival(g_curve, times), 1e-12)  # G(Y_i-)
    for t in np.sort(times[events == 1]):
        sel = (events == 1) & (times <= t)
        ipcw_cdf = float(np.sum(sel / g_left) / n)
        km_cdf = float(1.0 - km_events.survival(t))
        assert abs(ipcw_cdf - km_cdf) < 1e-10, (t, ipcw_cdf, km_cdf)

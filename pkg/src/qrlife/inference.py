"""Nonparametric bootstrap standard errors and confidence intervals.

Each replicate resamples ``n`` subjects with replacement, refits every
nuisance model on the resample, re-solves both arm quantiles, and records the
between-arm difference.  Replicate ``b`` draws from an independent RNG
substream derived from ``(seed, b)``, so results are bit-identical for a
given seed regardless of how replicates are scheduled across workers.
Replicates whose estimate fails (missing arm, nuisance fit error, or a
non-identifiable quantile) are dropped and counted, never retried.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .data import Dataset
from .estimators import DeltaEstimate, EstimationError, ModelSpecs, _estimate_all
from .nuisance import FitError, fit_nuisances

__all__ = ["BootstrapResult", "bootstrap_delta"]


@dataclass
class BootstrapResult:
    """Point estimate with bootstrap SE and both interval forms."""

    point: DeltaEstimate
    se: float
    wald_ci: tuple[float, float]
    percentile_ci: tuple[float, float]
    replicates_used: int
    replicates_failed: int
    B: int
    seed: int
    alpha: float

    @property
    def unreliable(self) -> bool:
        """More than half of the requested replicates failed."""
        return self.replicates_used < 0.5 * self.B


def _try_estimates(data, t0, taus, methods, specs, warm=None, nuis=None) -> dict:
    """Per-(method, tau) delta or ``None`` on failure, isolating the naive
    method from nuisance-fitting errors."""
    out = {}
    groups = [m for m in ("km",) if m in methods], [m for m in methods if m != "km"]
    for group in groups:
        if not group:
            continue
        try:
            ests = _estimate_all(data, t0, taus, group, specs, nuis=nuis, warm=warm)
            for key, est in ests.items():
                out[key] = est.delta
        except EstimationError:
            for m in group:
                for tau in taus:
                    out[(m, tau)] = None
    return out


def _replicate_deltas(data, t0, taus, methods, specs, seed, b_indices, warm=None):
    rows = []
    n = data.n
    for b in b_indices:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))
        sample = data.take(rng.integers(0, n, size=n))
        rows.append(_try_estimates(sample, t0, taus, methods, specs, warm=warm))
    return b_indices, rows


def _resample_deltas(data, t0, taus, methods, specs, B, seed, threads, warm=None) -> dict:
    """Bootstrap deltas keyed by (method, tau): length-B arrays with NaN for
    failed replicates, ordered by replicate index."""
    keys = [(m, tau) for m in methods for tau in taus]
    deltas = {key: np.full(B, np.nan) for key in keys}
    if threads > 1 and B > 1:
        chunks = np.array_split(np.arange(B), min(threads, B))
        args = [
            (data, t0, taus, methods, specs, seed, chunk.tolist(), warm) for chunk in chunks
        ]
        with ProcessPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(_replicate_worker, args))
    else:
        parts = [
            _replicate_deltas(data, t0, taus, methods, specs, seed, list(range(B)), warm)
        ]
    for b_indices, rows in parts:
        for b, row in zip(b_indices, rows):
            for key in keys:
                value = row.get(key)
                if value is not None:
                    deltas[key][b] = value
    return deltas


def _replicate_worker(args):
    return _replicate_deltas(*args)


def _summarize(point: DeltaEstimate, boot: np.ndarray, B: int, alpha: float, seed: int) -> BootstrapResult:
    used_vals = boot[~np.isnan(boot)]
    used = used_vals.size
    failed = B - used
    se = float(np.std(used_vals, ddof=1)) if used >= 2 else float("nan")
    z = float(norm.ppf(1.0 - alpha / 2.0))
    delta = point.delta
    wald = (delta - z * se, delta + z * se)
    if used >= 1:
        lo, hi = np.quantile(used_vals, [alpha / 2.0, 1.0 - alpha / 2.0], method="inverted_cdf")
        pct = (float(lo), float(hi))
    else:
        pct = (float("nan"), float("nan"))
    return BootstrapResult(point, se, wald, pct, used, failed, B, seed, alpha)


def bootstrap_delta(
    data: Dataset,
    t0: float,
    tau: float,
    method: str,
    model_specs: ModelSpecs,
    B: int = 1000,
    alpha: float = 0.05,
    seed: int = 0,
    threads: int = 1,
) -> BootstrapResult:
    """Bootstrap the quantile contrast for one method and quantile level.

    Requires ``B >= 2`` and an identifiable full-sample estimate.  The
    standard error is the sample standard deviation of the successful
    replicate differences; both a Wald interval ``delta +/- z se`` and a
    percentile interval from the replicate order statistics are returned.
    """
    if B < 2:
        raise EstimationError(f"B must be at least 2, got {B}")
    warm = None
    if method != "km":
        try:
            warm = fit_nuisances(data, model_specs)
        except FitError as exc:
            raise EstimationError(f"nuisance fitting failed: {exc}") from exc
    point = _estimate_all(data, t0, [tau], [method], model_specs, nuis=warm)[(method, tau)]
    if not point.identifiable:
        raise EstimationError("full-sample estimate is not identifiable")
    deltas = _resample_deltas(data, t0, [tau], [method], model_specs, B, seed, threads, warm=warm)
    return _summarize(point, deltas[(method, tau)], B, alpha, seed)

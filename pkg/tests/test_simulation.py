import json

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.stats import ks_2samp, norm, qmc

from qrlife import (
    DGPConfig,
    StudyConfig,
    generate,
    run_study,
    scenario_model_specs,
    true_values,
)
from qrlife.simulation import ConfigError, _truth_quantiles


def test_generate_shapes_and_consistency():
    sample = generate(DGPConfig(n=500, beta_t=-0.5, seed=1))
    data, lat = sample.dataset, sample.latent
    assert data.n == 500
    assert data.covariate_names == ("x1", "x2", "x3")
    t_obs = np.where(data.treatment == 1, lat.event_time_1, lat.event_time_0)
    np.testing.assert_allclose(data.follow_up, np.minimum(t_obs, lat.censor_time))
    np.testing.assert_array_equal(data.event, (t_obs <= lat.censor_time).astype(int))
    np.testing.assert_array_equal(lat.alive_0, lat.event_time_0 > 0.5)
    np.testing.assert_array_equal(lat.alive_1, lat.event_time_1 > 0.5)


def test_generate_seed_determinism():
    a = generate(DGPConfig(n=200, beta_t=0.0, seed=42))
    b = generate(DGPConfig(n=200, beta_t=0.0, seed=42))
    np.testing.assert_array_equal(a.dataset.follow_up, b.dataset.follow_up)
    np.testing.assert_array_equal(a.dataset.covariates, b.dataset.covariates)


def test_copula_variant_enforces_monotone_survival():
    sample = generate(DGPConfig(n=100_000, beta_t=-0.5, seed=2, variant="copula"))
    harmed = sample.latent.alive_0 & ~sample.latent.alive_1
    assert int(harmed.sum()) == 0


def test_independent_variant_breaks_monotone_survival():
    sample = generate(DGPConfig(n=100_000, beta_t=-0.5, seed=2, variant="independent"))
    harmed = sample.latent.alive_0 & ~sample.latent.alive_1
    assert int(harmed.sum()) > 0


def test_null_effect_gives_identical_marginals():
    sample = generate(DGPConfig(n=100_000, beta_t=0.0, seed=3))
    stat = ks_2samp(sample.latent.event_time_0, sample.latent.event_time_1).statistic
    crit_1pct = 1.628 * np.sqrt(2 / 100_000)
    assert stat < crit_1pct


def test_covariate_equicorrelation():
    sample = generate(DGPConfig(n=1_000_000, beta_t=0.0, seed=4))
    corr = np.corrcoef(sample.dataset.covariates.T)
    off = corr[np.triu_indices(3, k=1)]
    np.testing.assert_allclose(off, 0.2, atol=0.005)
    np.testing.assert_allclose(np.diag(corr), 1.0)


def test_true_values_null_effect_is_zero():
    config = DGPConfig(n=1, beta_t=0.0, seed=5)
    vals = true_values(config, 0.3, 0.5, 2_000_000)
    assert abs(vals.osqc) < 0.005
    assert abs(vals.psqc) < 0.005


def test_true_values_refuses_tiny_sample():
    with pytest.raises(ConfigError, match="10"):
        true_values(DGPConfig(n=1, beta_t=0.0, seed=5), 0.3, 0.5, 5000)


def semianalytic_quantiles(beta_t, t0, tau, n_qmc=2**17, seed=30):
    """Conditional-CDF oracle for the copula variant.

    Residual life given covariates is a fresh Weibull, so each arm's
    survivor-population residual CDF is a survival-weighted mixture over the
    covariate law; quasi-random covariate draws integrate it and a root
    solve inverts at tau.  Always-survivor weights are min of the two arms'
    landmark survival.
    """
    nu = 1.5
    sob = qmc.Sobol(d=3, scramble=True, seed=seed)
    u = sob.random(n_qmc)
    z = norm.ppf(u)
    cov = np.full((3, 3), 0.2)
    np.fill_diagonal(cov, 1.0)
    X = z @ np.linalg.cholesky(cov).T
    lam = {
        a: np.exp(-1.0 + beta_t * a + 0.5 * X[:, 0] + 0.2 * X[:, 1] + X[:, 0] ** 2)
        for a in (0, 1)
    }
    pi = {a: np.exp(-lam[a] * t0**nu) for a in (0, 1)}

    def quantile(arm, weights):
        wsum = weights.sum()

        def cdf_minus_tau(r):
            return float((weights * (1.0 - np.exp(-lam[arm] * r**nu))).sum() / wsum - tau)

        return brentq(cdf_minus_tau, 0.0, 100.0, xtol=1e-10)

    q0 = quantile(0, pi[0])
    q1 = quantile(1, pi[1])
    w_always = np.minimum(pi[0], pi[1])
    q0_ps = quantile(0, w_always)
    q1_ps = quantile(1, w_always)
    return q1 - q0, q1_ps - q0_ps


def test_truth_oracle_matches_semianalytic():
    config = DGPConfig(n=1, beta_t=-0.5, seed=6)
    rng = np.random.default_rng(6)
    mc = _truth_quantiles(config, [0.3], 0.5, 2_000_000, rng)[0.3]
    osqc_ref, psqc_ref = semianalytic_quantiles(-0.5, 0.5, 0.3)
    assert mc.osqc == pytest.approx(osqc_ref, abs=0.005)
    assert mc.psqc == pytest.approx(psqc_ref, abs=0.005)


def test_scenario_model_specs_term_lists():
    cc = scenario_model_specs("CC")
    assert ("square", "x1") in cc.propensity.terms
    assert ("square", "x1") in cc.outcome.terms
    assert cc.propensity.intercept and not cc.outcome.intercept
    ic = scenario_model_specs("IC")
    assert ("square", "x1") not in ic.propensity.terms
    assert ("square", "x1") in ic.outcome.terms
    ci = scenario_model_specs("CI")
    assert ("square", "x1") in ci.propensity.terms
    assert ("square", "x1") not in ci.outcome.terms
    for sc in ("CC", "CI", "IC", "II"):
        specs = scenario_model_specs(sc)
        assert specs.censoring.terms == (("linear", "x3"), ("interaction", "x1", "x3"))
    with pytest.raises(ConfigError):
        scenario_model_specs("XX")


@pytest.fixture(scope="module")
def tiny_study():
    return StudyConfig(
        ns=(120,), beta_ts=(0.0,), t0s=(0.5,), taus=(0.3, 0.5),
        scenarios=("CC", "IC"), methods=("km", "iw"),
        replications=4, bootstrap_B=8, alpha=0.05, seed=77,
        truth_samples=20_000,
    )


def test_run_study_report_layout(tiny_study):
    report = run_study(tiny_study)
    assert len(report.cells) == 2 * 2 * 2  # scenarios x methods x taus
    keys = {(c.scenario, c.method, c.tau) for c in report.cells}
    assert ("IC", "iw", 0.5) in keys
    for cell in report.cells:
        assert cell.replications == 4
        assert cell.used + cell.failures == 4
        assert cell.truth_kind == "osqc"
        assert 0.0 <= cell.coverage <= 1.0 or np.isnan(cell.coverage)


def test_run_study_deterministic_and_thread_independent(tiny_study, tmp_path):
    r1 = run_study(tiny_study, threads=1)
    r2 = run_study(tiny_study, threads=2)
    assert r1.to_dict() == r2.to_dict()
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    r1.write_csv(p1)
    r2.write_csv(p2)
    assert p1.read_bytes() == p2.read_bytes()
    r1.write_json(tmp_path / "a.json")
    assert json.loads((tmp_path / "a.json").read_text())["cells"]


def test_run_study_skips_bootstrap_when_b_zero():
    study = StudyConfig(
        ns=(100,), beta_ts=(0.0,), t0s=(0.5,), taus=(0.3,),
        scenarios=("CC",), methods=("dr",),
        replications=3, bootstrap_B=0, alpha=0.05, seed=5, truth_samples=20_000,
    )
    report = run_study(study)
    cell = report.cells[0]
    assert np.isnan(cell.mean_boot_se)
    assert np.isnan(cell.coverage)
    assert np.isfinite(cell.bias)


def test_naive_method_consistent_when_randomized_uncensored():
    # no confounding, no censoring: the naive landmark comparator is
    # unbiased at the null and at the median under an effect
    base = dict(
        ns=(500,), t0s=(0.5,), scenarios=("CC",), methods=("km",),
        replications=200, bootstrap_B=0, alpha=0.05, seed=88,
        censor_shift=-20.0, randomize=True, truth_samples=1_000_000,
    )
    null = run_study(StudyConfig(beta_ts=(0.0,), taus=(0.3,), **base))
    assert abs(null.cells[0].bias) < 0.04
    effect = run_study(StudyConfig(beta_ts=(-0.5,), taus=(0.5,), **base))
    assert abs(effect.cells[0].bias) < 0.05


def test_ps_truth_fallback_flag_under_independent_variant():
    study = StudyConfig(
        ns=(100,), beta_ts=(-0.5,), t0s=(0.5,), taus=(0.3,),
        scenarios=("CC",), methods=("ps", "dr"),
        replications=2, bootstrap_B=0, alpha=0.05, seed=9,
        variant="independent", truth_samples=20_000,
    )
    report = run_study(study)
    kinds = {c.method: c.truth_kind for c in report.cells}
    assert kinds["ps"] == "osqc_fallback"
    assert kinds["dr"] == "osqc"


def test_study_config_from_dict_roundtrip():
    raw = {
        "dgp": {"n": [500, 2000], "beta_t": 0.0, "rho": 0.2, "nu": 1.5, "t0": 0.5,
                "variant": "copula"},
        "grid": {"scenarios": ["CC", "II"], "methods": ["km", "dr"], "taus": [0.3]},
        "mc": {"replications": 10, "bootstrap_B": 50, "alpha": 0.05, "seed": 1,
               "truth_samples": 100000},
    }
    study = StudyConfig.from_dict(raw)
    assert study.ns == (500, 2000)
    assert study.t0s == (0.5,)
    assert study.methods == ("km", "dr")
    assert study.truth_samples == 100000
    assert len(study.dgp_cells()) == 2


def test_study_config_errors_carry_paths():
    with pytest.raises(ConfigError, match="dgp"):
        StudyConfig.from_dict({"grid": {}, "mc": {}})
    raw = {"dgp": {"n": 10, "beta_t": 0.0}, "grid": {"scenarios": ["CC"], "methods": ["km"],
           "taus": [0.3], "t0s": [0.5]}, "mc": {"replications": 5, "bootstrap_B": 0}}
    with pytest.raises(ConfigError, match="mc.seed"):
        StudyConfig.from_dict(raw)
    raw["mc"]["seed"] = 1
    raw["grid"]["scenarios"] = ["ZZ"]
    with pytest.raises(ConfigError, match="scenario"):
        StudyConfig.from_dict(raw)


def test_null_symmetry_of_adjusted_estimators():
    # no treatment effect: each adjusted estimator's replication mean stays
    # within two standard errors of zero truth
    study = StudyConfig(
        ns=(500,), beta_ts=(0.0,), t0s=(0.5,), taus=(0.3,),
        scenarios=("CC",), methods=("iw", "dr", "ps"),
        replications=200, bootstrap_B=0, alpha=0.05, seed=321,
        truth_samples=2_000_000,
    )
    report = run_study(study)
    for cell in report.cells:
        se_mean = cell.emp_se / np.sqrt(cell.used)
        assert abs(cell.bias) <= 2 * se_mean, (cell.method, cell.bias, se_mean)

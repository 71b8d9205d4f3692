"""Acceptance suite: twelve end-to-end criteria at fixed tolerances.

Each test records one pass/fail line (see ``criteria.py``) that is printed
after the run, then asserts. The pipeline tests run the full preset settings
and take most of the suite's run time.
"""

from __future__ import annotations

import math
import time
import warnings

import numpy as np
import pytest
from scipy.stats import norm

import criteria
from criteria import check
from oracles import (
    auc_ref, central_difference, known_gaussian, max_relative_error, mean_z_scores, mpiw_ref,
    picp_ref, random_problem, sampler_oracle, standardised_errors,
)
from bnn_uq import experiment, metrics, samplers, vi
from bnn_uq.experiment import load_config, replay, run_experiment
from bnn_uq.metrics import PredictiveSamples
from bnn_uq.nn import GaussianRegression, MlpSpec, grad_log_joint, log_joint
from bnn_uq.plotting import read_band_csv

pytestmark = pytest.mark.slow

PIPELINE_BUDGET_S = 30 * 60


def within(value, target, tol):
    return abs(value - target) <= tol + 1e-12


def timed_run(cfg):
    start = time.monotonic()
    art = run_experiment(cfg)
    return art, time.monotonic() - start


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    """Preset pipeline runs, computed on first use and shared across criteria."""
    cache = {}

    def get(preset, **kw):
        if preset not in cache:
            out = tmp_path_factory.mktemp(preset)
            cache[preset] = timed_run(load_config(preset=preset, out_dir=str(out), **kw))
        return cache[preset]

    return get


def test_c01_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    start = time.monotonic()
    worst = 0.0
    for _ in range(100):
        spec, model, w, x, y = random_problem(rng)
        g = grad_log_joint(model, spec, w, x, y)
        fd = central_difference(lambda v: log_joint(model, spec, v, x, y), w)
        worst = max(worst, max_relative_error(g, fd))
    elapsed = time.monotonic() - start
    assert criteria.record(
        1,
        check("max_rel_err", worst, worst < 1e-5, "< 1e-5"),
        check("seconds", elapsed, elapsed < 10, "< 10"),
    )


def test_c02_sampler_oracle_suite():
    start = time.monotonic()
    checks = []
    for method in ("hmc", "sgld", "sghmc"):
        for problem in ("gauss2", "linreg"):
            draws, mean, cov = sampler_oracle.__wrapped__(method, problem)
            z = float(np.max(mean_z_scores(draws, mean)))
            err = float(np.linalg.norm(np.cov(draws.T) - cov) / np.linalg.norm(cov))
            limit = 0.10 if method == "hmc" else 0.15
            checks.append(check(f"{method}/{problem} z", z, z < 3.0, "< 3"))
            checks.append(check(f"{method}/{problem} cov", err, err < limit, f"< {limit}"))
    elapsed = time.monotonic() - start
    checks.append(check("seconds", elapsed, elapsed < 120, "< 120"))
    assert criteria.record(2, *checks)


def test_c03_retention_arithmetic():
    target = samplers.GaussianTarget(np.zeros(2), np.eye(2))
    hmc, _ = samplers.hmc_run(target, samplers.HmcConfig(leapfrog_steps=1, step_size=0.5), 0)
    sghmc, _ = samplers.sghmc_run(
        target, samplers.SghmcConfig(leapfrog_steps=1, step_size=0.1, friction=1.0,
                                     batch_size=10 ** 6), 0)
    sgld, _ = samplers.sgld_run(target, samplers.SgldConfig(step_size=0.01,
                                                            batch_size=10 ** 6), 0)
    assert criteria.record(
        3,
        check("hmc 50K/40K/20", len(hmc), len(hmc) == 500, "== 500"),
        check("sghmc 50K/40K/20", len(sghmc), len(sghmc) == 500, "== 500"),
        check("sgld 500K/450K/100", len(sgld), len(sgld) == 500, "== 500"),
    )


def test_c04_mismatched_regression_hmc(runs):
    art, elapsed = runs("reg1-hmc")
    m = art.metrics
    assert criteria.record(
        4,
        check("picp", m["picp"], within(m["picp"], 1.00, 0.02), "1.00 +- 0.02"),
        check("grid_loglik", m["grid_loglik"], within(m["grid_loglik"], -0.42, 0.08),
              "-0.42 +- 0.08"),
        check("mpiw", m["mpiw"], within(m["mpiw"], 3.09, 0.25 * 3.09), "3.09 +- 25%"),
        check("seconds", elapsed, elapsed < PIPELINE_BUDGET_S, "< 1800"),
    )


def test_c05_matched_regression_hmc(runs):
    art, elapsed = runs("reg2-hmc")
    m = art.metrics
    assert criteria.record(
        5,
        check("rmse", m["rmse"], within(m["rmse"], 0.85, 0.15), "0.85 +- 0.15"),
        check("picp", m["picp"], within(m["picp"], 0.86, 0.08), "0.86 +- 0.08"),
        check("mpiw", m["mpiw"], within(m["mpiw"], 1.79, 0.25 * 1.79), "1.79 +- 25%"),
        check("seconds", elapsed, elapsed < PIPELINE_BUDGET_S, "< 1800"),
    )


def test_c06_vi_underestimates_ensemble_does_not(runs):
    hmc = runs("reg2-hmc")[0].metrics["picp"]
    bbb = runs("reg2-bbb")[0].metrics["picp"]
    ens = runs("reg2-ensemble")[0].metrics["picp"]
    assert criteria.record(
        6,
        check("bbb_picp", bbb, bbb < hmc, f"< hmc {hmc:.3f}"),
        check("ensemble_picp", ens, within(ens, hmc, 0.05), f"hmc {hmc:.3f} +- 0.05"),
    )


def test_c07_matched_classification_hmc(runs):
    art, _ = runs("class2-hmc")
    m = art.metrics
    assert criteria.record(
        7,
        check("accuracy", m["accuracy"], within(m["accuracy"], 0.83, 0.07), "0.83 +- 0.07"),
        check("auc", m["auc"], within(m["auc"], 0.93, 0.05), "0.93 +- 0.05"),
    )


def test_c08_metrics_match_brute_force():
    rng = np.random.default_rng(8)
    start = time.monotonic()
    mismatches = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(1000):
            s, n = int(rng.integers(1, 60)), int(rng.integers(2, 20))
            v = rng.normal(size=(s, n))
            y = rng.normal(scale=1.5, size=n)
            if rng.uniform() < 0.3:
                v, y = np.round(v, 1), np.round(y, 1)
            labels = np.arange(n) % 2
            rng.shuffle(labels)
            pred = PredictiveSamples(v, v, "regression", False)
            mismatches += metrics.picp(pred, y) != picp_ref(v, y)
            mismatches += metrics.mpiw(pred) != mpiw_ref(v)
            mismatches += metrics.auc(v[0], labels) != auc_ref(v[0], labels)
    model = GaussianRegression(0.5)
    worst = 0.0
    for _ in range(100):
        f = rng.normal(size=(int(rng.integers(1, 40)), 10))
        y = rng.normal(size=10)
        base = metrics.avg_test_loglik(PredictiveSamples(f, f, "regression"), y, model)
        for g in (np.vstack([f, f]), rng.permutation(f), np.repeat(f, 3, axis=0)):
            other = metrics.avg_test_loglik(PredictiveSamples(g, g, "regression"), y, model)
            worst = max(worst, abs(other - base))
    elapsed = time.monotonic() - start
    assert criteria.record(
        8,
        check("mismatches", mismatches, mismatches == 0, "== 0 of 3000"),
        check("loglik_drift", worst, worst < 1e-12, "< 1e-12"),
        check("seconds", elapsed, elapsed < 30, "< 30"),
    )


def test_c09_calibrated_generator_coverage():
    rng = np.random.default_rng(9)
    n, s = 2000, 2000
    x = rng.uniform(-4, 4, size=n)
    mean = 0.1 * x ** 3
    y = mean + 0.2 * rng.standard_normal(n)
    draws = mean + 0.2 * rng.standard_normal((s, n))
    p = metrics.picp(PredictiveSamples(draws, np.broadcast_to(mean, draws.shape), "regression",
                                       True), y)
    assert criteria.record(9, check("picp", p, within(p, 0.95, 0.02), "0.95 +- 0.02"))


def test_c10_vi_sanity():
    spec = MlpSpec((1, 50, 1))
    q, _ = vi.bbb_fit(GaussianRegression(0.5), spec, np.zeros((0, 1)), np.zeros((0, 1)),
                      vi.VIConfig(), seed=10)
    mu_err = float(np.max(np.abs(q.mu)))
    sigma_err = float(np.max(np.abs(q.sigma - 1.0)))
    rng = np.random.default_rng(10)
    probe = vi.MeanFieldGaussian.from_sigma(rng.normal(scale=0.5, size=151),
                                            rng.uniform(0.1, 1.5, size=151))
    w = vi.sample_weights(probe, 20_000, seed=11).weights
    log_ratio = (norm.logpdf(w, probe.mu, probe.sigma) - norm.logpdf(w)).sum(axis=1)
    se = log_ratio.std(ddof=1) / math.sqrt(log_ratio.size)
    gap = abs(log_ratio.mean() - vi.kl_diag_gaussian(probe)) / se
    assert criteria.record(
        10,
        check("max|mu|", mu_err, mu_err < 0.05, "< 0.05"),
        check("max|sigma-1|", sigma_err, sigma_err < 0.05, "< 0.05"),
        check("kl_gap_in_se", gap, gap < 3.0, "< 3"),
    )


def test_c11_moment_gaussian(tmp_path):
    mean, cov = known_gaussian()
    draws = np.random.default_rng(11).multivariate_normal(mean, cov, size=5000)
    fit = vi.gaussian_moment_fit(draws)
    mean_err, cov_err = standardised_errors(fit.mean, fit.cov, mean, cov)
    # the band-file check only needs a converged-enough chain, not the full schedule
    art = run_experiment(experiment.ExperimentConfig(
        dataset="reg1", method="moment-gaussian", out_dir=str(tmp_path),
        hyper={"iterations": 6000, "burn_in": 5000, "thinning": 2}))
    gx, band = read_band_csv(tmp_path / "band.csv")
    ok_band = (len(gx) == 200 and bool(np.all(band.low <= band.high))
               and (tmp_path / "band.svg").exists() and art.fit.q is not None)
    assert criteria.record(
        11,
        check("mean_err", mean_err, mean_err < 0.05, "< 5%"),
        check("cov_err", cov_err, cov_err < 0.10, "< 10%"),
        check("band_rows", len(gx), ok_band, "200 rows, low <= high, svg"),
    )


def test_c12_replay_is_byte_identical(tmp_path):
    cfgs = {
        "moment": experiment.ExperimentConfig(
            dataset="reg2", method="moment-gaussian", out_dir=str(tmp_path / "moment"),
            hyper={"iterations": 3000, "burn_in": 2000, "thinning": 2}),
        "dropout": experiment.ExperimentConfig(
            dataset="class1", method="dropout", n_restarts=3, out_dir=str(tmp_path / "dropout"),
            hyper={"max_epochs": 300}),
    }
    checks = []
    for name, cfg in cfgs.items():
        run_experiment(cfg)
        _, same = replay(tmp_path / name / "manifest.json", tmp_path / f"{name}-replay")
        differing = [k for k, v in same.items() if not v]
        checks.append(check(f"{name} files", len(same), bool(same) and not differing,
                            "all identical" if not differing else f"differ: {differing}"))
    assert criteria.record(12, *checks)

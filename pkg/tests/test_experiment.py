from __future__ import annotations

import json
import math

import numpy as np
import pytest

from bnn_uq import experiment
from bnn_uq.experiment import (
    ConfigError, ExperimentConfig, RunFailure, emit_report, load_config, presets, replay,
    run_experiment, select_best_restart, write_config,
)
from bnn_uq.metrics import MetricsReport

TINY_HMC = {"iterations": 120, "burn_in": 60, "thinning": 6, "leapfrog_steps": 10,
            "step_size": 0.002}


def tiny(**kw):
    base = dict(dataset="reg1", method="hmc", hyper=dict(TINY_HMC), n_predictive=40,
                grid_points=20)
    base.update(kw)
    return ExperimentConfig(**base)


class TestSelection:
    def test_examples(self):
        assert select_best_restart([-3.0, -1.0, -2.0]) == 1
        assert select_best_restart([-1.0, -1.0]) == 0

    def test_skips_non_finite(self):
        assert select_best_restart([math.nan, -5.0, math.inf * -1]) == 1

    def test_all_failed(self):
        with pytest.raises(RunFailure):
            select_best_restart([math.nan, math.nan])

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            select_best_restart([1.0], "aic")


class TestConfig:
    def test_restart_defaults(self):
        assert ExperimentConfig(method="bbb").restarts == 20
        assert ExperimentConfig(method="dropout").restarts == 20
        assert ExperimentConfig(method="hmc").restarts == 1
        assert ExperimentConfig(method="hmc", n_restarts=3).restarts == 3

    @pytest.mark.parametrize("kw", [
        {"dataset": "reg9"}, {"method": "laplace"}, {"selection": "elbo"},
        {"n_restarts": 0}, {"hyper": {"leapfrog": 3}}, {"hyper": {"thinning": 0}},
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            ExperimentConfig(**kw)

    def test_presets_cover_every_pair(self):
        table = presets()
        assert len(table) == 4 + 4 * 7
        assert table["reg2-bbb"]["hyper"] == {"learning_rate": 0.001}
        assert table["class1-dropout"]["hyper"] == {"learning_rate": 0.005,
                                                    "dropout_rate": 0.005}
        for p in table.values():
            ExperimentConfig(**p)

    def test_ini_round_trip(self, tmp_path):
        cfg = tiny(seed=4, time_limit=30.0)
        write_config(cfg, tmp_path / "c.ini")
        back = load_config(tmp_path / "c.ini")
        assert back.method_config() == cfg.method_config()
        assert back.seed == 4 and back.time_limit == 30.0 and back.n_restarts is None

    def test_ini_errors(self, tmp_path):
        (tmp_path / "a.ini").write_text("[experiment]\ncolour = red\n")
        (tmp_path / "b.ini").write_text("[mystery]\nx = 1\n")
        (tmp_path / "c.ini").write_text("[experiment]\nseed = abc\n")
        (tmp_path / "d.ini").write_text("not an ini file\n")
        for name in "abcd":
            with pytest.raises(ConfigError):
                load_config(tmp_path / f"{name}.ini")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.ini")
        with pytest.raises(ConfigError):
            load_config(preset="reg5-hmc")

    def test_overrides_win(self):
        cfg = load_config(preset="reg2-bbb", seed=9, n_restarts=2)
        assert (cfg.dataset, cfg.method, cfg.seed, cfg.restarts) == ("reg2", "bbb", 9, 2)

    def test_digest_ignores_out_dir(self):
        assert tiny(out_dir="a").digest() == tiny(out_dir="b").digest()
        assert tiny(seed=1).digest() != tiny(seed=2).digest()

    def test_derive_seed_stable(self):
        assert experiment.derive_seed(3, "grid") == experiment.derive_seed(3, "grid")
        assert experiment.derive_seed(3, "grid") != experiment.derive_seed(3, "test")


class TestRun:
    def test_tiny_regression_run_and_replay(self, tmp_path):
        art = run_experiment(tiny(out_dir=str(tmp_path / "a")))
        assert set(art.metrics.values) == {"rmse", "avg_loglik", "picp", "mpiw", "grid_loglik"}
        run = tmp_path / "a"
        for name in ("config.ini", "manifest.json", "metrics.txt", "metrics.csv", "data.csv",
                     "restarts.csv", "samples.npy", "chain.csv", "band.csv", "band.svg"):
            assert (run / name).exists(), name
        manifest = json.loads((run / "manifest.json").read_text())
        assert manifest["selected_restart"] == 0
        assert len((run / "band.csv").read_text().splitlines()) == 21
        _, same = replay(run / "manifest.json", tmp_path / "b")
        assert same and all(same.values())

    def test_classification_run(self, tmp_path):
        art = run_experiment(tiny(dataset="class2", hyper={**TINY_HMC, "step_size": 0.01},
                                  out_dir=str(tmp_path)))
        assert set(art.metrics.values) == {"accuracy", "avg_loglik", "auc"}
        assert art.grid_probs.shape == (len(art.samples), 2500)
        assert (tmp_path / "heatmap.svg").exists()
        assert len((tmp_path / "probability_grid.csv").read_text().splitlines()) == 2501

    def test_restarts_and_selection(self):
        art = run_experiment(ExperimentConfig(
            dataset="reg1", method="dropout", n_restarts=3, n_predictive=40, grid_points=10,
            hyper={"max_epochs": 30}))
        assert len(art.restart_scores) == 3
        assert art.selected == int(np.nanargmax(art.restart_scores))

    def test_elbo_selection(self):
        art = run_experiment(ExperimentConfig(
            dataset="reg1", method="bbb", n_restarts=2, selection="elbo", n_predictive=40,
            grid_points=10, hyper={"max_epochs": 30}))
        assert art.selected == int(np.argmax(art.restart_scores))

    def test_parallel_restarts_match_serial(self):
        cfg = ExperimentConfig(dataset="reg1", method="dropout", n_restarts=3, n_predictive=40,
                               grid_points=10, hyper={"max_epochs": 30})
        serial = run_experiment(cfg)
        parallel = run_experiment(ExperimentConfig(**{**cfg.to_dict(), "workers": 2}))
        assert parallel.restart_scores == serial.restart_scores
        assert parallel.metrics.to_record() == serial.metrics.to_record()
        assert parallel.config.digest() == serial.config.digest()

    def test_moment_gaussian_run(self, tmp_path):
        art = run_experiment(tiny(method="moment-gaussian", out_dir=str(tmp_path)))
        assert art.fit.q is not None and len(art.samples) == 40
        assert (tmp_path / "band.csv").exists()

    def test_all_restarts_diverging(self):
        cfg = tiny(hyper={**TINY_HMC, "step_size": 50.0, "max_divergent": 1, "step_down": 1.0})
        with pytest.raises(RunFailure):
            run_experiment(cfg)

    def test_time_limit_flags_truncation(self):
        art = run_experiment(tiny(hyper={**TINY_HMC, "iterations": 200_000, "burn_in": 100},
                                  time_limit=0.5))
        assert art.manifest["truncated"] and "truncated" in art.metrics.flags


class TestReport:
    def test_mean_and_sd_over_seeds(self, tmp_path):
        runs = [MetricsReport("reg1", "hmc", {"rmse": r, "avg_loglik": -1.0, "picp": 1.0,
                                              "mpiw": 2.0}) for r in (0.1, 0.3)]
        runs.append(MetricsReport("class2", "bbb", {"accuracy": 0.9, "avg_loglik": -0.3,
                                                    "auc": 0.95}))
        emit_report(runs, tmp_path / "r.csv")
        rows = (tmp_path / "r.csv").read_text().splitlines()
        assert rows[0].startswith("task,method,n_runs,rmse_mean,rmse_sd")
        assert rows[1].startswith("reg1,hmc,2,0.2,0.141421")
        assert rows[2].startswith("task,method,n_runs,accuracy_mean")
        table = (tmp_path / "r.csv.txt").read_text()
        assert "over repeated experiment seeds" in table

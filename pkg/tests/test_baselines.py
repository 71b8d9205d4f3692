from __future__ import annotations

import numpy as np
import pytest

from bnn_uq import baselines
from bnn_uq.baselines import (
    DropoutConfig, EnsembleConfig, _Plateau, dropout_fit, dropout_predictive_samples,
    ensemble_fit, ensemble_predictive_samples, load_members, map_objective,
    map_objective_grad, member_seed, prior_matching_lambda, save_members,
)
from bnn_uq.nn import BernoulliClassification, GaussianRegression, MlpSpec, forward, log_joint

SPEC = MlpSpec((1, 6, 1))


def toy(n=12, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, size=(n, 1))
    return x, np.sin(x) + 0.1 * rng.normal(size=(n, 1))


class TestMapObjective:
    @pytest.mark.parametrize("model", [GaussianRegression(0.3), BernoulliClassification()])
    def test_prior_matching_lambda_gives_negative_log_joint(self, model):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(7, 1))
        y = (rng.uniform(size=(7, 1)) < 0.5).astype(float)
        lam = prior_matching_lambda(model)
        offsets = []
        for _ in range(5):
            w = rng.normal(size=SPEC.n_params)
            offsets.append(map_objective(model, SPEC, w, x, y, lam)
                           + log_joint(model, SPEC, w, x, y))
        # equal up to the prior's normalising constant
        np.testing.assert_allclose(offsets, offsets[0], rtol=0, atol=1e-9)

    def test_lambda_values(self):
        assert prior_matching_lambda(GaussianRegression(0.5)) == 0.25
        assert prior_matching_lambda(BernoulliClassification()) == 0.5

    def test_gradient_finite_differences(self):
        x, y = toy()
        model = GaussianRegression(0.5)
        w = np.random.default_rng(2).normal(size=SPEC.n_params)
        g = map_objective_grad(model, SPEC, w, x, y, 0.7)
        h = 1e-6
        fd = np.array([(map_objective(model, SPEC, w + h * e, x, y, 0.7)
                        - map_objective(model, SPEC, w - h * e, x, y, 0.7)) / (2 * h)
                       for e in np.eye(SPEC.n_params)])
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-6)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            map_objective(GaussianRegression(1.0), SPEC, np.zeros(SPEC.n_params),
                          np.zeros((1, 1)), np.zeros((1, 1)), -1.0)


class TestPlateau:
    def test_stops_on_flat_loss(self):
        p = _Plateau(patience=10, tol=1e-4, window=5)
        flags = [p.update(1.0) for _ in range(20)]
        assert flags.index(True) == 14

    def test_keeps_going_while_improving(self):
        p = _Plateau(patience=10, tol=1e-4, window=5)
        assert not any(p.update(100.0 - i) for i in range(200))


class TestDropout:
    def test_zero_rate_is_deterministic_network(self):
        x, y = toy()
        w = np.random.default_rng(0).normal(size=SPEC.n_params)
        pred = dropout_predictive_samples(w, SPEC, GaussianRegression(0.1), x, 20, 0.0, seed=0,
                                          include_noise=False)
        assert np.all(pred.latent == forward(SPEC, w, x)[:, 0])

    def test_passes_vary_with_dropout(self):
        x, _ = toy()
        w = np.random.default_rng(0).normal(size=SPEC.n_params)
        pred = dropout_predictive_samples(w, SPEC, GaussianRegression(0.1), x, 50, 0.5, seed=0,
                                          include_noise=False)
        assert np.std(pred.latent, axis=0).max() > 0
        assert pred.latent.shape == (50, x.shape[0])

    def test_fit_reduces_loss(self):
        x, y = toy()
        model = GaussianRegression(0.1)
        cfg = DropoutConfig(dropout_rate=0.05, learning_rate=0.01, max_epochs=2000)
        w, loss = dropout_fit(model, SPEC, x, y, cfg, seed=3)
        w0 = baselines.init_weights(SPEC, np.random.default_rng(3), cfg.init_scale)
        assert loss < map_objective(model, SPEC, w0, x, y, prior_matching_lambda(model))
        w2, _ = dropout_fit(model, SPEC, x, y, cfg, seed=3)
        assert np.array_equal(w, w2)

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            DropoutConfig(dropout_rate=1.0)


class TestEnsemble:
    cfg = EnsembleConfig(n_members=3, learning_rate=0.01, max_epochs=300)

    def test_members_differ_and_are_reproducible(self):
        x, y = toy()
        model = GaussianRegression(0.1)
        a = ensemble_fit(model, SPEC, x, y, self.cfg, master_seed=5)
        b = ensemble_fit(model, SPEC, x, y, self.cfg, master_seed=5)
        assert len(a) == 3
        assert not np.array_equal(a[0].weights, a[1].weights)
        assert all(np.array_equal(m.weights, n.weights) for m, n in zip(a, b))
        pred = ensemble_predictive_samples(a, SPEC, model, x, seed=0, include_noise=False)
        assert pred.latent.shape == (3, x.shape[0])

    def test_parallel_matches_serial(self):
        x, y = toy()
        model = GaussianRegression(0.1)
        a = ensemble_fit(model, SPEC, x, y, self.cfg, master_seed=5)
        b = ensemble_fit(model, SPEC, x, y, self.cfg, master_seed=5, workers=2)
        assert [m.seed for m in a] == [m.seed for m in b]
        assert all(np.array_equal(m.weights, n.weights) for m, n in zip(a, b))

    def test_failed_member_retried_once(self, monkeypatch):
        real = baselines.fit_member
        calls = []

        def flaky(model, spec, target, cfg, seed):
            calls.append(seed)
            if seed == member_seed(9, 1):
                raise FloatingPointError("boom")
            return real(model, spec, target, cfg, seed)

        monkeypatch.setattr(baselines, "fit_member", flaky)
        x, y = toy()
        members = ensemble_fit(GaussianRegression(0.1), SPEC, x, y, self.cfg, master_seed=9)
        assert [m.resampled for m in members] == [False, True, False]
        assert members[1].seed == member_seed(9, 1, 1)
        assert len(calls) == 4

    def test_second_failure_propagates(self, monkeypatch):
        def always(*args):
            raise FloatingPointError("boom")

        monkeypatch.setattr(baselines, "fit_member", always)
        x, y = toy()
        with pytest.raises(FloatingPointError):
            ensemble_fit(GaussianRegression(0.1), SPEC, x, y, self.cfg, master_seed=0)

    def test_save_load_round_trip(self, tmp_path):
        x, y = toy()
        members = ensemble_fit(GaussianRegression(0.1), SPEC, x, y, self.cfg, master_seed=1)
        save_members(members, tmp_path / "members")
        back = load_members(tmp_path / "members")
        for m, n in zip(members, back):
            assert (m.index, m.seed, m.final_loss, m.resampled) == \
                   (n.index, n.seed, n.final_loss, n.resampled)
            assert np.array_equal(m.weights, n.weights)

"""MC dropout and deep ensembles trained to the posterior mode.

The MAP objective is ``-log p(D | w) + lam * ||w||^2 / scale`` where
``scale = 2 sigma^2`` for Gaussian regression and ``scale = 1`` for
classification. With ``lam = sigma^2`` (regression) or ``lam = 0.5``
(classification) the penalty is ``||w||^2 / 2``: the objective is then the
negative log joint under the N(0, I) prior, up to a constant.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from bnn_uq.nn import (
    AdamState, GaussianRegression, LogJoint, MlpSpec, adam_step, backward, forward,
    forward_tape, init_weights, log_likelihood,
)
from bnn_uq.metrics import PredictiveSamples, predictive_from_latent


def penalty_scale(model) -> float:
    if isinstance(model, GaussianRegression):
        return 2.0 * model.noise_var
    return 1.0


def prior_matching_lambda(model) -> float:
    """The ``lam`` that turns the MAP objective into the negative log joint."""
    if isinstance(model, GaussianRegression):
        return model.noise_var
    return 0.5


def map_objective(model, spec: MlpSpec, w, x, y, lam: float) -> float:
    if lam < 0:
        raise ValueError("lam must be non-negative")
    w = np.asarray(w, dtype=float)
    return -log_likelihood(model, spec, w, x, y) + lam * float(w @ w) / penalty_scale(model)


def map_objective_grad(model, spec: MlpSpec, w, x, y, lam: float) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    _, g = LogJoint(model, spec, x, y).loglik_and_grad(w)
    return -g + 2.0 * lam * w / penalty_scale(model)


@dataclass(frozen=True)
class DropoutConfig:
    dropout_rate: float = 0.01
    lam: float | None = None  # None: prior-matching value for the likelihood
    learning_rate: float = 0.05
    max_epochs: int = 50_000
    patience: int = 500
    tol: float = 1e-4
    mc_samples: int = 500
    init_scale: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lam must be non-negative")


@dataclass(frozen=True)
class EnsembleConfig:
    n_members: int = 500
    learning_rate: float = 0.005
    lam: float | None = None
    max_epochs: int = 50_000
    patience: int = 500
    tol: float = 1e-4
    init_scale: float = 1.0

    def __post_init__(self):
        if self.n_members < 1:
            raise ValueError("n_members must be at least 1")


class _Plateau:
    """Signals once the ``window``-step mean loss has not improved for ``patience`` steps.

    An improvement must beat the best windowed mean by ``tol`` relative to
    its magnitude; averaging keeps Adam's step-to-step jitter from either
    stopping or prolonging training.
    """

    def __init__(self, patience, tol, window=50):
        self.patience, self.tol, self.window = patience, tol, window
        self.best = math.inf
        self.wait = 0
        self._recent = []
        self._sum = 0.0

    def update(self, loss) -> bool:
        self._recent.append(loss)
        self._sum += loss
        if len(self._recent) > self.window:
            self._sum -= self._recent.pop(0)
        if len(self._recent) < self.window:
            return False
        smooth = self._sum / self.window
        if self.best == math.inf or smooth < self.best - self.tol * max(1.0, abs(self.best)):
            self.best = smooth
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def _hidden_masks(spec, n_rows, rate, rng):
    keep = 1.0 - rate
    return [(rng.uniform(size=(n_rows, width)) < keep) / keep
            for width in spec.layer_widths[1:-1]]


def dropout_fit(model, spec: MlpSpec, x, y, cfg: DropoutConfig, seed: int):
    """Train with Bernoulli dropout on hidden units (fresh mask per row per step).

    Returns ``(weights, final_loss)`` where the loss is the MAP objective
    evaluated without dropout.
    """
    rng = np.random.default_rng(seed)
    lam = prior_matching_lambda(model) if cfg.lam is None else cfg.lam
    scale = penalty_scale(model)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    w = init_weights(spec, rng, cfg.init_scale)
    opt = AdamState.zeros(spec.n_params, lr=cfg.learning_rate)
    stop = _Plateau(cfg.patience, cfg.tol)
    for step in range(cfg.max_epochs):
        masks = (_hidden_masks(spec, x.shape[0], cfg.dropout_rate, rng)
                 if cfg.dropout_rate > 0 else None)
        out, tape = forward_tape(spec, w, x, masks)
        loss = -float(np.sum(model.point_loglik(out, y))) + lam * float(w @ w) / scale
        if not math.isfinite(loss):
            raise FloatingPointError(f"dropout training diverged at step {step}")
        if stop.update(loss):
            break
        grad = backward(spec, w, tape, model.dloglik_df(out, y)) - 2.0 * lam * w / scale
        opt, w = adam_step(opt, w, grad)
    return w, map_objective(model, spec, w, x, y, lam)


def dropout_predictive_samples(w, spec: MlpSpec, model, x, n_samples: int, rate: float,
                               seed: int, include_noise: bool = True) -> PredictiveSamples:
    """``n_samples`` stochastic passes, one hidden-unit mask per pass.

    Sharing a mask across inputs makes each pass a single coherent function,
    the same way a posterior weight draw would be.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_samples):
        masks = _hidden_masks(spec, 1, rate, rng) if rate > 0 else None
        rows.append(forward(spec, w, x, masks)[:, 0])
    return predictive_from_latent(np.array(rows), model, rng, include_noise)


def fit_member(model, spec: MlpSpec, target: LogJoint, cfg: EnsembleConfig, seed: int):
    """One ensemble member: random init, full-batch Adam on the MAP objective."""
    rng = np.random.default_rng(seed)
    lam = prior_matching_lambda(model) if cfg.lam is None else cfg.lam
    scale = penalty_scale(model)
    w = init_weights(spec, rng, cfg.init_scale)
    opt = AdamState.zeros(spec.n_params, lr=cfg.learning_rate)
    stop = _Plateau(cfg.patience, cfg.tol)
    loss = math.inf
    for step in range(cfg.max_epochs):
        ll, g = target.loglik_and_grad(w)
        loss = -ll + lam * float(w @ w) / scale
        if not math.isfinite(loss):
            raise FloatingPointError(f"member diverged at step {step}")
        if stop.update(loss):
            break
        opt, w = adam_step(opt, w, g - 2.0 * lam * w / scale)
    return w, loss


@dataclass(frozen=True)
class EnsembleMember:
    index: int
    seed: int
    weights: np.ndarray
    final_loss: float
    resampled: bool = False


def member_seed(master_seed: int, index: int, attempt: int = 0) -> int:
    return int(np.random.SeedSequence([master_seed, index, attempt]).generate_state(1)[0])


def _member_with_retry(model, spec, target, cfg, master_seed, i):
    seed = member_seed(master_seed, i)
    try:
        w, loss = fit_member(model, spec, target, cfg, seed)
        return EnsembleMember(i, seed, w, loss)
    except FloatingPointError:
        seed = member_seed(master_seed, i, 1)
        w, loss = fit_member(model, spec, target, cfg, seed)
        return EnsembleMember(i, seed, w, loss, resampled=True)


def _member_task(args):
    model, spec, x, y, cfg, master_seed, i = args
    return _member_with_retry(model, spec, LogJoint(model, spec, x, y), cfg, master_seed, i)


def ensemble_fit(model, spec: MlpSpec, x, y, cfg: EnsembleConfig, master_seed: int,
                 workers: int = 1):
    """Train ``cfg.n_members`` independent MAP networks.

    A member whose loss goes non-finite is retried once with a fresh seed;
    a second failure propagates. With ``workers > 1`` members train in a
    process pool; every member has its own seed, so the result is the same.
    """
    if workers > 1:
        jobs = [(model, spec, x, y, cfg, master_seed, i) for i in range(cfg.n_members)]
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_member_task, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    target = LogJoint(model, spec, x, y)
    return [_member_with_retry(model, spec, target, cfg, master_seed, i)
            for i in range(cfg.n_members)]


def ensemble_predictive_samples(members, spec, model, x, seed: int,
                                include_noise: bool = True) -> PredictiveSamples:
    latent = np.array([forward(spec, m.weights, x)[:, 0] for m in members])
    return predictive_from_latent(latent, model, np.random.default_rng(seed), include_noise)


def save_members(members, path_prefix) -> None:
    """``<prefix>.npy`` holds the stacked weights; ``<prefix>.csv`` the manifest."""
    np.save(f"{path_prefix}.npy", np.array([m.weights for m in members]))
    with open(f"{path_prefix}.csv", "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["member", "seed", "final_loss", "resampled"])
        for m in members:
            out.writerow([m.index, m.seed, f"{m.final_loss:.17g}", int(m.resampled)])


def load_members(path_prefix):
    weights = np.load(f"{path_prefix}.npy")
    with open(f"{path_prefix}.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EnsembleMember(int(r["member"]), int(r["seed"]), weights[k],
                           float(r["final_loss"]), bool(int(r["resampled"])))
            for k, r in enumerate(rows)]

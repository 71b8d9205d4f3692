"""Mean-field Gaussian variational inference and moment-matched Gaussians."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from bnn_uq.nn import AdamState, LogJoint, adam_step
from bnn_uq.samplers import PosteriorSamples


class InsufficientSamplesError(ValueError):
    pass


def softplus(rho):
    return np.logaddexp(0.0, rho)


def inverse_softplus(sigma):
    sigma = np.asarray(sigma, dtype=float)
    return sigma + np.log(-np.expm1(-sigma))


@dataclass(frozen=True)
class MeanFieldGaussian:
    """``q(w) = N(mu, diag(softplus(rho))^2)``."""

    mu: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.rho.shape or self.mu.ndim != 1:
            raise ValueError("mu and rho must be vectors of equal length")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.rho))):
            raise ValueError("non-finite variational parameters")

    @classmethod
    def from_sigma(cls, mu, sigma) -> "MeanFieldGaussian":
        mu = np.asarray(mu, dtype=float)
        return cls(mu, np.broadcast_to(inverse_softplus(sigma), mu.shape).copy())

    @property
    def sigma(self) -> np.ndarray:
        return softplus(self.rho)

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class MomentGaussian:
    """Full-covariance Gaussian with a cached sampling factor ``F F^T = cov``."""

    mean: np.ndarray
    cov: np.ndarray
    factor: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.size


def kl_diag_gaussian(q: MeanFieldGaussian) -> float:
    """KL(q || N(0, I)) in closed form."""
    s2 = q.sigma ** 2
    return float(0.5 * np.sum(s2 + q.mu ** 2 - 1.0 - np.log(s2)))


def _elbo_terms(q: MeanFieldGaussian, target: LogJoint, xi: np.ndarray):
    sigma = q.sigma
    ll = 0.0
    g_mu = np.zeros(q.dim)
    g_sigma = np.zeros(q.dim)
    for e in xi:
        v, g = target.loglik_and_grad(q.mu + sigma * e)
        ll += v
        g_mu += g
        g_sigma += g * e
    n = xi.shape[0]
    ll /= n
    g_mu /= n
    g_sigma /= n
    kl = kl_diag_gaussian(q)
    g_mu -= q.mu
    g_sigma -= sigma - 1.0 / sigma
    # d softplus(rho) / d rho = logistic(rho)
    g_rho = g_sigma * np.exp(-np.logaddexp(0.0, -q.rho))
    return ll - kl, ll, kl, g_mu, g_rho


def elbo_value_and_grad(q: MeanFieldGaussian, model, spec, x, y, n_mc: int, seed: int):
    """Reparameterised ELBO estimate and its gradients w.r.t. ``mu`` and ``rho``."""
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    xi = np.random.default_rng(seed).standard_normal((n_mc, q.dim))
    elbo, _, _, g_mu, g_rho = _elbo_terms(q, LogJoint(model, spec, x, y), xi)
    return elbo, g_mu, g_rho


def elbo_estimate(q: MeanFieldGaussian, model, spec, x, y, n_mc: int, seed: int) -> float:
    """``mean_s log p(D | mu + sigma * xi_s) - KL(q || prior)``."""
    return elbo_value_and_grad(q, model, spec, x, y, n_mc, seed)[0]


@dataclass(frozen=True)
class VIConfig:
    learning_rate: float = 1e-3
    max_epochs: int = 20_000
    n_mc: int = 5
    patience: int = 500
    tol: float = 1e-3
    smooth_window: int = 50
    init_mode: str = "standard"
    init_sigma: float = 0.05
    init_mu_scale: float = 0.1

    def __post_init__(self):
        if min(self.max_epochs, self.n_mc, self.patience, self.smooth_window) < 1:
            raise ValueError("counts must be positive")
        if self.init_mode not in ("standard", "hmc_mean"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")


@dataclass
class TrainingLog:
    elbo: list[float] = field(default_factory=list)
    kl: list[float] = field(default_factory=list)
    loglik: list[float] = field(default_factory=list)
    converged: bool = False

    def smoothed(self, window: int = 50) -> np.ndarray:
        e = np.asarray(self.elbo)
        if e.size < window:
            return np.array([e.mean()]) if e.size else e
        c = np.cumsum(np.insert(e, 0, 0.0))
        return (c[window:] - c[:-window]) / window

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["step", "elbo", "kl", "loglik"])
            for i, row in enumerate(zip(self.elbo, self.kl, self.loglik)):
                out.writerow([i] + [repr(float(v)) for v in row])


def bbb_fit(model, spec, x, y, cfg: VIConfig, seed: int, init_mean=None):
    """Bayes by Backprop: Adam ascent on the reparameterised ELBO.

    Stops once the ``smooth_window``-step running mean of the ELBO has not
    improved by more than ``cfg.tol`` for ``cfg.patience`` steps, or after
    ``max_epochs`` full-batch steps.

    Args:
        init_mean: Required for ``init_mode="hmc_mean"``; the variational
            means start exactly here (e.g. the mean of HMC draws).

    Returns:
        ``(MeanFieldGaussian, TrainingLog)``.
    """
    target = LogJoint(model, spec, x, y)
    rng = np.random.default_rng(seed)
    if cfg.init_mode == "hmc_mean":
        if init_mean is None:
            raise ValueError("hmc_mean initialisation needs init_mean")
        mu = np.array(init_mean, dtype=float)
    else:
        mu = cfg.init_mu_scale * rng.standard_normal(spec.n_params)
    q = MeanFieldGaussian.from_sigma(mu, cfg.init_sigma)
    params = np.concatenate([q.mu, q.rho])
    opt = AdamState.zeros(params.size, lr=cfg.learning_rate)
    log = TrainingLog()
    best = -math.inf
    since_best = 0
    window_sum = 0.0
    P = spec.n_params
    for step in range(cfg.max_epochs):
        xi = rng.standard_normal((cfg.n_mc, P))
        elbo, ll, kl, g_mu, g_rho = _elbo_terms(q, target, xi)
        if not math.isfinite(elbo):
            raise FloatingPointError(f"non-finite ELBO at step {step}")
        log.elbo.append(elbo)
        log.kl.append(kl)
        log.loglik.append(ll)
        window_sum += elbo
        if step >= cfg.smooth_window:
            window_sum -= log.elbo[step - cfg.smooth_window]
        if step + 1 >= cfg.smooth_window:
            smooth = window_sum / cfg.smooth_window
            if smooth > best + cfg.tol:
                best = smooth
                since_best = 0
            else:
                since_best += 1
                if since_best >= cfg.patience:
                    log.converged = True
                    break
        opt, params = adam_step(opt, params, np.concatenate([g_mu, g_rho]))
        q = MeanFieldGaussian(params[:P].copy(), params[P:].copy())
    return q, log


# -- sampling and moment matching ------------------------------------------------


def sample_weights(q, n_samples: int, seed: int, method: str = "") -> PosteriorSamples:
    """Draw ``n_samples`` i.i.d. weight vectors from ``q``."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    xi = np.random.default_rng(seed).standard_normal((n_samples, q.dim))
    if isinstance(q, MeanFieldGaussian):
        w = q.mu + xi * q.sigma
        method = method or "bbb"
    else:
        w = q.mean + xi @ q.factor.T
        method = method or "moment-gaussian"
    return PosteriorSamples(w, method, seed)


def gaussian_moment_fit(samples) -> MomentGaussian:
    """Empirical mean and unbiased covariance of weight draws.

    The sampling factor is ``V sqrt(max(lambda, 0))`` from the symmetric
    eigendecomposition, so round-off negative eigenvalues become 0.
    """
    w = np.asarray(getattr(samples, "weights", samples), dtype=float)
    if w.ndim != 2 or w.shape[0] < 2:
        raise InsufficientSamplesError("need at least two samples")
    mean = w.mean(axis=0)
    d = w - mean
    cov = d.T @ d / (w.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    lam, vec = np.linalg.eigh(cov)
    factor = vec * np.sqrt(np.clip(lam, 0.0, None))
    return MomentGaussian(mean, cov, factor)

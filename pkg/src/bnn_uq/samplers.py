"""HMC, SGLD and SGHMC over flat weight vectors.

Every sampler works on a *target*: a callable ``target(w, batch=None)``
returning ``(log_density, gradient)`` and exposing ``dim`` and ``n_data``.
:class:`bnn_uq.nn.LogJoint` is the usual target; :class:`GaussianTarget`
is a closed-form stand-in used for checking the samplers themselves.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np


class DivergenceError(RuntimeError):
    """A chain produced non-finite states for too long to continue."""


@dataclass(frozen=True)
class PosteriorSamples:
    """``S x P`` retained weight draws plus where they came from."""

    weights: np.ndarray
    method: str
    seed: int
    config_digest: str = ""
    truncated: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 2:
            raise ValueError("weights must be S x P")
        if not np.all(np.isfinite(w)):
            raise ValueError("non-finite posterior samples")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.weights.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights.mean(axis=0)


def config_digest(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def retained_count(iterations: int, burn_in: int, thinning: int) -> int:
    """Number of draws kept after discarding ``burn_in`` and thinning."""
    return (iterations - burn_in) // thinning


def _is_retained(it: int, burn_in: int, thinning: int) -> bool:
    return it >= burn_in and (it - burn_in + 1) % thinning == 0


def _check_schedule(iterations, burn_in, thinning):
    if iterations <= 0 or thinning < 1:
        raise ValueError("iterations must be positive and thinning >= 1")
    if not 0 <= burn_in < iterations:
        raise ValueError("burn_in must satisfy 0 <= burn_in < iterations")


@dataclass(frozen=True)
class HmcConfig:
    leapfrog_steps: int = 100
    step_size: float = 2e-3
    iterations: int = 50_000
    burn_in: int = 40_000
    thinning: int = 20
    adapt_window: int = 100
    adapt_high: float = 0.8
    adapt_low: float = 0.2
    step_up: float = 1.1
    step_down: float = 0.9
    init_scale: float = 0.1
    trace_coords: tuple[int, ...] = (0, 1, 2)
    max_divergent: int = 1000
    # each trajectory uses eps * U(1 - jitter, 1 + jitter); 0 keeps eps fixed
    step_jitter: float = 0.0

    def __post_init__(self):
        _check_schedule(self.iterations, self.burn_in, self.thinning)
        if self.leapfrog_steps < 1 or not self.step_size > 0:
            raise ValueError("need leapfrog_steps >= 1 and step_size > 0")
        if not 0.0 <= self.step_jitter < 1.0:
            raise ValueError("step_jitter must be in [0, 1)")
        if not self.adapt_low < self.adapt_high:
            raise ValueError("adapt_low must be below adapt_high")


@dataclass(frozen=True)
class SgldConfig:
    step_size: float = 1e-3
    iterations: int = 500_000
    burn_in: int = 450_000
    thinning: int = 100
    batch_size: int = 32
    init_scale: float = 0.1
    trace_coords: tuple[int, ...] = (0, 1, 2)
    max_divergent: int = 10
    # True: step_size is a learning rate on the per-datum average log-likelihood,
    # so the Langevin step is step_size / N
    per_datum: bool = False

    def __post_init__(self):
        _check_schedule(self.iterations, self.burn_in, self.thinning)
        if not self.step_size > 0 or self.batch_size < 1:
            raise ValueError("need step_size > 0 and batch_size >= 1")


@dataclass(frozen=True)
class SghmcConfig:
    step_size: float = 2e-3
    leapfrog_steps: int = 100
    friction: float = 10.0
    noise_estimate: float = 0.0
    iterations: int = 50_000
    burn_in: int = 40_000
    thinning: int = 20
    batch_size: int = 32
    init_scale: float = 0.1
    trace_coords: tuple[int, ...] = (0, 1, 2)
    max_divergent: int = 10

    def __post_init__(self):
        _check_schedule(self.iterations, self.burn_in, self.thinning)
        if not self.friction > 0 or self.noise_estimate < 0:
            raise ValueError("need friction > 0 and noise_estimate >= 0")
        if self.noise_estimate > self.friction:
            raise ValueError("noise_estimate cannot exceed friction")


class ChainStats:
    """Per-iteration traces recorded while a chain runs.

    Holds the log-joint value, acceptance indicator, step size and a few
    tracked weight coordinates for every iteration, plus the per-window
    acceptance rates and step sizes of the HMC adaptation.
    """

    def __init__(self, iterations: int, trace_coords=()):
        self.trace_coords = tuple(trace_coords)
        self.log_joint = np.full(iterations, np.nan)
        self.acceptance = np.zeros(iterations)
        self.step_size = np.zeros(iterations)
        self.coord_trace = np.zeros((iterations, len(self.trace_coords)))
        self.window_acceptance: list[float] = []
        self.step_size_history: list[float] = []
        self.n_recorded = 0
        self.n_divergent = 0
        self.truncated = False
        self._cols = list(self.trace_coords)

    def record(self, logp, accept, eps, w):
        i = self.n_recorded
        self.log_joint[i] = logp
        self.acceptance[i] = accept
        self.step_size[i] = eps
        self.coord_trace[i] = w[self._cols]
        self.n_recorded += 1

    def finish(self):
        n = self.n_recorded
        self.log_joint = self.log_joint[:n]
        self.acceptance = self.acceptance[:n]
        self.step_size = self.step_size[:n]
        self.coord_trace = self.coord_trace[:n]
        return self

    def coordinate(self, k: int) -> np.ndarray:
        """Trace of the ``k``-th tracked coordinate."""
        return self.coord_trace[:self.n_recorded, k]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["iteration", "log_joint", "acceptance", "step_size"]
                         + [f"w{c}" for c in self.trace_coords])
            for it in range(self.n_recorded):
                out.writerow([it, repr(float(self.log_joint[it])),
                              repr(float(self.acceptance[it])),
                              repr(float(self.step_size[it]))]
                             + [repr(float(v)) for v in self.coord_trace[it]])


class GaussianTarget:
    """Multivariate normal log density ``N(mean, cov)`` with ``n_data = 0``."""

    def __init__(self, mean, cov):
        self.mean = np.asarray(mean, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.precision = np.linalg.inv(self.cov)
        self.dim = self.mean.size
        self.n_data = 0
        _, logdet = np.linalg.slogdet(self.cov)
        self._const = -0.5 * (self.dim * math.log(2 * math.pi) + logdet)

    def __call__(self, w, batch=None):
        d = w - self.mean
        g = -self.precision @ d
        return self._const + 0.5 * float(d @ g), g


# -- HMC ---------------------------------------------------------------------


def leapfrog(w, momentum, step_size: float, n_steps: int,
             value_and_grad: Callable, start=None):
    """Integrate Hamiltonian dynamics with unit mass for ``n_steps`` steps.

    ``value_and_grad(w)`` returns the log density and its gradient; ``start``
    may carry that pair for the initial ``w`` to save one evaluation.
    Returns ``(w, momentum, log_density, gradient)`` at the end point. A
    non-finite end state comes back as-is for the caller to reject.
    """
    logp, grad = value_and_grad(w) if start is None else start
    p = momentum + 0.5 * step_size * grad
    w = w + step_size * p
    for _ in range(n_steps - 1):
        logp, grad = value_and_grad(w)
        p += step_size * grad
        w += step_size * p
    logp, grad = value_and_grad(w)
    p += 0.5 * step_size * grad
    return w, p, logp, grad


def adapt_step_size(step_size: float, acceptance_rate: float, cfg: HmcConfig) -> float:
    """Multiplicative window rule: grow above ``adapt_high``, shrink below ``adapt_low``."""
    if acceptance_rate > cfg.adapt_high:
        return step_size * cfg.step_up
    if acceptance_rate < cfg.adapt_low:
        return step_size * cfg.step_down
    return step_size


def hmc_run(target, cfg: HmcConfig, seed: int, init=None, deadline: float | None = None):
    """Metropolis-corrected HMC with window-based step-size adaptation.

    The step size is revisited every ``cfg.adapt_window`` iterations during
    burn-in only, so retained draws come from a fixed kernel. ``deadline`` is
    a ``time.monotonic()`` value after which the chain stops early and the
    result is flagged as truncated.

    Returns:
        ``(PosteriorSamples, ChainStats)``.
    """
    rng = np.random.default_rng(seed)
    w = rng.normal(0.0, cfg.init_scale, target.dim) if init is None else np.array(init, float)
    logp, grad = target(w)
    eps = cfg.step_size
    stats = ChainStats(cfg.iterations, [c for c in cfg.trace_coords if c < target.dim])
    kept = []
    window_accepts = 0
    bad_streak = 0
    for it in range(cfg.iterations):
        if deadline is not None and time.monotonic() > deadline:
            stats.truncated = True
            break
        p0 = rng.standard_normal(target.dim)
        h0 = -logp + 0.5 * float(p0 @ p0)
        eps_it = eps
        if cfg.step_jitter:
            eps_it = eps * rng.uniform(1.0 - cfg.step_jitter, 1.0 + cfg.step_jitter)
        with np.errstate(all="ignore"):
            w1, p1, logp1, grad1 = leapfrog(w, p0, eps_it, cfg.leapfrog_steps, target,
                                            start=(logp, grad))
            h1 = -logp1 + 0.5 * float(p1 @ p1)
        log_u = math.log(rng.uniform())
        if math.isfinite(h1) and np.all(np.isfinite(grad1)):
            bad_streak = 0
            accepted = log_u < h0 - h1
        else:
            bad_streak += 1
            stats.n_divergent += 1
            accepted = False
            if bad_streak >= cfg.max_divergent:
                raise DivergenceError(
                    f"{bad_streak} consecutive non-finite trajectories at iteration {it} "
                    f"(step size {eps:.3g})")
        if accepted:
            w, logp, grad = w1, logp1, grad1
        window_accepts += accepted
        stats.record(logp, accepted, eps, w)
        if (it + 1) % cfg.adapt_window == 0:
            rate = window_accepts / cfg.adapt_window
            stats.window_acceptance.append(rate)
            if it < cfg.burn_in:
                eps = adapt_step_size(eps, rate, cfg)
            stats.step_size_history.append(eps)
            window_accepts = 0
        if _is_retained(it, cfg.burn_in, cfg.thinning):
            kept.append(w.copy())
    samples = PosteriorSamples(_stack(kept, target.dim), "hmc", seed, config_digest(cfg),
                               truncated=stats.truncated)
    return samples, stats.finish()


def _stack(rows, dim):
    return np.array(rows) if rows else np.zeros((0, dim))


# -- stochastic-gradient samplers ------------------------------------------


class Minibatcher:
    """Index batches drawn without replacement, reshuffled every epoch.

    Yields ``None`` (meaning "all data") when the batch covers the data set.
    """

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n = n
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.arange(0)
        self._pos = 0

    def next(self):
        if self.n == 0 or self.batch_size >= self.n:
            return None
        if self._pos >= self.n:
            self._pos = 0
        if self._pos == 0:
            self._order = self.rng.permutation(self.n)
        idx = self._order[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _finite(logp, grad, w):
    return math.isfinite(logp) and np.all(np.isfinite(grad)) and np.all(np.isfinite(w))


def sgld_run(target, cfg: SgldConfig, seed: int, init=None, deadline: float | None = None):
    """Stochastic gradient Langevin dynamics with a constant step size.

    Update: ``w <- w + (eps / 2) * grad_hat + N(0, eps I)``, no accept/reject,
    with ``eps = step_size`` or ``step_size / N`` when ``cfg.per_datum``.
    The recorded log-joint trace is the minibatch estimate at each step.
    """
    rng = np.random.default_rng(seed)
    batches = Minibatcher(target.n_data, cfg.batch_size, rng)
    w = rng.normal(0.0, cfg.init_scale, target.dim) if init is None else np.array(init, float)
    eps = cfg.step_size / max(target.n_data, 1) if cfg.per_datum else cfg.step_size
    noise_sd = math.sqrt(eps)
    stats = ChainStats(cfg.iterations, [c for c in cfg.trace_coords if c < target.dim])
    kept = []
    bad_streak = 0
    for it in range(cfg.iterations):
        if deadline is not None and time.monotonic() > deadline:
            stats.truncated = True
            break
        with np.errstate(all="ignore"):
            logp, grad = target(w, batches.next())
            w_new = w + 0.5 * eps * grad + noise_sd * rng.standard_normal(target.dim)
        if _finite(logp, grad, w_new):
            bad_streak = 0
            w = w_new
        else:
            bad_streak += 1
            stats.n_divergent += 1
            if bad_streak >= cfg.max_divergent:
                raise DivergenceError(f"SGLD diverged at iteration {it}")
        stats.record(logp, 1.0, eps, w)
        if _is_retained(it, cfg.burn_in, cfg.thinning):
            kept.append(w.copy())
    samples = PosteriorSamples(_stack(kept, target.dim), "sgld", seed, config_digest(cfg),
                               truncated=stats.truncated)
    return samples, stats.finish()


def sghmc_run(target, cfg: SghmcConfig, seed: int, init=None, deadline: float | None = None):
    """Stochastic gradient HMC with friction ``C = friction * I``.

    Each iteration draws fresh momentum ``p ~ N(0, I)`` and takes
    ``leapfrog_steps`` inner steps::

        w <- w + eps * p
        p <- p + eps * grad_hat(w) - eps * C * p + N(0, 2 (C - B_hat) eps)

    with a new minibatch per inner step.
    """
    rng = np.random.default_rng(seed)
    batches = Minibatcher(target.n_data, cfg.batch_size, rng)
    w = rng.normal(0.0, cfg.init_scale, target.dim) if init is None else np.array(init, float)
    eps = cfg.step_size
    damp = 1.0 - eps * cfg.friction
    noise_sd = math.sqrt(2.0 * (cfg.friction - cfg.noise_estimate) * eps)
    stats = ChainStats(cfg.iterations, [c for c in cfg.trace_coords if c < target.dim])
    kept = []
    bad_streak = 0
    logp = float("nan")
    for it in range(cfg.iterations):
        if deadline is not None and time.monotonic() > deadline:
            stats.truncated = True
            break
        p = rng.standard_normal(target.dim)
        w_start = w.copy()
        ok = True
        with np.errstate(all="ignore"):
            for _ in range(cfg.leapfrog_steps):
                w = w + eps * p
                logp, grad = target(w, batches.next())
                p = damp * p + eps * grad + noise_sd * rng.standard_normal(target.dim)
            ok = _finite(logp, grad, w) and np.all(np.isfinite(p))
        if ok:
            bad_streak = 0
        else:
            bad_streak += 1
            stats.n_divergent += 1
            w = w_start
            if bad_streak >= cfg.max_divergent:
                raise DivergenceError(f"SGHMC diverged at iteration {it}")
        stats.record(logp, 1.0, eps, w)
        if _is_retained(it, cfg.burn_in, cfg.thinning):
            kept.append(w.copy())
    samples = PosteriorSamples(_stack(kept, target.dim), "sghmc", seed, config_digest(cfg),
                               truncated=stats.truncated)
    return samples, stats.finish()

"""Posterior predictive samples and the scores computed from them."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import rankdata

from bnn_uq.nn import BernoulliClassification, MlpSpec, forward, sigmoid

MIN_SAMPLES_FOR_INTERVALS = 40


@dataclass(frozen=True)
class PredictiveSamples:
    """``S x N`` draws from the predictive at ``N`` inputs.

    ``values`` are the draws used for intervals (regression outputs, with
    observation noise when ``includes_observation_noise``; class-1
    probabilities for classification). ``latent`` keeps the raw network
    outputs ``f(x; W_s)`` from which likelihoods and means are computed.
    """

    values: np.ndarray
    latent: np.ndarray
    kind: str
    includes_observation_noise: bool = False

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape != self.latent.shape:
            raise ValueError("values and latent must both be S x N")
        if self.values.shape[0] < 1:
            raise ValueError("need at least one sample")
        if self.kind == "classification" and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("probabilities outside [0, 1]")

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class IntervalBand:
    mean: np.ndarray
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        if np.any(self.low > self.high):
            raise ValueError("band with low > high")


def predictive_from_latent(latent: np.ndarray, model, rng=None,
                           include_noise: bool = True) -> PredictiveSamples:
    latent = np.asarray(latent, dtype=float)
    if isinstance(model, BernoulliClassification):
        return PredictiveSamples(sigmoid(latent), latent, "classification", False)
    if include_noise:
        if rng is None:
            raise ValueError("an rng is needed to draw observation noise")
        return PredictiveSamples(model.sample(latent, rng), latent, "regression", True)
    return PredictiveSamples(latent.copy(), latent, "regression", False)


def predictive_from_weights(samples, spec: MlpSpec, model, x, seed: int = 0,
                            include_noise: bool = True) -> PredictiveSamples:
    """Push every retained weight vector through the network at ``x``.

    ``samples`` is a :class:`PosteriorSamples` or a plain ``S x P`` array.
    Single-output networks only.
    """
    weights = getattr(samples, "weights", samples)
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    if spec.n_outputs != 1:
        raise ValueError("predictive samples are defined for one output")
    latent = np.stack([forward(spec, w, x)[:, 0] for w in weights])
    return predictive_from_latent(latent, model, np.random.default_rng(seed), include_noise)


# -- scores --------------------------------------------------------------------


def avg_test_loglik(pred: PredictiveSamples, y, model) -> float:
    """``(1/N) sum_n log((1/S) sum_s p(y_n | x_n, W_s))`` via log-sum-exp."""
    y = np.asarray(y, dtype=float).reshape(-1)
    f = pred.latent
    per = model.point_loglik(f[..., None], np.broadcast_to(y, f.shape)[..., None])
    marginal = logsumexp(per, axis=0) - math.log(f.shape[0])
    return float(np.mean(marginal))


def predictive_mean(pred: PredictiveSamples) -> np.ndarray:
    """Monte Carlo mean of ``f(x; W)`` (regression) or of the class-1 probability."""
    if pred.kind == "classification":
        return pred.values.mean(axis=0)
    return pred.latent.mean(axis=0)


def rmse(pred: PredictiveSamples, y) -> float:
    y = np.asarray(y, dtype=float).reshape(-1)
    return float(np.sqrt(np.mean((y - predictive_mean(pred)) ** 2)))


def percentile(values, q, axis=None):
    """Type-7 (linear interpolation) sample percentile, ``q`` in [0, 100]."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("percentile of empty input")
    if axis is None:
        v = v.ravel()
        axis = 0
    v = np.sort(v, axis=axis)
    n = v.shape[axis]
    h = (n - 1) * (q / 100.0)
    lo = int(math.floor(h))
    hi = min(lo + 1, n - 1)
    frac = h - lo
    a = np.take(v, lo, axis=axis)
    b = np.take(v, hi, axis=axis)
    return a + frac * (b - a)


def interval_band(pred: PredictiveSamples, level: float = 95.0) -> IntervalBand:
    tail = (100.0 - level) / 2.0
    low = percentile(pred.values, tail, axis=0)
    high = percentile(pred.values, 100.0 - tail, axis=0)
    return IntervalBand(predictive_mean(pred), low, high)


def _warn_small(pred):
    if pred.n_samples < MIN_SAMPLES_FOR_INTERVALS:
        warnings.warn(f"only {pred.n_samples} samples; 95% interval endpoints are unreliable",
                      stacklevel=3)
        return True
    return False


def picp(pred: PredictiveSamples, y) -> float:
    """Fraction of targets inside the equal-tailed 95% predictive interval."""
    _warn_small(pred)
    y = np.asarray(y, dtype=float).reshape(-1)
    band = interval_band(pred)
    return float(np.mean((y >= band.low) & (y <= band.high)))


def mpiw(pred: PredictiveSamples) -> float:
    _warn_small(pred)
    band = interval_band(pred)
    # correctly rounded sum, so the result does not depend on summation order
    return math.fsum(band.high - band.low) / band.high.size


def accuracy(pred: PredictiveSamples, y, threshold: float = 0.5) -> float:
    y = np.asarray(y).reshape(-1)
    labels = (predictive_mean(pred) > threshold).astype(float)
    return float(np.mean(labels == y))


def auc(pred_or_scores, y) -> float:
    """Mann-Whitney AUC of the mean predictive probability (ties count half)."""
    scores = (predictive_mean(pred_or_scores) if isinstance(pred_or_scores, PredictiveSamples)
              else np.asarray(pred_or_scores, dtype=float).reshape(-1))
    y = np.asarray(y).reshape(-1)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# -- reports -------------------------------------------------------------------

REGRESSION_METRICS = ("rmse", "avg_loglik", "picp", "mpiw")
CLASSIFICATION_METRICS = ("accuracy", "avg_loglik", "auc")


@dataclass
class MetricsReport:
    """Scores for one fitted method on one task's test split."""

    task: str
    method: str
    values: dict[str, float]
    flags: list[str] = field(default_factory=list)

    @property
    def kind(self) -> str:
        return "classification" if "auc" in self.values else "regression"

    def __getitem__(self, key):
        return self.values[key]

    def to_record(self) -> str:
        """Flat ``key=value`` text, one pair per line, 17 significant digits."""
        lines = [f"task={self.task}", f"method={self.method}"]
        lines += [f"{k}={v:.17g}" for k, v in self.values.items()]
        lines.append("flags=" + ",".join(self.flags))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_record(cls, text: str) -> "MetricsReport":
        kv = dict(line.split("=", 1) for line in text.strip().splitlines())
        task, method = kv.pop("task"), kv.pop("method")
        flags = [f for f in kv.pop("flags", "").split(",") if f]
        return cls(task, method, {k: float(v) for k, v in kv.items()}, flags)


def score_regression(pred: PredictiveSamples, y, model, task="", method="",
                     grid: tuple[PredictiveSamples, np.ndarray] | None = None) -> MetricsReport:
    """RMSE, average log-likelihood, PICP and MPIW; optionally log-likelihood on a grid."""
    flags = []
    if pred.n_samples < MIN_SAMPLES_FOR_INTERVALS:
        flags.append("few_samples")
    if pred.includes_observation_noise:
        flags.append("noise_in_intervals")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        values = {
            "rmse": rmse(pred, y),
            "avg_loglik": avg_test_loglik(pred, y, model),
            "picp": picp(pred, y),
            "mpiw": mpiw(pred),
        }
    if grid is not None:
        values["grid_loglik"] = avg_test_loglik(grid[0], grid[1], model)
    return MetricsReport(task, method, values, flags)


def score_classification(pred: PredictiveSamples, y, model, task="", method="") -> MetricsReport:
    return MetricsReport(task, method, {
        "accuracy": accuracy(pred, y),
        "avg_loglik": avg_test_loglik(pred, y, model),
        "auc": auc(pred, y),
    })

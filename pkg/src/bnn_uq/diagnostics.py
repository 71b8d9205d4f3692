"""Autocorrelation and effective sample size for single chains."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np


class DegenerateTraceError(ValueError):
    """The trace is constant, so mixing statistics are undefined."""


class Autocorrelation(NamedTuple):
    acf: np.ndarray
    degenerate: bool


def autocorrelation(trace, max_lag: int) -> Autocorrelation:
    """Normalised sample autocorrelation for lags ``0..max_lag``.

    Uses the biased (divide-by-S) autocovariance, which keeps every value in
    ``[-1, 1]``. A constant trace is reported as degenerate with ACF 0 beyond
    lag 0.
    """
    x = np.asarray(trace, dtype=float).ravel()
    n = x.size
    if not 0 <= max_lag < n:
        raise ValueError(f"max_lag must be in [0, {n - 1}]")
    x = x - x.mean()
    var = float(x @ x)
    if var == 0.0 or not np.isfinite(var):
        acf = np.zeros(max_lag + 1)
        acf[0] = 1.0
        return Autocorrelation(acf, True)
    size = 1 << (2 * n - 1).bit_length()
    spec = np.fft.rfft(x, size)
    acov = np.fft.irfft(spec * np.conj(spec), size)[:max_lag + 1]
    acf = np.clip(acov / acov[0], -1.0, 1.0)
    return Autocorrelation(acf, False)


def effective_sample_size(trace, cap: float = 1.05) -> float:
    """ESS of one chain with Geyer's initial positive sequence.

    The integrated autocorrelation time is ``-1 + 2 * sum_k G_k`` over the
    leading run of positive pair sums ``G_k = rho_{2k} + rho_{2k+1}``. The
    result is capped at ``cap * S`` (anti-correlated chains can exceed ``S``).
    """
    x = np.asarray(trace, dtype=float).ravel()
    n = x.size
    if n < 4:
        raise ValueError("need at least 4 draws")
    acf, degenerate = autocorrelation(x, n - 1)
    if degenerate:
        raise DegenerateTraceError("constant trace: ESS undefined")
    n_pairs = n // 2
    pairs = acf[:2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    stop = np.flatnonzero(pairs <= 0.0)
    # G_0 is always included
    k = max(int(stop[0]) if stop.size else n_pairs, 1)
    tau = -1.0 + 2.0 * float(pairs[:k].sum())
    if tau <= 0.0:
        return cap * n
    return min(n / tau, cap * n)

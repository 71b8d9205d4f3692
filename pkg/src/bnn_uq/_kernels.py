"""Compiled log-likelihood/gradient kernel for dense ReLU networks.

Activations are kept feature-major (``width x N``) so every inner loop runs
over data points and vectorises regardless of layer widths. The kernel
computes the same quantities as the tape-based numpy path in
:mod:`bnn_uq.nn`; the test-suite checks the two against each other.
"""

from __future__ import annotations

import math

import numba
import numpy as np

REGRESSION = 0
CLASSIFICATION = 1

# reassociation only: NaN/inf must still propagate so divergences are seen
_FLAGS = {"reassoc", "contract"}


def layer_offsets(widths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Start index of each weight matrix and bias vector in the flat vector."""
    n_layers = len(widths) - 1
    w_off = np.zeros(n_layers, dtype=np.int64)
    b_off = np.zeros(n_layers, dtype=np.int64)
    pos = 0
    for l in range(n_layers):
        w_off[l] = pos
        pos += widths[l] * widths[l + 1]
        b_off[l] = pos
        pos += widths[l + 1]
    return w_off, b_off


@numba.njit(cache=True, fastmath=_FLAGS)
def loglik_and_grad(w, widths, w_off, b_off, xT, yT, kind, inv_var, log_norm,
                    scale, grad, A, D):
    """Return ``scale * sum_n log p(y_n | x_n, w)``; its gradient goes to ``grad``.

    ``xT``/``yT`` are the transposed inputs/targets (``D x N``, ``K x N``).
    ``A`` and ``D`` are ``(n_layers + 1, max_width, >= N)`` scratch buffers for
    activations and back-propagated deltas. ``log_norm`` is the per-point
    Gaussian normaliser (ignored for classification).
    """
    n_layers = widths.shape[0] - 1
    N = xT.shape[1]
    for d in range(widths[0]):
        for n in range(N):
            A[0, d, n] = xT[d, n]
    for l in range(n_layers):
        din = widths[l]
        dout = widths[l + 1]
        W = w[w_off[l]:w_off[l] + din * dout].reshape((din, dout))
        Ain = A[l]
        Aout = A[l + 1]
        for j in range(dout):
            bj = w[b_off[l] + j]
            for n in range(N):
                Aout[j, n] = bj
            for i in range(din):
                wij = W[i, j]
                for n in range(N):
                    Aout[j, n] += wij * Ain[i, n]
            if l < n_layers - 1:
                for n in range(N):
                    z = Aout[j, n]
                    if z < 0.0:
                        Aout[j, n] = 0.0

    out = A[n_layers]
    dout_buf = D[n_layers]
    total = 0.0
    if kind == REGRESSION:
        for k in range(widths[n_layers]):
            for n in range(N):
                r = yT[k, n] - out[k, n]
                total += r * r
                dout_buf[k, n] = r * inv_var
        total = -0.5 * inv_var * total + N * log_norm
    else:
        for n in range(N):
            f = out[0, n]
            t = yT[0, n]
            # log sigmoid(+-f) via the log-sum-exp form
            if f >= 0.0:
                e = math.exp(-f)
                ls_pos = -math.log1p(e)
                ls_neg = -f - math.log1p(e)
                p = 1.0 / (1.0 + e)
            else:
                e = math.exp(f)
                ls_pos = f - math.log1p(e)
                ls_neg = -math.log1p(e)
                p = e / (1.0 + e)
            total += t * ls_pos + (1.0 - t) * ls_neg
            dout_buf[0, n] = t - p

    for l in range(n_layers - 1, -1, -1):
        din = widths[l]
        dout = widths[l + 1]
        W = w[w_off[l]:w_off[l] + din * dout].reshape((din, dout))
        Ain = A[l]
        Dout = D[l + 1]
        Din = D[l]
        wo = w_off[l]
        for j in range(dout):
            s = 0.0
            for n in range(N):
                s += Dout[j, n]
            grad[b_off[l] + j] = s * scale
        for i in range(din):
            for j in range(dout):
                s = 0.0
                for n in range(N):
                    s += Ain[i, n] * Dout[j, n]
                grad[wo + i * dout + j] = s * scale
        if l > 0:
            for i in range(din):
                for n in range(N):
                    Din[i, n] = 0.0
                for j in range(dout):
                    wij = W[i, j]
                    for n in range(N):
                        Din[i, n] += wij * Dout[j, n]
                # ReLU derivative, taken as 0 at the kink
                for n in range(N):
                    if not Ain[i, n] > 0.0:
                        Din[i, n] = 0.0
    return total * scale

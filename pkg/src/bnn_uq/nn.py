"""Dense ReLU networks, the N(0, I) weight prior, likelihoods and Adam.

All network parameters live in one flat float64 vector. Layer ``l`` contributes
its weight matrix (``in x out``, row-major) followed by its bias vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from bnn_uq import _kernels

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Raised when array shapes do not agree with the network spec."""


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``(input, hidden..., output)`` of a ReLU perceptron."""

    layer_widths: tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2:
            raise ValueError("need at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def layer_shapes(self) -> list[tuple[tuple[int, int], tuple[int]]]:
        w = self.layer_widths
        return [((a, b), (b,)) for a, b in zip(w[:-1], w[1:])]


@dataclass(frozen=True)
class GaussianRegression:
    """``y = f(x; W) + eps`` with ``eps ~ N(0, noise_sigma^2 I)``."""

    noise_sigma: float

    def __post_init__(self):
        if not self.noise_sigma > 0:
            raise ValueError("noise_sigma must be positive")

    kind = "regression"

    @property
    def noise_var(self) -> float:
        return self.noise_sigma ** 2

    def check_spec(self, spec: MlpSpec) -> None:
        pass

    def point_loglik(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Per-row log density; ``f`` and ``y`` are ``(..., N, K)``."""
        r = y - f
        k = f.shape[-1]
        return (-0.5 * np.sum(r * r, axis=-1) / self.noise_var
                - 0.5 * k * (LOG_2PI + math.log(self.noise_var)))

    def dloglik_df(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        return (y - f) / self.noise_var

    def sample(self, f: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return f + self.noise_sigma * rng.standard_normal(f.shape)


@dataclass(frozen=True)
class BernoulliClassification:
    """Two-class likelihood on a single logit output."""

    kind = "classification"

    def check_spec(self, spec: MlpSpec) -> None:
        if spec.n_outputs != 1:
            raise ShapeError("classification needs exactly one output logit")

    def point_loglik(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        f = f[..., 0]
        t = y[..., 0]
        return t * log_sigmoid(f) + (1.0 - t) * log_sigmoid(-f)

    def dloglik_df(self, f: np.ndarray, y: np.ndarray) -> np.ndarray:
        return y - sigmoid(f)


LikelihoodModel = GaussianRegression | BernoulliClassification


def log_sigmoid(z):
    """``log(sigmoid(z))`` computed as ``-logaddexp(0, -z)``."""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.exp(log_sigmoid(z))


# -- parameter packing ----------------------------------------------------


def flatten(params: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Concatenate per-layer ``(W, b)`` pairs into one weight vector."""
    parts = []
    for W, b in params:
        parts.append(np.asarray(W, dtype=float).ravel())
        parts.append(np.asarray(b, dtype=float).ravel())
    return np.concatenate(parts) if parts else np.zeros(0)


def unflatten(w: np.ndarray, spec: MlpSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a weight vector into per-layer ``(W, b)`` views."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {w.shape}")
    out = []
    pos = 0
    for (din, dout), _ in spec.layer_shapes():
        W = w[pos:pos + din * dout].reshape(din, dout)
        pos += din * dout
        b = w[pos:pos + dout]
        pos += dout
        out.append((W, b))
    return out


def init_weights(spec: MlpSpec, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
    return scale * rng.standard_normal(spec.n_params)


# -- forward / reverse mode ------------------------------------------------


@dataclass
class GradTape:
    """Inputs and pre-activations of every layer from one forward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)


def _check_x(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1 and spec.n_inputs == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] != spec.n_inputs:
        raise ShapeError(f"x must be N x {spec.n_inputs}, got {x.shape}")
    return x


def forward_tape(spec: MlpSpec, w: np.ndarray, x: np.ndarray,
                 masks: Sequence[np.ndarray] | None = None) -> tuple[np.ndarray, GradTape]:
    """Evaluate the network, keeping what the backward pass needs.

    ``masks`` optionally holds one multiplicative array per hidden layer
    (broadcastable to ``N x width``), applied after the ReLU. Dropout uses it.
    """
    x = _check_x(spec, x)
    layers = unflatten(w, spec)
    tape = GradTape()
    h = x
    for l, (W, b) in enumerate(layers):
        tape.inputs.append(h)
        z = h @ W + b
        tape.preacts.append(z)
        if l < len(layers) - 1:
            h = np.maximum(z, 0.0)
            m = None if masks is None else masks[l]
            if m is not None:
                h = h * m
            tape.masks.append(m)
        else:
            h = z
    return h, tape


def forward(spec: MlpSpec, w: np.ndarray, x: np.ndarray,
            masks: Sequence[np.ndarray] | None = None) -> np.ndarray:
    return forward_tape(spec, w, x, masks)[0]


def backward(spec: MlpSpec, w: np.ndarray, tape: GradTape, dout: np.ndarray) -> np.ndarray:
    """Pull ``dout`` (d objective / d output) back to a gradient over ``w``."""
    layers = unflatten(w, spec)
    grads = []
    delta = dout
    for l in range(len(layers) - 1, -1, -1):
        W, _ = layers[l]
        grads.append((tape.inputs[l].T @ delta, delta.sum(axis=0)))
        if l > 0:
            delta = delta @ W.T
            m = tape.masks[l - 1]
            if m is not None:
                delta = delta * m
            delta = delta * (tape.preacts[l - 1] > 0.0)
    return flatten(grads[::-1])


# -- densities ---------------------------------------------------------------


def _check_w(spec: MlpSpec, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.shape[0] != spec.n_params:
        raise ShapeError(f"expected {spec.n_params} parameters, got shape {w.shape}")
    return w


def _check_y(spec: MlpSpec, x: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape != (x.shape[0], spec.n_outputs):
        raise ShapeError(f"y must be {x.shape[0]} x {spec.n_outputs}, got {y.shape}")
    return y


def log_prior(w: np.ndarray) -> float:
    """log N(w; 0, I)."""
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("non-finite weights")
    return float(-0.5 * w.size * LOG_2PI - 0.5 * np.dot(w, w))


def log_likelihood(model: LikelihoodModel, spec: MlpSpec, w, x, y) -> float:
    model.check_spec(spec)
    w = _check_w(spec, w)
    x = _check_x(spec, x)
    y = _check_y(spec, x, y)
    if x.shape[0] == 0:
        return 0.0
    return float(np.sum(model.point_loglik(forward(spec, w, x), y)))


def log_joint(model: LikelihoodModel, spec: MlpSpec, w, x, y) -> float:
    return log_prior(w) + log_likelihood(model, spec, w, x, y)


def grad_log_joint(model: LikelihoodModel, spec: MlpSpec, w, x, y,
                   batch: np.ndarray | None = None) -> np.ndarray:
    """Gradient of ``log p(w) + (N / |B|) sum_{i in B} log p(y_i | x_i, w)``.

    ``batch`` is an index array into the rows of ``x``; ``None`` means all rows.
    """
    model.check_spec(spec)
    w = _check_w(spec, w)
    x = _check_x(spec, x)
    y = _check_y(spec, x, y)
    n = x.shape[0]
    grad = -w.copy()
    if batch is not None:
        batch = np.asarray(batch, dtype=np.int64)
        if batch.size == 0:
            raise ValueError("empty minibatch")
        if batch.min() < 0 or batch.max() >= n:
            raise IndexError("minibatch index out of range")
        scale = n / batch.size
        x, y = x[batch], y[batch]
    else:
        scale = 1.0
    if x.shape[0] == 0:
        return grad
    out, tape = forward_tape(spec, w, x)
    return grad + scale * backward(spec, w, tape, model.dloglik_df(out, y))


class LogJoint:
    """Log posterior density (up to a constant) of a network on fixed data.

    Calling the object returns ``(value, gradient)`` of
    ``log p(w) + (N / |B|) sum_{i in B} log p(y_i | x_i, w)``; this is the
    target the samplers and optimizers work with. It uses the compiled kernel
    and agrees with :func:`log_joint` / :func:`grad_log_joint`.
    """

    def __init__(self, model: LikelihoodModel, spec: MlpSpec, x, y):
        model.check_spec(spec)
        self.model = model
        self.spec = spec
        self.x = _check_x(spec, x).copy()
        self.y = _check_y(spec, self.x, y).copy()
        self.n_data = self.x.shape[0]
        self.dim = spec.n_params
        self._xT = np.ascontiguousarray(self.x.T)
        self._yT = np.ascontiguousarray(self.y.T)
        self._widths = np.array(spec.layer_widths, dtype=np.int64)
        self._offsets = _kernels.layer_offsets(self._widths)
        buf = (spec.n_layers + 1, max(spec.layer_widths), max(self.n_data, 1))
        self._acts = np.zeros(buf)
        self._delta = np.zeros(buf)
        if isinstance(model, GaussianRegression):
            self._kind = _kernels.REGRESSION
            self._inv_var = 1.0 / model.noise_var
            self._log_norm = -0.5 * spec.n_outputs * (LOG_2PI + math.log(model.noise_var))
        else:
            self._kind = _kernels.CLASSIFICATION
            self._inv_var = 0.0
            self._log_norm = 0.0

    def loglik_and_grad(self, w: np.ndarray, batch: np.ndarray | None = None,
                        scale: float | None = None) -> tuple[float, np.ndarray]:
        """Minibatch-scaled log-likelihood and its gradient (no prior term)."""
        if batch is None:
            xT, yT = self._xT, self._yT
            default_scale = 1.0
        else:
            if len(batch) == 0:
                raise ValueError("empty minibatch")
            xT = np.ascontiguousarray(self._xT[:, batch])
            yT = np.ascontiguousarray(self._yT[:, batch])
            default_scale = self.n_data / len(batch)
        grad = np.zeros(self.dim)
        if xT.shape[1] == 0:
            return 0.0, grad
        w_off, b_off = self._offsets
        value = _kernels.loglik_and_grad(
            np.asarray(w, dtype=float), self._widths, w_off, b_off, xT, yT, self._kind,
            self._inv_var, self._log_norm, default_scale if scale is None else scale,
            grad, self._acts, self._delta)
        return value, grad

    def __call__(self, w: np.ndarray, batch: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        ll, grad = self.loglik_and_grad(w, batch)
        grad -= w
        return ll - 0.5 * self.dim * LOG_2PI - 0.5 * float(np.dot(w, w)), grad


# -- Adam --------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, lr: float = 1e-3, **kw) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0, lr, **kw)


def adam_step(state: AdamState, w: np.ndarray, ascent: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam step *up* the gradient ``ascent``."""
    if ascent.shape != w.shape or state.m.shape != w.shape:
        raise ShapeError("Adam moment/weight/gradient lengths differ")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * ascent
    v = state.beta2 * state.v + (1.0 - state.beta2) * ascent * ascent
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    w_new = w + state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps), w_new

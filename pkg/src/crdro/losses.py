"""Bounded, smooth, non-convex losses with per-sample gradients.

Every model works on a batch: ``value(x, A, y)`` returns one loss per row of
``A`` and ``value_and_grad`` additionally returns an (n, p) matrix of
per-sample gradients with respect to the flat parameter vector ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

# max over s in [0, 1] of |s(1-s)(1-2s)|, attained at s = (1 +- 1/sqrt(3))/2
_SIGMOID_CURV = 1.0 / (6.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class LossConstants:
    """Loss bound B, Lipschitz constant G and smoothness L.

    ``empirical`` marks constants obtained by sampling rather than proof.
    """

    B: float
    G: float
    L: float
    empirical: bool = False
    radius: float = math.inf


class LossModel:
    B: float

    def n_params(self, d: int) -> int:
        raise NotImplementedError

    def init_params(self, d: int, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.n_params(d))

    def value(self, x, features, labels) -> np.ndarray:
        return self.value_and_grad(x, features, labels)[0]

    def value_and_grad(self, x, features, labels):
        raise NotImplementedError

    def predict(self, x, features) -> np.ndarray:
        raise NotImplementedError

    def constants(self, features, **kwargs) -> LossConstants:
        raise NotImplementedError


def _signs(labels):
    return np.where(np.asarray(labels) > 0, 1.0, -1.0)


class ConstantLoss(LossModel):
    """``l(x; s) = c`` for every sample; a zero-gradient degenerate case."""

    def __init__(self, c: float, B: float = 1.0, dim: int | None = None):
        if not 0 <= c <= B:
            raise ValueError("need 0 <= c <= B")
        self.c, self.B, self.dim = float(c), float(B), dim

    def n_params(self, d):
        return d if self.dim is None else self.dim

    def value_and_grad(self, x, features, labels):
        n = np.atleast_2d(features).shape[0]
        return np.full(n, self.c), np.zeros((n, np.size(x)))

    def predict(self, x, features):
        return np.zeros(np.atleast_2d(features).shape[0], dtype=np.int64)

    def constants(self, features, **kwargs):
        return LossConstants(self.B, 0.0, 0.0)


class SquashedLogistic(LossModel):
    """``B * sigmoid(-y <a, x>)`` with y in {-1, +1} (label 0 maps to -1)."""

    def __init__(self, B: float = 1.0):
        if not B > 0:
            raise ValueError("B must be positive")
        self.B = float(B)

    def n_params(self, d):
        return d

    def value(self, x, features, labels):
        margin = _signs(labels) * (np.asarray(features) @ x)
        return self.B * expit(-margin)

    def value_and_grad(self, x, features, labels):
        features = np.asarray(features, dtype=float)
        y = _signs(labels)
        s = expit(-y * (features @ x))
        grad = (-self.B * y * s * (1.0 - s))[:, None] * features
        return self.B * s, grad

    def predict(self, x, features):
        return (np.asarray(features) @ x > 0).astype(np.int64)

    def constants(self, features, **kwargs):
        a_max = float(np.max(np.linalg.norm(np.atleast_2d(features), axis=1)))
        return LossConstants(self.B, self.B * a_max / 4.0, self.B * a_max**2 * _SIGMOID_CURV)


class TinyMLP(LossModel):
    """One tanh hidden layer and a softmax head; loss ``B * (1 - p_true)``.

    Parameters are flattened as [W1 (h x d), b1 (h), W2 (c x h), b2 (c)].
    """

    def __init__(self, hidden: int, classes: int, B: float = 1.0, init_scale: float = 0.5):
        if not 1 <= hidden <= 32:
            raise ValueError("hidden width must be in [1, 32]")
        if classes < 2:
            raise ValueError("need at least two classes")
        self.hidden, self.classes, self.B = int(hidden), int(classes), float(B)
        self.init_scale = float(init_scale)

    def n_params(self, d):
        h, c = self.hidden, self.classes
        return h * d + h + c * h + c

    def init_params(self, d, rng):
        x = np.zeros(self.n_params(d))
        h = self.hidden
        x[: h * d] = rng.normal(0.0, self.init_scale / math.sqrt(d), size=h * d)
        start = h * d + h
        x[start: start + self.classes * h] = rng.normal(0.0, self.init_scale / math.sqrt(h), size=self.classes * h)
        return x

    def unpack(self, x, d):
        h, c = self.hidden, self.classes
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n_params(d),):
            raise ValueError(f"expected {self.n_params(d)} parameters for d={d}, got {x.shape}")
        i = 0
        W1 = x[i: i + h * d].reshape(h, d); i += h * d
        b1 = x[i: i + h]; i += h
        W2 = x[i: i + c * h].reshape(c, h); i += c * h
        b2 = x[i: i + c]
        return W1, b1, W2, b2

    def _forward(self, x, features):
        features = np.atleast_2d(np.asarray(features, dtype=float))
        W1, b1, W2, b2 = self.unpack(x, features.shape[1])
        H = np.tanh(features @ W1.T + b1)
        P = softmax(H @ W2.T + b2, axis=1)
        return features, W2, H, P

    def value(self, x, features, labels):
        _, _, _, P = self._forward(x, features)
        labels = np.asarray(labels, dtype=np.intp)
        return self.B * (1.0 - P[np.arange(P.shape[0]), labels])

    def value_and_grad(self, x, features, labels):
        A, W2, H, P = self._forward(x, features)
        labels = np.asarray(labels, dtype=np.intp)
        n = A.shape[0]
        p_true = P[np.arange(n), labels]
        onehot = np.zeros_like(P)
        onehot[np.arange(n), labels] = 1.0
        g_logit = -self.B * p_true[:, None] * (onehot - P)
        g_hidden = (g_logit @ W2) * (1.0 - H * H)
        grad = np.concatenate(
            [
                np.einsum("nh,nd->nhd", g_hidden, A).reshape(n, -1),
                g_hidden,
                np.einsum("nc,nh->nch", g_logit, H).reshape(n, -1),
                g_logit,
            ],
            axis=1,
        )
        return self.B * (1.0 - p_true), grad

    def predict(self, x, features):
        return np.argmax(self._forward(x, features)[3], axis=1)

    def constants(self, features, labels=None, radius: float = 5.0, samples: int = 2000,
                  seed: int = 0, safety: float = 1.5, **kwargs):
        """Sampled sup of |grad| and of local gradient slopes on the ball |x| <= radius, times ``safety``."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        d = features.shape[1]
        rng = np.random.default_rng(seed)
        p = self.n_params(d)
        if labels is None:
            labels = rng.integers(0, self.classes, size=features.shape[0])
        labels = np.asarray(labels)
        g_max, l_max = 0.0, 0.0
        for _ in range(samples):
            x = rng.standard_normal(p)
            x *= radius * rng.random() ** (1.0 / p) / np.linalg.norm(x)
            i = rng.integers(0, features.shape[0], size=8)
            _, g1 = self.value_and_grad(x, features[i], labels[i])
            step = rng.standard_normal(p)
            step *= 1e-3 * radius / np.linalg.norm(step)
            _, g2 = self.value_and_grad(x + step, features[i], labels[i])
            g_max = max(g_max, float(np.max(np.linalg.norm(g1, axis=1))))
            l_max = max(l_max, float(np.max(np.linalg.norm(g2 - g1, axis=1))) / float(np.linalg.norm(step)))
        return LossConstants(self.B, safety * g_max, safety * l_max, empirical=True, radius=radius)


@dataclass
class FDReport:
    max_rel_error: float
    max_abs_error: float
    worst_x: np.ndarray
    worst_sample: int
    worst_coord: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def central_difference(fun, x, h):
    """Central-difference gradient of scalar ``fun`` at ``x``; step h per coordinate."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (fun(x + e) - fun(x - e)) / (2.0 * h)
    return g


def finite_diff_check(model: LossModel, features, labels, points: int = 20, h: float = 1e-6,
                      seed: int = 0, scale: float = 0.5, x_points=None) -> FDReport:
    """Audit per-sample analytic gradients against central differences.

    Relative error per (point, sample) is |fd - g| / max(|g|, |fd|) in the
    Euclidean norm; pairs whose gradients are both below 1e-9 count toward the
    absolute error only.
    """
    if not 1e-8 <= h <= 1e-3:
        raise ValueError("h must lie in [1e-8, 1e-3]")
    features = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels)
    d = features.shape[1]
    rng = np.random.default_rng(seed)
    if x_points is None:
        p = model.n_params(d)
        x_points = [rng.normal(0.0, scale / math.sqrt(max(d, 1)), size=p) for _ in range(points)]
    worst = FDReport(0.0, 0.0, np.asarray(x_points[0]), 0, 0)
    for x in x_points:
        x = np.asarray(x, dtype=float)
        i = int(rng.integers(0, features.shape[0]))
        a, y = features[i: i + 1], labels[i: i + 1]
        _, g = model.value_and_grad(x, a, y)
        g = g[0]
        fd = central_difference(lambda v: float(model.value(v, a, y)[0]), x, h)
        err = np.abs(fd - g)
        abs_err = float(np.linalg.norm(err))
        denom = max(float(np.linalg.norm(g)), float(np.linalg.norm(fd)))
        rel = abs_err / denom if denom > 1e-9 else 0.0
        if abs_err > worst.max_abs_error:
            worst.max_abs_error = abs_err
        if rel > worst.max_rel_error:
            worst.max_rel_error = rel
            worst.worst_x, worst.worst_sample, worst.worst_coord = x, i, int(np.argmax(err))
    return worst

"""Dual objective f(x; lambda, eta; s), its gradients and the bounded dual box.

For the Cressie-Read family the per-sample objective is

    f = c * (l - eta)_+^k* * lam^(1-k*) + lam * (rho + 1/(k(k-1))) + eta,
    c = (k-1)^k* / k,

and for smoothed CVaR it is ``lam * phi*((l - eta)/lam) + lam*rho + eta``.
F(x; z) is the P0-expectation of f; it is jointly convex in z = (lam, eta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .divergence import DivergenceSpec, phi_conj, phi_conj_grad, pos_power


class DualDomainError(ValueError):
    """Inconsistent dual box (e.g. lambda0 above the lambda upper bound)."""


@dataclass(frozen=True)
class DualPoint:
    lam: float
    eta: float

    def __post_init__(self):
        if not (math.isfinite(self.lam) and math.isfinite(self.eta)):
            raise ValueError(f"dual point must be finite, got ({self.lam}, {self.eta})")
        if self.lam <= 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")

    def as_array(self) -> np.ndarray:
        return np.array([self.lam, self.eta])


@dataclass(frozen=True)
class DualDomain:
    """Box [lambda_lo, lambda_hi] x [eta_lo, eta_hi] holding the dual optimum."""

    lambda_lo: float
    lambda_hi: float
    eta_lo: float
    eta_hi: float

    def __post_init__(self):
        # lambda_lo == 0 is a valid box (the unsmoothed problem); constants need > 0
        if not (0 <= self.lambda_lo <= self.lambda_hi and self.lambda_hi > 0):
            raise DualDomainError(
                f"need 0 <= lambda_lo <= lambda_hi, got [{self.lambda_lo}, {self.lambda_hi}]"
            )
        if not self.eta_lo <= self.eta_hi:
            raise DualDomainError(f"need eta_lo <= eta_hi, got [{self.eta_lo}, {self.eta_hi}]")

    @property
    def diameter(self) -> float:
        return math.hypot(self.lambda_hi - self.lambda_lo, self.eta_hi - self.eta_lo)

    def corners(self) -> list[DualPoint]:
        return [
            DualPoint(lam, eta)
            for lam in (self.lambda_lo, self.lambda_hi)
            for eta in (self.eta_lo, self.eta_hi)
        ]

    def contains(self, z: DualPoint, tol: float = 0.0) -> bool:
        return (
            self.lambda_lo - tol <= z.lam <= self.lambda_hi + tol
            and self.eta_lo - tol <= z.eta <= self.eta_hi + tol
        )

    def project(self, lam: float, eta: float) -> DualPoint:
        return DualPoint(
            min(max(lam, self.lambda_lo, 1e-300), self.lambda_hi),
            min(max(eta, self.eta_lo), self.eta_hi),
        )


@dataclass(frozen=True)
class ObjectiveConstants:
    """Smoothness, variance and diameter constants of F on a dual box.

    ``L_xz`` bounds the cross-Lipschitz constant of grad_x F in z (used by the
    joint projected-gradient baseline).
    """

    L_x: float
    L_z: float
    sigma0: float
    sigma1: float
    D: float
    C: float
    L_xz: float


def _unpack(z):
    if isinstance(z, DualPoint):
        return z.lam, z.eta
    lam, eta = z
    if not lam > 0:
        raise ValueError(f"lambda must be > 0, got {lam}")
    return float(lam), float(eta)


# ---------------------------------------------------------------------------
# per-sample pieces, vectorised over loss values


def _pieces(spec: DivergenceSpec, ell, lam: float, eta: float):
    """Return (f, d_lambda, d_eta, x_weight) arrays for loss values ``ell``.

    ``x_weight`` is the scalar multiplying grad_x l in grad_x f.
    """
    ell = np.asarray(ell, dtype=float)
    if spec.is_cvar:
        u = (ell - eta) / lam
        conj = phi_conj(spec, u)
        slope = phi_conj_grad(spec, u)
        f = lam * conj + lam * spec.rho + eta
        d_lam = spec.rho + conj - u * slope
        d_eta = 1.0 - slope
        return f, d_lam, d_eta, slope
    k, ks, c = spec.k, spec.kstar, spec.coef
    r = np.maximum(ell - eta, 0.0)
    r_pow1 = pos_power(r, ks - 1.0)
    r_pow = r_pow1 * r
    lin = spec.rho + 1.0 / (k * (k - 1.0))
    lam_pow = lam ** (1.0 - ks)
    f = c * r_pow * lam_pow + lam * lin + eta
    d_lam = c * (1.0 - ks) * r_pow * lam_pow / lam + lin
    x_weight = c * ks * r_pow1 * lam_pow
    d_eta = 1.0 - x_weight
    return f, d_lam, d_eta, x_weight


def f_sample(spec: DivergenceSpec, loss_value, z):
    lam, eta = _unpack(z)
    f = _pieces(spec, loss_value, lam, eta)[0]
    return float(f) if np.ndim(f) == 0 else f


def grad_z_sample(spec: DivergenceSpec, loss_value, z):
    """(d f/d lambda, d f/d eta) at the given loss value(s)."""
    lam, eta = _unpack(z)
    _, d_lam, d_eta, _ = _pieces(spec, loss_value, lam, eta)
    if np.ndim(d_lam) == 0:
        return float(d_lam), float(d_eta)
    return d_lam, d_eta


def grad_x_sample(spec: DivergenceSpec, loss_value, loss_grad, z):
    lam, eta = _unpack(z)
    w = _pieces(spec, loss_value, lam, eta)[3]
    loss_grad = np.asarray(loss_grad, dtype=float)
    if np.ndim(w) == 0:
        return float(w) * loss_grad
    return w[:, None] * loss_grad


# ---------------------------------------------------------------------------
# batch estimators


def _batch_data(dataset, batch):
    if batch is None:
        return dataset.features, dataset.labels, dataset.weights
    idx = np.asarray(batch, dtype=np.intp)
    if idx.size == 0:
        raise ValueError("batch must be non-empty")
    return dataset.features[idx], dataset.labels[idx], None


def _mean(values, weights):
    if weights is None:
        return values.mean(axis=0)
    return weights @ values


def batch_eval(spec, loss_model, dataset, batch, x, z, *, need_x=True):
    """Objective, grad_x and grad_z of the batch average in one pass.

    ``batch=None`` means the full dataset weighted by P0; otherwise the uniform
    average over the given (possibly repeated) indices.
    Returns ``(value, grad_x, (d_lambda, d_eta))``; ``grad_x`` is None when
    ``need_x`` is False.
    """
    lam, eta = _unpack(z)
    feats, labels, weights = _batch_data(dataset, batch)
    if need_x:
        ell, lgrad = loss_model.value_and_grad(x, feats, labels)
    else:
        ell, lgrad = loss_model.value(x, feats, labels), None
    f, d_lam, d_eta, w = _pieces(spec, ell, lam, eta)
    gx = _mean(w[:, None] * lgrad, weights) if need_x else None
    return float(_mean(f, weights)), gx, (float(_mean(d_lam, weights)), float(_mean(d_eta, weights)))


def batch_objective(spec, loss_model, dataset, batch, x, z) -> float:
    return batch_eval(spec, loss_model, dataset, batch, x, z, need_x=False)[0]


def batch_grad_x(spec, loss_model, dataset, batch, x, z) -> np.ndarray:
    return batch_eval(spec, loss_model, dataset, batch, x, z)[1]


def batch_grad_z(spec, loss_model, dataset, batch, x, z) -> tuple[float, float]:
    return batch_eval(spec, loss_model, dataset, batch, x, z, need_x=False)[2]


def objective_from_losses(spec, losses, p0, lam, eta):
    """F(lam, eta) for a fixed loss vector under weights ``p0``.

    ``lam`` and ``eta`` may be arrays of equal shape; the result broadcasts
    over them (loss atoms along the last axis).
    """
    losses = np.asarray(losses, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    lam = np.asarray(lam, dtype=float)[..., None]
    eta = np.asarray(eta, dtype=float)[..., None]
    if spec.is_cvar:
        u = (losses - eta) / lam
        vals = lam * phi_conj(spec, u) + lam * spec.rho + eta
    else:
        k, ks = spec.k, spec.kstar
        r = np.maximum(losses - eta, 0.0)
        vals = spec.coef * pos_power(r, ks) * lam ** (1.0 - ks) + lam * (spec.rho + 1.0 / (k * (k - 1.0))) + eta
    return vals @ p0


# ---------------------------------------------------------------------------
# dual box and constants


def cvar_bound_residual(spec: DivergenceSpec, B: float, lam: float) -> float:
    """rho + phi*(-B/lam) - B/(mu lam); increasing in lam, root = lambda upper bound."""
    return spec.rho + phi_conj(spec, -B / lam) - B / (spec.mu * lam)


def cvar_lambda_bar(spec: DivergenceSpec, B: float, max_iter: int = 400) -> float:
    """Root of :func:`cvar_bound_residual` by bisection on (1e-8, 10 B/(mu rho))."""
    lo, hi = 1e-8, 10.0 * B / (spec.mu * spec.rho)
    if cvar_bound_residual(spec, B, lo) >= 0:
        return lo
    while cvar_bound_residual(spec, B, hi) <= 0:
        hi *= 2.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if cvar_bound_residual(spec, B, mid) > 0:
            hi = mid
        else:
            lo = mid
    g_lo = abs(cvar_bound_residual(spec, B, lo))
    g_hi = abs(cvar_bound_residual(spec, B, hi))
    return lo if g_lo <= g_hi else hi


def lambda_bar(spec: DivergenceSpec, B: float) -> float:
    """Upper bound on the optimal lambda for losses in [0, B]."""
    if spec.is_cvar:
        return cvar_lambda_bar(spec, B)
    k, ks = spec.k, spec.kstar
    omega = (k * (k - 1.0) * spec.rho + 1.0) ** (1.0 / k)
    a = (1.0 / omega) ** (1.0 / (ks - 1.0))
    # stationarity in lambda gives lam*(eta) = (k-1) omega^-(k-1) ||(l-eta)_+||_k*
    return (k - 1.0) * omega ** (-(k - 1.0)) * (1.0 + a / (1.0 - a)) * B


def eta_bar(spec: DivergenceSpec, lam_hi: float) -> float:
    """Magnitude of the lower eta bound (0 for smoothed CVaR)."""
    if spec.is_cvar:
        return 0.0
    k, ks = spec.k, spec.kstar
    return lam_hi * (k / ((k - 1.0) ** ks * ks)) ** (1.0 / (ks - 1.0))


def compute_domain(spec: DivergenceSpec, B: float, lambda0: float,
                   lambda_hi: float | None = None, eta_bar_value: float | None = None) -> DualDomain:
    """Dual box [lambda0, lambda_bar] x [-eta_bar, B].

    ``lambda_hi`` and ``eta_bar_value`` override the analytic bounds (the
    experiments sometimes fix them by hand).
    """
    if not B > 0:
        raise DualDomainError(f"loss bound B must be > 0, got {B}")
    if lambda0 < 0:
        raise DualDomainError(f"lambda0 must be >= 0, got {lambda0}")
    lam_hi = lambda_bar(spec, B) if lambda_hi is None else float(lambda_hi)
    if lambda0 > lam_hi:
        raise DualDomainError(f"lambda0={lambda0} exceeds the lambda upper bound {lam_hi}")
    e_bar = eta_bar(spec, lam_hi) if eta_bar_value is None else float(eta_bar_value)
    return DualDomain(lambda0, lam_hi, -e_bar, float(B))


def compute_constants(spec: DivergenceSpec, domain: DualDomain, B: float, G: float, L: float) -> ObjectiveConstants:
    lam0 = domain.lambda_lo
    if not lam0 > 0:
        raise DualDomainError("constants need lambda0 > 0")
    b = B + max(-domain.eta_lo, 0.0)
    D = domain.diameter
    if spec.is_cvar:
        mu, rho = spec.mu, spec.rho
        # phi*'' <= 1/(4 mu); the Hessian in z is PSD, so its trace bounds the top eigenvalue
        L_z = (1.0 / lam0 + b * b / lam0**3) / (4.0 * mu)
        L_x = G * G / (4.0 * mu * lam0) + L / mu
        sigma0 = G / mu
        sigma1 = rho + max(-math.log(mu), -math.log1p(-mu)) / mu + 1.0 / mu
        L_xz = G / (4.0 * mu * lam0) * (1.0 + b / lam0)
    else:
        k, ks, c = spec.k, spec.kstar, spec.coef
        if ks == 2.0:
            L_z = 1.0 / lam0 + 2.0 * b / lam0**2 + b * b / lam0**3
        else:
            L_z = c * ks * (ks - 1.0) * (b**ks / lam0 ** (ks + 1.0) + b ** (ks - 2.0) / lam0 ** (ks - 1.0))
        L_x = c * ks * lam0 ** (1.0 - ks) * b ** (ks - 2.0) * ((ks - 1.0) * G * G + b * L)
        sigma0 = c * ks * b ** (ks - 1.0) * G * lam0 ** (1.0 - ks)
        sigma1 = (spec.rho + 1.0 + 1.0 / (k * (k - 1.0))) + (
            (k - 1.0) ** ks * lam0 ** (-ks) * b**ks / k
        ) * (ks - 1.0 + lam0 * ks / b)
        L_xz = c * ks * (ks - 1.0) * G * (b ** (ks - 1.0) * lam0 ** (-ks) + b ** (ks - 2.0) * lam0 ** (1.0 - ks))
    return ObjectiveConstants(L_x=L_x, L_z=L_z, sigma0=sigma0, sigma1=sigma1, D=D, C=D * D * L_z, L_xz=L_xz)


def sampling_bias_bound(spec: DivergenceSpec, B: float, n: int) -> float:
    """Upper bound on |inf F - E inf f_z| for an n-sample plug-in estimate."""
    n = float(n)
    if spec.is_cvar:
        return (3.0 * B / n + 6.0 * B * (math.sqrt(1.0 / n) - 1.0 / n)) / spec.mu
    k, ks, rho = spec.k, spec.kstar, spec.rho
    if ks == 2.0:
        return 3.0 * B * math.sqrt(1.0 + k * (k - 1.0) * rho) * math.sqrt((4.0 + math.log(n)) / (4.0 * n))
    return 3.0 * B * (1.0 + k * (k - 1.0) * rho) ** (1.0 / k) * (
        1.0 / n + 1.0 / (2.0 ** (ks - 1.0) * (ks - 2.0) * n)
    ) ** (1.0 / ks)

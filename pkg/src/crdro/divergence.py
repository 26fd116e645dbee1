"""Cressie-Read and smoothed-CVaR divergences, their conjugates and conjugate slopes.

All functions accept scalars or numpy arrays and broadcast elementwise. Scalar
inputs give Python floats back.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Family(str, enum.Enum):
    CRESSIE_READ = "cressie_read"
    SMOOTHED_CVAR = "smoothed_cvar"


class DivergenceError(ValueError):
    """Invalid divergence parameters or non-finite arguments."""


@dataclass(frozen=True)
class DivergenceSpec:
    """A phi-divergence ball: the family, its shape parameter and the radius ``rho``.

    Use :meth:`cressie_read` or :meth:`smoothed_cvar` rather than the raw
    constructor.
    """

    family: Family
    rho: float
    k: float = 2.0
    mu: float = 0.5

    def __post_init__(self):
        family = Family(self.family)
        object.__setattr__(self, "family", family)
        if not (math.isfinite(self.rho) and self.rho > 0):
            raise DivergenceError(f"rho must be finite and > 0, got {self.rho!r}")
        if family is Family.CRESSIE_READ:
            if not (1.0 < self.k <= 2.0):
                raise DivergenceError(f"Cressie-Read order k must lie in (1, 2], got {self.k!r}")
        elif not (0.0 < self.mu < 1.0):
            raise DivergenceError(f"CVaR level mu must lie in (0, 1), got {self.mu!r}")

    @classmethod
    def cressie_read(cls, k: float, rho: float) -> "DivergenceSpec":
        return cls(Family.CRESSIE_READ, rho=float(rho), k=float(k))

    @classmethod
    def smoothed_cvar(cls, mu: float, rho: float) -> "DivergenceSpec":
        return cls(Family.SMOOTHED_CVAR, rho=float(rho), mu=float(mu))

    @property
    def is_cvar(self) -> bool:
        return self.family is Family.SMOOTHED_CVAR

    @property
    def kstar(self) -> float:
        """Conjugate exponent k/(k-1); 2 for chi-square."""
        if self.is_cvar:
            raise DivergenceError("kstar is defined for the Cressie-Read family only")
        return self.k / (self.k - 1.0)

    @property
    def coef(self) -> float:
        """(k-1)^kstar / k, the leading coefficient of the reparametrised dual."""
        return (self.k - 1.0) ** self.kstar / self.k

    def with_rho(self, rho: float) -> "DivergenceSpec":
        return DivergenceSpec(self.family, rho=float(rho), k=self.k, mu=self.mu)


def _as_array(t):
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise DivergenceError("divergence arguments must be finite")
    return arr


def _out(arr, scalar):
    return float(arr) if scalar else arr


def pos_power(base, p):
    """``max(base, 0) ** p`` with an exact zero branch; ``p > 0``."""
    base = np.maximum(np.asarray(base, dtype=float), 0.0)
    if p == 1.0:
        return base
    if p == 2.0:
        return base * base
    out = np.zeros_like(base)
    mask = base > 0
    out[mask] = np.exp(p * np.log(base[mask]))
    return out


def phi(spec: DivergenceSpec, t):
    """Divergence generator; ``+inf`` outside its domain and exactly 0 at t = 1."""
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(_as_array(t))
    out = np.full(t.shape, np.inf)
    if spec.is_cvar:
        mu = spec.mu
        ok = (t >= 0) & (t < 1.0 / mu)
        tt = t[ok]
        rest = 1.0 - mu * tt
        # xlogy-style: 0 log 0 = 0
        tlogt = np.where(tt > 0, tt * np.log(np.where(tt > 0, tt, 1.0)), 0.0)
        out[ok] = tlogt + (rest / mu) * np.log(rest / (1.0 - mu))
    else:
        k = spec.k
        ok = t >= 0
        tt = t[ok]
        if k == 2.0:
            # exact chi-square form keeps phi(1) == 0 with no rounding
            out[ok] = 0.5 * (tt - 1.0) ** 2
        else:
            out[ok] = (pos_power(tt, k) - k * tt + k - 1.0) / (k * (k - 1.0))
    out[t == 1.0] = 0.0
    return float(out[0]) if scalar else out


def phi_conj(spec: DivergenceSpec, t):
    """Convex conjugate of :func:`phi`; finite for every finite ``t``."""
    scalar = np.ndim(t) == 0
    t = _as_array(t)
    if spec.is_cvar:
        mu = spec.mu
        # log(1 - mu + mu e^t) without overflow for large t
        out = np.logaddexp(math.log1p(-mu), math.log(mu) + t) / mu
    else:
        k = spec.k
        out = (pos_power((k - 1.0) * t + 1.0, spec.kstar) - 1.0) / k
    return _out(out, scalar)


def phi_conj_grad(spec: DivergenceSpec, t):
    """Derivative of :func:`phi_conj`. Zero on the clamped Cressie-Read region."""
    scalar = np.ndim(t) == 0
    t = _as_array(t)
    if spec.is_cvar:
        mu = spec.mu
        # clip: rounding can land one ulp above the supremum 1/mu
        out = np.minimum(np.exp(t - np.logaddexp(math.log1p(-mu), math.log(mu) + t)), 1.0 / mu)
    else:
        k = spec.k
        out = pos_power((k - 1.0) * t + 1.0, spec.kstar - 1.0)
    return _out(out, scalar)


def phi_conj_hess(spec: DivergenceSpec, t):
    """Second derivative of :func:`phi_conj` (one-sided 0 at the kink when kstar = 2)."""
    scalar = np.ndim(t) == 0
    t = _as_array(t)
    if spec.is_cvar:
        mu = spec.mu
        s = np.exp(t - np.logaddexp(math.log1p(-mu), math.log(mu) + t))
        out = s * (1.0 - mu * s)
    else:
        k = spec.k
        out = (k - 1.0) * (spec.kstar - 1.0) * pos_power((k - 1.0) * t + 1.0, spec.kstar - 2.0)
        if spec.kstar == 2.0:
            out = np.where((k - 1.0) * t + 1.0 > 0, out, 0.0)
    return _out(out, scalar)

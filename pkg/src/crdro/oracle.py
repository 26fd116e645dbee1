"""Brute-force solvers for the inner problems on small discrete distributions.

The primal solver never touches the dual objective or the conjugate: it works
from phi and its derivative only, so agreement between
:func:`primal_worst_case` and :func:`dual_min` is a genuine duality check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import xlogy

from .divergence import DivergenceSpec, phi, pos_power
from .dual import DualDomain, DualPoint, _pieces, eta_bar, lambda_bar, objective_from_losses

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class WorstCaseResult:
    value: float
    q: np.ndarray
    divergence_used: float
    kkt_residual: float
    multiplier: float
    threshold: float

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "q": [float(v) for v in self.q],
            "divergence_used": self.divergence_used,
            "kkt_residual": self.kkt_residual,
            "multiplier": self.multiplier,
            "threshold": self.threshold,
        }


def _check_inputs(losses, p0):
    losses = np.asarray(losses, dtype=float).ravel()
    if p0 is None:
        p0 = np.full(losses.size, 1.0 / losses.size)
    p0 = np.asarray(p0, dtype=float).ravel()
    if losses.size == 0 or p0.shape != losses.shape:
        raise ValueError("losses and p0 must be non-empty and of equal length")
    if np.any(p0 <= 0) or not math.isclose(p0.sum(), 1.0, abs_tol=1e-10):
        raise ValueError("p0 must be a strictly positive probability vector")
    if not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite")
    return losses, p0


# ---------------------------------------------------------------------------
# primal side


def _phi_prime(spec: DivergenceSpec, t):
    t = np.asarray(t, dtype=float)
    if spec.is_cvar:
        mu = spec.mu
        with np.errstate(divide="ignore"):
            return np.log(t) + math.log1p(-mu) - np.log1p(-mu * t)
    k = spec.k
    return (pos_power(t, k - 1.0) - 1.0) / (k - 1.0)


def _phi_prime_inv(spec: DivergenceSpec, v):
    """Likelihood ratio t solving phi'(t) = v (0 where phi' never gets that low)."""
    v = np.asarray(v, dtype=float)
    if spec.is_cvar:
        mu = spec.mu
        with np.errstate(over="ignore"):
            return 1.0 / (mu + (1.0 - mu) * np.exp(-v))
    k = spec.k
    return pos_power((k - 1.0) * v + 1.0, 1.0 / (k - 1.0))


def divergence(spec: DivergenceSpec, q, p0) -> float:
    """D_phi(Q || P0) for discrete distributions.

    For smoothed CVaR the closure of phi is used, i.e. the ratio 1/mu is
    admissible with phi(1/mu) = log(1/mu)/mu; the supremum is approached there.
    """
    t = np.maximum(np.asarray(q, dtype=float), 0.0) / p0
    if spec.is_cvar:
        mu = spec.mu
        t = np.minimum(t, 1.0 / mu)
        rest = np.maximum(1.0 - mu * t, 0.0)
        vals = xlogy(t, t) + xlogy(rest, rest / (1.0 - mu)) / mu
        return float(p0 @ vals)
    return float(p0 @ phi(spec, t))


def _linear_limit(spec, losses, p0):
    """Maximiser of E_Q[l] over the simplex intersected with dom(phi)."""
    order = np.argsort(-losses, kind="stable")
    q = np.zeros_like(p0)
    if not spec.is_cvar:
        top = losses == losses.max()
        q[top] = p0[top] / p0[top].sum()
        return q
    cap = p0 / spec.mu
    remaining = 1.0
    i = 0
    while remaining > 0 and i < order.size:
        # atoms with tied loss share the remaining mass in proportion to p0
        tie = order[i:][losses[order[i:]] == losses[order[i]]]
        room = cap[tie].sum()
        if room <= remaining:
            q[tie] = cap[tie]
            remaining -= room
        else:
            q[tie] = remaining * p0[tie] / p0[tie].sum()
            remaining = 0.0
        i += tie.size
    return q


def _q_of_threshold(spec, losses, p0, tau, m):
    return p0 * _phi_prime_inv(spec, (losses - tau) / m)


def _solve_threshold(spec, losses, p0, m):
    """Threshold tau with sum_i p0_i psi((l_i - tau)/m) = 1, and the normalised q."""
    lo, hi = float(losses.min()), float(losses.max())
    if hi - lo <= 0.0:
        return lo, p0.copy()

    def excess(tau):
        return _q_of_threshold(spec, losses, p0, tau, m).sum() - 1.0

    tau = brentq(excess, lo, hi, xtol=1e-15 * max(1.0, abs(hi)), rtol=4 * np.finfo(float).eps, maxiter=500)
    q = _q_of_threshold(spec, losses, p0, tau, m)
    return tau, q / q.sum()


def _kkt_residual(spec, losses, p0, q, m, nu, rho, div, tau):
    """Largest violation among stationarity, feasibility and complementary slackness.

    Stationarity l_i - tau = m phi'(t_i) is checked in likelihood-ratio space,
    t_i = (phi')^-1((l_i - tau)/m), which stays well conditioned near the CVaR cap.
    """
    res = [abs(q.sum() - 1.0), max(div - rho, 0.0), abs(nu * (div - rho))]
    if m > 0:
        ratio = q / p0
        target = _phi_prime_inv(spec, (losses - tau) / m)
        res.append(float(np.max(np.abs(ratio - target) / np.maximum(1.0, target))))
    return max(res)


def _solve_primal(spec, losses, p0, penalty):
    rho = spec.rho
    if penalty > 0:
        tau, q = _solve_threshold(spec, losses, p0, penalty)
        div = divergence(spec, q, p0)
        if div <= rho:
            val = float(q @ losses) - penalty * div
            return WorstCaseResult(val, q, div, _kkt_residual(spec, losses, p0, q, penalty, 0.0, rho, div, tau), 0.0, tau)
        m_lo = penalty
    else:
        q = _linear_limit(spec, losses, p0)
        div = divergence(spec, q, p0)
        if div <= rho:
            res = max(abs(q.sum() - 1.0), max(div - rho, 0.0))
            return WorstCaseResult(float(q @ losses), q, div, res, 0.0, float(losses.max()))
        m_lo = 1.0
        while divergence(spec, _solve_threshold(spec, losses, p0, m_lo)[1], p0) <= rho:
            m_lo *= 0.5
            if m_lo < 1e-300:
                raise RuntimeError("could not bracket the divergence multiplier")
    m_hi = max(2.0 * m_lo, 1.0)
    while divergence(spec, _solve_threshold(spec, losses, p0, m_hi)[1], p0) > rho:
        m_hi *= 2.0

    def gap(log_m):
        return divergence(spec, _solve_threshold(spec, losses, p0, math.exp(log_m))[1], p0) - rho

    if gap(math.log(m_lo)) <= 0:
        log_m = math.log(m_lo)
    else:
        log_m = brentq(gap, math.log(m_lo), math.log(m_hi), xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    m = math.exp(log_m)
    tau, q = _solve_threshold(spec, losses, p0, m)
    div = divergence(spec, q, p0)
    nu = m - penalty
    val = float(q @ losses) - penalty * div
    return WorstCaseResult(val, q, div, _kkt_residual(spec, losses, p0, q, m, nu, rho, div, tau), nu, tau)


def primal_worst_case(spec: DivergenceSpec, losses, p0=None) -> WorstCaseResult:
    """sup of E_Q[l] over the divergence ball around P0 (KKT multipliers by bisection)."""
    losses, p0 = _check_inputs(losses, p0)
    return _solve_primal(spec, losses, p0, 0.0)


def regularized_constrained_value(spec: DivergenceSpec, losses, p0=None, lambda0: float = 0.0) -> float:
    """sup over the rho-ball of E_Q[l] - lambda0 * D(Q || P0)."""
    if lambda0 < 0:
        raise ValueError("lambda0 must be >= 0")
    losses, p0 = _check_inputs(losses, p0)
    return _solve_primal(spec, losses, p0, float(lambda0)).value


# ---------------------------------------------------------------------------
# dual side


def golden_section(fun, a: float, b: float, tol: float = 1e-10, max_iter: int = 500):
    """Minimise a unimodal scalar function on [a, b]; also tries both endpoints."""
    fa, fb = fun(a), fun(b)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fun(d)
    best = min(((fc, c), (fd, d), (fa, a), (fb, b)), key=lambda p: p[0])
    return best[1], best[0]


def _dual_value(spec, losses, p0, lam, eta):
    if lam <= 0.0:
        # limit lam -> 0+: finite only when no loss exceeds eta
        return eta if np.all(losses <= eta) else math.inf
    return float(objective_from_losses(spec, losses, p0, lam, eta))


def unconstrained_box(spec: DivergenceSpec, B: float) -> DualDomain:
    """Search box for the unconstrained dual: lambda in (0, 10 lambda_bar], eta in [-10 eta_bar, B]."""
    lam_hi = lambda_bar(spec, B)
    e_bar = eta_bar(spec, lam_hi)
    eta_lo = -10.0 * e_bar if e_bar > 0 else -B
    return DualDomain(0.0, 10.0 * lam_hi, eta_lo, B)


def dual_min(spec: DivergenceSpec, losses, p0=None, domain: DualDomain | None = None,
             B: float | None = None, tol: float = 1e-10):
    """Minimise F(lambda, eta) by nested golden section (outer lambda, inner eta).

    Without ``domain`` the search covers the unconstrained problem. Returns
    ``(value, DualPoint)``; a zero optimal lambda is reported as the smallest
    positive float.
    """
    losses, p0 = _check_inputs(losses, p0)
    if domain is None:
        if B is None:
            B = float(losses.max()) if losses.max() > 0 else 1.0
        domain = unconstrained_box(spec, B)
    e_lo, e_hi = domain.eta_lo, domain.eta_hi
    inner_arg = {}

    def profile(lam):
        if lam <= 0.0:
            eta = min(max(float(losses.max()), e_lo), e_hi)
            val = _dual_value(spec, losses, p0, 0.0, eta)
        else:
            eta, val = golden_section(lambda e: _dual_value(spec, losses, p0, lam, e), e_lo, e_hi, tol)
        inner_arg[lam] = eta
        return val

    lam, val = golden_section(profile, domain.lambda_lo, domain.lambda_hi, tol)
    eta = inner_arg[lam]
    return float(val), DualPoint(max(lam, np.finfo(float).tiny), float(eta))


def profile_dual_min_batch(spec: DivergenceSpec, losses, weights, B: float | None = None,
                           tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """inf over (lambda, eta) of F for many weight vectors at once (Cressie-Read only).

    Minimising over lambda in closed form leaves the convex profile
    omega * ||(l - eta)_+||_{k*} + eta, handled by a vectorised golden section.
    ``weights`` has shape (T, N); returns T optimal values.
    """
    if spec.is_cvar:
        raise ValueError("the closed-form lambda profile exists for Cressie-Read only")
    losses = np.asarray(losses, dtype=float)
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    k, ks = spec.k, spec.kstar
    omega = (k * (k - 1.0) * spec.rho + 1.0) ** (1.0 / k)
    if B is None:
        B = max(float(losses.max()), 1e-12)
    a = (1.0 / omega) ** (1.0 / (ks - 1.0))
    T = W.shape[0]
    lo = np.full(T, -(a * B / (1.0 - a)) - 1.0)
    hi = np.full(T, float(losses.max()))

    def fbar(eta):
        r = pos_power(losses[None, :] - eta[:, None], ks)
        return omega * pos_power(np.sum(W * r, axis=1), 1.0 / ks) + eta

    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = fbar(c), fbar(d)
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            break
        left = fc <= fd
        new_hi = np.where(left, d, hi)
        new_lo = np.where(left, lo, c)
        lo, hi = new_lo, new_hi
        nc = np.where(left, hi - GOLDEN * (hi - lo), d)
        nd = np.where(left, c, lo + GOLDEN * (hi - lo))
        fnew = fbar(np.where(left, nc, nd))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = nc, nd
    return np.minimum(np.minimum(fc, fd), fbar(hi))


def golden_section_batch(fun, lo, hi, tol: float = 1e-10, max_iter: int = 200):
    """Vectorised :func:`golden_section`: ``fun`` maps a (T,) array of points to (T,) values."""
    lo, hi = np.array(lo, dtype=float), np.array(hi, dtype=float)
    c = hi - GOLDEN * (hi - lo)
    d = lo + GOLDEN * (hi - lo)
    fc, fd = fun(c), fun(d)
    for _ in range(max_iter):
        if np.all(hi - lo <= tol):
            break
        left = fc <= fd
        lo, hi = np.where(left, lo, c), np.where(left, d, hi)
        nc = np.where(left, hi - GOLDEN * (hi - lo), d)
        nd = np.where(left, c, lo + GOLDEN * (hi - lo))
        fnew = fun(np.where(left, nc, nd))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = nc, nd
    cands = np.stack([c, d, lo, hi])
    vals = np.stack([fc, fd, fun(lo), fun(hi)])
    best = np.argmin(vals, axis=0)
    cols = np.arange(cands.shape[1])
    return cands[best, cols], vals[best, cols]


def dual_min_batch(spec: DivergenceSpec, losses, weights, domain: DualDomain | None = None,
                   B: float | None = None, tol: float = 1e-9) -> np.ndarray:
    """inf of F over the box for many weight vectors at once, by nested golden section.

    Works for both families. An unconstrained box starts lambda at 1e-9 B
    instead of 0.
    """
    losses = np.asarray(losses, dtype=float)
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    if domain is None:
        if B is None:
            B = max(float(losses.max()), 1e-12)
        domain = unconstrained_box(spec, B)
    T = W.shape[0]
    lam_lo = max(domain.lambda_lo, 1e-9 * domain.eta_hi)

    def value(lam, eta):
        f = _pieces(spec, losses[None, :], lam[:, None], eta[:, None])[0]
        return np.sum(W * f, axis=1)

    def profile(lam):
        _, v = golden_section_batch(lambda eta: value(lam, eta),
                                    np.full(T, domain.eta_lo), np.full(T, domain.eta_hi), tol)
        return v

    _, v = golden_section_batch(profile, np.full(T, lam_lo), np.full(T, domain.lambda_hi), tol)
    return v

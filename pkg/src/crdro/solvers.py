"""SFK-DRO (SGD in x, stochastic Frank-Wolfe in the dual pair) and its baselines.

All solvers are deterministic given ``SolverConfig.seed``: the x-batch and
z-batch index streams come from independent named substreams, so changing
``batch_nz`` does not perturb the x-batch sequence.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import Dataset, make_rng, sample_batch
from .divergence import DivergenceSpec
from .dual import (
    DualDomain,
    DualPoint,
    ObjectiveConstants,
    batch_eval,
    compute_constants,
    compute_domain,
    sampling_bias_bound,
)
from .losses import LossConstants, LossModel

TRACE_FIELDS = ("t", "lambda", "eta", "grad_x_norm", "fw_gap", "gamma", "objective_estimate")


class NumericalError(RuntimeError):
    """Non-finite objective or gradient during a run."""

    def __init__(self, iteration: int, z, seed: int, what: str):
        self.iteration, self.z, self.seed = iteration, z, seed
        super().__init__(f"non-finite {what} at iteration {iteration} (z={z}, seed={seed})")


@dataclass(frozen=True)
class SolverConfig:
    iterations: int
    step_alpha: float
    batch_nx: int = 64
    batch_nz: int = 64
    constant_C: float | None = None
    seed: int = 0
    mode: str = "practical"
    epsilon: float | None = None
    full_batch: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_nx < 1 or self.batch_nz < 1:
            raise ValueError("batch sizes must be >= 1")
        if not self.step_alpha > 0:
            raise ValueError("step_alpha must be > 0")
        if self.mode not in ("practical", "theory"):
            raise ValueError(f"mode must be 'practical' or 'theory', got {self.mode!r}")
        if self.mode == "theory" and self.epsilon is None:
            raise ValueError("theory mode needs epsilon")
        if self.constant_C is not None and not self.constant_C > 0:
            raise ValueError("constant_C must be > 0")


@dataclass
class TraceRecord:
    t: int
    lam: float | None
    eta: float | None
    grad_x_norm: float
    fw_gap: float | None
    gamma: float | None
    objective_estimate: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "lambda": self.lam,
            "eta": self.eta,
            "grad_x_norm": self.grad_x_norm,
            "fw_gap": self.fw_gap,
            "gamma": self.gamma,
            "objective_estimate": self.objective_estimate,
        }


@dataclass
class SolverOutput:
    x_out: np.ndarray
    z_out: DualPoint | None
    t_prime: int
    trace: list[TraceRecord]
    x_last: np.ndarray
    z_last: DualPoint | None
    solver: str
    warnings: list[str] = field(default_factory=list)

    def criterion(self) -> np.ndarray:
        """Per-iteration ||grad_x f_x||^2 + g_t^2 as recorded in the trace."""
        return np.array([r.grad_x_norm**2 + (r.fw_gap or 0.0) ** 2 for r in self.trace])


def write_trace(trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in trace:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def lmo_box(gradient, domain: DualDomain) -> DualPoint:
    """argmin of <e, gradient> over the box corners; ties go to the lower bound."""
    g_lam, g_eta = gradient
    lam = domain.lambda_hi if g_lam < 0 else domain.lambda_lo
    eta = domain.eta_hi if g_eta < 0 else domain.eta_lo
    return DualPoint(lam, eta)


def _finite(*vals) -> bool:
    return all(np.all(np.isfinite(v)) for v in vals)


def _batches(config: SolverConfig, dataset: Dataset):
    if config.full_batch:
        return (lambda: None), (lambda: None)
    rx = make_rng(config.seed, "x_batch")
    rz = make_rng(config.seed, "z_batch")
    return (lambda: sample_batch(dataset, config.batch_nx, rx)), (lambda: sample_batch(dataset, config.batch_nz, rz))


def _check_start(domain, z0):
    if domain.lambda_lo <= 0:
        raise ValueError("solvers need lambda0 > 0")
    if not domain.contains(z0, tol=1e-12):
        raise ValueError(f"initial dual point {z0} lies outside the domain {domain}")


def sfk_dro(spec: DivergenceSpec, loss_model: LossModel, dataset: Dataset, domain: DualDomain,
            constants: ObjectiveConstants | None, config: SolverConfig, x0, z0: DualPoint,
            callback=None) -> SolverOutput:
    """Mini-batch gradient step in x, then a Frank-Wolfe step in z at the new x.

    The step ``gamma_t = min(g_t / C, 1)`` uses ``config.constant_C`` or, when
    unset, ``constants.C``. The output is ``(x_{t'+1}, z_{t'})`` where t'
    minimises ``||grad_x f_x(x_t, z_t)||^2 + g_t^2``.
    ``callback(t, x_t, z_t, x_next, z_next, info)`` is called every iteration.
    """
    _check_start(domain, z0)
    C = config.constant_C if config.constant_C is not None else (constants.C if constants else None)
    if C is None:
        raise ValueError("sfk_dro needs constant_C (config) or ObjectiveConstants")
    alpha = config.step_alpha
    next_x, next_z = _batches(config, dataset)
    x = np.array(x0, dtype=float)
    z = z0
    trace: list[TraceRecord] = []
    best = math.inf
    x_out, z_out, t_prime = x.copy(), z, 1
    for t in range(1, config.iterations + 1):
        _, gx, _ = batch_eval(spec, loss_model, dataset, next_x(), x, z)
        if not _finite(gx):
            raise NumericalError(t, z, config.seed, "x-gradient")
        x_next = x - alpha * gx
        fz, _, gz = batch_eval(spec, loss_model, dataset, next_z(), x_next, z, need_x=False)
        if not _finite(fz, gz):
            raise NumericalError(t, z, config.seed, "z-gradient")
        e = lmo_box(gz, domain)
        d_lam, d_eta = e.lam - z.lam, e.eta - z.eta
        gap = -(d_lam * gz[0] + d_eta * gz[1])
        gamma = min(max(gap / C, 0.0), 1.0)
        gx_norm = float(np.linalg.norm(gx))
        crit = gx_norm**2 + gap**2
        if crit < best:
            best, t_prime, x_out, z_out = crit, t, x_next.copy(), z
        trace.append(TraceRecord(t, z.lam, z.eta, gx_norm, gap, gamma, fz))
        # convex combination of two box points stays in the box; clamp rounding only
        z_next = domain.project(z.lam + gamma * d_lam, z.eta + gamma * d_eta)
        if callback is not None:
            callback(t, x, z, x_next, z_next, {"gap": gap, "gamma": gamma, "grad_x": gx})
        x, z = x_next, z_next
    return SolverOutput(x_out, z_out, t_prime, trace, x, z, "sfk_dro")


def pgd_step_size(constants: ObjectiveConstants) -> float:
    """1 / (2 L_y) with L_y = L_x + L_z + 2 L_xz."""
    return 1.0 / (2.0 * (constants.L_x + constants.L_z + 2.0 * constants.L_xz))


def pgd(spec: DivergenceSpec, loss_model: LossModel, dataset: Dataset, domain: DualDomain,
        config: SolverConfig, x0, z0: DualPoint, constants: ObjectiveConstants | None = None,
        callback=None) -> SolverOutput:
    """Joint projected mini-batch gradient on y = (x, lambda, eta).

    Theory mode steps by :func:`pgd_step_size`; practical mode by
    ``config.step_alpha``. The trace's ``fw_gap`` is the Frank-Wolfe gap of
    the batch z-gradient (for comparison only) and ``gamma`` is the step.
    Returns the last iterate.
    """
    _check_start(domain, z0)
    if config.mode == "theory":
        if constants is None:
            raise ValueError("theory-mode PGD needs ObjectiveConstants")
        step = pgd_step_size(constants)
    else:
        step = config.step_alpha
    next_x, _ = _batches(config, dataset)
    x = np.array(x0, dtype=float)
    z = z0
    trace = []
    for t in range(1, config.iterations + 1):
        f, gx, gz = batch_eval(spec, loss_model, dataset, next_x(), x, z)
        if not _finite(f, gx, gz):
            raise NumericalError(t, z, config.seed, "objective or gradient")
        e = lmo_box(gz, domain)
        gap = -((e.lam - z.lam) * gz[0] + (e.eta - z.eta) * gz[1])
        trace.append(TraceRecord(t, z.lam, z.eta, float(np.linalg.norm(gx)), gap, step, f))
        x_next = x - step * gx
        z_next = domain.project(z.lam - step * gz[0], z.eta - step * gz[1])
        if callback is not None:
            callback(t, x, z, x_next, z_next, {"gap": gap, "grad_x": gx})
        x, z = x_next, z_next
    return SolverOutput(x, z, config.iterations, trace, x, z, "pgd")


def pan_dro(spec: DivergenceSpec, loss_model: LossModel, dataset: Dataset, config: SolverConfig,
            x0, eta0: float, domain: DualDomain, lam: float = 1.0) -> SolverOutput:
    """Penalised DRO: lambda held fixed, SGD on (x, eta), eta clipped to the domain's eta range."""
    if not lam > 0:
        raise ValueError("fixed lambda must be > 0")
    next_x, _ = _batches(config, dataset)
    alpha = config.step_alpha
    x = np.array(x0, dtype=float)
    eta = min(max(float(eta0), domain.eta_lo), domain.eta_hi)
    trace = []
    for t in range(1, config.iterations + 1):
        z = DualPoint(lam, eta)
        f, gx, gz = batch_eval(spec, loss_model, dataset, next_x(), x, z)
        if not _finite(f, gx, gz):
            raise NumericalError(t, z, config.seed, "objective or gradient")
        trace.append(TraceRecord(t, lam, eta, float(np.linalg.norm(gx)), None, alpha, f))
        x = x - alpha * gx
        eta = min(max(eta - alpha * gz[1], domain.eta_lo), domain.eta_hi)
    z = DualPoint(lam, eta)
    return SolverOutput(x, z, config.iterations, trace, x, z, "pan_dro")


def erm_sgd(loss_model: LossModel, dataset: Dataset, config: SolverConfig, x0) -> SolverOutput:
    """Plain mini-batch SGD on the mean loss."""
    next_x, _ = _batches(config, dataset)
    alpha = config.step_alpha
    x = np.array(x0, dtype=float)
    trace = []
    for t in range(1, config.iterations + 1):
        idx = next_x()
        if idx is None:
            feats, labels, w = dataset.features, dataset.labels, dataset.weights
        else:
            feats, labels, w = dataset.features[idx], dataset.labels[idx], np.full(len(idx), 1.0 / len(idx))
        ell, grads = loss_model.value_and_grad(x, feats, labels)
        loss, g = float(w @ ell), w @ grads
        if not _finite(loss, g):
            raise NumericalError(t, None, config.seed, "loss or gradient")
        trace.append(TraceRecord(t, None, None, float(np.linalg.norm(g)), None, alpha, loss))
        x = x - alpha * g
    return SolverOutput(x, None, config.iterations, trace, x, None, "erm")


# ---------------------------------------------------------------------------
# hyperparameters that certify epsilon-stationarity


@dataclass
class TheoryPlan:
    config: SolverConfig
    lambda0: float
    domain: DualDomain
    constants: ObjectiveConstants
    warnings: list[str]

    def to_dict(self) -> dict:
        return {
            "config": asdict(self.config),
            "lambda0": self.lambda0,
            "domain": asdict(self.domain),
            "constants": asdict(self.constants),
            "warnings": list(self.warnings),
        }


def min_batch_for_bias(spec: DivergenceSpec, B: float, target: float) -> int:
    """Smallest integer n with sampling_bias_bound(n) < target."""
    if sampling_bias_bound(spec, B, 1) < target:
        return 1
    hi = 2
    while sampling_bias_bound(spec, B, hi) >= target:
        hi *= 2
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if sampling_bias_bound(spec, B, mid) < target:
            hi = mid
        else:
            lo = mid
    return hi


def theory_hyperparams(spec: DivergenceSpec, loss_constants: LossConstants, epsilon: float,
                       delta: float, seed: int = 0) -> TheoryPlan:
    """lambda0 = eps/(8 rho), alpha = 1/(2C), batch sizes and T that certify epsilon-stationarity.

    ``delta`` estimates F(x_1; z_1) - inf F. Failing feasibility preconditions
    are reported in ``warnings`` rather than raised.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    B, G, L = loss_constants.B, loss_constants.G, loss_constants.L
    lambda0 = epsilon / (8.0 * spec.rho)
    domain = compute_domain(spec, B, lambda0)
    if lambda0 >= domain.lambda_hi:
        raise ValueError(f"epsilon={epsilon} too large: lambda0={lambda0} >= lambda_bar={domain.lambda_hi}")
    consts = compute_constants(spec, domain, B, G, L)
    C = consts.C
    alpha = 1.0 / (2.0 * C)
    n_x = max(1, math.ceil(12.0 * consts.L_x * consts.sigma0**2 / (C * epsilon**2)))
    n_z = max(
        math.ceil(48.0 * consts.D**2 * consts.sigma1**2 / epsilon**2),
        min_batch_for_bias(spec, B, epsilon / 4.0),
    )
    T = max(1, math.ceil(48.0 * C * delta / epsilon**2))
    warnings = []
    if consts.L_x > 0 and consts.D**2 * consts.L_z / consts.L_x < 2.0:
        warnings.append("precondition D^2 L_z / L_x >= 2 fails")
    if consts.D * consts.sigma1 / C > 1.0:
        warnings.append("precondition D sigma1 / C <= 1 fails")
    if loss_constants.empirical:
        warnings.append("loss constants are empirical, not certified")
    config = SolverConfig(iterations=T, step_alpha=alpha, batch_nx=n_x, batch_nz=n_z, constant_C=C,
                          seed=seed, mode="theory", epsilon=epsilon)
    return TheoryPlan(config, lambda0, domain, consts, warnings)


def with_overrides(config: SolverConfig, **kwargs) -> SolverConfig:
    return replace(config, **kwargs)

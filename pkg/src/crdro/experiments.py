"""Experiment harnesses behind the CLI: solve, oracle, bias, bench, gradcheck.

Each ``cmd_*`` takes a validated :class:`RunConfig` and an output directory
and returns a result object; the CLI maps exceptions to exit codes.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import Dataset, gen_imbalanced, load_csv, make_rng
from .divergence import DivergenceSpec, phi
from .dual import (
    DualDomain,
    DualPoint,
    batch_eval,
    compute_constants,
    compute_domain,
    f_sample,
    sampling_bias_bound,
)
from .losses import ConstantLoss, LossModel, SquashedLogistic, TinyMLP, central_difference, finite_diff_check
from .oracle import dual_min, dual_min_batch, primal_worst_case, profile_dual_min_batch, regularized_constrained_value
from .solvers import (
    SolverConfig,
    SolverOutput,
    erm_sgd,
    pan_dro,
    pgd,
    sfk_dro,
    theory_hyperparams,
    write_trace,
)

DEFAULT_N_GRID = (8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096)
# theory-mode plans above this many sampled gradients are written out but not run
THEORY_SAMPLE_BUDGET = 50_000_000

CURVE_FIELDS = ("solver", "seed", "t", "objective_estimate", "objective_smoothed")
GROUP_FIELDS = ("solver", "seed", "split", "group", "n", "mean_loss", "accuracy")
SUMMARY_FIELDS = ("solver", "seed", "train_objective", "train_robust", "train_mean_loss",
                  "train_worst_group_loss", "test_mean_loss", "test_worst_group_loss",
                  "test_worst_group_accuracy")
BIAS_FIELDS = ("n_z", "measured_gap", "std_error", "bias_bound", "fitted_slope")


# ---------------------------------------------------------------------------
# building blocks from config


def build_data(cfg: RunConfig) -> tuple[Dataset, Dataset | None]:
    d = cfg.data
    if d.get("source", "generate") == "csv":
        train = load_csv(d["path"], d["label_column"])
        test = load_csv(d["test_path"], d["label_column"]) if "test_path" in d else None
        return train, test
    classes = d.get("classes", 2)
    kw = dict(d=d.get("d", 5), separation=d.get("separation", 2.0))
    seed = d.get("seed", 0)
    train = gen_imbalanced(classes, d.get("ratios"), base_n=d.get("base_n", 500), seed=seed, **kw)
    test = None
    if d.get("test_base_n", 0) > 0:
        ratios = d.get("test_ratios", (1.0,) * classes)
        # held-out draw uses a disjoint stream of the data seed
        test_seed = int(make_rng(seed, "eval").integers(2**63))
        test = gen_imbalanced(classes, ratios, base_n=d["test_base_n"], seed=test_seed, **kw)
    return train, test


def build_loss(cfg: RunConfig, dataset: Dataset) -> LossModel:
    lc = cfg.loss
    B = lc.get("B", 1.0)
    model = lc.get("model", "squashed_logistic")
    if model == "constant":
        return ConstantLoss(lc["value"], B)
    if model == "tiny_mlp":
        classes = max(int(dataset.labels.max()) + 1, 2)
        return TinyMLP(lc["hidden"], classes, B, lc.get("init_scale", 0.5))
    return SquashedLogistic(B)


def loss_constants(cfg: RunConfig, model: LossModel, dataset: Dataset):
    if isinstance(model, TinyMLP):
        return model.constants(dataset.features, dataset.labels, radius=cfg.loss.get("radius", 5.0),
                               safety=cfg.loss.get("safety", 1.5))
    return model.constants(dataset.features)


def initial_point(model: LossModel, dataset: Dataset, seed: int) -> np.ndarray:
    return model.init_params(dataset.d, make_rng(seed, "init"))


def moving_average(values, window: int = 5) -> np.ndarray:
    """Trailing mean over the last ``window`` entries (fewer at the start)."""
    values = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class PreparedRun:
    spec: DivergenceSpec
    model: LossModel
    train: Dataset
    test: Dataset | None
    domain: DualDomain
    solver_config: SolverConfig | None
    constants: object
    plan: object = None


def prepare(cfg: RunConfig, seed: int | None = None) -> PreparedRun:
    spec = cfg.spec()
    train, test = build_data(cfg)
    model = build_loss(cfg, train)
    s = cfg.solver
    seed = s.get("seed", 0) if seed is None else seed
    lc = loss_constants(cfg, model, train)
    if s.get("mode", "practical") == "theory":
        x0 = initial_point(model, train, seed)
        z_probe = DualPoint(1.0, 0.0)
        delta = s.get("delta")
        if delta is None:
            # inf F >= 0 for non-negative losses, so F at the start bounds the gap
            delta = batch_eval(spec, model, train, None, x0, z_probe, need_x=False)[0]
        plan = theory_hyperparams(spec, lc, s["epsilon"], delta, seed=seed)
        return PreparedRun(spec, model, train, test, plan.domain, plan.config, plan.constants, plan)
    domain = compute_domain(spec, model.B, s.get("lambda0", 0.01))
    consts = compute_constants(spec, domain, model.B, lc.G, lc.L) if domain.lambda_lo > 0 else None
    config = None
    if "iterations" in s:
        config = SolverConfig(
            iterations=s["iterations"], step_alpha=s["step_alpha"], batch_nx=s.get("batch_nx", 64),
            batch_nz=s.get("batch_nz", 64), constant_C=s.get("constant_C"), seed=seed,
            mode="practical", full_batch=s.get("full_batch", False),
        )
    return PreparedRun(spec, model, train, test, domain, config, consts)


def run_solver(name: str, run: PreparedRun, cfg: RunConfig, seed: int) -> SolverOutput:
    config = run.solver_config
    if config.seed != seed:
        config = SolverConfig(**{**config.__dict__, "seed": seed})
    x0 = initial_point(run.model, run.train, seed)
    s, dom = cfg.solver, run.domain
    z0 = dom.project(s.get("lambda_init", 1.0), s.get("eta_init", 0.0))
    if name == "sfk_dro":
        return sfk_dro(run.spec, run.model, run.train, dom, run.constants, config, x0, z0)
    if name == "pgd":
        return pgd(run.spec, run.model, run.train, dom, config, x0, z0, constants=run.constants)
    if name == "pan_dro":
        return pan_dro(run.spec, run.model, run.train, config, x0, s.get("eta_init", 0.0), dom,
                       lam=s.get("pan_lambda", 1.0))
    if name == "erm":
        return erm_sgd(run.model, run.train, config, x0)
    raise ConfigError(f"unknown solver {name!r}")


def group_table(model: LossModel, x, dataset: Dataset) -> list[dict]:
    losses = model.value(x, dataset.features, dataset.labels)
    correct = model.predict(x, dataset.features) == dataset.labels
    rows = []
    for g in np.unique(dataset.group_ids):
        m = dataset.group_ids == g
        rows.append({"group": int(g), "n": int(m.sum()), "mean_loss": float(losses[m].mean()),
                     "accuracy": float(correct[m].mean())})
    return rows


def robust_value(spec, model, x, dataset: Dataset, domain: DualDomain) -> float:
    """inf over the dual box of F(x; .), by the oracle's nested golden section."""
    losses = model.value(x, dataset.features, dataset.labels)
    return dual_min(spec, losses, dataset.weights, domain=domain)[0]


def _write_csv(path: Path, fields, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_solve(cfg: RunConfig, out_dir, seed: int | None = None) -> dict:
    """Run the configured solver; write trace.jsonl, curve.csv and summary.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = prepare(cfg, seed)
    seed = run.solver_config.seed if run.solver_config else (seed or 0)
    name = cfg.solver.get("name", "sfk_dro")
    window = cfg.output.get("smoothing_window", 5)
    summary = {"solver": name, "seed": seed, "divergence": run.spec.family.value, "rho": run.spec.rho,
               "domain": [run.domain.lambda_lo, run.domain.lambda_hi, run.domain.eta_lo, run.domain.eta_hi]}
    if run.plan is not None:
        plan = run.plan.to_dict()
        _write_json(out / "theory_plan.json", plan)
        c = run.plan.config
        summary["theory_plan"] = plan
        if c.iterations * (c.batch_nx + c.batch_nz) > THEORY_SAMPLE_BUDGET:
            summary["executed"] = False
            summary["note"] = "theory plan exceeds the sample budget; written but not run"
            _write_json(out / "summary.json", summary)
            return summary
    if run.solver_config is None:
        raise ConfigError(f"{cfg.source}: [solver] needs iterations and step_alpha")
    t0 = time.perf_counter()
    res = run_solver(name, run, cfg, seed)
    wall = time.perf_counter() - t0
    write_trace(res.trace, out / "trace.jsonl")
    obj = [r.objective_estimate for r in res.trace]
    smooth = moving_average(obj, window)
    _write_csv(out / "curve.csv", CURVE_FIELDS[2:],
               ({"t": r.t, "objective_estimate": r.objective_estimate, "objective_smoothed": s}
                for r, s in zip(res.trace, smooth)))
    x = res.x_out
    summary.update({"executed": True, "t_prime": res.t_prime, "iterations": len(res.trace),
                    "x_out": [float(v) for v in x], "wall_time_s": wall, "warnings": res.warnings})
    if res.z_out is not None:
        f, gx, _ = batch_eval(run.spec, run.model, run.train, None, x, res.z_out)
        inf_f = robust_value(run.spec, run.model, x, run.train, run.domain)
        summary.update({"z_out": {"lambda": res.z_out.lam, "eta": res.z_out.eta}, "objective": f,
                        "grad_x_norm": float(np.linalg.norm(gx)), "robust_value": inf_f,
                        "dual_gap": f - inf_f})
    else:
        losses, grads = run.model.value_and_grad(x, run.train.features, run.train.labels)
        summary.update({"objective": run.train.expectation(losses),
                        "grad_x_norm": float(np.linalg.norm(run.train.weights @ grads))})
    summary["groups_train"] = group_table(run.model, x, run.train)
    if run.test is not None:
        summary["groups_test"] = group_table(run.model, x, run.test)
    _write_json(out / "summary.json", summary)
    return summary


def cmd_oracle(cfg: RunConfig, out_dir=None) -> dict:
    """Primal worst case, dual minimum and their gap for the [oracle] loss vector."""
    o = cfg.oracle
    if "losses" not in o:
        raise ConfigError(f"{cfg.source}: [oracle] losses is required")
    spec = cfg.spec()
    losses = np.array(o["losses"], dtype=float)
    p0 = np.array(o["weights"], dtype=float) if "weights" in o else None
    if p0 is not None and p0.shape != losses.shape:
        raise ConfigError(f"{cfg.source}: [oracle] weights and losses differ in length")
    res = primal_worst_case(spec, losses, p0)
    dval, z = dual_min(spec, losses, p0)
    report = res.to_dict()
    report.update({"dual_value": dval, "z_star": {"lambda": z.lam, "eta": z.eta},
                   "duality_gap": abs(res.value - dval)})
    if "lambda0" in o:
        report["regularized_value"] = regularized_constrained_value(spec, losses, p0, o["lambda0"])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_json(Path(out_dir) / "oracle.json", report)
    return report


@dataclass
class BiasReport:
    n_z: list[int]
    measured_gap: list[float]
    std_error: list[float]
    bias_bound: list[float]
    fitted_slope: float
    rho: float

    def rows(self):
        for n, g, se, b in zip(self.n_z, self.measured_gap, self.std_error, self.bias_bound):
            yield {"n_z": n, "measured_gap": g, "std_error": se, "bias_bound": b,
                   "fitted_slope": self.fitted_slope}


def point_mass_rho(spec: DivergenceSpec, p_top: float) -> float:
    """Divergence of the point mass on an atom of probability ``p_top``.

    At this radius the worst case is exactly that point mass, the dual
    optimum has lambda = 0, and plug-in bias decays at its slowest rate.
    """
    return p_top * phi(spec, 1.0 / p_top) + (1.0 - p_top) * phi(spec, 0.0)


def _inf_batch(spec, losses, W, B):
    if spec.is_cvar:
        return dual_min_batch(spec, losses, W, B=B)
    return profile_dual_min_batch(spec, losses, W, B=B)


def bias_study(spec: DivergenceSpec, losses, p0=None, n_grid=DEFAULT_N_GRID, trials: int = 2000,
               seed: int = 0, B: float | None = None) -> BiasReport:
    """Monte-Carlo estimate of inf F - E[inf f_z] for n_z-sample plug-in objectives.

    Each trial contributes f_z(z*) - inf f_z, where z* minimises the full F.
    Since E f_z(z*) = F(z*) = inf F, this has the same mean as the raw gap and
    is non-negative per trial, which removes the O(n^-1/2) sampling noise of
    the plug-in value itself.
    """
    if trials < 30:
        raise ConfigError("bias study needs trials >= 30 for a stable slope fit")
    losses = np.asarray(losses, dtype=float)
    p0 = np.full(losses.size, 1.0 / losses.size) if p0 is None else np.asarray(p0, dtype=float)
    B = max(float(losses.max()), 1e-12) if B is None else B
    v_star, z_star = dual_min(spec, losses, p0, B=B, tol=1e-12)
    f_star = f_sample(spec, losses, z_star)
    if not abs(p0 @ f_star - v_star) <= 1e-8 * (1.0 + abs(v_star)):
        raise RuntimeError("dual minimiser does not reproduce the optimal value; cannot form the control variate")
    rng = make_rng(seed, "z_batch")
    gaps, ses = [], []
    for n in n_grid:
        W = rng.multinomial(n, p0, size=trials) / n
        d = np.maximum(W @ f_star - _inf_batch(spec, losses, W, B), 0.0)
        gaps.append(float(d.mean()))
        ses.append(float(d.std(ddof=1) / math.sqrt(trials)))
    bounds = [sampling_bias_bound(spec, B, n) for n in n_grid]
    pos = np.array(gaps) > 0
    slope = float(np.polyfit(np.log(np.array(n_grid)[pos]), np.log(np.array(gaps)[pos]), 1)[0]) if pos.sum() >= 2 else float("nan")
    return BiasReport(list(n_grid), gaps, ses, bounds, slope, spec.rho)


def cmd_bias(cfg: RunConfig, out_dir, seed: int | None = None) -> BiasReport:
    b = cfg.bias
    if "losses" not in b:
        raise ConfigError(f"{cfg.source}: [bias] losses is required")
    spec = cfg.spec()
    losses = np.array(b["losses"], dtype=float)
    if losses.size > 64:
        raise ConfigError(f"{cfg.source}: bias study is limited to N <= 64 atoms")
    p0 = np.array(b["weights"], dtype=float) if "weights" in b else np.full(losses.size, 1.0 / losses.size)
    if b.get("boundary_rho", False):
        top = float(p0[losses == losses.max()].sum())
        spec = spec.with_rho(point_mass_rho(spec, top))
    seed = cfg.solver.get("seed", 0) if seed is None else seed
    B = cfg.loss.get("B", float(losses.max()) if losses.max() > 0 else 1.0)
    report = bias_study(spec, losses, p0, b.get("n_grid", DEFAULT_N_GRID), b.get("trials", 2000), seed, B)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "bias.csv", BIAS_FIELDS, report.rows())
    return report


def cmd_bench(cfg: RunConfig, out_dir, seed: int | None = None) -> list[dict]:
    """Paired runs of every listed solver on every seed; writes curves, per-group and summary CSVs.

    Solvers are compared at their last iterate. Nothing time-dependent is
    written, so a fixed config reproduces the files byte for byte.
    """
    solvers = cfg.bench.get("solvers", ("sfk_dro", "pgd", "pan_dro", "erm"))
    if len(solvers) < 2:
        raise ConfigError(f"{cfg.source}: [bench] needs at least two solvers")
    seeds = cfg.bench.get("seeds", (0, 1, 2, 3, 4)) if seed is None else (seed,)
    run = prepare(cfg)
    if run.solver_config is None:
        raise ConfigError(f"{cfg.source}: [solver] needs iterations and step_alpha")
    window = cfg.output.get("smoothing_window", 5)
    curves, groups, summary = [], [], []
    for s in seeds:
        for name in solvers:
            res = run_solver(name, run, cfg, s)
            x, z = res.x_last, res.z_last
            obj = [r.objective_estimate for r in res.trace]
            for r, sm in zip(res.trace, moving_average(obj, window)):
                curves.append({"solver": name, "seed": s, "t": r.t, "objective_estimate": r.objective_estimate,
                               "objective_smoothed": sm})
            tr = group_table(run.model, x, run.train)
            te = group_table(run.model, x, run.test) if run.test is not None else []
            for split, rows in (("train", tr), ("test", te)):
                for g in rows:
                    groups.append({"solver": name, "seed": s, "split": split, **g})
            losses = run.model.value(x, run.train.features, run.train.labels)
            if z is not None:
                train_obj = batch_eval(run.spec, run.model, run.train, None, x, z, need_x=False)[0]
            else:
                train_obj = run.train.expectation(losses)
            summary.append({
                "solver": name, "seed": s, "train_objective": train_obj,
                "train_robust": robust_value(run.spec, run.model, x, run.train, run.domain),
                "train_mean_loss": run.train.expectation(losses),
                "train_worst_group_loss": max(g["mean_loss"] for g in tr),
                "test_mean_loss": float(np.mean([g["mean_loss"] for g in te])) if te else "",
                "test_worst_group_loss": max(g["mean_loss"] for g in te) if te else "",
                "test_worst_group_accuracy": min(g["accuracy"] for g in te) if te else "",
            })
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "curves.csv", CURVE_FIELDS, curves)
    _write_csv(out / "groups.csv", GROUP_FIELDS, groups)
    _write_csv(out / "summary.csv", SUMMARY_FIELDS, summary)
    return summary


@dataclass
class GradcheckReport:
    loss_max_rel_error: float
    loss_worst_x: list
    loss_worst_sample: int
    loss_worst_coord: int
    dual_x_max_rel_error: float
    dual_z_max_rel_error: float
    dual_worst_point: dict
    tol: float

    @property
    def passed(self) -> bool:
        return max(self.loss_max_rel_error, self.dual_x_max_rel_error, self.dual_z_max_rel_error) <= self.tol


# Below this gradient norm the central difference of an O(1) objective is
# dominated by roundoff (eps |F| / h), so the error is judged on this scale.
GRAD_FLOOR = 1e-3


def relative_error(analytic, numeric, floor: float = GRAD_FLOOR) -> float:
    a, b = np.atleast_1d(analytic), np.atleast_1d(numeric)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def dual_gradient_audit(spec, model, dataset, domain, points: int = 20, h: float = 1e-6,
                        seed: int = 0, batch: int = 16):
    """Worst relative errors of batch_grad_x / batch_grad_z against central differences."""
    rng = make_rng(seed, "eval")
    worst_x, worst_z, where = 0.0, 0.0, {}
    for _ in range(points):
        idx = rng.integers(0, dataset.n, size=min(batch, dataset.n))
        x = model.init_params(dataset.d, rng) + rng.normal(0.0, 0.3, size=model.n_params(dataset.d))
        lam = rng.uniform(domain.lambda_lo + 0.1 * (domain.lambda_hi - domain.lambda_lo), domain.lambda_hi)
        eta = rng.uniform(domain.eta_lo, domain.eta_hi)
        _, gx, gz = batch_eval(spec, model, dataset, idx, x, DualPoint(lam, eta))
        fd_x = central_difference(lambda v: batch_eval(spec, model, dataset, idx, v, DualPoint(lam, eta), need_x=False)[0], x, h)
        fd_z = central_difference(
            lambda w: batch_eval(spec, model, dataset, idx, x, DualPoint(w[0], w[1]), need_x=False)[0],
            np.array([lam, eta]), h)
        ex, ez = relative_error(gx, fd_x), relative_error(np.array(gz), fd_z)
        if max(ex, ez) > max(worst_x, worst_z):
            where = {"lambda": lam, "eta": eta, "x": [float(v) for v in x]}
        worst_x, worst_z = max(worst_x, ex), max(worst_z, ez)
    return worst_x, worst_z, where


def cmd_gradcheck(cfg: RunConfig, out_dir=None, seed: int | None = None, model: LossModel | None = None) -> GradcheckReport:
    g = cfg.gradcheck
    points, h, tol = g.get("points", 20), g.get("h", 1e-6), g.get("tol", 1e-5)
    spec = cfg.spec()
    train, _ = build_data(cfg)
    model = build_loss(cfg, train) if model is None else model
    seed = cfg.solver.get("seed", 0) if seed is None else seed
    fd = finite_diff_check(model, train.features, train.labels, points=points, h=h, seed=seed)
    domain = compute_domain(spec, model.B, cfg.solver.get("lambda0", 0.01))
    ex, ez, where = dual_gradient_audit(spec, model, train, domain, points, h, seed)
    report = GradcheckReport(fd.max_rel_error, [float(v) for v in fd.worst_x], fd.worst_sample, fd.worst_coord,
                             ex, ez, where, tol)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        _write_json(Path(out_dir) / "gradcheck.json", {**report.__dict__, "passed": report.passed})
    return report

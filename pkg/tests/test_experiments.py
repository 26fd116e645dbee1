import csv
import json
import textwrap
from pathlib import Path

import numpy as np
import pytest

from crdro.config import ConfigError, parse_config
from crdro.divergence import DivergenceSpec
from crdro.experiments import (
    bias_study,
    build_data,
    build_loss,
    cmd_bench,
    cmd_bias,
    cmd_solve,
    moving_average,
    point_mass_rho,
)
from crdro.oracle import primal_worst_case, regularized_constrained_value

GOLDEN = Path(__file__).resolve().parent / "golden"

SMALL = """
[divergence]
k = 2
rho = 0.3
[loss]
model = tiny_mlp
hidden = 4
[data]
classes = 3
ratios = 1.0, 0.5, 0.3
base_n = 40
d = 3
test_base_n = 20
[solver]
iterations = 60
step_alpha = 0.5
batch_nx = 16
batch_nz = 16
constant_C = 50
[bench]
solvers = sfk_dro, pgd, pan_dro, erm
seeds = 0, 1
"""


def small_cfg(text=SMALL):
    return parse_config(textwrap.dedent(text))


def header(path):
    return path.read_text(encoding="utf-8").splitlines()[0]


def golden(name):
    return (GOLDEN / name).read_text(encoding="utf-8").strip()


def test_bench_headers_match_golden(tmp_path):
    cmd_bench(small_cfg(), tmp_path)
    for name in ("curves.csv", "groups.csv", "summary.csv"):
        assert header(tmp_path / name) == golden(name + ".header")


def test_bench_is_byte_reproducible(tmp_path):
    cmd_bench(small_cfg(), tmp_path / "a")
    cmd_bench(small_cfg(), tmp_path / "b")
    for name in ("curves.csv", "groups.csv", "summary.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bench_seed_override_runs_one_seed(tmp_path):
    rows = cmd_bench(small_cfg(), tmp_path, seed=9)
    assert {r["seed"] for r in rows} == {9} and len(rows) == 4


def test_bench_needs_two_solvers(tmp_path):
    with pytest.raises(ConfigError):
        cmd_bench(small_cfg(SMALL.replace("sfk_dro, pgd, pan_dro, erm", "erm")), tmp_path)


def test_solve_outputs_schema_and_determinism(tmp_path):
    cfg_text = SMALL.replace("model = tiny_mlp\nhidden = 4", "model = squashed_logistic") \
        .replace("classes = 3\nratios = 1.0, 0.5, 0.3", "classes = 2\nratios = 1.0, 0.5")
    s1 = cmd_solve(small_cfg(cfg_text), tmp_path / "a")
    cmd_solve(small_cfg(cfg_text), tmp_path / "b")
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "trace.jsonl").read_bytes() == (b / "trace.jsonl").read_bytes()
    assert (a / "curve.csv").read_bytes() == (b / "curve.csv").read_bytes()
    assert header(a / "curve.csv") == golden("curve.csv.header")
    keys = ",".join(json.loads((a / "trace.jsonl").read_text().splitlines()[0]))
    assert keys == golden("trace.jsonl.keys")
    assert len((a / "trace.jsonl").read_text().splitlines()) == 60
    assert s1["t_prime"] >= 1 and s1["dual_gap"] >= 0


def test_summary_dual_gap_matches_primal_oracle(tmp_path):
    cfg_text = SMALL.replace("model = tiny_mlp\nhidden = 4", "model = squashed_logistic") \
        .replace("classes = 3\nratios = 1.0, 0.5, 0.3", "classes = 2\nratios = 1.0, 0.5")
    cfg = small_cfg(cfg_text)
    summary = cmd_solve(cfg, tmp_path)
    train, _ = build_data(cfg)
    model = build_loss(cfg, train)
    losses = model.value(np.array(summary["x_out"]), train.features, train.labels)
    spec = cfg.spec()
    lam0 = summary["domain"][0]
    # box dual minimum = regularised primal value + lambda0 * rho
    primal = regularized_constrained_value(spec, losses, train.weights, lam0) + lam0 * spec.rho
    assert summary["robust_value"] == pytest.approx(primal, abs=1e-5)
    assert summary["dual_gap"] == pytest.approx(summary["objective"] - primal, abs=1e-5)


def test_bias_constant_losses_have_zero_gap():
    rep = bias_study(DivergenceSpec.cressie_read(2.0, 0.5), [0.3, 0.3, 0.3], n_grid=(8, 64), trials=50, B=1.0)
    assert rep.measured_gap == [0.0, 0.0]


def test_bias_rejects_few_trials():
    with pytest.raises(ConfigError):
        bias_study(DivergenceSpec.cressie_read(2.0, 0.5), [0.0, 1.0], trials=29)


def test_bias_command_writes_schema(tmp_path):
    text = "[divergence]\nk = 2\nrho = 0.5\n[bias]\nlosses = 0, 1\nweights = 0.5, 0.5\nn_grid = 8, 16, 32\ntrials = 200\n"
    rep = cmd_bias(parse_config(text), tmp_path)
    assert header(tmp_path / "bias.csv") == golden("bias.csv.header")
    rows = list(csv.DictReader((tmp_path / "bias.csv").open()))
    assert [int(r["n_z"]) for r in rows] == [8, 16, 32]
    assert all(0 <= float(r["measured_gap"]) <= float(r["bias_bound"]) for r in rows)
    assert rep.fitted_slope < 0


@pytest.mark.parametrize("spec", [DivergenceSpec.cressie_read(2.0, 1.0), DivergenceSpec.cressie_read(1.5, 1.0)])
def test_point_mass_radius_is_where_worst_case_saturates(spec):
    losses, p0 = np.array([0.0, 1.0]), np.array([0.6, 0.4])
    rho = point_mass_rho(spec, 0.4)
    assert primal_worst_case(spec.with_rho(rho), losses, p0).value == pytest.approx(1.0, abs=1e-9)
    assert primal_worst_case(spec.with_rho(0.9 * rho), losses, p0).value < 1.0 - 1e-4


def test_moving_average_is_trailing():
    np.testing.assert_allclose(moving_average([1, 2, 3, 4, 5], 2), [1, 1.5, 2.5, 3.5, 4.5])
    np.testing.assert_allclose(moving_average([4.0], 5), [4.0])


def test_bench_robust_training_trades_mean_for_tail(bench_10class):
    rows, _ = bench_10class
    by = {(r["solver"], r["seed"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    tail = sum(by["sfk_dro", s]["test_worst_group_loss"] <= by["erm", s]["test_worst_group_loss"] for s in seeds)
    assert tail >= 4


def test_bench_erm_mean_train_loss_not_above_sfk(bench_10class):
    # Known failure on this task: ERM abandons the two rarest classes, whose
    # bounded loss saturates at B with zero gradient, and ends with a higher
    # mean than SFK-DRO on every seed. README, "Known deviations".
    rows, _ = bench_10class
    by = {(r["solver"], r["seed"]): r for r in rows}
    seeds = sorted({r["seed"] for r in rows})
    wins = sum(by["erm", s]["train_mean_loss"] <= by["sfk_dro", s]["train_mean_loss"] for s in seeds)
    assert wins >= 4, f"ERM mean train loss <= SFK-DRO's on {wins}/5 seeds"


def test_bench_reports_have_fixed_columns(bench_10class):
    _, out = bench_10class
    for name in ("curves.csv", "groups.csv", "summary.csv"):
        assert header(out / name) == golden(name + ".header")
    groups = list(csv.DictReader((out / "groups.csv").open()))
    assert {g["split"] for g in groups} == {"train", "test"}
    assert len({g["group"] for g in groups}) == 10

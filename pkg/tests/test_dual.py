import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crdro.data import Dataset
from crdro.divergence import DivergenceSpec
from crdro.dual import (
    DualDomain,
    DualDomainError,
    DualPoint,
    batch_eval,
    batch_grad_x,
    batch_grad_z,
    batch_objective,
    compute_constants,
    compute_domain,
    cvar_bound_residual,
    f_sample,
    grad_x_sample,
    grad_z_sample,
    lambda_bar,
    objective_from_losses,
    sampling_bias_bound,
)
from crdro.losses import SquashedLogistic, central_difference
from crdro.oracle import dual_min

CR2 = DivergenceSpec.cressie_read(2.0, 0.5)
CR15 = DivergenceSpec.cressie_read(1.5, 1.0)
CV3 = DivergenceSpec.smoothed_cvar(0.3, 0.5)


def test_f_sample_worked_values():
    assert f_sample(CR2, 1.0, DualPoint(1.0, 0.0)) == pytest.approx(1.5, abs=1e-15)
    for rho in (0.1, 1.0, 3.0):
        spec = DivergenceSpec.cressie_read(2.0, rho)
        assert f_sample(spec, 0.0, DualPoint(1.0, 5.0)) == pytest.approx(rho + 0.5 + 5.0, abs=1e-14)


def test_f_sample_k15_against_rational_exponents():
    # k = 3/2, kstar = 3: ((1/2)^3 / (3/2)) * 2^3 * 1^-2 + (1 + 1/(3/4)) + 0
    mp.mp.dps = 40
    k, ks = mp.mpf(3) / 2, mp.mpf(3)
    expected = (k - 1) ** ks / k * mp.mpf(2) ** ks + (1 + 1 / (k * (k - 1)))
    assert f_sample(CR15, 2.0, DualPoint(1.0, 0.0)) == pytest.approx(float(expected), rel=1e-14)


def test_grad_z_worked_values():
    assert grad_z_sample(CR2, 1.0, DualPoint(1.0, 0.0)) == pytest.approx((0.5, 0.0), abs=1e-15)
    for rho in (0.1, 2.0):
        spec = DivergenceSpec.cressie_read(2.0, rho)
        assert grad_z_sample(spec, 0.0, DualPoint(1.0, 1.0)) == pytest.approx((rho + 0.5, 1.0))


def test_grad_x_worked_values():
    g = grad_x_sample(CR15, 0.2, np.array([3.0, -1.0]), DualPoint(1.0, 0.5))
    np.testing.assert_array_equal(g, np.zeros(2))
    # d/dl of 0.5 (l - eta)^2 / lam at l = 1, eta = 0, lam = 2 is 0.5
    g = grad_x_sample(CR2, 1.0, np.array([1.0, 0.0]), DualPoint(2.0, 0.0))
    np.testing.assert_allclose(g, [0.5, 0.0], atol=1e-15)
    h = 1e-6
    fd = (f_sample(CR2, 1.0 + h, DualPoint(2.0, 0.0)) - f_sample(CR2, 1.0 - h, DualPoint(2.0, 0.0))) / (2 * h)
    assert fd == pytest.approx(g[0], rel=1e-8)


def test_nonpositive_lambda_rejected():
    with pytest.raises(ValueError):
        f_sample(CR2, 1.0, (0.0, 0.0))
    with pytest.raises(ValueError):
        DualPoint(-1.0, 0.0)
    with pytest.raises(ValueError):
        DualPoint(1.0, math.nan)


@pytest.mark.parametrize("spec", [CR2, CR15, DivergenceSpec.cressie_read(1.25, 0.3), CV3])
def test_grad_z_matches_central_differences(spec, rng):
    h = 1e-6
    for _ in range(100):
        ell = rng.uniform(0, 1)
        lam, eta = rng.uniform(0.2, 3), rng.uniform(-2, 1)
        if not spec.is_cvar and abs(ell - eta) < 1e-3:
            continue
        g = np.array(grad_z_sample(spec, ell, (lam, eta)))
        fd = central_difference(lambda z: f_sample(spec, ell, (z[0], z[1])), np.array([lam, eta]), h)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(np.linalg.norm(g), 1e-3)


def _toy(n=40, d=3, seed=0):
    r = np.random.default_rng(seed)
    return Dataset(r.normal(size=(n, d)), r.integers(0, 2, size=n))


@pytest.mark.parametrize("spec", [CR2, CR15, CV3])
def test_batch_gradients_match_finite_differences(spec, rng):
    ds, model = _toy(), SquashedLogistic(1.0)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        idx = rng.integers(0, ds.n, size=8)
        x = rng.normal(0, 1, size=3)
        z = DualPoint(rng.uniform(0.2, 2.0), rng.uniform(-1.0, 0.8))
        gx = batch_grad_x(spec, model, ds, idx, x, z)
        gz = np.array(batch_grad_z(spec, model, ds, idx, x, z))
        fx = central_difference(lambda v: batch_objective(spec, model, ds, idx, v, z), x, h)
        fz = central_difference(lambda w: batch_objective(spec, model, ds, idx, x, (w[0], w[1])), z.as_array(), h)
        for a, b in ((gx, fx), (gz, fz)):
            worst = max(worst, np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-3))
    assert worst <= 1e-5


def test_singleton_batch_equals_per_sample(rng):
    ds, model = _toy(), SquashedLogistic(1.0)
    x, z = rng.normal(size=3), DualPoint(0.7, 0.1)
    ell, g = model.value_and_grad(x, ds.features[[5]], ds.labels[[5]])
    v, gx, gz = batch_eval(CR15, model, ds, [5], x, z)
    assert v == pytest.approx(f_sample(CR15, ell[0], z), rel=1e-15)
    np.testing.assert_allclose(gx, grad_x_sample(CR15, ell[0], g[0], z), rtol=1e-14)
    assert gz == pytest.approx(grad_z_sample(CR15, ell[0], z), rel=1e-14)


def test_full_batch_of_three_is_the_mean(rng):
    ds, model = _toy(n=3), SquashedLogistic(1.0)
    x, z = rng.normal(size=3), DualPoint(0.5, -0.2)
    per = [f_sample(CR2, l, z) for l in model.value(x, ds.features, ds.labels)]
    assert batch_objective(CR2, model, ds, None, x, z) == pytest.approx(np.mean(per), rel=1e-15)
    assert batch_objective(CR2, model, ds, [0, 1, 2], x, z) == pytest.approx(np.mean(per), rel=1e-15)


def test_empty_batch_rejected():
    ds = _toy()
    with pytest.raises(ValueError):
        batch_objective(CR2, SquashedLogistic(), ds, [], np.zeros(3), DualPoint(1, 0))


def test_random_batches_are_unbiased():
    ds, model = _toy(n=50, seed=3), SquashedLogistic(1.0)
    r = np.random.default_rng(7)
    x, z = r.normal(size=3), DualPoint(0.4, 0.2)
    f_i = f_sample(CR15, model.value(x, ds.features, ds.labels), z)
    full = batch_objective(CR15, model, ds, None, x, z)
    draws = f_i[r.integers(0, ds.n, size=(100_000, 4))].mean(axis=1)
    se = draws.std() / math.sqrt(draws.size)
    assert abs(draws.mean() - full) <= 3 * se


def test_domain_chi_square_example():
    dom = compute_domain(DivergenceSpec.cressie_read(2.0, 1.0), 10.0, 0.1)
    lam_bar = 10.0 / (math.sqrt(3.0) - 1.0)
    assert dom.lambda_hi == pytest.approx(lam_bar, rel=1e-14)
    assert dom.lambda_hi == pytest.approx(13.6603, abs=1e-4)
    assert -dom.eta_lo == pytest.approx(lam_bar, rel=1e-14)
    assert dom.eta_hi == 10.0 and dom.lambda_lo == 0.1


def test_domain_shrinks_with_radius():
    vals = [lambda_bar(DivergenceSpec.cressie_read(2.0, rho), 1.0) for rho in (1, 10, 100, 1e4, 1e8)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-3


def test_cvar_bisection_residual():
    spec = DivergenceSpec.smoothed_cvar(0.5, 1.0)
    dom = compute_domain(spec, 10.0, 0.1)
    assert abs(cvar_bound_residual(spec, 10.0, dom.lambda_hi)) <= 1e-10
    assert dom.eta_lo == 0.0 and dom.eta_hi == 10.0


def test_lambda0_above_bound_rejected():
    with pytest.raises(DualDomainError):
        compute_domain(DivergenceSpec.cressie_read(2.0, 1.0), 1.0, 100.0)


@pytest.mark.parametrize("k", [2.0, 1.5, 1.25])
def test_lambda_stationarity_relation(k, rng):
    # the upper bound rests on argmin_lam F(lam, eta) = (k-1) omega^-(k-1) ||(l - eta)_+||_kstar
    spec = DivergenceSpec.cressie_read(k, rng.uniform(0.1, 3))
    omega = (k * (k - 1) * spec.rho + 1) ** (1 / k)
    for _ in range(10):
        ell, p0 = rng.uniform(0, 1, 6), rng.dirichlet(np.ones(6))
        eta = rng.uniform(-1, 0.5)
        norm = (p0 @ np.maximum(ell - eta, 0) ** spec.kstar) ** (1 / spec.kstar)
        predicted = (k - 1) * omega ** (-(k - 1)) * norm
        grid = np.linspace(predicted * 0.5, predicted * 1.5, 20001)
        vals = objective_from_losses(spec, ell, p0, grid, np.full_like(grid, eta))
        assert grid[np.argmin(vals)] == pytest.approx(predicted, rel=1e-4)


def test_constants_plug_in():
    dom = DualDomain(1.0, 2.0, 0.0, 1.0)  # B + eta_bar = 1
    c = compute_constants(DivergenceSpec.cressie_read(2.0, 1.0), dom, 1.0, 1.0, 1.0)
    assert c.L_z == pytest.approx(4.0)
    assert c.C == pytest.approx(c.D**2 * c.L_z)


def test_box_diagonal():
    dom = DualDomain(0.1, 13.66, -13.66, 10.0)
    assert dom.diameter == pytest.approx(math.hypot(13.56, 23.66), rel=1e-12)


def test_box_projection_and_corners():
    dom = DualDomain(0.1, 13.66, -13.66, 10.0)
    assert dom.project(-1.0, 50.0) == DualPoint(0.1, 10.0)
    assert len(dom.corners()) == 4


@pytest.mark.parametrize("spec", [CR2, CR15, DivergenceSpec.cressie_read(1.25, 0.5), CV3])
def test_constants_positive_and_C_dominates(spec):
    dom = compute_domain(spec, 1.0, 0.05)
    c = compute_constants(spec, dom, 1.0, 0.5, 0.2)
    assert min(c.L_x, c.L_z, c.sigma0, c.sigma1, c.D, c.C) > 0
    assert c.C >= c.D**2 * c.L_z


def _instance(spec, r, n=6):
    return r.uniform(0, 1, n), r.dirichlet(np.ones(n))


@pytest.mark.parametrize("spec", [CR2, CR15, CV3])
def test_sampled_smoothness_and_gradient_bound(spec, rng):
    # dual-box smoothness in z and the per-sample gradient-norm bound sigma0
    B, G, L = 1.0, 1.0, 1.0 / (6 * math.sqrt(3))
    dom = compute_domain(spec, B, 0.1)
    c = compute_constants(spec, dom, B, G, L)
    ell, p0 = _instance(spec, rng)

    def grad(z):
        lam, eta = z
        from crdro.dual import _pieces
        _, dl, de, _ = _pieces(spec, ell, lam, eta)
        return np.array([p0 @ dl, p0 @ de])

    for _ in range(1000):
        z1 = np.array([rng.uniform(dom.lambda_lo, dom.lambda_hi), rng.uniform(dom.eta_lo, dom.eta_hi)])
        z2 = np.array([rng.uniform(dom.lambda_lo, dom.lambda_hi), rng.uniform(dom.eta_lo, dom.eta_hi)])
        assert np.linalg.norm(grad(z1) - grad(z2)) <= c.L_z * np.linalg.norm(z1 - z2) * (1 + 1e-12)
        w = np.abs(grad_x_sample(spec, ell, np.full(ell.size, G), (z1[0], z1[1])))
        assert w.max() <= c.sigma0 * (1 + 1e-12)


@given(st.sampled_from([CR2, CR15, CV3]), st.integers(0, 2**32 - 1))
def test_joint_convexity_in_z(spec, seed):
    r = np.random.default_rng(seed)
    dom = compute_domain(spec, 1.0, 0.01)
    ell, p0 = _instance(spec, r)
    z1 = (r.uniform(dom.lambda_lo, dom.lambda_hi), r.uniform(dom.eta_lo, dom.eta_hi))
    z2 = (r.uniform(dom.lambda_lo, dom.lambda_hi), r.uniform(dom.eta_lo, dom.eta_hi))
    mid = ((z1[0] + z2[0]) / 2, (z1[1] + z2[1]) / 2)
    F = lambda z: float(objective_from_losses(spec, ell, p0, z[0], z[1]))
    assert F(mid) <= (F(z1) + F(z2)) / 2 + 1e-10


@pytest.mark.parametrize("spec", [CR2, CR15, DivergenceSpec.cressie_read(1.25, 2.0), CV3])
def test_unconstrained_minimiser_lies_in_domain(spec, rng):
    for _ in range(50):
        n = rng.integers(2, 7)
        B = rng.uniform(0.5, 5)
        ell, p0 = rng.uniform(0, B, n), rng.dirichlet(np.ones(n))
        s = spec.with_rho(rng.uniform(0.01, 5))
        dom = compute_domain(s, B, 0.0)
        _, z = dual_min(s, ell, p0, B=B)
        assert 0 <= z.lam <= dom.lambda_hi * (1 + 1e-9)
        assert dom.eta_lo - 1e-9 <= z.eta <= B + 1e-9


def test_bias_bound_values():
    s2 = DivergenceSpec.cressie_read(2.0, 1.0)
    assert sampling_bias_bound(s2, 1.0, 8) == pytest.approx(3 * math.sqrt(3) * math.sqrt((4 + math.log(8)) / 32))
    s15 = DivergenceSpec.cressie_read(1.5, 1.0)
    expect = 3 * (1 + 0.75) ** (2 / 3) * (1 / 8 + 1 / (4 * 1 * 8)) ** (1 / 3)
    assert sampling_bias_bound(s15, 1.0, 8) == pytest.approx(expect, rel=1e-14)

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gflab import DipolePotential, GaussianPotential, Lattice, SdeConfig
from gflab.bounds import (
    FAIL,
    PASS,
    SKIPPED,
    SKIPPED_VACUOUS,
    McBudget,
    check_complex_bounds,
    check_contraction,
    check_exp_phi_bounds,
    check_q_sandwich,
    check_variance_bounds,
    comparison_form,
    estimate_kappa_p,
    make_check,
    remainder_scaling,
)
from gflab.lattice import dense_gradient_matrix


def test_make_check_margins():
    c = make_check("x", 1.0, 0.1, 1.2, 0.0)
    assert c.margin == pytest.approx(2.0) and c.verdict == PASS
    assert make_check("x", 1.5, 0.1, 1.2, 0.0).verdict == FAIL
    assert make_check("x", 1.25, 0.1, 1.2, 0.0).verdict == PASS
    exact = make_check("x", 1.0, 0.0, 1.0, 0.0)
    assert exact.margin == math.inf and exact.passed
    assert make_check("x", 1.0 + 1e-6, 0.0, 1.0, 0.0).margin == -math.inf


def test_comparison_form_dense(rng):
    lat = Lattice(2, 4)
    D = dense_gradient_matrix(lat)
    f = rng.standard_normal(lat.vector_shape)
    c, m2 = 1.7, 0.3
    fv = f.reshape(-1)
    ref = fv @ D @ np.linalg.solve(c * D.T @ D + m2 * np.eye(lat.n_sites), D.T @ fv)
    assert comparison_form(lat, f, None, m2, c) == pytest.approx(ref, rel=1e-10)


def test_gaussian_sandwich_is_saturated(rng):
    lat = Lattice(2, 8)
    cfg = SdeConfig(lat, GaussianPotential(2, 1.0), 1.0, 0.5)
    H = 0.3 * rng.standard_normal((3,) + lat.vector_shape)
    for lo, hi in check_q_sandwich(cfg, H):
        assert lo.passed and hi.passed
        assert lo.rhs == pytest.approx(lo.lhs, rel=1e-10)
        assert hi.lhs == pytest.approx(hi.rhs, rel=1e-10)


def test_variance_bounds_gaussian(rng):
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2, 1.0), 1.0, 0.5, dt=0.5, scheme="mala")
    a = rng.standard_normal(lat.vector_shape)
    lo, hi = check_variance_bounds(cfg, a, McBudget(n_steps=2000, n_chains=16, seed=1))
    assert lo.passed and hi.passed
    assert lo.lhs == pytest.approx(hi.rhs)


def test_x1_vacuity_trigger(rng):
    lat = Lattice(2, 4)
    pot = DipolePotential(2, 0.3)
    cc = pot.convexity_constants()
    lam, Lam = cc.lam, cc.Lam
    # the smallest eta with Lam eta >= (lam - eta)^2
    eta_star = ((2 * lam + Lam) - math.sqrt((2 * lam + Lam) ** 2 - 4 * lam**2)) / 2
    h = 1e-3 * (rng.standard_normal(lat.vector_shape) + 1j * rng.standard_normal(lat.vector_shape))
    for eta, vac in ((0.5 * eta_star, False), (1.05 * eta_star, True)):
        if (lam - eta) * pot.strip_constants(eta).delta <= 1e-2:
            pytest.skip("strip too narrow")
        cfg = SdeConfig(lat, pot, 1.0, 0.5, h=h, dt=0.1, eta=eta)
        checks = check_complex_bounds(cfg, h, McBudget(n_steps=20, n_chains=2, n_nodes=2, seed=0), eta=eta)
        x1 = next(c for c in checks if c.name == "X1")
        assert (x1.verdict == SKIPPED_VACUOUS) == vac
        assert vac == (Lam * eta >= (lam - eta) ** 2)


def test_complex_radius_skip():
    lat = Lattice(2, 4)
    pot = DipolePotential(2, 0.3)
    cfg = SdeConfig(lat, pot, 1.0, 0.5, dt=0.1)
    h = np.zeros(lat.vector_shape, dtype=complex)
    h[0, 0, 0] = 100j
    checks = check_complex_bounds(cfg, h, eta=0.05)
    assert [c.verdict for c in checks] == [SKIPPED, SKIPPED, SKIPPED]


def test_gaussian_complex_bounds_exact(rng):
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2, 1.0), 1.0, 0.5)
    h = 0.2 * rng.standard_normal(lat.vector_shape) + 0.05j * rng.standard_normal(lat.vector_shape)
    checks = check_complex_bounds(cfg, h, eta=0.05)
    assert all(c.verdict in (PASS, SKIPPED_VACUOUS) for c in checks)


@pytest.mark.parametrize("d,L", [(2, 8), (3, 4)])
def test_kappa2_at_most_one(d, L):
    lat = Lattice(d, L)
    for m2 in (0.0, 0.5):
        est = estimate_kappa_p(lat, m2, 2.0, n_probes=8)
        assert est.kappa_p_lower <= 1 + 1e-9
    assert estimate_kappa_p(lat, 0.0, 2.0, n_probes=8).kappa_p_lower > 0.99


def test_kappa_p_is_lower_bound_of_dense_norm():
    lat = Lattice(1, 8)
    D = dense_gradient_matrix(lat)
    T = D @ np.linalg.pinv(D.T @ D) @ D.T
    est = estimate_kappa_p(lat, 0.0, 4.0, n_probes=16)
    # p = 4 operator norm bounded by the max of the 1- and inf-norm (Riesz-Thorin)
    assert est.kappa_p_lower <= max(np.abs(T).sum(0).max(), np.abs(T).sum(1).max()) + 1e-12
    assert est.kappa_p_lower >= 1 - 1e-9


def test_contraction_gaussian_exact():
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2, 1.0), 1.0, 0.5)
    c = check_contraction(cfg, n_pairs=4, dt=1e-2, T=1.0)
    assert c.passed
    # unit Gaussian: the gradient difference decays deterministically by exp(-T/2)
    assert c.lhs == pytest.approx(math.exp(-0.5), rel=1e-9)


@given(st.floats(0.5, 5.0), st.floats(0.1, 2.0))
def test_remainder_scaling_recovers_power(power, c):
    s = [0.25, 0.5, 1.0]
    v = [c * x**power for x in s]
    res = remainder_scaling("r", s, v, [1e-3 * x for x in v], power, 1e-6)
    assert res.verdict == PASS and res.slope == pytest.approx(power, abs=1e-8)


def test_remainder_scaling_zero_value_fails():
    assert remainder_scaling("r", [1, 2], [0.0, 1.0], [1, 1], 3, 0.3).verdict == FAIL


def test_exp_phi_gaussian_saturates():
    lat = Lattice(3, 4)
    cfg = SdeConfig(lat, GaussianPotential(3, 1.0), 1.0, 0.5)
    lo, hi = check_exp_phi_bounds(cfg, 0.7)
    assert lo.passed and hi.passed
    assert lo.lhs == pytest.approx(lo.rhs, rel=1e-9) and hi.lhs == pytest.approx(hi.rhs, rel=1e-9)

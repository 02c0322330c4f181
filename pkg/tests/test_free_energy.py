import numpy as np
import pytest

from gflab import DipolePotential, GaussianPotential, Lattice, SdeConfig, run_chain
from gflab.errors import OracleFailureError, ResourceLimitError, UnsupportedCapabilityError
from gflab.free_energy import (
    exp_moment,
    gaussian_q_exact,
    gaussian_response,
    mean_gradient,
    q_brute_force,
    q_thermo_integration,
    quadrature_expectation,
    schwinger_dyson_residual,
    ti_draws,
)
from gflab.lattice import dense_gradient_matrix, divergence, gradient_form


def _dense_q(lat, A, m2, h):
    G = dense_gradient_matrix(lat)
    Ablk = np.kron(np.eye(lat.n_sites), A)
    M = G.T @ Ablk @ G + m2 * np.eye(lat.n_sites)
    b = G.T @ h.ravel()
    return -0.5 * b @ np.linalg.solve(M, b)


@pytest.mark.parametrize("A", [np.eye(2), np.diag([0.4, 0.9]), np.array([[1.0, 0.3], [0.3, 0.7]])])
def test_gaussian_q_matches_dense(A, rng):
    lat = Lattice(2, 4)
    h = rng.standard_normal(lat.vector_shape)
    assert gaussian_q_exact(lat, A, 0.5, h).value == pytest.approx(_dense_q(lat, A, 0.5, h), rel=1e-12)
    assert gaussian_q_exact(lat, A, 0.5, h, method="dense").value == pytest.approx(_dense_q(lat, A, 0.5, h), rel=1e-12)


def test_gaussian_q_is_bilinear_for_complex(rng):
    lat = Lattice(2, 4)
    R, I = rng.standard_normal((2,) + lat.vector_shape)
    val = gaussian_q_exact(lat, 1.0, 0.5, R + 1j * I).value
    expect = -0.5 * (gradient_form(lat, R, None, 0.5) - gradient_form(lat, I, None, 0.5)
                     + 2j * gradient_form(lat, R, I, 0.5))
    assert val == pytest.approx(expect, rel=1e-12)


def test_gaussian_response_is_minus_mean_gradient(rng):
    lat = Lattice(2, 4)
    h = rng.standard_normal(lat.vector_shape)
    r = gaussian_response(lat, np.eye(2), 0.5, h)
    out = quadrature_expectation(Lattice(2, 2), GaussianPotential(2), 1.0, 0.5, h[:2, :2],
                                 {"g": lambda om, phi: om}, nodes=24)
    np.testing.assert_allclose(out["g"], -gaussian_response(Lattice(2, 2), np.eye(2), 0.5, h[:2, :2]), atol=1e-9)
    assert r.shape == lat.vector_shape


@pytest.mark.parametrize("d,L", [(1, 2), (1, 4), (2, 2), (1, 6)])
def test_brute_force_matches_gaussian(d, L, rng):
    lat = Lattice(d, L)
    h = 0.7 * rng.standard_normal(lat.vector_shape)
    pot = GaussianPotential(d, 0.8)
    bf = q_brute_force(lat, pot, 0.6, 0.5, h, nodes=20, check_nodes=30)
    assert bf.value == pytest.approx(gaussian_q_exact(lat, 0.8, 0.5, h).value, abs=1e-9)
    assert bf.se == 0.0


def test_brute_force_complex_gaussian(rng):
    lat = Lattice(2, 2)
    h = 0.4 * rng.standard_normal(lat.vector_shape) + 0.2j * rng.standard_normal(lat.vector_shape)
    bf = q_brute_force(lat, GaussianPotential(2), 1.0, 0.5, h, nodes=20, check_nodes=30)
    assert abs(bf.value - gaussian_q_exact(lat, 1.0, 0.5, h).value) < 1e-9


def test_brute_force_weights_and_ring_agree(rng):
    lat = Lattice(1, 4)
    pot = DipolePotential(1, 0.6)
    h = 0.5 * rng.standard_normal(lat.vector_shape)
    grid = q_brute_force(lat, pot, 1.0, 0.5, h, nodes=24, check_nodes=32)
    two = Lattice(1, 2)
    mass = q_brute_force(two, pot, 1.0, 0.5, h[:2], nodes=120, check_nodes=160, weight="mass")
    assert q_brute_force(two, pot, 1.0, 0.5, h[:2]).value == pytest.approx(mass.value, abs=1e-6)
    from gflab.free_energy import _ring_logz
    ring = -(_ring_logz(lat, pot, 1.0, 0.5, h, 48, "free") - _ring_logz(lat, pot, 1.0, 0.5, 0 * h, 48, "free"))
    assert ring == pytest.approx(grid.value, abs=1e-8)


def test_brute_force_limits(rng):
    with pytest.raises(ResourceLimitError):
        q_brute_force(Lattice(2, 4), DipolePotential(2, 0.3), 1.0, 0.5, np.zeros((4, 4, 2)))
    lat = Lattice(2, 2)
    with pytest.raises(OracleFailureError):
        q_brute_force(lat, DipolePotential(2, 0.9), 0.05, 0.5, 3.0 * rng.standard_normal(lat.vector_shape),
                      nodes=2, check_nodes=3)


def test_schwinger_dyson_quadrature(rng):
    lat = Lattice(2, 2)
    pot = DipolePotential(2, 0.5)
    h = 0.5 * rng.standard_normal(lat.vector_shape)
    out = quadrature_expectation(lat, pot, 1.0, 0.5, h, {
        "dW": lambda om, phi: 0.5 * phi + divergence(lat, h + pot.grad(om)),
    }, nodes=30)
    np.testing.assert_allclose(out["dW"], 0.0, atol=1e-9)


def test_thermo_integration_gaussian_is_exact(rng):
    lat = Lattice(2, 8)
    h = 0.5 * rng.standard_normal(lat.vector_shape)
    cfg = SdeConfig(lat, GaussianPotential(2), 1.0, 0.5, h=h, dt=0.5, scheme="mala")
    res = q_thermo_integration(cfg, 20, 4, 4, burn_in=5, seed=1)
    assert res.value == pytest.approx(gaussian_q_exact(lat, 1.0, 0.5, h).value, rel=1e-12)
    assert res.se < 1e-12


def test_thermo_integration_matches_brute_force(rng):
    lat = Lattice(2, 2)
    pot = DipolePotential(2, 0.6)
    h = 0.6 * rng.standard_normal(lat.vector_shape)
    cfg = SdeConfig(lat, pot, 1.0, 0.5, h=h, dt=1.0, scheme="mala")
    ti = q_thermo_integration(cfg, 400, 200, 8, seed=2)
    bf = q_brute_force(lat, pot, 1.0, 0.5, h)
    assert abs(ti.value - bf.value) <= max(3 * ti.se, 1e-3)


def test_direct_and_drift_estimators_agree(rng):
    lat = Lattice(2, 4)
    h = 0.5 * rng.standard_normal(lat.vector_shape)
    cfg = SdeConfig(lat, DipolePotential(2, 0.4), 1.0, 0.5, h=h, dt=1.0, scheme="mala")
    a = mean_gradient(cfg, 1000, 32, seed=3, estimator="drift")
    b = mean_gradient(cfg, 1000, 32, seed=4, estimator="direct")
    z = (a.value - b.value) / np.hypot(a.se, b.se)
    assert np.mean(np.abs(z) < 3) > 0.95
    assert np.mean(a.se) < np.mean(b.se)


def test_ti_draws_batch_matches_single(rng):
    lat = Lattice(2, 4)
    # V'' equal to the stiffness makes every drift draw exact
    pot = GaussianPotential(2, 1.0)
    H = 0.3 * rng.standard_normal((3,) + lat.vector_shape)
    cfg = SdeConfig(lat, pot, 1.0, 0.5, dt=0.5, scheme="mala")
    draws, _ = ti_draws(cfg, H, 30, 4, 4, burn_in=5, seed=0)
    assert draws.shape[1] == 3
    for j in range(3):
        assert draws[:, j].mean() == pytest.approx(gaussian_q_exact(lat, 1.0, 0.5, H[j]).value, rel=1e-10)


def test_exp_moment_gaussian(rng):
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2), 1.0, 0.5, dt=1.0, scheme="mala")
    a = 0.3 * rng.standard_normal(lat.vector_shape)
    est = exp_moment(cfg, a, 2000, 32, seed=5)
    expect = np.exp(0.5 * gradient_form(lat, a, None, 0.5))
    assert abs(est.mean - expect) <= 3 * est.se
    with pytest.raises(UnsupportedCapabilityError):
        exp_moment(SdeConfig(lat, GaussianPotential(2), 1.0, 0.5, h=a * 0.01j), a, 10)


def test_schwinger_dyson_residual_on_chain(rng):
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, DipolePotential(2, 0.5), 1.0, 0.5, h=0.3 * rng.standard_normal(lat.vector_shape),
                    dt=1.0, scheme="mala")
    tr = run_chain(cfg, 2000, n_chains=16, seed=6)
    sd = schwinger_dyson_residual(tr)
    z = np.abs(sd.mean) / sd.se
    assert np.max(z) < 4

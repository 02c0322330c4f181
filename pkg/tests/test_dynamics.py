import numpy as np
import pytest

from gflab import DipolePotential, GaussianPotential, Lattice, SdeConfig, run_chain
from gflab.dynamics import (
    LinearPropagator,
    action,
    drift_preconditioned,
    drift_standard,
    init_state,
    noise_preconditioned,
    step,
)
from gflab.errors import AdmissibilityError, DomainError, UnsupportedCapabilityError
from gflab.lattice import gradient, gradient_form, helmholtz_solve, pairing
from gflab.rng import make_rng


def _cfg(pot=None, L=4, **kw):
    lat = Lattice(2, L)
    return SdeConfig(lat, pot or DipolePotential(2, 0.3), kw.pop("eps", 1.0), kw.pop("m2", 0.5), **kw)


def test_drift_is_half_action_gradient(rng):
    lat = Lattice(2, 4)
    h = 0.3 * rng.standard_normal(lat.vector_shape)
    cfg = _cfg(h=h)
    phi = rng.standard_normal(lat.shape)
    fd = np.zeros(lat.shape)
    eps = 1e-6
    for x in np.ndindex(*lat.shape):
        e = np.zeros(lat.shape)
        e[x] = eps
        fd[x] = (action(cfg, phi + e) - action(cfg, phi - e)) / (2 * eps)
    np.testing.assert_allclose(drift_standard(cfg, phi), -0.5 * fd, atol=1e-7)


def test_drift_zero_at_rest():
    cfg = _cfg()
    assert np.all(drift_standard(cfg, np.zeros(cfg.lattice.shape)) == 0)
    assert np.all(drift_preconditioned(cfg, np.zeros(cfg.lattice.shape)) == 0)


def test_preconditioned_drift_is_covariance_times_drift(rng):
    lat = Lattice(2, 8)
    cfg = SdeConfig(lat, DipolePotential(2, 0.4), 1.0, 0.3, h=0.2 * rng.standard_normal(lat.vector_shape),
                    stiffness=1.2)
    phi = rng.standard_normal(lat.shape)
    expect = helmholtz_solve(lat, drift_standard(cfg, phi), 0.3, 1.2)
    np.testing.assert_allclose(drift_preconditioned(cfg, phi), expect, atol=1e-12)


def test_noise_mode_variance():
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2), 0.7, 0.5, dt=0.1, scheme="euler_maruyama")
    n = 100_000
    xi = noise_preconditioned(cfg, make_rng(5), (n,) + lat.shape)
    xk = np.fft.fftn(xi, axes=(1, 2))
    power = np.abs(xk) ** 2 / lat.n_sites
    mean, se = power.mean(0), power.std(0, ddof=1) / np.sqrt(n)
    expect = 0.7 * 0.1 / (lat.spectral.sigma(False) + 0.5)
    # every mode within 4 SE (16 modes at 3 SE each would leave a few percent false alarms)
    assert np.all(np.abs(mean - expect) <= 4 * se)


def test_seed_determinism():
    cfg = _cfg(dt=0.1)
    a = run_chain(cfg, 20, burn_in=5, n_chains=3, seed=42)
    b = run_chain(cfg, 20, burn_in=5, n_chains=3, seed=42)
    c = run_chain(cfg, 20, burn_in=5, n_chains=3, seed=43)
    assert np.array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert a.samples.shape == (20, 3, 4, 4) and a.n_samples == 20


def test_thinning_and_times():
    cfg = _cfg(dt=0.1)
    tr = run_chain(cfg, 20, burn_in=0, thin=4, n_chains=2, seed=1)
    assert tr.samples.shape[0] == 5
    np.testing.assert_allclose(tr.times, 0.4 * np.arange(1, 6))
    with pytest.raises(DomainError):
        run_chain(cfg, 10, thin=0)


def test_euler_vs_exponential_is_second_order(rng):
    lat = Lattice(2, 8)
    phi = rng.standard_normal(lat.shape)
    gaps = []
    for dt in (0.04, 0.02, 0.01):
        base = dict(lattice=lat, potential=DipolePotential(2, 0.3), epsilon=1.0, m2=0.5, dt=dt)
        out = []
        for scheme in ("euler_maruyama", "exponential_euler"):
            lin = LinearPropagator(SdeConfig(scheme=scheme, **base))
            out.append(lin.decay * phi + lin.solve(lin.nonlinear_source(phi)))
        gaps.append(np.max(np.abs(out[0] - out[1])))
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    np.testing.assert_allclose(ratios, 4.0, rtol=0.05)


def test_dense_and_spectral_paths_agree(rng):
    lat = Lattice(2, 8)
    cfg = SdeConfig(lat, DipolePotential(2, 0.3), 1.0, 0.5, dt=0.3)
    lin = LinearPropagator(cfg)
    assert lin.dense
    r, xi = rng.standard_normal((2, 3) + lat.shape)
    np.testing.assert_allclose(lin.solve(r), lin._spectral_solve(r), atol=1e-12)
    np.testing.assert_allclose(lin.noise(xi), lin._spectral_noise(xi), atol=1e-12)


def test_exponential_scheme_exact_for_unit_gaussian():
    # with V'' = stiffness the nonlinear source vanishes and each step is an exact OU update
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2), 1.0, 0.5, dt=1.0)
    tr = run_chain(cfg, 4000, burn_in=20, n_chains=8, seed=3)
    xk = np.fft.fftn(tr.samples, axes=(2, 3))
    power = (np.abs(xk) ** 2 / lat.n_sites).reshape(-1, lat.n_sites)
    expect = 1.0 / (lat.spectral.sigma(False).ravel() + 0.5)
    # consecutive samples are correlated with exp(-1/2); inflate the naive SE accordingly
    se = power.std(0, ddof=1) / np.sqrt(power.shape[0]) * np.sqrt((1 + np.exp(-1)) / (1 - np.exp(-1)))
    assert np.all(np.abs(power.mean(0) - expect) <= 4 * se)


def test_mala_stationary_gaussian_variance(rng):
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2, 0.5), 1.0, 0.5, dt=1.0, scheme="mala")
    a = rng.standard_normal(lat.vector_shape)
    tr = run_chain(cfg, 2000, n_chains=32, seed=9, observe=lambda p: pairing(lat, a, gradient(lat, p)))
    x = tr.samples
    bm = x.reshape(20, 100, 32).mean(1).mean(0)
    bm2 = (x**2).reshape(20, 100, 32).mean(1).mean(0)
    var = bm2 - bm**2
    exact = gradient_form(lat, a, None, 0.5, 0.5)
    est, se = var.mean(), var.std(ddof=1) / np.sqrt(32)
    assert abs(est - exact) <= 3 * se
    assert 0.5 < tr.acceptance.mean() <= 1.0


def test_mala_rejects_complex_field():
    lat = Lattice(2, 4)
    h = np.zeros(lat.vector_shape, complex)
    h[0, 0, 0] = 0.01j
    with pytest.raises(UnsupportedCapabilityError):
        SdeConfig(lat, DipolePotential(2, 0.3), 1.0, 0.5, h=h, scheme="mala")


def test_complex_admissibility():
    lat = Lattice(2, 4)
    h = np.zeros(lat.vector_shape, complex)
    h[0, 0, 0] = 0.01j
    cfg = SdeConfig(lat, DipolePotential(2, 0.3), 1.0, 0.5, h=h)
    assert cfg.is_complex and cfg.eta is not None
    h[0, 0, 0] = 5.0j
    with pytest.raises(AdmissibilityError):
        SdeConfig(lat, DipolePotential(2, 0.3), 1.0, 0.5, h=h)


def test_config_validation():
    lat = Lattice(2, 4)
    with pytest.raises(DomainError):
        SdeConfig(lat, DipolePotential(2, 0.3), 1.0, 0.0)
    with pytest.raises(DomainError):
        SdeConfig(lat, DipolePotential(3, 0.3), 1.0, 0.5)
    with pytest.raises(DomainError):
        SdeConfig(lat, DipolePotential(2, 0.3), 1.0, 0.5, scheme="leapfrog")
    with pytest.raises(AdmissibilityError):
        SdeConfig(lat, GaussianPotential(2, 3.0), 1.0, 0.5)


def test_step_advances_in_place():
    cfg = _cfg(dt=0.1)
    st = init_state(cfg, 2, seed=0)
    step(st, cfg)
    assert st.n_step == 1 and st.t == pytest.approx(0.1)
    assert st.phi.shape == (2, 4, 4)


def test_config_hash_tracks_field(rng):
    lat = Lattice(2, 4)
    a = _cfg()
    b = a.replace(h=0.1 * rng.standard_normal(lat.vector_shape))
    assert a.hash() != b.hash() and a.hash() == _cfg().hash()

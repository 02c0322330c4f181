import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gflab.errors import AdmissibilityError, DomainError, StripViolationError, UnsupportedCapabilityError
from gflab.potentials import (
    ConvexityConstants,
    CustomPotential,
    DipolePotential,
    GaussianPotential,
    contraction_factor,
)


def _fd_grad(V, w, h=1e-6):
    out = np.zeros_like(w)
    for j in range(w.shape[-1]):
        e = np.zeros(w.shape[-1])
        e[j] = h
        out[..., j] = (V.value(w + e) - V.value(w - e)) / (2 * h)
    return out


def test_dipole_at_origin():
    V = DipolePotential(2, 0.5)
    w = np.zeros(2)
    assert V.raw_value(w) == pytest.approx(-1.0)
    assert V.value(w) == 0.0
    np.testing.assert_array_equal(V.grad(w), 0.0)
    np.testing.assert_allclose(V.hess(w), 1.5 * np.eye(2))


def test_dipole_constants():
    assert DipolePotential(2, 0.5).convexity_constants() == ConvexityConstants(0.5, 1.5)
    assert DipolePotential(3, 0.0).convexity_constants() == ConvexityConstants(1.0, 1.0)
    sc = DipolePotential(2, 0.5).strip_constants(0.1)
    assert sc.delta == pytest.approx(0.18232, abs=1e-5)
    assert sc.M == 0.5 and sc.M_eta == pytest.approx(0.5 * math.cosh(sc.delta))


def test_dipole_admissibility():
    with pytest.raises(AdmissibilityError):
        DipolePotential(2, 1.0)
    with pytest.raises(DomainError):
        DipolePotential(2, 0.3).strip_constants(0.0)


@pytest.mark.parametrize("V", [DipolePotential(2, 0.3), GaussianPotential(2, [[1.0, 0.3], [0.3, 0.8]])])
def test_gradient_finite_differences(V, rng):
    w = rng.uniform(-2, 2, (50, 2))
    np.testing.assert_allclose(V.grad(w), _fd_grad(V, w), atol=1e-8)


def test_dipole_hessian_and_third_derivative_fd(rng):
    V = DipolePotential(3, 0.3)
    w = rng.uniform(-2, 2, (20, 3))
    u, v = rng.standard_normal((2, 20, 3))
    h = 1e-6
    fd2 = (V.grad(w + h * u) - V.grad(w - h * u)) / (2 * h)
    np.testing.assert_allclose(V.hess_apply(w, u), fd2, atol=1e-8)
    np.testing.assert_allclose(np.einsum("nij,nj->ni", V.hess(w), u), V.hess_apply(w, u), atol=1e-14)
    fd3 = (V.hess_apply(w + h * v, u) - V.hess_apply(w - h * v, u)) / (2 * h)
    np.testing.assert_allclose(V.third_apply(w, u, v), fd3, atol=1e-8)


def test_dipole_strip_control(rng):
    a, eta = 0.3, 0.05
    V = DipolePotential(2, a)
    delta = V.strip_constants(eta).delta
    x = rng.uniform(-np.pi, np.pi, (1000, 2))
    y = rng.standard_normal((1000, 2))
    y *= (rng.uniform(0, 1, (1000, 1)) * delta) / np.linalg.norm(y, axis=1, keepdims=True)
    w = x + 1j * y
    diff = V.hess(w) - V.hess(x)
    assert np.max(np.abs(np.linalg.eigvals(diff))) < eta


def test_holomorphic_extension_matches_series(rng):
    V = DipolePotential(2, 0.4)
    w = rng.uniform(-1, 1, (10, 2)) + 0.1j * rng.uniform(-1, 1, (10, 2))
    z = w[..., 0]
    expect = 0.5 * (w**2).sum(-1) - 0.4 * (np.cos(w).sum(-1) - 2)
    np.testing.assert_allclose(V.value(w), expect, atol=1e-14)
    assert np.iscomplexobj(V.grad(w)) and z.shape == (10,)


def test_eval_strip_guard():
    V = DipolePotential(2, 0.3)
    w = np.array([[0.1 + 0.5j, 0.0]])
    with pytest.raises(StripViolationError):
        V.eval(w, 1, strip=0.2)
    assert V.eval(w, 1, strip=1.0).shape == (1, 2)
    with pytest.raises(DomainError):
        V.eval(np.zeros(3), 0)


def test_gaussian_validation():
    with pytest.raises(AdmissibilityError):
        GaussianPotential(2, [[1.0, 2.0], [2.0, 1.0]])
    with pytest.raises(AdmissibilityError):
        GaussianPotential(2, [[1.0, 0.1], [0.0, 1.0]])
    V = GaussianPotential(2, np.diag([0.4, 0.9]))
    assert V.convexity_constants() == ConvexityConstants(0.4, 0.9)
    assert V.strip_constants(0.1).M == 0.0


def test_custom_potential_grid_constants():
    a = 0.2
    V = CustomPotential(
        1,
        value=lambda w: 0.5 * w[..., 0] ** 2 + a * (1 - np.cos(w[..., 0])),
        grad=lambda w: w + a * np.sin(w),
        hess=lambda w: (1 + a * np.cos(w))[..., None],
    )
    cc = V.convexity_constants()
    assert cc.lam == pytest.approx(0.8) and cc.Lam == pytest.approx(1.2)
    with pytest.raises(UnsupportedCapabilityError):
        V.third_apply(np.zeros(1), np.zeros(1), np.zeros(1))
    with pytest.raises(UnsupportedCapabilityError):
        V.eval(np.zeros(1) + 0.1j, 1)


@given(st.floats(-0.95, 0.95), st.floats(0.5, 3.0))
def test_contraction_factor_below_one(a, k):
    cc = DipolePotential(2, a).convexity_constants()
    c = contraction_factor(cc, k)
    if cc.Lam < 2 * k:
        assert 0 <= c < 1
    assert c == pytest.approx(max(abs(1 - cc.lam / k), abs(cc.Lam / k - 1)))

"""Single-site gradient potentials and their convexity/analyticity constants.

A potential acts on gradient vectors ``omega`` stored with the component axis
last, so ``omega`` of shape ``(..., d)`` evaluates to an array of shape
``(...)``.  Lattice vector fields ``(..., L, ..., L, d)`` are accepted as is.

Two families are built in:

* :class:`GaussianPotential`, ``V(w) = w.A.w / 2`` for a symmetric positive
  definite matrix ``A``;
* :class:`DipolePotential`, ``V(w) = |w|^2/2 - a sum_j cos w_j``, shifted by
  the constant ``a d`` so that ``V(0) = 0``.  It is uniformly convex for
  ``|a| < 1`` and entire, so it extends to complex gradients.

:class:`CustomPotential` wraps user callables; it must supply derivatives
(no automatic differentiation) and only real arguments are supported.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product
from typing import Callable

import numpy as np

from .lattice import component_sum
from .errors import AdmissibilityError, DomainError, StripViolationError, UnsupportedCapabilityError

__all__ = [
    "ConvexityConstants",
    "StripConstants",
    "Potential",
    "GaussianPotential",
    "DipolePotential",
    "CustomPotential",
    "STRIP_UNBOUNDED",
    "contraction_factor",
]

# Strip half-width reported when the Hessian is constant (no analytic constraint).
STRIP_UNBOUNDED = 1.0e300


@dataclass(frozen=True)
class ConvexityConstants:
    """Bounds ``lam * I <= V''(w) <= Lam * I`` valid for all real ``w``."""

    lam: float
    Lam: float


@dataclass(frozen=True)
class StripConstants:
    """Analytic control of ``V`` on the strip ``|Im w| < delta``.

    On that strip ``||V''(w) - V''(Re w)|| < eta`` and the third derivative
    is bounded by ``M_eta``; ``M`` bounds it on real arguments.
    """

    eta: float
    delta: float
    M: float
    M_eta: float


def contraction_factor(cc: ConvexityConstants, stiffness: float = 1.0) -> float:
    """Operator-norm bound of ``I - V''/stiffness`` over real gradients."""
    return max(abs(1.0 - cc.lam / stiffness), abs(cc.Lam / stiffness - 1.0))


class Potential:
    """Interface shared by all potentials."""

    d: int
    is_gaussian: bool = False
    is_holomorphic: bool = False

    def value(self, omega: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, omega: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hess(self, omega: np.ndarray) -> np.ndarray:
        """Full Hessian, shape ``(..., d, d)``."""
        raise NotImplementedError

    def hess_apply(self, omega: np.ndarray, u: np.ndarray) -> np.ndarray:
        """``V''(omega) u`` without forming the matrix."""
        return np.einsum("...ij,...j->...i", self.hess(omega), u)

    def third_apply(self, omega: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Vector ``V'''(omega)[., u, v]``."""
        raise NotImplementedError

    def third(self, omega, u, v, w) -> np.ndarray:
        return component_sum(self.third_apply(omega, u, v) * w)

    def convexity_constants(self) -> ConvexityConstants:
        raise NotImplementedError

    def strip_constants(self, eta: float) -> StripConstants:
        raise UnsupportedCapabilityError(f"{type(self).__name__} has no analytic strip control")

    def eval(self, omega: np.ndarray, order: int = 0, strip: float | None = None):
        """Evaluate ``V`` or one of its derivatives (``order`` in 0..3).

        Order 3 returns a callable ``(u, v) -> V'''[., u, v]``.  When ``omega``
        is complex and ``strip`` is given, the imaginary part must satisfy
        ``|Im omega| < strip`` at every point.
        """
        omega = np.asarray(omega)
        if omega.shape[-1] != self.d:
            raise DomainError(f"gradient has {omega.shape[-1]} components, potential expects {self.d}")
        if np.iscomplexobj(omega):
            if not self.is_holomorphic:
                raise UnsupportedCapabilityError(f"{type(self).__name__} does not accept complex arguments")
            if strip is not None:
                check_strip(omega, strip)
        if order == 0:
            return self.value(omega)
        if order == 1:
            return self.grad(omega)
        if order == 2:
            return self.hess(omega)
        if order == 3:
            return lambda u, v: self.third_apply(omega, u, v)
        raise DomainError(f"derivative order must be 0..3, got {order}")

    def describe(self) -> dict:
        raise NotImplementedError


def check_strip(omega: np.ndarray, strip: float) -> None:
    im = np.sqrt(np.sum(omega.imag**2, axis=-1))
    worst = float(im.max()) if im.size else 0.0
    if not worst < strip:
        raise StripViolationError(f"|Im grad phi| reached {worst:.6g}, strip half-width is {strip:.6g}")


class GaussianPotential(Potential):
    """Quadratic potential ``w.A.w / 2``; ``A`` may be a scalar or a matrix."""

    is_gaussian = True
    is_holomorphic = True

    def __init__(self, d: int, A=1.0):
        self.d = int(d)
        A = np.asarray(A, dtype=float)
        if A.ndim == 0:
            A = float(A) * np.eye(self.d)
        if A.shape != (self.d, self.d):
            raise DomainError(f"matrix must be {self.d}x{self.d}, got {A.shape}")
        if not np.allclose(A, A.T, atol=1e-12):
            raise AdmissibilityError("matrix must be symmetric")
        self.A = 0.5 * (A + A.T)
        eig = np.linalg.eigvalsh(self.A)
        if eig[0] <= 0:
            raise AdmissibilityError(f"matrix must be positive definite, smallest eigenvalue {eig[0]:.3g}")
        self._eig = eig

    @property
    def is_isotropic(self) -> bool:
        return bool(np.allclose(self.A, self.A[0, 0] * np.eye(self.d)))

    def value(self, omega):
        return 0.5 * component_sum((omega @ self.A) * omega)

    def grad(self, omega):
        return omega @ self.A

    def hess(self, omega):
        return np.broadcast_to(self.A, np.shape(omega)[:-1] + (self.d, self.d))

    def hess_apply(self, omega, u):
        return u @ self.A

    def third_apply(self, omega, u, v):
        return np.zeros(np.broadcast_shapes(np.shape(omega), np.shape(u), np.shape(v)), dtype=np.result_type(omega, u, v))

    def convexity_constants(self):
        return ConvexityConstants(float(self._eig[0]), float(self._eig[-1]))

    def strip_constants(self, eta):
        if eta <= 0:
            raise DomainError("eta must be positive")
        return StripConstants(float(eta), STRIP_UNBOUNDED, 0.0, 0.0)

    def describe(self):
        return {"kind": "gaussian", "d": self.d, "A": self.A.tolist()}


class DipolePotential(Potential):
    """``|w|^2/2 - a sum_j cos w_j + a d`` with ``|a| < 1``."""

    is_holomorphic = True

    def __init__(self, d: int, a: float):
        self.d = int(d)
        self.a = float(a)
        if not abs(self.a) < 1.0:
            raise AdmissibilityError(f"coupling must satisfy |a| < 1 for uniform convexity, got {a}")
        # raw potential at the origin; subtracted so that V(0) = 0
        self.offset = -self.a * self.d

    def value(self, omega):
        return component_sum(0.5 * omega * omega - self.a * (np.cos(omega) - 1.0))

    def raw_value(self, omega):
        return self.value(omega) + self.offset

    def grad(self, omega):
        return omega + self.a * np.sin(omega)

    def hess_diag(self, omega):
        return 1.0 + self.a * np.cos(omega)

    def hess(self, omega):
        diag = self.hess_diag(omega)
        return diag[..., :, None] * np.eye(self.d)

    def hess_apply(self, omega, u):
        return (1.0 + self.a * np.cos(omega)) * u

    def third_apply(self, omega, u, v):
        return -self.a * np.sin(omega) * u * v

    def convexity_constants(self):
        return ConvexityConstants(1.0 - abs(self.a), 1.0 + abs(self.a))

    def strip_constants(self, eta):
        if eta <= 0:
            raise DomainError("eta must be positive")
        if self.a == 0.0:
            return StripConstants(float(eta), STRIP_UNBOUNDED, 0.0, 0.0)
        # |cos(x+iy) - cos x| <= sinh|y| <= e^{|y|} - 1 and |sin(x+iy)| <= cosh y
        delta = math.log1p(eta / abs(self.a))
        return StripConstants(float(eta), delta, abs(self.a), abs(self.a) * math.cosh(delta))

    def describe(self):
        return {"kind": "dipole", "d": self.d, "a": self.a}


class CustomPotential(Potential):
    """Potential from user callables acting on arrays of shape ``(..., d)``.

    ``hess`` must return ``(..., d, d)``; ``third_apply`` is optional and
    only needed by second-variation estimators.  Convexity constants are
    estimated from Hessian eigenvalues on the grid ``linspace(-pi, pi, n)^d``
    unless given explicitly.
    """

    def __init__(
        self,
        d: int,
        value: Callable,
        grad: Callable,
        hess: Callable,
        third_apply: Callable | None = None,
        constants: ConvexityConstants | None = None,
        grid_points: int = 17,
    ):
        self.d = int(d)
        self._value, self._grad, self._hess, self._third = value, grad, hess, third_apply
        self._constants = constants if constants is not None else self._grid_constants(grid_points)
        if self._constants.lam <= 0:
            raise AdmissibilityError(f"estimated convexity constant {self._constants.lam:.3g} is not positive")

    def _grid_constants(self, n: int) -> ConvexityConstants:
        axis = np.linspace(-np.pi, np.pi, n) if self.d <= 3 else np.linspace(-np.pi, np.pi, 5)
        pts = np.array(list(product(axis, repeat=self.d)))
        eig = np.linalg.eigvalsh(np.asarray(self._hess(pts)))
        return ConvexityConstants(float(eig[:, 0].min()), float(eig[:, -1].max()))

    def value(self, omega):
        return np.asarray(self._value(omega))

    def grad(self, omega):
        return np.asarray(self._grad(omega))

    def hess(self, omega):
        return np.asarray(self._hess(omega))

    def third_apply(self, omega, u, v):
        if self._third is None:
            raise UnsupportedCapabilityError("custom potential was built without a third derivative")
        return np.asarray(self._third(omega, u, v))

    def convexity_constants(self):
        return self._constants

    def describe(self):
        return {"kind": "custom", "d": self.d}

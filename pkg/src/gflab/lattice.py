"""Periodic lattice, discrete difference operators and spectral solvers.

Conventions
-----------
A scalar field on the torus ``(Z/LZ)^d`` is an array whose trailing ``d`` axes
are the lattice axes.  A vector field (e.g. a gradient) carries one more
trailing axis of length ``d`` holding the components, so its shape is
``(..., L, ..., L, d)``.  Any leading axes are batch axes (independent chains,
quadrature nodes, ...) and every operator here broadcasts over them.

The forward difference is ``grad(phi)_i(x) = phi(x + e_i) - phi(x)`` and the
divergence is its adjoint for the plain sum pairing
``[F, G] = sum_x F(x) . G(x)``::

    div(F)(x) = sum_i F_i(x - e_i) - F_i(x),

so that ``-Laplacian = div o grad`` is positive semidefinite with Fourier
symbol ``sigma(k) = sum_i 4 sin^2(pi k_i / L)``.  All inverse operators are
diagonalised with FFTs over the lattice axes; real inputs use the real FFT.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.fft as sfft

from .errors import DomainError

__all__ = [
    "Lattice",
    "SpectralCache",
    "gradient",
    "divergence",
    "neg_laplacian",
    "helmholtz_solve",
    "sqrt_inverse",
    "cz_apply",
    "gradient_form",
    "pairing",
    "lp_norm",
    "weighted_lp_norm",
    "dense_gradient_matrix",
    "dense_neg_laplacian",
    "window_coordinates",
    "site_sum",
    "component_sum",
]


class SpectralCache:
    """Fourier symbols of the difference operators for one lattice.

    Stores ``sigma(k)`` and the forward-difference multipliers
    ``e^{2 pi i k_i / L} - 1`` on both the full and the half (real FFT) grids.
    """

    def __init__(self, d: int, L: int):
        self.d = d
        self.L = L
        full = [np.fft.fftfreq(L) * L for _ in range(d)]
        half = full[:-1] + [np.fft.rfftfreq(L) * L]
        self.sigma_full, self.grad_full = self._symbols(full)
        self.sigma_half, self.grad_half = self._symbols(half)

    def _symbols(self, freqs):
        mesh = np.meshgrid(*freqs, indexing="ij")
        theta = [2.0 * np.pi * k / self.L for k in mesh]
        sigma = sum(4.0 * np.sin(t / 2.0) ** 2 for t in theta)
        grad = np.stack([np.exp(1j * t) - 1.0 for t in theta], axis=-1)
        return sigma, grad

    def sigma(self, real: bool) -> np.ndarray:
        return self.sigma_half if real else self.sigma_full

    def grad_symbol(self, real: bool) -> np.ndarray:
        return self.grad_half if real else self.grad_full


@dataclass(frozen=True)
class Lattice:
    """Periodic hypercubic lattice of side ``L`` in dimension ``d``.

    ``L`` must be even and at least 2.  ``d = 1`` is accepted for use with
    the brute-force oracles; large-scale estimators are intended for
    ``d >= 2`` and :attr:`oracle_only` flags the one-dimensional case.
    """

    d: int
    L: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"dimension must be a positive integer, got {self.d}")
        if int(self.L) != self.L or self.L < 2 or self.L % 2:
            raise DomainError(f"side length must be an even integer >= 2, got {self.L}")

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.L,) * self.d

    @property
    def vector_shape(self) -> tuple[int, ...]:
        return self.shape + (self.d,)

    @property
    def n_sites(self) -> int:
        return self.L**self.d

    @property
    def oracle_only(self) -> bool:
        return self.d == 1

    @property
    def scalar_axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d, 0))

    @property
    def vector_axes(self) -> tuple[int, ...]:
        return tuple(range(-self.d - 1, -1))

    @cached_property
    def spectral(self) -> SpectralCache:
        return SpectralCache(self.d, self.L)

    def coordinates(self) -> np.ndarray:
        """Integer site coordinates, shape ``(L, ..., L, d)``, row-major."""
        grids = np.meshgrid(*[np.arange(self.L)] * self.d, indexing="ij")
        return np.stack(grids, axis=-1)

    def minimal_image(self) -> np.ndarray:
        """Signed displacement of every site from the origin, in ``(-L/2, L/2]``."""
        c = self.coordinates()
        return np.where(c > self.L // 2, c - self.L, c)

    def zeros(self, *batch: int, vector: bool = False, dtype=float) -> np.ndarray:
        return np.zeros(tuple(batch) + (self.vector_shape if vector else self.shape), dtype=dtype)

    def delta(self, x=None) -> np.ndarray:
        """Kronecker delta at site ``x`` (origin by default)."""
        out = self.zeros()
        idx = (0,) * self.d if x is None else tuple(int(v) % self.L for v in x)
        out[idx] = 1.0
        return out

    def check_scalar(self, phi: np.ndarray) -> None:
        if phi.ndim < self.d or phi.shape[phi.ndim - self.d:] != self.shape:
            raise DomainError(f"scalar field shape {phi.shape} does not end with {self.shape}")

    def check_vector(self, F: np.ndarray) -> None:
        if F.ndim < self.d + 1 or F.shape[F.ndim - self.d - 1:] != self.vector_shape:
            raise DomainError(f"vector field shape {F.shape} does not end with {self.vector_shape}")


def component_sum(x: np.ndarray) -> np.ndarray:
    """Sum over the trailing component axis (explicit adds beat a reduction for tiny ``d``)."""
    out = x[..., 0].copy()
    for j in range(1, x.shape[-1]):
        out += x[..., j]
    return out


def site_sum(lat: Lattice, x: np.ndarray) -> np.ndarray:
    """Sum of a scalar field over the lattice axes."""
    lead = x.shape[: x.ndim - lat.d]
    return np.reshape(x, lead + (lat.n_sites,)) @ np.ones(lat.n_sites)


def gradient(lat: Lattice, phi: np.ndarray) -> np.ndarray:
    """Forward difference, returns a vector field."""
    return np.stack([np.roll(phi, -1, axis=ax) - phi for ax in lat.scalar_axes], axis=-1)


def divergence(lat: Lattice, F: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gradient`: ``sum_i F_i(x - e_i) - F_i(x)``."""
    out = np.zeros(F.shape[:-1], dtype=F.dtype)
    for i, ax in enumerate(lat.scalar_axes):
        Fi = F[..., i]
        out += np.roll(Fi, 1, axis=ax) - Fi
    return out


def neg_laplacian(lat: Lattice, phi: np.ndarray) -> np.ndarray:
    """``-Laplacian phi = div grad phi``."""
    return divergence(lat, gradient(lat, phi))


def _forward(lat: Lattice, f: np.ndarray):
    real = not np.iscomplexobj(f)
    axes = lat.scalar_axes
    fk = sfft.rfftn(f, axes=axes) if real else sfft.fftn(f, axes=axes)
    return fk, real


def _backward(lat: Lattice, fk: np.ndarray, real: bool) -> np.ndarray:
    axes = lat.scalar_axes
    if real:
        return sfft.irfftn(fk, s=lat.shape, axes=axes)
    return sfft.ifftn(fk, axes=axes)


def _resolvent_symbol(lat: Lattice, real: bool, m2: float, stiffness: float, power: float):
    denom = stiffness * lat.spectral.sigma(real) + m2
    with np.errstate(divide="ignore"):
        mult = denom ** (-power)
    if m2 == 0.0:
        mult = np.where(denom > 0, mult, 0.0)
    return mult


def _check_mass(m2: float, allow_zero: bool = False) -> float:
    m2 = float(m2)
    if m2 < 0 or (m2 == 0 and not allow_zero) or not np.isfinite(m2):
        raise DomainError(f"mass parameter must be positive, got {m2}")
    return m2


def helmholtz_solve(lat: Lattice, f: np.ndarray, m2: float, stiffness: float = 1.0) -> np.ndarray:
    """Solve ``(-stiffness * Laplacian + m2) u = f`` for ``m2 > 0``."""
    m2 = _check_mass(m2)
    fk, real = _forward(lat, f)
    return _backward(lat, fk * _resolvent_symbol(lat, real, m2, stiffness, 1.0), real)


def sqrt_inverse(lat: Lattice, f: np.ndarray, m2: float, stiffness: float = 1.0) -> np.ndarray:
    """Apply ``(-stiffness * Laplacian + m2)^{-1/2}``."""
    m2 = _check_mass(m2)
    fk, real = _forward(lat, f)
    return _backward(lat, fk * _resolvent_symbol(lat, real, m2, stiffness, 0.5), real)


def cz_apply(lat: Lattice, F: np.ndarray, m2: float, stiffness: float = 1.0) -> np.ndarray:
    """Apply ``grad (-stiffness * Laplacian + m2)^{-1} div`` to a vector field.

    ``m2 = 0`` is allowed, in which case the zero Fourier mode is mapped to
    zero and the operator is the orthogonal projection onto gradients (for
    unit stiffness).
    """
    m2 = _check_mass(m2, allow_zero=True)
    fk, real = _forward(lat, divergence(lat, F))
    u = _backward(lat, fk * _resolvent_symbol(lat, real, m2, stiffness, 1.0), real)
    return gradient(lat, u)


def pairing(lat: Lattice, F: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Bilinear pairing ``sum_x F(x) . G(x)`` of two vector fields (no conjugation)."""
    return site_sum(lat, component_sum(F * G))


def gradient_form(
    lat: Lattice, h1: np.ndarray, h2: np.ndarray | None = None, m2: float = 1.0, stiffness: float = 1.0
) -> np.ndarray:
    """``[h1, grad (-stiffness * Laplacian + m2)^{-1} div h2]`` (bilinear)."""
    if h2 is None:
        h2 = h1
    return pairing(lat, h1, cz_apply(lat, h2, m2, stiffness))


def lp_norm(lat: Lattice, F: np.ndarray, p: float) -> np.ndarray:
    """``l^p`` norm over sites of the pointwise Euclidean length of ``F``."""
    mag = np.sqrt(np.sum(np.abs(F) ** 2, axis=-1))
    axes = lat.scalar_axes
    if np.isinf(p):
        return mag.max(axis=axes)
    return np.sum(mag**p, axis=axes) ** (1.0 / p)


def weighted_lp_norm(F: np.ndarray, p: float, w: np.ndarray) -> float:
    """``(sum_y |F(y)|^p w(y))^{1/p}`` for a vector field on a finite window."""
    mag = np.sqrt(np.sum(np.abs(F) ** 2, axis=-1))
    return float(np.sum(mag**p * w) ** (1.0 / p))


def window_coordinates(d: int, radius: int) -> np.ndarray:
    """Coordinates of the box ``[-radius, radius]^d``, shape ``(2r+1, ..., d)``."""
    r = np.arange(-radius, radius + 1)
    return np.stack(np.meshgrid(*[r] * d, indexing="ij"), axis=-1)


def dense_gradient_matrix(lat: Lattice) -> np.ndarray:
    """Matrix of :func:`gradient` acting on flattened fields.

    Rows index ``(site, component)`` in row-major order (components fastest),
    columns index sites.
    """
    n = lat.n_sites
    eye = np.eye(n).reshape((n,) + lat.shape)
    return gradient(lat, eye).reshape(n, -1).T.copy()


def dense_neg_laplacian(lat: Lattice) -> np.ndarray:
    G = dense_gradient_matrix(lat)
    return G.T @ G

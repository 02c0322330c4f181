"""Green's functions, dipole test functions and charge correlations.

``G_nu`` solves ``(-Laplacian + nu) G = delta`` on ``Z^d`` or on the torus;
the dipole test function ``h_{x,nu}(y) = grad G_nu(y - x)`` turns point
evaluations into pairings with gradients::

    [h_{x,nu}, grad phi] = phi(x) - nu [G_nu(. - x), phi].

Exponential moments of ``phi(x)`` are therefore free-energy values at
``h = -rho h_{x,nu}``, and the covariance of two such exponentials reduces
to a combination of three free energies.  All Monte Carlo estimates here go
through thermodynamic integration rather than direct exponential averages.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import SdeConfig
from .errors import DomainError, ResourceLimitError
from .free_energy import gaussian_q_exact, gaussian_response, ti_draws
from .lattice import Lattice, gradient, helmholtz_solve, pairing, window_coordinates
from .stats import EstimatorResult, from_samples, jackknife
from .variations import propagate

__all__ = [
    "GreenFunction",
    "DipoleTestFunction",
    "HomogenizedModel",
    "ChargeCovariance",
    "IncrementMoment",
    "green_periodic",
    "green_zd",
    "zd_wrap_bound",
    "dipole_test_function",
    "dipole_test_function_zd",
    "increment_test_function",
    "decay_constant",
    "charge_covariance",
    "gaussian_charge_covariance",
    "d2_increment_moment",
    "estimate_hom_matrix",
    "NU_GRID",
]

NU_GRID = (1.0, 0.3, 0.1, 0.03)
MAX_ZD_SITES = 2**24


@dataclass
class GreenFunction:
    """Values of ``G_nu`` with the source at the origin.

    For ``domain == "periodic"`` the array is indexed by torus sites (origin
    at index 0).  For ``domain == "infinite"`` it covers the window
    ``[-radius, radius]^d`` with the origin at the centre.
    """

    domain: str
    nu: float
    values: np.ndarray
    L: int | None = None
    radius: int | None = None
    torus_L: int | None = None

    def at(self, y) -> float:
        y = tuple(int(v) for v in y)
        if self.domain == "periodic":
            return float(self.values[tuple(v % self.L for v in y)])
        if max(abs(v) for v in y) > self.radius:
            raise DomainError(f"site {y} lies outside the window of radius {self.radius}")
        return float(self.values[tuple(v + self.radius for v in y)])


@dataclass
class DipoleTestFunction:
    """``h_{x,nu}(y) = grad G_nu(y - x)`` as a vector field."""

    x: tuple[int, ...]
    nu: float
    values: np.ndarray


@dataclass
class HomogenizedModel:
    """Effective constant-coefficient matrix of the large-scale covariance."""

    a_hom: np.ndarray
    method: str
    se: np.ndarray | None = None
    clipped: bool = False
    diagnostics: dict = field(default_factory=dict)


def green_periodic(lat: Lattice, nu: float) -> GreenFunction:
    """Periodic Green's function of ``-Laplacian + nu`` on the torus (``nu > 0``)."""
    if not nu > 0:
        raise DomainError(f"the torus Green's function needs nu > 0, got {nu}")
    return GreenFunction("periodic", float(nu), helmholtz_solve(lat, lat.delta(), nu), L=lat.L)


def zd_wrap_bound(d: int, nu: float, radius: int, L: int) -> float:
    """Upper bound on ``|G_{nu,L}(y) - G_nu(y)|`` for ``|y|_inf <= radius``.

    Shifting one Fourier variable by ``i mu`` with ``2(cosh mu - 1) = nu/2``
    gives ``G_nu(z) <= (2/nu) e^{-mu |z|_inf}``; summing over the periodic
    images at sup-distance at least ``k L - radius`` bounds the wrap error.
    """
    mu = math.acosh(1.0 + nu / 4.0)
    total = 0.0
    for k in range(1, 10_000):
        dist = k * L - radius
        if dist <= 0:
            return math.inf
        shell = (2 * k + 1) ** d - (2 * k - 1) ** d
        term = shell * math.exp(-mu * dist)
        total += term
        if term < 1e-18 * max(total, 1e-300):
            break
    return 2.0 / nu * total


def _zd_side(d: int, nu: float, radius: int, tol: float) -> int:
    L = 2 * radius + 2
    while zd_wrap_bound(d, nu, radius, L) >= tol:
        L += 2
    return L


def green_zd(d: int, nu: float, radius: int, tol: float = 1e-8, max_sites: int = MAX_ZD_SITES) -> GreenFunction:
    """``G_nu`` on ``Z^d`` restricted to ``[-radius, radius]^d``.

    Computed as the periodic kernel on a torus large enough that the
    wraparound contribution is below ``tol`` on the window
    (see :func:`zd_wrap_bound`).
    """
    if not nu > 0:
        raise DomainError(f"the Z^d Green's function needs nu > 0, got {nu}")
    L = _zd_side(d, nu, radius, tol)
    if L**d > max_sites:
        raise ResourceLimitError(
            f"window radius {radius} at nu={nu} needs a torus of side {L} ({L**d} sites > {max_sites}); "
            f"reduce the window or the accuracy target, or allow max_sites >= {L**d}"
        )
    lat = Lattice(d, L)
    G = helmholtz_solve(lat, lat.delta(), nu)
    idx = np.arange(-radius, radius + 1) % L
    window = G[np.ix_(*[idx] * d)]
    return GreenFunction("infinite", float(nu), window, radius=radius, torus_L=L)


def dipole_test_function(lat: Lattice, x, nu: float) -> DipoleTestFunction:
    """``h_{x,nu,L} = grad G_{nu,L}(. - x)`` on the torus (``nu > 0``)."""
    G = green_periodic(lat, nu).values
    x = tuple(int(v) for v in x)
    shifted = np.roll(G, x, axis=tuple(range(lat.d)))
    return DipoleTestFunction(x, float(nu), gradient(lat, shifted))


def dipole_test_function_zd(d: int, nu: float, radius: int, tol: float = 1e-8) -> DipoleTestFunction:
    """``h_{0,nu}`` on ``Z^d``, restricted to ``[-radius, radius]^d``."""
    G = green_zd(d, nu, radius + 1, tol).values
    core = tuple(slice(1, -1) for _ in range(d))
    comps = []
    for i in range(d):
        fwd = tuple(slice(2, None) if j == i else slice(1, -1) for j in range(d))
        comps.append(G[fwd] - G[core])
    return DipoleTestFunction((0,) * d, float(nu), np.stack(comps, axis=-1))


def increment_test_function(lat: Lattice, x, nu: float = 0.0) -> np.ndarray:
    """``h_{x,nu} - h_{0,nu}`` on the torus; ``nu = 0`` is allowed.

    At ``nu = 0`` the field is ``grad (-Laplacian)^+ (delta_x - delta_0)``
    and pairs exactly to ``phi(x) - phi(0)``.
    """
    src = lat.delta(x) - lat.delta()
    if nu == 0:
        from .lattice import _backward, _forward

        fk, real = _forward(lat, src)
        sig = lat.spectral.sigma(real)
        with np.errstate(divide="ignore"):
            inv = np.where(sig > 0, 1.0 / sig, 0.0)
        u = _backward(lat, fk * inv, real)
    else:
        u = helmholtz_solve(lat, src, nu)
    return gradient(lat, u)


def decay_constant(h: DipoleTestFunction) -> float:
    """``max_y |h(y)| (|y|^{d-1} + 1)`` over the window of a Z^d test function."""
    vals = h.values
    d = vals.shape[-1]
    radius = (vals.shape[0] - 1) // 2
    y = window_coordinates(d, radius)
    r = np.sqrt(np.sum(y * y, axis=-1))
    mag = np.sqrt(np.sum(vals**2, axis=-1))
    return float(np.max(mag * (r ** (d - 1) + 1.0)))


# ---------------------------------------------------------------- charge correlations


@dataclass
class ChargeCovariance:
    """``cov(exp(rho phi(x)/eps), exp(-rho phi(0)/eps))`` and its Taylor split.

    ``quadratic`` is the second-order term ``-D^2 q(0)[h, h'] / eps`` in the
    exponent with ``h = -rho h_x``, ``h' = rho h_0`` and ``remainder`` the
    rest of the exponent ``-(q(h+h') - q(h) - q(h'))/eps``.
    """

    x: tuple[int, ...]
    rho: complex
    covariance: EstimatorResult
    exponent: EstimatorResult
    quadratic: EstimatorResult
    remainder: EstimatorResult
    q_values: dict = field(default_factory=dict)
    method: str = "thermodynamic-integration"

    def row(self) -> dict:
        x = np.asarray(self.x)
        return {
            "x": " ".join(str(v) for v in self.x),
            "|x|": float(np.sqrt(np.sum(x * x))),
            "rho": self.rho,
            "estimate": self.covariance.mean,
            "se": self.covariance.se,
            "exponent": self.exponent.mean,
            "exponent_se": self.exponent.se,
            "quadratic": self.quadratic.mean,
            "quadratic_se": self.quadratic.se,
            "remainder": self.remainder.mean,
            "remainder_se": self.remainder.se,
        }


def _charge_fields(lat: Lattice, x, rho, nu):
    hx = dipole_test_function(lat, x, nu).values
    h0 = dipole_test_function(lat, (0,) * lat.d, nu).values
    return -rho * hx, rho * h0


def _cov_from_q(eps, qa, qb, qab):
    ea, eb = np.exp(-qa / eps), np.exp(-qb / eps)
    return ea * eb * (np.exp(-(qab - qa - qb) / eps) - 1.0)


def gaussian_charge_covariance(cfg: SdeConfig, x, rho: complex, nu: float) -> ChargeCovariance:
    """Closed form for a Gaussian potential via the quadratic free energy."""
    pot = cfg.potential
    if not pot.is_gaussian:
        raise DomainError("closed form requires a Gaussian potential")
    lat, eps = cfg.lattice, cfg.epsilon
    ha, hb = _charge_fields(lat, x, rho, nu)
    q = lambda h: gaussian_q_exact(lat, pot.A, cfg.m2, h).value
    qa, qb, qab = q(ha), q(hb), q(ha + hb)
    cov = _cov_from_q(eps, qa, qb, qab)
    expo = -(qab - qa - qb) / eps
    return ChargeCovariance(
        tuple(int(v) for v in x), rho, EstimatorResult.exact(cov), EstimatorResult.exact(expo),
        EstimatorResult.exact(expo), EstimatorResult.exact(0.0 * expo),
        {"h": qa, "h'": qb, "h+h'": qab}, "gaussian-exact",
    )


def _d2_at_zero(cfg, ha, hb, n_chains, seed, horizon, burn_in):
    """``-D^2 q(0)[ha, hb] / eps`` by the covariance form at ``h = 0``."""
    lat, eps = cfg.lattice, cfg.epsilon
    c0 = cfg.replace(h=np.zeros(lat.vector_shape))
    from .free_energy import time_average

    def obs(phi):
        om = gradient(lat, phi)
        x, y = pairing(lat, ha, om), pairing(lat, hb, om)
        return np.stack([x, y, x * y], axis=-1)

    n_steps = int(math.ceil(horizon / c0.dt))
    n_burn = int(math.ceil(burn_in / c0.dt))
    draws, _ = time_average(c0, obs, n_steps, n_chains, n_burn, seed)
    # draws are independent batch means; the cross moment carries the covariance
    m = draws.mean(axis=0)
    n = draws.shape[0]
    loo = (m * n - draws) / (n - 1)
    stat = lambda mm: (mm[..., 2] - mm[..., 0] * mm[..., 1]) / eps**2
    full = stat(m)
    jk = stat(loo)
    var = (n - 1) * np.mean((jk - jk.mean()) ** 2)
    return EstimatorResult(full, var, math.sqrt(var), n)


def charge_covariance(
    cfg: SdeConfig,
    x,
    rho: complex,
    nu: float,
    n_steps: int,
    n_chains: int = 64,
    n_nodes: int = 8,
    burn_in: int | None = None,
    seed: int | None = None,
    quadratic: str = "exact-gaussian-free",
) -> ChargeCovariance:
    """Covariance of ``exp(rho phi(x)/eps)`` and ``exp(-rho phi(0)/eps)``.

    ``quadratic`` picks the route for the second-order term: the closed form
    for Gaussian potentials (falling back to ``"covariance"`` otherwise),
    ``"covariance"`` or ``"pathwise"``.

    With ``h = -rho h_{x,nu}`` and ``h' = rho h_{0,nu}`` the covariance is
    ``E(h) E(h') (exp(-(q(h+h') - q(h) - q(h'))/eps) - 1)``, ``E = exp(-q/eps)``;
    the three free energies come from one batched thermodynamic integration,
    so draws of all three share a chain index and the standard errors
    follow by the jackknife over draws.

    The exponent is split into its second-order part ``-D^2 q(0)[h, h']/eps``
    and the remainder.  ``quadratic="covariance"`` estimates the former by the
    field covariance at ``h = 0``; ``"pathwise"`` by the first variation.
    For a complex ``rho`` the config must use a non-Metropolis scheme.
    """
    lat, eps = cfg.lattice, cfg.epsilon
    x = tuple(int(v) for v in x)
    if all(v % lat.L == 0 for v in x):
        raise DomainError("the two charges must sit at different sites")
    ha, hb = _charge_fields(lat, x, rho, nu)
    if rho == 0:
        z = EstimatorResult.exact(0.0)
        return ChargeCovariance(x, rho, z, z, z, z, {"h": 0.0, "h'": 0.0, "h+h'": 0.0})
    fields = np.stack([ha, hb, ha + hb])
    draws, _ = ti_draws(cfg.replace(h=fields[0]), fields, n_steps, n_chains, n_nodes, burn_in, seed)
    n = draws.shape[0]
    m = draws.mean(axis=0)
    loo = (m * n - draws) / (n - 1)

    def jk(stat):
        full = stat(m)
        vals = np.array([stat(r) for r in loo])
        c = vals - vals.mean(axis=0)
        if np.iscomplexobj(c):
            var = (n - 1) * (np.mean(c.real**2) + 1j * np.mean(c.imag**2))
            return EstimatorResult(full, var, np.sqrt(var.real) + 1j * np.sqrt(var.imag), n)
        var = (n - 1) * np.mean(c**2)
        return EstimatorResult(full, var, math.sqrt(var), n)

    cov = jk(lambda r: _cov_from_q(eps, r[0], r[1], r[2]))
    expo = jk(lambda r: -(r[2] - r[0] - r[1]) / eps)
    if quadratic == "exact-gaussian-free" and cfg.potential.is_gaussian:
        quad_val = (pairing(lat, ha, gaussian_response(lat, cfg.potential.A, cfg.m2, hb))) / eps
        quad = EstimatorResult.exact(quad_val)
    elif quadratic in ("covariance", "exact-gaussian-free"):
        if cfg.is_complex or np.iscomplexobj(ha):
            raise DomainError("covariance form of the quadratic term needs a real charge")
        quad = _d2_at_zero(cfg, ha, hb, n_chains, None if seed is None else seed + 7,
                           n_steps * cfg.dt, 10.0 / cfg.rate)
    elif quadratic == "pathwise":
        c0 = cfg.replace(h=np.zeros(lat.vector_shape), scheme="exponential_euler")
        T = 12.0 / c0.rate
        res = propagate(c0, [hb], (), int(math.ceil(T / c0.dt)), n_chains,
                        None if seed is None else seed + 7, int(math.ceil(10.0 / c0.rate / c0.dt)))
        d2 = from_samples(pairing(lat, ha, res.first[0]))
        quad = EstimatorResult(-d2.mean / eps, d2.variance / eps**2, d2.se / eps, d2.n)
    else:
        raise DomainError(f"unknown quadratic-term method {quadratic!r}")
    rem_se = np.hypot(np.real(expo.se), np.real(quad.se))
    if np.iscomplexobj(expo.se) or np.iscomplexobj(quad.se):
        rem_se = rem_se + 1j * np.hypot(np.imag(expo.se), np.imag(quad.se))
    rem = EstimatorResult(expo.mean - quad.mean, None, rem_se, n)
    qv = {"h": m[0], "h'": m[1], "h+h'": m[2]}
    return ChargeCovariance(x, rho, cov, expo, quad, rem, qv)


@dataclass
class IncrementMoment:
    """``log <exp(rho (phi(x) - phi(0)) / eps)>`` at ``nu -> 0``, per site ``x``."""

    xs: list[tuple[int, ...]]
    rho: complex
    log_moment: np.ndarray
    se: np.ndarray
    nu_grid: tuple[float, ...]
    per_nu: np.ndarray
    per_nu_se: np.ndarray

    def rows(self) -> list[dict]:
        out = []
        for i, x in enumerate(self.xs):
            xa = np.asarray(x, dtype=float)
            out.append({
                "x": " ".join(str(v) for v in x), "|x|": float(np.sqrt(xa @ xa)),
                "log_moment": self.log_moment[i], "se": self.se[i],
            })
        return out


def _lagrange_at_zero(nus: np.ndarray) -> np.ndarray:
    """Weights ``w`` with ``sum_i w_i f(nu_i) = P(0)`` for the interpolating polynomial ``P``."""
    w = np.ones(len(nus))
    for i in range(len(nus)):
        for j in range(len(nus)):
            if i != j:
                w[i] *= nus[j] / (nus[j] - nus[i])
    return w


def _extrapolate(nus: np.ndarray, draws: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Richardson (polynomial) extrapolation to ``nu = 0``.

    ``draws`` has shape ``(n_draws, n_nu, n_cols)`` (one draw for exact
    values).  The SE combines the statistical error of the per-draw
    extrapolant with its change from the next-lower-order extrapolant
    through the smallest ``nu`` values.
    """
    if len(nus) == 1:
        est = from_samples(draws[:, 0]) if len(draws) > 1 else None
        return (draws[0, 0], np.zeros(draws.shape[2])) if est is None else (est.mean, est.se)
    extrap = np.einsum("i,din->dn", _lagrange_at_zero(nus), draws)
    keep = np.argsort(nus)[:-1]
    lower = np.einsum("i,din->dn", _lagrange_at_zero(nus[keep]), draws[:, keep])
    if len(draws) > 1:
        est = from_samples(extrap)
        mean, stat = est.mean, np.real(est.se)
    else:
        mean, stat = extrap[0], np.zeros(draws.shape[2])
    return mean, np.hypot(stat, mean - lower.mean(axis=0))


def d2_increment_moment(
    cfg: SdeConfig,
    xs,
    rho: float,
    nu_grid=NU_GRID,
    n_steps: int = 200,
    n_chains: int = 32,
    n_nodes: int = 8,
    burn_in: int | None = None,
    seed: int | None = None,
) -> IncrementMoment:
    """Estimate ``log <exp(rho (phi(x) - phi(0)) / eps)>`` for each ``x``.

    Uses ``h = -rho (h_{x,nu} - h_{0,nu})`` and thermodynamic integration
    for every ``nu`` in ``nu_grid`` (one batched run), then extrapolates
    polynomially in ``nu`` to ``nu = 0``.  ``nu_grid = (0,)`` uses the exact
    increment field directly.  For a Gaussian potential the values are exact.
    """
    lat, eps = cfg.lattice, cfg.epsilon
    if lat.d != 2:
        raise DomainError("the increment moment is defined here for d = 2")
    xs = [tuple(int(v) for v in x) for x in xs]
    nus = np.asarray(nu_grid, dtype=float)
    fields = np.stack([-rho * increment_test_function(lat, x, nu) for nu in nus for x in xs])
    nx = len(xs)
    if cfg.potential.is_gaussian:
        draws = np.array([[-gaussian_q_exact(lat, cfg.potential.A, cfg.m2, f).value / eps for f in fields]])
        ses = np.zeros(draws.shape[1])
    else:
        zero = np.array([all(v % lat.L == 0 for v in x) for x in xs] * len(nus))
        draws, _ = ti_draws(cfg.replace(h=fields[0]), fields, n_steps, n_chains, n_nodes, burn_in, seed)
        draws = np.where(zero, 0.0, -draws / eps)
        ses = np.real(from_samples(draws).se)
    draws = draws.reshape(len(draws), len(nus), nx)
    vals = draws.mean(axis=0)
    ses = ses.reshape(len(nus), nx)
    log_m, log_se = _extrapolate(nus, draws)
    return IncrementMoment(xs, rho, log_m, log_se, tuple(nus.tolist()), vals, ses)


# ---------------------------------------------------------------- homogenized matrix


def _small_modes(d: int) -> list[np.ndarray]:
    modes = []
    for i in range(d):
        e = np.zeros(d, dtype=int)
        e[i] = 1
        modes.append(e)
    for i in range(d):
        for j in range(i + 1, d):
            for s in (1, -1):
                e = np.zeros(d, dtype=int)
                e[i], e[j] = 1, s
                modes.append(e)
    return modes


def estimate_hom_matrix(
    cfg: SdeConfig,
    n_steps: int = 2000,
    n_chains: int = 32,
    burn_in: int | None = None,
    seed: int | None = None,
    max_condition: float = 1e8,
) -> HomogenizedModel:
    """Effective matrix of the large-scale field covariance at ``h = 0``.

    Gaussian potentials return ``A``.  Otherwise the structure factor
    ``S(k) = <|phi_hat(k)|^2> / (eps N)`` is sampled at the smallest nonzero
    modes and ``1/S(k) - m2`` is fitted by least squares to the quadratic
    form ``g(k)^* A g(k)`` with ``g_j(k) = e^{2 pi i k_j/L} - 1``; the fit is
    projected to symmetric and clipped into ``[lam, Lam]``.
    """
    pot, lat, eps = cfg.potential, cfg.lattice, cfg.epsilon
    if pot.is_gaussian:
        return HomogenizedModel(pot.A.copy(), "gaussian-exact", np.zeros_like(pot.A))
    d, L, N = lat.d, lat.L, lat.n_sites
    modes = _small_modes(d)
    coords = lat.coordinates()
    waves = np.stack([np.exp(-2j * np.pi * (coords @ k) / L) for k in modes])  # (n_modes, *sites)
    c0 = cfg.replace(h=np.zeros(lat.vector_shape))
    from .free_energy import time_average

    flat = waves.reshape(len(modes), -1)

    def obs(phi):
        amp = phi.reshape(phi.shape[0], -1) @ flat.T
        return np.abs(amp) ** 2 / (eps * N)

    draws, _ = time_average(c0, obs, n_steps, n_chains, burn_in, seed)
    pairs = [(i, j) for i in range(d) for j in range(i, d)]
    design = []
    for k in modes:
        g = np.exp(2j * np.pi * k / L) - 1.0
        design.append([(1.0 if i == j else 2.0) * float(np.real(np.conj(g[i]) * g[j])) for i, j in pairs])
    design = np.array(design)
    cond = float(np.linalg.cond(design))
    if cond > max_condition:
        raise DomainError(f"small-k design is ill-conditioned (condition number {cond:.3g})")
    pinv = np.linalg.pinv(design)

    def fit(mean_s):
        y = 1.0 / mean_s - cfg.m2
        coef = pinv @ y
        A = np.zeros((d, d))
        for c, (i, j) in zip(coef, pairs):
            A[i, j] = A[j, i] = c
        return A

    n = draws.shape[0]
    m = draws.mean(axis=0)
    A = fit(m)
    loo = [fit((m * n - r) / (n - 1)) for r in draws]
    loo = np.stack(loo)
    se = np.sqrt((n - 1) * np.mean((loo - loo.mean(axis=0)) ** 2, axis=0))
    cc = pot.convexity_constants()
    w, U = np.linalg.eigh(A)
    clipped = bool(np.any(w < cc.lam) or np.any(w > cc.Lam))
    A_out = (U * np.clip(w, cc.lam, cc.Lam)) @ U.T if clipped else A
    resid = design @ pinv @ (1.0 / m - cfg.m2) - (1.0 / m - cfg.m2)
    return HomogenizedModel(
        A_out, "small-k-fit", se, clipped,
        {"raw": A.tolist(), "eigenvalues": w.tolist(), "condition": cond, "residuals": resid.tolist(),
         "modes": [k.tolist() for k in modes]},
    )

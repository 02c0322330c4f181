"""Derivatives of the dynamics with respect to the external field.

Differentiating one preconditioned step
``phi' = e phi - (1 - e) C div(h + V'(grad phi) - k grad phi) + noise`` along a
direction ``a`` of ``h`` (same noise) gives the first variation ``psi``::

    psi' = e psi - (1 - e) C div(a + (V''(w) - k) grad psi),

and differentiating once more along ``a3`` after ``a2``::

    chi' = e chi - (1 - e) C div((V''(w) - k) grad chi + V'''(w)[grad psi2, grad psi3]).

In gradient variables ``f = grad psi`` this is the fixed-point equation
``f = L f - src`` with the causal operator
``(L f)_{n+1} = e (L f)_n + (1 - e) P (I - V''/k) f_n``, where
``P = k grad C div`` has norm at most one.  ``L`` is a contraction with
factor ``max |1 - V''/k|``, so the variations are obtained either by running
the recursions forward next to the chain (:func:`propagate`, the default
route) or by Picard iteration on a stored path (:func:`solve_first_variation`,
:func:`solve_second_variation`).  Both are exact derivatives of the
discrete scheme.

The expectations of ``[a1, f(T)]`` and ``[a1, g(T)]`` converge, as
``T -> infinity``, to the second and third derivatives of the free energy at
``h``; :func:`estimate_d2q` and :func:`estimate_d3q` average them over
independent chains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import LinearPropagator, SdeConfig, Trajectory, init_state
from .errors import ContractionFailureError, DomainError, UnsupportedCapabilityError
from .lattice import cz_apply, divergence, gradient, lp_norm, pairing
from .potentials import contraction_factor
from .stats import EstimatorResult, from_samples, jackknife

__all__ = [
    "ContractionOperator",
    "VariationFlow",
    "PropagationResult",
    "D2qResult",
    "propagate",
    "solve_first_variation",
    "solve_second_variation",
    "estimate_d2q",
    "estimate_d3q",
    "default_horizon",
    "pair_means",
    "d3q_draws",
    "cubic_taylor_remainder",
    "mixed_taylor_remainder",
]

FIXED_POINT_TOL = 1e-10


def _require_differentiable(cfg: SdeConfig) -> None:
    if cfg.scheme == "mala":
        raise UnsupportedCapabilityError("accept/reject chains have no pathwise derivative; use exponential_euler")
    if not cfg.preconditioned:
        raise UnsupportedCapabilityError("variations are implemented for the preconditioned dynamics")


def default_horizon(cfg: SdeConfig) -> float:
    """``12 / rate``: the transient of the variation is below ``e^{-6}``."""
    return 12.0 / cfg.rate


@dataclass
class PropagationResult:
    """Final state of chains run together with their tangents.

    ``first[i]`` is ``D_{a_i} grad phi(T)`` and ``second[(j, k)]`` is
    ``D^2_{a_j, a_k} grad phi(T)``, each with shape ``(n_chains, *batch, *sites, d)``.
    ``series`` holds recorded observables, shape ``(n_records, n_chains, *batch, ...)``.
    """

    phi: np.ndarray
    first: list[np.ndarray]
    second: dict[tuple[int, int], np.ndarray]
    series: np.ndarray | None = None
    t: float = 0.0


def _normal(rng, shape):
    return rng.standard_normal(shape)


def _antithetic_normal(rng, shape):
    half = rng.standard_normal((shape[0] // 2,) + shape[1:])
    return np.concatenate([half, -half])


def pair_means(x: np.ndarray) -> np.ndarray:
    """Average antithetic partners along the chain axis."""
    n = x.shape[0] // 2
    return 0.5 * (x[:n] + x[n:])


def propagate(
    cfg: SdeConfig,
    directions=(),
    pairs=(),
    n_steps: int = 0,
    n_chains: int = 1,
    seed: int | None = None,
    burn_in: int = 0,
    phi0=None,
    observe=None,
    record_every: int = 1,
    state=None,
    antithetic: bool = False,
) -> PropagationResult:
    """Run chains for ``burn_in`` steps, then ``n_steps`` more with tangents.

    ``directions`` are vector fields broadcastable to ``cfg.h``; ``pairs``
    lists index pairs ``(j, k)`` of directions whose second variation is
    wanted.  Tangents start at zero after the burn-in.  ``observe(phi)``,
    if given, is recorded every ``record_every`` steps of the tangent window.

    With ``antithetic`` the second half of the chains is driven by the
    negated noise of the first half (``n_chains`` must be even); chain ``i``
    and ``i + n_chains/2`` then form one draw.
    """
    _require_differentiable(cfg)
    if antithetic and n_chains % 2:
        raise DomainError("antithetic pairing needs an even number of chains")
    lat, pot = cfg.lattice, cfg.potential
    lin = LinearPropagator(cfg)
    k = cfg.stiffness
    strip = cfg.strip_width
    if state is None:
        state = init_state(cfg, n_chains, seed, phi0)
    draw = _antithetic_normal if antithetic else _normal
    for _ in range(burn_in):
        r = lin.nonlinear_source(state.phi)
        state.phi = lin.decay * state.phi + lin.solve_and_noise(r, draw(state.rng, state.phi.shape))
        state.t += cfg.dt
    dirs = [np.asarray(a) for a in directions]
    pairs = [tuple(p) for p in pairs]
    dtype = np.result_type(state.phi, *dirs) if dirs else state.phi.dtype
    psi = [np.zeros(state.phi.shape, dtype=dtype) for _ in dirs]
    chi = {p: np.zeros(state.phi.shape, dtype=dtype) for p in pairs}
    n_dir = len(dirs)
    records = []
    for n in range(1, n_steps + 1):
        phi = state.phi
        omega = gradient(lat, phi)
        grads = [gradient(lat, p) for p in psi]
        sources = [divergence(lat, cfg.h + pot.eval(omega, 1, strip) - k * omega)]
        for a, g in zip(dirs, grads):
            sources.append(divergence(lat, a + pot.hess_apply(omega, g) - k * g))
        for (j, l), c in chi.items():
            gc = gradient(lat, c)
            sources.append(divergence(lat, pot.hess_apply(omega, gc) - k * gc + pot.third_apply(omega, grads[j], grads[l])))
        stacked = lin.solve(np.stack(np.broadcast_arrays(*sources)))
        xi = draw(state.rng, phi.shape)
        state.phi = lin.decay * phi + stacked[0] + lin.noise(xi)
        psi = [lin.decay * p + s for p, s in zip(psi, stacked[1 : 1 + n_dir])]
        chi = {p: lin.decay * c + s for (p, c), s in zip(chi.items(), stacked[1 + n_dir :])}
        state.t += cfg.dt
        if observe is not None and n % record_every == 0:
            records.append(observe(state.phi))
    series = np.stack(records) if records else None
    return PropagationResult(
        phi=state.phi,
        first=[gradient(lat, p) for p in psi],
        second={p: gradient(lat, c) for p, c in chi.items()},
        series=series,
        t=state.t,
    )


class ContractionOperator:
    """The causal operator ``L`` built from a stored gradient path.

    ``omega_path`` has shape ``(n_steps + 1, ...)`` and holds the gradient at
    every time of the path, starting from the initial condition.  Paths of vector fields with the same leading
    shape are mapped to paths.
    """

    def __init__(self, cfg: SdeConfig, omega_path: np.ndarray):
        _require_differentiable(cfg)
        self.cfg = cfg
        self.omega = omega_path
        self.lin = LinearPropagator(cfg)
        self.factor = contraction_factor(cfg.constants, cfg.stiffness)

    def project(self, F: np.ndarray) -> np.ndarray:
        """``P F = k grad (-k Laplacian + m2)^{-1} div F``."""
        cfg = self.cfg
        return cfg.stiffness * cz_apply(cfg.lattice, F, cfg.m2, cfg.stiffness)

    def causal_filter(self, X: np.ndarray) -> np.ndarray:
        """``u_0 = 0``, ``u_{n+1} = e u_n + (1 - e) X_n`` along axis 0."""
        from scipy.signal import lfilter

        e = self.lin.decay
        return lfilter([0.0, 1.0 - e], [1.0, -e], X, axis=0)

    def apply(self, f: np.ndarray) -> np.ndarray:
        k = self.cfg.stiffness
        b_f = f - self.cfg.potential.hess_apply(self.omega, f) / k
        return self.causal_filter(self.project(b_f))

    def sup_norm(self, f: np.ndarray) -> float:
        """``sup_n ||f_n||_2`` over the path (max over any batch axes)."""
        return float(np.max(lp_norm(self.cfg.lattice, f, 2)))

    def fixed_point(self, src: np.ndarray, tol: float = FIXED_POINT_TOL) -> tuple[np.ndarray, int, float]:
        """Solve ``f = L f - src`` by Picard iteration from ``-src``."""
        scale = max(self.sup_norm(src), 1e-300)
        c = self.factor
        max_iter = 1 + (int(math.ceil(math.log(tol) / math.log(c))) if 0 < c < 1 else 1)
        f = -src
        for it in range(1, max_iter + 1):
            f_new = self.apply(f) - src
            res = self.sup_norm(f_new - f) / scale
            f = f_new
            if res <= tol:
                return f, it, res
        raise ContractionFailureError(f"fixed point residual {res:.3g} after {max_iter} iterations (factor {c:.3g})")


@dataclass
class VariationFlow:
    """Variation path ``f_n``, ``n = 0..n_steps`` (so ``f_0 = 0``)."""

    values: np.ndarray
    iterations: int
    residual: float
    times: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]


def _omega_path(traj: Trajectory, phi0) -> np.ndarray:
    if traj.burn_in != 0 or traj.thin != 1 or traj.samples.ndim < traj.config.lattice.d + 1:
        raise DomainError("variations need the full field path: run_chain(..., burn_in=0, thin=1) storing phi")
    lat = traj.config.lattice
    first = np.zeros_like(traj.samples[0]) if phi0 is None else np.broadcast_to(phi0, traj.samples[0].shape)
    phis = np.concatenate([first[None], traj.samples])
    return gradient(lat, phis)


def solve_first_variation(traj: Trajectory, a: np.ndarray, phi0=None, tol: float = FIXED_POINT_TOL) -> VariationFlow:
    """First variation ``D_a grad phi`` along a stored trajectory.

    The source is ``src_n = (1 - e^n) P a / k`` (the response of the linear
    part to a constant forcing), so that ``f = L f - src``.
    """
    cfg = traj.config
    op = ContractionOperator(cfg, _omega_path(traj, phi0))
    n = op.omega.shape[0]
    Pa = op.project(np.asarray(a)) / cfg.stiffness
    ramp = 1.0 - op.lin.decay ** np.arange(n)
    src = ramp.reshape((n,) + (1,) * (op.omega.ndim - 1)) * Pa
    f, it, res = op.fixed_point(np.broadcast_to(src, np.broadcast_shapes(src.shape, op.omega.shape)).copy(), tol)
    t = np.concatenate([[0.0], traj.times])
    return VariationFlow(f, it, res, t)


def solve_second_variation(traj: Trajectory, a2: np.ndarray, a3: np.ndarray, phi0=None,
                           tol: float = FIXED_POINT_TOL) -> VariationFlow:
    """Second variation ``D^2_{a2, a3} grad phi`` along a stored trajectory."""
    cfg = traj.config
    f2 = solve_first_variation(traj, a2, phi0, tol)
    f3 = solve_first_variation(traj, a3, phi0, tol)
    op = ContractionOperator(cfg, _omega_path(traj, phi0))
    third = cfg.potential.third_apply(op.omega, f2.values, f3.values)
    src = op.causal_filter(op.project(third) / cfg.stiffness)
    g, it, res = op.fixed_point(src, tol)
    t = np.concatenate([[0.0], traj.times])
    return VariationFlow(g, it, res, t)


@dataclass
class D2qResult:
    """Pathwise and (for real fields) covariance estimates of ``D^2 q[a1, a2]``."""

    pathwise: EstimatorResult
    covariance: EstimatorResult | None
    discrepancy: float | None

    def to_dict(self) -> dict:
        return {
            "pathwise": self.pathwise.to_dict(),
            "covariance": None if self.covariance is None else self.covariance.to_dict(),
            "discrepancy_z": self.discrepancy,
        }


def _steps(cfg: SdeConfig, horizon: float | None, burn_in: float | None) -> tuple[int, int]:
    T = default_horizon(cfg) if horizon is None else horizon
    B = 10.0 / cfg.rate if burn_in is None else burn_in
    return int(math.ceil(T / cfg.dt)), int(math.ceil(B / cfg.dt))


def estimate_d2q(
    cfg: SdeConfig,
    a1: np.ndarray,
    a2: np.ndarray,
    n_chains: int = 64,
    horizon: float | None = None,
    burn_in: float | None = None,
    seed: int | None = None,
) -> D2qResult:
    """Estimate ``D^2 q(h)[a1, a2]`` by the pathwise first variation.

    Each chain is equilibrated for ``burn_in`` (time units, default
    ``10 / rate``) and then carries the tangent along ``a2`` over
    ``horizon`` (default :func:`default_horizon`).  For real ``h`` the
    covariance form ``-cov([a1, grad phi], [a2, grad phi]) / eps`` is
    estimated from the same window and the discrepancy is reported in units
    of the combined standard error.
    """
    lat = cfg.lattice
    n_steps, n_burn = _steps(cfg, horizon, burn_in)
    a1, a2 = np.asarray(a1), np.asarray(a2)
    observe = None
    if not cfg.is_complex:
        observe = lambda p: np.stack([pairing(lat, a1, gradient(lat, p)), pairing(lat, a2, gradient(lat, p))])
    res = propagate(cfg, [a2], (), n_steps, n_chains, seed, n_burn, observe=observe,
                    record_every=max(1, n_steps // 400))
    pathwise = from_samples(pairing(lat, a1, res.first[0]))
    if cfg.is_complex or cfg.epsilon == 0:
        return D2qResult(pathwise, None, None)
    x, y = res.series[:, 0], res.series[:, 1]
    eps = cfg.epsilon
    cov = jackknife([x, y, x * y], lambda mx, my, mxy: -(mxy - mx * my) / eps)
    z = float(np.max(np.abs(pathwise.mean - cov.mean) / np.sqrt(pathwise.se**2 + cov.se**2)))
    return D2qResult(pathwise, cov, z)


def d3q_draws(
    cfg: SdeConfig,
    a1: np.ndarray,
    a2: np.ndarray,
    a3: np.ndarray,
    n_chains: int = 64,
    horizon: float | None = None,
    burn_in: float | None = None,
    seed: int | None = None,
    antithetic: bool = True,
) -> np.ndarray:
    """Independent draws of ``[a1, D^2_{a2,a3} grad phi(T)]``, shape ``(n_chains, *batch)``.

    ``antithetic`` pairs each noise path with its negation.  For an even
    potential this cancels the leading fluctuation near ``h = 0``, where
    the third derivative itself is small.
    """
    lat = cfg.lattice
    n_steps, n_burn = _steps(cfg, horizon, burn_in)
    same = np.array_equal(np.asarray(a2), np.asarray(a3))
    dirs = [a2] if same else [a2, a3]
    pair = (0, 0) if same else (0, 1)
    n_run = 2 * n_chains if antithetic else n_chains
    res = propagate(cfg, dirs, [pair], n_steps, n_run, seed, n_burn, antithetic=antithetic)
    vals = pairing(lat, np.asarray(a1), res.second[pair])
    return pair_means(vals) if antithetic else vals


def estimate_d3q(
    cfg: SdeConfig,
    a1: np.ndarray,
    a2: np.ndarray,
    a3: np.ndarray,
    n_chains: int = 64,
    horizon: float | None = None,
    burn_in: float | None = None,
    seed: int | None = None,
    antithetic: bool = True,
) -> EstimatorResult:
    """Estimate ``D^3 q(h)[a1, a2, a3]`` from the second variation along ``(a2, a3)``."""
    return from_samples(d3q_draws(cfg, a1, a2, a3, n_chains, horizon, burn_in, seed, antithetic))


def _gauss_legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def cubic_taylor_remainder(
    cfg: SdeConfig,
    h: np.ndarray,
    n_nodes: int = 4,
    n_chains: int = 64,
    horizon: float | None = None,
    burn_in: float | None = None,
    seed: int | None = None,
) -> EstimatorResult:
    """``q(h) - q(0) - Dq(0)[h] - D^2 q(0)[h, h] / 2`` by the integral form of the remainder.

    Evaluates ``int_0^1 (1 - t)^2 / 2 D^3 q(t h)[h, h, h] dt`` on Gauss-Legendre
    nodes, all nodes running as one batch.  ``cfg.h`` is ignored.
    """
    h = np.asarray(h)
    t, w = _gauss_legendre(n_nodes)
    hb = t.reshape((-1,) + (1,) * h.ndim) * h
    bcfg = cfg.replace(h=hb)
    draws = d3q_draws(bcfg, h, h, h, n_chains, horizon, burn_in, seed)
    return from_samples(draws @ (0.5 * (1.0 - t) ** 2 * w))


def mixed_taylor_remainder(
    cfg: SdeConfig,
    h1: np.ndarray,
    h2: np.ndarray,
    n_nodes: int = 2,
    n_chains: int = 64,
    horizon: float | None = None,
    burn_in: float | None = None,
    seed: int | None = None,
) -> EstimatorResult:
    """``q(h1 + h2) - q(h1) - q(h2) + q(0) - D^2 q(0)[h1, h2]``.

    Uses ``int int int D^3 q(g s)[h1, h2, s] da db dg`` with ``s = a h1 + b h2``
    on a tensor Gauss-Legendre rule in ``(a, b, g)``.  ``cfg.h`` is ignored.
    """
    h1, h2 = np.asarray(h1), np.asarray(h2)
    t, w = _gauss_legendre(n_nodes)
    A, B, G = np.meshgrid(t, t, t, indexing="ij")
    W = (w[:, None, None] * w[None, :, None] * w[None, None, :]).ravel()
    expand = (-1,) + (1,) * h1.ndim
    s = A.ravel().reshape(expand) * h1 + B.ravel().reshape(expand) * h2
    fields = G.ravel().reshape(expand) * s
    bcfg = cfg.replace(h=fields)
    draws = d3q_draws(bcfg, h1, h2, s, n_chains, horizon, burn_in, seed)
    return from_samples(draws @ W)



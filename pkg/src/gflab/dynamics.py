"""Langevin dynamics for the gradient field measure ``exp(-W(phi)/eps)``.

The action on the torus is::

    W(phi) = sum_x m2 phi(x)^2 / 2 + h(x) . grad phi(x) + V(grad phi(x)).

The preconditioned dynamics uses ``C = (-k Laplacian + m2)^{-1}`` (``k`` is
the ``stiffness``, 1 by default)::

    dphi = -1/2 [phi + C div h + C div(V'(grad phi) - k grad phi)] dt + sqrt(eps) C^{1/2} dB

and leaves the measure invariant.  Its linear part is integrated exactly by
the exponential scheme, which makes every Fourier mode relax at rate 1/2
irrespective of the lattice size.  For complex ``h`` the same equation is
run on complex fields with real noise; its stationary law reproduces the
analytically continued expectations as long as the gradient stays in the
potential's strip.

Three schemes are available:

``exponential_euler``
    exact Ornstein-Uhlenbeck step for the linear part, explicit
    nonlinearity (default).
``euler_maruyama``
    plain explicit step; ``preconditioned=False`` runs the unpreconditioned
    gradient dynamics ``-1/2 grad W dt + sqrt(eps) dB`` instead.
``mala``
    exponential-Euler proposal with a Metropolis-Hastings correction against
    the exact density, so the stationary law has no step-size bias.  Real
    ``h`` only.

Chains are batched: ``phi`` has shape ``(n_chains, *batch, L, ..., L)`` where
``batch`` are the leading axes of ``h`` (several external fields run side by
side), and every chain advances in lock-step.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.fft as sfft

from .errors import AdmissibilityError, DomainError, UnsupportedCapabilityError
from .lattice import Lattice, component_sum, divergence, gradient, site_sum
from .potentials import ConvexityConstants, Potential, StripConstants, contraction_factor
from .rng import make_rng

__all__ = [
    "SCHEMES",
    "SdeConfig",
    "ChainState",
    "Trajectory",
    "LinearPropagator",
    "action",
    "drift_standard",
    "drift_preconditioned",
    "noise_preconditioned",
    "init_state",
    "step",
    "run_chain",
    "choose_thin",
    "optimal_eta",
]

SCHEMES = ("exponential_euler", "euler_maruyama", "mala")

# lattices up to this many sites apply the (circulant) linear operators as dense matrices
DENSE_SITES = 128


def optimal_eta(rate: float, strip: Callable[[float], float], stiffness: float = 1.0) -> float:
    """``eta`` maximising the admissible radius ``(stiffness*rate - eta) * delta(eta)``."""
    from scipy.optimize import minimize_scalar

    top = stiffness * rate
    res = minimize_scalar(lambda e: -(top - e) * strip(e), bounds=(1e-9 * top, top * (1 - 1e-9)), method="bounded")
    return float(res.x)


@dataclass(frozen=True, eq=False)
class SdeConfig:
    """Model and integrator parameters.

    ``h`` is a vector field of shape ``(*batch, L, ..., L, d)``; ``None``
    means zero.  ``dt`` defaults to ``0.01 * lam / Lam``.  For complex ``h``
    ``eta`` selects the strip used for admissibility and per-step checks; if
    omitted it is chosen to maximise the admissible radius.
    """

    lattice: Lattice
    potential: Potential
    epsilon: float
    m2: float
    h: np.ndarray | None = None
    dt: float | None = None
    scheme: str = "exponential_euler"
    preconditioned: bool = True
    stiffness: float = 1.0
    eta: float | None = None

    def __post_init__(self):
        lat = self.lattice
        if self.potential.d != lat.d:
            raise DomainError(f"potential dimension {self.potential.d} != lattice dimension {lat.d}")
        if not (self.m2 > 0 and math.isfinite(self.m2)):
            raise DomainError(f"mass parameter must be positive, got {self.m2}")
        if not self.epsilon >= 0:
            raise DomainError(f"temperature must be non-negative, got {self.epsilon}")
        if not self.stiffness > 0:
            raise DomainError("stiffness must be positive")
        if self.scheme not in SCHEMES:
            raise DomainError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        h = np.zeros(lat.vector_shape) if self.h is None else np.asarray(self.h)
        lat.check_vector(h)
        if np.iscomplexobj(h) and not np.any(h.imag):
            h = h.real.copy()
        object.__setattr__(self, "h", h)
        cc = self.potential.convexity_constants()
        if self.dt is None:
            object.__setattr__(self, "dt", 0.01 * cc.lam / cc.Lam)
        if not self.dt > 0:
            raise DomainError("time step must be positive")
        if self.preconditioned and self.rate <= 0:
            raise AdmissibilityError(
                f"preconditioned dynamics does not contract: convexity ({cc.lam:.3g}, {cc.Lam:.3g}) "
                f"with stiffness {self.stiffness:.3g}; increase stiffness above Lam/2"
            )
        if self.scheme == "mala":
            if self.is_complex:
                raise UnsupportedCapabilityError("Metropolis adjustment requires a real external field")
            if not self.preconditioned:
                raise UnsupportedCapabilityError("Metropolis adjustment is implemented for the preconditioned proposal")
            if self.epsilon <= 0:
                raise DomainError("Metropolis adjustment requires positive temperature")
        if self.is_complex:
            self._check_complex()

    def _check_complex(self):
        if not self.potential.is_holomorphic:
            raise UnsupportedCapabilityError(f"{type(self.potential).__name__} cannot take complex fields")
        if not self.preconditioned:
            raise UnsupportedCapabilityError("complex fields require the preconditioned dynamics")
        if self.eta is None:
            eta = optimal_eta(self.rate, lambda e: self.potential.strip_constants(e).delta, self.stiffness)
            object.__setattr__(self, "eta", eta)
        sc = self.strip
        radius = (self.stiffness * self.rate - self.eta) * sc.delta
        if radius <= 0:
            raise AdmissibilityError(f"eta={self.eta:.3g} leaves no admissible imaginary part")
        im = np.sqrt(np.sum(self.h.imag**2, axis=self.lattice.vector_axes + (-1,)))
        if np.any(im >= radius):
            raise AdmissibilityError(
                f"|Im h|_2 = {float(np.max(im)):.4g} exceeds the admissible radius {radius:.4g} for eta={self.eta:.3g}"
            )

    @property
    def constants(self) -> ConvexityConstants:
        return self.potential.convexity_constants()

    @property
    def rate(self) -> float:
        """Contraction margin ``1 - ||I - V''/stiffness||``."""
        return 1.0 - contraction_factor(self.constants, self.stiffness)

    @property
    def is_complex(self) -> bool:
        return bool(np.iscomplexobj(self.h))

    @property
    def strip(self) -> StripConstants:
        if self.eta is None:
            raise DomainError("no strip parameter eta set")
        return self.potential.strip_constants(self.eta)

    @property
    def strip_width(self) -> float | None:
        return self.strip.delta if self.is_complex else None

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.h.shape[: self.h.ndim - self.lattice.d - 1]

    @property
    def dtype(self):
        return np.complex128 if self.is_complex else np.float64

    def replace(self, **changes) -> "SdeConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        if "h" in changes and "eta" not in changes and not np.iscomplexobj(changes["h"]):
            kw["eta"] = None
        kw.update(changes)
        return SdeConfig(**kw)

    def describe(self) -> dict:
        return {
            "d": self.lattice.d,
            "L": self.lattice.L,
            "potential": self.potential.describe(),
            "epsilon": self.epsilon,
            "m2": self.m2,
            "dt": self.dt,
            "scheme": self.scheme,
            "preconditioned": self.preconditioned,
            "stiffness": self.stiffness,
            "eta": self.eta,
        }

    def hash(self) -> str:
        hh = hashlib.sha256(json.dumps(self.describe(), sort_keys=True).encode())
        hh.update(np.ascontiguousarray(self.h).tobytes())
        return hh.hexdigest()[:16]


@dataclass
class ChainState:
    """Fields of a batch of chains plus their private random stream."""

    phi: np.ndarray
    rng: np.random.Generator
    t: float = 0.0
    n_step: int = 0
    n_accept: np.ndarray | None = None
    cache: tuple | None = field(default=None, repr=False)


@dataclass
class Trajectory:
    """Samples retained from :func:`run_chain`.

    ``samples`` has shape ``(n_samples, n_chains, *batch, ...)``; by default
    the field itself is stored, otherwise whatever ``observe`` returned.
    """

    samples: np.ndarray
    times: np.ndarray
    config: SdeConfig
    seed: int | None
    burn_in: int
    thin: int
    acceptance: np.ndarray | None = None

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


def action(cfg: SdeConfig, phi: np.ndarray) -> np.ndarray:
    """``W(phi)``, summed over sites; one value per chain."""
    lat = cfg.lattice
    omega = gradient(lat, phi)
    dens = 0.5 * cfg.m2 * phi**2 + component_sum(cfg.h * omega) + cfg.potential.eval(omega, 0, cfg.strip_width)
    return site_sum(lat, dens)


def drift_standard(cfg: SdeConfig, phi: np.ndarray) -> np.ndarray:
    """``-1/2 grad W(phi) = -1/2 [div h + m2 phi + div V'(grad phi)]``."""
    lat = cfg.lattice
    omega = gradient(lat, phi)
    return -0.5 * (cfg.m2 * phi + divergence(lat, cfg.h + cfg.potential.eval(omega, 1, cfg.strip_width)))


class LinearPropagator:
    """Spectral pieces of one preconditioned time step.

    With ``e = exp(-dt/2)`` (exponential scheme) or ``1 - dt/2`` (Euler),
    one step reads ``phi' = e phi + solve(r(phi)) + noise`` where
    ``r(phi) = div(h + V'(grad phi) - k grad phi)`` and ``solve`` applies
    ``-(1 - e) C``.
    """

    def __init__(self, cfg: SdeConfig):
        self.cfg = cfg
        lat = cfg.lattice
        self.real = not cfg.is_complex
        dt = cfg.dt
        exact = cfg.scheme in ("exponential_euler", "mala")
        self.decay = math.exp(-dt / 2) if exact else 1.0 - dt / 2
        # noise variance per unit of C
        self.noise_var = cfg.epsilon * (-math.expm1(-dt) if exact else dt)
        denom = cfg.stiffness * lat.spectral.sigma(self.real) + cfg.m2
        self.solve_mult = -(1.0 - self.decay) / denom
        self._real_solve_mult = -(1.0 - self.decay) / (cfg.stiffness * lat.spectral.sigma(True) + cfg.m2)
        # the noise is always real, so it lives on the half grid
        self.noise_mult = np.sqrt(self.noise_var / (cfg.stiffness * lat.spectral.sigma(True) + cfg.m2))
        self.axes = lat.scalar_axes
        self.dense = lat.n_sites <= DENSE_SITES
        if self.dense:
            basis = np.eye(lat.n_sites).reshape((lat.n_sites,) + lat.shape)
            self._solve_T = self._spectral_solve(basis).reshape(lat.n_sites, -1)
            self._noise_T = self._spectral_noise(basis).reshape(lat.n_sites, -1)

    def _fft(self, x):
        return sfft.rfftn(x, axes=self.axes) if self.real else sfft.fftn(x, axes=self.axes)

    def _ifft(self, xk):
        if self.real:
            return sfft.irfftn(xk, s=self.cfg.lattice.shape, axes=self.axes)
        return sfft.ifftn(xk, axes=self.axes)

    def nonlinear_source(self, phi: np.ndarray, omega: np.ndarray | None = None) -> np.ndarray:
        cfg = self.cfg
        lat = cfg.lattice
        if omega is None:
            omega = gradient(lat, phi)
        vp = cfg.potential.eval(omega, 1, cfg.strip_width)
        return divergence(lat, cfg.h + vp - cfg.stiffness * omega)

    def _spectral_solve(self, r):
        if not np.iscomplexobj(r):
            return sfft.irfftn(sfft.rfftn(r, axes=self.axes) * self._real_solve_mult, s=self.cfg.lattice.shape, axes=self.axes)
        return self._ifft(self._fft(r) * self.solve_mult)

    def _spectral_noise(self, xi):
        shape = self.cfg.lattice.shape
        return sfft.irfftn(sfft.rfftn(xi, axes=self.axes) * self.noise_mult, s=shape, axes=self.axes)

    def _dense(self, mat: np.ndarray, x: np.ndarray) -> np.ndarray:
        n = self.cfg.lattice.n_sites
        return (np.reshape(x, (-1, n)) @ mat).reshape(x.shape)

    def solve(self, r: np.ndarray) -> np.ndarray:
        """``-(1 - e) C r``."""
        if self.dense:
            return self._dense(self._solve_T, r)
        return self._spectral_solve(r)

    def noise(self, xi: np.ndarray) -> np.ndarray:
        """``sqrt(noise_var) C^{1/2} xi`` for standard normal ``xi``."""
        if self.dense:
            return self._dense(self._noise_T, xi)
        return self._spectral_noise(xi)

    def solve_and_noise(self, r: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """``solve(r) + noise(xi)`` with a single inverse transform."""
        if self.dense or not self.real:
            return self.solve(r) + self.noise(xi)
        return self._ifft(self._fft(r) * self.solve_mult + self._fft(xi) * self.noise_mult)

    def cinv_norm2(self, v: np.ndarray) -> np.ndarray:
        """``<v, (-k Laplacian + m2) v>`` per chain."""
        cfg = self.cfg
        lat = cfg.lattice
        g = gradient(lat, v)
        return site_sum(lat, cfg.stiffness * component_sum(g * g) + cfg.m2 * v * v)


def drift_preconditioned(cfg: SdeConfig, phi: np.ndarray) -> np.ndarray:
    """``-1/2 [phi + C div h + C div(V'(grad phi) - k grad phi)]``."""
    from .lattice import helmholtz_solve

    r = LinearPropagator(cfg).nonlinear_source(phi)
    return -0.5 * (phi + helmholtz_solve(cfg.lattice, r, cfg.m2, cfg.stiffness))


def noise_preconditioned(cfg: SdeConfig, rng: np.random.Generator, shape: tuple[int, ...] | None = None) -> np.ndarray:
    """One increment ``sqrt(eps dt) C^{1/2} xi`` (Euler normalisation)."""
    lat = cfg.lattice
    shape = lat.shape if shape is None else shape
    xi = rng.standard_normal(shape)
    from .lattice import sqrt_inverse

    return math.sqrt(cfg.epsilon * cfg.dt) * sqrt_inverse(lat, xi, cfg.m2, cfg.stiffness)


def init_state(cfg: SdeConfig, n_chains: int = 1, seed: int | None = None, phi0=None, rng=None, path=()) -> ChainState:
    shape = (n_chains,) + cfg.batch_shape + cfg.lattice.shape
    phi = np.zeros(shape, dtype=cfg.dtype)
    if phi0 is not None:
        phi = phi + np.asarray(phi0)
    rng = make_rng(seed, *path) if rng is None else rng
    acc = np.zeros(shape[: -cfg.lattice.d], dtype=np.int64) if cfg.scheme == "mala" else None
    return ChainState(phi=phi, rng=rng, n_accept=acc)


class _Integrator:
    """Advance a :class:`ChainState` in place; shared by all chain runners."""

    def __init__(self, cfg: SdeConfig):
        self.cfg = cfg
        self.lin = LinearPropagator(cfg) if cfg.preconditioned else None

    def __call__(self, state: ChainState) -> None:
        cfg = self.cfg
        xi = state.rng.standard_normal(state.phi.shape)
        if cfg.scheme == "mala":
            self._mala(state, xi)
        elif cfg.preconditioned:
            lin = self.lin
            r = lin.nonlinear_source(state.phi)
            state.phi = lin.decay * state.phi + lin.solve_and_noise(r, xi)
        else:
            state.phi = state.phi + cfg.dt * drift_standard(cfg, state.phi) + math.sqrt(cfg.epsilon * cfg.dt) * xi
        state.t += cfg.dt
        state.n_step += 1

    def _terms(self, phi):
        lin = self.lin
        r = lin.nonlinear_source(phi)
        return action(self.cfg, phi), lin.decay * phi + lin.solve(r)

    def _mala(self, state: ChainState, xi: np.ndarray) -> None:
        cfg, lin = self.cfg, self.lin
        if state.cache is None:
            state.cache = self._terms(state.phi)
        W0, mu0 = state.cache
        y = mu0 + lin.noise(xi)
        W1, mu1 = self._terms(y)
        d = cfg.lattice.d
        log_fwd = -0.5 * site_sum(cfg.lattice, xi * xi)
        log_bwd = -lin.cinv_norm2(state.phi - mu1) / (2.0 * lin.noise_var)
        log_ratio = -(W1 - W0) / cfg.epsilon + log_bwd - log_fwd
        u = state.rng.random(log_ratio.shape)
        acc = np.log(u) < log_ratio
        mask = acc.reshape(acc.shape + (1,) * d)
        state.phi = np.where(mask, y, state.phi)
        state.cache = (np.where(acc, W1, W0), np.where(mask, mu1, mu0))
        state.n_accept += acc


def step(state: ChainState, cfg: SdeConfig) -> ChainState:
    """Advance every chain in ``state`` by one time step (in place)."""
    _Integrator(cfg)(state)
    return state


def run_chain(
    cfg: SdeConfig,
    n_steps: int,
    burn_in: int | None = None,
    thin: int = 1,
    n_chains: int = 1,
    seed: int | None = None,
    phi0=None,
    observe: Callable[[np.ndarray], np.ndarray] | None = None,
    state: ChainState | None = None,
    path: tuple = (),
) -> Trajectory:
    """Run ``burn_in`` unrecorded steps, then ``n_steps`` recording every ``thin``.

    ``burn_in`` defaults to ``10 / (lam dt)`` steps.  ``observe`` maps the
    batched field to the quantity to store (the field itself by default).
    """
    if burn_in is None:
        burn_in = int(math.ceil(10.0 / (cfg.constants.lam * cfg.dt)))
    if thin < 1 or n_steps < 0:
        raise DomainError("thin must be >= 1 and n_steps >= 0")
    if state is None:
        state = init_state(cfg, n_chains, seed, phi0, path=path)
    stepper = _Integrator(cfg)
    for _ in range(burn_in):
        stepper(state)
    if state.n_accept is not None:
        state.n_accept[...] = 0
    out, times = [], []
    obs = observe if observe is not None else (lambda p: p.copy())
    for k in range(1, n_steps + 1):
        stepper(state)
        if k % thin == 0:
            out.append(obs(state.phi))
            times.append(state.t)
    samples = np.stack(out) if out else np.empty((0,) + state.phi.shape)
    acc = state.n_accept / max(n_steps, 1) if state.n_accept is not None else None
    return Trajectory(samples, np.asarray(times), cfg, seed, burn_in, thin, acc)


def choose_thin(cfg: SdeConfig, a: np.ndarray, n_steps: int = 2000, n_chains: int = 8, seed: int | None = None,
                target: float = 0.1, max_thin: int = 10_000) -> int:
    """Smallest lag at which the autocorrelation of ``[a, grad phi]`` drops below ``target``."""
    lat = cfg.lattice
    traj = run_chain(cfg, n_steps, n_chains=n_chains, seed=seed,
                     observe=lambda p: np.sum(a * gradient(lat, p), axis=lat.vector_axes + (-1,)).real)
    x = traj.samples.reshape(traj.samples.shape[0], -1)
    x = x - x.mean(axis=0)
    var = np.mean(x * x)
    if var == 0:
        return 1
    for lag in range(1, min(max_thin, x.shape[0] // 2)):
        if np.mean(x[lag:] * x[:-lag]) / var < target:
            return lag
    return min(max_thin, x.shape[0] // 2)

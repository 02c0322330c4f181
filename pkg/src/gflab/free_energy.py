"""Free energy ``q(h) = -eps log Z(h)`` and its first derivative.

Routes:

* :func:`gaussian_q_exact` for quadratic potentials,
  ``q(h) - q(0) = -1/2 [h, grad (div A grad + m2)^{-1} div h]`` (bilinear, so
  it also gives the analytic continuation to complex ``h``);
* :func:`q_brute_force`, tensor Gauss-Hermite quadrature over every site
  (at most four sites, or a transfer matrix on a ring), the reference used
  to calibrate the Monte Carlo routes;
* :func:`q_thermo_integration`, ``q(h) - q(0) = int_0^1 [h, g(t h)] dt`` with
  the mean gradient ``g`` estimated by Langevin chains at Gauss-Legendre
  nodes.

The mean gradient has two unbiased estimators.  ``direct`` averages
``grad phi``.  ``drift`` averages ``-P(h + V'(grad phi) - k grad phi)`` with
``P = grad (-k Laplacian + m2)^{-1} div``; its expectation is the same
because the preconditioned drift has zero mean in equilibrium (this also
holds exactly for the discretised chains), and its fluctuations vanish for
quadratic potentials, so it is used by default.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import SdeConfig, init_state, _Integrator
from .errors import DomainError, OracleFailureError, ResourceLimitError, UnsupportedCapabilityError
from .lattice import Lattice, component_sum, cz_apply, divergence, gradient, pairing, site_sum
from .potentials import GaussianPotential, Potential
from .stats import EstimatorResult, from_samples, MIN_BATCHES

log = logging.getLogger(__name__)

__all__ = [
    "FreeEnergyResult",
    "MeanGradient",
    "gaussian_q_exact",
    "gaussian_response",
    "q_brute_force",
    "quadrature_expectation",
    "mean_gradient",
    "q_thermo_integration",
    "exp_moment",
    "schwinger_dyson_residual",
    "time_average",
    "ti_draws",
    "BRUTE_FORCE_TOL",
]

BRUTE_FORCE_TOL = 1e-6
MAX_GRID_SITES = 4
MAX_RING_SITES = 6
LOW_ACCEPTANCE = 0.2


@dataclass
class FreeEnergyResult:
    """``q(h) - q(0)`` with its standard error and how it was obtained."""

    value: float | complex
    se: float | complex
    method: str
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def enc(x):
            return {"re": float(np.real(x)), "im": float(np.imag(x))} if np.iscomplexobj(x) else float(x)

        return {"value": enc(self.value), "se": enc(self.se), "method": self.method,
                "details": {k: v for k, v in self.details.items() if isinstance(v, (int, float, str, bool))}}


def _anisotropic_solve(lat: Lattice, f: np.ndarray, A: np.ndarray, m2: float) -> np.ndarray:
    """``(div A grad + m2)^{-1} f`` by FFT (full grid; the symbol is real)."""
    import scipy.fft as sfft

    g = lat.spectral.grad_full
    symbol = np.real(np.einsum("...i,ij,...j->...", np.conj(g), A, g)) + m2
    axes = lat.scalar_axes
    out = sfft.ifftn(sfft.fftn(f, axes=axes) / symbol, axes=axes)
    return out if np.iscomplexobj(f) else out.real


def gaussian_response(lat: Lattice, A, m2: float, h: np.ndarray, method: str = "spectral") -> np.ndarray:
    """``grad (div A grad + m2)^{-1} div h``, i.e. ``-g(h)`` for a quadratic potential."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 0:
        A = float(A) * np.eye(lat.d)
    if method == "spectral":
        return gradient(lat, _anisotropic_solve(lat, divergence(lat, h), A, m2))
    if method == "dense":
        from .lattice import dense_gradient_matrix

        G = dense_gradient_matrix(lat)
        big = np.kron(np.eye(lat.n_sites), A)
        M = G.T @ big @ G + m2 * np.eye(lat.n_sites)
        flat = np.reshape(h, h.shape[: h.ndim - lat.d - 1] + (-1,))
        sol = np.linalg.solve(M, (flat @ G).T).T
        return (sol @ G.T).reshape(h.shape)
    raise DomainError(f"unknown method {method!r}")


def gaussian_q_exact(lat: Lattice, A, m2: float, h: np.ndarray, method: str = "spectral") -> FreeEnergyResult:
    """Closed form ``q(h) - q(0)`` for ``V(w) = w.A.w/2``; independent of ``eps``."""
    if isinstance(A, GaussianPotential):
        A = A.A
    if m2 <= 0:
        raise DomainError("mass parameter must be positive")
    h = np.asarray(h)
    val = -0.5 * pairing(lat, h, gaussian_response(lat, A, m2, h, method))
    val = val.item() if np.ndim(val) == 0 else val
    return FreeEnergyResult(val, 0.0, f"gaussian-{method}")


def _gh_rule(n: int, var: np.ndarray | float):
    """Nodes and log-weights for ``int exp(-x^2 / 2 var) f(x) dx`` (up to a constant)."""
    t, w = np.polynomial.hermite.hermgauss(n)
    return np.sqrt(2.0 * np.asarray(var))[..., None] * t, np.log(w)


def _grid_weights(lat, potential, eps, m2, h, n, observables, weight, chunk_target=2_000_000):
    """Log-partition function and observable averages on the full tensor grid.

    With ``weight="free"`` the Gaussian ``exp(-[phi, (-Laplacian + m2) phi] / 2 eps)``
    is factored out and the rule is a tensor product in its orthonormal
    eigen-coordinates; the integrand is then
    ``exp(-(h . grad phi + V(grad phi) - |grad phi|^2 / 2) / eps)``.
    ``weight="mass"`` factors out only ``exp(-m2 phi^2 / 2 eps)`` per site.
    """
    from .lattice import dense_neg_laplacian

    N = lat.n_sites
    if weight == "free":
        mu, U = np.linalg.eigh(dense_neg_laplacian(lat))
        var = eps / (mu + m2)
    elif weight == "mass":
        U = np.eye(N)
        var = np.full(N, eps / m2)
    else:
        raise DomainError(f"unknown quadrature weight {weight!r}")
    x, logw = _gh_rule(n, var)
    h = np.asarray(h)
    per = max(1, int(chunk_target // n ** (N - 1)))
    chunks = []
    for start in range(0, n, per):
        idx = np.arange(start, min(n, start + per))
        grids = np.meshgrid(idx, *[np.arange(n)] * (N - 1), indexing="ij")
        z = np.stack([x[k][g] for k, g in enumerate(grids)], axis=-1).reshape(-1, N)
        lw = sum(logw[g] for g in grids).reshape(-1)
        phi = (z @ U.T).reshape((-1,) + lat.shape)
        omega = gradient(lat, phi)
        dens = component_sum(h * omega) + potential.eval(omega, 0)
        if weight == "free":
            dens = dens - 0.5 * component_sum(omega * omega)
        chunks.append((lw - site_sum(lat, dens) / eps, omega, phi))
    expo = np.concatenate([c[0] for c in chunks])
    shift = np.max(expo.real)
    wts = np.exp(expo - shift)
    Z = wts.sum()
    logZ = np.log(Z) + shift
    out = {}
    for name, fn in (observables or {}).items():
        acc, offset = 0.0, 0
        for c in chunks:
            k = c[0].shape[0]
            acc = acc + np.tensordot(wts[offset:offset + k], fn(c[1], c[2]), axes=(0, 0))
            offset += k
        out[name] = acc / Z
    return logZ, out


def _ring_logz(lat, potential, eps, m2, h, n, weight):
    """Transfer-matrix log-partition function on a one-dimensional ring.

    The per-site rule is Gauss-Hermite with the width of the free-field
    marginal (``weight="free"``) or of the mass term (``weight="mass"``).
    """
    mu = lat.spectral.sigma_full.reshape(-1)
    var = eps * float(np.mean(1.0 / (mu + m2))) if weight == "free" else eps / m2
    x, logw = _gh_rule(n, var)
    logw = logw + x**2 / (2.0 * var) - m2 * x**2 / (2.0 * eps)
    h = np.asarray(h)
    diff = x[None, :] - x[:, None]  # phi_{x+1} - phi_x
    M = np.eye(n, dtype=np.result_type(h, float))
    logscale = 0.0
    for site in range(lat.L):
        K = np.exp(logw[:, None] - (h[site, 0] * diff + potential.eval(diff[..., None], 0)) / eps)
        M = M @ K
        s = np.max(np.abs(M))
        M = M / s
        logscale += math.log(s)
    return np.log(np.trace(M)) + logscale


def _brute_logz(lat, potential, eps, m2, h, n, observables=None, weight="free"):
    if lat.n_sites <= MAX_GRID_SITES:
        return _grid_weights(lat, potential, eps, m2, h, n, observables, weight)
    if lat.d == 1 and lat.L <= MAX_RING_SITES and not observables:
        return _ring_logz(lat, potential, eps, m2, h, n, weight), {}
    raise ResourceLimitError(
        f"brute-force quadrature supports at most {MAX_GRID_SITES} sites (or a ring of {MAX_RING_SITES}); "
        f"lattice has {lat.n_sites}"
    )


_REFERENCE_CACHE: dict = {}


def _reference_logz(lat, potential, eps, m2, n, weight):
    """Cached ``log Z(0)`` for one rule."""
    import json

    key = (lat, json.dumps(potential.describe(), sort_keys=True), float(eps), float(m2), n, weight)
    if key not in _REFERENCE_CACHE:
        _REFERENCE_CACHE[key] = _brute_logz(lat, potential, eps, m2, np.zeros(lat.vector_shape), n, weight=weight)[0]
    return _REFERENCE_CACHE[key]


def q_brute_force(
    lat: Lattice,
    potential: Potential,
    eps: float,
    m2: float,
    h: np.ndarray,
    nodes: int = 32,
    check_nodes: int = 48,
    tol: float = BRUTE_FORCE_TOL,
    weight: str = "free",
) -> FreeEnergyResult:
    """``q(h) - q(0)`` by Gauss-Hermite quadrature in every field variable.

    By default the free-field Gaussian is factored out (see
    :func:`_grid_weights`); ``weight="mass"`` uses the bare mass term.  The
    result is computed with ``nodes`` and ``check_nodes`` points per
    dimension; if they differ by more than ``tol`` an
    :class:`OracleFailureError` is raised, otherwise the finer value is
    returned.  Both ``q(h)`` and ``q(0)`` use the same rule, so the
    normalisation constant cancels.
    """
    if eps <= 0 or m2 <= 0:
        raise DomainError("brute force needs positive temperature and mass")
    h = np.asarray(h)
    lat.check_vector(h)
    vals = []
    for n in (nodes, check_nodes):
        lz_h, _ = _brute_logz(lat, potential, eps, m2, h, n, weight=weight)
        lz_0 = _reference_logz(lat, potential, eps, m2, n, weight)
        vals.append(-eps * (lz_h - lz_0))
    gap = abs(vals[1] - vals[0])
    if not gap <= tol:
        raise OracleFailureError(f"quadrature with {nodes} and {check_nodes} nodes differs by {gap:.3g} > {tol:.1g}")
    v = vals[1]
    if not np.iscomplexobj(h):
        v = float(np.real(v))
    return FreeEnergyResult(v, 0.0, "gauss-hermite", {"nodes": check_nodes, "node_gap": float(gap), "weight": weight})


def quadrature_expectation(
    lat: Lattice, potential: Potential, eps: float, m2: float, h: np.ndarray,
    observables: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]], nodes: int = 48,
) -> dict[str, np.ndarray]:
    """Gauss-Hermite expectations under the measure with field ``h``.

    Each observable maps ``(grad phi, phi)`` on a batch of grid points to
    values with the batch on axis 0.  Only the full-grid route (at most
    four sites) supports observables.
    """
    _, out = _brute_logz(lat, potential, eps, m2, np.asarray(h), nodes, observables)
    return out


def time_average(
    cfg: SdeConfig,
    observe: Callable[[np.ndarray], np.ndarray],
    n_steps: int,
    n_chains: int = 32,
    burn_in: int | None = None,
    seed: int | None = None,
    n_batches: int | None = None,
    path: tuple = (),
) -> tuple[np.ndarray, float | None]:
    """Batch means of ``observe(phi)`` over the chains' post-burn-in paths.

    Returns an array of shape ``(n_chains * n_batches, *batch, ...)`` whose
    rows are independent draws, and the mean acceptance rate (MALA).
    """
    if burn_in is None:
        burn_in = int(math.ceil(10.0 / (cfg.rate * cfg.dt)))
    per = n_batches if n_batches is not None else max(1, math.ceil(MIN_BATCHES / n_chains))
    per = max(1, min(per, n_steps))
    blen = n_steps // per
    state = init_state(cfg, n_chains, seed, path=path)
    stepper = _Integrator(cfg)
    for _ in range(burn_in):
        stepper(state)
    if state.n_accept is not None:
        state.n_accept[...] = 0
    means = []
    for _b in range(per):
        acc = None
        for _ in range(blen):
            stepper(state)
            val = observe(state.phi)
            acc = val if acc is None else acc + val
        means.append(acc / blen)
    rate = float(state.n_accept.mean() / (per * blen)) if state.n_accept is not None else None
    if rate is not None and rate < LOW_ACCEPTANCE:
        log.warning("Metropolis acceptance %.3g is low; reduce dt", rate)
    out = np.stack(means, axis=1)  # (n_chains, per, ...)
    return out.reshape((n_chains * per,) + out.shape[2:]), rate


def _drift_response(cfg: SdeConfig) -> np.ndarray:
    return cz_apply(cfg.lattice, cfg.h, cfg.m2, cfg.stiffness)


def gradient_observable(cfg: SdeConfig, estimator: str = "drift") -> Callable[[np.ndarray], np.ndarray]:
    """Per-sample estimator of the mean gradient field."""
    lat, pot, k = cfg.lattice, cfg.potential, cfg.stiffness
    if estimator == "direct":
        return lambda phi: gradient(lat, phi)
    if estimator == "drift":
        c = _drift_response(cfg)

        def obs(phi):
            om = gradient(lat, phi)
            return -c - cz_apply(lat, pot.eval(om, 1, cfg.strip_width) - k * om, cfg.m2, k)

        return obs
    raise DomainError(f"unknown estimator {estimator!r}")


def pairing_observable(cfg: SdeConfig, a: np.ndarray, estimator: str = "drift") -> Callable[[np.ndarray], np.ndarray]:
    """Per-sample estimator of ``[a, g(h)]`` that avoids any FFT per step."""
    lat, pot, k = cfg.lattice, cfg.potential, cfg.stiffness
    a = np.asarray(a)
    if estimator == "direct":
        return lambda phi: pairing(lat, a, gradient(lat, phi))
    if estimator == "drift":
        ca = cz_apply(lat, a, cfg.m2, k)
        base = pairing(lat, ca, cfg.h)

        def obs(phi):
            om = gradient(lat, phi)
            return -base - pairing(lat, ca, pot.eval(om, 1, cfg.strip_width) - k * om)

        return obs
    raise DomainError(f"unknown estimator {estimator!r}")


@dataclass
class MeanGradient:
    """Estimated ``g(h) = <grad phi>_h`` with per-site standard errors."""

    value: np.ndarray
    se: np.ndarray
    n: int
    acceptance: float | None = None


def mean_gradient(
    cfg: SdeConfig,
    n_steps: int,
    n_chains: int = 32,
    burn_in: int | None = None,
    seed: int | None = None,
    estimator: str = "drift",
) -> MeanGradient:
    """Estimate ``g(h)`` by time averages over independent chains."""
    draws, acc = time_average(cfg, gradient_observable(cfg, estimator), n_steps, n_chains, burn_in, seed)
    est = from_samples(draws)
    return MeanGradient(est.mean, est.se, est.n, acc)


def _legendre(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def ti_draws(
    cfg: SdeConfig,
    fields: np.ndarray,
    n_steps: int,
    n_chains: int = 32,
    n_nodes: int = 8,
    burn_in: int | None = None,
    seed: int | None = None,
    estimator: str = "drift",
) -> tuple[np.ndarray, float | None]:
    """Independent draws of ``int_0^1 [h, g(t h)] dt`` for a batch of fields.

    ``fields`` has shape ``(n_fields, *sites, d)``.  Every (node, field)
    pair gets its own chains and all run as one batch.  Returns draws of
    shape ``(n_draws, n_fields)`` and the MALA acceptance rate.
    """
    fields = np.asarray(fields)
    t, w = _legendre(n_nodes)
    shape_t = (-1,) + (1,) * fields.ndim
    hb = t.reshape(shape_t) * fields[None]  # (nodes, n_fields, *vshape)
    bcfg = cfg.replace(h=hb, eta=cfg.eta)
    obs = pairing_observable(bcfg, np.broadcast_to(fields[None], hb.shape), estimator)
    draws, acc = time_average(bcfg, obs, n_steps, n_chains, burn_in, seed)
    return np.tensordot(draws, w, axes=(1, 0)), acc


def q_thermo_integration(
    cfg: SdeConfig,
    n_steps: int,
    n_chains: int = 32,
    n_nodes: int = 8,
    burn_in: int | None = None,
    seed: int | None = None,
    estimator: str = "drift",
    check_nodes: bool = False,
) -> FreeEnergyResult:
    """``q(h) - q(0) = int_0^1 [h, g(t h)] dt`` on ``n_nodes`` Gauss-Legendre nodes.

    All nodes run side by side as one batch; the node-weighted sum over a
    single chain index is an independent draw of the integral, which gives
    the standard error.  ``check_nodes`` repeats the estimate with twice
    the nodes (fresh chains) and records the difference.
    """
    h = cfg.h
    if cfg.batch_shape:
        raise DomainError("thermodynamic integration takes a single external field; see ti_draws")
    draws, acc = ti_draws(cfg, h[None], n_steps, n_chains, n_nodes, burn_in, seed, estimator)
    est = from_samples(draws[:, 0])
    value, se = est.mean, est.se
    if not np.iscomplexobj(h):
        value, se = float(np.real(value)), float(np.real(se))
    details = {"nodes": n_nodes, "draws": est.n, "estimator": estimator}
    if acc is not None:
        details["acceptance"] = acc
    if check_nodes:
        fine = q_thermo_integration(cfg, n_steps, n_chains, 2 * n_nodes, burn_in,
                                    None if seed is None else seed + 1, estimator)
        details["node_doubling_gap"] = float(abs(fine.value - value))
        details["node_doubling_se"] = float(abs(np.hypot(np.real(fine.se), np.real(se))))
    return FreeEnergyResult(value, se, f"thermodynamic-integration-{estimator}", details)


def exp_moment(
    cfg: SdeConfig, a: np.ndarray, n_steps: int, n_chains: int = 32, burn_in: int | None = None,
    seed: int | None = None,
) -> EstimatorResult:
    """``<exp(-[a, grad phi] / eps)>_h`` by direct averaging.

    Raises ``OverflowError`` when an exponent exceeds the float range and
    warns when the variance proxy ``var([a, grad phi]) / eps^2`` exceeds 10,
    in which case thermodynamic integration should be preferred.
    """
    if cfg.is_complex:
        raise UnsupportedCapabilityError("exponential moments are estimated for real fields")
    lat, eps = cfg.lattice, cfg.epsilon
    a = np.asarray(a)
    seen = {"max": -np.inf}

    def obs(phi):
        y = -pairing(lat, a, gradient(lat, phi)) / eps
        seen["max"] = max(seen["max"], float(np.max(y)))
        if seen["max"] > 700:
            raise OverflowError("exponent exceeds the float range; use thermodynamic integration")
        return np.stack([np.exp(y), y, y * y], axis=-1)

    draws, _ = time_average(cfg, obs, n_steps, n_chains, burn_in, seed)
    proxy = float(np.mean(draws[..., 2]) - np.mean(draws[..., 1]) ** 2)
    if proxy > 10:
        log.warning("exponential variance proxy exp(%.3g) exceeds e^10; estimate is unreliable", proxy)
    return from_samples(draws[..., 0])


def schwinger_dyson_residual(traj) -> EstimatorResult:
    """Per-site mean of ``dW/dphi(x) = m2 phi + div(h + V'(grad phi))``; zero in equilibrium."""
    cfg = traj.config
    lat = cfg.lattice
    phi = traj.samples
    dW = cfg.m2 * phi + divergence(lat, cfg.h + cfg.potential.eval(gradient(lat, phi), 1, cfg.strip_width))
    from .stats import batch_means

    return batch_means(dW)

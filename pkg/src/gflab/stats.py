"""Monte Carlo estimates with standard errors.

Independent chains are the primary unit of statistical independence: a
time series of shape ``(n_time, n_chains, ...)`` is cut into contiguous
batches inside each chain and the batch means are treated as independent
draws.  Nonlinear statistics use the jackknife over the same batches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = ["EstimatorResult", "batch_means", "jackknife", "combine", "from_samples", "MIN_BATCHES"]

MIN_BATCHES = 32


@dataclass
class EstimatorResult:
    """Mean, sample variance of the underlying draws, standard error and count.

    ``mean`` and ``se`` may be arrays (per-site estimates) or complex; for
    complex means ``se`` refers to the real and imaginary parts separately.
    """

    mean: np.ndarray | float | complex
    variance: np.ndarray | float
    se: np.ndarray | float
    n: int

    def to_dict(self) -> dict:
        return {"mean": _jsonable(self.mean), "variance": _jsonable(self.variance), "se": _jsonable(self.se), "n": int(self.n)}

    @classmethod
    def exact(cls, value) -> "EstimatorResult":
        return cls(value, 0.0 * np.real(value), 0.0 * np.real(value), 0)

    def z_score(self, target) -> float:
        diff = np.abs(np.asarray(self.mean) - target)
        se = np.asarray(self.se)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
        return float(np.max(z))


def _jsonable(x):
    x = np.asarray(x)
    if np.iscomplexobj(x):
        return {"re": _jsonable(x.real), "im": _jsonable(x.imag)}
    if x.ndim == 0:
        v = float(x)
        return v if math.isfinite(v) else str(v)
    return x.tolist()


def from_samples(samples: np.ndarray, axis: int = 0) -> EstimatorResult:
    """Estimate from independent draws along ``axis``."""
    x = np.moveaxis(np.asarray(samples), axis, 0)
    n = x.shape[0]
    mean = x.mean(axis=0)
    if n < 2:
        return EstimatorResult(mean, np.zeros(np.shape(mean)), np.full(np.shape(mean), np.inf), n)
    if np.iscomplexobj(x):
        var = x.real.var(axis=0, ddof=1) + 1j * x.imag.var(axis=0, ddof=1)
        se = np.sqrt(var.real / n) + 1j * np.sqrt(var.imag / n)
        return EstimatorResult(mean, var, se, n)
    var = x.var(axis=0, ddof=1)
    return EstimatorResult(mean, var, np.sqrt(var / n), n)


def _batches(series: np.ndarray, n_batches: int | None) -> np.ndarray:
    series = np.asarray(series)
    n_time, n_chains = series.shape[:2]
    per_chain = n_batches if n_batches is not None else max(1, math.ceil(MIN_BATCHES / n_chains))
    per_chain = max(1, min(per_chain, n_time))
    blen = n_time // per_chain
    trimmed = series[: blen * per_chain]
    shaped = trimmed.reshape((per_chain, blen, n_chains) + series.shape[2:])
    means = shaped.mean(axis=1)
    return means.reshape((per_chain * n_chains,) + series.shape[2:])


def batch_means(series: np.ndarray, n_batches: int | None = None) -> EstimatorResult:
    """Estimate the mean of a ``(n_time, n_chains, ...)`` series.

    ``n_batches`` is the number of batches per chain; by default enough to
    give at least :data:`MIN_BATCHES` batches in total.  The returned
    ``variance`` is that of the batch means and ``n`` the number of batches.
    """
    return from_samples(_batches(series, n_batches))


def jackknife(
    series: Sequence[np.ndarray], statistic: Callable[..., np.ndarray], n_batches: int | None = None
) -> EstimatorResult:
    """Delete-one-batch jackknife for ``statistic(mean_1, mean_2, ...)``.

    Each element of ``series`` is a ``(n_time, n_chains, ...)`` array of a
    primitive observable; the statistic receives their means.
    """
    blocks = [_batches(s, n_batches) for s in series]
    nb = blocks[0].shape[0]
    full = statistic(*[b.mean(axis=0) for b in blocks])
    sums = [b.sum(axis=0) for b in blocks]
    loo = np.stack([statistic(*[(s - b[i]) / (nb - 1) for s, b in zip(sums, blocks)]) for i in range(nb)])
    centered = loo - loo.mean(axis=0)
    if np.iscomplexobj(centered):
        var = (nb - 1) * (np.mean(centered.real**2, axis=0) + 1j * np.mean(centered.imag**2, axis=0))
        se = np.sqrt(var.real) + 1j * np.sqrt(var.imag)
    else:
        var = (nb - 1) * np.mean(centered**2, axis=0)
        se = np.sqrt(var)
    return EstimatorResult(full, var, se, nb)


def combine(results: Sequence[EstimatorResult]) -> EstimatorResult:
    """Pool estimates of the same quantity from independent runs.

    Means are weighted by the number of draws, so pooling is associative
    and agrees with estimating from the concatenated draws.
    """
    ns = np.array([r.n for r in results], dtype=float)
    total = ns.sum()
    mean = sum(n * np.asarray(r.mean) for n, r in zip(ns, results)) / total
    # within + between sums of squares of the underlying draws
    ss = sum((n - 1) * np.asarray(r.variance) + n * np.abs(np.asarray(r.mean) - mean) ** 2 for n, r in zip(ns, results))
    var = ss / max(total - 1, 1)
    return EstimatorResult(mean, var, np.sqrt(np.real(var) / total), int(total))

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gflab.rng import SEED_ENV, make_rng, resolve_seed, spawn
from gflab.stats import EstimatorResult, batch_means, combine, from_samples, jackknife


def test_from_samples_matches_numpy(rng):
    x = rng.standard_normal((50, 3))
    est = from_samples(x)
    np.testing.assert_allclose(est.mean, x.mean(0))
    np.testing.assert_allclose(est.se, x.std(0, ddof=1) / np.sqrt(50))
    assert est.n == 50


def test_complex_se_is_per_part(rng):
    x = rng.standard_normal(100) + 3j * rng.standard_normal(100)
    est = from_samples(x)
    assert est.se.real == pytest.approx(x.real.std(ddof=1) / 10)
    assert est.se.imag == pytest.approx(x.imag.std(ddof=1) / 10)


def test_batch_means_shapes(rng):
    series = rng.standard_normal((64, 4, 2))
    est = batch_means(series, n_batches=8)
    assert est.n == 32 and est.mean.shape == (2,)
    np.testing.assert_allclose(est.mean, series.mean((0, 1)))


def test_jackknife_linear_statistic_equals_plain(rng):
    series = rng.standard_normal((64, 4))
    jk = jackknife([series], lambda m: 2.0 * m, n_batches=8)
    plain = batch_means(series, n_batches=8)
    assert jk.mean == pytest.approx(2 * plain.mean)
    assert jk.se == pytest.approx(2 * plain.se)


def test_jackknife_variance_unbiased_scale(rng):
    x = rng.standard_normal((4000, 8))
    jk = jackknife([x, x * x], lambda a, b: b - a * a)
    assert abs(jk.mean - 1.0) < 4 * jk.se


@given(st.lists(st.integers(2, 30), min_size=1, max_size=4), st.integers(0, 1000))
def test_combine_equals_concatenation(sizes, seed):
    r = np.random.default_rng(seed)
    parts = [r.standard_normal(n) for n in sizes]
    pooled = combine([from_samples(p) for p in parts])
    full = from_samples(np.concatenate(parts))
    assert pooled.mean == pytest.approx(full.mean, abs=1e-12)
    assert pooled.variance == pytest.approx(full.variance, rel=1e-9, abs=1e-12)
    assert pooled.n == full.n


def test_exact_result_and_zscore():
    e = EstimatorResult.exact(2.0)
    assert e.se == 0 and e.z_score(2.0) == 0 and e.z_score(3.0) == np.inf
    assert EstimatorResult(1.0, 1.0, 0.5, 4).z_score(2.0) == pytest.approx(2.0)


def test_streams_depend_only_on_path():
    a = make_rng(7, 1, 2).standard_normal(5)
    _ = make_rng(7, 3).standard_normal(100)
    b = make_rng(7, 1, 2).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(7, 2, 1).standard_normal(5))
    s = spawn(7, 3, 1)
    assert np.array_equal(s[2].standard_normal(5), make_rng(7, 1, 2).standard_normal(5))


def test_seed_environment_override(monkeypatch):
    monkeypatch.setenv(SEED_ENV, "99")
    assert resolve_seed(None) == 99
    assert resolve_seed(5) == 5
    monkeypatch.delenv(SEED_ENV)
    assert resolve_seed(None) == 0

import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gflab import GaussianPotential, Lattice, SdeConfig, run_chain
from gflab.errors import DomainError
from gflab.io import (
    PLOT_COLUMNS,
    decode_field,
    dump_json,
    encode_field,
    read_field,
    read_trajectory,
    to_jsonable,
    write_csv,
    write_field,
    write_trajectory,
)


@given(st.integers(1, 3), st.sampled_from([2, 4]), st.booleans(), st.booleans(), st.integers(0, 2**31))
def test_field_round_trip(d, L, cplx, vector, seed):
    lat = Lattice(d, L)
    r = np.random.default_rng(seed)
    shape = lat.vector_shape if vector else lat.shape
    x = r.standard_normal(shape)
    if cplx:
        x = x + 1j * r.standard_normal(shape)
    buf = encode_field(lat, x)
    lat2, y, end = decode_field(buf)
    assert end == len(buf) and lat2.d == d and lat2.L == L
    assert y.dtype == x.dtype
    np.testing.assert_array_equal(x, y)


def test_field_layout_components_innermost(tmp_path):
    lat = Lattice(2, 2)
    F = np.arange(8.0).reshape(lat.vector_shape)
    write_field(tmp_path / "f.gfl", lat, F)
    raw = (tmp_path / "f.gfl").read_bytes()
    assert raw[:4] == b"GFL1"
    np.testing.assert_array_equal(np.frombuffer(raw[14:], "<f8"), np.arange(8.0))
    _, G = read_field(tmp_path / "f.gfl")
    np.testing.assert_array_equal(F, G)


def test_bad_records():
    lat = Lattice(1, 4)
    buf = encode_field(lat, np.zeros(4))
    with pytest.raises(DomainError, match="magic"):
        decode_field(b"XXXX" + buf[4:])
    with pytest.raises(DomainError, match="truncated"):
        decode_field(buf[:-1])
    with pytest.raises(DomainError):
        encode_field(lat, np.zeros(5))


def test_trajectory_round_trip(tmp_path):
    lat = Lattice(2, 4)
    cfg = SdeConfig(lat, GaussianPotential(2, 1.0), 1.0, 0.5, dt=0.1)
    tr = run_chain(cfg, 20, burn_in=5, n_chains=3, seed=2, thin=2)
    write_trajectory(tmp_path / "t.gft", tr)
    head, samples = read_trajectory(tmp_path / "t.gft")
    np.testing.assert_array_equal(samples, tr.samples)
    assert head["config_hash"] == cfg.hash() and head["thin"] == 2 and head["scheme"] == cfg.scheme


def test_to_jsonable_strict():
    obj = {"a": np.float64(1.5), "b": np.arange(3), "c": 1 + 2j, "d": float("nan"), "e": -np.inf,
           "f": np.complex128(3.0), "g": np.bool_(True)}
    out = json.loads(dump_json(obj))
    assert out == {"a": 1.5, "b": [0, 1, 2], "c": {"re": 1.0, "im": 2.0}, "d": "nan", "e": "-inf",
                   "f": 3.0, "g": True}
    json.dumps(to_jsonable(obj), allow_nan=False)


def test_csv_header_only():
    assert write_csv(None, PLOT_COLUMNS, []) == "series,x,y,y_err\n"
    text = write_csv(None, ["a", "b"], [{"a": 1 + 2j, "b": None}])
    assert text.splitlines()[1] == "1.0+2.0j,"

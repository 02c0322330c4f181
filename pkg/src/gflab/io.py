"""Binary field files, trajectory files and JSON/CSV reports.

Field record: the header ``struct.pack("<4sIIBB", b"GFL1", d, L, is_complex,
is_vector)`` followed by little-endian float64 values in row-major site order
with vector components innermost; complex values are stored as consecutive
``(re, im)`` pairs.

Trajectory file: ``b"GFT1"``, a little-endian uint32 byte count, a UTF-8 JSON
header (config hash, seed, scheme, dt, counts, times), then one field record
per retained sample.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError
from .lattice import Lattice

__all__ = [
    "FIELD_MAGIC",
    "TRAJ_MAGIC",
    "encode_field",
    "decode_field",
    "write_field",
    "read_field",
    "write_trajectory",
    "read_trajectory",
    "to_jsonable",
    "dump_json",
    "write_csv",
    "PLOT_COLUMNS",
    "BOUNDS_COLUMNS",
]

FIELD_MAGIC = b"GFL1"
TRAJ_MAGIC = b"GFT1"
_HEADER = struct.Struct("<4sIIBB")
PLOT_COLUMNS = ("series", "x", "y", "y_err")
BOUNDS_COLUMNS = ("name", "lhs", "rhs", "se", "margin", "verdict")


def encode_field(lat: Lattice, values: np.ndarray) -> bytes:
    """Serialise one scalar or vector field."""
    values = np.asarray(values)
    if values.shape == lat.shape:
        vector = False
    elif values.shape == lat.vector_shape:
        vector = True
    else:
        raise DomainError(f"field shape {values.shape} matches neither {lat.shape} nor {lat.vector_shape}")
    cplx = bool(np.iscomplexobj(values))
    head = _HEADER.pack(FIELD_MAGIC, lat.d, lat.L, int(cplx), int(vector))
    body = np.ascontiguousarray(values, dtype="<c16" if cplx else "<f8").tobytes()
    return head + body


def decode_field(buf: bytes, offset: int = 0) -> tuple[Lattice, np.ndarray, int]:
    """Parse one field record; returns the lattice, the values and the next offset."""
    if len(buf) - offset < _HEADER.size:
        raise DomainError("truncated field header")
    magic, d, L, cplx, vector = _HEADER.unpack_from(buf, offset)
    if magic != FIELD_MAGIC:
        raise DomainError(f"bad field magic {magic!r}")
    lat = Lattice(d, L)
    shape = lat.vector_shape if vector else lat.shape
    dtype = np.dtype("<c16" if cplx else "<f8")
    count = int(np.prod(shape))
    start = offset + _HEADER.size
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise DomainError("truncated field data")
    values = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(shape)
    return lat, values.astype(complex if cplx else float), end


def write_field(path, lat: Lattice, values: np.ndarray) -> None:
    Path(path).write_bytes(encode_field(lat, values))


def read_field(path) -> tuple[Lattice, np.ndarray]:
    lat, values, _ = decode_field(Path(path).read_bytes())
    return lat, values


def write_trajectory(path, traj) -> None:
    """Write a :class:`~gflab.dynamics.Trajectory`; samples of all chains are stored in order."""
    cfg = traj.config
    lat = cfg.lattice
    samples = np.asarray(traj.samples)
    flat = samples.reshape((-1,) + lat.shape)
    header = {
        "config_hash": cfg.hash(),
        "config": cfg.describe(),
        "seed": traj.seed,
        "scheme": cfg.scheme,
        "dt": cfg.dt,
        "burn_in": traj.burn_in,
        "thin": traj.thin,
        "sample_shape": list(samples.shape[: samples.ndim - lat.d]),
        "n_records": int(flat.shape[0]),
        "times": np.asarray(traj.times).tolist(),
    }
    head = json.dumps(to_jsonable(header), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(TRAJ_MAGIC + struct.pack("<I", len(head)) + head)
        for field in flat:
            fh.write(encode_field(lat, field))


def read_trajectory(path) -> tuple[dict, np.ndarray]:
    """Return the header and the samples array (shape restored from the header)."""
    buf = Path(path).read_bytes()
    if buf[:4] != TRAJ_MAGIC:
        raise DomainError(f"bad trajectory magic {buf[:4]!r}")
    (n,) = struct.unpack_from("<I", buf, 4)
    header = json.loads(buf[8 : 8 + n].decode())
    offset = 8 + n
    fields = []
    for _ in range(header["n_records"]):
        lat, values, offset = decode_field(buf, offset)
        fields.append(values)
    arr = np.stack(fields) if fields else np.zeros((0,))
    if fields:
        arr = arr.reshape(tuple(header["sample_shape"]) + lat.shape)
    return header, arr


def to_jsonable(x):
    """Convert numpy scalars/arrays, complex numbers and non-finite floats for strict JSON."""
    if isinstance(x, dict):
        return {str(k): to_jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [to_jsonable(v) for v in x]
    if hasattr(x, "to_dict"):
        return to_jsonable(x.to_dict())
    if isinstance(x, np.ndarray):
        return to_jsonable(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer, int)):
        return int(x)
    if isinstance(x, (complex, np.complexfloating)):
        c = complex(x)
        if c.imag == 0:
            return to_jsonable(c.real)
        return {"re": to_jsonable(c.real), "im": to_jsonable(c.imag)}
    if isinstance(x, (float, np.floating)):
        f = float(x)
        if math.isfinite(f):
            return f
        return "nan" if math.isnan(f) else ("inf" if f > 0 else "-inf")
    return x


def dump_json(obj, path=None) -> str:
    text = json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _cell(v):
    v = to_jsonable(v)
    if isinstance(v, dict):
        return f"{v['re']}{'+' if not str(v['im']).startswith('-') else ''}{v['im']}j"
    return "" if v is None else v


def write_csv(path, columns: Iterable[str], rows: Iterable[dict]) -> str:
    """Write rows (dicts) with a fixed header; returns the CSV text."""
    columns = list(columns)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text

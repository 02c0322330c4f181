import json
import textwrap
import time

import numpy as np
import pytest

from gflab.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from gflab.rng import SEED_ENV

GAUSS = """\
schema_version: 1
seed: 3
lattice: {d: 2, L: 8}
potential: {kind: gaussian, A: 1.0}
m2: 0.5
jobs:
  - kind: bounds
  - kind: kappa
  - kind: covariance
    xs: [[2, 0], [4, 0]]
"""


def _write(tmp_path, text, name="c.yaml"):
    p = tmp_path / name
    p.write_text(textwrap.dedent(text))
    return p


def _run(tmp_path, cfg, out="out", *extra):
    code = main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / out), *extra])
    return code, json.loads((tmp_path / out / "report.json").read_text())


def test_empty_job_list(tmp_path):
    cfg = _write(tmp_path, "schema_version: 1\nlattice: {d: 1, L: 4}\npotential: {kind: gaussian}\n")
    code, rep = _run(tmp_path, cfg)
    assert code == EXIT_OK and rep["jobs"] == [] and rep["summary"]["n_checks"] == 0
    assert (tmp_path / "out" / "plot.csv").read_text() == "series,x,y,y_err\n"


def test_gaussian_bounds_all_pass_and_deterministic(tmp_path):
    cfg = _write(tmp_path, GAUSS)
    t0 = time.perf_counter()
    code, rep = _run(tmp_path, cfg, "a")
    assert time.perf_counter() - t0 < 60
    assert code == EXIT_OK
    s = rep["summary"]
    assert s["n_fail"] == 0 and s["n_errors"] == 0 and s["n_pass"] > 10
    code2, _ = _run(tmp_path, cfg, "b", "--threads", "3")
    assert code2 == EXIT_OK
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()
    rows = (tmp_path / "a" / "bounds.csv").read_text().splitlines()
    assert rows[0] == "name,lhs,rhs,se,margin,verdict" and len(rows) == s["n_checks"] + 1
    assert len((tmp_path / "a" / "covariance.csv").read_text().splitlines()) == 3
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    assert "wall_seconds" in meta


def test_seed_precedence(tmp_path, monkeypatch):
    cfg = _write(tmp_path, "schema_version: 1\nseed: 4\nlattice: {d: 1, L: 4}\npotential: {kind: gaussian}\n")
    monkeypatch.setenv(SEED_ENV, "11")
    assert _run(tmp_path, cfg, "a")[1]["seed"] == 11
    assert _run(tmp_path, cfg, "b", "--seed", "5")[1]["seed"] == 5
    monkeypatch.delenv(SEED_ENV)
    assert _run(tmp_path, cfg, "c")[1]["seed"] == 4


def test_validate_diagnostics(tmp_path, capsys):
    good = _write(tmp_path, GAUSS)
    assert main(["validate", "--config", str(good)]) == EXIT_OK
    bad = _write(tmp_path, "schema_version: 1\nlattice: {d: 2, L: 5}\npotential: {kind: gaussian}\n", "bad.yaml")
    assert main(["validate", "--config", str(bad)]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "bad.yaml:2:" in err and "lattice.L" in err and "even" in err
    typo = _write(tmp_path, "schema_version: 1\nlatice: {d: 2, L: 4}\npotential: {kind: gaussian}\n", "t.yaml")
    assert main(["run", "--config", str(typo)]) == EXIT_USAGE
    assert "latice" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "missing.yaml")]) == EXIT_USAGE


def test_crash_isolation_and_skips(tmp_path):
    cfg = _write(tmp_path, """\
        schema_version: 1
        lattice: {d: 2, L: 8}
        potential: {kind: dipole, a: 0.3}
        sampler: {n_steps: 20, n_chains: 2}
        jobs:
          - {kind: free-energy, method: exact, name: exact}
          - {kind: free-energy, method: brute-force, name: brute}
          - {kind: kappa, name: kappa}
        """)
    code, rep = _run(tmp_path, cfg)
    status = {r["name"]: r["status"] for r in rep["jobs"]}
    assert status == {"exact": "skipped", "brute": "error", "kappa": "ok"}
    assert "ResourceLimitError" in rep["jobs"][1]["error"]
    assert code == EXIT_FAILED and rep["summary"]["failed_jobs"] == ["brute"]


def test_strict_promotes_skips(tmp_path):
    cfg = _write(tmp_path, """\
        schema_version: 1
        lattice: {d: 2, L: 4}
        potential: {kind: dipole, a: 0.3}
        jobs:
          - {kind: free-energy, method: exact}
        """)
    assert _run(tmp_path, cfg, "a")[0] == EXIT_OK
    assert _run(tmp_path, cfg, "b", "--strict")[0] == EXIT_FAILED


def test_optional_job_failure_does_not_fail_run(tmp_path):
    cfg = _write(tmp_path, """\
        schema_version: 1
        lattice: {d: 2, L: 8}
        potential: {kind: dipole, a: 0.3}
        jobs:
          - {kind: free-energy, method: brute-force, required: false}
        """)
    assert _run(tmp_path, cfg)[0] == EXIT_OK


def test_oracle(capsys):
    assert main(["oracle", "--d", "1", "--L", "2", "--nodes", "24", "--check-nodes", "32"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out[0]["node_gap"] < 1e-6 and np.isfinite(out[0]["q"])


def test_sample_job_writes_trajectory(tmp_path):
    cfg = _write(tmp_path, """\
        schema_version: 1
        lattice: {d: 2, L: 4}
        potential: {kind: gaussian}
        h: {kind: random, norm: 0.3}
        sampler: {n_steps: 50, n_chains: 2}
        jobs:
          - {kind: sample, save_trajectory: true, name: s}
        """)
    code, rep = _run(tmp_path, cfg)
    assert code == EXIT_OK
    from gflab.io import read_trajectory

    files = list((tmp_path / "out").glob("*.gft"))
    assert len(files) == 1
    head, samples = read_trajectory(files[0])
    assert samples.shape[-2:] == (4, 4)

"""Command line entry point: ``gflab run | validate | oracle``.

Exit codes: 0 when every required check passed, 1 when a required check
failed or a required job crashed, 2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import logging
import math
import os
import platform
import sys
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import (
    FAIL,
    PASS,
    SKIPPED,
    BoundCheck,
    McBudget,
    check_complex_bounds,
    check_contraction,
    check_cubic_remainder,
    check_exp_concentration,
    check_exp_phi_bounds,
    check_q_sandwich,
    check_variance_bounds,
    estimate_kappa_p,
    make_check,
    skipped,
)
from .config import (
    BoundsJob,
    CovarianceJob,
    ExperimentConfig,
    FreeEnergyJob,
    GaussianSpec,
    KappaJob,
    SampleJob,
    config_hash,
    load_config,
)
from .correlators import charge_covariance, dipole_test_function
from .dynamics import SdeConfig, run_chain
from .errors import AdmissibilityError, ConfigError, DomainError, GflabError, UnsupportedCapabilityError
from .free_energy import gaussian_q_exact, q_brute_force, q_thermo_integration, schwinger_dyson_residual
from .io import BOUNDS_COLUMNS, PLOT_COLUMNS, dump_json, read_field, to_jsonable, write_csv, write_trajectory
from .lattice import Lattice, gradient, lp_norm
from .potentials import DipolePotential, GaussianPotential
from .rng import SEED_ENV, make_rng

__all__ = ["main", "run", "build_model", "build_field", "emit_plot_data", "EXIT_OK", "EXIT_FAILED", "EXIT_USAGE"]

log = logging.getLogger("gflab")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
# admissibility problems detected before or during a check become SKIP records
_SKIP_ERRORS = (AdmissibilityError, DomainError, UnsupportedCapabilityError)


# ---------------------------------------------------------------- model construction


def default_dt(scheme: str, L: int) -> float:
    """Step size when the config leaves it open; MALA acceptance falls with the lattice size."""
    return min(1.0, 4.0 / L) if scheme == "mala" else 0.05


def build_potential(ec: ExperimentConfig):
    spec, d = ec.potential, ec.lattice.d
    if isinstance(spec, GaussianSpec):
        return GaussianPotential(d, spec.A)
    return DipolePotential(d, spec.a)


def build_field(ec: ExperimentConfig, lat: Lattice, base: Path | None = None) -> np.ndarray:
    """External field from the ``h`` section."""
    spec = ec.h
    if spec.kind == "zero":
        return np.zeros(lat.vector_shape)
    if spec.kind == "random":
        rng = make_rng(spec.seed, 7)
        h = np.zeros(lat.vector_shape, dtype=complex if spec.imag_norm else float)
        if spec.norm:
            r = rng.standard_normal(lat.vector_shape)
            h = h + spec.norm * r / lp_norm(lat, r, 2)
        if spec.imag_norm:
            s = rng.standard_normal(lat.vector_shape)
            h = h + 1j * spec.imag_norm * s / lp_norm(lat, s, 2)
        return h
    if spec.kind == "point-dipole":
        h = np.zeros(lat.vector_shape, dtype=complex)
        h[tuple(v % lat.L for v in spec.x) + (spec.direction,)] = spec.strength
        return h if np.any(h.imag) else h.real
    if spec.kind == "test-function":
        h = spec.strength * dipole_test_function(lat, spec.x, spec.nu).values
        return h if np.any(np.imag(h)) else np.real(h)
    path = Path(spec.path)
    if base is not None and not path.is_absolute():
        path = base / path
    if not path.exists():
        raise ConfigError(f"h.path: field file {path} not found")
    flat, h = read_field(path)
    if (flat.d, flat.L) != (lat.d, lat.L) or h.shape != lat.vector_shape:
        raise ConfigError(f"h.path: field file {path} is for d={flat.d}, L={flat.L}, not a vector field on this lattice")
    return h


def build_model(ec: ExperimentConfig, m2: float, h: np.ndarray | None = None) -> SdeConfig:
    lat = Lattice(ec.lattice.d, ec.lattice.L)
    s = ec.sampler
    h = np.zeros(lat.vector_shape) if h is None else h
    scheme = s.scheme
    if scheme == "mala" and np.iscomplexobj(h) and np.any(np.imag(h)):
        scheme = "exponential_euler"
    dt = s.dt if s.dt is not None else default_dt(scheme, lat.L)
    return SdeConfig(lat, build_potential(ec), ec.epsilon, m2, h=h, dt=dt, scheme=scheme,
                     stiffness=s.stiffness, eta=s.eta if np.iscomplexobj(h) else None)


def job_seed(seed: int, job: int, grid: int) -> int:
    return int(np.random.SeedSequence([seed, job, grid]).generate_state(1)[0])


def _budget(ec: ExperimentConfig, seed: int) -> McBudget:
    s = ec.sampler
    return McBudget(s.n_steps, s.n_chains, s.n_nodes, s.burn_in, seed)


# ---------------------------------------------------------------- jobs


def _random_fields(lat: Lattice, n: int, norm: float, seed: int) -> np.ndarray:
    rng = make_rng(seed, 11)
    r = rng.standard_normal((n,) + lat.vector_shape)
    return norm * r / lp_norm(lat, r, 2)[(...,) + (None,) * (lat.d + 1)]


def _guard(name: str, fn):
    """Run ``fn``; admissibility errors become a single SKIP record."""
    try:
        return fn()
    except _SKIP_ERRORS as exc:
        return [skipped(name, f"{type(exc).__name__}: {exc}")]


def _flatten(x) -> list[BoundCheck]:
    if isinstance(x, BoundCheck):
        return [x]
    out = []
    for item in x:
        out.extend(_flatten(item))
    return out


def _job_bounds(ec: ExperimentConfig, job: BoundsJob, cfg: SdeConfig, seed: int, out_dir: Path) -> dict:
    lat = cfg.lattice
    budget = _budget(ec, seed)
    fields = _random_fields(lat, job.n_fields, job.field_norm, seed)
    real_cfg = cfg.replace(h=np.real(cfg.h)) if cfg.is_complex else cfg
    checks: list[BoundCheck] = []

    def complex_fields():
        cc = real_cfg.constants
        eta = ec.sampler.eta or min(0.05, cc.lam / 4)
        sc = real_cfg.potential.strip_constants(eta)
        im_norm = min(job.imag_fraction * (cc.lam - eta) * sc.delta, job.field_norm)
        imag = _random_fields(lat, job.n_fields, im_norm, seed + 1)
        scheme_cfg = real_cfg.replace(scheme="exponential_euler",
                                      dt=ec.sampler.dt if ec.sampler.scheme != "mala" and ec.sampler.dt else 0.05)
        H = fields + 1j * imag
        return check_complex_bounds(scheme_cfg.replace(h=H[0], eta=eta), H, budget, eta=eta, z=job.z)

    runners = {
        "variance": lambda: check_variance_bounds(real_cfg, fields, budget, job.z),
        "sandwich": lambda: check_q_sandwich(real_cfg, fields, budget, job.z),
        "complex": complex_fields,
        "cubic": lambda: check_cubic_remainder(real_cfg, fields[0], budget, z=job.z),
        "concentration": lambda: [check_exp_concentration(real_cfg, a, budget, job.z) for a in fields],
        "contraction": lambda: check_contraction(real_cfg, job.contraction_pairs, dt=job.contraction_dt, seed=seed),
        "exp-phi": lambda: check_exp_phi_bounds(real_cfg, job.rho, budget, z=job.z),
    }
    for name in job.checks:
        checks.extend(_flatten(_guard(name, runners[name])))
    return {"checks": [c.to_dict() for c in checks]}


def _job_free_energy(ec: ExperimentConfig, job: FreeEnergyJob, cfg: SdeConfig, seed: int, out_dir: Path) -> dict:
    method = job.method
    if method == "auto":
        method = "exact" if cfg.potential.is_gaussian else "thermo-integration"
    if method == "exact":
        if not cfg.potential.is_gaussian:
            raise UnsupportedCapabilityError("the closed form needs a Gaussian potential")
        res = gaussian_q_exact(cfg.lattice, cfg.potential.A, cfg.m2, cfg.h)
    elif method == "brute-force":
        res = q_brute_force(cfg.lattice, cfg.potential, cfg.epsilon, cfg.m2, cfg.h, nodes=job.nodes,
                            check_nodes=int(1.5 * job.nodes))
    else:
        s = ec.sampler
        res = q_thermo_integration(cfg, s.n_steps, s.n_chains, s.n_nodes, s.burn_in, seed)
    return {"results": {"q": res.value, "se": res.se, "method": res.method, "details": res.details}}


def _job_sample(ec: ExperimentConfig, job: SampleJob, cfg: SdeConfig, seed: int, out_dir: Path) -> dict:
    s = ec.sampler
    traj = run_chain(cfg, s.n_steps, s.burn_in, job.thin, s.n_chains, seed)
    lat = cfg.lattice
    om = gradient(lat, traj.samples)
    energy = np.mean(np.real(om * np.conj(om)).sum(axis=tuple(range(2, om.ndim)))) / lat.n_sites
    sd = schwinger_dyson_residual(traj)
    z = np.abs(np.real(sd.mean)) / np.maximum(np.real(sd.se), 1e-300)
    res = {
        "n_samples": traj.n_samples,
        "acceptance": None if traj.acceptance is None else float(np.mean(traj.acceptance)),
        "mean_gradient_square_per_site": float(energy),
        "schwinger_dyson_max_abs_z": float(np.max(z)),
        "config_hash": cfg.hash(),
    }
    if job.save_trajectory:
        path = out_dir / f"{job.name or 'sample'}-m2_{cfg.m2:g}.gft"
        write_trajectory(path, traj)
        res["trajectory"] = path.name
    return {"results": res}


def _job_covariance(ec: ExperimentConfig, job: CovarianceJob, cfg: SdeConfig, seed: int, out_dir: Path) -> dict:
    s = ec.sampler
    real_cfg = cfg.replace(h=np.zeros(cfg.lattice.vector_shape))
    rows = []
    for i, x in enumerate(job.xs):
        cov = charge_covariance(real_cfg, x, job.rho, job.nu, s.n_steps, s.n_chains, s.n_nodes, s.burn_in,
                                job_seed(seed, i, 0), job.quadratic)
        rows.append(cov.row())
    return {"rows": rows}


def _job_kappa(ec: ExperimentConfig, job: KappaJob, cfg: SdeConfig, seed: int, out_dir: Path) -> dict:
    checks, results = [], []
    for p in job.p:
        est = estimate_kappa_p(cfg.lattice, cfg.m2, p, job.n_probes, seed=seed)
        results.append({"p": p, "kappa_p_lower": est.kappa_p_lower, "n_probes": est.n_probes})
        if p == 2:
            checks.append(make_check("CZ-norm-p2", est.kappa_p_lower, 0.0, 1.0 + job.tolerance, 0.0, p=p))
    return {"checks": [c.to_dict() for c in checks], "results": results}


_RUNNERS = {
    "bounds": _job_bounds,
    "free-energy": _job_free_energy,
    "sample": _job_sample,
    "covariance": _job_covariance,
    "kappa": _job_kappa,
}


def _execute(ec: ExperimentConfig, i: int, j: int, m2: float, seed: int, h_result, out_dir: Path) -> tuple[dict, float]:
    job = ec.jobs[i]
    rec = {"name": ec.job_name(i), "kind": job.kind, "required": job.required, "m2": m2,
           "seed": job_seed(seed, i, j), "status": "ok", "checks": [], "rows": [], "results": None}
    t0 = time.perf_counter()
    try:
        if isinstance(h_result, Exception):
            raise h_result
        cfg = build_model(ec, m2, h_result)
        rec.update(_RUNNERS[job.kind](ec, job, cfg, rec["seed"], out_dir))
    except _SKIP_ERRORS as exc:
        rec["status"] = "skipped"
        rec["checks"] = [skipped(rec["name"], f"{type(exc).__name__}: {exc}").to_dict()]
    except Exception as exc:  # crash isolation: record and continue with sibling jobs
        rec["status"] = "error"
        rec["error"] = f"{type(exc).__name__}: {exc}"
        log.debug("job %s failed\n%s", rec["name"], traceback.format_exc())
    return rec, time.perf_counter() - t0


def _job_failed(rec: dict, strict: bool) -> bool:
    if not rec["required"]:
        return False
    if rec["status"] == "error":
        return True
    bad = {FAIL} | ({SKIPPED, "SKIPPED-vacuous"} if strict else set())
    return any(c["verdict"] in bad for c in rec["checks"])


def run(ec: ExperimentConfig, seed: int | None = None, threads: int = 1, out_dir=None, strict: bool = False,
        base: Path | None = None) -> tuple[int, dict]:
    """Execute every job on every ``m2`` of the grid; writes the report files and returns the exit code."""
    seed = ec.seed if seed is None else int(seed)
    out_dir = Path(out_dir if out_dir is not None else ec.output.dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _dt.datetime.now(_dt.timezone.utc).isoformat()
    lat = Lattice(ec.lattice.d, ec.lattice.L)
    try:
        h = build_field(ec, lat, base)
    except ConfigError:
        raise
    except Exception as exc:  # e.g. an inadmissible field: every job records it
        h = exc
    tasks = [(i, j, m2) for i in range(len(ec.jobs)) for j, m2 in enumerate(ec.m2_grid)]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        done = list(pool.map(lambda t: _execute(ec, t[0], t[1], t[2], seed, h, out_dir), tasks))
    jobs = [r for r, _ in done]
    failed = [r["name"] for r in jobs if _job_failed(r, strict)]
    all_checks = [c for r in jobs for c in r["checks"]]
    exit_code = EXIT_FAILED if failed else EXIT_OK
    report = to_jsonable({
        "schema_version": ec.schema_version,
        "config_hash": config_hash(ec),
        "seed": seed,
        "strict": strict,
        "jobs": jobs,
        "summary": {
            "n_jobs": len(jobs),
            "n_checks": len(all_checks),
            "n_pass": sum(c["verdict"] == PASS for c in all_checks),
            "n_fail": sum(c["verdict"] == FAIL for c in all_checks),
            "n_skipped": sum(c["verdict"].startswith(SKIPPED) for c in all_checks),
            "n_errors": sum(r["status"] == "error" for r in jobs),
            "failed_jobs": failed,
            "exit_code": exit_code,
        },
    })
    metadata = {
        "started": started,
        "finished": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "host": platform.node(),
        "platform": platform.platform(),
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "gflab": __version__,
        "threads": threads,
        "wall_seconds": {f"{r['name']}@m2={r['m2']:g}": t for r, t in done},
    }
    o = ec.output
    dump_json(report, out_dir / o.report)
    dump_json(metadata, out_dir / o.metadata)
    write_csv(out_dir / o.bounds_csv, BOUNDS_COLUMNS, _bounds_rows(report))
    write_csv(out_dir / o.covariance_csv, _COV_COLUMNS, _cov_rows(report))
    write_csv(out_dir / o.plot_csv, PLOT_COLUMNS, emit_plot_data(report))
    return exit_code, report


_COV_COLUMNS = ("job", "m2", "x", "|x|", "estimate", "se", "exponent", "exponent_se", "quadratic",
                "quadratic_se", "remainder", "remainder_se")


def _bounds_rows(report: dict) -> list[dict]:
    rows = []
    for r in report.get("jobs", []):
        for c in r["checks"]:
            rows.append({"name": f"{r['name']}/{c['name']}", "lhs": c["lhs"], "rhs": c["rhs"],
                         "se": math.hypot(c["lhs_se"] or 0.0, c["rhs_se"] or 0.0),
                         "margin": c["margin"], "verdict": c["verdict"]})
    return rows


def _cov_rows(report: dict) -> list[dict]:
    return [dict(row, job=r["name"], m2=r["m2"]) for r in report.get("jobs", []) for row in r["rows"]]


def _as_complex(v) -> complex:
    if isinstance(v, dict):
        return complex(float(v["re"]), float(v["im"]))
    return complex(float(v))


def emit_plot_data(report: dict) -> list[dict]:
    """Tidy rows ``(series, x, y, y_err)``: bound margins and covariance decay."""
    rows = []
    for r in report.get("jobs", []):
        tag = f"{r['name']}@m2={r['m2']:g}"
        for c in r["checks"]:
            if c["margin"] is not None:
                rows.append({"series": f"{tag}/margin", "x": c["name"], "y": c["margin"], "y_err": ""})
        for row in r["rows"]:
            mag = abs(_as_complex(row["estimate"]))
            se_abs = abs(_as_complex(row["se"]))
            rows.append({
                "series": f"{tag}/log-covariance",
                "x": row["|x|"],
                "y": math.log(mag) if mag > 0 else "-inf",
                "y_err": se_abs / mag if mag > 0 else "inf",
            })
    return rows


# ---------------------------------------------------------------- command line


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gflab", description="Gradient-field sampling and bound checks.")
    ap.add_argument("--version", action="version", version=f"gflab {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every job of a config")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int, default=None, help=f"overrides the config seed and ${SEED_ENV}")
    r.add_argument("--threads", type=int, default=1)
    r.add_argument("--out-dir", default=None)
    r.add_argument("--strict", action="store_true", help="treat skipped checks as failures")

    v = sub.add_parser("validate", help="check a config against the schema")
    v.add_argument("--config", required=True)

    o = sub.add_parser("oracle", help="quadrature free energy on a tiny lattice")
    o.add_argument("--config", default=None, help="take lattice, potential, eps, m2 and h from a config")
    o.add_argument("--d", type=int, default=2)
    o.add_argument("--L", type=int, default=2)
    o.add_argument("--potential", choices=("gaussian", "dipole"), default="dipole")
    o.add_argument("--a", type=float, default=0.3, help="dipole coupling")
    o.add_argument("--A", type=float, default=1.0, help="isotropic Gaussian stiffness")
    o.add_argument("--eps", type=float, default=1.0)
    o.add_argument("--m2", type=float, default=0.5)
    o.add_argument("--h-norm", type=float, default=0.5)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--nodes", type=int, default=32)
    o.add_argument("--check-nodes", type=int, default=48)
    return ap


def _resolve_seed(cli_seed: int | None, ec: ExperimentConfig) -> int:
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    return int(env) if env else ec.seed


def _cmd_oracle(args) -> int:
    if args.config:
        ec = load_config(args.config)
        lat = Lattice(ec.lattice.d, ec.lattice.L)
        pot = build_potential(ec)
        h = build_field(ec, lat, Path(args.config).parent)
        eps, m2s = ec.epsilon, ec.m2_grid
    else:
        lat = Lattice(args.d, args.L)
        pot = GaussianPotential(args.d, args.A) if args.potential == "gaussian" else DipolePotential(args.d, args.a)
        r = make_rng(args.seed, 7).standard_normal(lat.vector_shape)
        h = args.h_norm * r / lp_norm(lat, r, 2)
        eps, m2s = args.eps, [args.m2]
    out = []
    for m2 in m2s:
        res = q_brute_force(lat, pot, eps, m2, h, args.nodes, args.check_nodes)
        out.append({"d": lat.d, "L": lat.L, "potential": pot.describe(), "epsilon": eps, "m2": m2,
                    "q": res.value, "node_gap": res.details["node_gap"], "nodes": [args.nodes, args.check_nodes]})
    sys.stdout.write(dump_json(out))
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            ec = load_config(args.config)
            print(f"{args.config}: OK ({len(ec.jobs)} jobs, m2 grid {ec.m2_grid})")
            return EXIT_OK
        if args.command == "oracle":
            return _cmd_oracle(args)
        ec = load_config(args.config)
        code, report = run(ec, _resolve_seed(args.seed, ec), args.threads, args.out_dir, args.strict,
                           Path(args.config).parent)
        s = report["summary"]
        print(f"{s['n_pass']} passed, {s['n_fail']} failed, {s['n_skipped']} skipped, "
              f"{s['n_errors']} job errors; exit {code}")
        return code
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except GflabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

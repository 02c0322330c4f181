"""Experiment configuration: YAML files validated against a versioned schema.

Schema violations raise :class:`ConfigError` whose message names the key
path and, when known, the line and column in the source file.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentConfig",
    "load_config",
    "parse_config",
    "config_hash",
]

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LatticeSpec(_Strict):
    d: int = Field(ge=1)
    L: int = Field(ge=2)

    @field_validator("L")
    @classmethod
    def _even(cls, v):
        if v % 2:
            raise ValueError("L must be even")
        return v


class GaussianSpec(_Strict):
    kind: Literal["gaussian"]
    A: Union[float, list[list[float]]] = 1.0


class DipoleSpec(_Strict):
    kind: Literal["dipole"]
    a: float


PotentialSpec = Annotated[Union[GaussianSpec, DipoleSpec], Field(discriminator="kind")]


class ZeroField(_Strict):
    kind: Literal["zero"]


class RandomField(_Strict):
    kind: Literal["random"]
    norm: float = Field(default=0.5, ge=0)
    imag_norm: float = Field(default=0.0, ge=0)
    seed: int = 0


class PointDipoleField(_Strict):
    kind: Literal["point-dipole"]
    x: list[int]
    direction: int = Field(default=0, ge=0)
    strength: complex = 1.0


class TestFunctionField(_Strict):
    kind: Literal["test-function"]
    x: list[int]
    nu: float = Field(gt=0)
    strength: complex = 1.0


class FileField(_Strict):
    kind: Literal["file"]
    path: str


FieldSpec = Annotated[
    Union[ZeroField, RandomField, PointDipoleField, TestFunctionField, FileField],
    Field(discriminator="kind"),
]


class SamplerSpec(_Strict):
    scheme: Literal["exponential_euler", "euler_maruyama", "mala"] = "mala"
    dt: float | None = Field(default=None, gt=0)
    n_steps: int = Field(default=400, ge=1)
    n_chains: int = Field(default=32, ge=1)
    n_nodes: int = Field(default=8, ge=1)
    burn_in: int | None = Field(default=None, ge=0)
    stiffness: float = Field(default=1.0, gt=0)
    eta: float | None = Field(default=None, gt=0)


class SampleJob(_Strict):
    kind: Literal["sample"]
    name: str | None = None
    required: bool = True
    thin: int = Field(default=1, ge=1)
    save_trajectory: bool = False


class FreeEnergyJob(_Strict):
    kind: Literal["free-energy"]
    name: str | None = None
    required: bool = True
    method: Literal["auto", "exact", "thermo-integration", "brute-force"] = "auto"
    nodes: int = Field(default=32, ge=2)


BOUND_CHECKS = ("variance", "sandwich", "complex", "cubic", "concentration", "contraction", "exp-phi")


class BoundsJob(_Strict):
    kind: Literal["bounds"]
    name: str | None = None
    required: bool = True
    checks: list[Literal[BOUND_CHECKS]] = Field(default_factory=lambda: list(BOUND_CHECKS))
    n_fields: int = Field(default=3, ge=1)
    field_norm: float = Field(default=0.5, gt=0)
    imag_fraction: float = Field(default=0.5, gt=0, lt=1)
    rho: float = Field(default=0.5, gt=0)
    z: float = Field(default=3.0, gt=0)
    contraction_pairs: int = Field(default=20, ge=1)
    contraction_dt: float = Field(default=1e-3, gt=0)


class CovarianceJob(_Strict):
    kind: Literal["covariance"]
    name: str | None = None
    required: bool = True
    xs: list[list[int]]
    rho: float = 0.2
    nu: float = Field(default=0.1, gt=0)
    quadratic: Literal["exact-gaussian-free", "covariance", "pathwise"] = "exact-gaussian-free"


class KappaJob(_Strict):
    kind: Literal["kappa"]
    name: str | None = None
    required: bool = True
    p: list[float] = Field(default_factory=lambda: [2.0, 4.0])
    n_probes: int = Field(default=32, ge=1)
    tolerance: float = Field(default=1e-9, gt=0)


JobSpec = Annotated[
    Union[SampleJob, FreeEnergyJob, BoundsJob, CovarianceJob, KappaJob],
    Field(discriminator="kind"),
]


class OutputSpec(_Strict):
    dir: str = "gflab-out"
    report: str = "report.json"
    metadata: str = "metadata.json"
    bounds_csv: str = "bounds.csv"
    covariance_csv: str = "covariance.csv"
    plot_csv: str = "plot.csv"


class ExperimentConfig(_Strict):
    """Top-level experiment description."""

    schema_version: Literal[1]
    seed: int = 0
    lattice: LatticeSpec
    potential: PotentialSpec
    epsilon: float = Field(default=1.0, gt=0)
    m2: Union[float, list[float]] = 0.5
    h: FieldSpec = ZeroField(kind="zero")
    sampler: SamplerSpec = SamplerSpec()
    jobs: list[JobSpec] = Field(default_factory=list)
    output: OutputSpec = OutputSpec()

    @field_validator("m2")
    @classmethod
    def _positive_grid(cls, v):
        vals = [v] if isinstance(v, (int, float)) else v
        if not vals:
            raise ValueError("m2 grid must not be empty")
        if any(not m > 0 for m in vals):
            raise ValueError("sampling requires m2 > 0")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        d = self.lattice.d
        pot = self.potential
        if isinstance(pot, GaussianSpec) and not isinstance(pot.A, float):
            A = np.asarray(pot.A, dtype=float)
            if A.shape != (d, d):
                raise ValueError(f"potential.A must be {d}x{d}")
        h = self.h
        if hasattr(h, "x") and len(h.x) != d:
            raise ValueError(f"h.x must have {d} coordinates")
        if isinstance(h, PointDipoleField) and h.direction >= d:
            raise ValueError(f"h.direction must be < {d}")
        for i, job in enumerate(self.jobs):
            if isinstance(job, CovarianceJob) and any(len(x) != d for x in job.xs):
                raise ValueError(f"jobs[{i}].xs entries must have {d} coordinates")
        return self

    @property
    def m2_grid(self) -> list[float]:
        return [float(self.m2)] if isinstance(self.m2, (int, float)) else [float(m) for m in self.m2]

    def job_name(self, i: int) -> str:
        job = self.jobs[i]
        return job.name or f"{i:02d}-{job.kind}"


def _line_index(node, path=(), out=None) -> dict:
    """Map key paths to (line, column) (1-based) from a composed YAML node."""
    out = {} if out is None else out
    out.setdefault(path, (node.start_mark.line + 1, node.start_mark.column + 1))
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = path + (k.value,)
            out[key] = (k.start_mark.line + 1, k.start_mark.column + 1)
            _line_index(v, key, out)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


def _locate(index: dict, loc: tuple) -> tuple[int, int] | None:
    # pydantic inserts union tags (e.g. "dipole") into the location; drop unmatched parts
    path: tuple = ()
    best = index.get(())
    for part in loc:
        trial = path + (part,)
        if trial in index:
            path = trial
            best = index[trial]
    return best


def _format_errors(err: ValidationError, index: dict, source: str) -> str:
    lines = []
    for e in err.errors():
        loc = tuple(e["loc"])
        key = ".".join(str(p) for p in loc) or "<root>"
        where = _locate(index, loc)
        pos = f"{source}:{where[0]}:{where[1]}: " if where else f"{source}: "
        lines.append(f"{pos}{key}: {e['msg']}")
    return "\n".join(lines)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse YAML text into a validated configuration."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        pos = f"{source}:{mark.line + 1}:{mark.column + 1}: " if mark else f"{source}: "
        raise ConfigError(f"{pos}YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    index = _line_index(node) if node is not None else {}
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, index, source)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: file not found")
    return parse_config(path.read_text(), str(path))


def config_hash(cfg: ExperimentConfig) -> str:
    text = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(text.encode()).hexdigest()[:16]

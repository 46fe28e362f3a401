# config.py
"""Experiment configuration: a YAML file validated by pydantic.

Every error is reported as `line N: ...`, N being the line of the offending key
in the YAML source (line 1 when the key is missing altogether).
"""

import logging
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
# ----------------------------------------------
from core.errors import ConfigurationError
from tomography.phantom import Inclusion, default_inclusions
from tomography.transport_core import SolverOptions

logger = logging.getLogger(__name__)


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Section):
    n: int = Field(default=32, ge=4)
    radius: float = Field(default=25.0, gt=0)


class QuadratureConfig(_Section):
    n_dir: int = Field(default=16, ge=4)

    @field_validator("n_dir")
    @classmethod
    def _even(cls, value: int) -> int:
        if value % 2:
            raise ValueError(f"n_dir must be even, got {value}")
        return value


class PhantomConfig(_Section):
    mu_background: float = Field(default=0.01, ge=0)
    sigma_background: float = Field(default=10.0, ge=0)
    mu_max: float = Field(default=0.04, gt=0)
    sigma_max: float = Field(default=30.0, gt=0)
    inclusions: list[Inclusion] = Field(default_factory=default_inclusions)

    @model_validator(mode="after")
    def _within_bounds(self) -> "PhantomConfig":
        if self.mu_background > self.mu_max or self.sigma_background > self.sigma_max:
            raise ValueError("background values exceed mu_max / sigma_max")
        for inclusion in self.inclusions:
            bound = self.mu_max if inclusion.parameter == "mu" else self.sigma_max
            if inclusion.value > bound:
                raise ValueError(f"{inclusion.parameter} inclusion value {inclusion.value} exceeds its bound {bound}")
        return self


class SourcesConfig(_Section):
    count: int = Field(default=8, ge=1)
    offset: float = 0.0
    width: Optional[float] = Field(default=None, gt=0)
    amplitude: float = Field(default=1.0, ge=0)


class DetectorsConfig(_Section):
    count: int = Field(default=8, ge=1)
    offset: Optional[float] = None
    width: Optional[float] = Field(default=None, gt=0)


class PriorConfig(_Section):
    mu0: float = Field(ge=0)
    sigma0: float = Field(ge=0)


class RegularizationConfig(_Section):
    mu0: float = Field(default=0.015, ge=0)
    sigma0: float = Field(default=15.0, ge=0)
    alpha0: float = Field(default=1e-2, gt=0)
    alpha_min: float = Field(default=1e-10, gt=0)
    alpha_fixed: float = Field(default=1e-5, gt=0)
    rate_alphas: list[float] = Field(default_factory=lambda: [1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7], min_length=2)
    cg_tol: float = Field(default=1e-8, gt=0)
    cg_max: int = Field(default=500, ge=1)
    inner_solver: Literal["cholesky", "cg"] = "cholesky"
    rate_truth: Literal["source_condition", "calibration"] = "source_condition"
    rate_source_scale: float = Field(default=0.25, gt=0, lt=1)
    step_tol: float = Field(default=1e-6, gt=0)
    max_outer: int = Field(default=60, ge=1)
    calibration_priors: list[PriorConfig] = Field(
        default_factory=lambda: [PriorConfig(mu0=0.01, sigma0=10.0)])

    @field_validator("rate_alphas")
    @classmethod
    def _decreasing(cls, value: list[float]) -> list[float]:
        if any(a <= 0 for a in value) or any(b >= a for a, b in zip(value, value[1:])):
            raise ValueError("rate_alphas must be positive and strictly decreasing")
        return value

    @model_validator(mode="after")
    def _ordered(self) -> "RegularizationConfig":
        if not self.alpha0 > self.alpha_min:
            raise ValueError(f"alpha0 ({self.alpha0}) must exceed alpha_min ({self.alpha_min})")
        return self


class SolverConfig(SolverOptions):
    model_config = ConfigDict(extra="forbid")

    method: Literal["iterative", "direct"] = "direct"

    def options(self) -> SolverOptions:
        return SolverOptions(**self.model_dump())


class ExperimentConfig(_Section):
    grid: GridConfig = Field(default_factory=GridConfig)
    quadrature: QuadratureConfig = Field(default_factory=QuadratureConfig)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    sources: SourcesConfig = Field(default_factory=SourcesConfig)
    detectors: DetectorsConfig = Field(default_factory=DetectorsConfig)
    regularization: RegularizationConfig = Field(default_factory=RegularizationConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    output_dir: Optional[str] = None
    seed: int = 0

    @model_validator(mode="after")
    def _priors_admissible(self) -> "ExperimentConfig":
        reg, phantom = self.regularization, self.phantom
        priors = [(reg.mu0, reg.sigma0)] + [(p.mu0, p.sigma0) for p in reg.calibration_priors]
        for mu0, sigma0 in priors:
            if mu0 > phantom.mu_max or sigma0 > phantom.sigma_max:
                raise ValueError(f"prior ({mu0}, {sigma0}) lies outside the parameter bounds")
        return self

# ----------------------------------------------
# Parsing

def _node_line(root: Optional[yaml.Node], location: tuple[Any, ...]) -> int:
    """1-based line of the deepest YAML node reachable along a pydantic error location."""
    line = 1
    node = root
    for part in location:
        if isinstance(node, yaml.MappingNode):
            match = next(((k, v) for k, v in node.value if k.value == str(part)), None)
            if match is None:
                break
            line = match[0].start_mark.line + 1
            node = match[1]
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        root = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else 1
        raise ConfigurationError(f"line {line}: invalid YAML: {getattr(e, 'problem', None) or e}") from e

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("line 1: configuration must be a mapping of sections")

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        location = tuple(part for part in first["loc"] if not str(part).startswith("function-after"))
        line = _node_line(root, location)
        where = ".".join(str(part) for part in location) or "<root>"
        more = f" (and {e.error_count() - 1} more)" if e.error_count() > 1 else ""
        raise ConfigurationError(f"line {line}: {where}: {first['msg']}{more}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"line 1: cannot read config file {path}: {e}") from e
    config = parse_config(text)
    logger.debug(f"Loaded experiment config from {path}")
    return config


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)

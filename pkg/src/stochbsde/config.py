"""Experiment configuration: a YAML file validated by pydantic, unknown keys rejected."""

from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .conditional import STATE_MAPS
from .generators import generator_preset
from .sfuncs import rho_preset

KINDS = (
    "solve",
    "solve-random-terminal",
    "verify-gronwall",
    "verify-bihari",
    "verify-assumptions",
    "verify-estimates",
    "refine-study",
)

TERMINAL_PRESETS = ("B_T", "B_T^2", "B_tau", "const:<c>", "sin_cos_B_T", "zero")
STOPPING_PRESETS = ("exit:<level>", "never", "now")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(_Strict):
    horizon: float = Field(1.0, gt=0)
    n_steps: int = Field(100, ge=1)
    # T = infinity is handled by truncating at ``horizon``; the tail budget is asserted zero
    truncated_infinite: bool = False


class EnsembleConfig(_Strict):
    n_paths: int = Field(10_000, ge=1)
    dim: int = Field(1, ge=1)


class EstimatorConfig(_Strict):
    kind: Literal["regression", "nested_mc"] = "regression"
    degree: int = Field(3, ge=0, le=8)
    ridge: float = Field(1e-8, ge=0)
    inner_paths: int = Field(512, ge=2)
    state_map: str = "default"

    @field_validator("state_map")
    @classmethod
    def _known_map(cls, v):
        if v not in STATE_MAPS:
            raise ValueError(f"unknown state map {v!r}; choose from {sorted(STATE_MAPS)}")
        return v


class SolverConfig(_Strict):
    N: int = Field(1, ge=1)
    tol: float = Field(1e-3, gt=0)
    max_iter: int = Field(25, ge=1)
    c_universal: float = Field(2.0, ge=1)
    init: Literal["zero", "xi"] = "zero"
    check_uniqueness: bool = False


class GronwallConfig(_Strict):
    instances: int = Field(20, ge=0)
    budget: float = Field(1.0, gt=0)
    n_outer: int = Field(200, ge=2)
    inner_paths: int = Field(512, ge=2)
    deterministic_b: float = Field(1.5, ge=0)
    deterministic_c: float = Field(2.0, ge=0)
    probe_nodes: Optional[List[int]] = None


class BihariConfig(_Strict):
    rho: str = "identity"
    c: float = Field(0.0, ge=0)
    beta: str = "const:1"
    probe_nodes: Optional[List[int]] = None

    @field_validator("rho")
    @classmethod
    def _known_rho(cls, v):
        rho_preset(v)
        return v

    @field_validator("beta")
    @classmethod
    def _known_beta(cls, v):
        name, _, arg = v.partition(":")
        if name == "abs_B" and not arg:
            return v
        if name in ("const", "ubar") and arg:
            float(arg)
            return v
        raise ValueError(f"unknown beta preset {v!r}; use const:<b>, abs_B or ubar:<M>")


class AssumptionsConfig(_Strict):
    generators: List[str] = Field(default_factory=lambda: ["zero", "linear:1,0.5", "example46:1,0.1"])
    n_samples: int = Field(10_000, ge=1)
    counterexamples: bool = True
    nondomination_M: Optional[float] = Field(1.0, gt=0)

    @field_validator("generators")
    @classmethod
    def _known_generators(cls, v):
        for g in v:
            generator_preset(g)
        return v


class EstimatesConfig(_Strict):
    probe_nodes: Optional[List[int]] = None
    windows: bool = True
    conditional: Literal["nested_mc", "regression"] = "nested_mc"
    n_outer: int = Field(100, ge=2)
    inner_paths: int = Field(256, ge=2)


class RefineConfig(_Strict):
    n_steps: List[int] = Field(default_factory=lambda: [25, 50, 100])
    reference_steps: int = Field(400, ge=1)

    @model_validator(mode="after")
    def _nested(self):
        for n in self.n_steps:
            if self.reference_steps % n:
                raise ValueError(f"reference_steps {self.reference_steps} is not a multiple of {n}")
        return self


class ExperimentConfig(_Strict):
    kind: Literal[KINDS]  # type: ignore[valid-type]
    seed: int
    grid: GridConfig = Field(default_factory=GridConfig)
    ensemble: EnsembleConfig = Field(default_factory=EnsembleConfig)
    generator: str = "zero"
    terminal: str = "B_T"
    stopping: Optional[str] = None
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    gronwall: GronwallConfig = Field(default_factory=GronwallConfig)
    bihari: BihariConfig = Field(default_factory=BihariConfig)
    assumptions: AssumptionsConfig = Field(default_factory=AssumptionsConfig)
    estimates: EstimatesConfig = Field(default_factory=EstimatesConfig)
    refine: RefineConfig = Field(default_factory=RefineConfig)
    output_dir: Optional[str] = None

    @field_validator("generator")
    @classmethod
    def _known_generator(cls, v):
        generator_preset(v)
        return v

    @field_validator("terminal")
    @classmethod
    def _known_terminal(cls, v):
        name, _, arg = v.partition(":")
        if name == "const" and arg:
            float(arg)
            return v
        if v in ("B_T", "B_T^2", "B_tau", "sin_cos_B_T", "zero"):
            return v
        raise ValueError(f"unknown terminal preset {v!r}; choose from {TERMINAL_PRESETS}")

    @field_validator("stopping")
    @classmethod
    def _known_stopping(cls, v):
        if v is None or v in ("never", "now"):
            return v
        name, _, arg = v.partition(":")
        if name == "exit" and arg and float(arg) > 0:
            return v
        raise ValueError(f"unknown stopping preset {v!r}; choose from {STOPPING_PRESETS}")

    @model_validator(mode="after")
    def _consistent(self):
        if self.kind == "solve-random-terminal" and self.stopping is None:
            raise ValueError("solve-random-terminal needs a stopping preset")
        if self.terminal == "B_tau" and self.stopping is None:
            raise ValueError("terminal B_tau needs a stopping preset")
        if self.terminal == "sin_cos_B_T" and not self.generator.startswith("example46"):
            # two-dimensional terminal values are only wired to the k = 2 generator
            raise ValueError("sin_cos_B_T is only available with example46 generators")
        if self.generator.startswith("example46") and self.terminal in ("B_T", "B_T^2", "B_tau"):
            raise ValueError("example46 is two-dimensional; use sin_cos_B_T, const:<c> or zero")
        return self


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    """Parse a YAML file; ``seed_override`` replaces the file's seed."""
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("config must be a mapping")
    if seed_override is not None:
        raw["seed"] = int(seed_override)
    return ExperimentConfig.model_validate(raw)

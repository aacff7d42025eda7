"""
Centralized configuration file
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from services.blocks.errors import ConfigError

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib


class AppConfig:
    # Grid
    GRID = {
        "lo": -8.0,
        "hi": 8.0,
        "n": 401,
    }

    # Horizon / bridge time mesh
    HORIZON_T = 1.0
    TIME_STEP = 0.05

    # Kernel construction
    KERNEL = {
        "method": "parametrix",
        "n_terms": 8,
        "split": 0.25,          # max piece length for the alternating series
        "budget": 0.5,          # max sup|c| * piece length
        "substeps": 4,          # time quadrature nodes per piece (minus one)
        "n_paths": 100_000,
        "n_steps": 64,
        "chunk_paths": 256,
    }

    # Schrödinger system solver
    SOLVER = {
        "tol": 1e-10,
        "max_iter": 10_000,
        "tiny": 1e-300,
    }
    ROW_TOLERANCE = 1e-3

    # Diffusion
    SIMULATION = {
        "n_paths": 100_000,
        "dt": 1e-3,
        "chunk_paths": 4096,
        "max_boundary_fraction": 0.01,
    }
    DIAGNOSTICS = {
        "epsilon": 0.5,
        "dt_ladder": [0.1, 0.05, 0.02, 0.01, 0.005],
    }

    # Output
    CSV_FLOAT_FORMAT = "%.17g"
    LOG_DIR = os.environ.get("FKBRIDGE_LOG_DIR", "logs")
    THREADS_ENV = "FKBRIDGE_THREADS"
    DEFAULT_SEED = 7


def resolve_threads(flag: Optional[int] = None) -> int:
    """--threads wins, then FKBRIDGE_THREADS, then the core count."""
    if flag is not None:
        if flag < 1:
            raise ConfigError("threads must be >= 1", field="threads")
        return int(flag)
    raw = os.environ.get(AppConfig.THREADS_ENV)
    if raw:
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{AppConfig.THREADS_ENV} is not an integer: {raw!r}", field="threads")
        if value < 1:
            raise ConfigError(f"{AppConfig.THREADS_ENV} must be >= 1", field="threads")
        return value
    return os.cpu_count() or 1


# -------------------------
# Run configuration (validated before any computation)
# -------------------------
class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridSpec(_Section):
    lo: float = AppConfig.GRID["lo"]
    hi: float = AppConfig.GRID["hi"]
    n: int = AppConfig.GRID["n"]

    @field_validator("n")
    @classmethod
    def _n_at_least_three(cls, v: int) -> int:
        if v < 3:
            raise ValueError("need at least 3 grid points")
        return v

    @model_validator(mode="after")
    def _ordered(self) -> "GridSpec":
        if not self.lo < self.hi:
            raise ValueError("lo must be < hi")
        return self


class PotentialSpec(_Section):
    name: Literal["zero", "constant", "quantum", "harmonic"] = "quantum"
    kappa: float = 1.0
    omega: float = Field(1.0, gt=0.0)


class KernelSpec(_Section):
    method: Literal["heat", "parametrix", "monte_carlo"] = AppConfig.KERNEL["method"]
    n_terms: int = Field(AppConfig.KERNEL["n_terms"], ge=1)
    split: float = Field(AppConfig.KERNEL["split"], gt=0.0)
    budget: float = Field(AppConfig.KERNEL["budget"], gt=0.0)
    substeps: int = Field(AppConfig.KERNEL["substeps"], ge=1)
    n_paths: int = Field(AppConfig.KERNEL["n_paths"], ge=100)
    n_steps: int = Field(AppConfig.KERNEL["n_steps"], ge=2)
    chunk_paths: int = Field(AppConfig.KERNEL["chunk_paths"], ge=1)


class BoundarySpec(_Section):
    kind: Literal["quantum", "csv"] = "quantum"
    rho0_csv: Optional[Path] = None
    rhoT_csv: Optional[Path] = None

    @model_validator(mode="after")
    def _files_for_csv(self) -> "BoundarySpec":
        if self.kind == "csv" and (self.rho0_csv is None or self.rhoT_csv is None):
            raise ValueError("kind='csv' needs rho0_csv and rhoT_csv")
        return self


class SolverSpec(_Section):
    tol: float = Field(AppConfig.SOLVER["tol"], gt=0.0)
    max_iter: int = Field(AppConfig.SOLVER["max_iter"], ge=1)


class SimulationSpec(_Section):
    n_paths: int = Field(AppConfig.SIMULATION["n_paths"], ge=1)
    dt: float = Field(AppConfig.SIMULATION["dt"], gt=0.0)
    strict: bool = False


class DiagnosticsSpec(_Section):
    epsilon: float = Field(AppConfig.DIAGNOSTICS["epsilon"], gt=0.0)
    dt_ladder: List[float] = Field(default_factory=lambda: list(AppConfig.DIAGNOSTICS["dt_ladder"]))

    @field_validator("dt_ladder")
    @classmethod
    def _decreasing(cls, v: List[float]) -> List[float]:
        if not v or any(d <= 0 for d in v):
            raise ValueError("dt_ladder entries must be > 0")
        if any(b >= a for a, b in zip(v, v[1:])):
            raise ValueError("dt_ladder must be strictly decreasing")
        return v


class RunConfig(_Section):
    grid: GridSpec = Field(default_factory=GridSpec)
    T: float = Field(AppConfig.HORIZON_T, gt=0.0)
    time_step: float = Field(AppConfig.TIME_STEP, gt=0.0)
    potential: PotentialSpec = Field(default_factory=PotentialSpec)
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    boundary: BoundarySpec = Field(default_factory=BoundarySpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)
    seed: int = Field(AppConfig.DEFAULT_SEED, ge=0, lt=2**64)
    output_dir: Path = Path("runs/default")

    @model_validator(mode="after")
    def _mesh_divides_horizon(self) -> "RunConfig":
        steps = self.T / self.time_step
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ValueError("time_step must divide T")
        if self.simulation.dt > self.time_step:
            raise ValueError("simulation.dt must not exceed time_step")
        return self


def _set_dotted(tree: Dict[str, Any], dotted: str, value: Any) -> None:
    node = tree
    parts = dotted.split(".")
    for key in parts[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[parts[-1]] = value


def _first_error_field(exc: ValidationError) -> str:
    err = exc.errors()[0]
    loc = [str(p) for p in err.get("loc", ())]
    return ".".join(loc) if loc else "config"


def load_run_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    [Block] TOML file (optional) + dotted CLI overrides -> validated RunConfig.

    Overrides with value None are ignored, so click options can be passed
    straight through. Raises ConfigError naming the offending field.
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}", field="config")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML in {path}: {e}", field="config")

    for dotted, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(raw, dotted, value)

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        field = _first_error_field(e)
        msg = e.errors()[0].get("msg", "invalid value")
        raise ConfigError(f"{field}: {msg}", field=field) from e

"""
Run configuration shared by the fit, simulate and select commands.

Settings come from an optional TOML file (flat keys plus an optional
[simulation] table), then from command-line flags, which win over the file.
Everything is validated before any computation starts.

Environment Variables:
    SPECTRAGRAPH_SEED: Root seed, overriding the config file but not --seed
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib

import numpy as np
import psutil
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from app.bdmcmc import DEFAULT_MAX_RATE
from app.bspline import BasisSpec
from app.errors import ConfigError
from app.gibbs_sampler import (
    DEFAULT_A,
    DEFAULT_B,
    DEFAULT_OMEGA_THIN,
    DEFAULT_SIGMA_MU2,
    Hyperparameters,
    SamplerConfig,
)
from app.graph import GraphPrior
from app.gwishart import GWishartParams
from app.posterior import DEFAULT_ALPHA
from app.simulation import ExperimentSpec

SEED_ENV = os.getenv("SPECTRAGRAPH_SEED")

# G-Wishart defaults of the Gaussian-process campaign
GP_GW_D = 5.0
GP_GW_D_SCALE = 5.0


def parse_select(text: str) -> Tuple[str, Optional[float]]:
    """
    Parse a selection rule.

    Args:
        text: "median", "bfdr" or "bfdr=<alpha>"

    Returns:
        (rule, alpha); alpha is None for the median rule

    Raises:
        ValueError: On an unknown rule or an alpha outside (0, 1]
    """
    text = text.strip()
    if text == "median":
        return "median", None
    if text == "bfdr":
        return "bfdr", DEFAULT_ALPHA
    if text.startswith("bfdr="):
        try:
            alpha = float(text.split("=", 1)[1])
        except ValueError:
            raise ValueError(f"invalid BFDR budget in '{text}'")
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"BFDR budget must lie in (0, 1], got {alpha}")
        return "bfdr", alpha
    raise ValueError(f"unknown selection rule '{text}', expected median or bfdr=<alpha>")


class RunConfig(BaseModel):
    """
    Validated settings of one command.

    Attributes:
        data: Spectra CSV (fit)
        out: Output directory
        chain_dir: Fit output or chain directory (select)
        p_basis: Number of B-spline basis functions
        iters, burnin, thin: Sweep counts and precision-matrix thinning
        seed: Root seed
        graph_prior: One prior per entry; simulate sweeps over all of them
        gw_d, gw_D_scale: G-Wishart prior, D = gw_D_scale * I (None picks
            the experiment default)
        select: Selection rule, "median" or "bfdr=<alpha>"
        chains: Independent chains of a fit
        jobs: Worker processes, 0 for one per CPU
        simulation: Experiment of the simulate command
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    data: Optional[Path] = None
    out: Optional[Path] = None
    chain_dir: Optional[Path] = None
    label_column: Optional[str] = None
    label_value: Optional[str] = None
    normalize: bool = False
    p_basis: int = Field(40, ge=4)
    iters: int = Field(60_000, ge=1)
    burnin: int = Field(10_000, ge=0)
    thin: int = Field(DEFAULT_OMEGA_THIN, ge=1)
    seed: int = Field(0, ge=0)
    graph_prior: Tuple[str, ...] = ("uniform",)
    gw_d: Optional[float] = Field(None, gt=2.0)
    gw_D_scale: Optional[float] = Field(None, gt=0.0)
    sigma_mu2: float = Field(DEFAULT_SIGMA_MU2, gt=0.0)
    a: float = Field(DEFAULT_A, gt=0.0)
    b: float = Field(DEFAULT_B, gt=0.0)
    select: str = f"bfdr={DEFAULT_ALPHA}"
    proposal: Literal["conditional", "gaussian"] = "conditional"
    sigma_prop: float = Field(1.0, gt=0.0)
    max_rate: float = Field(DEFAULT_MAX_RATE, gt=0.0)
    normalizer: Literal["approx", "mc"] = "approx"
    mc_samples: int = Field(10_000, ge=1000)
    chains: int = Field(1, ge=1)
    jobs: int = Field(1, ge=0)
    verbose: bool = True
    simulation: Optional[ExperimentSpec] = None

    @field_validator("graph_prior", mode="before")
    @classmethod
    def _as_tuple(cls, value: Any) -> Any:
        if isinstance(value, str):
            return (value,)
        return value

    @field_validator("graph_prior")
    @classmethod
    def _check_priors(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        if not value:
            raise ValueError("at least one graph prior is required")
        for text in value:
            GraphPrior.from_string(text)
        return value

    @field_validator("select")
    @classmethod
    def _check_select(cls, value: str) -> str:
        parse_select(value)
        return value

    @model_validator(mode="after")
    def _check_counts(self) -> "RunConfig":
        if self.iters <= self.burnin:
            raise ValueError("iters must exceed burnin")
        return self

    def graph_priors(self) -> List[GraphPrior]:
        return [GraphPrior.from_string(text) for text in self.graph_prior]

    def workers(self) -> int:
        return self.jobs or psutil.cpu_count(logical=True) or 1

    def selection(self) -> Tuple[str, Optional[float]]:
        return parse_select(self.select)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            n_iter=self.iters,
            burn_in=self.burnin,
            thin=self.thin,
            proposal=self.proposal,
            sigma_prop=self.sigma_prop,
            max_rate=self.max_rate,
            normalizer=self.normalizer,
            mc_samples=self.mc_samples,
        )

    def gw_prior(self, p: int, gp_defaults: bool = False) -> GWishartParams:
        d = self.gw_d if self.gw_d is not None else (GP_GW_D if gp_defaults else 3.0)
        scale = self.gw_D_scale
        if scale is None:
            scale = GP_GW_D_SCALE if gp_defaults else 1.0
        return GWishartParams(d, scale * np.eye(p))

    def hyperparameters(
        self, basis: BasisSpec, graph_prior: Optional[GraphPrior] = None
    ) -> Hyperparameters:
        gp = self.simulation is not None and self.simulation.kind == "gp_matern"
        return Hyperparameters(
            basis=basis,
            gw_prior=self.gw_prior(basis.n_basis, gp_defaults=gp),
            graph_prior=graph_prior or self.graph_priors()[0],
            sigma_mu2=self.sigma_mu2,
            a=self.a,
            b=self.b,
        )

    def experiment(self) -> ExperimentSpec:
        """Experiment of the simulate command, seeded with the run seed."""
        spec = self.simulation or ExperimentSpec()
        return spec.model_copy(update={"seed": self.seed})


def read_toml(path: Path) -> Dict[str, Any]:
    """
    Read a TOML config file.

    Raises:
        ConfigError: If the file is missing or malformed
    """
    path = Path(path)
    try:
        with open(path, "rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"malformed config file {path}: {e}")
    # file keys may use dashes like the flags
    return {
        key.replace("-", "_"): (
            {k.replace("-", "_"): v for k, v in value.items()}
            if isinstance(value, dict)
            else value
        )
        for key, value in raw.items()
    }


def build_config(
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    simulation_overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """
    Merge file values, the seed variable and flags into a RunConfig.

    Args:
        file_values: Parsed TOML content
        overrides: Flag values; None entries are ignored
        simulation_overrides: Flag values for the [simulation] table

    Raises:
        ConfigError: If the merged settings are invalid
    """
    values: Dict[str, Any] = dict(file_values or {})
    simulation = values.pop("simulation", None)
    if simulation is not None and not isinstance(simulation, dict):
        raise ConfigError("[simulation] must be a table")

    if SEED_ENV is not None:
        try:
            values["seed"] = int(SEED_ENV)
        except ValueError:
            raise ConfigError(f"SPECTRAGRAPH_SEED must be an integer, got '{SEED_ENV}'")

    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    sim_flags = {k: v for k, v in (simulation_overrides or {}).items() if v is not None}
    if simulation is not None or sim_flags:
        values["simulation"] = {**(simulation or {}), **sim_flags}

    try:
        return RunConfig(**values)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}"
            for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}")

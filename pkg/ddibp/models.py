"""
Pydantic models for configuration, sampler records and verification results.
"""

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator, model_validator

from .core import DecayFunction, DecayKind


class DecaySpec(BaseModel):
    """Decay function specification: decay = {kind, beta?, nu?}."""

    kind: DecayKind = Field(DecayKind.EXPONENTIAL, description="constant, exponential, logistic or window")
    beta: float = Field(1.0, ge=0, description="Decay rate (exponential, logistic)")
    nu: float = Field(1.0, description="Offset (logistic) or window width (window)")

    @model_validator(mode="after")
    def _check_window(self):
        if self.kind is DecayKind.WINDOW and self.nu <= 0:
            raise ValueError("window decay requires nu > 0")
        return self

    def build(self) -> DecayFunction:
        return DecayFunction(kind=self.kind, beta=self.beta, nu=self.nu)

    class Config:
        json_schema_extra = {
            "example": {"kind": "exponential", "beta": 1.0}
        }


class McmcConfig(BaseModel):
    """Sampler schedule, hyperpriors and update switches."""

    iterations: int = Field(1500, ge=0, description="Number of sweeps")
    burn_in: int = Field(0, ge=0, description="Sweeps excluded from posterior summaries")
    alpha_shape: float = Field(1.0, gt=0, description="Gamma prior shape for alpha")
    alpha_rate: float = Field(1.0, gt=0, description="Gamma prior inverse scale for alpha")
    alpha_init: Optional[float] = Field(None, gt=0, description="Initial (or fixed) alpha; drawn from its prior if unset")
    sigma_x: float = Field(1.0, gt=0, description="Initial observation noise std")
    sigma_w: float = Field(1.0, gt=0, description="Initial weight prior std")
    noise_proposal_scale: float = Field(0.1, ge=0, description="Log-space random-walk scale for sigma_x, sigma_w")
    seed: int = Field(0, description="Random seed")
    update_alpha: bool = True
    update_noise: bool = True
    update_missing: bool = False
    record_z: bool = False
    debug: bool = Field(False, description="Recompute and check the log joint after every sweep")
    log_every: int = Field(100, ge=1)

    @model_validator(mode="after")
    def _check_burn_in(self):
        if self.iterations > 0 and self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.iterations == 0 and self.burn_in != 0:
            raise ValueError("burn_in must be 0 when iterations is 0")
        if not self.update_alpha and self.alpha_init is None:
            raise ValueError("a fixed alpha needs alpha_init")
        return self


class SampleRecord(BaseModel):
    """One line of the sample log, written once per sweep."""

    iteration: int
    chain: int = 0
    K: int = Field(..., description="Active feature count")
    alpha: float
    sigma_x: float
    sigma_w: float
    log_joint: float
    z: Optional[List[List[int]]] = None


class CheckResult(BaseModel):
    """Outcome of one verification check."""

    name: str
    statistic: float
    bound: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name}\t{self.statistic:.6g}\t{self.bound:.6g}\t{verdict}"


Subcommand = Literal["simulate", "fit", "impute", "verify", "sharing"]


class RunConfig(BaseModel):
    """Everything needed to reproduce a run."""

    subcommand: Subcommand = "simulate"
    output_dir: Path = Path("runs")
    data_path: Optional[Path] = None
    distances_path: Optional[Path] = None
    covariate_path: Optional[Path] = None
    distance_kind: Literal["absolute", "sequential"] = "sequential"
    truth_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = Field(None, description="fit: resume from and save the chain state to this .npz file")
    decay: DecaySpec = Field(default_factory=DecaySpec)
    mcmc: McmcConfig = Field(default_factory=McmcConfig)
    model: Literal["ddibp", "ibp", "dhbp"] = "ddibp"
    zscore: bool = False
    n_customers: int = Field(20, ge=1, description="Customers for simulate/sharing when no distances are given")
    n_samples: int = Field(4, ge=1, description="Prior draws written by simulate")
    alpha: float = Field(5.0, gt=0, description="dd-IBP / IBP mass for simulate and sharing")
    gamma: float = Field(5.0, gt=0, description="dHBP mass")
    c0: float = Field(10.0, gt=0)
    c1: float = Field(1.0, gt=0)
    k_trunc: int = Field(2000, ge=1)
    betas: List[float] = Field(default_factory=list, description="Exponential decay rates swept by impute")
    chains: int = Field(1, ge=1)
    n_jobs: int = Field(1)
    quick: bool = False
    draws: int = Field(100_000, ge=1, description="Monte-Carlo size for verify and sharing")
    inject_failure: float = Field(1.0, gt=0, description="Multiplier applied to analytic rates inside verify")

    @field_validator("data_path", "distances_path", "covariate_path", "truth_path")
    @classmethod
    def _must_exist(cls, value: Optional[Path]):
        if value is not None and not Path(value).exists():
            raise ValueError(f"file not found: {value}")
        return value

    @field_validator("betas", mode="before")
    @classmethod
    def _split_betas(cls, value):
        if isinstance(value, str):
            return [float(v) for v in value.replace(";", ",").split(",") if v.strip()]
        return value

    @model_validator(mode="after")
    def _check_dhbp(self):
        if self.model == "dhbp" and self.gamma >= self.k_trunc:
            raise ValueError("gamma must be smaller than k_trunc")
        return self

    @model_validator(mode="after")
    def _check_checkpoint(self):
        if self.checkpoint_path is not None and self.chains != 1:
            raise ValueError("checkpointing supports a single chain only")
        return self

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form."""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_flat(self) -> dict:
        """Dotted-key view used by the config file format."""
        flat = {}

        def walk(prefix: str, value):
            if isinstance(value, dict):
                for key, inner in value.items():
                    walk(f"{prefix}.{key}" if prefix else key, inner)
            elif isinstance(value, list):
                flat[prefix] = ",".join(str(v) for v in value)
            elif value is not None:
                flat[prefix] = str(value).lower() if isinstance(value, bool) else str(value)

        walk("", self.model_dump(mode="json"))
        return flat

    class Config:
        json_schema_extra = {
            "example": {
                "subcommand": "fit",
                "data_path": "data/x.csv",
                "covariate_path": "data/age.csv",
                "distance_kind": "sequential",
                "decay": {"kind": "exponential", "beta": 1.0},
                "mcmc": {"iterations": 1500, "seed": 1}
            }
        }

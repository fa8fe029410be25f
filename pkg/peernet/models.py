"""
Pydantic models for parameters, configurations and reports.
"""

from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import BOOTSTRAP_MIN_REPLICATES, BOOTSTRAP_MIN_SUCCESS


class StructuralParams(BaseModel):
    """Structural parameters of the effort game and the GPA production function for one school."""

    model_config = ConfigDict(populate_by_name=True, frozen=True)

    lam: float = Field(..., alias="lambda", gt=-1.0, lt=1.0, description="Endogenous peer effect")
    beta: List[float] = Field(..., description="Own-characteristic effects on marginal payoff")
    gamma: List[float] = Field(..., description="Contextual effects on marginal payoff")
    delta: float = Field(1.0, gt=0.0, description="Effort productivity in the GPA function")
    theta: Optional[List[float]] = Field(None, description="Direct covariate effects on GPA (zeros if omitted)")
    alpha: float = Field(0.0, description="School GPA shifter")
    c: float = Field(0.0, description="School preference shifter")
    sigma_eta2: float = Field(15.0, gt=0.0, description="Variance of the GPA shock")
    sigma_eps2: float = Field(8.0, gt=0.0, description="Variance of delta^2 * epsilon")
    rho: float = Field(0.4, ge=-1.0, le=1.0, description="Correlation between the two shocks")

    @model_validator(mode="after")
    def _check_dimensions(self) -> "StructuralParams":
        if len(self.beta) != len(self.gamma):
            raise ValueError("beta and gamma must have the same length")
        if self.theta is not None and len(self.theta) != len(self.beta):
            raise ValueError("theta must have the same length as beta")
        return self

    @property
    def n_covariates(self) -> int:
        return len(self.beta)

    @property
    def theta_vec(self) -> np.ndarray:
        if self.theta is None:
            return np.zeros(self.n_covariates)
        return np.asarray(self.theta, dtype=float)

    @property
    def beta_tilde(self) -> np.ndarray:
        return self.delta**2 * np.asarray(self.beta) + self.theta_vec

    @property
    def gamma_tilde(self) -> np.ndarray:
        return self.delta**2 * np.asarray(self.gamma) - self.lam * self.theta_vec

    @property
    def psi(self) -> np.ndarray:
        """Reduced-form parameter vector (lambda, beta_tilde, gamma_tilde)."""
        return np.concatenate([[self.lam], self.beta_tilde, self.gamma_tilde])

    def for_school(self, alpha: float, c: float) -> "StructuralParams":
        return self.model_copy(update={"alpha": float(alpha), "c": float(c)})


def monte_carlo_params() -> StructuralParams:
    """Monte Carlo parameter set; 8 and 15 are variances, not standard deviations."""
    return StructuralParams(
        lam=0.7, beta=[1.0, 1.5], gamma=[5.0, -3.0], delta=1.0, theta=[0.0, 0.0],
        sigma_eta2=15.0, sigma_eps2=8.0, rho=0.4,
    )


class DgpVariant(str, Enum):
    A = "A"
    B = "B"
    C = "C"


class DgpConfig(BaseModel):
    """Monte Carlo data-generating process."""

    n_schools: int = Field(20, ge=1, description="Number of schools S")
    school_size: int = Field(50, description="Students per school n_s")
    max_degree: int = Field(10, ge=0, description="Largest number of nominated friends")
    degree_exponent: float = Field(0.6, gt=0.0, description="P(k) proportional to 1/(1+k)^exponent")
    x1_variance: float = Field(16.0, gt=0.0, description="Variance of the Gaussian covariate")
    school_mean_high: float = Field(10.0, gt=0.0, description="Upper bound of the uniform school means")
    alpha_scale: float = Field(10.0, description="alpha_s = scale * q90(x1) under variant C")
    c_scale: float = Field(-1.5, description="c_s = scale * q90(x2)")
    params: StructuralParams = Field(default_factory=monte_carlo_params)
    variant: DgpVariant = DgpVariant.A
    replications: int = Field(200, ge=1)
    master_seed: int = Field(20240101, ge=0, lt=2**64)
    instrument_power: int = Field(2, ge=2)
    models: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    varcomp_models: List[int] = Field(default_factory=lambda: [3, 4])

    @field_validator("models", "varcomp_models")
    @classmethod
    def _check_models(cls, value: List[int]) -> List[int]:
        bad = [m for m in value if m not in (1, 2, 3, 4)]
        if bad:
            raise ValueError(f"Unknown model numbers: {bad}")
        return value

    def degree_probabilities(self) -> np.ndarray:
        k = np.arange(self.max_degree + 1)
        weights = 1.0 / (1.0 + k) ** self.degree_exponent
        return weights / weights.sum()


class ModelVariant(IntEnum):
    """The nested linear-in-means specifications."""

    GLOBAL_INTERCEPT = 1
    SCHOOL_FE = 2
    SCHOOL_FE_ISOLATED_DUMMY = 3
    DUAL_FE = 4

    @property
    def label(self) -> str:
        return f"Model {int(self)}"


class SampleRestriction(str, Enum):
    """Students dropped before estimation."""

    ISOLATED = "isolated"  # no friends named and never named
    NON_NOMINATING = "non-nominating"  # no friends named


class ModelSpec(BaseModel):
    """Estimation options for one specification."""

    model_config = ConfigDict(frozen=True)

    variant: ModelVariant = ModelVariant.DUAL_FE
    instrument_power: int = Field(2, ge=2, description="Use J G^q X for q = 2..p as excluded instruments")
    two_step: bool = Field(False, description="Efficient two-step GMM instead of 2SLS")


class SpecTest(BaseModel):
    """A chi-square specification test."""

    stat: float = Field(..., ge=0.0)
    df: int = Field(..., ge=1)
    p: float = Field(..., ge=0.0, le=1.0)


class HausmanResult(SpecTest):
    df: int = Field(..., ge=0, description="Numerical rank of the variance contrast")
    contrast: Literal["psi", "lambda"] = "psi"
    indefinite: bool = Field(False, description="V_flexible - V_restricted had eigenvalues below tolerance")


class TestReport(BaseModel):
    """Specification tests reported next to the coefficient table."""

    __test__ = False

    weak_iv_F: Optional[float] = None
    sargan_stat: Optional[float] = None
    sargan_df: Optional[int] = None
    sargan_p: Optional[float] = Field(None, ge=0.0, le=1.0)
    hausman_stat: Optional[float] = None
    hausman_df: Optional[int] = None
    hausman_p: Optional[float] = Field(None, ge=0.0, le=1.0)


class ShockKind(str, Enum):
    ALPHA = "alpha"
    PREFERENCE = "pref"
    FIXED_EFFECT = "fe"


class ShockScenario(BaseModel):
    """A school-level counterfactual shock."""

    kind: ShockKind
    magnitude: float = Field(1.0, description="Shock size; delta^2 * dc units for preference shocks")
    target_schools: Optional[List[str]] = Field(None, description="Schools receiving the shock (all if omitted)")
    restricted_model: Literal[2, 3] = Field(2, description="Restricted model whose intercept is bumped (fe shocks)")

    @field_validator("magnitude")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("magnitude must be finite")
        return value


class CoefficientRow(BaseModel):
    name: str
    estimate: Optional[float]
    se_white: Optional[float] = None
    se_qml: Optional[float] = None
    se_bootstrap: Optional[float] = None


class VarianceComponentsReport(BaseModel):
    sigma_eps2: float
    sigma_eta2: float
    rho: float
    tau: float
    llh: float
    converged: bool
    flags: List[str] = Field(default_factory=list)


class EstimateReport(BaseModel):
    """JSON coefficient table for one fitted specification."""

    model: str
    instrument_power: int
    n_obs: int
    n_schools: int
    coefficients: List[CoefficientRow]
    extra_coefficients: List[CoefficientRow] = Field(default_factory=list)
    fixed_effects: Dict[str, Dict[str, Optional[float]]] = Field(default_factory=dict)
    variance_components: Optional[VarianceComponentsReport] = None
    diagnostics: TestReport = Field(default_factory=TestReport)
    basis_test: Optional[SpecTest] = None
    sample_restriction: Optional[str] = None
    flags: List[str] = Field(default_factory=list)


class RunConfig(BaseModel):
    """Resolved options for one CLI invocation."""

    command: Literal["simulate", "estimate", "mc", "shock", "check-ident"]
    nodes_csv: Optional[str] = None
    edges_csv: Optional[str] = None
    config_path: Optional[str] = None
    model: ModelSpec = Field(default_factory=ModelSpec)
    seed: int = Field(0, ge=0, lt=2**64)
    threads: int = Field(1, ge=1)
    out_dir: str = "output"
    categorical: Dict[str, str] = Field(default_factory=dict, description="Categorical covariate -> omitted category")

    @model_validator(mode="after")
    def _check_inputs_exist(self) -> "RunConfig":
        for path in (self.nodes_csv, self.edges_csv, self.config_path):
            if path is not None and not Path(path).exists():
                raise ValueError(f"Referenced file does not exist: {path}")
        return self


class DyadSpec(BaseModel):
    """Dyad covariates for the link-formation logit."""

    numeric: Optional[List[str]] = Field(None, description="Covariates entering as |x_i - x_j| (all if omitted)")
    same_category: List[str] = Field(default_factory=list, description="Covariates entering as 1{x_i == x_j}")


class BootstrapConfig(BaseModel):
    """School-block bootstrap of the control-function pipeline."""

    replicates: int = Field(200, ge=1, description="Number of bootstrap replicates B")
    seed: int = Field(0, ge=0, lt=2**64)
    min_replicates: int = Field(BOOTSTRAP_MIN_REPLICATES, ge=1, description="Smallest B accepted")
    min_success: float = Field(BOOTSTRAP_MIN_SUCCESS, gt=0.0, le=1.0, description="Required share of successful replicates")

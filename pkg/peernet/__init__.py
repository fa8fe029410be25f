"""
Peer effects with isolated students.

Simulates the network effort game, estimates the nested linear-in-means
specifications by GMM, recovers variance components, propagates
counterfactual shocks and corrects for endogenous link formation.
"""

from .errors import (
    BootstrapError,
    ConfigurationError,
    DesignError,
    EstimationError,
    IdentificationError,
    InputValidationError,
    PeerNetError,
    UniquenessError,
)
from .models import (
    BootstrapConfig,
    DgpConfig,
    DgpVariant,
    DyadSpec,
    EstimateReport,
    ModelSpec,
    ModelVariant,
    SampleRestriction,
    ShockKind,
    ShockScenario,
    StructuralParams,
    monte_carlo_params,
)
from .netgraph import SchoolNetwork, build_annihilator, row_normalize
from .structsim import SchoolData, simulate_school, solve_equilibrium
from .gmm import GmmFit, fit, restrict_sample
from .varcomp import VarComp, fit_varcomp
from .counterfactual import apply_shock, multiplier_distribution
from .netform import bootstrap_vcov, build_control_bases, fit_dyadic_logit, run_control_function
from .data_utils import DataUtils

__all__ = [
    "PeerNetError",
    "InputValidationError",
    "ConfigurationError",
    "UniquenessError",
    "DesignError",
    "EstimationError",
    "IdentificationError",
    "BootstrapError",
    "StructuralParams",
    "monte_carlo_params",
    "DgpConfig",
    "DgpVariant",
    "ModelSpec",
    "ModelVariant",
    "SampleRestriction",
    "ShockKind",
    "ShockScenario",
    "DyadSpec",
    "BootstrapConfig",
    "EstimateReport",
    "SchoolNetwork",
    "build_annihilator",
    "row_normalize",
    "SchoolData",
    "simulate_school",
    "solve_equilibrium",
    "GmmFit",
    "fit",
    "restrict_sample",
    "VarComp",
    "fit_varcomp",
    "apply_shock",
    "multiplier_distribution",
    "fit_dyadic_logit",
    "build_control_bases",
    "run_control_function",
    "bootstrap_vcov",
    "DataUtils",
]

"""
Exception hierarchy shared by all estimation and simulation modules.
"""

from typing import Optional

from numpy.linalg import LinAlgError


class PeerNetError(Exception):
    """Base error carrying the name of the module that raised it."""

    module = "peernet"

    def __init__(self, detail: str, module: Optional[str] = None):
        super().__init__(detail)
        self.detail = detail
        if module is not None:
            self.module = module

    def to_dict(self) -> dict:
        return {"module": self.module, "error": type(self).__name__, "detail": self.detail}


class InputValidationError(PeerNetError):
    """Malformed adjacency matrices, CSV inputs or covariate tables."""


class ConfigurationError(PeerNetError):
    """Invalid configuration values (school sizes, covariance, replicate counts)."""


class UniquenessError(PeerNetError):
    """The network game has no unique equilibrium (|lambda| >= 1)."""

    module = "structsim"


class DesignError(PeerNetError):
    """Rank-deficient regressors or instruments after projection."""

    module = "gmm"


class EstimationError(PeerNetError):
    """Numerical failure while estimating a model."""


class IdentificationError(PeerNetError):
    """Graph-based identification conditions are violated."""

    module = "netgraph"


class BootstrapError(PeerNetError):
    """Too many bootstrap replicates failed."""

    module = "netform"


# Failures that end one replication or replicate but not the whole run.
REPLICATE_ERRORS = (PeerNetError, LinAlgError, ValueError)


def describe(error: Exception) -> str:
    return error.detail if isinstance(error, PeerNetError) else f"{type(error).__name__}: {error}"

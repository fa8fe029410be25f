"""
The structural effort game: best responses, the unique Nash equilibrium,
the GPA production function and shock draws.

Shock vectors follow one storage convention throughout: ``eps`` holds the
draw of delta^2 * epsilon (the object with variance sigma_eps2), so the
effort equation uses delta * epsilon = eps / delta.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .errors import ConfigurationError, InputValidationError, UniquenessError
from .models import StructuralParams
from .netgraph import SchoolNetwork

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, None]


@dataclass(frozen=True, eq=False)
class SchoolData:
    """Covariates and outcomes of one school, plus latent quantities when simulated."""

    X: np.ndarray
    y: np.ndarray
    covariate_names: Tuple[str, ...] = ()
    effort: Optional[np.ndarray] = None
    eta: Optional[np.ndarray] = None
    eps: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if X.shape[0] == 1 and np.ndim(self.X) == 1:
            X = X.T
        y = np.asarray(self.y, dtype=float).ravel()
        if X.shape[0] != y.shape[0]:
            raise InputValidationError(f"X has {X.shape[0]} rows but y has {y.shape[0]}", module="structsim")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names", tuple(f"x{k + 1}" for k in range(X.shape[1])))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, keep: np.ndarray) -> "SchoolData":
        idx = np.flatnonzero(np.asarray(keep, dtype=bool))
        latent = {
            name: None if getattr(self, name) is None else getattr(self, name)[idx]
            for name in ("effort", "eta", "eps")
        }
        return SchoolData(X=self.X[idx], y=self.y[idx], covariate_names=self.covariate_names, **latent)

    def check_aligned(self, net: SchoolNetwork) -> None:
        if self.n != net.n:
            raise InputValidationError(
                f"School {net.school_id}: network has {net.n} nodes but data has {self.n} rows",
                module="structsim",
            )


def resolvent_solve(net: SchoolNetwork, lam: float, rhs: np.ndarray) -> np.ndarray:
    """Solve (I - lam G) x = rhs by sparse LU."""
    system = (sp.identity(net.n, format="csc") - lam * net.G).tocsc()
    x = spsolve(system, rhs)
    return np.asarray(x, dtype=float).reshape(rhs.shape)


def composite_params(params: StructuralParams) -> Tuple[np.ndarray, np.ndarray]:
    """Reduced-form (beta_tilde, gamma_tilde)."""
    return params.beta_tilde, params.gamma_tilde


def solve_equilibrium(
    net: SchoolNetwork,
    X: np.ndarray,
    params: StructuralParams,
    eps_draws: np.ndarray,
) -> np.ndarray:
    """
    Unique Nash equilibrium effort of the school's game.

    Args:
        net: School network
        X: n x K covariates
        params: Structural parameters of this school
        eps_draws: Draws of delta^2 * epsilon

    Returns:
        Effort vector e = (I - lam G)^{-1} delta (c + X beta + G X gamma + epsilon)
    """
    if abs(params.lam) >= 1:
        raise UniquenessError(f"|lambda| = {abs(params.lam)} >= 1: equilibrium is not unique")
    X = np.asarray(X, dtype=float)
    GX = net.G @ X
    delta = params.delta
    marginal = params.c + X @ np.asarray(params.beta) + GX @ np.asarray(params.gamma) + eps_draws / delta**2
    return resolvent_solve(net, params.lam, delta * marginal)


def best_response(
    net: SchoolNetwork,
    X: np.ndarray,
    params: StructuralParams,
    eps_draws: np.ndarray,
    effort: np.ndarray,
) -> np.ndarray:
    """Best response of every student to the others' effort."""
    X = np.asarray(X, dtype=float)
    delta = params.delta
    marginal = params.c + X @ np.asarray(params.beta) + (net.G @ X) @ np.asarray(params.gamma) + eps_draws / delta**2
    return delta * marginal + params.lam * (net.G @ effort)


def produce_gpa(
    net: SchoolNetwork,
    X: np.ndarray,
    effort: np.ndarray,
    params: StructuralParams,
    eta_draws: np.ndarray,
) -> np.ndarray:
    """GPA production: y = alpha + delta e + X theta + eta."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] != net.n:
        raise InputValidationError(f"X has {X.shape[0]} rows for a {net.n}-node network", module="structsim")
    return params.alpha + params.delta * np.asarray(effort) + X @ params.theta_vec + np.asarray(eta_draws)


def reduced_form_intercepts(
    params: Union[StructuralParams, Sequence[StructuralParams]],
    lam: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    School intercepts of the reduced form for isolated and non-isolated students.

    Returns:
        (kappa_iso, kappa_noniso) arrays with one entry per school
    """
    schools = [params] if isinstance(params, StructuralParams) else list(params)
    kappa_iso, kappa_noniso = [], []
    for p in schools:
        lam_s = p.lam if lam is None else lam
        base = p.delta**2 * p.c
        kappa_iso.append(base + p.alpha)
        kappa_noniso.append(base + (1.0 - lam_s) * p.alpha)
    return np.asarray(kappa_iso), np.asarray(kappa_noniso)


def reduced_form_gpa(
    net: SchoolNetwork,
    X: np.ndarray,
    params: StructuralParams,
    eta_draws: np.ndarray,
    eps_draws: np.ndarray,
) -> np.ndarray:
    """Solve the matrix reduced form directly for y (equivalence oracle for the structural path)."""
    X = np.asarray(X, dtype=float)
    kappa_iso, kappa_noniso = reduced_form_intercepts(params)
    intercept = kappa_iso[0] * net.iso_mask + kappa_noniso[0] * net.noniso_mask
    GX = net.G @ X
    disturbance = eta_draws - params.lam * (net.G @ eta_draws) + eps_draws
    rhs = intercept + X @ params.beta_tilde + GX @ params.gamma_tilde + disturbance
    return resolvent_solve(net, params.lam, rhs)


def draw_shocks(
    n: int,
    sigma_eta2: float,
    sigma_eps2: float,
    rho: float,
    seed: SeedLike = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draw i.i.d. bivariate normal (eta, delta^2 epsilon) pairs.

    The second component is built as rho * z1 + sqrt(1 - rho^2) * z2 so that
    rho = 1 with equal variances gives identical draws.
    """
    if sigma_eta2 <= 0 or sigma_eps2 <= 0:
        raise ConfigurationError("Shock variances must be positive", module="structsim")
    if abs(rho) > 1:
        raise ConfigurationError(f"Correlation {rho} outside [-1, 1]", module="structsim")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    z = rng.standard_normal((2, n))
    eta = np.sqrt(sigma_eta2) * z[0]
    eps = np.sqrt(sigma_eps2) * (rho * z[0] + np.sqrt(1.0 - rho**2) * z[1])
    return eta, eps


def simulate_school(
    net: SchoolNetwork,
    X: np.ndarray,
    params: StructuralParams,
    seed: SeedLike = None,
    covariate_names: Tuple[str, ...] = (),
) -> SchoolData:
    """Draw shocks, solve the equilibrium and produce GPA for one school."""
    eta, eps = draw_shocks(net.n, params.sigma_eta2, params.sigma_eps2, params.rho, seed)
    effort = solve_equilibrium(net, X, params, eps)
    y = produce_gpa(net, X, effort, params, eta)
    return SchoolData(X=X, y=y, covariate_names=covariate_names, effort=effort, eta=eta, eps=eps)

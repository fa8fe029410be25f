"""
Concentrated quasi-maximum likelihood for the error-covariance components.

The projected residuals F_s'v_s have covariance
sigma_eps2 * Omega_s(tau, rho) with
Omega_s = I + tau^2 F'WW'F + rho tau F'(W + W')F and W = I - lambda G.
sigma_eps2 is profiled out, leaving a two-dimensional search over (tau, rho).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg, optimize, stats

from .config import QML_GRID_SIZE, SIGMA_ETA_LR_LEVEL, TAU_MAX, TAU_MIN
from .errors import EstimationError, InputValidationError
from .gmm import GmmFit, sandwich
from .models import VarianceComponentsReport
from .netgraph import SchoolNetwork, build_annihilator

logger = logging.getLogger(__name__)

LAMBDA_ZERO_TOL = 0.01


@dataclass(frozen=True, eq=False)
class _SchoolTerms:
    u: np.ndarray
    A: np.ndarray
    B: np.ndarray


class QmlProblem:
    """Per-school quadratic forms of one residual set, cached for repeated evaluation."""

    def __init__(
        self,
        lambda_hat: float,
        residuals: Sequence[np.ndarray],
        nets: Sequence[SchoolNetwork],
        bases: Optional[Sequence[np.ndarray]] = None,
    ):
        if len(residuals) != len(nets):
            raise InputValidationError(f"{len(residuals)} residual blocks for {len(nets)} schools", module="varcomp")
        if bases is None:
            bases = [build_annihilator(net).F for net in nets]
        self.lambda_hat = float(lambda_hat)
        self.terms: List[_SchoolTerms] = []
        for v, net, F in zip(residuals, nets, bases):
            W = np.eye(net.n) - self.lambda_hat * net.interaction.dense()
            WF = W.T @ F
            self.terms.append(_SchoolTerms(
                u=F.T @ np.asarray(v, dtype=float),
                A=WF.T @ WF,
                B=F.T @ (W + W.T) @ F,
            ))
        self.df = sum(t.u.shape[0] for t in self.terms)
        if self.df < 1:
            raise EstimationError("No degrees of freedom left after projection", module="varcomp")

    def omega(self, t: _SchoolTerms, tau: float, rho: float) -> np.ndarray:
        return np.eye(t.u.shape[0]) + tau**2 * t.A + rho * tau * t.B

    def factors(self, tau: float, rho: float) -> Optional[list]:
        """Cholesky factors of every Omega_s, or None when one is not positive definite."""
        out = []
        for t in self.terms:
            try:
                out.append(linalg.cho_factor(self.omega(t, tau, rho), lower=True))
            except linalg.LinAlgError:
                return None
        return out

    def quad_and_logdet(self, tau: float, rho: float):
        factors = self.factors(tau, rho)
        if factors is None:
            return None
        quad, logdet = 0.0, 0.0
        for t, cf in zip(self.terms, factors):
            quad += float(t.u @ linalg.cho_solve(cf, t.u))
            logdet += 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
        return quad, logdet

    def sigma_eps2(self, tau: float, rho: float) -> float:
        parts = self.quad_and_logdet(tau, rho)
        if parts is None:
            raise EstimationError(f"Omega is not positive definite at tau={tau}, rho={rho}", module="varcomp")
        return parts[0] / self.df

    def concentrated(self, tau: float, rho: float) -> float:
        parts = self.quad_and_logdet(tau, rho)
        if parts is None:
            return -np.inf
        quad, logdet = parts
        if quad <= 0:
            return -np.inf
        return -0.5 * self.df * np.log(quad / self.df) - 0.5 * logdet

    def full(self, sigma_eps2: float, tau: float, rho: float) -> float:
        parts = self.quad_and_logdet(tau, rho)
        if parts is None or sigma_eps2 <= 0:
            return -np.inf
        quad, logdet = parts
        return -0.5 * self.df * np.log(sigma_eps2) - 0.5 * logdet - 0.5 * quad / sigma_eps2


def concentrated_objective(
    tau: float,
    rho: float,
    lambda_hat: float,
    residuals: Sequence[np.ndarray],
    nets: Sequence[SchoolNetwork],
    bases: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """
    Concentrated quasi-log-likelihood at (tau, rho).

    Args:
        tau: sigma_eta / sigma_eps, positive
        rho: Shock correlation in [-1, 1]
        lambda_hat: Estimated peer effect used to build W
        residuals: Projected residuals per school
        nets: School networks
        bases: Orthonormal bases F_s; the dual-group annihilator's by default

    Returns:
        Objective value, or -inf where some Omega_s is not positive definite
    """
    return QmlProblem(lambda_hat, residuals, nets, bases).concentrated(tau, rho)


def full_objective(
    sigma_eps2: float,
    tau: float,
    rho: float,
    lambda_hat: float,
    residuals: Sequence[np.ndarray],
    nets: Sequence[SchoolNetwork],
    bases: Optional[Sequence[np.ndarray]] = None,
) -> float:
    """Quasi-log-likelihood before profiling; its maximum over sigma_eps2 is the concentrated value minus df/2."""
    return QmlProblem(lambda_hat, residuals, nets, bases).full(sigma_eps2, tau, rho)


@dataclass(frozen=True, eq=False)
class VarComp:
    """Estimated variance components."""

    sigma_eta2: float
    sigma_eps2: float
    rho: float
    tau: float
    llh: float
    converged: bool
    flags: List[str] = field(default_factory=list)
    omega_factors: Optional[list] = None

    def to_report(self) -> VarianceComponentsReport:
        return VarianceComponentsReport(
            sigma_eps2=self.sigma_eps2, sigma_eta2=self.sigma_eta2, rho=self.rho,
            tau=self.tau, llh=self.llh, converged=self.converged, flags=list(self.flags),
        )


def fit_varcomp(
    fit: GmmFit,
    nets: Sequence[SchoolNetwork],
    tau_max: float = TAU_MAX,
    grid_size: int = QML_GRID_SIZE,
) -> VarComp:
    """
    Maximize the concentrated objective over (tau, rho) in [TAU_MIN, tau_max] x [-1, 1].

    A log-spaced grid in tau by a linear grid in rho picks the start, then a
    bounded Nelder-Mead polish runs in (log tau, rho).
    """
    flags = []
    if abs(fit.lam) < LAMBDA_ZERO_TOL:
        logger.warning(f"lambda estimate {fit.lam:.4f} is near zero; variance components are weakly identified")
        flags.append("lambda_near_zero")
    problem = QmlProblem(fit.lam, fit.residuals, nets, [b.annihilator.F for b in fit.design.blocks])

    taus = np.geomspace(TAU_MIN, tau_max, grid_size)
    rhos = np.linspace(-1.0, 1.0, grid_size)
    grid = np.array([[problem.concentrated(t, r) for r in rhos] for t in taus])
    if not np.isfinite(grid).any():
        raise EstimationError("Concentrated objective is -inf on the whole grid", module="varcomp")
    i, j = np.unravel_index(np.argmax(grid), grid.shape)
    best = (float(taus[i]), float(rhos[j]), float(grid[i, j]))

    def negative(z):
        value = problem.concentrated(np.exp(z[0]), z[1])
        return -value if np.isfinite(value) else np.inf

    result = optimize.minimize(
        negative,
        x0=np.array([np.log(best[0]), best[1]]),
        method="Nelder-Mead",
        bounds=[(np.log(TAU_MIN), np.log(tau_max)), (-1.0, 1.0)],
        options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000},
    )
    converged = bool(result.success)
    if np.isfinite(result.fun) and -result.fun >= best[2]:
        best = (float(np.exp(result.x[0])), float(result.x[1]), float(-result.fun))
    tau, rho, llh = best

    if not converged:
        logger.warning(f"QML polish did not converge: {result.message}")
        flags.append("not_converged")
    if abs(rho) >= 1.0 - 1e-6:
        logger.warning(f"QML estimate rho={rho:.4f} is on the boundary")
        flags.append("rho_at_boundary")
    if tau <= TAU_MIN * (1.0 + 1e-6):
        logger.warning("QML estimate tau is at its lower bound (sigma_eta2 near zero)")
        flags.append("tau_at_lower_bound")
    # grid row 0 is tau = TAU_MIN, where rho is unidentified
    lr = 2.0 * (llh - float(np.max(grid[0])))
    if lr < stats.chi2.isf(SIGMA_ETA_LR_LEVEL, 2):
        logger.warning(f"sigma_eta2 = 0 is not rejected (LR = {lr:.2f}); tau is near its lower bound")
        flags.append("sigma_eta2_near_zero")
    if tau >= tau_max * (1.0 - 1e-6):
        logger.warning("QML estimate tau is at its upper bound")
        flags.append("tau_at_upper_bound")

    sigma_eps2 = problem.sigma_eps2(tau, rho)
    return VarComp(
        sigma_eta2=tau**2 * sigma_eps2,
        sigma_eps2=sigma_eps2,
        rho=rho,
        tau=tau,
        llh=llh,
        converged=converged,
        flags=flags,
        omega_factors=problem.factors(tau, rho),
    )


def qml_vcov(fit: GmmFit, varcomp: VarComp, nets: Sequence[SchoolNetwork]) -> np.ndarray:
    """
    Covariance of psi with the moment covariance implied by the variance components:
    sum_s Z_s'(sigma_eps2 I + sigma_eta2 WW' + rho sigma_eta sigma_eps (W + W'))Z_s.
    """
    cross = varcomp.rho * np.sqrt(varcomp.sigma_eta2 * varcomp.sigma_eps2)
    q = fit.design.blocks[0].Z.shape[1]
    meat = np.zeros((q, q))
    for block, net in zip(fit.design.blocks, nets):
        W = np.eye(net.n) - fit.lam * net.interaction.dense()
        omega = varcomp.sigma_eps2 * np.eye(net.n) + varcomp.sigma_eta2 * (W @ W.T) + cross * (W + W.T)
        meat += block.Z.T @ omega @ block.Z
    return fit.psi_block(sandwich(fit.design, fit.weight, meat))


def with_qml_vcov(fit: GmmFit, varcomp: VarComp, nets: Sequence[SchoolNetwork]) -> GmmFit:
    return replace(fit, vcov_qml=qml_vcov(fit, varcomp, nets))

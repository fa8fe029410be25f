"""
Specification tests: first-stage strength of the excluded instruments,
Sargan-Hansen overidentification and Hausman contrasts between nested models.
"""

import logging
from typing import Literal, Optional, Sequence

import numpy as np
from scipy import linalg, stats

from .config import HAUSMAN_EIG_TOL
from .errors import DesignError, InputValidationError
from .gmm import Design, GmmFit, build_design, clustered_meat, solve_gmm
from .models import HausmanResult, ModelSpec, SpecTest, TestReport
from .netgraph import SchoolNetwork
from .structsim import SchoolData

logger = logging.getLogger(__name__)


def first_stage_f(design: Design) -> float:
    """
    School-clustered F statistic for the excluded instruments in the
    first-stage regression of JGy on all instruments.
    """
    q = design.n_excluded
    if q < 1:
        raise DesignError("Weak-instrument F needs at least one excluded instrument", module="diagnostics")
    _, R, Z = design.stacked()
    target = R[:, 0]
    ZZ_inv = linalg.inv(Z.T @ Z)
    pi = ZZ_inv @ (Z.T @ target)
    residuals = design.split(target - Z @ pi)
    V = ZZ_inv @ clustered_meat(design.blocks, residuals) @ ZZ_inv
    b = pi[:q]
    stat = float(b @ linalg.pinvh(V[:q, :q]) @ b)
    return stat / q


def weak_iv_f(spec: ModelSpec, nets: Sequence[SchoolNetwork], data: Sequence[SchoolData]) -> float:
    """Weak-instrument F of a specification; collinear instruments raise DesignError."""
    return first_stage_f(build_design(spec, nets, data))


def sargan(fit: GmmFit) -> Optional[SpecTest]:
    """
    Hansen J test of the overidentifying restrictions.

    The efficient weight is the inverse of the school-clustered moment
    covariance at the fit's residuals; J is evaluated at the re-weighted
    estimate.

    Returns:
        SpecTest with df = excluded instruments - 1, or None when exactly identified
    """
    df = fit.design.n_excluded - 1
    if df < 1:
        logger.info(f"{fit.spec.variant.label}: exactly identified, Sargan test unavailable")
        return None
    design = fit.design
    Jy, R, Z = design.stacked()
    weight = linalg.pinvh(clustered_meat(design.blocks, fit.residuals))
    coef = solve_gmm(R, Z, Jy, weight)
    g = Z.T @ (Jy - R @ coef)
    stat = float(max(g @ weight @ g, 0.0))
    return SpecTest(stat=stat, df=df, p=float(stats.chi2.sf(stat, df)))


def hausman(
    fit_restricted: GmmFit,
    fit_flexible: GmmFit,
    contrast: Literal["psi", "lambda"] = "psi",
) -> HausmanResult:
    """
    Hausman contrast d'(V_flexible - V_restricted)^+ d with d = psi_restricted - psi_flexible.

    Eigenvalues of the variance contrast below the clipping tolerance are
    discarded; df is the number kept. A contrast with eigenvalues below
    minus the tolerance is flagged as indefinite.
    """
    if fit_restricted.n_obs != fit_flexible.n_obs or fit_restricted.psi_names != fit_flexible.psi_names:
        raise InputValidationError("Hausman test needs both fits on identical data", module="diagnostics")
    psi_r, psi_f = fit_restricted.psi_hat, fit_flexible.psi_hat
    usable = np.isfinite(psi_r) & np.isfinite(psi_f)
    if contrast == "lambda":
        usable[1:] = False
    idx = np.flatnonzero(usable)
    d = (psi_r - psi_f)[idx]
    V = (fit_flexible.vcov_white - fit_restricted.vcov_white)[np.ix_(idx, idx)]
    eig, vec = linalg.eigh((V + V.T) / 2.0)
    scale = float(np.max(np.abs(eig))) if eig.size else 0.0
    tol = HAUSMAN_EIG_TOL * scale
    indefinite = bool(scale > 0 and np.any(eig < -tol))
    if indefinite:
        logger.warning(f"Hausman: variance contrast is indefinite (min eigenvalue {eig.min():.3e}); using the positive part")
    keep = eig > tol if scale > 0 else np.zeros_like(eig, dtype=bool)
    rank = int(keep.sum())
    if rank == 0:
        return HausmanResult(stat=0.0, df=0, p=1.0, contrast=contrast, indefinite=indefinite)
    projected = vec[:, keep].T @ d
    stat = float(np.sum(projected**2 / eig[keep]))
    return HausmanResult(stat=stat, df=rank, p=float(stats.chi2.sf(stat, rank)), contrast=contrast, indefinite=indefinite)


def build_test_report(fit: GmmFit, restricted: Optional[GmmFit] = None, contrast: str = "psi") -> TestReport:
    """The fit's diagnostics, with a Hausman contrast against a restricted fit when given."""
    report = fit.diagnostics
    if restricted is None:
        return report
    test = hausman(restricted, fit, contrast=contrast)
    return report.model_copy(update={"hausman_stat": test.stat, "hausman_df": test.df, "hausman_p": test.p})

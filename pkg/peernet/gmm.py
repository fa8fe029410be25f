"""
Instrumented GMM for the four nested linear-in-means specifications.

Every school's outcome, regressors and instruments are premultiplied by the
school's annihilator J, the per-school blocks are stacked, and
psi = (lambda, beta_tilde, gamma_tilde) is estimated by 2SLS or by two-step
efficient GMM. Variances are school-clustered sandwiches.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, stats

from .config import DESIGN_RANK_TOL
from .errors import DesignError, EstimationError, InputValidationError
from .models import ModelSpec, ModelVariant, SampleRestriction, SpecTest, TestReport
from .netgraph import Annihilator, SchoolNetwork, build_annihilator, check_distance3, identity_annihilator
from .structsim import SchoolData

logger = logging.getLogger(__name__)

LAMBDA = "lambda"
CONSTANT = "const"
HAS_FRIENDS = "has_friends"


def annihilator_for(variant: ModelVariant, net: SchoolNetwork) -> Annihilator:
    """Projection used by a specification: none (Model 1), school (Models 2-3), school x status (Model 4)."""
    if variant == ModelVariant.GLOBAL_INTERCEPT:
        return identity_annihilator(net.n)
    return build_annihilator(net, split_status=variant == ModelVariant.DUAL_FE)


@dataclass(frozen=True, eq=False)
class SchoolBlock:
    """Projected design of one school."""

    school_id: str
    annihilator: Annihilator
    Jy: np.ndarray
    R: np.ndarray
    Z: np.ndarray
    aux_raw: np.ndarray

    @property
    def n(self) -> int:
        return self.Jy.shape[0]


@dataclass(frozen=True, eq=False)
class Design:
    """Stacked GMM design with column bookkeeping."""

    spec: ModelSpec
    blocks: List[SchoolBlock]
    regressor_names: List[str]
    instrument_names: List[str]
    psi_names: List[str]
    extra_names: List[str]
    n_excluded: int
    dropped: List[str] = field(default_factory=list)

    @property
    def n_obs(self) -> int:
        return sum(b.n for b in self.blocks)

    @property
    def n_schools(self) -> int:
        return len(self.blocks)

    @property
    def psi_index(self) -> List[Optional[int]]:
        """Column of R holding each psi entry, or None when the column was dropped."""
        position = {name: j for j, name in enumerate(self.regressor_names)}
        return [position.get(name) for name in self.psi_names]

    def stacked(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        Jy = np.concatenate([b.Jy for b in self.blocks])
        R = np.vstack([b.R for b in self.blocks])
        Z = np.vstack([b.Z for b in self.blocks])
        return Jy, R, Z

    def split(self, stacked: np.ndarray) -> List[np.ndarray]:
        offsets = np.cumsum([b.n for b in self.blocks])[:-1]
        return np.split(stacked, offsets)


def _column_norms(M: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(M * M, axis=0)) if M.size else np.zeros(M.shape[1])


def _annihilated(raw: np.ndarray, projected: np.ndarray) -> np.ndarray:
    """Columns whose projection vanishes relative to their raw size."""
    raw_norm = _column_norms(raw)
    return _column_norms(projected) <= DESIGN_RANK_TOL * np.maximum(raw_norm, np.finfo(float).tiny)


def _pivoted_rank(M: np.ndarray, scale: Optional[float] = None) -> Tuple[int, np.ndarray]:
    """Numerical rank and column pivots of a pivoted QR factorization."""
    if M.shape[1] == 0:
        return 0, np.arange(0)
    _, R, piv = linalg.qr(M, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    reference = scale if scale is not None else (diag[0] if diag.size else 0.0)
    if reference <= 0:
        return 0, piv
    return int(np.sum(diag > DESIGN_RANK_TOL * reference)), piv


def restrict_sample(
    nets: Sequence[SchoolNetwork],
    data: Sequence[SchoolData],
    exclude: Optional[SampleRestriction],
) -> Tuple[List[SchoolNetwork], List[SchoolData]]:
    """
    Drop isolated or non-nominating students before estimation.

    Links to dropped students are removed, so a student whose only friends
    were dropped becomes isolated in the restricted network. Schools left
    without students are skipped.
    """
    if exclude is None:
        return list(nets), list(data)
    kept_nets, kept_data = [], []
    dropped = 0
    for net, d in zip(nets, data):
        d.check_aligned(net)
        mask = net.fully_isolated_mask if exclude == SampleRestriction.ISOLATED else net.iso_mask
        keep = mask == 0
        dropped += int(net.n - keep.sum())
        if not keep.any():
            logger.warning(f"School {net.school_id}: no students left after dropping {exclude.value} students")
            continue
        kept_nets.append(net.induced(keep))
        kept_data.append(d.subset(keep))
    if not kept_nets:
        raise InputValidationError(f"No students left after dropping {exclude.value} students", module="gmm")
    logger.info(f"Dropped {dropped} {exclude.value} students from {len(nets)} schools")
    return kept_nets, kept_data


def build_design(
    spec: ModelSpec,
    nets: Sequence[SchoolNetwork],
    data: Sequence[SchoolData],
    extra: Optional[Sequence[np.ndarray]] = None,
    extra_names: Optional[Sequence[str]] = None,
) -> Design:
    """
    Project and stack the regressors R = [JGy, JX, JGX, aux] and the
    instruments Z = [JG^2X, ..., JG^pX, JX, JGX, aux].

    Args:
        spec: Model specification
        nets: School networks
        data: School data aligned with nets
        extra: Optional per-school matrices of additional exogenous columns
        extra_names: Names of the additional columns

    Returns:
        Design with per-school blocks

    Raises:
        DesignError: when the instruments are rank deficient after projection
    """
    if len(nets) != len(data):
        raise InputValidationError(f"{len(nets)} networks but {len(data)} data blocks", module="gmm")
    if not nets:
        raise InputValidationError("No schools to estimate on", module="gmm")
    covariates = list(data[0].covariate_names)
    K = len(covariates)
    for net, d in zip(nets, data):
        d.check_aligned(net)
        if d.X.shape[1] != K:
            raise InputValidationError(f"School {net.school_id} has {d.X.shape[1]} covariates, expected {K}", module="gmm")

    extra_names = list(extra_names or [])
    if extra_names and (extra is None or len(extra) != len(nets)):
        raise InputValidationError("Extra regressors must be given for every school", module="gmm")

    variant = spec.variant
    aux_names = []
    if variant == ModelVariant.GLOBAL_INTERCEPT:
        aux_names.append(CONSTANT)
    if variant == ModelVariant.SCHOOL_FE_ISOLATED_DUMMY:
        aux_names.append(HAS_FRIENDS)
    aux_names += extra_names

    exog_names = [f"beta_{x}" for x in covariates] + [f"gamma_{x}" for x in covariates]
    excl_names = [f"G{q}_{x}" for q in range(2, spec.instrument_power + 1) for x in covariates]

    annihilators, raw, projected = [], [], []
    for s, (net, d) in enumerate(zip(nets, data)):
        ann = annihilator_for(variant, net)
        G = net.G
        GX = G @ d.X
        powers, GqX = [], GX
        for _ in range(2, spec.instrument_power + 1):
            GqX = G @ GqX
            powers.append(GqX)
        aux = []
        if variant == ModelVariant.GLOBAL_INTERCEPT:
            aux.append(np.ones((net.n, 1)))
        if variant == ModelVariant.SCHOOL_FE_ISOLATED_DUMMY:
            aux.append(net.noniso_mask.astype(float)[:, None])
        if extra_names:
            aux.append(np.asarray(extra[s], dtype=float).reshape(net.n, len(extra_names)))
        aux = np.hstack(aux) if aux else np.empty((net.n, 0))
        parts = {
            "y": d.y[:, None],
            "Gy": (G @ d.y)[:, None],
            "exog": np.hstack([d.X, GX]),
            "excl": np.hstack(powers),
            "aux": aux,
        }
        annihilators.append(ann)
        raw.append(parts)
        projected.append({k: ann.apply(v) for k, v in parts.items()})

    def stack(source, key):
        return np.vstack([p[key] for p in source])

    dropped = []
    keep = {}
    for key, names in (("exog", exog_names), ("excl", excl_names), ("aux", aux_names)):
        dead = _annihilated(stack(raw, key), stack(projected, key))
        for j in np.flatnonzero(dead):
            logger.warning(f"{variant.label}: column {names[j]} is annihilated by the projection and dropped")
            dropped.append(names[j])
        keep[key] = np.flatnonzero(~dead)

    excl = stack(projected, "excl")[:, keep["excl"]]
    exog = stack(projected, "exog")[:, keep["exog"]]
    core = np.hstack([excl, exog])
    core_names = [excl_names[j] for j in keep["excl"]] + [exog_names[j] for j in keep["exog"]]
    rank, piv = _pivoted_rank(core)
    if rank < core.shape[1]:
        offenders = [core_names[j] for j in piv[rank:]]
        raise DesignError(f"{variant.label}: instruments are collinear after projection: {offenders}")

    aux = stack(projected, "aux")[:, keep["aux"]]
    if aux.shape[1]:
        coef, *_ = linalg.lstsq(core, aux)
        residual = aux - core @ coef
        rank, piv = _pivoted_rank(residual, scale=float(_column_norms(aux).max()))
        kept = np.sort(piv[:rank])
        for j in np.sort(piv[rank:]):
            name = aux_names[keep["aux"][j]]
            logger.warning(f"{variant.label}: column {name} is collinear with the design and dropped")
            dropped.append(name)
        keep["aux"] = keep["aux"][kept]

    n_excluded = len(keep["excl"])
    if n_excluded < 1:
        raise DesignError(f"{variant.label}: no excluded instruments survive the projection")

    kept_exog = [exog_names[j] for j in keep["exog"]]
    kept_aux = [aux_names[j] for j in keep["aux"]]
    blocks = []
    for net, ann, r, p in zip(nets, annihilators, raw, projected):
        exog_s = p["exog"][:, keep["exog"]]
        aux_s = p["aux"][:, keep["aux"]]
        blocks.append(SchoolBlock(
            school_id=net.school_id,
            annihilator=ann,
            Jy=p["y"].ravel(),
            R=np.hstack([p["Gy"], exog_s, aux_s]),
            Z=np.hstack([p["excl"][:, keep["excl"]], exog_s, aux_s]),
            aux_raw=r["aux"][:, keep["aux"]],
        ))

    return Design(
        spec=spec,
        blocks=blocks,
        regressor_names=[LAMBDA] + kept_exog + kept_aux,
        instrument_names=[excl_names[j] for j in keep["excl"]] + kept_exog + kept_aux,
        psi_names=[LAMBDA] + exog_names,
        extra_names=kept_aux,
        n_excluded=n_excluded,
        dropped=dropped,
    )


@dataclass(frozen=True, eq=False)
class GmmFit:
    """Estimated specification: coefficients, residuals, variances and diagnostics."""

    spec: ModelSpec
    design: Design
    coef: np.ndarray
    residuals: List[np.ndarray]
    weight: np.ndarray
    vcov_full: np.ndarray
    diagnostics: TestReport = field(default_factory=TestReport)
    fe_hat: Dict[str, Dict[str, Optional[float]]] = field(default_factory=dict)
    vcov_qml: Optional[np.ndarray] = None
    basis_test: Optional[SpecTest] = None
    flags: List[str] = field(default_factory=list)

    @property
    def lam(self) -> float:
        return float(self.coef[0])

    @property
    def psi_names(self) -> List[str]:
        return self.design.psi_names

    @property
    def psi_hat(self) -> np.ndarray:
        """(lambda, beta_tilde, gamma_tilde) with NaN where a column was dropped."""
        return np.array([self.coef[j] if j is not None else np.nan for j in self.design.psi_index])

    @property
    def vcov_white(self) -> np.ndarray:
        return self.psi_block(self.vcov_full)

    @property
    def n_obs(self) -> int:
        return self.design.n_obs

    def psi_block(self, V: np.ndarray) -> np.ndarray:
        """Restrict a regressor-space matrix to psi, with NaN rows/columns for dropped entries."""
        index = self.design.psi_index
        out = np.full((len(index), len(index)), np.nan)
        rows = [i for i, j in enumerate(index) if j is not None]
        cols = [j for j in index if j is not None]
        out[np.ix_(rows, rows)] = V[np.ix_(cols, cols)]
        return out

    def named_estimates(self) -> Dict[str, float]:
        return {name: float(v) for name, v in zip(self.psi_names, self.psi_hat)}

    def extra_estimates(self) -> Dict[str, float]:
        offset = len(self.design.regressor_names) - len(self.design.extra_names)
        return {name: float(self.coef[offset + j]) for j, name in enumerate(self.design.extra_names)}

    def standard_errors(self, vcov: Optional[np.ndarray] = None) -> Dict[str, float]:
        V = self.vcov_white if vcov is None else vcov
        return {name: float(np.sqrt(max(V[i, i], 0.0))) if np.isfinite(V[i, i]) else np.nan
                for i, name in enumerate(self.psi_names)}

    def extra_standard_errors(self) -> Dict[str, float]:
        offset = len(self.design.regressor_names) - len(self.design.extra_names)
        diag = np.diag(self.vcov_full)
        return {name: float(np.sqrt(max(diag[offset + j], 0.0))) for j, name in enumerate(self.design.extra_names)}


def _check_nonsingular(M: np.ndarray, what: str) -> None:
    eig = linalg.eigvalsh(M)
    if eig.size == 0 or eig[-1] <= 0 or eig[0] <= DESIGN_RANK_TOL * eig[-1]:
        raise EstimationError(f"{what} is singular", module="gmm")


def solve_gmm(R: np.ndarray, Z: np.ndarray, Jy: np.ndarray, weight: np.ndarray) -> np.ndarray:
    A = R.T @ Z
    H = A @ weight @ A.T
    _check_nonsingular(H, "B (R'Z W Z'R)")
    try:
        return linalg.solve(H, A @ weight @ (Z.T @ Jy), assume_a="sym")
    except (linalg.LinAlgError, ValueError) as e:
        raise EstimationError(f"GMM normal equations could not be solved: {e}", module="gmm") from e


def clustered_meat(blocks: Sequence[SchoolBlock], residuals: Sequence[np.ndarray]) -> np.ndarray:
    """Sum over schools of (Z_s'v_s)(Z_s'v_s)'."""
    scores = np.array([b.Z.T @ v for b, v in zip(blocks, residuals)])
    return scores.T @ scores


def sandwich(design: Design, weight: np.ndarray, meat: np.ndarray) -> np.ndarray:
    """H^-1 A W S W A' H^-1 with A = R'Z and H = A W A'."""
    _, R, Z = design.stacked()
    A = R.T @ Z
    H = A @ weight @ A.T
    _check_nonsingular(H, "B (R'Z W Z'R)")
    H_inv = linalg.inv(H)
    bread = H_inv @ A @ weight
    V = bread @ meat @ bread.T
    return (V + V.T) / 2.0


def white_vcov(fit: "GmmFit", nets: Optional[Sequence[SchoolNetwork]] = None, full: bool = False) -> np.ndarray:
    """
    School-clustered heteroskedasticity-robust covariance.

    Returns:
        Covariance of psi (NaN for dropped columns), or of every regressor when full is set
    """
    V = sandwich(fit.design, fit.weight, clustered_meat(fit.design.blocks, fit.residuals))
    return V if full else fit.psi_block(V)


def fit(
    spec: ModelSpec,
    nets: Sequence[SchoolNetwork],
    data: Sequence[SchoolData],
    extra: Optional[Sequence[np.ndarray]] = None,
    extra_names: Optional[Sequence[str]] = None,
) -> GmmFit:
    """
    Estimate psi by 2SLS, or by two-step efficient GMM when spec.two_step is set.

    Raises:
        DesignError: rank-deficient instruments
        EstimationError: singular Z'Z or B
    """
    from .diagnostics import first_stage_f, sargan

    flags = []
    if not any(check_distance3(net).passed for net in nets):
        logger.warning(f"{spec.variant.label}: no school has a pair at distance three; lambda may be unidentified")
        flags.append("no_distance3_pair")

    design = build_design(spec, nets, data, extra=extra, extra_names=extra_names)
    Jy, R, Z = design.stacked()
    ZZ = Z.T @ Z
    _check_nonsingular(ZZ, "Z'Z")
    weight = linalg.inv(ZZ)
    coef = solve_gmm(R, Z, Jy, weight)
    if spec.two_step:
        meat = clustered_meat(design.blocks, design.split(Jy - R @ coef))
        weight = linalg.pinvh(meat)
        coef = solve_gmm(R, Z, Jy, weight)
    residuals = design.split(Jy - R @ coef)

    if abs(coef[0]) >= 1:
        logger.warning(f"{spec.variant.label}: lambda estimate {coef[0]:.4f} lies outside (-1, 1)")
        flags.append("lambda_outside_unit_interval")

    vcov = sandwich(design, weight, clustered_meat(design.blocks, residuals))
    result = GmmFit(spec=spec, design=design, coef=coef, residuals=residuals, weight=weight,
                    vcov_full=vcov, flags=flags)

    report = TestReport(weak_iv_F=first_stage_f(design))
    test = sargan(result)
    if test is not None:
        report = report.model_copy(update={"sargan_stat": test.stat, "sargan_df": test.df, "sargan_p": test.p})
    fe = recover_fixed_effects(result, spec, nets, data)
    logger.debug(f"{spec.variant.label}: lambda={coef[0]:.4f} on {design.n_obs} students in {design.n_schools} schools")
    return replace(result, diagnostics=report, fe_hat=fe)


def _group_mean(values: np.ndarray, mask: np.ndarray) -> Optional[float]:
    return float(values[mask].mean()) if mask.any() else None


def recover_fixed_effects(
    fit: GmmFit,
    spec: ModelSpec,
    nets: Sequence[SchoolNetwork],
    data: Sequence[SchoolData],
) -> Dict[str, Dict[str, Optional[float]]]:
    """
    Intercepts eliminated by the projection, recovered from structural residuals.

    Returns:
        school_id -> {"kappa_iso", "kappa_noniso"}; None marks an empty status group
    """
    estimates = {name: 0.0 if np.isnan(v) else v for name, v in fit.named_estimates().items()}
    extras = fit.extra_estimates()
    covariates = [name[len("beta_"):] for name in fit.psi_names if name.startswith("beta_")]
    beta = np.array([estimates[f"beta_{x}"] for x in covariates])
    gamma = np.array([estimates[f"gamma_{x}"] for x in covariates])
    user_extras = [j for j, name in enumerate(fit.design.extra_names) if name not in (CONSTANT, HAS_FRIENDS)]
    user_coef = np.array([extras[fit.design.extra_names[j]] for j in user_extras])
    offset = extras.get(HAS_FRIENDS, 0.0)

    fixed_effects = {}
    for net, d, block in zip(nets, data, fit.design.blocks):
        u = d.y - fit.lam * (net.G @ d.y) - d.X @ beta - (net.G @ d.X) @ gamma
        if user_extras:
            u = u - block.aux_raw[:, user_extras] @ user_coef
        iso = net.iso_mask == 1
        if spec.variant == ModelVariant.GLOBAL_INTERCEPT:
            level = extras.get(CONSTANT, float(u.mean()))
            kappa = {"kappa_iso": level, "kappa_noniso": level}
        elif spec.variant == ModelVariant.SCHOOL_FE:
            level = float(u.mean())
            kappa = {"kappa_iso": level, "kappa_noniso": level}
        elif spec.variant == ModelVariant.SCHOOL_FE_ISOLATED_DUMMY:
            level = float((u - offset * net.noniso_mask).mean())
            kappa = {"kappa_iso": level, "kappa_noniso": level + offset}
        else:
            kappa = {"kappa_iso": _group_mean(u, iso), "kappa_noniso": _group_mean(u, ~iso)}
        fixed_effects[net.school_id] = kappa
    return fixed_effects


def wald_test(fit: GmmFit, names: Sequence[str], vcov: Optional[np.ndarray] = None) -> SpecTest:
    """
    Joint Wald test that the named regressors have zero coefficients.

    Names dropped from the design are skipped with a warning.
    """
    position = {name: j for j, name in enumerate(fit.design.regressor_names)}
    idx = [position[name] for name in names if name in position]
    skipped = [name for name in names if name not in position]
    if skipped:
        logger.warning(f"Wald test skips {len(skipped)} columns not in the design: {skipped}")
    if not idx:
        raise DesignError("None of the tested columns survive in the design")
    V = (fit.vcov_full if vcov is None else vcov)[np.ix_(idx, idx)]
    b = fit.coef[idx]
    stat = float(max(b @ linalg.pinvh(V) @ b, 0.0))
    df = len(idx)
    return SpecTest(stat=stat, df=df, p=float(stats.chi2.sf(stat, df)))

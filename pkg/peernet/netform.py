"""
Endogenous link formation: a dyadic logit with sender and receiver
heterogeneity, cubic B-spline control bases of the estimated
heterogeneity, the corrected second stage and a school-block bootstrap.
"""

import concurrent.futures
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.interpolate import BSpline
from scipy.special import expit

from .config import LOGIT_GRAD_TOL, LOGIT_MAX_ITER, SPLINE_DEGREE, SPLINE_INTERIOR_KNOTS
from .errors import (
    REPLICATE_ERRORS,
    BootstrapError,
    ConfigurationError,
    EstimationError,
    InputValidationError,
    describe,
)
from .gmm import GmmFit, fit, wald_test
from .models import BootstrapConfig, DgpConfig, DyadSpec, ModelSpec
from .netgraph import SchoolNetwork
from .structsim import SchoolData, draw_shocks, reduced_form_gpa, resolvent_solve

logger = logging.getLogger(__name__)

MAX_NEWTON_STEP = 1.0


@dataclass(frozen=True, eq=False)
class DyadCovariates:
    """Per-school n x n x P arrays of dyad covariates."""

    arrays: List[np.ndarray]
    names: List[str]

    @property
    def n_covariates(self) -> int:
        return len(self.names)

    def subset(self, index: Sequence[int]) -> "DyadCovariates":
        return DyadCovariates(arrays=[self.arrays[i] for i in index], names=list(self.names))


def build_dyad_covariates(data: Sequence[SchoolData], spec: Optional[DyadSpec] = None) -> DyadCovariates:
    """
    Absolute differences of numeric covariates and same-value indicators of
    categorical ones, for every ordered within-school pair.
    """
    spec = spec or DyadSpec()
    names_all = list(data[0].covariate_names) if data else []
    numeric = names_all if spec.numeric is None else list(spec.numeric)
    unknown = [x for x in numeric + list(spec.same_category) if x not in names_all]
    if unknown:
        raise InputValidationError(f"Unknown dyad covariates: {unknown}", module="netform")
    names = [f"absdiff_{x}" for x in numeric] + [f"same_{x}" for x in spec.same_category]
    arrays = []
    for d in data:
        layers = []
        for x in numeric:
            v = d.X[:, names_all.index(x)]
            layers.append(np.abs(v[:, None] - v[None, :]))
        for x in spec.same_category:
            v = d.X[:, names_all.index(x)]
            layers.append((v[:, None] == v[None, :]).astype(float))
        arrays.append(np.stack(layers, axis=2) if layers else np.zeros((d.n, d.n, 0)))
    return DyadCovariates(arrays=arrays, names=names)


def _linear_index(Xd: np.ndarray, beta: np.ndarray, mu_out: np.ndarray, mu_in: np.ndarray) -> np.ndarray:
    base = Xd @ beta if beta.size else 0.0
    return base + mu_out[:, None] + mu_in[None, :]


def dyad_loglik(
    beta: np.ndarray,
    mu_out: np.ndarray,
    mu_in: np.ndarray,
    adjacency: np.ndarray,
    Xd: np.ndarray,
    mask: Optional[np.ndarray] = None,
) -> float:
    """Logit log-likelihood of one school's directed links over the masked dyads (off-diagonal by default)."""
    Y = np.asarray(adjacency.toarray() if sp.issparse(adjacency) else adjacency, dtype=float)
    if mask is None:
        mask = ~np.eye(Y.shape[0], dtype=bool)
    eta = _linear_index(Xd, np.asarray(beta, dtype=float), np.asarray(mu_out), np.asarray(mu_in))
    ll = Y * eta - np.logaddexp(0.0, eta)
    return float(np.sum(np.where(mask, ll, 0.0)))


def simulate_link_formation(
    beta: np.ndarray,
    mu_out: np.ndarray,
    mu_in: np.ndarray,
    Xd: np.ndarray,
    rng: np.random.Generator,
    school_id: str = "0",
) -> SchoolNetwork:
    """Draw a_ij ~ Bernoulli(logistic(x_ij'beta + mu_out_i + mu_in_j)) for every i != j."""
    n = len(mu_out)
    p = expit(_linear_index(Xd, np.asarray(beta, dtype=float), np.asarray(mu_out), np.asarray(mu_in)))
    A = (rng.random((n, n)) < p).astype(float)
    np.fill_diagonal(A, 0.0)
    return SchoolNetwork(school_id=school_id, adjacency=sp.csr_matrix(A))


def _retained(Y: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Drop senders (receivers) whose links among retained dyads are all 0 or all 1,
    repeating until no further node separates.

    Returns:
        (out_ok, in_ok, mask, out_side, in_side); side is -1 for an all-zero
        node, +1 for an all-one node, 0 when retained
    """
    n = Y.shape[0]
    off = ~np.eye(n, dtype=bool)
    out_ok, in_ok = np.ones(n, dtype=bool), np.ones(n, dtype=bool)
    out_side, in_side = np.zeros(n, dtype=int), np.zeros(n, dtype=int)
    while True:
        mask = off & out_ok[:, None] & in_ok[None, :]
        links = np.where(mask, Y, 0.0)
        out_links, out_pairs = links.sum(axis=1), mask.sum(axis=1)
        in_links, in_pairs = links.sum(axis=0), mask.sum(axis=0)
        out_bad = out_ok & ((out_links == 0) | (out_links == out_pairs))
        in_bad = in_ok & ((in_links == 0) | (in_links == in_pairs))
        if not out_bad.any() and not in_bad.any():
            return out_ok, in_ok, mask, out_side, in_side
        out_side[out_bad] = np.where(out_links[out_bad] == 0, -1, 1)
        in_side[in_bad] = np.where(in_links[in_bad] == 0, -1, 1)
        out_ok &= ~out_bad
        in_ok &= ~in_bad


@dataclass(frozen=True, eq=False)
class FirstStageFit:
    """Dyadic logit estimates; mu's of excluded nodes are clamped to the school's retained range."""

    beta_dyad: np.ndarray
    dyad_names: List[str]
    school_ids: List[str]
    node_ids: List[Tuple[str, ...]]
    mu_out: List[np.ndarray]
    mu_in: List[np.ndarray]
    excluded_out: List[np.ndarray]
    excluded_in: List[np.ndarray]
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    flags: List[str] = field(default_factory=list)

    def excluded_nodes(self) -> List[Dict[str, str]]:
        out = []
        for sid, nodes, ex_out, ex_in in zip(self.school_ids, self.node_ids, self.excluded_out, self.excluded_in):
            for i in np.flatnonzero(ex_out | ex_in):
                side = "both" if ex_out[i] and ex_in[i] else ("out" if ex_out[i] else "in")
                out.append({"school_id": sid, "node_id": nodes[i], "dimension": side})
        return out

    def to_frame(self) -> pd.DataFrame:
        frames = []
        for sid, nodes, mo, mi, eo, ei in zip(
            self.school_ids, self.node_ids, self.mu_out, self.mu_in, self.excluded_out, self.excluded_in
        ):
            frames.append(pd.DataFrame({
                "school_id": sid, "node_id": list(nodes), "mu_out": mo, "mu_in": mi,
                "excluded_out": eo, "excluded_in": ei,
            }))
        return pd.concat(frames, ignore_index=True)


def fit_dyadic_logit(
    nets: Sequence[SchoolNetwork],
    dyads: DyadCovariates,
    max_iter: int = LOGIT_MAX_ITER,
    tol: float = LOGIT_GRAD_TOL,
) -> FirstStageFit:
    """
    Maximize the dyadic logit likelihood in (beta, mu_out, mu_in).

    Each sweep takes a Newton step for all sender effects, then for all
    receiver effects, then for the pooled dyad coefficients, until every
    score component is below tol in absolute value. Sender effects are
    normalized to mean zero per school over retained nodes.
    """
    if len(nets) != len(dyads.arrays):
        raise InputValidationError(f"{len(nets)} networks but {len(dyads.arrays)} dyad arrays", module="netform")
    P = dyads.n_covariates
    schools = []
    for net, Xd in zip(nets, dyads.arrays):
        Y = net.adjacency.toarray()
        out_ok, in_ok, mask, out_side, in_side = _retained(Y)
        if not mask.any():
            raise EstimationError(f"School {net.school_id}: no dyads left after removing separated nodes", module="netform")
        n_dropped = int((~out_ok).sum() + (~in_ok).sum())
        if n_dropped:
            logger.warning(f"School {net.school_id}: {n_dropped} node effects excluded for separation")
        density = Y[mask].mean()
        schools.append({
            "Y": Y, "Xd": Xd, "mask": mask, "out_ok": out_ok, "in_ok": in_ok,
            "out_side": out_side, "in_side": in_side,
            "mu_out": np.zeros(net.n), "mu_in": np.full(net.n, np.log(density / (1.0 - density))),
        })
    beta = np.zeros(P)

    def residuals(s):
        p = expit(_linear_index(s["Xd"], beta, s["mu_out"], s["mu_in"]))
        return np.where(s["mask"], s["Y"] - p, 0.0), np.where(s["mask"], p * (1.0 - p), 0.0)

    def newton(score, info):
        return np.clip(score / np.maximum(info, 1e-12), -MAX_NEWTON_STEP, MAX_NEWTON_STEP)

    def grad_norm():
        worst, g_beta = 0.0, np.zeros(P)
        for s in schools:
            r, _ = residuals(s)
            worst = max(worst, np.abs(r.sum(axis=1)[s["out_ok"]]).max(initial=0.0),
                        np.abs(r.sum(axis=0)[s["in_ok"]]).max(initial=0.0))
            if P:
                g_beta += np.einsum("ij,ijp->p", r, s["Xd"])
        return max(worst, np.abs(g_beta).max(initial=0.0))

    converged, n_iter, gnorm = False, 0, grad_norm()
    while n_iter < max_iter and gnorm > tol:
        for s in schools:
            r, w = residuals(s)
            s["mu_out"] = s["mu_out"] + np.where(s["out_ok"], newton(r.sum(axis=1), w.sum(axis=1)), 0.0)
            r, w = residuals(s)
            s["mu_in"] = s["mu_in"] + np.where(s["in_ok"], newton(r.sum(axis=0), w.sum(axis=0)), 0.0)
        if P:
            g, H = np.zeros(P), np.zeros((P, P))
            for s in schools:
                r, w = residuals(s)
                g += np.einsum("ij,ijp->p", r, s["Xd"])
                H += np.einsum("ij,ijp,ijq->pq", w, s["Xd"], s["Xd"])
            step = np.linalg.lstsq(H, g, rcond=None)[0]
            beta = beta + np.clip(step, -MAX_NEWTON_STEP, MAX_NEWTON_STEP)
        n_iter += 1
        gnorm = grad_norm()
    converged = gnorm <= tol
    flags = []
    if not converged:
        logger.warning(f"Dyadic logit stopped after {n_iter} sweeps with score norm {gnorm:.2e}")
        flags.append("not_converged")

    loglik = sum(dyad_loglik(beta, s["mu_out"], s["mu_in"], s["Y"], s["Xd"], s["mask"]) for s in schools)
    mu_out, mu_in, ex_out, ex_in = [], [], [], []
    for s in schools:
        shift = s["mu_out"][s["out_ok"]].mean() if s["out_ok"].any() else 0.0
        mo = s["mu_out"] - shift
        mi = s["mu_in"] + shift
        mu_out.append(_clamp_excluded(mo, s["out_ok"], s["out_side"]))
        mu_in.append(_clamp_excluded(mi, s["in_ok"], s["in_side"]))
        ex_out.append(~s["out_ok"])
        ex_in.append(~s["in_ok"])

    return FirstStageFit(
        beta_dyad=beta,
        dyad_names=list(dyads.names),
        school_ids=[net.school_id for net in nets],
        node_ids=[net.node_ids for net in nets],
        mu_out=mu_out,
        mu_in=mu_in,
        excluded_out=ex_out,
        excluded_in=ex_in,
        loglik=float(loglik),
        converged=converged,
        n_iter=n_iter,
        grad_norm=float(gnorm),
        flags=flags,
    )


def _clamp_excluded(mu: np.ndarray, ok: np.ndarray, side: np.ndarray) -> np.ndarray:
    """Excluded nodes take the school's smallest (all-zero) or largest (all-one) retained value."""
    out = np.array(mu, dtype=float, copy=True)
    if ok.any():
        out[side < 0] = mu[ok].min()
        out[side > 0] = mu[ok].max()
    return out


def cox_de_boor(x: np.ndarray, knots: np.ndarray, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """
    B-spline basis by the Cox-de Boor recursion.

    Evaluation points equal to the right boundary fall in the last
    non-degenerate interval.
    """
    t = np.asarray(knots, dtype=float)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n_basis = len(t) - degree - 1
    out = np.zeros((len(x), n_basis))
    for row, xv in enumerate(x):
        B = np.zeros(len(t) - 1)
        span = min(int(np.searchsorted(t, xv, side="right")) - 1, len(t) - degree - 2)
        B[span] = 1.0
        for k in range(1, degree + 1):
            nxt = np.zeros(len(t) - 1 - k)
            for i in range(len(nxt)):
                left = (xv - t[i]) / (t[i + k] - t[i]) * B[i] if t[i + k] != t[i] else 0.0
                right = (t[i + k + 1] - xv) / (t[i + k + 1] - t[i + 1]) * B[i + 1] if t[i + k + 1] != t[i + 1] else 0.0
                nxt[i] = left + right
            B = nxt
        out[row] = B
    return out


def knot_vector(values: np.ndarray, n_interior: int = SPLINE_INTERIOR_KNOTS, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """Clamped knot vector with interior knots at equally spaced empirical quantiles."""
    values = np.asarray(values, dtype=float)
    if np.unique(values).size < n_interior + 2:
        raise EstimationError(
            f"Need at least {n_interior + 2} distinct values to place {n_interior} interior knots, "
            f"got {np.unique(values).size}",
            module="netform",
        )
    lo, hi = values.min(), values.max()
    interior = np.unique(np.quantile(values, np.arange(1, n_interior + 1) / (n_interior + 1)))
    interior = interior[(interior > lo) & (interior < hi)]
    if interior.size < n_interior:
        logger.warning(f"Tied quantiles: {interior.size} distinct interior knots instead of {n_interior}")
    return np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])


def bspline_basis(x: np.ndarray, knots: np.ndarray, degree: int = SPLINE_DEGREE) -> np.ndarray:
    """Dense B-spline design matrix; points are clipped into the knot range."""
    x = np.clip(np.asarray(x, dtype=float), knots[degree], knots[-degree - 1])
    return BSpline.design_matrix(x, knots, degree).toarray()


@dataclass(frozen=True, eq=False)
class ControlBases:
    """Raw cubic B-spline bases of (mu_out, mu_in), one block per dimension."""

    per_school: List[np.ndarray]
    knots_out: np.ndarray
    knots_in: np.ndarray
    names: List[str]
    n_out: int

    @property
    def bases(self) -> np.ndarray:
        return np.vstack(self.per_school)

    @property
    def interior_out(self) -> np.ndarray:
        return self.knots_out[SPLINE_DEGREE + 1:-SPLINE_DEGREE - 1]

    @property
    def interior_in(self) -> np.ndarray:
        return self.knots_in[SPLINE_DEGREE + 1:-SPLINE_DEGREE - 1]


def build_control_bases(first_stage: FirstStageFit, n_interior: int = SPLINE_INTERIOR_KNOTS) -> ControlBases:
    """
    Knots at the deciles of the retained mu estimates, bases evaluated at every
    node's (clamped) estimate.
    """
    retained_out = np.concatenate([m[~e] for m, e in zip(first_stage.mu_out, first_stage.excluded_out)])
    retained_in = np.concatenate([m[~e] for m, e in zip(first_stage.mu_in, first_stage.excluded_in)])
    knots_out = knot_vector(retained_out, n_interior)
    knots_in = knot_vector(retained_in, n_interior)
    per_school = [
        np.hstack([bspline_basis(mo, knots_out), bspline_basis(mi, knots_in)])
        for mo, mi in zip(first_stage.mu_out, first_stage.mu_in)
    ]
    n_out = len(knots_out) - SPLINE_DEGREE - 1
    n_in = len(knots_in) - SPLINE_DEGREE - 1
    names = [f"h_out_{k + 1}" for k in range(n_out)] + [f"h_in_{k + 1}" for k in range(n_in)]
    logger.info(f"Control bases: {n_out} + {n_in} columns")
    return ControlBases(per_school=per_school, knots_out=knots_out, knots_in=knots_in, names=names, n_out=n_out)


def fit_second_stage(
    spec: ModelSpec,
    nets: Sequence[SchoolNetwork],
    data: Sequence[SchoolData],
    bases: ControlBases,
) -> GmmFit:
    """GMM with the control bases appended to both regressors and instruments, plus their joint Wald test."""
    result = fit(spec, nets, data, extra=bases.per_school, extra_names=bases.names)
    kept = [name for name in bases.names if name in result.design.extra_names]
    if not kept:
        logger.warning("Every control basis column was dropped; no basis test")
        return result
    test = wald_test(result, kept)
    logger.info(f"Control bases jointly: chi2({test.df}) = {test.stat:.2f}, p = {test.p:.4f}")
    return replace(result, basis_test=test)


def run_control_function(
    spec: ModelSpec,
    nets: Sequence[SchoolNetwork],
    data: Sequence[SchoolData],
    dyads: DyadCovariates,
) -> Tuple[FirstStageFit, ControlBases, GmmFit]:
    """First stage, bases and corrected second stage in one call."""
    first = fit_dyadic_logit(nets, dyads)
    bases = build_control_bases(first)
    return first, bases, fit_second_stage(spec, nets, data, bases)


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    vcov: np.ndarray
    draws: np.ndarray
    psi_names: List[str]
    intervals: Dict[str, Tuple[float, float]]
    n_success: int
    n_failed: int

    def standard_errors(self) -> Dict[str, float]:
        return {name: float(np.sqrt(max(self.vcov[i, i], 0.0))) for i, name in enumerate(self.psi_names)}


def _bootstrap_replicate(spec, nets, data, dyads, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    index = rng.integers(0, len(nets), size=len(nets))
    _, _, second = run_control_function(
        spec, [nets[i] for i in index], [data[i] for i in index], dyads.subset(index)
    )
    return second.psi_hat


def bootstrap_vcov(
    spec: ModelSpec,
    nets: Sequence[SchoolNetwork],
    data: Sequence[SchoolData],
    dyads: DyadCovariates,
    config: Optional[BootstrapConfig] = None,
    threads: int = 1,
) -> BootstrapResult:
    """
    School-block bootstrap of the whole control-function pipeline.

    Replicate b resamples schools with replacement using seed + b and
    re-runs the first stage, the bases and the second stage.

    Raises:
        ConfigurationError: replicates below the configured minimum
        BootstrapError: fewer than the required share of replicates succeeded
    """
    config = config or BootstrapConfig()
    B = config.replicates
    if B < config.min_replicates:
        raise ConfigurationError(f"Bootstrap needs at least {config.min_replicates} replicates, got {B}", module="netform")

    results: List[Optional[np.ndarray]] = [None] * B
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        future_to_rep = {
            executor.submit(_bootstrap_replicate, spec, nets, data, dyads, config.seed + b): b for b in range(B)
        }
        for future in concurrent.futures.as_completed(future_to_rep):
            b = future_to_rep[future]
            try:
                results[b] = future.result()
            except REPLICATE_ERRORS as e:
                logger.warning(f"Bootstrap replicate {b} failed: {describe(e)}")

    draws = np.array([r for r in results if r is not None])
    n_success = len(draws)
    if n_success < config.min_success * B:
        raise BootstrapError(f"Only {n_success} of {B} bootstrap replicates succeeded")
    psi_names = _psi_names(data)
    finite = np.all(np.isfinite(draws), axis=0)
    vcov = np.full((draws.shape[1], draws.shape[1]), np.nan)
    if n_success > 1:
        idx = np.flatnonzero(finite)
        vcov[np.ix_(idx, idx)] = np.atleast_2d(np.cov(draws[:, idx], rowvar=False, ddof=1))
    else:
        vcov[np.ix_(finite, finite)] = 0.0
    intervals = {
        name: (float(np.percentile(draws[:, j], 2.5)), float(np.percentile(draws[:, j], 97.5)))
        for j, name in enumerate(psi_names) if finite[j]
    }
    return BootstrapResult(
        vcov=vcov, draws=draws, psi_names=psi_names, intervals=intervals,
        n_success=n_success, n_failed=B - n_success,
    )


def _psi_names(data: Sequence[SchoolData]) -> List[str]:
    covariates = list(data[0].covariate_names)
    return ["lambda"] + [f"beta_{x}" for x in covariates] + [f"gamma_{x}" for x in covariates]


@dataclass(frozen=True, eq=False)
class EndogenousSample:
    """Simulated schools whose links and outcomes share the sender heterogeneity."""

    nets: List[SchoolNetwork]
    data: List[SchoolData]
    dyads: DyadCovariates
    mu_out: List[np.ndarray]
    mu_in: List[np.ndarray]
    h: List[np.ndarray]


def simulate_endogenous_sample(
    config: DgpConfig,
    seed: int,
    contamination: float = 5.0,
    link_beta: Sequence[float] = (-0.2, -0.1),
    mu_loading: float = 1.0,
    mu_noise: float = 0.5,
    mu_in_mean: float = -1.0,
    mu_in_sd: float = 0.5,
) -> EndogenousSample:
    """
    Draw schools whose links follow the dyadic logit and whose GPA carries
    h = contamination * sin(mu_out) inside the reduced form.

    mu_out loads on the standardized first covariate, so h correlates with
    both the network and the covariates.
    """
    rng = np.random.default_rng(seed)
    params = config.params
    nets, data, dyad_arrays, mu_outs, mu_ins, hs = [], [], [], [], [], []
    for s in range(config.n_schools):
        n = config.school_size
        e1, e2 = rng.uniform(0.0, config.school_mean_high, size=2)
        X = np.column_stack([rng.normal(e1, np.sqrt(config.x1_variance), size=n), rng.poisson(e2, size=n).astype(float)])
        Xd = np.stack([np.abs(X[:, k][:, None] - X[:, k][None, :]) for k in range(X.shape[1])], axis=2)
        z = (X[:, 0] - X[:, 0].mean()) / max(X[:, 0].std(), 1e-12)
        mu_out = mu_loading * z + mu_noise * rng.standard_normal(n)
        mu_in = mu_in_mean + mu_in_sd * rng.standard_normal(n)
        net = simulate_link_formation(np.asarray(link_beta, dtype=float), mu_out, mu_in, Xd, rng, school_id=str(s))
        h = contamination * np.sin(mu_out)
        eta, eps = draw_shocks(n, params.sigma_eta2, params.sigma_eps2, params.rho, rng)
        school_params = params.for_school(alpha=0.0, c=0.0)
        y = reduced_form_gpa(net, X, school_params, eta, eps) + resolvent_solve(net, params.lam, h)
        nets.append(net)
        data.append(SchoolData(X=X, y=y, covariate_names=("x1", "x2"), eta=eta, eps=eps))
        dyad_arrays.append(Xd)
        mu_outs.append(mu_out)
        mu_ins.append(mu_in)
        hs.append(h)
    dyads = DyadCovariates(arrays=dyad_arrays, names=["absdiff_x1", "absdiff_x2"])
    return EndogenousSample(nets=nets, data=data, dyads=dyads, mu_out=mu_outs, mu_in=mu_ins, h=hs)

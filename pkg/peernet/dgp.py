"""
Monte Carlo data-generating processes A, B and C and the replication harness.
"""

import concurrent.futures
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import REPLICATE_ERRORS, ConfigurationError, EstimationError, describe
from .models import DgpConfig, DgpVariant, ModelSpec, ModelVariant
from .netgraph import SchoolNetwork
from .structsim import SchoolData, draw_shocks, produce_gpa, solve_equilibrium

logger = logging.getLogger(__name__)

COVARIATE_NAMES = ("x1", "x2")
QUANTILE_METHOD = "inverted_cdf"


def degree_distribution(config: DgpConfig) -> np.ndarray:
    """Exact P(k) for k = 0..max_degree."""
    return config.degree_probabilities()


def q90(values: np.ndarray) -> float:
    """Nearest-rank 90th percentile of a school's realized sample."""
    return float(np.quantile(values, 0.9, method=QUANTILE_METHOD))


def generate_network(config: DgpConfig, school_seed, school_id: str = "0") -> SchoolNetwork:
    """
    Draw one school network.

    Each student draws a number of friends k from the degree law and picks k
    distinct schoolmates uniformly at random.
    """
    n = config.school_size
    if n <= config.max_degree:
        raise ConfigurationError(
            f"school_size={n} must exceed max_degree={config.max_degree}", module="dgp"
        )
    rng = school_seed if isinstance(school_seed, np.random.Generator) else np.random.default_rng(school_seed)
    probs = degree_distribution(config)
    degrees = rng.choice(len(probs), size=n, p=probs)
    rows, cols = [], []
    for i, k in enumerate(degrees):
        if k == 0:
            continue
        others = np.delete(np.arange(n), i)
        friends = rng.choice(others, size=k, replace=False)
        rows.extend([i] * k)
        cols.extend(friends.tolist())
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return SchoolNetwork(school_id=school_id, adjacency=A)


@dataclass(frozen=True, eq=False)
class SchoolDraw:
    """Everything a replication draws for one school before GPA is produced."""

    net: SchoolNetwork
    X: np.ndarray
    eta: np.ndarray
    eps: np.ndarray
    c: float
    alpha_c: float


def generate_school_sample(config: DgpConfig, rng: np.random.Generator) -> List[SchoolDraw]:
    """Draw networks, covariates and shocks for all schools of one replication."""
    params = config.params
    draws = []
    for s in range(config.n_schools):
        net = generate_network(config, rng, school_id=str(s))
        e1, e2 = rng.uniform(0.0, config.school_mean_high, size=2)
        x1 = rng.normal(e1, np.sqrt(config.x1_variance), size=net.n)
        x2 = rng.poisson(e2, size=net.n).astype(float)
        X = np.column_stack([x1, x2])
        eta, eps = draw_shocks(net.n, params.sigma_eta2, params.sigma_eps2, params.rho, rng)
        draws.append(SchoolDraw(
            net=net, X=X, eta=eta, eps=eps,
            c=config.c_scale * q90(x2), alpha_c=config.alpha_scale * q90(x1),
        ))
    return draws


def school_alphas(config: DgpConfig, draws: Sequence[SchoolDraw]) -> np.ndarray:
    """GPA shifters per variant: zero (A), the mean of variant C's values (B), or 10 q90(x1) (C)."""
    alpha_c = np.array([d.alpha_c for d in draws])
    if config.variant == DgpVariant.A:
        return np.zeros(len(draws))
    if config.variant == DgpVariant.B:
        return np.full(len(draws), alpha_c.mean())
    return alpha_c


def generate_replication_data(config: DgpConfig, rep_index: int):
    """Simulate one replication; the RNG stream is seeded with master_seed + rep_index."""
    rng = np.random.default_rng(config.master_seed + rep_index)
    draws = generate_school_sample(config, rng)
    alphas = school_alphas(config, draws)
    nets, data = [], []
    for draw, alpha in zip(draws, alphas):
        params = config.params.for_school(alpha=alpha, c=draw.c)
        effort = solve_equilibrium(draw.net, draw.X, params, draw.eps)
        y = produce_gpa(draw.net, draw.X, effort, params, draw.eta)
        nets.append(draw.net)
        data.append(SchoolData(
            X=draw.X, y=y, covariate_names=COVARIATE_NAMES, effort=effort, eta=draw.eta, eps=draw.eps,
        ))
    return nets, data, alphas


def run_replication(config: DgpConfig, rep_index: int) -> List[Dict]:
    """
    Simulate one replication and fit every configured model.

    Returns:
        One record per model with its estimates; failures are recorded, not raised
    """
    from .diagnostics import hausman, sargan
    from .gmm import fit
    from .varcomp import fit_varcomp

    nets, data, alphas = generate_replication_data(config, rep_index)
    records, fits = [], {}
    for model in config.models:
        record = {"dgp": config.variant.value, "rep": rep_index, "model": model, "failed": False, "message": ""}
        try:
            spec = ModelSpec(variant=ModelVariant(model), instrument_power=config.instrument_power)
            gmm_fit = fit(spec, nets, data)
            fits[model] = gmm_fit
            record.update(gmm_fit.named_estimates())
            if model == ModelVariant.SCHOOL_FE_ISOLATED_DUMMY:
                record["has_friends"] = gmm_fit.extra_estimates().get("has_friends", np.nan)
                record["alpha_bar"] = float(np.mean(alphas))
            if model in config.varcomp_models:
                vc = fit_varcomp(gmm_fit, nets)
                record.update({"sigma_eps2": vc.sigma_eps2, "sigma_eta2": vc.sigma_eta2, "rho": vc.rho})
            test = sargan(gmm_fit)
            if test is not None:
                record["sargan_p"] = test.p
        except REPLICATE_ERRORS as e:
            logger.warning(f"Replication {rep_index}, model {model} failed: {describe(e)}")
            record.update({"failed": True, "message": describe(e)})
        records.append(record)
    if 3 in fits and 4 in fits:
        try:
            test = hausman(fits[3], fits[4])
            for record in records:
                if record["model"] == 4:
                    record["hausman_p"] = test.p
        except REPLICATE_ERRORS as e:
            logger.warning(f"Replication {rep_index}: Hausman test failed: {describe(e)}")
    return records


def run_monte_carlo(config: DgpConfig, threads: int = 1, replications: Optional[int] = None) -> List[Dict]:
    """Run all replications in parallel and collect them in replication order."""
    count = replications if replications is not None else config.replications
    logger.info(f"DGP {config.variant.value}: running {count} replications on {threads} threads")
    results: List[Optional[List[Dict]]] = [None] * count
    with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as executor:
        future_to_rep = {executor.submit(run_replication, config, rep): rep for rep in range(count)}
        for future in concurrent.futures.as_completed(future_to_rep):
            rep = future_to_rep[future]
            try:
                results[rep] = future.result()
            except Exception as exc:
                logger.warning(f"Replication {rep} raised an exception: {exc}")
                results[rep] = [{
                    "dgp": config.variant.value, "rep": rep, "model": m, "failed": True, "message": str(exc),
                } for m in config.models]
    return [record for rep_records in results for record in rep_records]


def summarize(records: Sequence[Dict]) -> pd.DataFrame:
    """
    Mean and sample standard deviation of every estimate by DGP and model.

    Returns:
        Long table with columns dgp, model, parameter, mean, sd, n_reps
    """
    frame = pd.DataFrame(list(records))
    if frame.empty or frame["failed"].all():
        raise EstimationError("All replications failed; nothing to summarize", module="dgp")
    ok = frame[~frame["failed"]]
    if ok.groupby(["dgp", "model"]).size().min() < 2:
        raise EstimationError("Need at least two successful replications per model", module="dgp")
    value_cols = [c for c in ok.columns if c not in ("dgp", "rep", "model", "failed", "message")]
    long = ok.melt(id_vars=["dgp", "model"], value_vars=value_cols, var_name="parameter").dropna(subset=["value"])
    summary = (
        long.groupby(["dgp", "model", "parameter"], sort=False)["value"]
        .agg(mean="mean", sd=lambda v: v.std(ddof=1), n_reps="count")
        .reset_index()
    )
    return summary

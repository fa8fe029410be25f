"""
Tests for the dyadic link-formation logit, the B-spline control bases and
the corrected second stage.
"""

import threading

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.special import expit

import peernet.netform
from peernet.errors import ConfigurationError, EstimationError
from peernet.gmm import fit
from peernet.models import BootstrapConfig, DgpConfig, DyadSpec, ModelSpec
from peernet.netform import (
    DyadCovariates,
    _retained,
    bootstrap_vcov,
    build_control_bases,
    build_dyad_covariates,
    bspline_basis,
    cox_de_boor,
    dyad_loglik,
    fit_dyadic_logit,
    knot_vector,
    run_control_function,
    simulate_endogenous_sample,
    simulate_link_formation,
)
from peernet.netgraph import SchoolNetwork
from peernet.structsim import SchoolData


@pytest.fixture(scope="module")
def endogenous():
    return simulate_endogenous_sample(DgpConfig(n_schools=6, school_size=40), seed=1)


@pytest.fixture(scope="module")
def first_stage(endogenous):
    return fit_dyadic_logit(endogenous.nets, endogenous.dyads)


def test_scores_vanish_at_optimum(endogenous, first_stage):
    assert first_stage.converged
    assert first_stage.grad_norm <= 1e-6
    g_beta = np.zeros(len(first_stage.beta_dyad))
    for net, Xd, mo, mi in zip(endogenous.nets, endogenous.dyads.arrays, first_stage.mu_out, first_stage.mu_in):
        Y = net.adjacency.toarray()
        out_ok, in_ok, mask, _, _ = _retained(Y)
        p = expit(Xd @ first_stage.beta_dyad + mo[:, None] + mi[None, :])
        r = np.where(mask, Y - p, 0.0)
        assert np.abs(r.sum(axis=1)[out_ok]).max() <= 1e-6
        assert np.abs(r.sum(axis=0)[in_ok]).max() <= 1e-6
        g_beta += np.einsum("ij,ijp->p", r, Xd)
    assert np.abs(g_beta).max() <= 1e-6


def test_sender_effects_are_centered(first_stage):
    for mo, excluded in zip(first_stage.mu_out, first_stage.excluded_out):
        assert abs(mo[~excluded].mean()) <= 1e-12


def test_loglik_location_invariance(endogenous, first_stage):
    net, Xd = endogenous.nets[0], endogenous.dyads.arrays[0]
    beta, mo, mi = first_stage.beta_dyad, first_stage.mu_out[0], first_stage.mu_in[0]
    a = dyad_loglik(beta, mo, mi, net.adjacency, Xd)
    b = dyad_loglik(beta, mo + 0.8, mi - 0.8, net.adjacency, Xd)
    assert abs(a - b) <= 1e-8 * abs(a)


def test_separated_sender_is_excluded_and_clamped():
    rng = np.random.default_rng(4)
    n = 30
    Xd = np.abs(rng.normal(size=(n, 1))[:, None, :] - rng.normal(size=(n, 1))[None, :, :])
    net = simulate_link_formation(np.array([-0.3]), rng.normal(size=n), np.full(n, -1.0), Xd, rng)
    A = net.adjacency.toarray()
    A[0, :] = 0.0
    silent = SchoolNetwork("silent", sp.csr_matrix(A))
    fs = fit_dyadic_logit([silent], DyadCovariates(arrays=[Xd], names=["absdiff_x1"]))
    assert fs.excluded_out[0][0]
    retained = fs.mu_out[0][~fs.excluded_out[0]]
    assert fs.mu_out[0][0] == retained.min()
    assert {"school_id": "silent", "node_id": "0", "dimension": "out"} in fs.excluded_nodes()
    frame = fs.to_frame()
    assert bool(frame.loc[0, "excluded_out"])


def test_sender_effects_are_recovered():
    rng = np.random.default_rng(9)
    n = 100
    x = rng.normal(size=n)
    Xd = np.abs(x[:, None] - x[None, :])[:, :, None]
    mu_out = rng.normal(size=n)
    mu_in = -1.5 + 0.5 * rng.normal(size=n)
    net = simulate_link_formation(np.array([-0.2]), mu_out, mu_in, Xd, rng)
    fs = fit_dyadic_logit([net], DyadCovariates(arrays=[Xd], names=["absdiff_x"]))
    ok = ~fs.excluded_out[0]
    assert np.corrcoef(fs.mu_out[0][ok], mu_out[ok])[0, 1] > 0.8


def test_bspline_matches_cox_de_boor():
    rng = np.random.default_rng(0)
    values = rng.normal(size=200)
    knots = knot_vector(values)
    x = np.concatenate([values, [values.min(), values.max()], knots[4:-4]])
    B = bspline_basis(x, knots)
    np.testing.assert_allclose(B, cox_de_boor(x, knots), atol=1e-12)
    np.testing.assert_allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert B.shape[1] == 13


def test_knot_vector_needs_distinct_values():
    with pytest.raises(EstimationError):
        knot_vector(np.repeat(np.arange(5.0), 10))


def test_control_bases_have_26_columns(first_stage):
    bases = build_control_bases(first_stage)
    assert bases.bases.shape[1] == 26
    assert len(bases.names) == 26
    assert bases.names[0] == "h_out_1" and bases.names[-1] == "h_in_13"
    assert len(bases.interior_out) == 9


def test_control_function_second_stage(endogenous):
    first, bases, second = run_control_function(ModelSpec(), endogenous.nets, endogenous.data, endogenous.dyads)
    assert second.basis_test is not None
    dropped = [name for name in second.design.dropped if name.startswith("h_")]
    assert len(dropped) >= 2
    assert np.isfinite(second.lam)
    assert first.converged


def test_build_dyad_covariates():
    d = SchoolData(X=np.array([[1.0, 0.0], [3.0, 1.0], [4.0, 0.0]]), y=np.zeros(3), covariate_names=("age", "girl"))
    dyads = build_dyad_covariates([d], DyadSpec(numeric=["age"], same_category=["girl"]))
    assert dyads.names == ["absdiff_age", "same_girl"]
    assert dyads.arrays[0][0, 2, 0] == 3.0
    assert dyads.arrays[0][0, 2, 1] == 1.0
    assert dyads.arrays[0][0, 1, 1] == 0.0


def test_bootstrap_requires_enough_replicates(endogenous):
    with pytest.raises(ConfigurationError):
        bootstrap_vcov(ModelSpec(), endogenous.nets, endogenous.data, endogenous.dyads, BootstrapConfig(replicates=10))


def test_bootstrap_of_identical_schools_has_zero_variance(endogenous):
    """Resampling copies of one school reproduces the same estimate every time."""
    copies = 4
    nets = [SchoolNetwork(f"c{k}", endogenous.nets[0].adjacency) for k in range(copies)]
    data = [endogenous.data[0]] * copies
    dyads = DyadCovariates(arrays=[endogenous.dyads.arrays[0]] * copies, names=endogenous.dyads.names)
    result = bootstrap_vcov(ModelSpec(), nets, data, dyads, BootstrapConfig(replicates=2, min_replicates=2), threads=2)
    assert result.n_success == 2
    finite = np.isfinite(result.vcov)
    assert finite.any()
    np.testing.assert_allclose(result.vcov[finite], 0.0, atol=1e-20)


def test_bootstrap_counts_numerical_failures(endogenous, monkeypatch):
    """A replicate whose solve is singular counts as one failure; the rest still complete."""
    original = peernet.netform.run_control_function
    calls = []
    lock = threading.Lock()

    def singular_once(*args, **kwargs):
        with lock:
            calls.append(1)
            first = len(calls) == 1
        if first:
            raise np.linalg.LinAlgError("Singular matrix")
        return original(*args, **kwargs)

    monkeypatch.setattr(peernet.netform, "run_control_function", singular_once)
    config = BootstrapConfig(replicates=5, min_replicates=2)
    result = bootstrap_vcov(ModelSpec(), endogenous.nets, endogenous.data, endogenous.dyads, config, threads=1)
    assert result.n_success == 4
    assert result.n_failed == 1
    assert result.draws.shape[0] == 4


@pytest.mark.slow
def test_control_function_reduces_contamination_bias():
    config = DgpConfig(n_schools=20, school_size=50)
    corrected, naive = [], []
    for rep in range(100):
        sample = simulate_endogenous_sample(config, seed=1000 + rep)
        naive.append(fit(ModelSpec(), sample.nets, sample.data).lam)
        corrected.append(run_control_function(ModelSpec(), sample.nets, sample.data, sample.dyads)[2].lam)
    truth = config.params.lam
    assert np.mean(np.abs(np.array(corrected) - truth)) < np.mean(np.abs(np.array(naive) - truth))


@pytest.mark.slow
def test_bootstrap_standard_errors_match_white_in_scale():
    sample = simulate_endogenous_sample(DgpConfig(n_schools=20, school_size=50), seed=5)
    _, _, second = run_control_function(ModelSpec(), sample.nets, sample.data, sample.dyads)
    boot = bootstrap_vcov(
        ModelSpec(), sample.nets, sample.data, sample.dyads, BootstrapConfig(replicates=100), threads=4
    )
    ratio = boot.standard_errors()["lambda"] / np.sqrt(second.vcov_white[0, 0])
    assert 1 / 3 < ratio < 3

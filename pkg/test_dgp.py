"""
Tests for the Monte Carlo data-generating processes and replication harness.
"""

import numpy as np
import pandas as pd
import pytest

from peernet.dgp import (
    degree_distribution,
    generate_network,
    generate_replication_data,
    generate_school_sample,
    q90,
    run_monte_carlo,
    school_alphas,
    summarize,
)
from peernet.errors import ConfigurationError, EstimationError
import peernet.gmm
from peernet.models import DgpConfig, DgpVariant, ModelVariant


def test_degree_distribution():
    """P(k) is proportional to (1 + k)^-0.6 on 0..10."""
    probs = degree_distribution(DgpConfig())
    weights = 1.0 / (1.0 + np.arange(11)) ** 0.6
    np.testing.assert_allclose(probs, weights / weights.sum())
    assert abs(probs.sum() - 1.0) < 1e-12


def test_q90_is_nearest_rank():
    assert q90(np.arange(1, 11)) == 9.0
    assert q90(np.array([3.0])) == 3.0


def test_generate_network_shape():
    config = DgpConfig(school_size=40)
    net = generate_network(config, 4)
    assert net.n == 40
    assert net.adjacency.diagonal().sum() == 0
    assert net.out_degree.max() <= config.max_degree


def test_generate_network_rejects_small_school():
    with pytest.raises(ConfigurationError):
        generate_network(DgpConfig(school_size=10), 0)


def test_school_alphas_by_variant(small_dgp):
    draws = generate_school_sample(small_dgp, np.random.default_rng(0))
    alpha_c = school_alphas(small_dgp, draws)
    alpha_a = school_alphas(small_dgp.model_copy(update={"variant": DgpVariant.A}), draws)
    alpha_b = school_alphas(small_dgp.model_copy(update={"variant": DgpVariant.B}), draws)
    np.testing.assert_array_equal(alpha_a, 0.0)
    np.testing.assert_allclose(alpha_b, alpha_c.mean())
    np.testing.assert_allclose(alpha_c, [10.0 * q90(d.X[:, 0]) for d in draws])
    np.testing.assert_allclose([d.c for d in draws], [-1.5 * q90(d.X[:, 1]) for d in draws])


def test_replication_data_is_seeded(small_dgp):
    nets1, data1, _ = generate_replication_data(small_dgp, 0)
    nets2, data2, _ = generate_replication_data(small_dgp, 0)
    _, data3, _ = generate_replication_data(small_dgp, 1)
    for a, b in zip(data1, data2):
        np.testing.assert_array_equal(a.y, b.y)
    for a, b in zip(nets1, nets2):
        assert (a.adjacency != b.adjacency).nnz == 0
    assert not np.array_equal(data1[0].y, data3[0].y)


def test_run_monte_carlo_is_thread_independent(small_dgp):
    """Records come back in replication order whatever the thread count."""
    config = small_dgp.model_copy(update={"models": [2, 4], "varcomp_models": []})
    serial = run_monte_carlo(config, threads=1)
    parallel = run_monte_carlo(config, threads=2)
    assert [(r["rep"], r["model"]) for r in serial] == [(0, 2), (0, 4), (1, 2), (1, 4)]
    pd.testing.assert_frame_equal(pd.DataFrame(serial), pd.DataFrame(parallel))
    assert not any(r["failed"] for r in serial)


def test_summarize_columns(small_dgp):
    config = small_dgp.model_copy(update={"models": [4], "varcomp_models": [], "replications": 3})
    summary = summarize(run_monte_carlo(config))
    assert {"dgp", "model", "parameter", "mean", "sd", "n_reps"} <= set(summary.columns)
    row = summary[summary["parameter"] == "lambda"].iloc[0]
    assert row["n_reps"] == 3


def test_summarize_rejects_all_failed():
    with pytest.raises(EstimationError):
        summarize([{"dgp": "A", "rep": 0, "model": 4, "failed": True, "message": "x"}])


def test_numerical_failure_only_fails_its_model(small_dgp, monkeypatch):
    """A singular solve in one model leaves the other models of the replication intact."""
    original = peernet.gmm.fit

    def singular_for_school_fe(spec, nets, data, **kwargs):
        if spec.variant == ModelVariant.SCHOOL_FE:
            raise np.linalg.LinAlgError("Singular matrix")
        return original(spec, nets, data, **kwargs)

    monkeypatch.setattr(peernet.gmm, "fit", singular_for_school_fe)
    config = small_dgp.model_copy(update={"models": [2, 3, 4], "varcomp_models": []})
    records = run_monte_carlo(config, threads=2, replications=2)
    assert len(records) == 6
    for record in records:
        if record["model"] == 2:
            assert record["failed"]
            assert "LinAlgError" in record["message"]
        else:
            assert not record["failed"]
            assert np.isfinite(record["lambda"])
    assert all("hausman_p" in r for r in records if r["model"] == 4)


def _lambda_means(variant, replications=200):
    config = DgpConfig(variant=variant, replications=replications, models=[1, 2, 3, 4], varcomp_models=[4])
    frame = pd.DataFrame(run_monte_carlo(config, threads=4))
    ok = frame[~frame["failed"]]
    return ok.groupby("model")["lambda"].mean(), ok


@pytest.mark.slow
def test_monte_carlo_lambda_means():
    """Mean lambda estimates reproduce the reference table at desk scale."""
    means_a, _ = _lambda_means("A")
    assert abs(means_a[1] - 0.727) <= 0.015
    assert abs(means_a[2] - 0.700) <= 0.015
    assert abs(means_a[4] - 0.701) <= 0.015

    means_b, _ = _lambda_means("B")
    assert abs(means_b[2] - 0.483) <= 0.015
    assert abs(means_b[3] - 0.700) <= 0.015

    means_c, ok_c = _lambda_means("C")
    assert abs(means_c[2] - 0.422) <= 0.015
    assert abs(means_c[3] - 0.536) <= 0.015
    assert abs(means_c[4] - 0.701) <= 0.015
    assert means_c[2] < means_c[3] < means_c[4]
    assert abs(ok_c[ok_c["model"] == 2]["gamma_x2"].mean() - (-6.719)) <= 0.15

    model4 = ok_c[ok_c["model"] == 4]
    assert 8.1 <= model4["sigma_eps2"].mean() <= 10.1
    assert 14.3 <= model4["sigma_eta2"].mean() <= 16.3
    assert 0.35 <= model4["rho"].mean() <= 0.56

"""
Tests for the structural effort game and GPA production.
"""

import numpy as np
import pytest
from pydantic import ValidationError

from peernet.errors import ConfigurationError, UniquenessError
from peernet.models import StructuralParams, monte_carlo_params
from peernet.structsim import (
    best_response,
    composite_params,
    draw_shocks,
    produce_gpa,
    reduced_form_gpa,
    reduced_form_intercepts,
    simulate_school,
    solve_equilibrium,
)


@pytest.fixture
def school(random_net, params):
    net = random_net(40, 0.06, seed=21)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(net.n, 2))
    eta, eps = draw_shocks(net.n, params.sigma_eta2, params.sigma_eps2, params.rho, rng)
    return net, X, params.for_school(alpha=1.3, c=-0.4), eta, eps


def test_equilibrium_is_fixed_point(school):
    """Equilibrium effort is its own best response."""
    net, X, p, _, eps = school
    effort = solve_equilibrium(net, X, p, eps)
    np.testing.assert_allclose(best_response(net, X, p, eps, effort), effort, atol=1e-10)


def test_isolated_effort_ignores_peers(school):
    net, X, p, _, eps = school
    effort = solve_equilibrium(net, X, p, eps)
    iso = net.iso_mask == 1
    GX = net.G @ X
    own = p.delta * (p.c + X @ np.asarray(p.beta) + GX @ np.asarray(p.gamma) + eps / p.delta**2)
    np.testing.assert_allclose(effort[iso], own[iso], atol=1e-10)


def test_reduced_form_matches_structural_path(school):
    net, X, p, eta, eps = school
    effort = solve_equilibrium(net, X, p, eps)
    y = produce_gpa(net, X, effort, p, eta)
    np.testing.assert_allclose(reduced_form_gpa(net, X, p, eta, eps), y, atol=1e-9)


def test_alpha_shock_moves_gpa_one_for_one(school):
    """Raising alpha by one leaves effort unchanged and lifts every GPA by exactly one."""
    net, X, p, eta, eps = school
    bumped = p.for_school(alpha=p.alpha + 1.0, c=p.c)
    e0, e1 = solve_equilibrium(net, X, p, eps), solve_equilibrium(net, X, bumped, eps)
    np.testing.assert_array_equal(e0, e1)
    y0, y1 = produce_gpa(net, X, e0, p, eta), produce_gpa(net, X, e1, bumped, eta)
    assert np.max(np.abs(y1 - y0 - 1.0)) <= 1e-10


def test_uniqueness_guard(school):
    net, X, _, _, eps = school
    with pytest.raises(ValidationError):
        StructuralParams(**{"lambda": 1.0, "beta": [0.0, 0.0], "gamma": [0.0, 0.0]})
    explosive = StructuralParams.model_construct(
        lam=1.0, beta=[0.0, 0.0], gamma=[0.0, 0.0], delta=1.0, theta=None, alpha=0.0, c=0.0,
        sigma_eta2=1.0, sigma_eps2=1.0, rho=0.0,
    )
    with pytest.raises(UniquenessError):
        solve_equilibrium(net, X, explosive, eps)


def test_composite_params(params):
    beta_tilde, gamma_tilde = composite_params(params)
    d2 = params.delta**2
    np.testing.assert_allclose(beta_tilde, d2 * np.array([1.0, -0.5]) + np.array([0.2, 0.1]))
    np.testing.assert_allclose(gamma_tilde, d2 * np.array([0.8, 0.3]) - 0.5 * np.array([0.2, 0.1]))
    assert params.psi[0] == 0.5


def test_reduced_form_intercepts(params):
    p = params.for_school(alpha=2.0, c=1.0)
    kappa_iso, kappa_noniso = reduced_form_intercepts([p, p.for_school(alpha=0.0, c=1.0)])
    d2 = params.delta**2
    np.testing.assert_allclose(kappa_iso, [d2 + 2.0, d2])
    np.testing.assert_allclose(kappa_noniso, [d2 + 0.5 * 2.0, d2])


def test_draw_shocks_moments():
    eta, eps = draw_shocks(200_000, 4.0, 9.0, 0.5, seed=1)
    assert abs(eta.var() - 4.0) < 0.1
    assert abs(eps.var() - 9.0) < 0.2
    assert abs(np.corrcoef(eta, eps)[0, 1] - 0.5) < 0.01


def test_draw_shocks_perfect_correlation():
    eta, eps = draw_shocks(50, 2.0, 2.0, 1.0, seed=3)
    np.testing.assert_allclose(eta, eps, atol=1e-12)


@pytest.mark.parametrize("args", [(10, -1.0, 1.0, 0.0), (10, 1.0, 1.0, 1.5)])
def test_draw_shocks_rejects_bad_values(args):
    with pytest.raises(ConfigurationError):
        draw_shocks(*args)


def test_simulate_school_is_seeded(random_net):
    net = random_net(20, 0.1, seed=2)
    X = np.random.default_rng(0).normal(size=(20, 2))
    a = simulate_school(net, X, monte_carlo_params(), seed=9)
    b = simulate_school(net, X, monte_carlo_params(), seed=9)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.covariate_names == ("x1", "x2")


def test_lambda_alias():
    p = StructuralParams(**{"lambda": 0.3, "beta": [1.0], "gamma": [0.0]})
    assert p.lam == 0.3
    assert p.model_dump(by_alias=True)["lambda"] == 0.3

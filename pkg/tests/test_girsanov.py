import numpy as np
import pytest

from app.exceptions import CoefficientError, DomainError
from app.services.engine import simulate_paths
from app.services.girsanov import (
    DensityPath,
    GirsanovCoefficients,
    q_conditional_ratio,
    shifted_brownian_mean,
    stochastic_exponential,
)


@pytest.fixture
def big_jump_bundle(grid, point_jumps, brownian):
    return simulate_paths(grid, point_jumps, brownian, n_paths=20000, seed=21)


def test_trivial_coefficients_give_identity(bundle):
    coeffs = GirsanovCoefficients.from_expressions("0", "0")
    assert coeffs.is_trivial
    density = stochastic_exponential(coeffs, bundle)
    np.testing.assert_array_equal(density.M, 1.0)


def test_density_is_a_martingale(big_jump_bundle):
    coeffs = GirsanovCoefficients.from_expressions("0.3", "0.2")
    density = stochastic_exponential(coeffs, big_jump_bundle)
    np.testing.assert_array_equal(density.M[0], 1.0)
    assert np.all(density.M > 0)
    for i in (2, 5, big_jump_bundle.grid.N):
        values = density.M[i]
        se = values.std(ddof=1) / np.sqrt(values.size)
        assert abs(values.mean() - 1.0) < 4 * se


def test_density_with_state_dependent_theta(big_jump_bundle):
    coeffs = GirsanovCoefficients.from_expressions("0.1 * x", "0.2 * zeta")
    density = stochastic_exponential(coeffs, big_jump_bundle)
    values = density.terminal
    se = values.std(ddof=1) / np.sqrt(values.size)
    assert abs(values.mean() - 1.0) < 4 * se


def test_shifted_brownian_mean(big_jump_bundle):
    coeffs = GirsanovCoefficients.from_expressions("0.3", "0.2")
    density = stochastic_exponential(coeffs, big_jump_bundle)
    mean, se = shifted_brownian_mean(density, big_jump_bundle)
    assert abs(mean - 0.3 * big_jump_bundle.grid.T) < 4 * se


def test_theta_at_minus_one_is_a_domain_error(jump_bundle):
    assert jump_bundle.jump_mark.size > 0
    coeffs = GirsanovCoefficients.from_expressions("0", "-1")
    with pytest.raises(DomainError):
        stochastic_exponential(coeffs, jump_bundle)


def test_theta_below_epsilon_floor(jump_bundle):
    coeffs = GirsanovCoefficients.from_expressions("0", "-0.995", epsilon=0.01)
    with pytest.raises(CoefficientError):
        stochastic_exponential(coeffs, jump_bundle)


def test_theta_dominated_by_pi(jump_bundle):
    ok = GirsanovCoefficients.from_expressions("0", "0.05 * zeta", pi_expr="0.1 * zeta")
    audit = ok.audit(jump_bundle)
    assert audit.max_pi_ratio == pytest.approx(0.5)
    assert audit.pi_second_moment == pytest.approx(0.01)

    bad = GirsanovCoefficients.from_expressions("0", "0.5 * zeta", pi_expr="0.1")
    with pytest.raises(CoefficientError):
        bad.audit(jump_bundle)


def test_beta_bound(bundle):
    coeffs = GirsanovCoefficients.from_expressions("2", "0", beta_bound=1.0)
    with pytest.raises(CoefficientError):
        stochastic_exponential(coeffs, bundle)


def test_epsilon_must_be_positive():
    with pytest.raises(CoefficientError):
        GirsanovCoefficients.from_expressions("0", "0", epsilon=0.0)


def test_denominator_modes_agree_without_measure_change(bundle, basis):
    density = DensityPath.identity(bundle)
    payoff = bundle.X[-1] ** 2
    state = bundle.X[3]
    sim = q_conditional_ratio(payoff, density, state, basis, i=3, mode="simulated")
    est = q_conditional_ratio(payoff, density, state, basis, i=3, mode="estimated")
    np.testing.assert_allclose(sim.values, est.values, atol=1e-10)
    # E[X_T^2 | X_t] = X_t^2 + (T - t)
    t = bundle.grid.nodes[3]
    assert sim.mean == pytest.approx(float(np.mean(state ** 2)) + 1.0 - t, abs=5 * sim.stderr + 0.05)


def test_unknown_mode(bundle, basis):
    with pytest.raises(ValueError):
        q_conditional_ratio(bundle.X[-1], DensityPath.identity(bundle), bundle.X[1], basis, mode="exact")

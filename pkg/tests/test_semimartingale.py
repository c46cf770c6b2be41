import numpy as np
import pytest

from app.exceptions import CoefficientError
from app.services.dsl import BoundExpression
from app.services.engine import TimeGrid, simulate_paths
from app.services.semimartingale import (
    FactorizedTerminal,
    backward_bsde,
    chebyshev_grid,
    decompose,
    decomposition_check,
    smoothness_probe,
    type1,
    type2,
    type3,
)
from app.services.solver import Driver


def _bundle(N, no_jumps, brownian, n_paths=4000, seed=3):
    return simulate_paths(TimeGrid(T=1.0, N=N), no_jumps, brownian, n_paths, seed)


def test_backward_bsde_of_constant(bundle, basis):
    value = backward_bsde(bundle, np.full(bundle.n_paths, 2.0), basis)
    np.testing.assert_array_equal(value.values, 2.0)
    assert value.cond_fits[-1] is None
    assert value.z_fits[0] is not None


def test_backward_bsde_with_source(bundle, basis):
    source = np.ones((bundle.grid.N + 1, bundle.n_paths))
    value = backward_bsde(bundle, np.zeros(bundle.n_paths), basis, source=source)
    np.testing.assert_allclose(value.values.mean(axis=1), bundle.grid.T - bundle.grid.nodes, atol=1e-12)


def test_type1_exact_case(bundle, basis):
    F = FactorizedTerminal.from_expressions("x", "1")
    result = type1(F, bundle, basis)
    np.testing.assert_allclose(result.Y, bundle.X, atol=1e-12)
    assert result.identity.passed
    assert result.terminal_error == 0.0
    assert result.kind == 1


def test_type1_product(bundle, basis):
    F = FactorizedTerminal.from_expressions("x", "x + 1")
    result = type1(F, bundle, basis)
    assert result.identity.passed
    assert result.terminal_error <= 1e-12
    assert np.isnan(result.z_mean[bundle.grid.N, 0])


def test_type2_matches_solver(bundle, basis):
    F = BoundExpression.from_source("x + y", ("x", "y"))
    result = type2(F, bundle, basis)
    assert result.identity.passed
    assert result.terminal_error == 0.0
    assert result.extrapolated_fraction <= 0.01
    assert result.family is not None and result.family.x_grid.size == 21


def test_type2_with_explicit_grid(bundle, basis):
    F = BoundExpression.from_source("x * y", ("x", "y"))
    result = type2(F, bundle, basis, x_grid=np.linspace(-3.0, 3.0, 13))
    assert result.family.x_grid.size == 13
    assert np.isfinite(result.identity.worst_ratio)


def test_type3_driver_in_frozen_parameter(bundle, basis):
    F = BoundExpression.from_source("x + y", ("x", "y"))
    result = type3(F, Driver.from_expressions("0.2 * xt"), bundle, basis)
    assert result.kind == 3
    assert result.surface is not None
    assert result.identity.passed


def test_type3_with_y_driver_runs(bundle, basis):
    F = BoundExpression.from_source("x + y", ("x", "y"))
    result = type3(F, Driver.from_expressions("0.2 * y"), bundle, basis, picard_tol=1e-8)
    assert result.surface.iterations > 1
    assert np.all(np.isfinite(result.Y))


@pytest.mark.parametrize("g", ["0.2 * x + 0.1 * xt", "0.3 * s * x", "0.5 * x - 0.2 * xt * s"])
def test_type3_driver_in_state_variables(g, bundle, basis):
    F = BoundExpression.from_source("x + y", ("x", "y"))
    result = type3(F, Driver.from_expressions(g), bundle, basis)
    assert result.identity.passed
    assert result.terminal_error == 0.0


@pytest.mark.parametrize("g", ["0.2 * z", "t", "t * y", "0.1 * t * xt"])
def test_type3_rejects_unsupported_drivers(g, bundle, basis):
    F = BoundExpression.from_source("x + y", ("x", "y"))
    with pytest.raises(ValueError):
        type3(F, Driver.from_expressions(g), bundle, basis)


def test_constructions_need_a_jump_free_bundle(jump_bundle, basis):
    with pytest.raises(ValueError):
        type1(FactorizedTerminal.from_expressions("x", "1"), jump_bundle, basis)


@pytest.mark.parametrize("expr", ["sqrt(x)", "1 / x", "log(x)"])
def test_smoothness_probe_rejects_singular_functions(expr):
    f = BoundExpression.from_source(expr, ("x",))
    with pytest.raises(CoefficientError):
        smoothness_probe(f, -1.0, 1.0)


def test_smoothness_probe_accepts_polynomials():
    smoothness_probe(BoundExpression.from_source("x ^ 3 - x", ("x",)), -2.0, 2.0)


def test_chebyshev_grid_inside_quantiles(bundle):
    g = chebyshev_grid(bundle.X, 15)
    lo, hi = np.quantile(bundle.X, (0.001, 0.999))
    assert g.size == 15
    assert np.all(np.diff(g) > 0)
    assert g[0] > lo and g[-1] < hi


def test_decomposition_of_brownian_motion_is_exact(no_jumps, brownian, basis):
    levels = [(b.X, b) for b in (_bundle(N, no_jumps, brownian, 500) for N in (8, 16))]
    verdict = decomposition_check(levels, basis)
    assert verdict.passed
    assert verdict.slope is None
    assert max(verdict.residuals) < 1e-20


def test_decomposition_residual_shrinks_like_dt(no_jumps, brownian, basis):
    levels = [(b.X ** 2, b) for b in (_bundle(N, no_jumps, brownian) for N in (8, 16, 32))]
    verdict = decomposition_check(levels, basis)
    assert verdict.passed
    assert verdict.slope == pytest.approx(1.0, abs=0.2)
    assert verdict.steps == [8, 16, 32]
    # drift of X^2 is t
    assert verdict.drift_mean[-1] == pytest.approx(1.0, abs=0.1)


def test_single_inexact_level_fails(no_jumps, brownian, basis):
    b = _bundle(8, no_jumps, brownian, 500)
    verdict = decomposition_check([(b.X ** 2, b)], basis)
    assert not verdict.passed


def test_decompose_parts(bundle, basis):
    d = decompose(bundle.X, bundle, basis)
    np.testing.assert_allclose(d.martingale, bundle.dB, atol=1e-10)
    np.testing.assert_allclose(d.drift, 0.0, atol=1e-10)


def test_decomposition_needs_levels(basis):
    with pytest.raises(ValueError):
        decomposition_check([], basis)

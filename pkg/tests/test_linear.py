import math

import numpy as np
import pytest

from app.exceptions import CoefficientError
from app.services.engine import TimeGrid, simulate_paths
from app.services.linear import LinearBSVIE, solve_linear
from app.services.terminal import TerminalProcess


@pytest.fixture
def deterministic_bundle(no_jumps, brownian):
    return simulate_paths(TimeGrid(T=1.0, N=100), no_jumps, brownian, n_paths=50, seed=0)


def test_constant_kernel_with_unit_terminal(deterministic_bundle, basis):
    prob = LinearBSVIE.from_expressions("1", "0", "0", TerminalProcess.deterministic("1"))
    sol = solve_linear(prob, deterministic_bundle, basis, tol=1e-8)
    nodes = deterministic_bundle.grid.nodes
    np.testing.assert_allclose(sol.mean, np.exp(1.0 - nodes), atol=1e-3)
    # a deterministic payoff has no sampling error
    np.testing.assert_allclose(sol.stderr, 0.0, atol=1e-12)
    assert sol.table is not None and sol.table.n_max >= 10


def test_zero_kernel_skips_resolvent(bundle, basis):
    prob = LinearBSVIE.from_expressions("0", "0", "0", TerminalProcess.deterministic("2 - t"))
    sol = solve_linear(prob, bundle, basis)
    assert sol.table is None
    np.testing.assert_allclose(sol.mean, 2.0 - bundle.grid.nodes, atol=1e-12)


def test_sign_flips_the_solution(bundle, basis):
    psi = TerminalProcess.markov("x")
    up = solve_linear(LinearBSVIE.from_expressions("0.5", "0", "0", psi, sign=1), bundle, basis)
    down = solve_linear(LinearBSVIE.from_expressions("0.5", "0", "0", psi, sign=-1), bundle, basis)
    np.testing.assert_allclose(up.values, -down.values, atol=1e-10)


def test_measure_change_and_kernel(grid, point_jumps, brownian, basis):
    """Y(0) = E_Q[X(T)] exp(alpha T) with E_Q[X(T)] = beta T."""
    b = simulate_paths(grid, point_jumps, brownian, n_paths=20000, seed=8)
    prob = LinearBSVIE.from_expressions("0.5", "0.3", "0.2", TerminalProcess.markov("x"))
    sol = solve_linear(prob, b, basis, tol=1e-10)
    exact = 0.3 * math.exp(0.5)
    assert abs(sol.mean[0] - exact) < 4 * sol.stderr[0] + 0.01


def test_estimated_denominator_mode(grid, point_jumps, brownian, basis):
    b = simulate_paths(grid, point_jumps, brownian, n_paths=20000, seed=8)
    prob = LinearBSVIE.from_expressions("0", "0.3", "0", TerminalProcess.markov("x"))
    sol = solve_linear(prob, b, basis, mode="estimated")
    assert abs(sol.mean[0] - 0.3) < 4 * sol.stderr[0] + 0.01
    assert sol.estimates[0].denominator is not None


def test_terminal_node_is_the_payoff(bundle, basis):
    prob = LinearBSVIE.from_expressions("0", "0.2", "0", TerminalProcess.markov("x ^ 2"))
    sol = solve_linear(prob, bundle, basis)
    np.testing.assert_allclose(sol.values[-1], bundle.X[-1] ** 2, rtol=1e-14)
    assert sol.estimates[-1] is None


def test_alpha_bound_is_enforced(bundle, basis):
    prob = LinearBSVIE.from_expressions("2", "0", "0", TerminalProcess.deterministic("1"), alpha_bound=1.0)
    with pytest.raises(CoefficientError):
        solve_linear(prob, bundle, basis)


def test_invalid_sign():
    with pytest.raises(ValueError):
        LinearBSVIE.from_expressions("0", "0", "0", TerminalProcess.deterministic("1"), sign=0)


def test_jump_free_bundle_accepts_theta(bundle, basis):
    assert not bundle.jump.active
    prob = LinearBSVIE.from_expressions("0", "0", "0.5", TerminalProcess.deterministic("1"))
    sol = solve_linear(prob, bundle, basis)
    np.testing.assert_allclose(sol.mean, 1.0, atol=1e-12)

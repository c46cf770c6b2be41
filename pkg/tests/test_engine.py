import numpy as np
import pytest

from app.exceptions import CoefficientError, EvaluationError
from app.services.engine import (
    DiffusionModel,
    JumpModel,
    TimeGrid,
    brownian_sum,
    jump_integral,
    simulate_paths,
)


def test_grid_nodes_and_triangle():
    g = TimeGrid(T=2.0, N=4)
    np.testing.assert_allclose(g.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert g.dt == 0.5
    assert len(g.triangle()) == 15
    assert all(i <= j for i, j in g.triangle())


@pytest.mark.parametrize("T, N", [(0.0, 4), (-1.0, 4), (1.0, 0)])
def test_grid_rejects_bad_input(T, N):
    with pytest.raises(ValueError):
        TimeGrid(T=T, N=N)


def test_jump_model_validation():
    with pytest.raises(CoefficientError):
        JumpModel(intensity=-1.0)
    with pytest.raises(CoefficientError):
        JumpModel(intensity=1.0, mark_dist="cauchy")
    with pytest.raises(CoefficientError):
        JumpModel(intensity=1.0, mark_dist="point", params={"value": 0.0})
    with pytest.raises(CoefficientError):
        JumpModel(intensity=1.0, mark_dist="normal", params={"mean": 0.0, "std": 0.0})


def test_reproducible_for_fixed_seed(grid, point_jumps, brownian):
    a = simulate_paths(grid, point_jumps, brownian, 300, seed=3)
    b = simulate_paths(grid, point_jumps, brownian, 300, seed=3)
    np.testing.assert_array_equal(a.dB, b.dB)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.jump_time, b.jump_time)
    np.testing.assert_array_equal(a.jump_mark, b.jump_mark)


def test_different_seeds_differ(grid, no_jumps, brownian):
    a = simulate_paths(grid, no_jumps, brownian, 100, seed=1)
    b = simulate_paths(grid, no_jumps, brownian, 100, seed=2)
    assert not np.array_equal(a.dB, b.dB)


def test_smaller_bundle_is_a_prefix(grid, point_jumps, brownian):
    small = simulate_paths(grid, point_jumps, brownian, 50, seed=9)
    large = simulate_paths(grid, point_jumps, brownian, 100, seed=9)
    np.testing.assert_array_equal(small.dB, large.dB[:, :50])
    np.testing.assert_array_equal(small.X, large.X[:, :50])
    np.testing.assert_array_equal(small.jump_counts, large.jump_counts[:, :50])
    keep = large.jump_path < 50
    np.testing.assert_array_equal(small.jump_time, large.jump_time[keep])


def test_arrays_are_read_only(bundle):
    with pytest.raises(ValueError):
        bundle.X[0, 0] = 1.0
    with pytest.raises(ValueError):
        bundle.dB[0, 0] = 1.0


def test_shapes(bundle, grid):
    assert bundle.X.shape == (grid.N + 1, 2000)
    assert bundle.dB.shape == (grid.N, 2000)
    assert bundle.B.shape == (grid.N + 1, 2000)
    np.testing.assert_array_equal(bundle.B[0], 0.0)


def test_euler_scheme_is_exact_for_brownian_motion(bundle):
    np.testing.assert_allclose(bundle.X, bundle.B, atol=1e-12)


def test_brownian_increment_moments(grid, no_jumps, brownian):
    b = simulate_paths(grid, no_jumps, brownian, 20000, seed=1)
    terminal = b.B[-1]
    assert abs(terminal.mean()) < 4 * np.sqrt(1.0 / 20000)
    assert terminal.var() == pytest.approx(1.0, rel=0.05)


def test_jump_times_inside_their_step(jump_bundle):
    dt = jump_bundle.grid.dt
    lower = jump_bundle.jump_step * dt
    assert np.all(jump_bundle.jump_time > lower - 1e-12)
    assert np.all(jump_bundle.jump_time <= lower + dt + 1e-12)
    np.testing.assert_array_equal(
        np.bincount(jump_bundle.jump_step * jump_bundle.n_paths + jump_bundle.jump_path,
                    minlength=jump_bundle.jump_counts.size).reshape(jump_bundle.jump_counts.shape),
        jump_bundle.jump_counts,
    )


def test_jump_count_has_poisson_mean(grid, brownian):
    jumps = JumpModel(intensity=2.0, mark_dist="point", params={"value": 1.0})
    b = simulate_paths(grid, jumps, brownian, 5000, seed=4)
    total = b.jump_counts.sum(axis=0)
    assert total.mean() == pytest.approx(2.0, abs=4 * np.sqrt(2.0 / 5000))


def test_compensated_integral_is_centred(grid, brownian):
    jumps = JumpModel(intensity=3.0, mark_dist="normal", params={"mean": 0.5, "std": 0.3})
    b = simulate_paths(grid, jumps, brownian, 8000, seed=12)
    values = jump_integral(b, lambda z: z, 0, grid.N)
    assert abs(values.mean()) < 4 * values.std() / np.sqrt(values.size)


def test_brownian_sum_matches_path(bundle):
    np.testing.assert_allclose(brownian_sum(bundle, 2, 6), bundle.B[6] - bundle.B[2], atol=1e-12)


def test_point_mass_quadrature_is_exact():
    jumps = JumpModel(intensity=1.5, mark_dist="point", params={"value": 2.0})
    assert jumps.nu_integral(lambda z: z ** 2) == pytest.approx(6.0)


@pytest.mark.parametrize(
    "kind, params, first, second",
    [
        ("normal", {"mean": 0.5, "std": 0.3}, 0.5, 0.5 ** 2 + 0.3 ** 2),
        ("lognormal", {"mean": 0.0, "std": 0.25}, np.exp(0.25 ** 2 / 2), np.exp(2 * 0.25 ** 2)),
    ],
)
def test_quadrature_reproduces_mark_moments(kind, params, first, second):
    jumps = JumpModel(intensity=2.0, mark_dist=kind, params=params)
    assert jumps.nu_integral(lambda z: np.ones_like(z)) == pytest.approx(2.0, rel=1e-10)
    assert jumps.nu_integral(lambda z: z) == pytest.approx(2.0 * first, rel=1e-8)
    assert jumps.nu_integral(lambda z: z ** 2) == pytest.approx(2.0 * second, rel=1e-8)


def test_gram_matrix_is_symmetric():
    jumps = JumpModel(intensity=1.0, mark_dist="normal", params={"mean": 0.0, "std": 1.0})
    G = jumps.gram([lambda z: z, lambda z: np.ones_like(z)])
    np.testing.assert_allclose(G, G.T)
    assert G[0, 0] == pytest.approx(1.0, rel=1e-8)
    assert G[1, 1] == pytest.approx(1.0, rel=1e-8)
    assert abs(G[0, 1]) < 1e-10


def test_non_finite_drift_is_reported(grid, no_jumps):
    diff = DiffusionModel.from_expressions(1.0, "1 / (x - 1)", "0")
    with pytest.raises(EvaluationError):
        simulate_paths(grid, no_jumps, diff, 10, seed=0)


def test_euler_overflow_is_reported(no_jumps):
    diff = DiffusionModel.from_expressions(1.0, "x ^ 2 * 1e100", "0")
    with pytest.raises(EvaluationError) as info:
        simulate_paths(TimeGrid(T=1.0, N=50), no_jumps, diff, 4, seed=0)
    assert info.value.node is not None

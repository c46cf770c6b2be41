import numpy as np
import pytest

from app.config import settings
from app.exceptions import CapacityError
from app.services.engine import JumpModel, TimeGrid
from app.services.oracle import build_tree, nested_mc_oracle
from app.services.solver import Driver
from app.services.terminal import TerminalProcess


def test_tree_shares_prefixes(point_jumps, brownian):
    tree = build_tree(TimeGrid(T=1.0, N=3), point_jumps, brownian, branching=3, seed=4)
    assert tree.n_paths == 27
    for j in range(4):
        span = 3 ** (3 - j)
        for node in range(27 // span):
            block = tree.X[j, node * span:(node + 1) * span]
            assert np.all(block == block[0])
    np.testing.assert_allclose(tree.X[1:] - tree.X[:-1], tree.dB, atol=1e-14)


def test_tree_jumps_are_shared_by_descendants(brownian):
    jumps = JumpModel(intensity=5.0, mark_dist="point", params={"value": 1.0})
    tree = build_tree(TimeGrid(T=1.0, N=2), jumps, brownian, branching=4, seed=1)
    # level-0 edges feed 4 leaves each
    first = tree.jump_counts[0].reshape(-1, 4)
    assert np.all(first == first[:, :1])


def test_linear_y_driver_matches_discrete_solution(no_jumps, brownian):
    grid = TimeGrid(T=1.0, N=2)
    est = nested_mc_oracle(Driver.from_expressions("0.5 * y"), TerminalProcess.deterministic("1"), 1,
                           grid, no_jumps, brownian, branching=3, seed=0, replications=4)
    h = 0.5 * grid.dt
    assert est.value == pytest.approx((1.0 - h) ** -2, abs=1e-10)
    assert est.stderr < 1e-12
    assert est.leaves == 9


def test_zero_driver_is_unbiased(no_jumps, brownian):
    est = nested_mc_oracle(Driver.zero(), TerminalProcess.markov("x"), 1, TimeGrid(T=1.0, N=2),
                           no_jumps, brownian, branching=4, seed=3, replications=200)
    assert est.stderr > 0
    assert abs(est.value) < 4 * est.stderr


def test_z_driver_uses_unbiased_covariances(no_jumps, brownian):
    """Y(0) = E[X(T)] + 0.3 T with Z = 1."""
    est = nested_mc_oracle(Driver.from_expressions("0.3 * z"), TerminalProcess.markov("x"), 1,
                           TimeGrid(T=1.0, N=2), no_jumps, brownian, branching=5, seed=7, replications=300)
    assert abs(est.value - 0.3) < 4 * est.stderr


def test_sign_flips_value(no_jumps, brownian):
    args = (TimeGrid(T=1.0, N=2), no_jumps, brownian)
    up = nested_mc_oracle(Driver.zero(), TerminalProcess.markov("x"), 1, *args, branching=3, seed=2, replications=5)
    down = nested_mc_oracle(Driver.zero(), TerminalProcess.markov("x"), -1, *args, branching=3, seed=2,
                            replications=5)
    assert up.value == pytest.approx(-down.value, abs=1e-12)


def test_grid_size_is_capped(no_jumps, brownian):
    with pytest.raises(CapacityError):
        nested_mc_oracle(Driver.zero(), TerminalProcess.markov("x"), 1, TimeGrid(T=1.0, N=5),
                         no_jumps, brownian, branching=2, seed=0)


def test_leaf_budget(monkeypatch, no_jumps, brownian):
    monkeypatch.setattr(settings, "oracle_max_leaves", 100)
    with pytest.raises(CapacityError) as info:
        nested_mc_oracle(Driver.zero(), TerminalProcess.markov("x"), 1, TimeGrid(T=1.0, N=3),
                         no_jumps, brownian, branching=4, seed=0, replications=10)
    assert info.value.required == 640


@pytest.mark.parametrize("kwargs", [{"branching": 1}, {"replications": 1}])
def test_argument_validation(kwargs, no_jumps, brownian):
    params = {"branching": 3, "replications": 5}
    params.update(kwargs)
    with pytest.raises(ValueError):
        nested_mc_oracle(Driver.zero(), TerminalProcess.markov("x"), 1, TimeGrid(T=1.0, N=2),
                         no_jumps, brownian, seed=0, **params)

"""Brute-force Y(0) by nested simulation on a branching tree.

Every node of level j has ``branching`` children, each with its own
Brownian increment and jump draws. Conditional expectations, Z and the
jump functionals are sample means and unbiased sample covariances over the
children instead of regressions. The diagonal value solves the scalar fixed
point Y = E[V] + g(t_j, t_j, Y, Z, u) dt at each node.

Cost grows as branching ** N, so the grid must be tiny.
"""

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from app.config import settings
from app.exceptions import CapacityError, DivergenceError
from app.services.engine import DiffusionModel, JumpModel, PathBundle, TimeGrid
from app.services.regression import mean_stderr
from app.services.solver import Driver, evaluate_driver
from app.services.terminal import TerminalProcess

logger = logging.getLogger("volterrisk")

MAX_ORACLE_STEPS = 4
FIXED_POINT_TOL = 1e-13
FIXED_POINT_ITER = 200


@dataclass(frozen=True)
class OracleEstimate:
    value: float
    stderr: float
    replications: int
    branching: int
    leaves: int


def _tree_edges(rng: np.random.Generator, grid: TimeGrid, jump: JumpModel, n_edges: int):
    dB = rng.normal(0.0, np.sqrt(grid.dt), n_edges)
    counts = rng.poisson(jump.intensity * grid.dt, n_edges) if jump.active else np.zeros(n_edges, dtype=np.int64)
    total = int(counts.sum())
    owner = np.repeat(np.arange(n_edges), counts)
    offsets = rng.uniform(0.0, 1.0, total)
    marks = jump.sample_marks(rng, total)
    return dB, counts, owner, offsets, marks


def build_tree(
    grid: TimeGrid, jump: JumpModel, diff: DiffusionModel, branching: int, seed: int, replication: int = 0
) -> PathBundle:
    """Simulate one tree and expose its root-to-leaf paths as a PathBundle.

    Leaf ``p`` descends through node ``p // branching ** (N - j)`` at level j,
    so shared prefixes are identical across sibling leaves.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(replication,)))
    N = grid.N
    b = branching
    leaves = b ** N
    nodes = grid.nodes

    X_levels = [np.array([diff.x0], dtype=float)]
    dB_levels: List[np.ndarray] = []
    jump_parts = {"step": [], "path": [], "time": [], "mark": []}
    for j in range(N):
        parent = np.repeat(X_levels[-1], b)
        n_edges = parent.size
        dB, _, owner, offsets, marks = _tree_edges(rng, grid, jump, n_edges)
        drift = np.broadcast_to(np.asarray(diff.drift(nodes[j], parent), dtype=float), parent.shape)
        vol = np.broadcast_to(np.asarray(diff.diffusion(nodes[j], parent), dtype=float), parent.shape)
        X_levels.append(parent + drift * grid.dt + vol * dB)
        dB_levels.append(dB)
        if owner.size:
            span = b ** (N - j - 1)
            leaf_ids = (owner * span)[:, None] + np.arange(span)[None, :]
            jump_parts["step"].append(np.full(leaf_ids.size, j))
            jump_parts["path"].append(leaf_ids.ravel())
            jump_parts["time"].append(np.repeat((j + offsets) * grid.dt, span))
            jump_parts["mark"].append(np.repeat(marks, span))

    X = np.array([np.repeat(level, b ** (N - j)) for j, level in enumerate(X_levels)])
    dB_paths = np.array([np.repeat(level, b ** (N - j - 1)) for j, level in enumerate(dB_levels)])
    counts = np.zeros((N, leaves), dtype=np.int64)

    def cat(key, dtype):
        parts = jump_parts[key]
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    step, path, time, mark = cat("step", np.int64), cat("path", np.int64), cat("time", float), cat("mark", float)
    if step.size:
        np.add.at(counts, (step, path), 1)
        order = np.lexsort((time, step, path))
        step, path, time, mark = step[order], path[order], time[order], mark[order]
    bundle = PathBundle(
        grid=grid, jump=jump, diffusion=diff, seed=seed, dB=dB_paths, X=X, jump_counts=counts,
        jump_step=step, jump_path=path, jump_time=time, jump_mark=mark,
    )
    return bundle


def _level_view(leaf_values: np.ndarray, b: int, N: int, j: int) -> np.ndarray:
    """One representative per level-j node of a per-leaf array."""
    return leaf_values[:: b ** (N - j)]


def _children(values: np.ndarray, b: int) -> np.ndarray:
    return values.reshape(-1, b)


def _unbiased_cov(v: np.ndarray, w: np.ndarray) -> np.ndarray:
    b = v.shape[1]
    return np.sum((v - v.mean(axis=1, keepdims=True)) * (w - w.mean(axis=1, keepdims=True)), axis=1) / (b - 1)


def _tree_value(driver: Driver, terminal: np.ndarray, bundle: PathBundle, b: int) -> float:
    grid = bundle.grid
    N = grid.N
    dt = grid.dt
    nodes = grid.nodes

    # per-edge increments at level j+1 indexed like the level-(j+1) nodes
    dB_edges = [_level_view(bundle.dB[j], b, N, j + 1) for j in range(N)]
    dN_edges = []
    for w in driver.weights:
        inc = bundle.compensated_increments(w)
        dN_edges.append([_level_view(inc[j], b, N, j + 1) for j in range(N)])
    X_nodes = [_level_view(bundle.X[j], b, N, j) for j in range(N + 1)]

    # rows[i] holds V^i at the current level, one value per node
    rows = {i: _level_view(terminal[i], b, N, N) for i in range(N + 1)}
    Y = {N: rows[N]}
    for j in range(N - 1, -1, -1):
        x_j = X_nodes[j]
        db = _children(dB_edges[j], b)
        dn = [_children(e[j], b) for e in dN_edges]

        def step(v_next: np.ndarray, i: int):
            child = _children(v_next, b)
            mean = child.mean(axis=1)
            z = _unbiased_cov(child, db) / dt
            u = [_unbiased_cov(child, d) / dt for d in dn]
            xi = np.repeat(X_nodes[i], b ** (j - i))
            return mean, z, u, xi

        # diagonal: scalar fixed point per node
        mean, z, u, _ = step(rows[j], j)
        y = mean.copy()
        for _ in range(FIXED_POINT_ITER if driver.depends_on_y else 1):
            g = evaluate_driver(driver, j, j, nodes, y, z, u, x_j, x_j)
            y_next = mean + g * dt
            done = np.max(np.abs(y_next - y)) < FIXED_POINT_TOL
            y = y_next
            if done:
                break
        else:
            if driver.depends_on_y:
                raise DivergenceError(f"Diagonal fixed point did not converge at level {j}", [])
        Y[j] = y

        new_rows = {j: y}
        for i in range(j):
            mean, z, u, xi = step(rows[i], i)
            g = evaluate_driver(driver, i, j, nodes, y, z, u, x_j, xi)
            new_rows[i] = mean + g * dt
        rows = new_rows
    return float(Y[0][0])


def nested_mc_oracle(
    driver: Driver,
    psi: TerminalProcess,
    sign: int,
    grid: TimeGrid,
    jump: JumpModel,
    diff: DiffusionModel,
    branching: int,
    seed: int,
    replications: int = 20,
) -> OracleEstimate:
    """Mean of ``replications`` independent tree estimates of Y(0)."""
    if grid.N > MAX_ORACLE_STEPS:
        raise CapacityError(f"Oracle grids need N <= {MAX_ORACLE_STEPS}, got {grid.N}", required=grid.N)
    if branching < 2:
        raise ValueError("branching must be >= 2")
    if replications < 2:
        raise ValueError("replications must be >= 2")
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")

    leaves = branching ** grid.N
    required = leaves * replications
    if required > settings.oracle_max_leaves:
        raise CapacityError(
            f"Oracle needs {required} leaves > budget {settings.oracle_max_leaves}", required=required
        )

    estimates = np.empty(replications)
    for r in range(replications):
        bundle = build_tree(grid, jump, diff, branching, seed, replication=r)
        terminal = sign * psi.values(bundle)
        estimates[r] = _tree_value(driver, terminal, bundle, branching)
    value = float(estimates.mean())
    stderr = mean_stderr(estimates)
    logger.info(f"Nested oracle: Y(0) = {value:.6g} +/- {stderr:.2g} ({replications} trees, b={branching})")
    return OracleEstimate(value=value, stderr=stderr, replications=replications, branching=branching, leaves=leaves)

"""Path simulation: Brownian increments, marked Poisson jumps, Euler states.

Seeding rule: path ``p`` draws from its own generator built from
``SeedSequence(seed, spawn_key=(p,))``. A path's draws depend only on
(seed, p, grid, jump law), so adding paths never reshuffles existing ones.
Within a path the draw order is fixed: N normals, N Poisson counts, then
for every jump its uniform time inside the step and its mark.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import settings
from app.exceptions import CoefficientError, DomainError, EvaluationError
from app.services.dsl import BoundExpression

logger = logging.getLogger("volterrisk")

ArrayFn = Callable[..., Union[float, np.ndarray]]
MARK_KINDS = ("normal", "lognormal", "point")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"TimeGrid needs N >= 1, got {self.N}")
        if not self.T > 0:
            raise ValueError(f"TimeGrid needs T > 0, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt

    def triangle(self) -> List[Tuple[int, int]]:
        """Index pairs (i, j) with i <= j of the discrete triangle."""
        return [(i, j) for i in range(self.N + 1) for j in range(i, self.N + 1)]


@dataclass(frozen=True)
class JumpModel:
    """Finite-activity jump law: nu = intensity * mu.

    ``params``: normal/lognormal take ``mean`` and ``std`` (of the mark, or
    of its logarithm); point takes ``value``.
    """

    intensity: float = 0.0
    mark_dist: str = "point"
    params: Dict[str, float] = field(default_factory=lambda: {"value": 1.0})

    def __post_init__(self):
        if self.intensity < 0:
            raise CoefficientError(f"Jump intensity must be >= 0, got {self.intensity}")
        if self.mark_dist not in MARK_KINDS:
            raise CoefficientError(f"Unknown mark distribution '{self.mark_dist}'")
        if self.mark_dist == "point" and float(self.params.get("value", 1.0)) == 0.0:
            raise CoefficientError("Point-mass marks must be non-zero (nu has no mass at 0)")
        if self.mark_dist in ("normal", "lognormal") and float(self.params.get("std", 1.0)) <= 0:
            raise CoefficientError("Mark distribution needs std > 0")

    def __hash__(self):
        return hash((self.intensity, self.mark_dist, tuple(sorted(self.params.items()))))

    @property
    def active(self) -> bool:
        return self.intensity > 0

    def sample_marks(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.mark_dist == "point":
            return np.full(size, float(self.params.get("value", 1.0)))
        mean = float(self.params.get("mean", 0.0))
        std = float(self.params.get("std", 1.0))
        draws = rng.normal(mean, std, size)
        return np.exp(draws) if self.mark_dist == "lognormal" else draws

    def quadrature(self) -> Tuple[np.ndarray, np.ndarray]:
        """Nodes and weights with sum(w(nodes) * weights) = integral of w dnu."""
        if self.mark_dist == "point":
            return np.array([float(self.params.get("value", 1.0))]), np.array([self.intensity])
        x, w = np.polynomial.hermite_e.hermegauss(settings.quadrature_points)
        w = w / np.sqrt(2.0 * np.pi) * self.intensity
        mean = float(self.params.get("mean", 0.0))
        std = float(self.params.get("std", 1.0))
        nodes = mean + std * x
        return (np.exp(nodes) if self.mark_dist == "lognormal" else nodes), w

    def nu_integral(self, weight: ArrayFn) -> Union[float, np.ndarray]:
        """Integral of ``weight(zeta)`` against nu; weight may broadcast over
        leading axes (the mark axis is the last one)."""
        nodes, w = self.quadrature()
        values = np.asarray(weight(nodes), dtype=float)
        values = np.broadcast_to(values, np.broadcast_shapes(values.shape, nodes.shape))
        return values @ w

    def gram(self, weights: Sequence[ArrayFn]) -> np.ndarray:
        """G[l, m] = integral of w_l * w_m dnu."""
        m = len(weights)
        nodes, w = self.quadrature()
        values = np.array([np.broadcast_to(np.asarray(f(nodes), dtype=float), nodes.shape) for f in weights])
        return (values * w) @ values.T if m else np.zeros((0, 0))

    def check_square_integrable(self, weight: ArrayFn, label: str = "weight") -> float:
        second = float(self.nu_integral(lambda z: np.asarray(weight(z), dtype=float) ** 2))
        if not np.isfinite(second):
            raise CoefficientError(f"{label} is not square-integrable against nu")
        return second


@dataclass(frozen=True)
class DiffusionModel:
    x0: float
    drift: ArrayFn
    diffusion: ArrayFn

    @classmethod
    def from_expressions(cls, x0: float, b_expr: str, sigma_expr: str) -> "DiffusionModel":
        return cls(
            x0=float(x0),
            drift=BoundExpression.from_source(b_expr, ("s", "x")),
            diffusion=BoundExpression.from_source(sigma_expr, ("s", "x")),
        )


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Immutable simulated paths on a grid.

    dB and jump_counts have shape (N, n_paths); X has shape (N + 1, n_paths).
    Jumps are stored flat, ordered by (path, step, time).
    """

    grid: TimeGrid
    jump: JumpModel
    diffusion: DiffusionModel
    seed: int
    dB: np.ndarray
    X: np.ndarray
    jump_counts: np.ndarray
    jump_step: np.ndarray
    jump_path: np.ndarray
    jump_time: np.ndarray
    jump_mark: np.ndarray

    @property
    def n_paths(self) -> int:
        return self.X.shape[1]

    @property
    def B(self) -> np.ndarray:
        """Brownian path at the nodes, shape (N + 1, n_paths)."""
        return np.vstack([np.zeros((1, self.n_paths)), np.cumsum(self.dB, axis=0)])

    def jumps(self, i: int, p: int) -> List[Tuple[float, float]]:
        """(time, mark) of the jumps of path p in (t_i, t_{i+1}]."""
        sel = (self.jump_step == i) & (self.jump_path == p)
        return list(zip(self.jump_time[sel].tolist(), self.jump_mark[sel].tolist()))

    def jump_sums(self, weight: ArrayFn) -> np.ndarray:
        """Per-step sums of weight(mark), shape (N, n_paths)."""
        out = np.zeros((self.grid.N, self.n_paths))
        if self.jump_mark.size:
            values = np.broadcast_to(np.asarray(weight(self.jump_mark), dtype=float), self.jump_mark.shape)
            if not np.all(np.isfinite(values)):
                bad = int(np.argmax(~np.isfinite(values)))
                raise EvaluationError(
                    "Jump weight is not evaluable at a sampled mark",
                    node=int(self.jump_step[bad]), path=int(self.jump_path[bad]),
                )
            np.add.at(out, (self.jump_step, self.jump_path), values)
        return out

    def compensated_increments(self, weight: ArrayFn) -> np.ndarray:
        """Per-step increments of the integral of weight against the
        compensated measure, shape (N, n_paths)."""
        try:
            sums = self.jump_sums(weight)
        except DomainError as exc:
            raise EvaluationError(f"Jump weight is not evaluable at a sampled mark: {exc}") from exc
        return sums - self.grid.dt * float(self.jump.nu_integral(weight))


def _draw_path(seed: int, p: int, grid: TimeGrid, jump: JumpModel):
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(p,)))
    dt = grid.dt
    dB = rng.normal(0.0, np.sqrt(dt), grid.N)
    if jump.active:
        counts = rng.poisson(jump.intensity * dt, grid.N)
    else:
        counts = np.zeros(grid.N, dtype=np.int64)
    total = int(counts.sum())
    steps = np.repeat(np.arange(grid.N), counts)
    offsets = rng.uniform(0.0, 1.0, total)
    times = (steps + offsets) * dt
    marks = jump.sample_marks(rng, total)
    if total:
        order = np.lexsort((times, steps))
        steps, times, marks = steps[order], times[order], marks[order]
    return dB, counts, steps, times, marks


def simulate_paths(
    grid: TimeGrid,
    jump: JumpModel,
    diff: DiffusionModel,
    n_paths: int,
    seed: int,
) -> PathBundle:
    """Simulate ``n_paths`` independent paths; deterministic in all inputs.

    X follows the explicit Euler scheme X_{i+1} = X_i + b(t_i, X_i) dt +
    sigma(t_i, X_i) dB_i. Jumps do not feed X.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")

    dB = np.empty((grid.N, n_paths))
    counts = np.empty((grid.N, n_paths), dtype=np.int64)
    steps: List[np.ndarray] = []
    paths: List[np.ndarray] = []
    times: List[np.ndarray] = []
    marks: List[np.ndarray] = []
    for p in range(n_paths):
        db_p, c_p, s_p, t_p, m_p = _draw_path(seed, p, grid, jump)
        dB[:, p] = db_p
        counts[:, p] = c_p
        if s_p.size:
            steps.append(s_p)
            paths.append(np.full(s_p.size, p))
            times.append(t_p)
            marks.append(m_p)

    X = np.empty((grid.N + 1, n_paths))
    X[0] = diff.x0
    nodes = grid.nodes
    for i in range(grid.N):
        try:
            b = np.broadcast_to(np.asarray(diff.drift(nodes[i], X[i]), dtype=float), (n_paths,))
            sig = np.broadcast_to(np.asarray(diff.diffusion(nodes[i], X[i]), dtype=float), (n_paths,))
        except DomainError as exc:
            raise EvaluationError(f"Diffusion coefficients failed: {exc}", node=i) from exc
        bad = ~(np.isfinite(b) & np.isfinite(sig))
        if bad.any():
            raise EvaluationError("Non-finite drift/diffusion value", node=i, path=int(np.argmax(bad)))
        X[i + 1] = X[i] + b * grid.dt + sig * dB[i]
        if not np.all(np.isfinite(X[i + 1])):
            raise EvaluationError("Euler state overflowed", node=i + 1, path=int(np.argmax(~np.isfinite(X[i + 1]))))

    def _cat(parts, dtype):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    bundle = PathBundle(
        grid=grid, jump=jump, diffusion=diff, seed=seed, dB=dB, X=X, jump_counts=counts,
        jump_step=_cat(steps, np.int64), jump_path=_cat(paths, np.int64),
        jump_time=_cat(times, float), jump_mark=_cat(marks, float),
    )
    for arr in (bundle.dB, bundle.X, bundle.jump_counts, bundle.jump_step,
                bundle.jump_path, bundle.jump_time, bundle.jump_mark):
        arr.setflags(write=False)
    logger.debug(f"Simulated {n_paths} paths on N={grid.N} (seed {seed}, {bundle.jump_mark.size} jumps)")
    return bundle


def jump_integral(bundle: PathBundle, weight: ArrayFn, i_from: int, i_to: int) -> np.ndarray:
    """Per-path integral of weight against the compensated measure over
    (t_{i_from}, t_{i_to}]."""
    if not 0 <= i_from <= i_to <= bundle.grid.N:
        raise ValueError(f"Invalid step range [{i_from}, {i_to}]")
    bundle.jump.check_square_integrable(weight)
    increments = bundle.compensated_increments(weight)
    return increments[i_from:i_to].sum(axis=0)


def brownian_sum(bundle: PathBundle, i_from: int, i_to: int) -> np.ndarray:
    return bundle.dB[i_from:i_to].sum(axis=0)

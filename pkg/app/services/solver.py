"""General BSVIE-with-jumps solver: backward regression sweeps plus Picard.

Discretized equation on the triangle i <= j (row time t_i, column time t_j):

    Y(t_i) = sign psi(t_i) + sum_{j >= i} g(t_i, t_j, Y(t_j), Z(i, j), u(i, j)) dt
             - sum_{j >= i} Z(i, j) dB_j - sum_{j >= i} sum_m kappa_m(i, j) dN_m,j

where dN_m,j is the compensated jump integral of the basis weight w_m over
step j, u_l(i, j) = int K(t_i, t_j, zeta) w_l(zeta) nu(dzeta) is what the
driver sees and kappa = G^{-1} u are the coefficients of K in the basis.

Each row is a BSDE-style sweep j = N-1 .. i that only reads the previous
Picard iterate of the diagonal, so rows are independent within an
iteration and may run on a worker pool.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import DivergenceError, DomainError, EvaluationError
from app.services.dsl import (
    BoundExpression,
    Expression,
    JUMP_FUNCTIONALS,
    LipschitzProbe,
    Num,
    evaluate,
    free_variables,
    lipschitz_probe,
    parse,
)
from app.services.engine import PathBundle, TimeGrid
from app.services.regression import LinearFit, RegressionBasis, fit, mean_stderr
from app.services.terminal import TerminalProcess
from app.utils.parallel import ordered_map

logger = logging.getLogger("volterrisk")

DRIVER_BASE_VARIABLES = ("t", "s", "y", "z", "x", "xt")


@dataclass(frozen=True)
class Driver:
    """g(t, s, y, z, u1..um, x, xt) with jump functionals u_l against weights w_l."""

    expression: Expression
    weights: Tuple[Callable, ...] = ()
    lipschitz_C: float = 1.0
    source: str = ""
    weight_sources: Tuple[str, ...] = ()

    @classmethod
    def from_expressions(
        cls,
        g_expr: str,
        jump_weights: Sequence[str] = (),
        lipschitz_C: float = 1.0,
    ) -> "Driver":
        if len(jump_weights) > len(JUMP_FUNCTIONALS):
            raise ValueError(f"At most {len(JUMP_FUNCTIONALS)} jump weights are supported")
        allowed = DRIVER_BASE_VARIABLES + JUMP_FUNCTIONALS[: len(jump_weights)]
        expression = parse(str(g_expr), allowed=allowed)
        weights = tuple(BoundExpression.from_source(w, ("zeta",)) for w in jump_weights)
        return cls(
            expression=expression, weights=weights, lipschitz_C=float(lipschitz_C),
            source=str(g_expr), weight_sources=tuple(str(w) for w in jump_weights),
        )

    @classmethod
    def zero(cls) -> "Driver":
        return cls(expression=Num(0.0), source="0")

    @property
    def n_jump(self) -> int:
        return len(self.weights)

    @property
    def free(self):
        return free_variables(self.expression)

    @property
    def depends_on_y(self) -> bool:
        return "y" in self.free

    @property
    def uses_xt(self) -> bool:
        return "xt" in self.free

    @property
    def is_zero(self) -> bool:
        return isinstance(self.expression, Num) and self.expression.value == 0.0

    def __call__(self, t, s, y, z, u: Sequence, x, xt):
        env = {"t": t, "s": s, "y": y, "z": z, "x": x, "xt": xt}
        for name, value in zip(JUMP_FUNCTIONALS, u):
            env[name] = value
        return evaluate(self.expression, env)

    def at_origin(self, t, s, x, xt):
        return self(t, s, 0.0, 0.0, [0.0] * self.n_jump, x, xt)

    def probe(
        self,
        box: Optional[Mapping[str, Tuple[float, float]]] = None,
        samples: int = 200,
        seed: int = 0,
    ) -> LipschitzProbe:
        """Audit the declared Lipschitz constant on a default box."""
        default = {name: (-2.0, 2.0) for name in self.free if name in ("y", "z") + JUMP_FUNCTIONALS}
        default.update(dict(box or {}))
        return lipschitz_probe(self.expression, default, samples, self.lipschitz_C, seed=seed)


# ===== Surface =====

StateFn = Callable[[PathBundle, int, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class SolutionSurface:
    """Solution on the discrete triangle.

    ``Y`` holds the diagonal per path, shape (N + 1, n_paths). Z and the
    jump functionals are kept as regression fits per cell (i, j), j < N,
    evaluated at ``state(bundle, i, j)``; their path means are tabulated in
    ``z_mean`` and ``u_mean`` (NaN outside the triangle).
    """

    grid: TimeGrid
    sign: int
    Y: np.ndarray
    y_stderr: np.ndarray
    z_fits: Dict[Tuple[int, int], LinearFit]
    u_fits: Dict[Tuple[int, int], Tuple[LinearFit, ...]]
    z_mean: np.ndarray
    u_mean: np.ndarray
    gram: np.ndarray
    state: StateFn
    history: List[float] = field(default_factory=list)
    iterations: int = 1
    diagonal_fits: List[Optional[LinearFit]] = field(default_factory=list)

    @property
    def y_mean(self) -> np.ndarray:
        return self.Y.mean(axis=1)

    @property
    def k_mean(self) -> np.ndarray:
        """Path means of the K coefficients kappa = G^{-1} u."""
        if self.gram.size == 0:
            return np.zeros(self.u_mean.shape)
        return self.u_mean @ np.linalg.pinv(self.gram).T

    def z_values(self, bundle: PathBundle, i: int, j: int) -> np.ndarray:
        return self.z_fits[(i, j)].predict(self.state(bundle, i, j))

    def u_values(self, bundle: PathBundle, i: int, j: int) -> np.ndarray:
        """Jump functionals at cell (i, j), shape (m, n_paths)."""
        st = self.state(bundle, i, j)
        fits = self.u_fits.get((i, j), ())
        if not fits:
            return np.zeros((0, bundle.n_paths))
        return np.array([f.predict(st) for f in fits])

    def k_values(self, bundle: PathBundle, i: int, j: int) -> np.ndarray:
        u = self.u_values(bundle, i, j)
        if u.shape[0] == 0:
            return u
        return np.linalg.pinv(self.gram) @ u

    def norms(self, bundle: PathBundle) -> Dict[str, float]:
        """Estimates of the L2 norms of Y, Z and K on [0, T] and the triangle."""
        dt = self.grid.dt
        y2 = dt * float(np.sum(np.mean(self.Y[:-1] ** 2, axis=1)))
        z2 = 0.0
        k2 = 0.0
        for (i, j) in self.z_fits:
            z2 += float(np.mean(self.z_values(bundle, i, j) ** 2))
            if self.gram.size:
                kappa = self.k_values(bundle, i, j)
                k2 += float(np.mean(np.einsum("mp,mn,np->p", kappa, self.gram, kappa)))
        return {"Y": float(np.sqrt(y2)), "Z": float(np.sqrt(z2 * dt * dt)), "K": float(np.sqrt(k2 * dt * dt))}


# ===== Solver =====

def _row_state(
    bundle: PathBundle, terminal: TerminalProcess, with_xt: bool, i: int, j: int
) -> np.ndarray:
    cols = [bundle.X[j][:, None]]
    if with_xt and j != i:
        cols.append(bundle.X[i][:, None])
    extra = terminal.state_columns(bundle, j)
    if extra is not None:
        cols.append(extra)
    return np.hstack(cols)


@dataclass
class _RowResult:
    values: np.ndarray
    stderr: float
    z_fits: Dict[Tuple[int, int], LinearFit]
    u_fits: Dict[Tuple[int, int], Tuple[LinearFit, ...]]
    z_mean: Dict[int, float]
    u_mean: Dict[int, np.ndarray]
    diagonal_fit: Optional[LinearFit]


def evaluate_driver(driver: Driver, i: int, j: int, nodes: np.ndarray, y, z, u, x, xt) -> np.ndarray:
    try:
        value = driver(nodes[i], nodes[j], y, z, u, x, xt)
    except DomainError as exc:
        raise EvaluationError(f"Driver evaluation failed: {exc}", node=j) from exc
    value = np.broadcast_to(np.asarray(value, dtype=float), np.shape(x))
    if not np.all(np.isfinite(value)):
        raise EvaluationError("Driver returned a non-finite value", node=j, path=int(np.argmax(~np.isfinite(value))))
    return value


def sweep_row(
    i: int,
    driver: Driver,
    psi_row: np.ndarray,
    bundle: PathBundle,
    basis: RegressionBasis,
    y_prev: np.ndarray,
    state: StateFn,
    jump_increments: np.ndarray,
    keep_fits: bool = True,
) -> _RowResult:
    """Backward sweep of row i given the previous diagonal iterate."""
    grid = bundle.grid
    dt = grid.dt
    nodes = grid.nodes
    m = driver.n_jump

    value = np.array(psi_row, dtype=float)
    pathwise = np.array(psi_row, dtype=float)
    z_fits: Dict[Tuple[int, int], LinearFit] = {}
    u_fits: Dict[Tuple[int, int], Tuple[LinearFit, ...]] = {}
    z_mean: Dict[int, float] = {}
    u_mean: Dict[int, np.ndarray] = {}
    diagonal_fit = None

    if i == grid.N:
        return _RowResult(value, mean_stderr(pathwise), z_fits, u_fits, z_mean, u_mean, None)

    x_row = bundle.X[i]
    for j in range(grid.N - 1, i - 1, -1):
        st = state(bundle, i, j)
        cond = fit(st, value, basis)
        cond_values = cond.predict(st)
        centred = value - cond_values

        zf = fit(st, centred * bundle.dB[j] / dt, basis)
        z = zf.predict(st)
        ufs = tuple(fit(st, centred * jump_increments[l, j] / dt, basis) for l in range(m))
        u = [f.predict(st) for f in ufs]

        g = evaluate_driver(driver, i, j, nodes, y_prev[j], z, u, bundle.X[j], x_row)
        value = cond_values + g * dt
        pathwise = pathwise + g * dt

        if keep_fits:
            z_fits[(i, j)] = zf
            u_fits[(i, j)] = ufs
        z_mean[j] = float(z.mean())
        u_mean[j] = np.array([float(v.mean()) for v in u])
        if j == i:
            diagonal_fit = cond
    return _RowResult(value, mean_stderr(pathwise), z_fits, u_fits, z_mean, u_mean, diagonal_fit)


def solve(
    driver: Driver,
    psi: TerminalProcess,
    sign: int,
    bundle: PathBundle,
    basis: RegressionBasis,
    picard_tol: float = 1e-6,
    max_iter: int = 50,
    threads: Optional[int] = None,
) -> SolutionSurface:
    """Solve the discretized BSVIE on ``bundle``.

    Raises DivergenceError (with the iteration history) when the Picard
    iteration does not reach ``picard_tol`` within ``max_iter`` sweeps.
    """
    if sign not in (1, -1):
        raise ValueError(f"sign must be +1 or -1, got {sign}")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")

    grid = bundle.grid
    N, P = grid.N, bundle.n_paths
    terminal = sign * psi.values(bundle)
    jump_increments = np.array([bundle.compensated_increments(w) for w in driver.weights]).reshape(
        driver.n_jump, N, P
    )
    gram = bundle.jump.gram(driver.weights) if driver.n_jump else np.zeros((0, 0))
    with_xt = driver.uses_xt or psi.uses_xt

    def state(b: PathBundle, i: int, j: int) -> np.ndarray:
        return _row_state(b, psi, with_xt, i, j)

    y_prev = np.zeros((N + 1, P))
    history: List[float] = []
    rows: List[_RowResult] = []
    iterations = 0
    converged = False
    while iterations < max_iter:
        iterations += 1
        prev = y_prev
        rows = ordered_map(
            lambda i: sweep_row(i, driver, terminal[i], bundle, basis, prev, state, jump_increments),
            range(N + 1),
            threads,
        )
        y_new = np.array([r.values for r in rows])
        change = float(np.max(np.sqrt(np.mean((y_new - y_prev) ** 2, axis=1))))
        history.append(change)
        y_prev = y_new
        logger.info(f"Picard iteration {iterations}: max node L2 change {change:.3e}")
        if not driver.depends_on_y or change < picard_tol:
            converged = True
            break
    if not converged:
        raise DivergenceError(
            f"Picard iteration did not reach tol {picard_tol:g} in {max_iter} iterations "
            f"(last change {history[-1]:.3e})",
            history,
        )

    z_fits: Dict[Tuple[int, int], LinearFit] = {}
    u_fits: Dict[Tuple[int, int], Tuple[LinearFit, ...]] = {}
    z_mean = np.full((N + 1, N + 1), np.nan)
    u_mean = np.full((N + 1, N + 1, driver.n_jump), np.nan)
    for i, row in enumerate(rows):
        z_fits.update(row.z_fits)
        u_fits.update(row.u_fits)
        for j, v in row.z_mean.items():
            z_mean[i, j] = v
        for j, v in row.u_mean.items():
            u_mean[i, j] = v

    return SolutionSurface(
        grid=grid, sign=sign, Y=y_prev, y_stderr=np.array([r.stderr for r in rows]),
        z_fits=z_fits, u_fits=u_fits, z_mean=z_mean, u_mean=u_mean, gram=gram,
        state=state, history=history, iterations=iterations,
        diagonal_fits=[r.diagonal_fit for r in rows],
    )


def residual(
    surface: SolutionSurface,
    driver: Driver,
    psi: TerminalProcess,
    bundle: PathBundle,
) -> np.ndarray:
    """Mean-square residual of the discretized equation per row, shape (N + 1,)."""
    grid = bundle.grid
    dt = grid.dt
    nodes = grid.nodes
    N = grid.N
    terminal = surface.sign * psi.values(bundle)
    increments = [bundle.compensated_increments(w) for w in driver.weights]
    out = np.zeros(N + 1)
    for i in range(N + 1):
        rhs = np.array(terminal[i])
        for j in range(i, N):
            z = surface.z_values(bundle, i, j)
            u = surface.u_values(bundle, i, j)
            g = evaluate_driver(driver, i, j, nodes, surface.Y[j], z, list(u), bundle.X[j], bundle.X[i])
            rhs = rhs + g * dt - z * bundle.dB[j]
            if u.shape[0]:
                kappa = surface.k_values(bundle, i, j)
                rhs = rhs - sum(kappa[l] * increments[l][j] for l in range(driver.n_jump))
        out[i] = float(np.mean((surface.Y[i] - rhs) ** 2))
    return out

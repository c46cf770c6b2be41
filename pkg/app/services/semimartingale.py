"""Constructions that exhibit BSVIE solutions as semimartingales (no jumps).

Type 1: psi(t) = F1(X(t)) F2(X(T)), g = 0. Y(t) = F1(X(t)) Ytilde(t) with
        Ytilde the BSDE value of F2(X(T)).
Type 2: psi(t) = F(X(t), X(T)), g = 0. A family of BSDEs indexed by a frozen
        parameter x is solved on an x-grid and evaluated at x = X(t).
Type 3: as Type 2 with a driver g(xt, x, y) independent of z. The diagonal
        Y comes from the general solver first; the frozen-parameter family
        then uses it inside the driver.

Each construction is cross-checked against the general solver on the same
bundle. Family members share one regression state, so their coefficient
vectors are interpolated across the x-grid with a cubic spline.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicSpline

from app.exceptions import CoefficientError, EvaluationError
from app.services.dsl import BoundExpression
from app.services.engine import PathBundle
from app.services.regression import LinearFit, RegressionBasis, fit, mean_stderr, solve_design
from app.services.solver import Driver, SolutionSurface, solve
from app.services.terminal import TerminalProcess
from app.utils.parallel import ordered_map

logger = logging.getLogger("volterrisk")

GRID_POINTS = 21
QUANTILES = (0.001, 0.999)
EXACT_RESIDUAL = 1e-20
SLOPE_RANGE = (0.5, 1.5)


@dataclass(frozen=True)
class FactorizedTerminal:
    F1: BoundExpression
    F2: BoundExpression

    @classmethod
    def from_expressions(cls, f1_expr: str, f2_expr: str) -> "FactorizedTerminal":
        return cls(BoundExpression.from_source(f1_expr, ("x",)), BoundExpression.from_source(f2_expr, ("x",)))

    def terminal(self) -> TerminalProcess:
        return TerminalProcess.from_pair_function(
            lambda xt, xT: self.F1(xt) * self.F2(xT), label=f"({self.F1.source})*({self.F2.source})"
        )


def smoothness_probe(f: Callable, lo: float, hi: float, points: int = 41) -> None:
    """Finite first and second difference quotients on [lo, hi]."""
    if hi <= lo:
        hi = lo + 1.0
    x = np.linspace(lo, hi, points)
    h = (hi - lo) * 1e-4
    try:
        f0 = np.broadcast_to(np.asarray(f(x), dtype=float), x.shape)
        fp = np.broadcast_to(np.asarray(f(x + h), dtype=float), x.shape)
        fm = np.broadcast_to(np.asarray(f(x - h), dtype=float), x.shape)
    except Exception as exc:
        raise CoefficientError(f"Function is not evaluable on [{lo:.4g}, {hi:.4g}]: {exc}") from exc
    first = (fp - fm) / (2 * h)
    second = (fp - 2 * f0 + fm) / h ** 2
    if not (np.all(np.isfinite(first)) and np.all(np.isfinite(second))):
        raise CoefficientError(f"Difference quotients are not finite on [{lo:.4g}, {hi:.4g}]")


# ===== Shared backward BSDE =====

@dataclass(frozen=True, eq=False)
class BackwardValue:
    """Per-node fits of E[Ytilde(t_{j+1}) | X(t_j)] and Z(t_j)."""

    values: np.ndarray
    cond_fits: List[Optional[LinearFit]]
    z_fits: List[Optional[LinearFit]]


def backward_bsde(
    bundle: PathBundle, terminal: np.ndarray, basis: RegressionBasis, source: Optional[np.ndarray] = None
) -> BackwardValue:
    """Ytilde(t_j) = E[Ytilde(t_{j+1}) | X(t_j)] + source_j dt, Ytilde(T) = terminal."""
    N = bundle.grid.N
    dt = bundle.grid.dt
    values = np.empty((N + 1, bundle.n_paths))
    values[N] = terminal
    cond_fits: List[Optional[LinearFit]] = [None] * (N + 1)
    z_fits: List[Optional[LinearFit]] = [None] * (N + 1)
    for j in range(N - 1, -1, -1):
        st = bundle.X[j]
        cond = fit(st, values[j + 1], basis)
        cond_values = cond.predict(st)
        z_fits[j] = fit(st, (values[j + 1] - cond_values) * bundle.dB[j] / dt, basis)
        cond_fits[j] = cond
        values[j] = cond_values + (0.0 if source is None else source[j] * dt)
    return BackwardValue(values=values, cond_fits=cond_fits, z_fits=z_fits)


# ===== Parametric family =====

def chebyshev_grid(X: np.ndarray, points: int = GRID_POINTS) -> np.ndarray:
    lo, hi = np.quantile(X, QUANTILES)
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    k = np.arange(points)
    nodes = np.cos(np.pi * (2 * k + 1) / (2 * points))
    return np.sort(0.5 * (lo + hi) + 0.5 * (hi - lo) * nodes)


@dataclass(frozen=True, eq=False)
class ParametricFamily:
    """Ytilde(t, x) and Ztilde(s, x) for x on a grid, as coefficient splines."""

    x_grid: np.ndarray
    members: List[BackwardValue]

    def _spline(self, fits: Sequence[LinearFit]) -> Tuple[LinearFit, CubicSpline]:
        table = np.array([f.coefficients for f in fits])
        return fits[0], CubicSpline(self.x_grid, table, axis=0)

    def _evaluate(self, fits: Sequence[LinearFit], state: np.ndarray, param: np.ndarray) -> np.ndarray:
        template, spline = self._spline(fits)
        coefficients = spline(param)
        z = (np.asarray(state, dtype=float)[:, None][:, template.kept] - template.center) / template.scale
        design = template.basis.design(z, template.exponents)
        return np.sum(design * coefficients, axis=1)

    def conditional(self, j: int, state: np.ndarray, param: np.ndarray) -> np.ndarray:
        """E[Ytilde(t_{j+1}, x) | X(t_j)] at x = param, per path."""
        return self._evaluate([m.cond_fits[j] for m in self.members], state, param)

    def z(self, j: int, state: np.ndarray, param: np.ndarray) -> np.ndarray:
        return self._evaluate([m.z_fits[j] for m in self.members], state, param)

    def extrapolated_fraction(self, X: np.ndarray) -> float:
        lo, hi = self.x_grid[0], self.x_grid[-1]
        return float(np.mean((X < lo) | (X > hi)))


def build_family(
    bundle: PathBundle,
    F: Callable,
    basis: RegressionBasis,
    x_grid: np.ndarray,
    source: Optional[Callable[[float], np.ndarray]] = None,
    threads: Optional[int] = None,
) -> ParametricFamily:
    """Solve the frozen-parameter BSDE with terminal F(x_k, X(T)) for every grid point."""
    XT = bundle.X[-1]

    def member(xk: float) -> BackwardValue:
        term = np.broadcast_to(np.asarray(F(xk, XT), dtype=float), XT.shape)
        return backward_bsde(bundle, term, basis, None if source is None else source(xk))

    return ParametricFamily(x_grid=np.asarray(x_grid, dtype=float), members=ordered_map(member, x_grid, threads))


# ===== Results =====

@dataclass
class IdentityCheck:
    passed: bool
    constructed: np.ndarray
    solver: np.ndarray
    combined_se: np.ndarray
    worst_ratio: float
    worst_node: int
    tol_multiplier: float

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "constructed": self.constructed.tolist(),
            "solver": self.solver.tolist(),
            "combined_se": self.combined_se.tolist(),
            "worst_ratio": self.worst_ratio,
            "worst_node": self.worst_node,
            "tol_multiplier": self.tol_multiplier,
        }


@dataclass(frozen=True, eq=False)
class SemimartingaleResult:
    kind: int
    Y: np.ndarray
    y_stderr: np.ndarray
    z_mean: np.ndarray
    identity: IdentityCheck
    terminal_error: float
    extrapolated_fraction: float = 0.0
    surface: Optional[SolutionSurface] = None
    family: Optional[ParametricFamily] = None


def _identity(
    Y: np.ndarray, se: np.ndarray, surface: SolutionSurface, tol_multiplier: float
) -> IdentityCheck:
    constructed = Y.mean(axis=1)
    solver = surface.y_mean
    combined = np.sqrt(se ** 2 + surface.y_stderr ** 2)
    gap = np.abs(constructed - solver)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(combined > 0, gap / combined, np.where(gap > 1e-10, np.inf, 0.0))
    k = int(np.argmax(ratio))
    passed = bool(np.all(gap <= tol_multiplier * combined + 1e-10))
    return IdentityCheck(passed, constructed, solver, combined, float(ratio[k]), k, tol_multiplier)


def _require_no_jumps(bundle: PathBundle) -> None:
    if bundle.jump.active:
        raise ValueError("Semimartingale constructions are defined without jumps (set intensity 0)")


def _pathwise_se(values: np.ndarray) -> np.ndarray:
    return np.array([mean_stderr(row) for row in values])


def type1(
    F: FactorizedTerminal,
    bundle: PathBundle,
    basis: RegressionBasis,
    tol_multiplier: float = 3.0,
    threads: Optional[int] = None,
) -> SemimartingaleResult:
    _require_no_jumps(bundle)
    X = bundle.X
    N = bundle.grid.N
    lo, hi = float(X.min()), float(X.max())
    smoothness_probe(F.F1, lo, hi)
    smoothness_probe(F.F2, lo, hi)

    f1 = np.broadcast_to(np.asarray(F.F1(X), dtype=float), X.shape)
    f2_T = np.broadcast_to(np.asarray(F.F2(X[-1]), dtype=float), X[-1].shape)
    inner = backward_bsde(bundle, f2_T, basis)
    Y = f1 * inner.values

    z_mean = np.full((N + 1, N + 1), np.nan)
    for j in range(N):
        z_j = inner.z_fits[j].predict(X[j])
        for i in range(j + 1):
            z_mean[i, j] = float(np.mean(f1[i] * z_j))

    psi = F.terminal()
    surface = solve(Driver.zero(), psi, 1, bundle, basis, threads=threads)
    se = _pathwise_se(f1 * f2_T[None, :])
    identity = _identity(Y, se, surface, tol_multiplier)
    terminal_error = float(np.abs(Y[N] - psi.values(bundle)[N]).max())
    logger.info(f"Type 1 construction: identity {'holds' if identity.passed else 'fails'} "
                f"(worst {identity.worst_ratio:.2f} SE at node {identity.worst_node})")
    return SemimartingaleResult(1, Y, se, z_mean, identity, terminal_error, surface=surface)


def _family_result(
    kind: int,
    bundle: PathBundle,
    F: Callable,
    basis: RegressionBasis,
    x_grid: Optional[np.ndarray],
    surface: SolutionSurface,
    driver_source: Optional[Callable[[float], np.ndarray]],
    diagonal_source: Optional[np.ndarray],
    se_paths: np.ndarray,
    tol_multiplier: float,
    threads: Optional[int],
) -> SemimartingaleResult:
    X = bundle.X
    N = bundle.grid.N
    dt = bundle.grid.dt
    grid = chebyshev_grid(X) if x_grid is None else np.sort(np.asarray(x_grid, dtype=float))
    family = build_family(bundle, F, basis, grid, driver_source, threads)
    extrapolated = family.extrapolated_fraction(X)
    if extrapolated > 0:
        logger.warning(f"{100 * extrapolated:.2f}% of X(t) samples lie outside the x-grid hull")

    Y = np.empty_like(X)
    Y[N] = np.broadcast_to(np.asarray(F(X[N], X[N]), dtype=float), X[N].shape)
    for i in range(N):
        Y[i] = family.conditional(i, X[i], X[i])
        if diagonal_source is not None:
            Y[i] = Y[i] + diagonal_source[i] * dt

    z_mean = np.full((N + 1, N + 1), np.nan)
    for j in range(N):
        for i in range(j + 1):
            z_mean[i, j] = float(np.mean(family.z(j, X[j], X[i])))

    se = _pathwise_se(se_paths)
    identity = _identity(Y, se, surface, tol_multiplier)
    terminal_error = float(np.abs(Y[N] - np.asarray(F(X[N], X[N]), dtype=float)).max())
    logger.info(f"Type {kind} construction: identity {'holds' if identity.passed else 'fails'} "
                f"(worst {identity.worst_ratio:.2f} SE at node {identity.worst_node})")
    return SemimartingaleResult(kind, Y, se, z_mean, identity, terminal_error,
                                extrapolated_fraction=extrapolated, surface=surface, family=family)


def type2(
    F: BoundExpression,
    bundle: PathBundle,
    basis: RegressionBasis,
    x_grid: Optional[np.ndarray] = None,
    tol_multiplier: float = 3.0,
    threads: Optional[int] = None,
) -> SemimartingaleResult:
    """``F`` is a two-argument function F(x, y) with x = X(t), y = X(T)."""
    _require_no_jumps(bundle)
    X = bundle.X
    lo, hi = float(X.min()), float(X.max())
    smoothness_probe(lambda v: F(v, X[-1].mean()), lo, hi)
    smoothness_probe(lambda v: F(X[0, 0], v), lo, hi)

    psi = TerminalProcess.from_pair_function(F, label=getattr(F, "source", "F"))
    surface = solve(Driver.zero(), psi, 1, bundle, basis, threads=threads)
    se_paths = psi.values(bundle)
    return _family_result(2, bundle, F, basis, x_grid, surface, None, None, se_paths, tol_multiplier, threads)


def type3(
    F: BoundExpression,
    g: Driver,
    bundle: PathBundle,
    basis: RegressionBasis,
    x_grid: Optional[np.ndarray] = None,
    tol_multiplier: float = 3.0,
    picard_tol: float = 1e-6,
    max_iter: int = 50,
    threads: Optional[int] = None,
) -> SemimartingaleResult:
    """Two-stage construction for a driver g(s, xt, x, y) independent of z and of the row time t.

    The frozen-x family is indexed by the value of X(t) alone, so t may not appear.
    """
    _require_no_jumps(bundle)
    extra = g.free - {"xt", "x", "y", "s"}
    if extra or g.n_jump:
        raise ValueError(f"Type 3 drivers may only use xt, x, y and s; found {sorted(extra)}")

    psi = TerminalProcess.from_pair_function(F, label=getattr(F, "source", "F"))
    surface = solve(g, psi, 1, bundle, basis, picard_tol=picard_tol, max_iter=max_iter, threads=threads)
    Y1 = surface.Y
    nodes = bundle.grid.nodes
    N = bundle.grid.N
    dt = bundle.grid.dt
    X = bundle.X

    def source_row(j: int, frozen) -> np.ndarray:
        # t is not a free variable of g, any row time will do
        value = g(nodes[0], nodes[j], Y1[j], 0.0, [], X[j], frozen)
        value = np.broadcast_to(np.asarray(value, dtype=float), X[j].shape)
        if not np.all(np.isfinite(value)):
            raise EvaluationError("Type 3 driver is not finite", node=j)
        return value

    def driver_source(xk: float) -> np.ndarray:
        return np.array([source_row(j, xk) for j in range(N)] + [np.zeros(bundle.n_paths)])

    diagonal = np.array([source_row(i, X[i]) for i in range(N)] + [np.zeros(bundle.n_paths)])

    # path-wise total of the diagonal row, for the standard error
    se_paths = np.empty_like(X)
    psi_values = psi.values(bundle)
    for i in range(N + 1):
        total = psi_values[i].copy()
        for j in range(i, N):
            total += source_row(j, X[i]) * dt
        se_paths[i] = total
    return _family_result(3, bundle, F, basis, x_grid, surface, driver_source, diagonal, se_paths,
                          tol_multiplier, threads)


# ===== Decomposition =====

@dataclass
class Decomposition:
    drift: np.ndarray
    martingale: np.ndarray
    residual: float


@dataclass
class DecompositionVerdict:
    passed: bool
    steps: List[int]
    residuals: List[float]
    slope: Optional[float]
    drift_mean: List[float]
    martingale_var: List[float]

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "steps": self.steps,
            "residuals": self.residuals,
            "slope": self.slope,
            "drift_mean": self.drift_mean,
            "martingale_var": self.martingale_var,
        }


def decompose(Y: np.ndarray, bundle: PathBundle, basis: RegressionBasis) -> Decomposition:
    """Split Y increments into a predictable drift and a dB-driven martingale part.

    Per step, dY_j is regressed on basis(X_j) and basis(X_j) * dB_j. The
    residual is the mean square left over, summed over steps.
    """
    N = bundle.grid.N
    X = bundle.X
    drift = np.zeros((N, bundle.n_paths))
    mart = np.zeros((N, bundle.n_paths))
    total = 0.0
    for j in range(N):
        dY = Y[j + 1] - Y[j]
        state = X[j][:, None]
        center, scale = state.mean(axis=0), state.std(axis=0)
        kept = np.flatnonzero(scale > 1e-12 * np.maximum(1.0, np.abs(center)))
        z = (state[:, kept] - center[kept]) / scale[kept]
        exps = basis.exponents(kept.size)
        phi = basis.design(z, exps)
        design = np.hstack([phi, phi * bundle.dB[j][:, None]])
        coef, _ = solve_design(design, dY)
        k = phi.shape[1]
        drift[j] = phi @ coef[:k]
        mart[j] = (phi * bundle.dB[j][:, None]) @ coef[k:]
        total += float(np.mean((dY - drift[j] - mart[j]) ** 2))
    return Decomposition(drift=drift, martingale=mart, residual=total)


def decomposition_check(
    levels: Sequence[Tuple[np.ndarray, PathBundle]],
    basis: RegressionBasis,
) -> DecompositionVerdict:
    """Residual of ``decompose`` across grid resolutions.

    Passes when every residual is below 1e-20 (exact decomposition) or when
    the log-log slope of residual against dt lies in [0.5, 1.5].
    """
    if not levels:
        raise ValueError("decomposition_check needs at least one resolution")
    steps, residuals, dts, drift_mean, mart_var = [], [], [], [], []
    for Y, bundle in levels:
        d = decompose(Y, bundle, basis)
        steps.append(bundle.grid.N)
        dts.append(bundle.grid.dt)
        residuals.append(d.residual)
        drift_mean.append(float(d.drift.sum(axis=0).mean()))
        mart_var.append(float(d.martingale.sum(axis=0).var()))

    if all(r < EXACT_RESIDUAL for r in residuals):
        return DecompositionVerdict(True, steps, residuals, None, drift_mean, mart_var)
    if len(levels) < 2 or any(r <= 0 for r in residuals):
        return DecompositionVerdict(False, steps, residuals, None, drift_mean, mart_var)
    slope = float(np.polyfit(np.log(dts), np.log(residuals), 1)[0])
    passed = SLOPE_RANGE[0] <= slope <= SLOPE_RANGE[1]
    return DecompositionVerdict(passed, steps, residuals, slope, drift_mean, mart_var)

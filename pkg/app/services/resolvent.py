"""Iterated kernels and the resolvent Phi = sum of alpha^(n) on the grid triangle.

Tables are (N + 1) x (N + 1) arrays indexed [i, j] = (t_i, t_j); entries
with j < i lie outside the triangle and are zero. Integrals over [t_i, t_j]
use the composite trapezoid rule on the grid nodes.

Truncation is certified with |alpha^(n)(t, r)| <= C^n T^(n-1) / (n-1)!,
whose tail beyond order n_max is C e^{CT} P(Poisson(CT) >= n_max).
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import gammainc

from app.config import settings
from app.exceptions import CapacityError, CoefficientError, EvaluationError
from app.services.dsl import BoundExpression
from app.services.engine import TimeGrid

logger = logging.getLogger("volterrisk")


@dataclass(frozen=True, eq=False)
class Kernel:
    """alpha(t, s) tabulated on the grid triangle with its bound C."""

    grid: TimeGrid
    values: np.ndarray
    C: float

    @classmethod
    def from_function(cls, alpha: Callable, grid: TimeGrid, C: Optional[float] = None) -> "Kernel":
        nodes = grid.nodes
        t, s = np.meshgrid(nodes, nodes, indexing="ij")
        raw = np.broadcast_to(np.asarray(alpha(t, s), dtype=float), t.shape)
        if not np.all(np.isfinite(raw[np.triu_indices(grid.N + 1)])):
            raise EvaluationError("alpha is not finite on the triangle")
        values = np.triu(raw)
        observed = float(np.abs(values).max())
        if C is None:
            C = observed
        elif observed > C * (1.0 + 1e-12):
            raise CoefficientError(f"|alpha| reaches {observed:.6g} > declared bound C = {C}")
        values.setflags(write=False)
        return cls(grid=grid, values=values, C=float(C))

    @classmethod
    def from_expression(cls, alpha_expr: str, grid: TimeGrid, C: Optional[float] = None) -> "Kernel":
        return cls.from_function(BoundExpression.from_source(alpha_expr, ("t", "s")), grid, C)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)


def compose(previous: np.ndarray, kernel: np.ndarray, dt: float) -> np.ndarray:
    """One step of the recursion a_n(t, r) = int_t^r a_{n-1}(t, s) alpha(s, r) ds."""
    full = dt * (previous @ kernel)
    ends = np.diag(previous)[:, None] * kernel + previous * np.diag(kernel)[None, :]
    out = np.triu(full - 0.5 * dt * ends)
    np.fill_diagonal(out, 0.0)
    return out


def iterate_kernel(k: Kernel, n: int) -> np.ndarray:
    """alpha^(n) on the triangle; quadrature resolution is the kernel's grid."""
    if n < 1:
        raise ValueError(f"Kernel order must be >= 1, got {n}")
    table = np.array(k.values)
    for _ in range(n - 1):
        table = compose(table, k.values, k.grid.dt)
    return table


def iterate_bound(C: float, T: float, n: int) -> float:
    """Sup bound of |alpha^(n)| on the triangle."""
    if C == 0.0:
        return 0.0
    return C ** n * T ** (n - 1) / math.factorial(n - 1)


def tail_bound(C: float, T: float, n_max: int) -> float:
    """Bound on sum_{n > n_max} |alpha^(n)|."""
    if C == 0.0:
        return 0.0
    ct = C * T
    p = float(gammainc(n_max, ct))
    if p == 0.0:
        return 0.0
    log_tail = math.log(C) + ct + math.log(p)
    return math.exp(log_tail) if log_tail < 700.0 else math.inf


def truncation_order(C: float, T: float, tol: float) -> int:
    if not tol > 0:
        raise ValueError(f"tol must be > 0, got {tol}")
    cap = settings.resolvent_max_order
    n = 1
    while tail_bound(C, T, n) >= tol:
        n += 1
        if n > cap:
            required = n
            while tail_bound(C, T, required) >= tol:
                required += 1
            raise CapacityError(
                f"Resolvent needs order {required} > cap {cap} (C*T = {C * T:.4g})",
                required=required,
            )
    return n


@dataclass(frozen=True, eq=False)
class ResolventTable:
    grid: TimeGrid
    values: np.ndarray
    majorant: np.ndarray
    n_max: int
    tail_bound: float
    tol: float

    def row(self, i: int) -> np.ndarray:
        return self.values[i]


def resolvent(k: Kernel, tol: float) -> ResolventTable:
    n_max = truncation_order(k.C, k.grid.T, tol)
    dt = k.grid.dt
    term = np.array(k.values)
    phi = term.copy()
    psi = np.abs(term)
    for _ in range(n_max - 1):
        term = compose(term, k.values, dt)
        phi += term
        psi += np.abs(term)
    if not np.all(np.isfinite(phi)):
        raise EvaluationError("Resolvent series produced a non-finite value")
    tail = tail_bound(k.C, k.grid.T, n_max)
    logger.info(f"Resolvent summed to order {n_max} (tail bound {tail:.3e}, C={k.C:.4g})")
    phi.setflags(write=False)
    psi.setflags(write=False)
    return ResolventTable(grid=k.grid, values=phi, majorant=psi, n_max=n_max, tail_bound=tail, tol=tol)


def convolve(phi: ResolventTable, psi: np.ndarray) -> np.ndarray:
    """int_{t_i}^T Phi(t_i, r) psi(r) dr at every node i.

    ``psi`` has shape (N + 1,) or (N + 1, n_paths); the result has the same
    shape. The last node's integral is zero.
    """
    psi = np.asarray(psi, dtype=float)
    dt = phi.grid.dt
    table = phi.values
    full = dt * (table @ psi)
    diag = np.diag(table)
    last = table[:, -1]
    if psi.ndim == 1:
        ends = diag * psi + last * psi[-1]
    else:
        ends = diag[:, None] * psi + last[:, None] * psi[-1][None, :]
    out = full - 0.5 * dt * ends
    out[-1] = 0.0
    return out


def convolve_row(phi: ResolventTable, i: int, psi_row: np.ndarray) -> np.ndarray:
    """int_{t_i}^T Phi(t_i, r) psi(t_i, r) dr when psi depends on the row."""
    psi_row = np.asarray(psi_row, dtype=float)
    N = phi.grid.N
    if i == N:
        return np.zeros(psi_row.shape[1:])
    w = phi.values[i, i:].copy()
    w[0] *= 0.5
    w[-1] *= 0.5
    return phi.grid.dt * np.tensordot(w, psi_row[i:], axes=(0, 0))

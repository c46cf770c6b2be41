"""Closed-form evaluation of linear BSVIEs with jumps.

For the driver alpha(t, s) y + beta(s) z + int theta(s, zeta) k(zeta) nu(dzeta)
the first component is

    Y(t) = E[M(T) {sign psi(t) + int_t^T Phi(t, r) sign psi(r) dr} | F_t] / E[M(T) | F_t]

with M the stochastic exponential of (beta, theta) and Phi the resolvent
of alpha. With alpha = 0 the resolvent is skipped.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from app.services.dsl import BoundExpression
from app.services.engine import PathBundle
from app.services.girsanov import (
    ConditionalEstimate,
    DensityPath,
    GirsanovCoefficients,
    q_conditional_ratio,
    stochastic_exponential,
)
from app.services.regression import RegressionBasis
from app.services.resolvent import Kernel, ResolventTable, convolve, resolvent
from app.services.terminal import TerminalProcess
from app.utils.parallel import ordered_map

logger = logging.getLogger("volterrisk")


@dataclass(frozen=True)
class LinearBSVIE:
    alpha: Callable
    girsanov: GirsanovCoefficients
    terminal: TerminalProcess
    sign: int = 1
    alpha_bound: Optional[float] = None

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")

    @classmethod
    def from_expressions(
        cls,
        alpha_expr: str,
        beta_expr: str,
        theta_expr: str,
        terminal: TerminalProcess,
        sign: int = 1,
        epsilon: float = 0.01,
        pi_expr: Optional[str] = None,
        alpha_bound: Optional[float] = None,
    ) -> "LinearBSVIE":
        return cls(
            alpha=BoundExpression.from_source(alpha_expr, ("t", "s")),
            girsanov=GirsanovCoefficients.from_expressions(beta_expr, theta_expr, epsilon, pi_expr),
            terminal=terminal,
            sign=sign,
            alpha_bound=alpha_bound,
        )


@dataclass(frozen=True, eq=False)
class LinearSolution:
    values: np.ndarray
    stderr: np.ndarray
    estimates: List[Optional[ConditionalEstimate]]
    density: DensityPath
    table: Optional[ResolventTable] = None
    nodes: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def mean(self) -> np.ndarray:
        return self.values.mean(axis=1)


def state_at(bundle: PathBundle, terminal: TerminalProcess, i: int) -> np.ndarray:
    cols = [bundle.X[i][:, None]]
    extra = terminal.state_columns(bundle, i)
    if extra is not None:
        cols.append(extra)
    return np.hstack(cols)


def solve_linear(
    prob: LinearBSVIE,
    bundle: PathBundle,
    basis: RegressionBasis,
    tol: float = 1e-6,
    mode: str = "simulated",
    threads: Optional[int] = None,
) -> LinearSolution:
    grid = bundle.grid
    psi = prob.terminal.values(bundle)

    kernel = Kernel.from_function(prob.alpha, grid, prob.alpha_bound)
    table = None
    if kernel.is_zero:
        payoff = prob.sign * psi
    else:
        table = resolvent(kernel, tol)
        payoff = prob.sign * (psi + convolve(table, psi))

    density = stochastic_exponential(prob.girsanov, bundle)

    def node(i: int) -> ConditionalEstimate:
        return q_conditional_ratio(payoff[i], density, state_at(bundle, prob.terminal, i), basis, i=i, mode=mode)

    estimates = ordered_map(node, range(grid.N), threads)
    values = np.empty((grid.N + 1, bundle.n_paths))
    stderr = np.zeros(grid.N + 1)
    for i, est in enumerate(estimates):
        values[i] = est.values
        stderr[i] = est.stderr
    # Y(T) = sign psi(T) path-wise
    values[grid.N] = payoff[grid.N]
    logger.info(f"Linear BSVIE solved on N={grid.N}: Y(0) = {values[0].mean():.6g} +/- {stderr[0]:.2g}")
    return LinearSolution(
        values=values, stderr=stderr, estimates=list(estimates) + [None],
        density=density, table=table, nodes=grid.nodes,
    )

"""Measure change dQ = M(T) dP and Q-conditional expectations.

M is the stochastic exponential of the Brownian integral of beta and the
compensated jump integral of theta. Coefficients may depend on the state,
beta(s, x) and theta(s, x, zeta), evaluated at the left grid point.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np

from app.exceptions import CoefficientError, DomainError, EvaluationError
from app.services.dsl import BoundExpression
from app.services.engine import PathBundle
from app.services.regression import LinearFit, RegressionBasis, fit, mean_stderr

logger = logging.getLogger("volterrisk")

# Paths whose states are paired with every quadrature mark during the audit
AUDIT_PATHS = 256
DENOMINATOR_MODES = ("simulated", "estimated")


@dataclass(frozen=True)
class CoefficientAudit:
    min_theta: float
    max_abs_beta: float
    max_pi_ratio: float
    pi_second_moment: Optional[float]


@dataclass(frozen=True)
class GirsanovCoefficients:
    beta: Callable
    theta: Callable
    epsilon: float = 0.01
    pi: Optional[Callable] = None
    beta_bound: Optional[float] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise CoefficientError(f"epsilon must be > 0, got {self.epsilon}")

    @classmethod
    def from_expressions(
        cls,
        beta_expr: str = "0",
        theta_expr: str = "0",
        epsilon: float = 0.01,
        pi_expr: Optional[str] = None,
        beta_bound: Optional[float] = None,
    ) -> "GirsanovCoefficients":
        return cls(
            beta=BoundExpression.from_source(beta_expr, ("s", "x")),
            theta=BoundExpression.from_source(theta_expr, ("s", "x", "zeta")),
            epsilon=epsilon,
            pi=BoundExpression.from_source(pi_expr, ("zeta",)) if pi_expr is not None else None,
            beta_bound=beta_bound,
        )

    @property
    def is_trivial(self) -> bool:
        return all(isinstance(f, BoundExpression) and f.is_zero for f in (self.beta, self.theta))

    def beta_values(self, bundle: PathBundle) -> np.ndarray:
        """beta(t_i, X_i), shape (N, n_paths)."""
        nodes = bundle.grid.nodes
        out = np.empty((bundle.grid.N, bundle.n_paths))
        for i in range(bundle.grid.N):
            out[i] = np.broadcast_to(np.asarray(self.beta(nodes[i], bundle.X[i]), dtype=float), (bundle.n_paths,))
        return out

    def theta_at_jumps(self, bundle: PathBundle) -> np.ndarray:
        if bundle.jump_mark.size == 0:
            return np.zeros(0)
        step = bundle.jump_step
        s = bundle.grid.nodes[step]
        x = bundle.X[step, bundle.jump_path]
        return np.broadcast_to(np.asarray(self.theta(s, x, bundle.jump_mark), dtype=float), step.shape)

    def theta_compensator(self, bundle: PathBundle, i: int) -> np.ndarray:
        """Integral of theta(t_i, X_i, .) against nu, per path."""
        if not bundle.jump.active:
            return np.zeros(bundle.n_paths)
        s = bundle.grid.nodes[i]
        x = bundle.X[i][:, None]
        value = bundle.jump.nu_integral(lambda z: self.theta(s, x, z[None, :]))
        return np.broadcast_to(np.asarray(value, dtype=float).reshape(-1), (bundle.n_paths,))

    def audit(self, bundle: PathBundle) -> CoefficientAudit:
        """Check epsilon, Pi and beta bounds on the bundle's sampled points."""
        beta = self.beta_values(bundle)
        if not np.all(np.isfinite(beta)):
            raise EvaluationError("beta is not finite on the sampled states")
        max_beta = float(np.abs(beta).max()) if beta.size else 0.0
        if self.beta_bound is not None and max_beta > self.beta_bound:
            raise CoefficientError(f"|beta| reaches {max_beta:.6g} > declared bound {self.beta_bound}")

        thetas, marks = [self.theta_at_jumps(bundle)], [bundle.jump_mark]
        if bundle.jump.active:
            nodes_z, _ = bundle.jump.quadrature()
            sub = min(bundle.n_paths, AUDIT_PATHS)
            for i in range(bundle.grid.N):
                x = bundle.X[i, :sub][:, None]
                vals = np.asarray(self.theta(bundle.grid.nodes[i], x, nodes_z[None, :]), dtype=float)
                vals = np.broadcast_to(vals, (sub, nodes_z.size))
                thetas.append(vals.ravel())
                marks.append(np.broadcast_to(nodes_z, (sub, nodes_z.size)).ravel())
        theta = np.concatenate(thetas)
        mark = np.concatenate(marks)
        if theta.size == 0:
            return CoefficientAudit(0.0, max_beta, 0.0, None)

        min_theta = float(theta.min())
        if min_theta < -1.0 + self.epsilon:
            raise CoefficientError(
                f"theta reaches {min_theta:.6g} < -1 + epsilon = {-1.0 + self.epsilon:.6g}"
            )

        ratio, second = 0.0, None
        if self.pi is not None:
            pi_vals = np.broadcast_to(np.asarray(self.pi(mark), dtype=float), mark.shape)
            excess = np.abs(theta) - pi_vals
            if np.any(excess > 1e-12):
                k = int(np.argmax(excess))
                raise CoefficientError(
                    f"|theta| = {abs(theta[k]):.6g} exceeds Pi = {pi_vals[k]:.6g} at zeta = {mark[k]:.6g}"
                )
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(pi_vals > 0, np.abs(theta) / pi_vals, 0.0)
            ratio = float(r.max())
            second = bundle.jump.check_square_integrable(self.pi, label="Pi")
        return CoefficientAudit(min_theta, max_beta, ratio, second)


@dataclass(frozen=True, eq=False)
class DensityPath:
    """M at every node, shape (N + 1, n_paths); M[0] = 1 and M > 0."""

    M: np.ndarray

    @property
    def terminal(self) -> np.ndarray:
        return self.M[-1]

    def ratio_to_terminal(self, i: int) -> np.ndarray:
        """M(T) / M(t_i) per path."""
        return self.M[-1] / self.M[i]

    @classmethod
    def identity(cls, bundle: PathBundle) -> "DensityPath":
        M = np.ones((bundle.grid.N + 1, bundle.n_paths))
        M.setflags(write=False)
        return cls(M)


def stochastic_exponential(coeffs: GirsanovCoefficients, bundle: PathBundle) -> DensityPath:
    grid = bundle.grid
    if coeffs.is_trivial:
        return DensityPath.identity(bundle)

    theta_jumps = coeffs.theta_at_jumps(bundle)
    if theta_jumps.size and np.any(theta_jumps <= -1.0):
        k = int(np.argmax(theta_jumps <= -1.0))
        raise DomainError(
            f"log of non-positive 1 + theta = {1.0 + theta_jumps[k]:.6g} "
            f"at node i={int(bundle.jump_step[k])}, path p={int(bundle.jump_path[k])}"
        )
    coeffs.audit(bundle)

    beta = coeffs.beta_values(bundle)
    log_inc = beta * bundle.dB - 0.5 * beta ** 2 * grid.dt
    if theta_jumps.size:
        np.add.at(log_inc, (bundle.jump_step, bundle.jump_path), np.log1p(theta_jumps))
    if bundle.jump.active:
        for i in range(grid.N):
            log_inc[i] -= coeffs.theta_compensator(bundle, i) * grid.dt

    log_m = np.vstack([np.zeros((1, bundle.n_paths)), np.cumsum(log_inc, axis=0)])
    M = np.exp(log_m)
    if not np.all(np.isfinite(M)) or np.any(M <= 0.0):
        bad = np.argwhere(~np.isfinite(M) | (M <= 0.0))[0]
        raise EvaluationError("Stochastic exponential left (0, inf)", node=int(bad[0]), path=int(bad[1]))
    M.setflags(write=False)
    return DensityPath(M)


@dataclass(frozen=True, eq=False)
class ConditionalEstimate:
    """Per-path values of a Q-conditional expectation at one node."""

    values: np.ndarray
    stderr: float
    mode: str
    numerator: LinearFit
    denominator: Optional[LinearFit] = None

    @property
    def mean(self) -> float:
        return float(self.values.mean())


def _augment(state: np.ndarray, column: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[:, None]
    return np.column_stack([state, column])


def q_conditional_ratio(
    payoff: np.ndarray,
    density: DensityPath,
    state: np.ndarray,
    basis: RegressionBasis,
    i: int = 0,
    mode: str = "simulated",
) -> ConditionalEstimate:
    """Estimate E[M(T) payoff | F_t] / E[M(T) | F_t] at node ``i``.

    ``simulated`` replaces the denominator by the simulated M(t_i) and
    regresses (M(T)/M(t_i)) * payoff on ``state``. ``estimated`` regresses
    numerator and denominator separately on ``state`` augmented by M(t_i).
    """
    payoff = np.asarray(payoff, dtype=float)
    if not np.all(np.isfinite(payoff)):
        raise EvaluationError("Payoff is not finite", node=i)
    if mode not in DENOMINATOR_MODES:
        raise ValueError(f"Unknown denominator mode '{mode}'")

    if mode == "simulated":
        target = density.ratio_to_terminal(i) * payoff
        numerator = fit(state, target, basis)
        return ConditionalEstimate(
            values=numerator.predict(state), stderr=mean_stderr(target),
            mode=mode, numerator=numerator,
        )

    m_t = density.M[i]
    aug = _augment(state, m_t)
    a = density.terminal * payoff
    b = density.terminal
    numerator = fit(aug, a, basis)
    denominator = fit(aug, b, basis)
    num = numerator.predict(aug)
    den = denominator.predict(aug)
    if np.any(den <= 0.0):
        n_bad = int(np.sum(den <= 0.0))
        logger.warning(f"Estimated denominator non-positive on {n_bad} paths at node {i}; using M(t) there")
        den = np.where(den > 0.0, den, m_t)
    ratio_bar = float(a.mean() / b.mean())
    stderr = float(np.std(a - ratio_bar * b, ddof=1) / (b.mean() * np.sqrt(a.size))) if a.size > 1 else 0.0
    return ConditionalEstimate(
        values=num / den, stderr=stderr, mode=mode,
        numerator=numerator, denominator=denominator,
    )


def shifted_brownian_mean(density: DensityPath, bundle: PathBundle) -> Tuple[float, float]:
    """E_Q[B(T)] with its standard error."""
    target = density.terminal * bundle.B[-1]
    return float(target.mean()), mean_stderr(target)

"""Least-squares projection onto polynomial bases of the path state.

Used for every conditional expectation the solvers need. State columns are
standardized and constant columns dropped before the monomials are built,
so a regression at t = 0 (where every path shares the same state) reduces
to a plain sample mean.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.config import settings
from app.exceptions import IllConditionedBasisError

logger = logging.getLogger("volterrisk")


@dataclass(frozen=True)
class RegressionBasis:
    """All monomials of total degree <= ``degree`` in the state columns."""

    degree: int = 3

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError(f"Basis degree must be >= 0, got {self.degree}")

    def exponents(self, n_columns: int) -> List[Tuple[int, ...]]:
        terms: List[Tuple[int, ...]] = []
        for total in range(self.degree + 1):
            for combo in itertools.combinations_with_replacement(range(n_columns), total):
                powers = [0] * n_columns
                for c in combo:
                    powers[c] += 1
                terms.append(tuple(powers))
        return terms

    def design(self, standardized: np.ndarray, exponents: Sequence[Tuple[int, ...]]) -> np.ndarray:
        n = standardized.shape[0]
        cols = []
        for powers in exponents:
            col = np.ones(n)
            for c, k in enumerate(powers):
                if k:
                    col = col * standardized[:, c] ** k
            cols.append(col)
        return np.column_stack(cols)


@dataclass(frozen=True)
class LinearFit:
    """A fitted regression; ``predict`` maps raw state rows to estimates."""

    basis: RegressionBasis
    center: np.ndarray
    scale: np.ndarray
    kept: np.ndarray
    exponents: Tuple[Tuple[int, ...], ...]
    coefficients: np.ndarray
    condition_number: float
    residual_std: float

    def predict(self, state: np.ndarray) -> np.ndarray:
        state = _as_columns(state)
        z = (state[:, self.kept] - self.center) / self.scale
        return self.basis.design(z, self.exponents) @ self.coefficients

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    def as_dict(self) -> dict:
        return {
            "degree": self.basis.degree,
            "kept_columns": self.kept.tolist(),
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "exponents": [list(e) for e in self.exponents],
            "coefficients": self.coefficients.tolist(),
            "condition_number": self.condition_number,
            "residual_std": self.residual_std,
        }


def _as_columns(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=float)
    if state.ndim == 1:
        state = state[:, None]
    return state


def fit(
    state: np.ndarray,
    target: np.ndarray,
    basis: RegressionBasis,
    max_condition: Optional[float] = None,
) -> LinearFit:
    """Project ``target`` (n,) onto ``basis`` evaluated at ``state`` (n, d).

    Raises IllConditionedBasisError when the standardized design matrix has
    a condition number above ``max_condition``.
    """
    state = _as_columns(state)
    target = np.asarray(target, dtype=float)
    limit = settings.max_condition_number if max_condition is None else max_condition

    center = state.mean(axis=0)
    scale = state.std(axis=0)
    kept = np.flatnonzero(scale > 1e-12 * np.maximum(1.0, np.abs(center)))
    center, scale = center[kept], scale[kept]
    exponents = tuple(basis.exponents(kept.size))
    design = basis.design((state[:, kept] - center) / scale, exponents)

    coefficients, cond = solve_design(design, target, limit)
    if target.size and np.all(target == target[0]):
        # constants pass through unchanged
        coefficients = np.zeros_like(coefficients)
        coefficients[0] = target[0]
    resid = target - design @ coefficients
    return LinearFit(
        basis=basis, center=center, scale=scale, kept=kept, exponents=exponents,
        coefficients=coefficients, condition_number=cond,
        residual_std=float(resid.std()),
    )


def solve_design(design: np.ndarray, target: np.ndarray, limit: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """Least-squares coefficients by SVD and the design's condition number."""
    limit = settings.max_condition_number if limit is None else limit
    u, sv, vt = np.linalg.svd(design, full_matrices=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    if cond > limit:
        raise IllConditionedBasisError(cond, limit)
    return vt.T @ ((u.T @ target) / sv), cond


def project(state: np.ndarray, target: np.ndarray, basis: RegressionBasis) -> np.ndarray:
    """Fitted values of ``target`` at the sample points."""
    return fit(state, target, basis).predict(state)


def mean_stderr(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))

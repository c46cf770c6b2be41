"""Dynamic convex risk measure rho(t; psi) = Y^{-psi}(t) and its axiom suite."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.exceptions import CoefficientError
from app.services.comparison import Verdict
from app.services.dsl import JUMP_FUNCTIONALS
from app.services.engine import PathBundle
from app.services.regression import RegressionBasis
from app.services.solver import Driver, SolutionSurface, solve
from app.services.terminal import TerminalProcess
from app.utils.parallel import ordered_map

logger = logging.getLogger("volterrisk")

CONVEXITY_TOL = 1e-12
TRANSLATION_TOL = 1e-8


@dataclass
class ConvexityProbe:
    passed: bool
    worst_gap: float
    point: Dict[str, float] = field(default_factory=dict)


def convexity_probe(driver: Driver, samples: int = 500, seed: int = 0, T: float = 1.0) -> ConvexityProbe:
    """Midpoint test of (z, u) -> g on random chords; fails on any gap > 1e-12."""
    rng = np.random.default_rng(seed)
    coords = ("z",) + JUMP_FUNCTIONALS[: driver.n_jump]
    t = rng.uniform(0.0, T, samples)
    s = t + rng.uniform(0.0, 1.0, samples) * (T - t)
    x = rng.uniform(-2.0, 2.0, samples)
    xt = rng.uniform(-2.0, 2.0, samples)
    a = {c: rng.uniform(-2.0, 2.0, samples) for c in coords}
    b = {c: rng.uniform(-2.0, 2.0, samples) for c in coords}
    mid = {c: 0.5 * (a[c] + b[c]) for c in coords}

    def g(point):
        u = [point[c] for c in coords[1:]]
        return np.broadcast_to(np.asarray(driver(t, s, 0.0, point["z"], u, x, xt), dtype=float), t.shape)

    gap = g(mid) - 0.5 * (g(a) + g(b))
    k = int(np.argmax(gap))
    point = {"t": float(t[k]), "s": float(s[k])}
    point.update({f"{c}_a": float(a[c][k]) for c in coords})
    point.update({f"{c}_b": float(b[c][k]) for c in coords})
    return ConvexityProbe(passed=bool(gap[k] <= CONVEXITY_TOL), worst_gap=float(gap[k]), point=point)


@dataclass(frozen=True)
class RiskSpec:
    driver: Driver
    position: TerminalProcess
    convex: bool = True

    def __post_init__(self):
        if self.driver.depends_on_y:
            raise CoefficientError("Risk drivers must not depend on y")

    def validate(self, T: float = 1.0) -> Optional[ConvexityProbe]:
        if not self.convex:
            return None
        probe = convexity_probe(self.driver, T=T)
        if not probe.passed:
            raise CoefficientError(f"Driver is not convex in (z, u): midpoint gap {probe.worst_gap:.3e}")
        return probe


@dataclass(frozen=True, eq=False)
class RiskEstimate:
    values: np.ndarray
    mean: float
    stderr: float
    surface: SolutionSurface


def _solve(spec: RiskSpec, position: TerminalProcess, bundle: PathBundle, basis: RegressionBasis,
           threads: Optional[int] = None) -> SolutionSurface:
    return solve(spec.driver, position, -1, bundle, basis, threads=threads)


def rho(spec: RiskSpec, t_index: int, bundle: PathBundle, basis: RegressionBasis,
        threads: Optional[int] = None) -> RiskEstimate:
    if not 0 <= t_index <= bundle.grid.N:
        raise ValueError(f"t_index {t_index} outside [0, {bundle.grid.N}]")
    surface = _solve(spec, spec.position, bundle, basis, threads)
    values = surface.Y[t_index]
    return RiskEstimate(values=values, mean=float(values.mean()), stderr=float(surface.y_stderr[t_index]),
                        surface=surface)


@dataclass
class RiskReport:
    nodes: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    verdicts: List[Verdict]
    normalization: float

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def __getitem__(self, name: str) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)

    def rows(self) -> List[dict]:
        out = []
        for v in self.verdicts:
            out.append({
                "axiom": v.name,
                "verdict": "pass" if v.passed else "fail",
                "worst_margin": v.worst_margin,
                "node": v.point.get("node"),
                "stderr": v.point.get("stderr"),
            })
        return out


def axiom_suite(
    spec: RiskSpec,
    shift: float,
    lambdas: Sequence[float],
    bundle: PathBundle,
    basis: RegressionBasis,
    pair: Optional[Tuple[TerminalProcess, TerminalProcess]] = None,
    t_index: Optional[int] = None,
    tol_multiplier: float = 3.0,
    threads: Optional[int] = None,
) -> RiskReport:
    """Convexity, monotonicity, translation invariance and past independence.

    Every sub-solve runs on the same bundle. ``pair`` defaults to
    (position, -position); ``t_index`` (for past independence) defaults to N // 2.
    """
    N = bundle.grid.N
    t_index = N // 2 if t_index is None else t_index
    if not 0 < t_index <= N:
        raise ValueError(f"t_index must be in (0, {N}], got {t_index}")
    psi1, psi2 = pair if pair is not None else (spec.position, spec.position.scaled(-1.0))
    lambdas = [float(lam) for lam in lambdas]
    for lam in lambdas:
        if not 0.0 <= lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {lam}")

    zero = TerminalProcess.deterministic("0")
    jobs: List[TerminalProcess] = [
        spec.position,
        spec.position.translated(shift),
        spec.position.perturbed_before(t_index, 100.0),
        psi1,
        psi2,
        psi1.pathwise_min(psi2),
        psi1.pathwise_max(psi2),
        zero,
    ] + [psi1.mixture(psi2, lam) for lam in lambdas]
    # the worker pool is spent inside each solve; sub-solves run in sequence
    surfaces = ordered_map(lambda p: _solve(spec, p, bundle, basis, threads), jobs, threads=1)
    base, shifted, perturbed, s1, s2, s_lo, s_hi, s_zero = surfaces[:8]
    mixed = surfaces[8:]

    verdicts: List[Verdict] = []

    # convexity: rho(lam psi1 + (1 - lam) psi2) <= lam rho(psi1) + (1 - lam) rho(psi2)
    worst, where = -np.inf, {}
    for lam, s_mix in zip(lambdas, mixed):
        lhs = s_mix.y_mean
        rhs = lam * s1.y_mean + (1.0 - lam) * s2.y_mean
        se = np.sqrt(s_mix.y_stderr ** 2 + lam ** 2 * s1.y_stderr ** 2 + (1.0 - lam) ** 2 * s2.y_stderr ** 2)
        excess = (lhs - rhs) - tol_multiplier * se
        k = int(np.argmax(excess))
        if excess[k] > worst:
            worst = float(excess[k])
            where = {"node": k, "stderr": float(se[k]), "lambda": lam, "gap": float(lhs[k] - rhs[k])}
    verdicts.append(Verdict("convexity", worst <= 0.0 or not lambdas, float(where.get("gap", 0.0)), where))

    # monotonicity: min(psi1, psi2) <= max(psi1, psi2) path-wise => rho(lo) >= rho(hi)
    diff = s_lo.y_mean - s_hi.y_mean
    se = np.sqrt(s_lo.y_stderr ** 2 + s_hi.y_stderr ** 2)
    k = int(np.argmin(diff + tol_multiplier * se))
    verdicts.append(Verdict(
        "monotonicity", bool(np.all(diff >= -tol_multiplier * se)), float(diff[k]),
        {"node": k, "stderr": float(se[k])},
    ))

    # translation invariance, path-wise
    err = np.abs(shifted.Y - (base.Y - shift)).max(axis=1)
    k = int(np.argmax(err))
    verdicts.append(Verdict(
        "translation_invariance", bool(err[k] <= TRANSLATION_TOL), float(err[k]),
        {"node": k, "stderr": 0.0},
    ))

    # past independence: rho on [t_index, T] must be bit-identical
    same = [bool(np.array_equal(perturbed.Y[i], base.Y[i])) for i in range(t_index, N + 1)]
    first_bad = next((t_index + n for n, ok in enumerate(same) if not ok), None)
    gap = float(np.abs(perturbed.Y[t_index:] - base.Y[t_index:]).max())
    verdicts.append(Verdict(
        "past_independence", all(same), gap,
        {"node": first_bad if first_bad is not None else t_index, "stderr": 0.0},
    ))

    normalization = float(np.abs(s_zero.Y).max())
    if _vanishes_at_origin(spec.driver, bundle):
        verdicts.append(Verdict("normalization", normalization == 0.0, normalization, {"node": 0, "stderr": 0.0}))

    report = RiskReport(
        nodes=bundle.grid.nodes, values=base.y_mean, stderr=base.y_stderr,
        verdicts=verdicts, normalization=normalization,
    )
    logger.info(f"Axiom suite: {', '.join(f'{v.name}={v.passed}' for v in verdicts)}")
    return report


def _vanishes_at_origin(driver: Driver, bundle: PathBundle) -> bool:
    nodes = bundle.grid.nodes
    for i in range(bundle.grid.N + 1):
        for j in range(i, bundle.grid.N + 1):
            g0 = np.asarray(driver.at_origin(nodes[i], nodes[j], bundle.X[j], bundle.X[i]), dtype=float)
            if np.any(g0 != 0.0):
                return False
    return True

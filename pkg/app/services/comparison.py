"""Hypothesis checks and ordering verification for comparison of BSVIEs.

Two orientations are supported, selected by the terminal sign shared by
both instances:

- sign = +1: drivers ordered g1 >= g2, terminals psi1 >= psi2, g1
  increasing in y.
- sign = -1 (y-independent drivers, terminal entering as -psi): drivers
  ordered g1 >= g2, terminals psi1 <= psi2.

Either way the conclusion is Y1 >= Y2. Hypotheses that reference the
solutions (the jump inequality) are checked a posteriori on the realized
surfaces, which must come from a shared bundle.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from app.exceptions import CoefficientError
from app.services.dsl import JUMP_FUNCTIONALS
from app.services.engine import PathBundle
from app.services.girsanov import GirsanovCoefficients
from app.services.solver import Driver, SolutionSurface, evaluate_driver
from app.services.terminal import TerminalProcess

logger = logging.getLogger("volterrisk")

# Paths per cell used when plugging realized solution values into a driver
REALIZED_PATHS = 200
ORDER_TOL = 1e-12


@dataclass(frozen=True)
class ComparisonInstance:
    driver1: Driver
    terminal1: TerminalProcess
    driver2: Driver
    terminal2: TerminalProcess
    sign: int = 1
    certificate: Optional[GirsanovCoefficients] = None

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValueError(f"sign must be +1 or -1, got {self.sign}")
        if self.sign == -1 and (self.driver1.depends_on_y or self.driver2.depends_on_y):
            raise ValueError("The -psi orientation needs drivers independent of y")
        if self.driver1.weight_sources != self.driver2.weight_sources:
            raise ValueError("Both drivers must use the same jump weights")


@dataclass
class Verdict:
    name: str
    passed: bool
    worst_margin: float
    point: Dict[str, float] = field(default_factory=dict)
    detail: str = ""

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "worst_margin": self.worst_margin,
            "point": self.point,
            "detail": self.detail,
        }


@dataclass
class HypothesisReport:
    verdicts: List[Verdict]

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def __getitem__(self, name: str) -> Verdict:
        for v in self.verdicts:
            if v.name == name:
                return v
        raise KeyError(name)


@dataclass
class OrderingVerdict:
    passed: bool
    differences: np.ndarray
    stderr: np.ndarray
    violating_nodes: List[int]
    worst_margin: float
    tol_multiplier: float

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "differences": self.differences.tolist(),
            "stderr": self.stderr.tolist(),
            "violating_nodes": self.violating_nodes,
            "worst_margin": self.worst_margin,
            "tol_multiplier": self.tol_multiplier,
        }


def _check_orientation(inst: ComparisonInstance, surf1: SolutionSurface, surf2: SolutionSurface) -> None:
    if surf1.sign != surf2.sign or surf1.sign != inst.sign:
        raise ValueError(
            f"Mixed sign conventions: instance {inst.sign:+d}, surfaces {surf1.sign:+d}/{surf2.sign:+d}"
        )


def _box_samples(
    rng: np.random.Generator, bundle: PathBundle, n_jump: int, count: int, box: Mapping[str, Tuple[float, float]]
) -> Dict[str, np.ndarray]:
    T = bundle.grid.T
    t = rng.uniform(0.0, T, count)
    s = t + rng.uniform(0.0, 1.0, count) * (T - t)
    lo, hi = float(bundle.X.min()), float(bundle.X.max())
    if hi == lo:
        hi = lo + 1.0
    out = {"t": t, "s": s, "x": rng.uniform(lo, hi, count), "xt": rng.uniform(lo, hi, count)}
    for name in ("y", "z") + JUMP_FUNCTIONALS[:n_jump]:
        a, b = box.get(name, (-2.0, 2.0))
        out[name] = rng.uniform(a, b, count)
    return out


def _realized_points(surface: SolutionSurface, bundle: PathBundle, n_jump: int):
    """Yield (i, j, sel, y, z, u) at every cell for a subsample of paths."""
    N = bundle.grid.N
    sel = np.arange(min(REALIZED_PATHS, bundle.n_paths))
    for i in range(N):
        for j in range(i, N):
            z = surface.z_values(bundle, i, j)[sel]
            u = surface.u_values(bundle, i, j)[:, sel] if n_jump else np.zeros((0, sel.size))
            yield i, j, sel, surface.Y[j][sel], z, u


def _call(driver: Driver, pts: Mapping[str, np.ndarray], n_jump: int, y=None) -> np.ndarray:
    u = [pts[name] for name in JUMP_FUNCTIONALS[:n_jump]]
    value = driver(pts["t"], pts["s"], pts["y"] if y is None else y, pts["z"], u, pts["x"], pts["xt"])
    return np.broadcast_to(np.asarray(value, dtype=float), pts["t"].shape)


def _worst(margins: np.ndarray, pts: Mapping[str, np.ndarray]) -> Tuple[float, Dict[str, float]]:
    k = int(np.argmin(margins))
    return float(margins[k]), {name: float(v[k]) for name, v in pts.items()}


def check_hypotheses(
    inst: ComparisonInstance,
    surf1: SolutionSurface,
    surf2: SolutionSurface,
    bundle: PathBundle,
    sample_count: int = 500,
    seed: int = 0,
    box: Optional[Mapping[str, Tuple[float, float]]] = None,
) -> HypothesisReport:
    _check_orientation(inst, surf1, surf2)
    rng = np.random.default_rng(seed)
    box = dict(box or {})
    m = inst.driver1.n_jump
    nodes = bundle.grid.nodes
    verdicts: List[Verdict] = []

    # driver ordering on the box and at the realized second solution
    pts = _box_samples(rng, bundle, m, sample_count, box)
    margins = _call(inst.driver1, pts, m) - _call(inst.driver2, pts, m)
    worst, point = _worst(margins, pts)
    for i, j, sel, y, z, u in _realized_points(surf2, bundle, m):
        x, xt = bundle.X[j][sel], bundle.X[i][sel]
        diff = (evaluate_driver(inst.driver1, i, j, nodes, y, z, list(u), x, xt)
                - evaluate_driver(inst.driver2, i, j, nodes, y, z, list(u), x, xt))
        k = int(np.argmin(diff))
        if diff[k] < worst:
            worst = float(diff[k])
            point = {"t": float(nodes[i]), "s": float(nodes[j]), "y": float(y[k]), "z": float(z[k]), "path": int(sel[k])}
    verdicts.append(Verdict("driver_order", worst >= -ORDER_TOL, worst, point))

    # y-monotonicity of g1 (only meaningful in the +psi orientation)
    if inst.sign == 1 and inst.driver1.depends_on_y:
        pts = _box_samples(rng, bundle, m, sample_count, box)
        h = rng.uniform(0.0, 1.0, sample_count)
        margins = _call(inst.driver1, pts, m, y=pts["y"] + h) - _call(inst.driver1, pts, m)
        worst, point = _worst(margins, pts)
        verdicts.append(Verdict("y_monotonicity", worst >= -ORDER_TOL, worst, point))
    else:
        verdicts.append(Verdict("y_monotonicity", True, 0.0, detail="driver independent of y"))

    verdicts.append(_jump_verdict(inst, surf1, surf2, bundle))
    verdicts.append(_theta_verdict(inst, bundle))

    # terminal ordering, node-wise per path
    diff = inst.sign * (inst.terminal1.values(bundle) - inst.terminal2.values(bundle))
    k = np.unravel_index(int(np.argmin(diff)), diff.shape)
    worst = float(diff[k])
    verdicts.append(Verdict(
        "terminal_order", worst >= -ORDER_TOL, worst,
        {"t": float(nodes[k[0]]), "path": int(k[1])},
    ))
    report = HypothesisReport(verdicts)
    logger.info(f"Comparison hypotheses: {', '.join(f'{v.name}={v.passed}' for v in verdicts)}")
    return report


def _theta_weights(
    certificate: GirsanovCoefficients, weights, bundle: PathBundle, s: float, x: np.ndarray
) -> np.ndarray:
    """c[m, p] = int theta(s, x_p, zeta) w_m(zeta) nu(dzeta)."""
    nodes_z, w_q = bundle.jump.quadrature()
    shape = (x.size, nodes_z.size)
    theta = np.broadcast_to(np.asarray(certificate.theta(s, x[:, None], nodes_z[None, :]), dtype=float), shape)
    rows = []
    for w in weights:
        values = np.broadcast_to(np.asarray(w(nodes_z), dtype=float), nodes_z.shape)
        rows.append((theta * values) @ w_q)
    return np.array(rows)


def _jump_verdict(
    inst: ComparisonInstance, surf1: SolutionSurface, surf2: SolutionSurface, bundle: PathBundle
) -> Verdict:
    m = inst.driver1.n_jump
    uses_u = any(name in inst.driver1.free for name in JUMP_FUNCTIONALS)
    if not uses_u:
        return Verdict("jump_monotonicity", True, 0.0, detail="driver independent of jump functionals")
    if inst.certificate is None:
        return Verdict("jump_monotonicity", False, float("-inf"), detail="no theta certificate given")

    nodes = bundle.grid.nodes
    ginv = np.linalg.pinv(surf1.gram)
    weights = inst.driver1.weights
    worst, point = float("inf"), {}
    for (i, j, sel, y2, z2, u2), (_, _, _, _, _, u1) in zip(
        _realized_points(surf2, bundle, m), _realized_points(surf1, bundle, m)
    ):
        x, xt = bundle.X[j][sel], bundle.X[i][sel]
        lhs = (evaluate_driver(inst.driver1, i, j, nodes, y2, z2, list(u1), x, xt)
               - evaluate_driver(inst.driver1, i, j, nodes, y2, z2, list(u2), x, xt))
        # int theta (K1 - K2) dnu = c . G^{-1} (u1 - u2) with c_m = int theta w_m dnu
        c = _theta_weights(inst.certificate, weights, bundle, nodes[j], x)
        rhs = np.sum(c * (ginv @ (u1 - u2)), axis=0)
        margin = lhs - rhs
        k = int(np.argmin(margin))
        if margin[k] < worst:
            worst = float(margin[k])
            point = {"t": float(nodes[i]), "s": float(nodes[j]), "path": int(sel[k])}
    if worst == float("inf"):
        worst = 0.0
    return Verdict("jump_monotonicity", worst >= -1e-9, worst, point)


def _theta_verdict(inst: ComparisonInstance, bundle: PathBundle) -> Verdict:
    if inst.certificate is None:
        return Verdict("theta_bounds", True, 0.0, detail="no theta certificate given")
    try:
        audit = inst.certificate.audit(bundle)
    except CoefficientError as exc:
        return Verdict("theta_bounds", False, float("-inf"), detail=str(exc))
    margin = audit.min_theta + 1.0 - inst.certificate.epsilon
    checked = f"theta >= -1 + epsilon (epsilon = {inst.certificate.epsilon:g})"
    if inst.certificate.pi is None:
        detail = f"{checked}; Pi dominance not checked (no pi_expr given)"
    else:
        detail = f"{checked}; |theta| <= Pi (max ratio {audit.max_pi_ratio:.4g})"
    return Verdict("theta_bounds", True, margin, {"min_theta": audit.min_theta}, detail=detail)


def verify_ordering(surf1: SolutionSurface, surf2: SolutionSurface, tol_multiplier: float = 3.0) -> OrderingVerdict:
    """Y1 - Y2 >= -tol_multiplier * combined SE at every node."""
    if surf1.Y.shape != surf2.Y.shape:
        raise ValueError("Surfaces were solved on different grids or bundles")
    diff = surf1.Y.mean(axis=1) - surf2.Y.mean(axis=1)
    se = np.sqrt(surf1.y_stderr ** 2 + surf2.y_stderr ** 2)
    margin = diff + tol_multiplier * se
    violating = [int(i) for i in np.flatnonzero(margin < 0.0)]
    return OrderingVerdict(
        passed=not violating, differences=diff, stderr=se, violating_nodes=violating,
        worst_margin=float(margin.min()), tol_multiplier=tol_multiplier,
    )


@dataclass
class Linearization:
    """Difference quotients alpha(t_i, t_j) and beta(t_j) of g1 between two solutions."""

    alpha: np.ndarray
    beta: np.ndarray
    alpha_nonnegative: bool
    beta_range: Tuple[float, float]


def linearize(driver: Driver, surf1: SolutionSurface, surf2: SolutionSurface, bundle: PathBundle) -> Linearization:
    """Path means of the comparison difference quotients, zero where the increment vanishes."""
    N = bundle.grid.N
    nodes = bundle.grid.nodes
    m = driver.n_jump
    alpha = np.full((N + 1, N + 1), np.nan)
    beta = np.full((N + 1, N + 1), np.nan)
    alpha_min, beta_lo, beta_hi = np.inf, np.inf, -np.inf
    for i in range(N):
        for j in range(i, N):
            z1, z2 = surf1.z_values(bundle, i, j), surf2.z_values(bundle, i, j)
            u1 = list(surf1.u_values(bundle, i, j)) if m else []
            y1, y2 = surf1.Y[j], surf2.Y[j]
            x, xt = bundle.X[j], bundle.X[i]
            g_y1 = evaluate_driver(driver, i, j, nodes, y1, z1, u1, x, xt)
            g_y2 = evaluate_driver(driver, i, j, nodes, y2, z1, u1, x, xt)
            g_z2 = evaluate_driver(driver, i, j, nodes, y2, z2, u1, x, xt)
            dy, dz = y1 - y2, z1 - z2
            with np.errstate(divide="ignore", invalid="ignore"):
                a = np.where(dy != 0.0, (g_y1 - g_y2) / dy, 0.0)
                b = np.where(dz != 0.0, (g_y2 - g_z2) / dz, 0.0)
            alpha[i, j] = float(a.mean())
            beta[i, j] = float(b.mean())
            alpha_min = min(alpha_min, float(a.min()))
            beta_lo, beta_hi = min(beta_lo, float(b.min())), max(beta_hi, float(b.max()))
    if not np.isfinite(alpha_min):
        alpha_min, beta_lo, beta_hi = 0.0, 0.0, 0.0
    return Linearization(alpha=alpha, beta=beta, alpha_nonnegative=alpha_min >= -ORDER_TOL,
                         beta_range=(beta_lo, beta_hi))

"""One function per CLI command.

A workflow takes a validated scenario and an artifact writer, runs the
numerical services, writes its CSV/JSON artifacts, and returns a
WorkflowResult whose ``passed`` flag drives the verdict exit code.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from app.exceptions import CoefficientError
from app.models.scenario import ScenarioConfig
from app.services.artifacts import ArtifactWriter
from app.services.comparison import ComparisonInstance, check_hypotheses, linearize, verify_ordering
from app.services.dsl import BoundExpression
from app.services.engine import PathBundle, TimeGrid, simulate_paths
from app.services.linear import LinearBSVIE, solve_linear
from app.services.oracle import nested_mc_oracle
from app.services.resolvent import Kernel, resolvent
from app.services.risk import RiskSpec, axiom_suite
from app.services.scenario_loader import LoadedScenario
from app.services.semimartingale import (
    FactorizedTerminal, SemimartingaleResult, chebyshev_grid, decomposition_check, type1, type2, type3,
)
from app.services.solver import Driver, SolutionSurface, residual, solve
from app.services.terminal import TerminalProcess

logger = logging.getLogger("volterrisk")


@dataclass
class WorkflowResult:
    command: str
    passed: bool = True
    summary: List[str] = field(default_factory=list)
    artifacts: List[Path] = field(default_factory=list)


@dataclass
class RunContext:
    scenario: LoadedScenario
    writer: ArtifactWriter
    threads: Optional[int] = None

    @property
    def config(self) -> ScenarioConfig:
        return self.scenario.config

    @property
    def seed(self) -> int:
        return self.config.mc.seed

    def grid(self, N: Optional[int] = None) -> TimeGrid:
        g = self.config.grid
        return TimeGrid(T=g.T, N=g.N if N is None else N)

    def bundle(self, N: Optional[int] = None) -> PathBundle:
        cfg = self.config
        bundle = simulate_paths(self.grid(N), cfg.jumps.build(), cfg.diffusion.build(), cfg.mc.n_paths, cfg.mc.seed)
        if cfg.outputs.paths_csv and N is None:
            write_paths(self.writer, bundle)
        return bundle


def write_paths(writer: ArtifactWriter, bundle: PathBundle) -> Path:
    grid = bundle.grid
    nodes = grid.nodes

    def rows():
        for p in range(bundle.n_paths):
            for i in range(grid.N + 1):
                last = i == grid.N
                yield (
                    p, i, nodes[i],
                    None if last else bundle.dB[i, p],
                    bundle.X[i, p],
                    None if last else int(bundle.jump_counts[i, p]),
                )

    return writer.write_csv("paths.csv", ["path_id", "i", "t", "dB", "X", "jump_count"], rows())


def _checked_driver(driver: Driver, ctx: RunContext) -> Driver:
    probe = driver.probe(seed=ctx.seed)
    if not probe.passed:
        raise CoefficientError(
            f"Driver '{driver.source}' fails its Lipschitz probe: estimate {probe.estimate:.4g} "
            f"> declared C = {driver.lipschitz_C:g}{' (' + probe.failure + ')' if probe.failure else ''}"
        )
    jump = ctx.config.jumps.build()
    if jump.active:
        for source, w in zip(driver.weight_sources, driver.weights):
            jump.check_square_integrable(w, label=f"jump weight '{source}'")
    return driver


def _solve(ctx: RunContext, driver: Driver, psi: TerminalProcess, sign: int, bundle: PathBundle) -> SolutionSurface:
    s = ctx.config.solver
    return solve(driver, psi, sign, bundle, s.basis(), picard_tol=s.picard_tol, max_iter=s.max_iter,
                 threads=ctx.threads)


def _contraction_ratios(history: List[float]) -> List[float]:
    return [b / a for a, b in zip(history, history[1:]) if a > 0]


# ===== solve =====

def run_solve(ctx: RunContext) -> WorkflowResult:
    cfg = ctx.config
    driver = _checked_driver(cfg.driver.build(), ctx)
    psi = cfg.psi.build()
    sign = cfg.solver.sign
    bundle = ctx.bundle()
    surface = _solve(ctx, driver, psi, sign, bundle)
    res = residual(surface, driver, psi, bundle)
    norms = surface.norms(bundle)

    grid = bundle.grid
    nodes = grid.nodes
    m = driver.n_jump
    k_mean = surface.k_mean
    y_mean = surface.y_mean
    rows = []
    for i, j in grid.triangle():
        k = [k_mean[i, j, l] for l in range(m)]
        rows.append([i, j, nodes[i], nodes[j], y_mean[i], surface.z_mean[i, j]] + k)
    ctx.writer.write_csv("surface.csv", ["i", "j", "t", "s", "Y", "Z"] + [f"K_{l + 1}" for l in range(m)], rows)

    ctx.writer.write_json("convergence.json", {
        "driver": driver.source,
        "jump_weights": list(driver.weight_sources),
        "psi": psi.label,
        "sign": sign,
        "converged": True,
        "iterations": surface.iterations,
        "history": surface.history,
        "contraction_ratios": _contraction_ratios(surface.history),
        "picard_tol": cfg.solver.picard_tol,
        "max_iter": cfg.solver.max_iter,
        "basis_degree": cfg.solver.basis_degree,
        "norms": norms,
        "residual": res,
        "Y_mean": y_mean,
        "Y_stderr": surface.y_stderr,
    })
    return WorkflowResult("solve", True, [
        f"Y(0) = {y_mean[0]:.6g} +/- {surface.y_stderr[0]:.2g}",
        f"Picard iterations: {surface.iterations}",
        f"Norms: Y={norms['Y']:.4g} Z={norms['Z']:.4g} K={norms['K']:.4g}",
        f"Max row residual: {float(np.max(res)):.3e}",
    ])


# ===== solve-linear =====

def run_solve_linear(ctx: RunContext) -> WorkflowResult:
    cfg = ctx.config
    lin = cfg.linear
    terminal = (lin.psi or cfg.psi).build()
    prob = LinearBSVIE(
        alpha=BoundExpression.from_source(lin.alpha_expr, ("t", "s")),
        girsanov=lin.build(),
        terminal=terminal,
        sign=lin.sign,
        alpha_bound=lin.alpha_bound,
    )
    bundle = ctx.bundle()
    sol = solve_linear(prob, bundle, cfg.solver.basis(), tol=lin.tol, mode=lin.mode, threads=ctx.threads)
    nodes = bundle.grid.nodes
    mean = sol.mean
    ctx.writer.write_csv("linear.csv", ["t", "Y_mean", "stderr"],
                         [[nodes[i], mean[i], sol.stderr[i]] for i in range(len(nodes))])

    estimates = []
    for i, est in enumerate(sol.estimates):
        if est is None:
            continue
        estimates.append({
            "i": i,
            "t": nodes[i],
            "mean": est.mean,
            "stderr": est.stderr,
            "mode": est.mode,
            "numerator": est.numerator.as_dict(),
            "denominator": est.denominator.as_dict() if est.denominator is not None else None,
        })
    M_T = sol.density.terminal
    ctx.writer.write_json("linear_coefficients.json", {
        "alpha": lin.alpha_expr,
        "beta": lin.beta_expr,
        "theta": lin.theta_expr,
        "psi": terminal.label,
        "sign": lin.sign,
        "resolvent": None if sol.table is None else {
            "n_max": sol.table.n_max, "tail_bound": sol.table.tail_bound, "tol": sol.table.tol,
        },
        "density": {
            "terminal_mean": float(M_T.mean()),
            "terminal_stderr": float(M_T.std(ddof=1) / np.sqrt(M_T.size)),
            "min": float(sol.density.M.min()),
        },
        "nodes": estimates,
    })
    return WorkflowResult("solve-linear", True, [
        f"Y(0) = {mean[0]:.6g} +/- {sol.stderr[0]:.2g} ({lin.mode} denominator)",
        f"E[M(T)] = {float(M_T.mean()):.6g}",
    ])


# ===== kernel =====

def run_kernel(ctx: RunContext) -> WorkflowResult:
    k_cfg = ctx.config.kernel
    grid = ctx.grid()
    kernel = Kernel.from_expression(k_cfg.alpha_expr, grid, k_cfg.C)
    table = resolvent(kernel, k_cfg.tol)
    nodes = grid.nodes
    rows = [
        [nodes[i], nodes[j], table.values[i, j], table.n_max, table.tail_bound, table.majorant[i, j]]
        for i, j in grid.triangle()
    ]
    ctx.writer.write_csv("kernel.csv", ["t", "r", "phi", "n_max", "tail_bound", "majorant"], rows)
    return WorkflowResult("kernel", True, [
        f"Truncation order n_max = {table.n_max} (tail bound {table.tail_bound:.3e}, C = {kernel.C:.4g})",
        f"Phi(0, T) = {table.values[0, grid.N]:.8g}",
    ])


# ===== risk / axioms =====

def _risk_spec(ctx: RunContext) -> RiskSpec:
    r = ctx.config.risk
    spec = RiskSpec(driver=_checked_driver(r.driver.build(), ctx), position=r.position.build(), convex=r.convex)
    spec.validate(T=ctx.config.grid.T)
    return spec


def _rho_rows(nodes: np.ndarray, values: np.ndarray, stderr: np.ndarray):
    return [[nodes[i], values[i], stderr[i]] for i in range(len(nodes))]


def run_risk(ctx: RunContext) -> WorkflowResult:
    spec = _risk_spec(ctx)
    bundle = ctx.bundle()
    surface = solve(spec.driver, spec.position, -1, bundle, ctx.config.solver.basis(), threads=ctx.threads)
    nodes = bundle.grid.nodes
    ctx.writer.write_csv("risk.csv", ["t", "rho", "stderr"], _rho_rows(nodes, surface.y_mean, surface.y_stderr))
    ctx.writer.write_json("risk.json", {
        "driver": spec.driver.source,
        "position": spec.position.label,
        "rho": surface.y_mean,
        "stderr": surface.y_stderr,
    })
    return WorkflowResult("risk", True, [f"rho(0) = {surface.y_mean[0]:.6g} +/- {surface.y_stderr[0]:.2g}"])


def run_axioms(ctx: RunContext) -> WorkflowResult:
    r = ctx.config.risk
    spec = _risk_spec(ctx)
    bundle = ctx.bundle()
    pair = tuple(p.build() for p in r.pair) if r.pair is not None else None
    report = axiom_suite(
        spec, r.shift, r.lambdas, bundle, ctx.config.solver.basis(), pair=pair,
        t_index=r.t_index, tol_multiplier=r.tol_multiplier, threads=ctx.threads,
    )
    rows = report.rows()
    ctx.writer.write_csv("axioms.csv", ["axiom", "verdict", "worst_margin", "node", "stderr"],
                         [[row[k] for k in ("axiom", "verdict", "worst_margin", "node", "stderr")] for row in rows])
    ctx.writer.write_csv("risk.csv", ["t", "rho", "stderr"], _rho_rows(report.nodes, report.values, report.stderr))
    ctx.writer.write_json("axioms.json", {
        "driver": spec.driver.source,
        "position": spec.position.label,
        "passed": report.passed,
        "verdicts": [v.as_dict() for v in report.verdicts],
        "normalization": report.normalization,
        "shift": r.shift,
        "lambdas": r.lambdas,
    })
    summary = [f"{v.name}: {'pass' if v.passed else 'FAIL'} (worst margin {v.worst_margin:.3e})"
               for v in report.verdicts]
    return WorkflowResult("axioms", report.passed, summary)


# ===== compare =====

def run_compare(ctx: RunContext) -> WorkflowResult:
    c = ctx.config.compare
    d1 = _checked_driver(c.first.driver.build(), ctx)
    d2 = _checked_driver(c.second.driver.build(), ctx)
    p1, p2 = c.first.psi.build(), c.second.psi.build()
    certificate = c.certificate.build() if c.certificate is not None else None
    inst = ComparisonInstance(d1, p1, d2, p2, sign=c.sign, certificate=certificate)

    bundle = ctx.bundle()
    surf1 = _solve(ctx, d1, p1, c.sign, bundle)
    surf2 = _solve(ctx, d2, p2, c.sign, bundle)
    report = check_hypotheses(inst, surf1, surf2, bundle, sample_count=c.sample_count, seed=ctx.seed)
    ordering = verify_ordering(surf1, surf2, c.tol_multiplier)
    lin = linearize(d1, surf1, surf2, bundle)

    nodes = bundle.grid.nodes
    ctx.writer.write_csv("compare.csv", ["t", "Y1", "Y2", "difference", "combined_se"], [
        [nodes[i], surf1.y_mean[i], surf2.y_mean[i], ordering.differences[i], ordering.stderr[i]]
        for i in range(len(nodes))
    ])
    ctx.writer.write_json("compare.json", {
        "sign": c.sign,
        "first": {"driver": d1.source, "psi": p1.label},
        "second": {"driver": d2.source, "psi": p2.label},
        "hypotheses": [v.as_dict() for v in report.verdicts],
        "ordering": ordering.as_dict(),
        "linearization": {"alpha_nonnegative": lin.alpha_nonnegative, "beta_range": list(lin.beta_range)},
        "passed": report.passed and ordering.passed,
    })
    summary = [f"{v.name}: {'pass' if v.passed else 'FAIL'} (margin {v.worst_margin:.3e})" for v in report.verdicts]
    summary.append(
        f"ordering: {'pass' if ordering.passed else 'FAIL'} (violating nodes {ordering.violating_nodes or 'none'})"
    )
    return WorkflowResult("compare", report.passed and ordering.passed, summary)


# ===== semimartingale =====

def _construct(ctx: RunContext, bundle: PathBundle) -> SemimartingaleResult:
    s = ctx.config.semimartingale
    basis = ctx.config.solver.basis()
    tol = s.tol_multiplier
    if s.type == 1:
        F = FactorizedTerminal.from_expressions(s.f1_expr, s.f2_expr)
        return type1(F, bundle, basis, tol_multiplier=tol, threads=ctx.threads)
    F = BoundExpression.from_source(s.f_expr, ("x", "y"))
    x_grid = chebyshev_grid(bundle.X, s.x_grid_points)
    if s.type == 2:
        return type2(F, bundle, basis, x_grid=x_grid, tol_multiplier=tol, threads=ctx.threads)
    g = Driver.from_expressions(s.g_expr)
    return type3(F, g, bundle, basis, x_grid=x_grid, tol_multiplier=tol,
                 picard_tol=ctx.config.solver.picard_tol, max_iter=ctx.config.solver.max_iter, threads=ctx.threads)


def run_semimartingale(ctx: RunContext) -> WorkflowResult:
    s = ctx.config.semimartingale
    basis = ctx.config.solver.basis()
    bundle = ctx.bundle()
    result = _construct(ctx, bundle)

    levels = []
    for N in s.refinement:
        if N == bundle.grid.N:
            levels.append((result.Y, bundle))
        else:
            b = ctx.bundle(N)
            levels.append((_construct(ctx, b).Y, b))
    decomposition = decomposition_check(levels, basis)

    ctx.writer.write_csv("decomposition.csv", ["N", "dt", "residual", "drift_mean", "martingale_var"], [
        [n, ctx.config.grid.T / n, r, d, v]
        for n, r, d, v in zip(decomposition.steps, decomposition.residuals,
                              decomposition.drift_mean, decomposition.martingale_var)
    ])
    terminal_ok = result.terminal_error <= 1e-12
    passed = result.identity.passed and decomposition.passed and terminal_ok
    ctx.writer.write_json("identity.json", {
        "type": s.type,
        "identity": result.identity.as_dict(),
        "terminal_error": result.terminal_error,
        "terminal_consistent": terminal_ok,
        "extrapolated_fraction": result.extrapolated_fraction,
        "decomposition": decomposition.as_dict(),
        "passed": passed,
    })
    summary = [
        f"Type {s.type} identity: {'pass' if result.identity.passed else 'FAIL'} "
        f"(worst {result.identity.worst_ratio:.2f} SE at node {result.identity.worst_node})",
        f"Terminal consistency: {'pass' if terminal_ok else 'FAIL'} (max error {result.terminal_error:.2e})",
        f"Decomposition: {'pass' if decomposition.passed else 'FAIL'}"
        + (f" (slope {decomposition.slope:.3f})" if decomposition.slope is not None else " (exact)"),
    ]
    if result.extrapolated_fraction > 0:
        summary.append(f"Extrapolated fraction: {100 * result.extrapolated_fraction:.2f}%")
    return WorkflowResult("semimartingale", passed, summary)


# ===== oracle =====

def run_oracle(ctx: RunContext) -> WorkflowResult:
    cfg = ctx.config
    o = cfg.oracle
    driver = _checked_driver(cfg.driver.build(), ctx)
    psi = cfg.psi.build()
    sign = cfg.solver.sign
    grid = ctx.grid(o.N)
    est = nested_mc_oracle(driver, psi, sign, grid, cfg.jumps.build(), cfg.diffusion.build(),
                           o.branching, ctx.seed, replications=o.replications)
    payload: Dict[str, object] = {
        "driver": driver.source,
        "psi": psi.label,
        "sign": sign,
        "N": grid.N,
        "branching": est.branching,
        "replications": est.replications,
        "leaves_per_tree": est.leaves,
        "oracle": {"value": est.value, "stderr": est.stderr},
    }
    summary = [f"Oracle Y(0) = {est.value:.6g} +/- {est.stderr:.2g} ({est.replications} trees)"]
    passed = True
    if o.compare_solver:
        bundle = ctx.bundle(grid.N)
        surface = _solve(ctx, driver, psi, sign, bundle)
        gap = abs(float(surface.y_mean[0]) - est.value)
        combined = float(np.sqrt(est.stderr ** 2 + surface.y_stderr[0] ** 2))
        passed = gap <= 3.0 * combined + 1e-12
        payload["solver"] = {"value": surface.y_mean[0], "stderr": surface.y_stderr[0],
                             "gap": gap, "combined_se": combined, "passed": passed}
        summary.append(f"Solver Y(0) = {surface.y_mean[0]:.6g}; gap {gap:.3g} vs 3 SE {3 * combined:.3g}")
    ctx.writer.write_json("oracle.json", payload)
    return WorkflowResult("oracle", passed, summary)


# ===== simulate =====

def run_simulate(ctx: RunContext) -> WorkflowResult:
    cfg = ctx.config
    bundle = simulate_paths(ctx.grid(), cfg.jumps.build(), cfg.diffusion.build(), cfg.mc.n_paths, cfg.mc.seed)
    write_paths(ctx.writer, bundle)
    return WorkflowResult("simulate", True, [
        f"Simulated {bundle.n_paths} paths on N={bundle.grid.N} "
        f"({int(bundle.jump_counts.sum())} jumps); mean X(T) = {float(bundle.X[-1].mean()):.6g}",
    ])


WORKFLOWS: Dict[str, Callable[[RunContext], WorkflowResult]] = {
    "solve": run_solve,
    "solve-linear": run_solve_linear,
    "kernel": run_kernel,
    "risk": run_risk,
    "axioms": run_axioms,
    "compare": run_compare,
    "semimartingale": run_semimartingale,
    "oracle": run_oracle,
    "simulate": run_simulate,
}


def run_workflow(command: str, ctx: RunContext) -> WorkflowResult:
    result = WORKFLOWS[command](ctx)
    result.artifacts = list(ctx.writer.written)
    return result

"""Scenario file schema.

Every section is a pydantic model with ``extra="forbid"``. Expressions are
parsed at validation time against the variables their role allows, so a
scenario with a bad expression never reaches the simulator.
"""

from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.exceptions import DslError, ScenarioError
from app.services.dsl import JUMP_FUNCTIONALS, parse
from app.services.engine import DiffusionModel, JumpModel, TimeGrid
from app.services.girsanov import GirsanovCoefficients
from app.services.regression import RegressionBasis
from app.services.solver import DRIVER_BASE_VARIABLES, Driver
from app.services.terminal import TerminalProcess, terminal_from_config

SCHEMA_VERSION = 1

TERMINAL_VARIABLES = ("t", "x", "xt")
STATE_VARIABLES = ("s", "x")
THETA_VARIABLES = ("s", "x", "zeta")
MARK_VARIABLES = ("zeta",)
KERNEL_VARIABLES = ("t", "s")
PAIR_VARIABLES = ("x", "y")
FACTOR_VARIABLES = ("x",)
TYPE3_VARIABLES = ("s", "xt", "x", "y")


def _check_expression(value, allowed: Sequence[str]) -> str:
    text = str(value)
    try:
        parse(text, allowed=allowed)
    except DslError as exc:
        raise ValueError(str(exc)) from exc
    return text


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


# ===== Simulation =====

class GridSection(Section):
    T: float = Field(gt=0)
    N: int = Field(ge=1)

    def build(self) -> TimeGrid:
        return TimeGrid(T=self.T, N=self.N)


class JumpSection(Section):
    intensity: float = Field(default=0.0, ge=0, alias="lambda")
    mark_dist: Literal["normal", "lognormal", "point"] = "point"
    params: Dict[str, float] = Field(default_factory=lambda: {"value": 1.0})

    def build(self) -> JumpModel:
        return JumpModel(intensity=self.intensity, mark_dist=self.mark_dist, params=dict(self.params))


class DiffusionSection(Section):
    x0: float = 0.0
    b_expr: str = "0"
    sigma_expr: str = "1"

    @field_validator("b_expr", "sigma_expr", mode="before")
    @classmethod
    def _expression(cls, v):
        return _check_expression(v, STATE_VARIABLES)

    def build(self) -> DiffusionModel:
        return DiffusionModel.from_expressions(self.x0, self.b_expr, self.sigma_expr)


class MonteCarloSection(Section):
    n_paths: int = Field(default=10_000, ge=2)
    seed: int = Field(default=0, ge=0)


# ===== Problem pieces =====

class PsiSection(Section):
    kind: Literal["deterministic", "markov", "path_functional"] = "markov"
    expr: str = "x"
    functional: Optional[Literal["running_max", "running_min", "time_average", "jump_sum"]] = None

    @field_validator("expr", mode="before")
    @classmethod
    def _expression(cls, v):
        return _check_expression(v, TERMINAL_VARIABLES)

    @model_validator(mode="after")
    def _functional_only_for_paths(self):
        if self.functional is not None and self.kind != "path_functional":
            raise ValueError("'functional' is only valid with kind 'path_functional'")
        if self.kind == "deterministic":
            _check_expression(self.expr, ("t",))
        return self

    def build(self) -> TerminalProcess:
        return terminal_from_config(self.kind, self.expr, self.functional)


class DriverSection(Section):
    g_expr: str = "0"
    jump_weights: List[str] = Field(default_factory=list, max_length=len(JUMP_FUNCTIONALS))
    lipschitz_C: float = Field(default=1.0, ge=0)

    @field_validator("jump_weights", mode="before")
    @classmethod
    def _weights(cls, v):
        return [_check_expression(w, MARK_VARIABLES) for w in (v or [])]

    @model_validator(mode="after")
    def _driver_expression(self):
        allowed = DRIVER_BASE_VARIABLES + JUMP_FUNCTIONALS[: len(self.jump_weights)]
        _check_expression(self.g_expr, allowed)
        return self

    def build(self) -> Driver:
        return Driver.from_expressions(self.g_expr, self.jump_weights, self.lipschitz_C)


class SolverSection(Section):
    basis_degree: int = Field(default=3, ge=0, le=8)
    picard_tol: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=50, ge=1)
    sign: Literal[1, -1] = 1

    def basis(self) -> RegressionBasis:
        return RegressionBasis(degree=self.basis_degree)


class CertificateSection(Section):
    beta_expr: str = "0"
    theta_expr: str = "0"
    epsilon: float = Field(default=0.01, gt=0)
    pi_expr: Optional[str] = None
    beta_bound: Optional[float] = Field(default=None, ge=0)

    @field_validator("beta_expr", mode="before")
    @classmethod
    def _beta(cls, v):
        return _check_expression(v, STATE_VARIABLES)

    @field_validator("theta_expr", mode="before")
    @classmethod
    def _theta(cls, v):
        return _check_expression(v, THETA_VARIABLES)

    @field_validator("pi_expr", mode="before")
    @classmethod
    def _pi(cls, v):
        return None if v is None else _check_expression(v, MARK_VARIABLES)

    def build(self) -> GirsanovCoefficients:
        return GirsanovCoefficients.from_expressions(
            self.beta_expr, self.theta_expr, self.epsilon, self.pi_expr, self.beta_bound
        )


class LinearSection(CertificateSection):
    alpha_expr: str = "0"
    alpha_bound: Optional[float] = Field(default=None, ge=0)
    psi: Optional[PsiSection] = None
    sign: Literal[1, -1] = 1
    tol: float = Field(default=1e-6, gt=0)
    mode: Literal["simulated", "estimated"] = "simulated"

    @field_validator("alpha_expr", mode="before")
    @classmethod
    def _alpha(cls, v):
        return _check_expression(v, KERNEL_VARIABLES)


class KernelSection(Section):
    alpha_expr: str = "1"
    C: Optional[float] = Field(default=None, ge=0)
    tol: float = Field(default=1e-6, gt=0)

    @field_validator("alpha_expr", mode="before")
    @classmethod
    def _alpha(cls, v):
        return _check_expression(v, KERNEL_VARIABLES)


class RiskSection(Section):
    driver: DriverSection
    position: PsiSection
    convex: bool = True
    shift: float = 1.0
    lambdas: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    pair: Optional[Tuple[PsiSection, PsiSection]] = None
    t_index: Optional[int] = Field(default=None, ge=1)
    tol_multiplier: float = Field(default=3.0, gt=0)

    @field_validator("lambdas")
    @classmethod
    def _unit_interval(cls, v):
        bad = [lam for lam in v if not 0.0 <= lam <= 1.0]
        if bad:
            raise ValueError(f"lambdas must lie in [0, 1], got {bad}")
        return v


class ProblemSection(Section):
    driver: DriverSection = Field(default_factory=DriverSection)
    psi: PsiSection


class CompareSection(Section):
    first: ProblemSection
    second: ProblemSection
    sign: Literal[1, -1] = 1
    certificate: Optional[CertificateSection] = None
    sample_count: int = Field(default=500, ge=1)
    tol_multiplier: float = Field(default=3.0, gt=0)


class SemimartingaleSection(Section):
    type: Literal[1, 2, 3] = 1
    f1_expr: str = "x"
    f2_expr: str = "x"
    f_expr: str = "x * y"
    g_expr: str = "0"
    x_grid_points: int = Field(default=21, ge=4)
    refinement: List[int] = Field(default_factory=lambda: [16, 32, 64], min_length=1)
    tol_multiplier: float = Field(default=3.0, gt=0)

    @field_validator("f1_expr", "f2_expr", mode="before")
    @classmethod
    def _factor(cls, v):
        return _check_expression(v, FACTOR_VARIABLES)

    @field_validator("f_expr", mode="before")
    @classmethod
    def _pair(cls, v):
        return _check_expression(v, PAIR_VARIABLES)

    @field_validator("g_expr", mode="before")
    @classmethod
    def _type3_driver(cls, v):
        return _check_expression(v, TYPE3_VARIABLES)

    @field_validator("refinement")
    @classmethod
    def _steps(cls, v):
        if any(n < 1 for n in v):
            raise ValueError("refinement step counts must be >= 1")
        return sorted(set(v))


class OracleSection(Section):
    N: Optional[int] = Field(default=None, ge=1, le=4)
    branching: int = Field(default=4, ge=2)
    replications: int = Field(default=20, ge=2)
    compare_solver: bool = True


class OutputSection(Section):
    dir: Optional[str] = None
    paths_csv: bool = False


# ===== Scenario =====

COMMAND_SECTIONS: Dict[str, Tuple[str, ...]] = {
    "solve": ("grid", "diffusion", "driver", "psi"),
    "solve-linear": ("grid", "diffusion", "linear"),
    "kernel": ("grid", "kernel"),
    "risk": ("grid", "diffusion", "risk"),
    "axioms": ("grid", "diffusion", "risk"),
    "compare": ("grid", "diffusion", "compare"),
    "semimartingale": ("grid", "diffusion", "semimartingale"),
    "oracle": ("grid", "diffusion", "driver", "psi", "oracle"),
    "simulate": ("grid", "diffusion"),
}


class ScenarioConfig(Section):
    schema_version: Literal[1]
    name: str = "scenario"
    grid: Optional[GridSection] = None
    jumps: JumpSection = Field(default_factory=JumpSection)
    diffusion: Optional[DiffusionSection] = None
    mc: MonteCarloSection = Field(default_factory=MonteCarloSection)
    driver: Optional[DriverSection] = None
    psi: Optional[PsiSection] = None
    solver: SolverSection = Field(default_factory=SolverSection)
    linear: Optional[LinearSection] = None
    kernel: Optional[KernelSection] = None
    risk: Optional[RiskSection] = None
    compare: Optional[CompareSection] = None
    semimartingale: Optional[SemimartingaleSection] = None
    oracle: Optional[OracleSection] = None
    outputs: OutputSection = Field(default_factory=OutputSection)

    def require(self, command: str) -> "ScenarioConfig":
        """Raise ScenarioError listing every section ``command`` needs but the file lacks."""
        if command not in COMMAND_SECTIONS:
            raise ScenarioError([f"unknown command '{command}'"])
        problems = [
            f"missing section '{name}' (required by {command})"
            for name in COMMAND_SECTIONS[command]
            if getattr(self, name) is None
        ]
        if command == "solve-linear" and self.linear is not None and self.linear.psi is None and self.psi is None:
            problems.append("missing section 'psi' (required by solve-linear unless linear.psi is given)")
        if command == "semimartingale" and self.jumps.intensity > 0:
            problems.append("jumps.lambda must be 0 for semimartingale constructions")
        if problems:
            raise ScenarioError(problems)
        return self

    def canonical(self) -> dict:
        """JSON-ready dump used for the config hash; the output location is not part of it."""
        return self.model_dump(mode="json", by_alias=True, exclude={"outputs"})

"""Exception hierarchy shared by every service."""

from typing import Iterable, List, Optional, Sequence


class VolterriskError(Exception):
    """Base class for all library errors."""


class DslError(VolterriskError):
    pass


class DslSyntaxError(DslError):
    def __init__(self, message: str, offset: int, expected: Iterable[str] = ()):
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        detail = f" (expected one of: {', '.join(self.expected)})" if self.expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class UnknownVariableError(DslError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"Unknown identifier '{name}' at offset {offset}")


class UnboundVariableError(DslError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"Variable '{name}' is not bound")


class DomainError(DslError):
    """Guarded arithmetic hit an invalid argument (log of non-positive, x/0, ...)."""


class EvaluationError(VolterriskError):
    def __init__(self, message: str, node: Optional[int] = None, path: Optional[int] = None):
        self.node = node
        self.path = path
        where = ""
        if node is not None:
            where = f" at node i={node}" + (f", path p={path}" if path is not None else "")
        super().__init__(f"{message}{where}")


class CoefficientError(VolterriskError):
    pass


class IllConditionedBasisError(VolterriskError):
    def __init__(self, condition_number: float, limit: float):
        self.condition_number = condition_number
        self.limit = limit
        super().__init__(
            f"Regression design matrix is ill-conditioned "
            f"(condition number {condition_number:.3e} > {limit:.1e})"
        )


class CapacityError(VolterriskError):
    def __init__(self, message: str, required: float):
        self.required = required
        super().__init__(message)


class DivergenceError(VolterriskError):
    def __init__(self, message: str, history: Sequence[float]):
        self.history: List[float] = list(history)
        super().__init__(message)


class ScenarioError(VolterriskError):
    def __init__(self, problems: Sequence[str]):
        self.problems: List[str] = list(problems)
        super().__init__("Invalid scenario: " + "; ".join(self.problems))

"""Terminal processes psi(t), evaluated on a bundle as an (N + 1, n_paths) table.

Three kinds are supported:

- ``deterministic``: psi(t) = f(t).
- ``markov``: psi(t) = f(t, X(T), X(t)); the expression uses ``x`` for X(T)
  and ``xt`` for X(t).
- ``path_functional``: psi(t) = f(t, A(T), X(t)) where A is a named running
  statistic of the path (see ``PATH_FUNCTIONALS``) and ``x`` denotes A(T).
  The statistic's value A(t_j) is carried as extra regression state.
"""

from dataclasses import dataclass, replace
from typing import Callable, Dict, Optional

import numpy as np

from app.exceptions import DomainError, EvaluationError
from app.services.dsl import BoundExpression
from app.services.engine import PathBundle

TERMINAL_KINDS = ("deterministic", "markov", "path_functional")


def _running_max(bundle: PathBundle) -> np.ndarray:
    return np.maximum.accumulate(bundle.X, axis=0)


def _running_min(bundle: PathBundle) -> np.ndarray:
    return np.minimum.accumulate(bundle.X, axis=0)


def _time_average(bundle: PathBundle) -> np.ndarray:
    # left-point average of X over [0, t_j]; A(0) = X(0)
    csum = np.cumsum(bundle.X[:-1], axis=0)
    steps = np.arange(1, bundle.grid.N + 1)[:, None]
    return np.vstack([bundle.X[:1], csum / steps])


def _jump_sum(bundle: PathBundle) -> np.ndarray:
    per_step = bundle.jump_sums(lambda z: z)
    return np.vstack([np.zeros((1, bundle.n_paths)), np.cumsum(per_step, axis=0)])


PATH_FUNCTIONALS: Dict[str, Callable[[PathBundle], np.ndarray]] = {
    "running_max": _running_max,
    "running_min": _running_min,
    "time_average": _time_average,
    "jump_sum": _jump_sum,
}


Evaluator = Callable[[PathBundle], np.ndarray]
StateFn = Callable[[PathBundle, int], np.ndarray]


@dataclass(frozen=True)
class TerminalProcess:
    kind: str
    evaluator: Evaluator
    uses_xt: bool = False
    extra_state: Optional[StateFn] = None
    label: str = ""

    @property
    def is_deterministic(self) -> bool:
        return self.kind == "deterministic"

    def values(self, bundle: PathBundle) -> np.ndarray:
        shape = (bundle.grid.N + 1, bundle.n_paths)
        try:
            table = np.broadcast_to(np.asarray(self.evaluator(bundle), dtype=float), shape)
        except DomainError as exc:
            raise EvaluationError(f"Terminal '{self.label}' failed: {exc}") from exc
        if not np.all(np.isfinite(table)):
            bad = np.argwhere(~np.isfinite(table))[0]
            raise EvaluationError(f"Terminal '{self.label}' is not finite", node=int(bad[0]), path=int(bad[1]))
        return table

    def state_columns(self, bundle: PathBundle, j: int) -> Optional[np.ndarray]:
        if self.extra_state is None:
            return None
        cols = np.asarray(self.extra_state(bundle, j), dtype=float)
        return cols[:, None] if cols.ndim == 1 else cols

    # ----- constructors -----

    @classmethod
    def deterministic(cls, expr: str) -> "TerminalProcess":
        f = BoundExpression.from_source(expr, ("t",))

        def evaluate(bundle: PathBundle) -> np.ndarray:
            nodes = bundle.grid.nodes
            column = np.broadcast_to(np.asarray(f(nodes), dtype=float), nodes.shape)
            return column[:, None] * np.ones(bundle.n_paths)

        return cls("deterministic", evaluate, label=str(expr))

    @classmethod
    def markov(cls, expr: str) -> "TerminalProcess":
        f = BoundExpression.from_source(expr, ("t", "x", "xt"))
        if not f.free & {"x", "xt"}:
            return cls.deterministic(expr)

        def evaluate(bundle: PathBundle) -> np.ndarray:
            return f(bundle.grid.nodes[:, None], bundle.X[-1][None, :], bundle.X)

        return cls("markov", evaluate, uses_xt="xt" in f.free, label=str(expr))

    @classmethod
    def path_functional(cls, functional: str, expr: str = "x") -> "TerminalProcess":
        if functional not in PATH_FUNCTIONALS:
            raise ValueError(f"Unknown path functional '{functional}'")
        stat = PATH_FUNCTIONALS[functional]
        f = BoundExpression.from_source(expr, ("t", "x", "xt"))

        def evaluate(bundle: PathBundle) -> np.ndarray:
            return f(bundle.grid.nodes[:, None], stat(bundle)[-1][None, :], bundle.X)

        def extra(bundle: PathBundle, j: int) -> np.ndarray:
            return stat(bundle)[j]

        return cls("path_functional", evaluate, uses_xt="xt" in f.free, extra_state=extra,
                   label=f"{functional}:{expr}")

    @classmethod
    def from_pair_function(cls, F: Callable, label: str = "F(X(t), X(T))") -> "TerminalProcess":
        """psi(t) = F(X(t), X(T))."""
        def evaluate(bundle: PathBundle) -> np.ndarray:
            return F(bundle.X, bundle.X[-1][None, :])

        return cls("markov", evaluate, uses_xt=True, label=label)

    # ----- algebra used by the axiom suite -----

    def _combined_state(self, other: "TerminalProcess") -> Optional[StateFn]:
        fns = [f for f in (self.extra_state, other.extra_state) if f is not None]
        if not fns:
            return None
        if len(fns) == 1:
            return fns[0]

        def both(bundle: PathBundle, j: int) -> np.ndarray:
            return np.column_stack([np.asarray(f(bundle, j), dtype=float) for f in fns])

        return both

    def _merge(self, other: "TerminalProcess", op: Callable, label: str) -> "TerminalProcess":
        kind = "deterministic" if self.is_deterministic and other.is_deterministic else (
            "path_functional" if "path_functional" in (self.kind, other.kind) else "markov"
        )
        return TerminalProcess(
            kind=kind,
            evaluator=lambda b: op(self.values(b), other.values(b)),
            uses_xt=self.uses_xt or other.uses_xt,
            extra_state=self._combined_state(other),
            label=label,
        )

    def translated(self, a: float) -> "TerminalProcess":
        return replace(self, evaluator=lambda b: self.values(b) + a, label=f"({self.label}) + {a}")

    def scaled(self, k: float) -> "TerminalProcess":
        return replace(self, evaluator=lambda b: k * self.values(b), label=f"{k} * ({self.label})")

    def perturbed_before(self, t_index: int, amount: float) -> "TerminalProcess":
        """psi(t) + amount for t < t_{t_index}; unchanged on [t_{t_index}, T]."""
        def evaluate(b: PathBundle) -> np.ndarray:
            table = np.array(self.values(b))
            table[:t_index] += amount
            return table

        return replace(self, evaluator=evaluate, label=f"({self.label}) + {amount}*1[t<t_{t_index}]")

    def mixture(self, other: "TerminalProcess", lam: float) -> "TerminalProcess":
        return self._merge(other, lambda a, b: lam * a + (1.0 - lam) * b,
                           f"{lam}*({self.label}) + {1.0 - lam}*({other.label})")

    def pathwise_min(self, other: "TerminalProcess") -> "TerminalProcess":
        return self._merge(other, np.minimum, f"min({self.label}, {other.label})")

    def pathwise_max(self, other: "TerminalProcess") -> "TerminalProcess":
        return self._merge(other, np.maximum, f"max({self.label}, {other.label})")


def terminal_from_config(kind: str, expr: str, functional: Optional[str] = None) -> TerminalProcess:
    if kind == "deterministic":
        return TerminalProcess.deterministic(expr)
    if kind == "markov":
        return TerminalProcess.markov(expr)
    if kind == "path_functional":
        return TerminalProcess.path_functional(functional or "running_max", expr)
    raise ValueError(f"Unknown terminal kind '{kind}'")

"""Expression language for drivers, coefficients and terminal functions.

Scenario files carry every model function as a string such as
``"0.5*abs(z) + 0.2*u1"``. This module tokenizes and parses those strings
into an immutable AST (a Pratt parser with binding powers), evaluates the
AST on numpy arrays with guarded arithmetic, prints it back to text and
audits declared Lipschitz constants by sampling.

Precedence, loosest to tightest: ``+ -``, ``* /``, unary ``-``, ``^``.
Binary operators associate to the left except ``^``, which associates to
the right. The grammar is documented in ``docs/dsl_grammar.md``.
"""

import re
from dataclasses import dataclass, field
from typing import Collection, Dict, FrozenSet, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.exceptions import (
    DomainError,
    DslSyntaxError,
    UnboundVariableError,
    UnknownVariableError,
)

JUMP_FUNCTIONALS = tuple(f"u{k}" for k in range(1, 10))
VARIABLES: FrozenSet[str] = frozenset(("t", "s", "y", "z", "x", "xt", "zeta") + JUMP_FUNCTIONALS)
# Coordinates the Lipschitz condition is stated in
LIPSCHITZ_VARIABLES: Tuple[str, ...] = ("y", "z") + JUMP_FUNCTIONALS
FUNCTIONS: Dict[str, int] = {
    "abs": 1, "exp": 1, "log": 1, "sqrt": 1, "indicator": 1, "max": 2, "min": 2,
}

Value = Union[float, np.ndarray]


# ===== AST =====

class Expression:
    """Base class of all AST nodes. Nodes are immutable and hashable."""

    def children(self) -> Tuple["Expression", ...]:
        return ()


@dataclass(frozen=True, repr=False)
class Num(Expression):
    value: float

    def __repr__(self) -> str:
        return _format_number(self.value)


@dataclass(frozen=True, repr=False)
class Var(Expression):
    name: str

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True, repr=False)
class Unary(Expression):
    operand: Expression

    def children(self):
        return (self.operand,)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.operand!r})"


@dataclass(frozen=True, repr=False)
class Binary(Expression):
    left: Expression
    right: Expression

    def children(self):
        return (self.left, self.right)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.left!r}, {self.right!r})"


class Neg(Unary):
    pass


class Abs(Unary):
    pass


class Exp(Unary):
    pass


class Log(Unary):
    pass


class Sqrt(Unary):
    pass


class Indicator(Unary):
    pass


class Add(Binary):
    pass


class Sub(Binary):
    pass


class Mul(Binary):
    pass


class Div(Binary):
    pass


class Pow(Binary):
    pass


class Max(Binary):
    pass


class Min(Binary):
    pass


_INFIX = {"+": Add, "-": Sub, "*": Mul, "/": Div, "^": Pow}
_INFIX_SYMBOL = {cls: sym for sym, cls in _INFIX.items()}
_CALLS = {"abs": Abs, "exp": Exp, "log": Log, "sqrt": Sqrt, "indicator": Indicator, "max": Max, "min": Min}
_CALL_NAME = {cls: name for name, cls in _CALLS.items()}

# Binding powers
_LBP = {"+": 10, "-": 10, "*": 20, "/": 20, "^": 40}
_UNARY_MINUS_BP = 30


def _format_number(value: float) -> str:
    if float(value).is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(float(value))


# ===== Tokenizer =====

_TOKEN_RE = re.compile(
    r"\s*(?:"
    r"(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<symbol>\S)"
    r")"
)
_SYMBOLS = set("+-*/^(),")


@dataclass(frozen=True)
class Token:
    kind: str  # number | ident | symbol | end
    text: str
    offset: int


def tokenize(text: str) -> Iterator[Token]:
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            break
        kind = m.lastgroup
        if kind is None:
            break
        token_text = m.group(kind)
        offset = m.start(kind)
        if kind == "symbol" and token_text not in _SYMBOLS:
            raise DslSyntaxError(f"Unexpected character '{token_text}'", offset, _PREFIX_EXPECTED)
        yield Token(kind, token_text, offset)
        pos = m.end()
    yield Token("end", "", len(text))


_PREFIX_EXPECTED = ("number", "identifier", "(", "-")
_INFIX_EXPECTED = ("+", "-", "*", "/", "^", "end of input")


# ===== Parser =====

class _Parser:
    def __init__(self, text: str, allowed: Optional[Collection[str]]):
        self.tokens: List[Token] = list(tokenize(text))
        self.pos = 0
        self.allowed = VARIABLES if allowed is None else frozenset(allowed)

    @property
    def token(self) -> Token:
        return self.tokens[self.pos]

    def advance(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "end":
            self.pos += 1
        return tok

    def expect(self, symbol: str) -> Token:
        tok = self.token
        if tok.kind != "symbol" or tok.text != symbol:
            what = "end of input" if tok.kind == "end" else f"'{tok.text}'"
            raise DslSyntaxError(f"Unexpected {what}", tok.offset, (symbol,))
        return self.advance()

    def lbp(self, tok: Token) -> int:
        if tok.kind == "symbol":
            return _LBP.get(tok.text, 0)
        return 0

    def expression(self, rbp: int = 0) -> Expression:
        left = self.nud(self.advance())
        while rbp < self.lbp(self.token):
            left = self.led(self.advance(), left)
        return left

    def nud(self, tok: Token) -> Expression:
        if tok.kind == "number":
            return Num(float(tok.text))
        if tok.kind == "ident":
            if tok.text in FUNCTIONS:
                return self.call(tok)
            if tok.text not in VARIABLES or tok.text not in self.allowed:
                raise UnknownVariableError(tok.text, tok.offset)
            return Var(tok.text)
        if tok.kind == "symbol" and tok.text == "-":
            return Neg(self.expression(_UNARY_MINUS_BP))
        if tok.kind == "symbol" and tok.text == "(":
            inner = self.expression()
            self.expect(")")
            return inner
        what = "end of input" if tok.kind == "end" else f"'{tok.text}'"
        raise DslSyntaxError(f"Unexpected {what}", tok.offset, _PREFIX_EXPECTED)

    def led(self, tok: Token, left: Expression) -> Expression:
        cls = _INFIX[tok.text]
        # ^ is right-associative
        rbp = _LBP[tok.text] - 1 if tok.text == "^" else _LBP[tok.text]
        return cls(left, self.expression(rbp))

    def call(self, tok: Token) -> Expression:
        self.expect("(")
        args = [self.expression()]
        while self.token.kind == "symbol" and self.token.text == ",":
            self.advance()
            args.append(self.expression())
        self.expect(")")
        arity = FUNCTIONS[tok.text]
        if len(args) != arity:
            raise DslSyntaxError(
                f"Function '{tok.text}' takes {arity} argument(s), got {len(args)}",
                tok.offset,
            )
        return _CALLS[tok.text](*args)

    def parse(self) -> Expression:
        if self.token.kind == "end":
            raise DslSyntaxError("Empty expression", 0, _PREFIX_EXPECTED)
        tree = self.expression()
        if self.token.kind != "end":
            tok = self.token
            raise DslSyntaxError(f"Unexpected '{tok.text}'", tok.offset, _INFIX_EXPECTED)
        return tree


def parse(text: str, allowed: Optional[Collection[str]] = None) -> Expression:
    """Parse ``text`` into an AST.

    ``allowed`` restricts the variables the expression may reference; any
    other identifier raises ``UnknownVariableError`` with its offset.
    """
    return _Parser(text, allowed).parse()


# ===== Printing =====

def unparse(expr: Expression) -> str:
    """Print an AST back to source text (fully parenthesized)."""
    if isinstance(expr, Num):
        return _format_number(expr.value)
    if isinstance(expr, Var):
        return expr.name
    if isinstance(expr, Neg):
        return f"(-{unparse(expr.operand)})"
    if isinstance(expr, Unary):
        return f"{_CALL_NAME[type(expr)]}({unparse(expr.operand)})"
    if isinstance(expr, (Max, Min)):
        return f"{_CALL_NAME[type(expr)]}({unparse(expr.left)}, {unparse(expr.right)})"
    if isinstance(expr, Binary):
        return f"({unparse(expr.left)} {_INFIX_SYMBOL[type(expr)]} {unparse(expr.right)})"
    raise TypeError(f"Not an expression node: {expr!r}")


def free_variables(expr: Expression) -> FrozenSet[str]:
    if isinstance(expr, Var):
        return frozenset((expr.name,))
    names: FrozenSet[str] = frozenset()
    for child in expr.children():
        names |= free_variables(child)
    return names


# ===== Evaluation =====

def _finite(result: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(result)):
        raise DomainError(f"{what} produced a non-finite value")
    return result


def _eval(expr: Expression, env: Mapping[str, Value]) -> np.ndarray:
    if isinstance(expr, Num):
        return np.asarray(expr.value, dtype=float)
    if isinstance(expr, Var):
        try:
            return np.asarray(env[expr.name], dtype=float)
        except KeyError:
            raise UnboundVariableError(expr.name) from None

    if isinstance(expr, Unary):
        a = _eval(expr.operand, env)
        if isinstance(expr, Neg):
            return -a
        if isinstance(expr, Abs):
            return np.abs(a)
        if isinstance(expr, Indicator):
            return np.where(a >= 0.0, 1.0, 0.0)
        if isinstance(expr, Exp):
            with np.errstate(over="ignore"):
                return _finite(np.exp(a), "exp")
        if isinstance(expr, Log):
            if np.any(a <= 0.0):
                raise DomainError("log of a non-positive argument")
            return np.log(a)
        if isinstance(expr, Sqrt):
            if np.any(a < 0.0):
                raise DomainError("sqrt of a negative argument")
            return np.sqrt(a)

    if isinstance(expr, Binary):
        a = _eval(expr.left, env)
        b = _eval(expr.right, env)
        if isinstance(expr, Add):
            return a + b
        if isinstance(expr, Sub):
            return a - b
        if isinstance(expr, Mul):
            return a * b
        if isinstance(expr, Max):
            return np.maximum(a, b)
        if isinstance(expr, Min):
            return np.minimum(a, b)
        if isinstance(expr, Div):
            if np.any(b == 0.0):
                raise DomainError("division by zero")
            with np.errstate(over="ignore"):
                return _finite(a / b, "division")
        if isinstance(expr, Pow):
            a, b = np.broadcast_arrays(a, b)
            if np.any((a < 0.0) & (b != np.round(b))):
                raise DomainError("negative base raised to a non-integer power")
            if np.any((a == 0.0) & (b < 0.0)):
                raise DomainError("division by zero (zero raised to a negative power)")
            with np.errstate(over="ignore"):
                return _finite(np.power(a, b), "power")

    raise TypeError(f"Not an expression node: {expr!r}")


def evaluate(expr: Expression, env: Mapping[str, Value]) -> Value:
    """Evaluate ``expr`` with variables bound by ``env``.

    Bindings may be floats or numpy arrays (broadcast elementwise). A scalar
    result is returned as ``float``.
    """
    result = _eval(expr, env)
    if result.ndim == 0:
        return float(result)
    return result


@dataclass(frozen=True)
class BoundExpression:
    """An expression with a fixed positional calling convention.

    ``BoundExpression(parse("0.2*x"), ("s", "x"))(s, x)`` evaluates the
    expression with ``s`` and ``x`` bound positionally.
    """

    expression: Expression
    variables: Tuple[str, ...]
    source: str = field(default="", compare=False)

    @classmethod
    def from_source(cls, source: Union[str, float, int], variables: Sequence[str]) -> "BoundExpression":
        text = str(source)
        return cls(parse(text, allowed=variables), tuple(variables), text)

    def __call__(self, *args: Value) -> Value:
        return evaluate(self.expression, dict(zip(self.variables, args)))

    @property
    def free(self) -> FrozenSet[str]:
        return free_variables(self.expression)

    @property
    def is_zero(self) -> bool:
        return isinstance(self.expression, Num) and self.expression.value == 0.0

    def constant(self) -> Optional[float]:
        """Value of an expression without free variables, else None."""
        if self.free:
            return None
        return float(evaluate(self.expression, {}))


# ===== Lipschitz probe =====

@dataclass
class LipschitzProbe:
    estimate: float
    declared: float
    passed: bool
    worst_pair: Optional[Tuple[Dict[str, float], Dict[str, float]]] = None
    failure: str = ""


def lipschitz_probe(
    expr: Expression,
    box: Mapping[str, Tuple[float, float]],
    samples: int,
    declared_c: float,
    seed: int = 0,
) -> LipschitzProbe:
    """Audit a declared Lipschitz constant in the (y, z, u) coordinates.

    Each sampled base point is paired with one move along every Lipschitz
    coordinate in ``box`` and one joint move of all of them; the other
    variables stay fixed within a pair. The estimate is the largest ratio
    |e(p) - e(q)| / ||p - q||_1 over the (y, z, u) coordinates.
    """
    if samples < 2:
        raise ValueError("samples must be >= 2")

    names = sorted(free_variables(expr) | set(box))
    bounds = {name: tuple(box.get(name, (-1.0, 1.0))) for name in names}
    lip = [n for n in names if n in LIPSCHITZ_VARIABLES]
    rng = np.random.default_rng(seed)

    def draw_point() -> Dict[str, float]:
        return {n: float(rng.uniform(*bounds[n])) for n in names}

    def move(point: Dict[str, float], coords: Sequence[str]) -> Dict[str, float]:
        other = dict(point)
        for n in coords:
            lo, hi = bounds[n]
            width = hi - lo
            step = rng.uniform(0.25, 1.0) * max(hi - point[n], point[n] - lo)
            if width == 0.0:
                continue
            # move toward the farther side so the pair stays in the box
            other[n] = point[n] + step if hi - point[n] >= point[n] - lo else point[n] - step
        return other

    best = 0.0
    worst_pair = None
    for _ in range(samples):
        base = draw_point()
        partners = [move(base, [n]) for n in lip]
        if len(lip) > 1:
            partners.append(move(base, lip))
        for other in partners:
            dist = sum(abs(other[n] - base[n]) for n in lip)
            if dist == 0.0:
                continue
            try:
                delta = abs(evaluate(expr, other) - evaluate(expr, base))
            except DomainError as exc:
                return LipschitzProbe(
                    estimate=best, declared=declared_c, passed=False,
                    worst_pair=(base, other), failure=f"evaluation failed: {exc}",
                )
            ratio = delta / dist
            if ratio > best:
                best = ratio
                worst_pair = (base, other)

    passed = best <= declared_c * (1.0 + 1e-9)
    return LipschitzProbe(estimate=best, declared=declared_c, passed=passed, worst_pair=worst_pair)

import math

import numpy as np
import pytest
from hypothesis import given, settings as hsettings, strategies as st

from app.exceptions import DomainError, DslSyntaxError, UnboundVariableError, UnknownVariableError
from app.services.dsl import (
    Abs,
    Add,
    BoundExpression,
    Div,
    Exp,
    Indicator,
    Log,
    Max,
    Min,
    Mul,
    Neg,
    Num,
    Pow,
    Sqrt,
    Sub,
    Var,
    evaluate,
    free_variables,
    lipschitz_probe,
    parse,
    unparse,
)

CORPUS = [
    "0",
    "1.5",
    "x",
    "-x",
    "--x",
    "0.5 * abs(z)",
    "0.5*abs(z) + 0.2*u1",
    "y + z + u1 + u2",
    "x - y - z",
    "x / y / 2",
    "2 ^ 3 ^ 2",
    "-x ^ 2",
    "(-x) ^ 2",
    "exp(-0.5 * t)",
    "log(1 + x ^ 2)",
    "sqrt(abs(z) + 1)",
    "indicator(x - 1)",
    "max(z, 0) - min(u1, 0)",
    "max(min(x, 1), -1)",
    "0.3 * z + 0.2 * u1 + 0.1 * y",
    "xt * x",
    "exp(s - t) * y",
    "1e-3 * zeta",
    "2.5e2 + .5",
    "zeta ^ 2",
    "abs(y) + abs(z)",
    "(x + 1) * (x - 1)",
    "-(x + y) * z",
    "x * -y",
    "t + s * x / (1 + x ^ 2)",
    "max(0, x - 1) ^ 2",
]


@pytest.mark.parametrize("source", CORPUS)
def test_unparse_round_trip(source):
    tree = parse(source)
    assert parse(unparse(tree)) == tree


def test_corpus_is_large_enough():
    assert len(CORPUS) >= 30


def test_precedence_and_associativity():
    assert parse("-x^2") == Neg(Pow(Var("x"), Num(2.0)))
    assert parse("2^3^2") == Pow(Num(2.0), Pow(Num(3.0), Num(2.0)))
    assert parse("x - y - z") == Sub(Sub(Var("x"), Var("y")), Var("z"))
    assert parse("x + y * z") == Add(Var("x"), Mul(Var("y"), Var("z")))
    assert evaluate(parse("2^3^2"), {}) == 512.0
    assert evaluate(parse("10 - 3 - 2"), {}) == 5.0
    assert evaluate(parse("-2^2"), {}) == -4.0


def test_function_nodes():
    assert parse("abs(z)") == Abs(Var("z"))
    assert parse("max(z, 0)") == Max(Var("z"), Num(0.0))
    assert parse("min(z, 0)") == Min(Var("z"), Num(0.0))
    assert isinstance(parse("exp(t)"), Exp)
    assert isinstance(parse("log(x)"), Log)
    assert isinstance(parse("sqrt(x)"), Sqrt)
    assert isinstance(parse("indicator(x)"), Indicator)
    assert isinstance(parse("x / 2"), Div)


def test_free_variables():
    assert free_variables(parse("0.5*abs(z) + 0.2*u1 + t")) == {"z", "u1", "t"}
    assert free_variables(parse("3 * 4")) == frozenset()


# ----- errors -----

def test_dangling_operator_reports_end_offset():
    with pytest.raises(DslSyntaxError) as info:
        parse("z +")
    assert info.value.offset == 3
    assert "number" in info.value.expected


def test_unexpected_character_offset():
    with pytest.raises(DslSyntaxError) as info:
        parse("x $ 1")
    assert info.value.offset == 2


def test_unbalanced_parenthesis():
    with pytest.raises(DslSyntaxError) as info:
        parse("(x + 1")
    assert ")" in info.value.expected


def test_trailing_tokens():
    with pytest.raises(DslSyntaxError):
        parse("x y")


def test_empty_expression():
    with pytest.raises(DslSyntaxError) as info:
        parse("   ")
    assert info.value.offset == 0


def test_wrong_arity_is_a_syntax_error():
    with pytest.raises(DslSyntaxError):
        parse("abs(x, y)")
    with pytest.raises(DslSyntaxError):
        parse("max(x)")


def test_unknown_identifier():
    with pytest.raises(UnknownVariableError) as info:
        parse("x + foo")
    assert info.value.name == "foo"
    assert info.value.offset == 4


def test_variable_outside_allowed_set():
    with pytest.raises(UnknownVariableError):
        parse("y + z", allowed=("t", "x"))


def test_unbound_variable():
    with pytest.raises(UnboundVariableError):
        evaluate(parse("x + y"), {"x": 1.0})


@pytest.mark.parametrize(
    "source, env",
    [
        ("log(x)", {"x": 0.0}),
        ("log(x)", {"x": -1.0}),
        ("sqrt(x)", {"x": -0.1}),
        ("1 / x", {"x": 0.0}),
        ("x ^ 0.5", {"x": -2.0}),
        ("exp(x)", {"x": 1000.0}),
        ("0 ^ -1", {}),
    ],
)
def test_domain_errors(source, env):
    with pytest.raises(DomainError):
        evaluate(parse(source), env)


def test_negative_base_integer_power_is_fine():
    assert evaluate(parse("x ^ 3"), {"x": -2.0}) == -8.0


# ----- evaluation -----

def test_scalar_evaluation():
    assert evaluate(parse("0.5*abs(z) + 0.2*u1"), {"z": -2.0, "u1": 1.0}) == pytest.approx(1.2)
    assert evaluate(parse("indicator(x)"), {"x": 0.0}) == 1.0
    assert evaluate(parse("indicator(x)"), {"x": -1e-9}) == 0.0
    assert evaluate(parse("exp(log(3))"), {}) == pytest.approx(3.0)


def test_array_broadcasting():
    x = np.linspace(-1.0, 1.0, 5)
    out = evaluate(parse("max(x, 0) + t"), {"x": x, "t": 1.0})
    np.testing.assert_allclose(out, np.maximum(x, 0.0) + 1.0)


def test_bound_expression_positional():
    f = BoundExpression.from_source("0.2 * x + s", ("s", "x"))
    assert f(1.0, 5.0) == pytest.approx(2.0)
    assert BoundExpression.from_source("0", ("x",)).is_zero
    assert BoundExpression.from_source("2 * 3", ("x",)).constant() == 6.0
    assert BoundExpression.from_source("x", ("x",)).constant() is None


# ----- properties -----

_leaf = st.one_of(
    st.floats(min_value=0.0, max_value=1e6, allow_nan=False, allow_infinity=False).map(Num),
    st.sampled_from(["t", "s", "y", "z", "x", "xt", "u1"]).map(Var),
)


def _extend(children):
    unary = st.sampled_from([Neg, Abs, Exp, Log, Sqrt, Indicator])
    binary = st.sampled_from([Add, Sub, Mul, Div, Pow, Max, Min])
    return st.one_of(
        st.builds(lambda cls, a: cls(a), unary, children),
        st.builds(lambda cls, a, b: cls(a, b), binary, children, children),
    )


@given(st.recursive(_leaf, _extend, max_leaves=12))
@hsettings(max_examples=300, deadline=None)
def test_generated_trees_round_trip(tree):
    assert parse(unparse(tree)) == tree


@given(
    a=st.floats(min_value=-5, max_value=5),
    b=st.floats(min_value=-5, max_value=5),
    c=st.floats(min_value=-5, max_value=5),
)
@hsettings(max_examples=100, deadline=None)
def test_affine_lipschitz_estimate_is_largest_coefficient(a, b, c):
    expr = Add(Add(Mul(Num(abs(a)), Var("y")), Mul(Num(abs(b)), Var("z"))), Mul(Num(abs(c)), Var("u1")))
    largest = max(abs(a), abs(b), abs(c))
    probe = lipschitz_probe(expr, {"y": (-2, 2), "z": (-2, 2), "u1": (-2, 2)}, samples=50,
                            declared_c=max(largest, 1e-12))
    assert probe.estimate == pytest.approx(largest, abs=1e-12)
    assert probe.passed


# ----- Lipschitz probe -----

def test_lipschitz_probe_passes_for_declared_bound():
    probe = lipschitz_probe(parse("0.5*abs(z) + 0.2*abs(u1)"), {"z": (-2, 2), "u1": (-2, 2)}, 200, 0.5)
    assert probe.passed
    assert probe.estimate <= 0.5 + 1e-12


def test_lipschitz_probe_catches_understated_bound():
    probe = lipschitz_probe(parse("3 * y + z"), {"y": (-2, 2), "z": (-2, 2)}, 100, 1.0)
    assert not probe.passed
    assert probe.estimate == pytest.approx(3.0, abs=1e-12)
    assert probe.worst_pair is not None


def test_lipschitz_probe_nonlinear_exceeds_bound():
    # z^2 has slope up to 4 on [-2, 2]
    probe = lipschitz_probe(parse("z ^ 2"), {"z": (-2, 2)}, 400, 1.0)
    assert not probe.passed
    assert probe.estimate > 1.0


def test_lipschitz_probe_turns_domain_errors_into_failures():
    probe = lipschitz_probe(parse("log(z)"), {"z": (-2, 2)}, 50, 10.0)
    assert not probe.passed
    assert "evaluation failed" in probe.failure


def test_lipschitz_probe_needs_samples():
    with pytest.raises(ValueError):
        lipschitz_probe(parse("z"), {"z": (-1, 1)}, 1, 1.0)


def test_lipschitz_probe_ignores_non_lipschitz_coordinates():
    # t and x are held fixed within a pair
    probe = lipschitz_probe(parse("100 * t + 0.25 * z"), {"z": (-1, 1), "t": (0, 1)}, 100, 0.25)
    assert probe.passed
    assert math.isclose(probe.estimate, 0.25, abs_tol=1e-12)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nlhom.dsl import ExpressionError, parse_expression


def test_power_right_associative():
    assert parse_expression("2^3^2")() == 512.0


def test_precedence_unary_minus_below_power():
    assert parse_expression("-2^2")() == -4.0
    assert parse_expression("2^-1")() == 0.5


def test_sin_pi_half():
    assert parse_expression("sin(pi/2)")() == pytest.approx(1.0, abs=1e-15)


def test_variable_ratio():
    expr = parse_expression("xi1/r")
    assert expr(xi1=3.0, r=5.0) == pytest.approx(0.6)


def test_basic_arithmetic():
    assert parse_expression("1 + 2*3 - 4/2")() == 5.0
    assert parse_expression("(1+2)*3")() == 9.0
    assert parse_expression("sqrt(abs(-4))")() == 2.0
    assert parse_expression("exp(0) + cos(0)")() == 2.0


def test_unclosed_parenthesis_span():
    with pytest.raises(ExpressionError) as err:
        parse_expression("1 + 0.5*sin(2*pi*z1")
    assert "unclosed parenthesis" in str(err.value)
    # caret points at the opening parenthesis of sin(
    assert err.value.pos == len("1 + 0.5*sin")


def test_unknown_identifier_is_parse_error():
    with pytest.raises(ExpressionError) as err:
        parse_expression("2*q7 + 1")
    assert "unknown identifier" in str(err.value)
    assert err.value.pos == 2


def test_trailing_garbage():
    with pytest.raises(ExpressionError):
        parse_expression("1 + 2 )")


def test_division_by_zero_reported():
    expr = parse_expression("1/z1")
    with pytest.raises(ExpressionError, match="non-finite"):
        expr(z1=0.0)


def test_undefined_variable_at_eval():
    expr = parse_expression("x1 + 1")
    with pytest.raises(ExpressionError, match="not defined"):
        expr(z1=0.5)


def test_vectorized_evaluation_broadcasts():
    expr = parse_expression("z1^2 + zp1")
    z1 = np.array([0.0, 0.5, 1.0])
    out = expr(z1=z1, zp1=1.0)
    assert np.allclose(out, [1.0, 1.25, 2.0])


def test_used_variables_recorded():
    expr = parse_expression("sin(2*pi*z1) * zp2 + r")
    assert expr.variables == {"z1", "zp2", "r"}


@given(st.floats(min_value=-10, max_value=10, allow_nan=False),
       st.floats(min_value=-10, max_value=10, allow_nan=False))
def test_parse_evaluate_matches_python(a, b):
    expr = parse_expression("x1*x2 + x1 - 2")
    assert expr(x1=a, x2=b) == pytest.approx(a * b + a - 2, rel=1e-12, abs=1e-12)


@given(st.integers(min_value=0, max_value=6))
def test_deterministic_roundtrip(k):
    text = f"(x1 + {k})^2"
    e1 = parse_expression(text)
    e2 = parse_expression(text)
    assert e1(x1=0.25) == e2(x1=0.25)

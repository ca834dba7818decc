import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bhplab.errors import ExpressionError
from bhplab.expr import parse, tokenize


def test_precedence_and_unary():
    assert parse("1 + 2 * 3")(0, 0) == 7
    assert parse("-2 * -3")(0, 0) == 6
    assert parse("(1 + 2) * 3")(0, 0) == 9
    assert parse("8 / 4 / 2")(0, 0) == 1
    assert parse("2 - 3 - 4")(0, 0) == -5


def test_variables_functions_and_constants():
    e = parse("beta * sin(pi * x) + exp(y) - cos(0)", {"beta": 2.0})
    x, y = np.array([0.5, 0.25]), np.array([0.0, 1.0])
    expected = 2.0 * np.sin(np.pi * x) + np.exp(y) - 1.0
    np.testing.assert_allclose(e(x, y), expected, rtol=1e-15)
    assert not e.is_constant
    assert parse("2 * pi")(0, 0) == pytest.approx(2 * np.pi)
    assert parse("1.5e-1 * 2").is_constant


def test_broadcasts_constants_to_argument_shape():
    out = parse("3")(np.zeros((4, 2)), np.zeros((4, 2)))
    assert out.shape == (4, 2) and np.all(out == 3)


@pytest.mark.parametrize("bad", ["1 +", "(1", "x ** 2", "foo", "sin x", "2 $ 3", "1 2", "tan(x)"])
def test_malformed_input_raises(bad):
    with pytest.raises(ExpressionError):
        parse(bad)


def test_tokenizer_scientific_notation():
    assert tokenize("1e-3*x") == [("num", "1e-3"), ("op", "*"), ("name", "x")]


# random expression trees evaluated by Python as an independent oracle
_leaf = st.one_of(
    st.integers(0, 9).map(str),
    st.floats(0.1, 9.9, allow_nan=False).map(lambda v: repr(round(v, 3))),
    st.sampled_from(["x", "y"]),
)


def _extend(children):
    return st.one_of(
        st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(lambda t: f"({t[0]} {t[1]} {t[2]})"),
        children.map(lambda c: f"-{c}"),
        children.map(lambda c: f"sin({c})"),
        children.map(lambda c: f"cos({c})"),
    )


@given(st.recursive(_leaf, _extend, max_leaves=12), st.floats(-2, 2), st.floats(-2, 2))
def test_matches_python_evaluation(src, x, y):
    expected = eval(src, {"sin": math.sin, "cos": math.cos, "x": x, "y": y})
    assert parse(src)(x, y) == pytest.approx(expected, rel=1e-12, abs=1e-12)

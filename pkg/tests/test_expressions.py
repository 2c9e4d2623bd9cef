import math

import numpy as np
import pytest
import sympy

from utils.errors import ConfigError
from utils.expressions import Expression, VectorExpression, parse


class TestParse:
    def test_constants_are_folded(self):
        assert parse("2*3 + 1", 2) == 7

    def test_zero_product_folds_away(self):
        assert parse("0*x1", 2) == 0

    def test_caret_is_a_power(self):
        x1, x2 = sympy.symbols("x1 x2", real=True)
        assert parse("x1^2 - x2", 2) == x1**2 - x2

    @pytest.mark.parametrize(
        "source",
        ["abs(x1)", "log(x1)", "x1 if x2 else 0", "x1 < x2", "sin(x1, x2)", '__import__("os")', "(x1, x2)"],
        ids=["abs", "log", "conditional", "comparison", "two-args", "dunder", "tuple"],
    )
    def test_unsupported_syntax(self, source):
        with pytest.raises(ConfigError):
            parse(source, 2)

    def test_bad_syntax(self):
        with pytest.raises(ConfigError, match="Cannot parse"):
            parse("x1 +", 2)

    def test_coordinate_outside_the_dimension(self):
        with pytest.raises(ConfigError, match="x3"):
            parse("x1 + x3", 2)


class TestExpression:
    def test_evaluate(self):
        expr = Expression("sin(pi*x1)*x2^2", 2)
        np.testing.assert_allclose(expr.evaluate([[0.5, 2.0], [0.0, 1.0]]), [4.0, 0.0], atol=1e-15)

    def test_power_spellings_agree(self):
        points = np.array([[1.5, -2.0]])
        assert Expression("x1**2 - x2", 2).evaluate(points) == Expression("x1^2 - x2", 2).evaluate(points)

    def test_named_constants(self):
        assert Expression("e + 0*x1", 1).evaluate([[3.0]])[0] == pytest.approx(math.e)

    def test_non_finite_values(self):
        with pytest.raises(ConfigError, match="not finite"):
            Expression("1/x1", 2).evaluate([[0.0, 1.0]])

    def test_wrong_point_dimension(self):
        with pytest.raises(ConfigError):
            Expression("x1", 2).evaluate([[1.0, 2.0, 3.0]])

    @pytest.mark.parametrize(
        ("source", "axis", "expected"),
        [
            ("x1*x2", 0, 3.0),
            ("x1^3", 0, 12.0),
            ("exp(x2)", 1, math.exp(3.0)),
            ("cos(x1*x2)", 1, -2.0 * math.sin(6.0)),
            ("x2/x1", 0, -0.75),
            ("x1^x2", 0, 12.0),
            ("sqrt(x1*x2)", 1, 1.0 / math.sqrt(6.0)),
            ("tan(x1)", 0, 1.0 + math.tan(2.0) ** 2),
        ],
    )
    def test_derivatives(self, source, axis, expected):
        value = Expression(source, 2).derivative(axis).evaluate([[2.0, 3.0]])[0]
        assert value == pytest.approx(expected, rel=1e-12)


class TestVectorExpression:
    def test_jacobian_and_strain(self):
        u = VectorExpression(["x1*x2", "x1^2"], 2)
        point = [[2.0, 3.0]]
        np.testing.assert_allclose(u.jacobian(point)[0], [[3.0, 2.0], [4.0, 0.0]])
        np.testing.assert_allclose(u.strain(point)[0], [[3.0, 3.0], [3.0, 0.0]])
        np.testing.assert_allclose(u(point)[0], [6.0, 4.0])

    def test_component_count(self):
        with pytest.raises(ConfigError, match="Expected 3"):
            VectorExpression(["x1", "x2"], 3)

"""Closed-form coordinate expressions used for data, boundary values and exact solutions.

Sources may use numbers, the coordinates x1..x3, the constants pi and e,
+ - * / and ^ (or **), and sin, cos, tan, exp, sqrt. They are parsed with
sympy, differentiated symbolically and evaluated through numpy-lambdified
functions.
"""

from __future__ import annotations

import re
from collections.abc import Callable
from functools import cache, cached_property
from tokenize import TokenError
from typing import Any

import numpy as np
import sympy
from numpy.typing import ArrayLike, NDArray
from sympy.parsing.sympy_parser import (
    convert_xor,
    parse_expr,
    standard_transformations,
)

from utils.errors import ConfigError

FloatArray = NDArray[np.float64]

FUNCTIONS: dict[str, Any] = {
    "sin": sympy.sin,
    "cos": sympy.cos,
    "tan": sympy.tan,
    "exp": sympy.exp,
    "sqrt": sympy.sqrt,
}
CONSTANTS: dict[str, Any] = {"pi": sympy.pi, "e": sympy.E}
TRANSFORMATIONS = (*standard_transformations, convert_xor)

# Only the names the parser's own token transformations emit.
_PARSER_GLOBALS: dict[str, Any] = {
    "Integer": sympy.Integer,
    "Float": sympy.Float,
    "Rational": sympy.Rational,
    "Symbol": sympy.Symbol,
    "Function": sympy.Function,
}
_NAME = re.compile(r"(?<![\w.])[A-Za-z_]\w*")


@cache
def coordinates(dim: int) -> tuple[sympy.Symbol, ...]:
    return tuple(sympy.symbols(f"x1:{dim + 1}", real=True))


def parse(source: str, dim: int) -> sympy.Expr:
    """Parse a source string into a sympy expression in x1..x_dim.

    Raises:
        ConfigError: Unknown names, bad syntax, or a result that is not a scalar expression.
    """
    names: dict[str, Any] = {str(x): x for x in coordinates(dim)} | CONSTANTS | FUNCTIONS
    for name in _NAME.findall(source):
        if name not in names:
            raise ConfigError(
                f"Unknown name {name!r} in expression {source!r}; coordinates are x1..x{dim}"
            )
    try:
        expr = parse_expr(
            source.strip(),
            local_dict=names,
            global_dict=dict(_PARSER_GLOBALS),
            transformations=TRANSFORMATIONS,
        )
    except (SyntaxError, TokenError) as exc:
        raise ConfigError(f"Cannot parse expression {source!r}: {exc}") from None
    except (TypeError, NameError, AttributeError, ValueError) as exc:
        raise ConfigError(f"Unsupported expression {source!r}: {exc}") from None
    if not isinstance(expr, sympy.Expr):
        raise ConfigError(f"Expression {source!r} is not a scalar function of the coordinates")
    return expr


class Expression:
    """Scalar expression in the coordinates x1..x_dim."""

    def __init__(self, source: str, dim: int, expr: sympy.Expr | None = None):
        self.source = source
        self.dim = dim
        self.expr = expr if expr is not None else parse(source, dim)

    def __repr__(self) -> str:
        return f"Expression({self.source!r}, dim={self.dim})"

    @cached_property
    def _function(self) -> Callable[..., Any]:
        return sympy.lambdify(coordinates(self.dim), self.expr, modules="numpy")

    def evaluate(self, points: ArrayLike) -> FloatArray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise ConfigError(f"{self!r} needs points with {self.dim} coordinates")
        with np.errstate(all="ignore"):
            raw = np.asarray(self._function(*pts.T))
        if np.iscomplexobj(raw) or not np.all(np.isfinite(raw)):
            raise ConfigError(f"{self!r} is not finite on the requested points")
        return np.broadcast_to(raw.astype(float), pts.shape[:1]).copy()

    def derivative(self, axis: int) -> Expression:
        x = coordinates(self.dim)[axis]
        return Expression(f"d/dx{axis + 1}({self.source})", self.dim, sympy.diff(self.expr, x))


class VectorExpression:
    """One expression per displacement component."""

    def __init__(self, sources: list[str], dim: int):
        if len(sources) != dim:
            raise ConfigError(f"Expected {dim} component expressions, got {len(sources)}")
        self.components = [Expression(src, dim) for src in sources]
        self.dim = dim

    @cached_property
    def _partials(self) -> list[list[Expression]]:
        return [[comp.derivative(j) for j in range(self.dim)] for comp in self.components]

    def __call__(self, points: ArrayLike) -> FloatArray:
        return np.stack([comp.evaluate(points) for comp in self.components], axis=-1)

    def jacobian(self, points: ArrayLike) -> FloatArray:
        """J[k, i, j] = d u_i / d x_j at point k."""
        return np.stack(
            [np.stack([d.evaluate(points) for d in row], axis=-1) for row in self._partials],
            axis=-2,
        )

    def strain(self, points: ArrayLike) -> FloatArray:
        jac = self.jacobian(points)
        return 0.5 * (jac + np.swapaxes(jac, -1, -2))

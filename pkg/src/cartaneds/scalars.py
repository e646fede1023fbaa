"""Exact scalar arithmetic: multivariate rational functions over the rationals.

Backed by sympy's exact polynomial and rational-function machinery. A
ScalarExpr is a sympy expression kept in cancelled canonical form (coprime
numerator and denominator, expanded). All coefficients in the rest of the
package live here; no floating point is used anywhere.
"""

from __future__ import annotations

import random
import re
from fractions import Fraction

import sympy as sp

from .errors import (
    DivisionByZero,
    GenericPointExhausted,
    ZeroDenominatorAfterSubstitution,
)

_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_']*\Z")


def make_symbol(name: str) -> sp.Symbol:
    """Create a coordinate/field symbol, validating the allowed name shape."""
    if not _NAME_RE.match(name):
        raise ValueError(f"bad symbol name: {name!r}")
    return sp.Symbol(name)


def _canon(expr):
    expr = sp.sympify(expr)
    if expr.free_symbols:
        expr = sp.cancel(expr)
    else:
        expr = sp.nsimplify(expr, rational=True) if expr.is_Float else expr
    if expr.has(sp.zoo, sp.nan, sp.oo, -sp.oo):
        raise ZeroDenominatorAfterSubstitution(f"undefined value in {expr}")
    return expr


class ScalarExpr:
    """Exact multivariate rational function over Q, canonicalized."""

    __slots__ = ("expr",)

    def __init__(self, value, _canonical=False):
        if isinstance(value, ScalarExpr):
            self.expr = value.expr
        elif _canonical:
            self.expr = value
        else:
            self.expr = _canon(value)

    # -- constructors -------------------------------------------------

    @staticmethod
    def zero():
        return ScalarExpr(sp.Integer(0), _canonical=True)

    @staticmethod
    def one():
        return ScalarExpr(sp.Integer(1), _canonical=True)

    # -- structure ----------------------------------------------------

    @property
    def free_symbols(self):
        return self.expr.free_symbols

    def is_zero(self) -> bool:
        return self.expr == 0

    def is_rational_constant(self) -> bool:
        return not self.expr.free_symbols

    def as_fraction(self) -> Fraction:
        if self.expr.free_symbols:
            raise ValueError(f"not a constant: {self.expr}")
        return Fraction(*sp.Rational(self.expr).as_numer_denom())

    def numer_denom(self):
        num, den = sp.fraction(self.expr)
        return ScalarExpr(num, _canonical=True), ScalarExpr(den, _canonical=True)

    def is_polynomial(self) -> bool:
        _, den = sp.fraction(self.expr)
        return not den.free_symbols

    # -- arithmetic ---------------------------------------------------

    def _binary(self, other, op):
        if isinstance(other, ScalarExpr):
            other = other.expr
        elif isinstance(other, (int, Fraction, sp.Expr)):
            other = sp.sympify(other)
        else:
            return NotImplemented
        return ScalarExpr(_canon(op(self.expr, other)), _canonical=True)

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b)

    def __rsub__(self, other):
        return self._binary(other, lambda a, b: b - a)

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other_e = other.expr if isinstance(other, ScalarExpr) else sp.sympify(other)
        if _canon(other_e) == 0:
            raise DivisionByZero("division by the zero function")
        return ScalarExpr(_canon(self.expr / other_e), _canonical=True)

    def __rtruediv__(self, other):
        return ScalarExpr(other) / self

    def __neg__(self):
        return ScalarExpr(-self.expr, _canonical=True)

    def __pow__(self, n: int):
        return ScalarExpr(_canon(self.expr ** int(n)), _canonical=True)

    # -- comparison / hashing -----------------------------------------

    def __eq__(self, other):
        if isinstance(other, ScalarExpr):
            other = other.expr
        elif isinstance(other, (int, Fraction)):
            other = sp.sympify(other)
        else:
            return NotImplemented
        return _canon(self.expr - other) == 0

    def __hash__(self):
        return hash(self.expr)

    def __bool__(self):
        return not self.is_zero()

    def __repr__(self):
        return f"ScalarExpr({self.expr})"

    def __str__(self):
        return sp.sstr(self.expr, order="grlex")


def arith(op: str, a: ScalarExpr, b: ScalarExpr) -> ScalarExpr:
    """Exact field arithmetic; op is one of add, sub, mul, div."""
    a, b = ScalarExpr(a), ScalarExpr(b)
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    raise ValueError(f"unknown op {op!r}")


def partial(e: ScalarExpr, s: sp.Symbol) -> ScalarExpr:
    """Formal partial derivative, canonicalized."""
    return ScalarExpr(sp.diff(ScalarExpr(e).expr, s))


def substitute(e: ScalarExpr, bindings: dict) -> ScalarExpr:
    """Simultaneous substitution of symbols by scalar expressions."""
    e = ScalarExpr(e)
    if not bindings:
        return e
    mapping = {
        (k if isinstance(k, sp.Symbol) else make_symbol(k)):
        (v.expr if isinstance(v, ScalarExpr) else sp.sympify(v))
        for k, v in bindings.items()
    }
    try:
        result = e.expr.subs(mapping, simultaneous=True)
    except ZeroDivisionError as exc:
        raise ZeroDenominatorAfterSubstitution(str(exc)) from exc
    return ScalarExpr(result)


def generic_point(symbols, avoid, seed: int) -> dict:
    """Deterministic-for-seed rational point avoiding the given hypersurfaces.

    Returns a map symbol -> sympy Rational with small numerators and
    denominators such that every expression in `avoid` is nonzero at the
    point. Retries with a widening coefficient range before giving up.
    """
    symbols = list(symbols)
    avoid = [ScalarExpr(a).expr for a in avoid]
    rng = random.Random(f"{seed}|{'|'.join(s.name for s in symbols)}")
    for attempt in range(60):
        bound = 5 + 2 * attempt
        point = {}
        for s in symbols:
            num = rng.randint(1, bound) * rng.choice((1, -1))
            den = rng.randint(1, 1 + attempt // 4)
            point[s] = sp.Rational(num, den)
        ok = True
        for expr in avoid:
            val = sp.cancel(expr.subs(point))
            if val == 0:
                ok = False
                break
        if ok:
            return point
    raise GenericPointExhausted(
        f"no generic point for {symbols} avoiding {avoid} after retries"
    )


def factor_simple(e: ScalarExpr):
    """Split a polynomial into monomial and uni-linear factors.

    Returns (factors, branchable). When every irreducible factor is either a
    monomial or a polynomial of the form a*s + b in a single symbol, the
    factor multiset is returned with branchable=True. Otherwise the input is
    returned unsplit with branchable=False (irreducible-for-branching); no
    deeper factorization is attempted.
    """
    e = ScalarExpr(e)
    if not e.is_polynomial():
        raise ValueError(f"factor_simple needs a polynomial, got {e.expr}")
    expr = e.expr
    if expr == 0 or not expr.free_symbols:
        return [e], True
    _, factors = sp.factor_list(expr)
    out = []
    for base, mult in factors:
        if not _is_simple_factor(base):
            return [e], False
        out.extend([ScalarExpr(base)] * mult)
    if not out:
        return [e], True
    return out, True


def _is_simple_factor(base) -> bool:
    syms = sorted(base.free_symbols, key=lambda s: s.name)
    if not syms:
        return True
    poly = sp.Poly(base, *syms)
    if len(poly.terms()) == 1:
        return True
    if len(syms) == 1 and poly.total_degree() == 1:
        return True
    return False

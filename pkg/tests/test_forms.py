"""Exterior-algebra and calculus properties on randomized charts."""

import random

import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from cartaneds.errors import ChartMismatch, NoMetric, NotSemibasic
from cartaneds.forms import (
    Chart,
    ChartMap,
    DiffForm,
    VectorField,
    canonical_form,
    exterior_derivative,
    hodge_star_semibasic,
    inclusion_map,
    interior_product,
    lie_derivative,
    pullback,
    restrict_to_slice,
    wedge,
)
from cartaneds.scalars import ScalarExpr

from conftest import (
    rand_chart,
    rand_form,
    rand_rational,
    rand_scalar,
    rand_semibasic_form,
    rand_vector,
)

seeds = st.integers(0, 10**9)


@given(seeds)
@settings(max_examples=120, deadline=None)
def test_d_squared_is_zero(seed):
    rng = random.Random(seed)
    chart = rand_chart(rng, 5, 14)
    degree = rng.randint(0, 3)
    a = rand_form(rng, chart, degree)
    assert exterior_derivative(exterior_derivative(a)).is_zero()


@given(seeds)
@settings(max_examples=120, deadline=None)
def test_wedge_graded_commutative(seed):
    rng = random.Random(seed)
    chart = rand_chart(rng, 5, 12)
    p = rng.randint(0, 3)
    q = rng.randint(0, 3)
    a = rand_form(rng, chart, p)
    b = rand_form(rng, chart, q)
    sign = (-1) ** (p * q)
    lhs = wedge(a, b)
    rhs = wedge(b, a) * ScalarExpr(sign)
    assert (lhs - rhs).is_zero()


@given(seeds)
@settings(max_examples=110, deadline=None)
def test_wedge_associative_and_leibniz(seed):
    rng = random.Random(seed)
    chart = rand_chart(rng, 5, 10)
    a = rand_form(rng, chart, rng.randint(0, 2))
    b = rand_form(rng, chart, rng.randint(0, 2))
    c = rand_form(rng, chart, rng.randint(0, 2))
    assert (wedge(wedge(a, b), c) - wedge(a, wedge(b, c))).is_zero()
    # graded Leibniz rule for d over the wedge
    lhs = exterior_derivative(wedge(a, b))
    rhs = wedge(exterior_derivative(a), b) + wedge(a, exterior_derivative(b)) * ScalarExpr(
        (-1) ** a.degree
    )
    assert (lhs - rhs).is_zero()


@given(seeds)
@settings(max_examples=110, deadline=None)
def test_cartan_magic_and_commutation_with_d(seed):
    rng = random.Random(seed)
    chart = rand_chart(rng, 5, 9)
    a = rand_form(rng, chart, rng.randint(1, 3))
    X = rand_vector(rng, chart)
    magic = interior_product(X, exterior_derivative(a)) + exterior_derivative(
        interior_product(X, a)
    )
    assert (lie_derivative(X, a) - magic).is_zero()
    assert (
        lie_derivative(X, exterior_derivative(a))
        - exterior_derivative(lie_derivative(X, a))
    ).is_zero()
    b = rand_form(rng, chart, rng.randint(0, 2))
    derivation = lie_derivative(X, wedge(a, b)) - wedge(lie_derivative(X, a), b) - wedge(
        a, lie_derivative(X, b)
    )
    assert derivation.is_zero()


def _rand_map(rng, source, target):
    images = {c: rand_scalar(rng, source, nterms=2) for c in target.coords}
    return ChartMap(source, target, images)


@given(seeds)
@settings(max_examples=110, deadline=None)
def test_pullback_naturality_with_d(seed):
    rng = random.Random(seed)
    target = rand_chart(rng, 5, 9)
    source = rand_chart(rng, 5, 9)
    f = _rand_map(rng, source, target)
    a = rand_form(rng, target, rng.randint(0, 3))
    lhs = pullback(f, exterior_derivative(a))
    rhs = exterior_derivative(pullback(f, a))
    assert (lhs - rhs).is_zero()


@given(seeds)
@settings(max_examples=110, deadline=None)
def test_pullback_functorial(seed):
    rng = random.Random(seed)
    A = rand_chart(rng, 5, 8)
    B = rand_chart(rng, 5, 8)
    C = rand_chart(rng, 5, 8)
    g = _rand_map(rng, A, B)
    f = _rand_map(rng, B, C)
    a = rand_form(rng, C, rng.randint(0, 2))
    composite = f.compose(g)
    lhs = pullback(composite, a)
    rhs = pullback(g, pullback(f, a))
    assert (lhs - rhs).is_zero()


@given(seeds)
@settings(max_examples=110, deadline=None)
def test_restrict_to_slice_agrees_with_inclusion_pullback(seed):
    rng = random.Random(seed)
    chart = rand_chart(rng, 5, 12)
    coord = rng.choice(chart.coords)
    value = rand_rational(rng)
    a = rand_form(rng, chart, rng.randint(0, 3))
    direct = restrict_to_slice(a, coord, value)
    via_pullback = pullback(inclusion_map(chart, coord, value), a)
    assert (direct - via_pullback).is_zero()


@given(seeds)
@settings(max_examples=110, deadline=None)
def test_hodge_double_dual_sign(seed):
    rng = random.Random(seed)
    chart = rand_chart(rng, 5, 10, with_metric=True)
    n = len(chart.base_coords)
    k = rng.randint(0, n)
    a = rand_semibasic_form(rng, chart, k)
    det_sign = 1
    for c in chart.base_coords:
        if chart.metric[c] < 0:
            det_sign = -det_sign
    expected = a * ScalarExpr(det_sign * (-1) ** (k * (n - k)))
    assert (hodge_star_semibasic(hodge_star_semibasic(a)) - expected).is_zero()


def test_hodge_errors():
    chart = Chart(coords=("x", "y", "u"), base_coords=("x", "y"))
    dx = DiffForm(chart, 1, {(0,): ScalarExpr.one()})
    with pytest.raises(NoMetric):
        hodge_star_semibasic(dx)
    mchart = Chart(coords=("x", "y", "u"), base_coords=("x", "y"), metric={"x": 1, "y": 1})
    du = DiffForm(mchart, 1, {(2,): ScalarExpr.one()})
    with pytest.raises(NotSemibasic):
        hodge_star_semibasic(du)


def test_minkowski_star_matches_epsilon_oracle():
    """Brute-force Levi-Civita oracle for *(dx^mu ^ dx^nu) on (-,+,+,+)."""
    import itertools

    coords = ("x0", "x1", "x2", "x3")
    chart = Chart(
        coords=coords,
        base_coords=coords,
        metric={"x0": -1, "x1": 1, "x2": 1, "x3": 1},
        orientation=1,
    )
    eta = [-1, 1, 1, 1]
    for mu, nu in itertools.combinations(range(4), 2):
        a = DiffForm(chart, 2, {(mu, nu): ScalarExpr.one()})
        star = hodge_star_semibasic(a)
        # oracle: (*a)_{rs} = (1/2) eps_{mu' nu' r s} g^{mu' mu} g^{nu' nu}
        expected_terms = {}
        for perm in itertools.permutations(range(4)):
            if perm[0] != mu or perm[1] != nu or perm[2] > perm[3]:
                continue
            sign = sp.Integer(sp.combinatorics.Permutation(perm).signature())
            r, s = perm[2], perm[3]
            coeff = sign * sp.Rational(1, 1) / (eta[mu] * eta[nu])
            key = (min(r, s), max(r, s))
            if r > s:
                coeff = -coeff
            expected_terms[key] = expected_terms.get(key, 0) + coeff
        expected = DiffForm(
            chart,
            2,
            {k: ScalarExpr(v) for k, v in expected_terms.items() if v != 0},
        )
        assert (star - expected).is_zero(), (mu, nu)


def test_canonical_form_one_form_chart():
    coords = ("x0", "x1", "a0", "a1")
    a0, a1 = sp.symbols("a0 a1")
    chart = Chart(
        coords=coords,
        base_coords=("x0", "x1"),
        form_labels={a0: (0,), a1: (1,)},
    )
    theta = canonical_form(chart, 1)
    expected = DiffForm(chart, 1, {(0,): ScalarExpr(a0), (1,): ScalarExpr(a1)})
    assert (theta - expected).is_zero()


def test_chart_mismatch_raises():
    c1 = Chart(coords=("x", "y"), base_coords=("x",))
    c2 = Chart(coords=("x", "z"), base_coords=("x",))
    a = DiffForm(c1, 1, {(0,): ScalarExpr.one()})
    b = DiffForm(c2, 1, {(0,): ScalarExpr.one()})
    with pytest.raises(ChartMismatch):
        wedge(a, b)


def test_lie_derivative_of_clock_differential_vanishes():
    chart = Chart(coords=("x0", "x1", "u"), base_coords=("x0", "x1"))
    d0 = VectorField(chart, {"x0": 1})
    dx0 = DiffForm(chart, 1, {(0,): ScalarExpr.one()})
    assert lie_derivative(d0, dx0).is_zero()

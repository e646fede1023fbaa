"""Shared deterministic random builders for the property suites.

Every builder takes a ``random.Random`` instance so that hypothesis can feed
integer seeds and the generated objects stay exact (rational coefficients,
no floats anywhere).
"""

import random
from pathlib import Path

import pytest
import sympy as sp

from cartaneds.forms import Chart, DiffForm, VectorField
from cartaneds.scalars import ScalarExpr

CORPUS = Path(__file__).resolve().parents[1] / "src" / "cartaneds" / "corpus"

CORPUS_FILES = [
    "mechanics.eds",
    "field1st.eds",
    "em.eds",
    "poisson_sigma_so3.eds",
    "poisson_sigma_broken.eds",
    "pde_seiler.eds",
    "failure.eds",
    "failure_branch_nb0.eds",
    "failure_branch_qx0.eds",
]


def corpus_text(name: str) -> str:
    return (CORPUS / name).read_text()


def rand_rational(rng: random.Random):
    num = rng.randint(-6, 6)
    den = rng.randint(1, 4)
    return sp.Rational(num, den)


def rand_chart(rng: random.Random, nmin=5, nmax=14, with_metric=False) -> Chart:
    dim = rng.randint(nmin, nmax)
    coords = tuple(f"c{i}" for i in range(dim))
    nbase = rng.randint(2, max(2, dim - 1))
    base = coords[:nbase]
    metric = None
    if with_metric:
        # keep |det g| a perfect square so the Hodge density is rational
        metric = {c: sp.Rational(rng.choice((-1, 1))) for c in base}
        lucky = rng.choice(base)
        metric[lucky] *= rng.choice((1, 4, 9))
    return Chart(coords=coords, base_coords=base, metric=metric)


def rand_scalar(rng: random.Random, chart: Chart, nterms=3) -> ScalarExpr:
    syms = [sp.Symbol(c) if not isinstance(c, sp.Symbol) else c for c in chart.coords]
    total = sp.Integer(0)
    for _ in range(rng.randint(1, nterms)):
        mono = rand_rational(rng)
        for _ in range(rng.randint(0, 2)):
            mono *= rng.choice(syms)
        total += mono
    return ScalarExpr(total)


def rand_form(rng: random.Random, chart: Chart, degree: int, nterms=3) -> DiffForm:
    dim = len(chart.coords)
    if degree > dim:
        raise ValueError("degree exceeds chart dimension")
    terms = {}
    for _ in range(rng.randint(1, nterms)):
        idx = tuple(sorted(rng.sample(range(dim), degree)))
        coeff = rand_scalar(rng, chart)
        terms[idx] = terms.get(idx, ScalarExpr.zero()) + coeff
    return DiffForm(chart, degree, {k: v for k, v in terms.items() if not v.is_zero()})


def rand_semibasic_form(rng: random.Random, chart: Chart, degree: int) -> DiffForm:
    base_idx = sorted(chart.index(c) for c in chart.base_coords)
    terms = {}
    for _ in range(rng.randint(1, 3)):
        idx = tuple(sorted(rng.sample(base_idx, degree)))
        terms[idx] = terms.get(idx, ScalarExpr.zero()) + rand_scalar(rng, chart)
    return DiffForm(chart, degree, {k: v for k, v in terms.items() if not v.is_zero()})


def rand_vector(rng: random.Random, chart: Chart) -> VectorField:
    comps = {}
    for c in chart.coords:
        if rng.random() < 0.6:
            comps[c] = rand_scalar(rng, chart)
    if not comps:
        comps[chart.coords[0]] = ScalarExpr.one()
    return VectorField(chart, comps)


@pytest.fixture(scope="session")
def corpus_specs():
    from cartaneds.dsl import parse_spec

    return {name: parse_spec(corpus_text(name)) for name in CORPUS_FILES}

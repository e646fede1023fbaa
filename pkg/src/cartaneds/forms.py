"""Exterior algebra and calculus on finite-dimensional coordinate charts.

Charts carry an ordered coordinate list, a distinguished subset of base
coordinates, an optional constant diagonal metric on the base, and an
orientation sign. Forms are homogeneous and sparse: a map from strictly
increasing coordinate-index tuples to exact scalar coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import sympy as sp

from .errors import (
    BadChartLabeling,
    ChartMismatch,
    DegreeZero,
    NoMetric,
    NotSemibasic,
)
from .scalars import ScalarExpr, make_symbol, substitute


def _as_symbol(s):
    return s if isinstance(s, sp.Symbol) else make_symbol(s)


@dataclass(frozen=True)
class Chart:
    """Ordered coordinate chart with base/fiber split.

    form_labels maps a fiber coordinate to an increasing tuple of base-
    coordinate indices; it supports the tautological forms of charts of
    k-forms. jet_labels maps a fiber coordinate to (field name, multi-index
    over base coordinates); prolongation fills it in so surfaced conditions
    print as derivative conditions.
    """

    coords: tuple
    base_coords: tuple
    metric: Optional[dict] = None
    orientation: int = 1
    form_labels: dict = field(default_factory=dict)
    jet_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        coords = tuple(_as_symbol(c) for c in self.coords)
        base = tuple(_as_symbol(c) for c in self.base_coords)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "base_coords", base)
        if len(set(coords)) != len(coords):
            raise ValueError("duplicate coordinates in chart")
        if not set(base) <= set(coords):
            raise ValueError("base_coords must be a subset of coords")
        if self.metric is not None:
            metric = {_as_symbol(k): sp.Rational(v) for k, v in self.metric.items()}
            if set(metric) != set(base) or any(v == 0 for v in metric.values()):
                raise ValueError("metric must assign a nonzero rational to each base coordinate")
            object.__setattr__(self, "metric", metric)
        if self.orientation not in (1, -1):
            raise ValueError("orientation must be +1 or -1")

    @property
    def dim(self):
        return len(self.coords)

    @property
    def fiber_coords(self):
        base = set(self.base_coords)
        return tuple(c for c in self.coords if c not in base)

    def index(self, coord):
        return self.coords.index(_as_symbol(coord))

    def __hash__(self):
        return hash((self.coords, self.base_coords, self.orientation))

    def __eq__(self, other):
        return (
            isinstance(other, Chart)
            and self.coords == other.coords
            and self.base_coords == other.base_coords
            and self.metric == other.metric
            and self.orientation == other.orientation
        )

    def with_coords(self, coords=None, base_coords=None, **kw):
        return Chart(
            coords=tuple(coords) if coords is not None else self.coords,
            base_coords=tuple(base_coords) if base_coords is not None else self.base_coords,
            metric=kw.get("metric", self.metric),
            orientation=kw.get("orientation", self.orientation),
            form_labels=kw.get("form_labels", dict(self.form_labels)),
            jet_labels=kw.get("jet_labels", dict(self.jet_labels)),
        )

    def drop_coord(self, coord):
        c = _as_symbol(coord)
        metric = self.metric
        if metric is not None and c in metric:
            metric = {k: v for k, v in metric.items() if k != c}
            if not metric:
                metric = None
        return Chart(
            coords=tuple(x for x in self.coords if x != c),
            base_coords=tuple(x for x in self.base_coords if x != c),
            metric=metric,
            orientation=self.orientation,
            form_labels={k: v for k, v in self.form_labels.items() if k != c},
            jet_labels={k: v for k, v in self.jet_labels.items() if k != c},
        )


def _merge_indices(idx_a, idx_b):
    """Concatenate two strictly increasing index tuples.

    Returns (sign, merged) or (0, None) when an index repeats.
    """
    if set(idx_a) & set(idx_b):
        return 0, None
    merged = idx_a + idx_b
    sign = 1
    # insertion-sort sign count; tuples are short
    lst = list(merged)
    for i in range(1, len(lst)):
        j = i
        while j > 0 and lst[j - 1] > lst[j]:
            lst[j - 1], lst[j] = lst[j], lst[j - 1]
            sign = -sign
            j -= 1
    return sign, tuple(lst)


class DiffForm:
    """Sparse homogeneous exterior form on a chart."""

    __slots__ = ("chart", "degree", "terms")

    def __init__(self, chart: Chart, degree: int, terms=None):
        if degree < 0:
            raise ValueError("negative degree")
        self.chart = chart
        self.degree = degree
        clean = {}
        for idx, coeff in (terms or {}).items():
            idx = tuple(idx)
            if len(idx) != degree or any(
                idx[i] >= idx[i + 1] for i in range(len(idx) - 1)
            ):
                raise ValueError(f"bad index tuple {idx} for degree {degree}")
            coeff = ScalarExpr(coeff)
            if not coeff.is_zero():
                clean[idx] = clean[idx] + coeff if idx in clean else coeff
        self.terms = {k: v for k, v in clean.items() if not v.is_zero()}
        if degree > chart.dim:
            self.terms = {}

    # -- constructors -------------------------------------------------

    @staticmethod
    def zero(chart, degree=0):
        return DiffForm(chart, degree)

    @staticmethod
    def scalar(chart, value):
        return DiffForm(chart, 0, {(): ScalarExpr(value)})

    @staticmethod
    def d_coord(chart, coord):
        return DiffForm(chart, 1, {(chart.index(coord),): ScalarExpr(1)})

    # -- basic structure ----------------------------------------------

    def is_zero(self):
        return not self.terms

    def coefficient(self, coords):
        idx = tuple(sorted(self.chart.index(c) for c in coords))
        return self.terms.get(idx, ScalarExpr.zero())

    def is_semibasic(self):
        base = {self.chart.index(c) for c in self.chart.base_coords}
        return all(set(idx) <= base for idx in self.terms)

    def map_coefficients(self, fn):
        return DiffForm(self.chart, self.degree, {k: fn(v) for k, v in self.terms.items()})

    # -- arithmetic ---------------------------------------------------

    def _require_compatible(self, other):
        if self.chart != other.chart:
            raise ChartMismatch("forms live on different charts")
        if self.degree != other.degree and self.terms and other.terms:
            raise ValueError("cannot add forms of different degree")

    def __add__(self, other):
        if not isinstance(other, DiffForm):
            return NotImplemented
        self._require_compatible(other)
        if self.is_zero():
            return other
        if other.is_zero():
            return self
        terms = dict(self.terms)
        out = {}
        for idx, c in other.terms.items():
            terms[idx] = terms[idx] + c if idx in terms else c
        for idx, c in terms.items():
            if not c.is_zero():
                out[idx] = c
        return DiffForm(self.chart, self.degree, out)

    def __sub__(self, other):
        return self + (-other)

    def __neg__(self):
        return self.map_coefficients(lambda c: -c)

    def __mul__(self, scalar):
        if isinstance(scalar, DiffForm):
            return wedge(self, scalar)
        s = ScalarExpr(scalar)
        return self.map_coefficients(lambda c: c * s)

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, DiffForm):
            return NotImplemented
        if self.chart != other.chart:
            return False
        if self.degree != other.degree and self.terms and other.terms:
            return False
        return (self - other).is_zero()

    def __hash__(self):
        return hash((self.chart, self.degree, frozenset(self.terms)))

    def __repr__(self):
        return f"DiffForm({self})"

    def __str__(self):
        return format_form(self)


class VectorField:
    """Vector field with sparse components on a chart."""

    __slots__ = ("chart", "components")

    def __init__(self, chart: Chart, components):
        self.chart = chart
        comps = {}
        for k, v in components.items():
            k = _as_symbol(k)
            if k not in chart.coords:
                raise ValueError(f"{k} is not a coordinate of the chart")
            v = ScalarExpr(v)
            if not v.is_zero():
                comps[k] = v
        self.components = comps

    def component(self, coord):
        return self.components.get(_as_symbol(coord), ScalarExpr.zero())

    def __repr__(self):
        body = " + ".join(f"({v})*@{k}" for k, v in self.components.items())
        return f"VectorField({body or '0'})"


class ChartMap:
    """Smooth map between charts given by target-coordinate images."""

    __slots__ = ("source", "target", "images")

    def __init__(self, source: Chart, target: Chart, images):
        self.source = source
        self.target = target
        self.images = {_as_symbol(k): ScalarExpr(v) for k, v in images.items()}
        missing = set(target.coords) - set(self.images)
        if missing:
            raise ValueError(f"missing coordinate images: {sorted(missing, key=str)}")

    def compose(self, inner: "ChartMap") -> "ChartMap":
        """self after inner: inner.source -> self.target."""
        if inner.target != self.source:
            raise ChartMismatch("charts do not compose")
        images = {
            k: substitute(v, {s: inner.images[s] for s in self.source.coords})
            for k, v in self.images.items()
        }
        return ChartMap(inner.source, self.target, images)


# -- operations -------------------------------------------------------


def wedge(a: DiffForm, b: DiffForm) -> DiffForm:
    if a.chart != b.chart:
        raise ChartMismatch("wedge of forms on different charts")
    degree = a.degree + b.degree
    terms = {}
    for ia, ca in a.terms.items():
        for ib, cb in b.terms.items():
            sign, merged = _merge_indices(ia, ib)
            if sign == 0:
                continue
            coeff = ca * cb if sign > 0 else -(ca * cb)
            terms[merged] = terms[merged] + coeff if merged in terms else coeff
    return DiffForm(a.chart, degree, terms)


def wedge_all(forms):
    forms = list(forms)
    out = forms[0]
    for f in forms[1:]:
        out = wedge(out, f)
    return out


def exterior_derivative(a: DiffForm) -> DiffForm:
    chart = a.chart
    terms = {}
    for idx, coeff in a.terms.items():
        for s in coeff.free_symbols:
            if s not in chart.coords:
                continue
            deriv = ScalarExpr(sp.diff(coeff.expr, s))
            if deriv.is_zero():
                continue
            sign, merged = _merge_indices((chart.index(s),), idx)
            if sign == 0:
                continue
            add = deriv if sign > 0 else -deriv
            terms[merged] = terms[merged] + add if merged in terms else add
    return DiffForm(chart, a.degree + 1, terms)


def interior_product(X: VectorField, a: DiffForm) -> DiffForm:
    if X.chart != a.chart:
        raise ChartMismatch("vector and form on different charts")
    if a.degree < 1:
        raise DegreeZero("cannot contract a 0-form")
    chart = a.chart
    terms = {}
    for idx, coeff in a.terms.items():
        for pos, i in enumerate(idx):
            comp = X.components.get(chart.coords[i])
            if comp is None:
                continue
            rest = idx[:pos] + idx[pos + 1:]
            add = coeff * comp
            if pos % 2:
                add = -add
            terms[rest] = terms[rest] + add if rest in terms else add
    return DiffForm(chart, a.degree - 1, terms)


def lie_derivative(X: VectorField, a: DiffForm) -> DiffForm:
    if X.chart != a.chart:
        raise ChartMismatch("vector and form on different charts")
    da = exterior_derivative(a)
    inner_da = interior_product(X, da)
    if a.degree == 0:
        return inner_da
    return inner_da + exterior_derivative(interior_product(X, a))


def pullback(f: ChartMap, a: DiffForm) -> DiffForm:
    if a.chart != f.target:
        raise ChartMismatch("form does not live on the map's target chart")
    src = f.source
    bindings = {k: v for k, v in f.images.items()}
    # exterior derivatives of the coordinate images, as source 1-forms
    d_images = {}
    for tcoord, image in f.images.items():
        terms = {}
        for s in image.free_symbols:
            if s in src.coords:
                dv = ScalarExpr(sp.diff(image.expr, s))
                if not dv.is_zero():
                    terms[(src.index(s),)] = dv
        d_images[tcoord] = DiffForm(src, 1, terms)
    out = DiffForm.zero(src, a.degree)
    for idx, coeff in a.terms.items():
        pulled_coeff = substitute(coeff, bindings)
        if pulled_coeff.is_zero():
            continue
        piece = DiffForm.scalar(src, pulled_coeff)
        for i in idx:
            piece = wedge(piece, d_images[a.chart.coords[i]])
            if piece.is_zero():
                break
        out = out + piece
    return out


def slice_chart(chart: Chart, coord) -> Chart:
    return chart.drop_coord(coord)


def inclusion_map(chart: Chart, coord, value) -> ChartMap:
    """The inclusion of the coordinate slice {coord = value}."""
    c = _as_symbol(coord)
    sub = slice_chart(chart, c)
    images = {x: ScalarExpr(x) for x in chart.coords if x != c}
    images[c] = ScalarExpr(sp.Rational(value))
    return ChartMap(sub, chart, images)


def restrict_to_slice(a: DiffForm, coord, value) -> DiffForm:
    """Substitute coord=value and delete terms containing d(coord)."""
    chart = a.chart
    c = _as_symbol(coord)
    ci = chart.index(c)
    sub = slice_chart(chart, c)
    value = sp.Rational(value)
    terms = {}
    for idx, coeff in a.terms.items():
        if ci in idx:
            continue
        new_idx = tuple(sub.index(chart.coords[i]) for i in idx)
        new_coeff = substitute(coeff, {c: value})
        if not new_coeff.is_zero():
            terms[new_idx] = terms.get(new_idx, ScalarExpr.zero()) + new_coeff
    return DiffForm(sub, a.degree, terms)


def hodge_star_semibasic(a: DiffForm) -> DiffForm:
    chart = a.chart
    if chart.metric is None:
        raise NoMetric("chart has no metric")
    if not a.is_semibasic():
        raise NotSemibasic("form has fiber-differential terms")
    base_idx = [chart.index(c) for c in chart.base_coords]
    n = len(base_idx)
    if a.degree > n:
        return DiffForm.zero(chart, 0)
    det = sp.Integer(1)
    for c in chart.base_coords:
        det *= chart.metric[c]
    dens = sp.sqrt(abs(det))
    if not dens.is_rational:
        raise ValueError("metric determinant is not a rational square")
    pos = {ci: k for k, ci in enumerate(base_idx)}
    terms = {}
    for idx, coeff in a.terms.items():
        members = [pos[i] for i in idx]
        comp = [k for k in range(n) if k not in members]
        sign, _ = _merge_indices(tuple(members), tuple(comp))
        factor = sp.Rational(chart.orientation) * dens * sign
        for k in members:
            factor /= chart.metric[chart.base_coords[k]]
        new_idx = tuple(sorted(base_idx[k] for k in comp))
        add = coeff * ScalarExpr(factor)
        terms[new_idx] = terms.get(new_idx, ScalarExpr.zero()) + add
    return DiffForm(chart, n - a.degree, terms)


def canonical_form(chart: Chart, k: int) -> DiffForm:
    """Tautological k-form on a chart of k-forms: sum of alpha_I dx^I."""
    labeled = {
        sym: label for sym, label in chart.form_labels.items() if len(label) == k
    }
    if not labeled:
        raise BadChartLabeling(f"no fiber coordinates labeled by base {k}-tuples")
    nbase = len(chart.base_coords)
    terms = {}
    for sym, label in sorted(labeled.items(), key=lambda kv: kv[1]):
        if any(
            not (0 <= i < nbase) for i in label
        ) or any(label[i] >= label[i + 1] for i in range(len(label) - 1)):
            raise BadChartLabeling(f"label {label} of {sym} is not increasing in range")
        idx = tuple(chart.index(chart.base_coords[i]) for i in label)
        idx_sorted = tuple(sorted(idx))
        if idx != idx_sorted:
            raise BadChartLabeling("base coordinates out of order for labels")
        terms[idx] = ScalarExpr(sym)
    return DiffForm(chart, k, terms)


def format_form(a: DiffForm) -> str:
    if a.is_zero():
        return "0"
    chart = a.chart
    parts = []
    for idx in sorted(a.terms):
        coeff = a.terms[idx]
        basis = "^".join(f"d{chart.coords[i]}" for i in idx)
        cstr = str(coeff)
        if not basis:
            parts.append(cstr)
        elif cstr == "1":
            parts.append(basis)
        elif cstr == "-1":
            parts.append(f"-{basis}")
        elif coeff.expr.is_Symbol or (coeff.expr.is_Integer and coeff.expr > 0):
            parts.append(f"{cstr}*{basis}")
        else:
            parts.append(f"({cstr})*{basis}")
    out = parts[0]
    for p in parts[1:]:
        out += f" - {p[1:]}" if p.startswith("-") else f" + {p}"
    return out

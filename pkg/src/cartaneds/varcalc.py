"""Variational layer over the exterior calculus.

Builds Euler-Lagrange and Hamilton-Cartan exterior systems from variational
problems, constructs local Lepage equivalents with multiplier coordinates,
derives slice presymplectic data (an ultralocal two-form density and a
Hamiltonian density), and runs a formal constraint algorithm over
differential polynomials on the slice.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import sympy as sp

from .errors import (
    GeneratorNotZ1,
    LeadingDerivativeUnsolvable,
    NotUltralocal,
    SyzygyDetected,
    TauInvarianceFailed,
)
from .forms import (
    Chart,
    DiffForm,
    VectorField,
    exterior_derivative,
    interior_product,
    lie_derivative,
    restrict_to_slice,
    wedge,
    wedge_all,
)
from .scalars import ScalarExpr, factor_simple, make_symbol
from . import eds as eds_mod
from .eds import ExteriorSystem, algebraic_reduce, cartan_kuranishi, differential_closure, slice_eds

DEFAULT_SEED = 0


def _as_symbol(s):
    return s if isinstance(s, sp.Symbol) else make_symbol(s)


# ---------------------------------------------------------------------------
# Jet calculus on a slice: differential polynomials in field derivatives
# ---------------------------------------------------------------------------


class JetContext:
    """Registry of field symbols and their derivative symbols on a slice.

    A derivative symbol is named ``<field>_<indices>`` where the indices are
    the slice coordinates of the multi-index in coordinate order, e.g.
    ``q_xy`` for the x,y-derivative of q. Derivative symbols are created on
    demand and are totally ordered by (field position, multi-index length,
    multi-index lexicographic position).
    """

    def __init__(self, coords, fields):
        self.coords = tuple(_as_symbol(c) for c in coords)
        self.fields = []
        self._by_key = {}
        self._info = {}
        for f in fields:
            self.register_field(f)

    def register_field(self, f):
        f = _as_symbol(f)
        if f not in self.fields:
            self.fields.append(f)
            self._by_key[(f, ())] = f
            self._info[f] = (f, ())
        return f

    def _canon_multi(self, multi):
        multi = tuple(_as_symbol(c) for c in multi)
        for c in multi:
            if c not in self.coords:
                raise ValueError(f"{c} is not a slice coordinate")
        return tuple(sorted(multi, key=self.coords.index))

    def jet(self, fld, multi):
        fld = self.register_field(fld)
        multi = self._canon_multi(multi)
        key = (fld, multi)
        if key not in self._by_key:
            name = fld.name + "_" + "".join(c.name for c in multi)
            s = sp.Symbol(name)
            self._by_key[key] = s
            self._info[s] = key
        return self._by_key[key]

    def info(self, sym):
        """(field, multi-index) of a registered derivative symbol, else None."""
        return self._info.get(sym)

    def jets_in(self, expr):
        """Registered field/derivative symbols occurring in an expression."""
        return [s for s in sp.sympify(expr).free_symbols if s in self._info]

    def jet_key(self, sym):
        """Total-order key: (field position, |J|, J positions)."""
        fld, multi = self._info[sym]
        return (
            self.fields.index(fld),
            len(multi),
            tuple(self.coords.index(c) for c in multi),
        )

    def display_key(self, sym):
        """Printing/normalization order key: (|J|, field position, J positions)."""
        fld, multi = self._info[sym]
        return (
            len(multi),
            self.fields.index(fld),
            tuple(self.coords.index(c) for c in multi),
        )

    # -- differential operators ---------------------------------------

    def total_derivative(self, expr, coord):
        coord = _as_symbol(coord)
        expr = sp.sympify(expr)
        out = sp.diff(expr, coord)
        for s in self.jets_in(expr):
            fld, multi = self._info[s]
            out += sp.diff(expr, s) * self.jet(fld, multi + (coord,))
        return sp.expand(out)

    def total_derivative_multi(self, expr, multi):
        for c in self._canon_multi(multi):
            expr = self.total_derivative(expr, c)
        return expr

    def euler(self, expr, fld):
        """Variational derivative: sum over J of (-1)^|J| D_J(d expr/d fld_J)."""
        fld = _as_symbol(fld)
        expr = sp.sympify(expr)
        out = sp.Integer(0)
        for s in self.jets_in(expr):
            f2, multi = self._info[s]
            if f2 != fld:
                continue
            term = sp.diff(expr, s)
            for c in multi:
                term = self.total_derivative(term, c)
            out += (-1) ** len(multi) * term
        return sp.expand(out)


@dataclass(frozen=True)
class Density:
    """Differential polynomial density on a slice."""

    ctx: JetContext
    expr: sp.Expr

    def __post_init__(self):
        object.__setattr__(self, "expr", sp.sympify(self.expr))

    @property
    def slice_fields(self):
        return tuple(self.ctx.fields)

    def is_zero(self):
        return sp.cancel(self.expr) == 0

    def __eq__(self, other):
        if isinstance(other, Density):
            other = other.expr
        return sp.cancel(self.expr - sp.sympify(other)) == 0

    def __hash__(self):
        return hash(sp.cancel(self.expr))

    def __str__(self):
        return sp.sstr(self.expr, order="grlex")

    def __repr__(self):
        return f"Density({self.expr})"


def total_derivative(d: Density, slice_coord) -> Density:
    return Density(d.ctx, d.ctx.total_derivative(d.expr, slice_coord))


def euler_operator(d: Density, fld) -> Density:
    return Density(d.ctx, d.ctx.euler(d.expr, fld))


# ---------------------------------------------------------------------------
# Variational problems and Lepage equivalents
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariationalProblem:
    chart: Chart
    prolongation_eds: Optional[ExteriorSystem]
    lagrangian: DiffForm
    lepage_sign: int = 1

    def __post_init__(self):
        if self.lepage_sign not in (1, -1):
            raise ValueError("lepage_sign must be +1 or -1")
        n = len(self.chart.base_coords)
        if not self.lagrangian.is_zero() and self.lagrangian.degree != n:
            raise ValueError("lagrangian degree must equal the base dimension")

    @property
    def generators(self):
        if self.prolongation_eds is None:
            return ()
        return self.prolongation_eds.generators


@dataclass(frozen=True)
class LepageProblem:
    chart: Chart
    lepage_form: DiffForm
    multiplier_symbols: tuple  # tuple of tuples, one group per generator
    lepage_sign: int = 1
    lagrangian: Optional[DiffForm] = None
    generators: tuple = ()  # prolongation generators, transferred to the chart
    field_order: Optional[tuple] = None
    multiplier_monomials: tuple = ()  # base index tuples, parallel to symbols


def _transfer(a: DiffForm, new_chart: Chart) -> DiffForm:
    """Move a form to an extended chart that appends coordinates at the end."""
    old, new = a.chart.coords, new_chart.coords
    if new[: len(old)] != old:
        raise ValueError("chart extension must append coordinates")
    return DiffForm(new_chart, a.degree, dict(a.terms))


def _vertical_pairs_kill(a: DiffForm) -> bool:
    base = {a.chart.index(c) for c in a.chart.base_coords}
    return all(sum(1 for i in idx if i not in base) <= 1 for idx in a.terms)


def euler_lagrange_eds(P: VariationalProblem, seed: int = DEFAULT_SEED) -> ExteriorSystem:
    """Generators V .| d(lagrangian) for vertical V, joined with the
    prolongation system and differentially closed."""
    chart = P.chart
    gens = []
    if not P.lagrangian.is_zero():
        dl = exterior_derivative(P.lagrangian)
        for v in chart.fiber_coords:
            g = interior_product(VectorField(chart, {v: 1}), dl)
            if not g.is_zero():
                gens.append(g)
    gens.extend(P.generators)
    S = ExteriorSystem(
        chart=chart,
        generators=tuple(g for g in gens if g.degree >= 1),
        zero_forms=tuple(
            c for g in gens if g.degree == 0 for c in g.terms.values()
        ),
        independence=chart.base_coords,
    )
    return differential_closure(S)


def build_lepage_local(
    P: VariationalProblem,
    multipliers=None,
    seed: int = DEFAULT_SEED,
) -> LepageProblem:
    """Extend the chart with multiplier coordinates and assemble the Lepage
    form  sum_l beta_l ^ alpha_l + lepage_sign * lagrangian,  where beta_l is
    a semibasic form of complementary degree with one fresh coordinate per
    base monomial.

    `multipliers` optionally names the components: a list with one entry per
    generator, each a list of (name, base-coordinate tuple) pairs covering
    the full semibasic basis of the complementary degree.
    """
    chart = P.chart
    n = len(chart.base_coords)
    gens = P.generators
    for g in gens:
        if not _vertical_pairs_kill(g):
            raise GeneratorNotZ1(
                f"generator {g} is not annihilated by pairs of vertical vectors"
            )
        if g.degree > n:
            raise ValueError("generator degree exceeds the base dimension")

    base_idx = [chart.index(c) for c in chart.base_coords]

    groups = []  # per generator: list of (symbol, base index tuple)
    taken = set(chart.coords)
    for l, g in enumerate(gens):
        deg = n - g.degree
        monomials = list(itertools.combinations(base_idx, deg))
        if multipliers is not None:
            named = multipliers[l]
            if len(named) != len(monomials):
                raise ValueError(
                    f"generator {l}: expected {len(monomials)} multiplier "
                    f"components, got {len(named)}"
                )
            group = []
            for name, mono in named:
                idx = tuple(sorted(chart.index(c) for c in mono))
                group.append((_as_symbol(name), idx))
            covered = sorted(i for _, i in group)
            if covered != sorted(monomials):
                raise ValueError(
                    f"generator {l}: multiplier monomials do not cover the "
                    "semibasic basis"
                )
        else:
            group = []
            for mono in monomials:
                stem = f"beta{l}" + ("_" + "".join(str(i) for i in mono) if mono else "")
                s = _as_symbol(stem)
                group.append((s, mono))
        for s, _ in group:
            if s in taken:
                raise ValueError(f"multiplier coordinate {s} collides with the chart")
            taken.add(s)
        groups.append(group)

    new_coords = chart.coords + tuple(s for grp in groups for s, _ in grp)
    form_labels = dict(chart.form_labels)
    for grp in groups:
        for s, mono in grp:
            if mono:
                form_labels[s] = tuple(mono)
    new_chart = chart.with_coords(coords=new_coords, form_labels=form_labels)

    # syzygy check: no nontrivial semibasic combination sum beta_l ^ alpha_l = 0
    if gens:
        dummies = []
        combo = DiffForm.zero(new_chart, n)
        for l, g in enumerate(gens):
            gx = _transfer(g, new_chart)
            for mono in itertools.combinations(base_idx, n - g.degree):
                b = sp.Dummy(f"syz{l}")
                dummies.append(b)
                mono_form = wedge_all(
                    [DiffForm(new_chart, 1, {(i,): 1}) for i in mono]
                ) if mono else DiffForm.scalar(new_chart, 1)
                combo = combo + wedge(DiffForm.scalar(new_chart, b) * mono_form, gx)
        rows = []
        for coeff in combo.terms.values():
            rows.append([sp.diff(coeff.expr, b) for b in dummies])
        if rows:
            from .scalars import generic_point

            mat = sp.Matrix(rows)
            syms = sorted(
                (s for s in mat.free_symbols if not isinstance(s, sp.Dummy)),
                key=lambda s: s.name,
            )
            if syms:
                pt = generic_point(syms, [], seed)
                mat = mat.subs(pt)
            if mat.rank() < len(dummies):
                raise SyzygyDetected(
                    "the prolongation generators admit a semibasic syzygy of top degree"
                )

    lam = _transfer(P.lagrangian, new_chart)
    lepage = DiffForm.zero(new_chart, n)
    xfer_gens = tuple(_transfer(g, new_chart) for g in gens)
    for grp, gx in zip(groups, xfer_gens):
        beta = DiffForm(new_chart, n - gx.degree, {mono: sp.Symbol(s.name) for s, mono in grp})
        lepage = lepage + wedge(beta, gx)
    if not lam.is_zero():
        lepage = lepage + lam * ScalarExpr(P.lepage_sign)

    return LepageProblem(
        chart=new_chart,
        lepage_form=lepage,
        multiplier_symbols=tuple(tuple(s for s, _ in grp) for grp in groups),
        lepage_sign=P.lepage_sign,
        lagrangian=lam,
        generators=xfer_gens,
        multiplier_monomials=tuple(tuple(m for _, m in grp) for grp in groups),
    )


def _multiplier_witness(L: LepageProblem) -> DiffForm:
    """The explicit ideal element sum_l beta_l ^ alpha_l."""
    n = len(L.chart.base_coords)
    out = DiffForm.zero(L.chart, n)
    for syms, monos, g in zip(L.multiplier_symbols, L.multiplier_monomials, L.generators):
        beta = DiffForm(L.chart, n - g.degree, {m: sp.Symbol(s.name) for s, m in zip(syms, monos)})
        out = out + wedge(beta, g)
    return out


def lepage_defect(L: LepageProblem) -> DiffForm:
    """lepage_form - lepage_sign*lagrangian minus its explicit ideal witness
    sum beta_l ^ alpha_l; zero exactly when the Lepage equivalent contract
    holds, with the multipliers exhibiting the ideal membership."""
    diff = L.lepage_form
    if L.lagrangian is not None and not L.lagrangian.is_zero():
        diff = diff - L.lagrangian * ScalarExpr(L.lepage_sign)
    if L.generators:
        diff = diff - _multiplier_witness(L)
    return diff


# ---------------------------------------------------------------------------
# Hamilton-Cartan system: contraction and generator extraction
# ---------------------------------------------------------------------------


def _base_divisor(a: DiffForm, base_idx):
    """Largest base monomial I with a == dx^I ^ c exactly; returns (I, c)."""
    present = set.intersection(*(set(t) for t in a.terms)) if a.terms else set()
    candidates = sorted(present & set(base_idx))
    for size in range(len(candidates), -1, -1):
        for I in itertools.combinations(candidates, size):
            c = _divide_exact(a, I)
            if c is not None:
                return tuple(I), c
    return (), a


def _divide_exact(a: DiffForm, I):
    """c with dx^I ^ c == a, or None."""
    I = tuple(I)
    if not I:
        return a
    terms = {}
    for idx, coeff in a.terms.items():
        if not set(I) <= set(idx):
            return None
        rest = tuple(i for i in idx if i not in I)
        sign = _merge_sign(I, rest)
        if sign == 0:
            return None
        terms[rest] = coeff * sign
    c = DiffForm(a.chart, a.degree - len(I), terms)
    probe = wedge(_monomial(a.chart, I), c)
    if not (probe - a).is_zero():
        return None
    return c


def _monomial(chart, I):
    out = DiffForm.scalar(chart, 1)
    for i in I:
        out = wedge(out, DiffForm(chart, 1, {(i,): 1}))
    return out


def _merge_sign(I, rest):
    seq = list(I) + list(rest)
    if len(set(seq)) != len(seq):
        return 0
    sign = 1
    for i in range(len(seq)):
        for j in range(i + 1, len(seq)):
            if seq[i] > seq[j]:
                sign = -sign
    return sign


def _extract_generators(members, chart):
    """Merge contraction results sharing a common core form.

    Each member is (fiber coord, divisor I, core candidate, raw form) with
    raw == dx^I ^ core. Members of equal core degree are greedily grouped
    when a single common core reproduces every raw form; the group core
    coefficient at a monomial w is read off any member whose divisor is
    disjoint from w. Groups that fail verification fall back to singletons.
    """
    groups = []
    for mem in members:
        placed = False
        for grp in groups:
            if grp[0][2].degree == mem[2].degree and _try_merge(grp + [mem], chart):
                grp.append(mem)
                placed = True
                break
        if not placed:
            groups.append([mem])
    base_idx = [chart.index(c) for c in chart.base_coords]
    out = []
    for grp in groups:
        core = _try_merge(grp, chart)
        div_len = len(grp[0][1])
        # Dividing out a base monomial only preserves the integral-element
        # conditions when the divisors run over the whole monomial basis of
        # that degree (or the core is a scalar under a full volume factor).
        covered = {tuple(sorted(m[1])) for m in grp}
        complete = covered >= set(itertools.combinations(sorted(base_idx), div_len))
        if core is not None and (div_len == 0 or complete or core.degree == 0):
            out.append((core, [m[3] for m in grp]))
        else:
            for m in grp:
                keep = m[2] if (not m[1] or m[2].degree == 0) else m[3]
                out.append((keep, [m[3]]))
    return out


def _try_merge(grp, chart):
    """Common core for a member group, or None."""
    deg = grp[0][2].degree
    core_terms = {}
    monos = set()
    for _, I, _, raw in grp:
        for idx in raw.terms:
            rest = tuple(i for i in idx if i not in I)
            if len(rest) == deg:
                monos.add(rest)
    for w in monos:
        vals = []
        for _, I, _, raw in grp:
            if set(w) & set(I):
                continue
            sign = _merge_sign(I, w)
            merged = tuple(sorted(set(I) | set(w)))
            coeff = raw.terms.get(merged, ScalarExpr.zero()) * sign
            vals.append(coeff)
        if not vals:
            return None
        for v in vals[1:]:
            if not (v - vals[0]).is_zero():
                return None
        if not vals[0].is_zero():
            core_terms[w] = vals[0]
    core = DiffForm(chart, deg, core_terms)
    for _, I, _, raw in grp:
        if not (wedge(_monomial(chart, I), core) - raw).is_zero():
            return None
    return core


def _sign_normalize_form(a: DiffForm) -> DiffForm:
    if a.is_zero():
        return a
    lead = max(a.terms)
    if _leading_numeric_negative(a.terms[lead].expr):
        return -a
    return a


def _leading_numeric_negative(e) -> bool:
    e = sp.expand(e)
    terms = sp.Add.make_args(e)
    lead = sorted(terms, key=sp.default_sort_key)[0]
    coeff, _ = lead.as_coeff_Mul()
    return bool(coeff.is_negative)


def hamilton_cartan_detailed(L: LepageProblem):
    """(system, primary generator list) for the Lepage problem."""
    chart = L.chart
    omega = exterior_derivative(L.lepage_form)
    base_idx = [chart.index(c) for c in chart.base_coords]
    members = []
    for v in chart.fiber_coords:
        g = interior_product(VectorField(chart, {v: 1}), omega)
        if g.is_zero():
            continue
        I, core = _base_divisor(g, base_idx)
        members.append((v, I, core, g))
    mult_info = {}
    for l, (syms, monos) in enumerate(
        zip(L.multiplier_symbols, L.multiplier_monomials)
    ):
        for s, m in zip(syms, monos):
            mult_info[s] = (l, tuple(m))

    zero_forms = []
    gens = []
    buckets = {}
    for core, raws in _extract_generators(members, chart):
        if core.degree == 0:
            # a semibasic algebraic condition: record the scalar, and try to
            # reassemble the conditions of one multiplier group into the
            # semibasic form equation they express
            z = _sign_normalize_form(core)
            zero_forms.extend(z.terms.values())
            expr = core.terms.get((), ScalarExpr.zero()).expr
            slot = None
            for s, (l, mono) in mult_info.items():
                coeff = sp.diff(expr, s)
                if coeff != 0 and coeff.is_Rational and mono:
                    slot = (l, mono, sp.cancel(expr / coeff))
                    break
            if slot is not None:
                l, mono, oriented = slot
                buckets.setdefault(l, {})[mono] = oriented
            else:
                gens.extend(_sign_normalize_form(r) for r in raws)
            continue
        g = _sign_normalize_form(core)
        if g.is_semibasic():
            zero_forms.extend(g.terms.values())
        gens.append(g)
    for l in sorted(buckets):
        parts = buckets[l]
        deg = len(next(iter(parts)))
        gens.append(DiffForm(chart, deg, {m: v for m, v in parts.items()}))
    S = ExteriorSystem(
        chart=chart,
        generators=tuple(gens),
        zero_forms=tuple(zero_forms),
        independence=chart.base_coords,
    )
    return differential_closure(S), tuple(gens)


def hamilton_cartan(L: LepageProblem) -> ExteriorSystem:
    return hamilton_cartan_detailed(L)[0]


# ---------------------------------------------------------------------------
# Slice dynamics
# ---------------------------------------------------------------------------


@dataclass
class SliceDynamics:
    ctx: JetContext
    omega_matrix: sp.Matrix
    hamiltonian: Density
    field_order: tuple
    time_coord: sp.Symbol = None
    value: sp.Rational = None

    def __post_init__(self):
        if self.omega_matrix.T != -self.omega_matrix:
            raise ValueError("omega_matrix must be skew-symmetric")


def slice_dynamics(L: LepageProblem, time_coord, value, field_order=None) -> SliceDynamics:
    chart = L.chart
    time_coord = _as_symbol(time_coord)
    slice_coords = tuple(c for c in chart.base_coords if c != time_coord)
    if field_order is None:
        field_order = L.field_order or chart.fiber_coords
    field_order = tuple(_as_symbol(f) for f in field_order)
    ctx = JetContext(slice_coords, field_order)

    omega_form = restrict_to_slice(
        exterior_derivative(L.lepage_form), time_coord, value
    )
    sl_chart = omega_form.chart
    base_pos = {sl_chart.index(c) for c in slice_coords}
    vol_idx = tuple(sorted(base_pos))
    fpos = {sl_chart.index(f): f for f in field_order if f in sl_chart.coords}

    nf = len(field_order)
    omega = sp.zeros(nf, nf)
    for idx, coeff in omega_form.terms.items():
        fib = [i for i in idx if i not in base_pos]
        if len(fib) != 2:
            raise NotUltralocal(
                f"restricted presymplectic form has a non-pairing term at {idx}"
            )
        f_i, g_i = fib
        target = [f_i, g_i] + [i for i in idx if i in base_pos]
        sign = _perm_sign(list(idx), target)
        a = field_order.index(fpos[f_i])
        b = field_order.index(fpos[g_i])
        val = (coeff * sign).expr
        omega[a, b] += val
        omega[b, a] -= val

    ham_form = restrict_to_slice(
        interior_product(VectorField(chart, {time_coord: 1}), L.lepage_form),
        time_coord,
        value,
    )
    h_expr = sp.Integer(0)
    for idx, coeff in ham_form.terms.items():
        jets = sp.Integer(1)
        spatial = []
        fib = [i for i in idx if i not in base_pos]
        # expand each fiber differential into first derivatives along the slice
        expansions = []
        for i in fib:
            fld = sl_chart.coords[i]
            expansions.append(
                [(ctx.jet(fld, (c,)), sl_chart.index(c)) for c in slice_coords]
            )
        base_part = [i for i in idx if i in base_pos]
        for choice in itertools.product(*expansions) if fib else [()]:
            seq = []
            fac = sp.Integer(1)
            ok = True
            pos_iter = iter(idx)
            chosen = dict(zip(fib, choice))
            for i in idx:
                if i in base_pos:
                    seq.append(i)
                else:
                    jet_sym, new_i = chosen[i]
                    fac *= jet_sym
                    seq.append(new_i)
            if len(set(seq)) != len(seq):
                continue
            sign = _perm_sign(seq, list(vol_idx))
            if sign == 0 or tuple(sorted(seq)) != vol_idx:
                continue
            h_expr += coeff.expr * fac * sign
    h_expr = sp.expand(h_expr)
    return SliceDynamics(
        ctx=ctx,
        omega_matrix=omega,
        hamiltonian=Density(ctx, h_expr),
        field_order=field_order,
        time_coord=time_coord,
        value=sp.Rational(value),
    )


def _perm_sign(seq, target):
    if sorted(seq) != sorted(target):
        return 0
    seq = list(seq)
    sign = 1
    for i, t in enumerate(target):
        j = seq.index(t)
        if j != i:
            seq[i], seq[j] = seq[j], seq[i]
            sign = -sign
    return sign


def kernel_omega(S: SliceDynamics):
    """Exact null-space basis of the presymplectic matrix, with recorded
    nonvanishing-denominator assumptions."""
    vecs = S.omega_matrix.nullspace()
    out = []
    assumptions = []
    for v in vecs:
        comps = {}
        for f, entry in zip(S.field_order, v):
            entry = sp.cancel(entry)
            if entry != 0:
                comps[f] = entry
                den = sp.fraction(entry)[1]
                if den.free_symbols:
                    assumptions.append(den)
        out.append(comps)
    return out, assumptions


def hamiltonian_vector(S: SliceDynamics, constraint: Density, test_symbol, max_ibp_order: int = 4):
    """Solve omega^T X = grad(int f*constraint); None when inconsistent.

    Components along kernel directions are set to zero; entries may involve
    the test symbol and its slice derivatives up to max_ibp_order.
    """
    f = S.ctx.register_field(test_symbol)
    dens = sp.expand(f * sp.sympify(constraint.expr if isinstance(constraint, Density) else constraint))
    grad = sp.Matrix([S.ctx.euler(dens, g) for g in S.field_order])
    nf = len(S.field_order)
    unknowns = [sp.Dummy(f"X{i}") for i in range(nf)]
    A = S.omega_matrix.T
    sol = sp.linsolve((A, grad), unknowns)
    if sol is sp.EmptySet or len(sol) == 0:
        return None
    vec = list(sol)[0]
    free = set().union(*(v.free_symbols for v in vec)) & set(unknowns)
    vec = [sp.cancel(v.subs({u: 0 for u in free})) for v in vec]
    for v in vec:
        for s in S.ctx.jets_in(v):
            fld, multi = S.ctx.info(s)
            if fld == f and len(multi) > max_ibp_order:
                return None
    return {g: v for g, v in zip(S.field_order, vec) if v != 0}


def _dh_along(S: SliceDynamics, X: dict):
    """dH evaluated on a variation vector: sum_g sum_J dH/dg_J D_J(X_g)."""
    H = S.hamiltonian.expr
    out = sp.Integer(0)
    for s in S.ctx.jets_in(H):
        fld, multi = S.ctx.info(s)
        Xg = X.get(fld, sp.Integer(0))
        if Xg == 0:
            continue
        out += sp.diff(H, s) * S.ctx.total_derivative_multi(Xg, multi)
    return sp.expand(out)


# ---------------------------------------------------------------------------
# Constraint algorithm
# ---------------------------------------------------------------------------


@dataclass
class ConstraintRound:
    new_constraints: list
    complement_vectors: list
    consequences_used: list
    status: str  # continuing | terminated | singular_split | budget
    singular_factors: list = field(default_factory=list)


@dataclass
class ConstraintChain:
    rounds: list
    ctx: JetContext = None

    @property
    def status(self):
        return self.rounds[-1].status if self.rounds else "terminated"

    def all_constraints(self):
        return [c for r in self.rounds for c in r.new_constraints]


class _Record:
    __slots__ = ("raw", "reduced", "rule", "test", "vector", "consequence")

    def __init__(self, raw, test):
        self.raw = raw
        self.reduced = raw
        self.rule = None
        self.test = test
        self.vector = None
        self.consequence = None


def _orient_rule(ctx: JetContext, expr):
    """(head jet, rhs) solving the constraint for its leading derivative.

    Candidates are derivative/field symbols occurring linearly whose
    coefficient is free of fields and derivatives; the head is maximal in
    the jet total order. None when no candidate exists.
    """
    expr = sp.together(expr)
    num = sp.expand(sp.fraction(expr)[0])
    jets = ctx.jets_in(num)
    best = None
    for s in jets:
        coeff = sp.diff(num, s)
        if coeff == 0:
            continue
        if any(t in ctx._info for t in coeff.free_symbols):
            continue
        if best is None or ctx.jet_key(s) > ctx.jet_key(best[0]):
            best = (s, coeff)
    if best is None:
        return None
    head, coeff = best
    rhs = sp.cancel(-(num - coeff * head) / coeff)
    return head, rhs


def _reduce_mod_rules(ctx: JetContext, expr, rules, depth=60):
    """Rewrite modulo differential consequences of oriented rules.

    rules: dict head symbol -> rhs. A derivative symbol g_J reduces via a
    rule for g_J0 with J0 contained in J by substituting D_{J-J0}(rhs)."""
    expr = sp.sympify(expr)
    for _ in range(depth):
        target = None
        for s in sorted(ctx.jets_in(expr), key=ctx.jet_key, reverse=True):
            fld, multi = ctx.info(s)
            best = None
            for head, rhs in rules.items():
                hf, hm = ctx.info(head)
                if hf != fld:
                    continue
                if not _multi_contains(ctx, multi, hm):
                    continue
                if best is None or len(hm) > len(ctx.info(best[0])[1]):
                    best = (head, rhs)
            if best is not None:
                target = (s, best)
                break
        if target is None:
            break
        s, (head, rhs) = target
        fld, multi = ctx.info(s)
        _, hm = ctx.info(head)
        extra = _multi_difference(multi, hm)
        repl = ctx.total_derivative_multi(rhs, extra)
        expr = sp.expand(expr.subs(s, repl))
    return sp.cancel(expr)


def _multi_contains(ctx, multi, sub):
    m = list(multi)
    for c in sub:
        if c in m:
            m.remove(c)
        else:
            return False
    return True


def _multi_difference(multi, sub):
    m = list(multi)
    for c in sub:
        m.remove(c)
    return tuple(m)


def _normalize_density(ctx: JetContext, expr):
    """Divide out the rational numeric content and fix the overall sign so
    the leading (highest-derivative) term has positive coefficient."""
    expr = sp.cancel(sp.together(expr))
    if expr == 0:
        return expr
    num, den = sp.fraction(expr)
    num = sp.expand(num)
    from fractions import Fraction
    import math

    coeffs = []
    for t in sp.Add.make_args(num):
        c, _ = t.as_coeff_Mul()
        coeffs.append(Fraction(*sp.Rational(c).as_numer_denom()))
    g = Fraction(0)
    for c in coeffs:
        g = Fraction(
            math.gcd(g.numerator * c.denominator, c.numerator * g.denominator),
            g.denominator * c.denominator,
        )
    if g != 0:
        num = sp.expand(num / sp.Rational(g.numerator, g.denominator))
    jets = ctx.jets_in(num)
    if jets:
        lead = max(jets, key=ctx.display_key)
        lc = sp.expand(sp.diff(num, lead))
        if lc == 0:
            terms = [t for t in sp.Add.make_args(num) if lead in t.free_symbols]
            lc = terms[0] if terms else num
        if _leading_numeric_negative(lc):
            num = -num
    elif _leading_numeric_negative(num):
        num = -num
    return sp.cancel(num / den)


def _is_singular_residue(ctx: JetContext, expr):
    """True when the residue factors into a bare field times a derivative
    condition (the degenerate case that halts the algorithm)."""
    num, _ = sp.fraction(sp.cancel(sp.together(expr)))
    try:
        factors, branchable = factor_simple(ScalarExpr(num))
    except ValueError:
        return False
    if not branchable:
        return False
    has_field = False
    has_derivative = False
    for f in factors:
        syms = ctx.jets_in(f.expr)
        if not syms:
            continue
        if len(syms) == 1 and sp.degree(f.expr, syms[0]) == 1:
            fld, multi = ctx.info(syms[0])
            if len(multi) == 0:
                has_field = True
            else:
                has_derivative = True
    return has_field and has_derivative


def gotay_nester(
    S: SliceDynamics,
    max_rounds: int = 10,
    consequence_order: int = 2,
    max_ibp_order: int = 6,
    seed_constraints=(),
) -> ConstraintChain:
    """Formal constraint algorithm on the slice.

    Round 0 extracts primary constraints from dH along the kernel of the
    presymplectic matrix (plus any seeded constraints). Each later round
    finds, for every constraint, a variation vector solving the Hamilton
    equation for it (searching total-derivative consequences when the
    constraint itself has none), evaluates dH on that vector, reduces the
    residue modulo the accumulated substitution rules, and records nonzero
    residues as new constraints. A residue that factors as a bare field
    times a derivative condition halts the algorithm with singular_split.
    """
    ctx = S.ctx
    records = []
    rounds = []
    test_count = [0]

    def fresh_test():
        test_count[0] += 1
        return ctx.register_field(sp.Symbol(f"tst{test_count[0]}"))

    def rules_excluding(rec_skip):
        rules = {}
        for r in records:
            if r is rec_skip or r.rule is None:
                continue
            rules[r.rule[0]] = r.rule[1]
        return rules

    # -- round 0: seeded constraints and kernel primaries --------------
    new0 = []
    vec0 = []
    for c in seed_constraints:
        c = sp.sympify(c.expr if isinstance(c, Density) else c)
        norm = _normalize_density(ctx, c)
        if norm == 0:
            continue
        rec = _Record(norm, fresh_test())
        records.append(rec)
        new0.append(Density(ctx, norm))
    kernel, _assumptions = kernel_omega(S)
    for Z in kernel:
        f = fresh_test()
        X = {g: sp.expand(f * comp) for g, comp in Z.items()}
        residue = ctx.euler(_dh_along(S, X), f)
        norm = _normalize_density(ctx, residue)
        if norm == 0 or any(sp.cancel(norm - r.raw) == 0 for r in records):
            continue
        rec = _Record(norm, fresh_test())
        records.append(rec)
        new0.append(Density(ctx, norm))
        vec0.append(X)
    for rec in records:
        rec.rule = _orient_rule(ctx, rec.reduced)
    rounds.append(
        ConstraintRound(
            new_constraints=new0,
            complement_vectors=vec0,
            consequences_used=[],
            status="terminated" if not new0 else "continuing",
        )
    )
    if not new0:
        return ConstraintChain(rounds=rounds, ctx=ctx)

    # -- later rounds ---------------------------------------------------
    for _ in range(1, max_rounds):
        # refresh reduced forms and rules
        for rec in records:
            rules = rules_excluding(rec)
            red = _reduce_mod_rules(ctx, rec.raw, rules)
            rec.consequence = None
            if sp.cancel(red - rec.raw) != 0:
                rec.reduced = _normalize_density(ctx, red)
            else:
                rec.reduced = rec.raw
            rec.rule = _orient_rule(ctx, rec.reduced)
            if rec.rule is None and rec.reduced != 0:
                warnings.warn(
                    f"constraint {rec.reduced} cannot be oriented into a "
                    "substitution rule",
                    LeadingDerivativeUnsolvable,
                )

        new = []
        vecs = []
        consequences = []
        singular = []
        for rec in records:
            if rec.reduced == 0:
                continue
            X = hamiltonian_vector(S, Density(ctx, rec.raw), rec.test, max_ibp_order)
            used = None
            if X is None and sp.cancel(rec.reduced - rec.raw) != 0:
                X = hamiltonian_vector(
                    S, Density(ctx, rec.reduced), rec.test, max_ibp_order
                )
                if X is not None:
                    used = rec.reduced
            if X is None:
                rules = rules_excluding(rec)
                found = False
                for order in range(1, consequence_order + 1):
                    for multi in itertools.combinations_with_replacement(
                        ctx.coords, order
                    ):
                        cand = ctx.total_derivative_multi(rec.reduced, multi)
                        cand = _reduce_mod_rules(ctx, cand, rules)
                        cand = _normalize_density(ctx, cand)
                        if cand == 0:
                            continue
                        X = hamiltonian_vector(
                            S, Density(ctx, cand), rec.test, max_ibp_order
                        )
                        if X is not None:
                            used = cand
                            found = True
                            break
                    if found:
                        break
            if X is None:
                continue
            rec.vector = X
            if used is not None:
                consequences.append(Density(ctx, used))
            residue = ctx.euler(_dh_along(S, X), rec.test)
            if sp.cancel(residue) == 0:
                continue
            all_rules = {
                r.rule[0]: r.rule[1] for r in records if r.rule is not None
            }
            reduced = _reduce_mod_rules(ctx, residue, all_rules)
            if sp.cancel(reduced) == 0:
                continue
            raw_norm = _normalize_density(ctx, residue)
            if _is_singular_residue(ctx, raw_norm):
                singular.append(Density(ctx, raw_norm))
                continue
            norm = _normalize_density(ctx, reduced)
            if norm == 0:
                continue
            if any(_proportional(norm, r.raw) for r in records) or any(
                _proportional(norm, d.expr) for d in new
            ):
                continue
            new.append(Density(ctx, norm))
            vecs.append(X)
        if singular:
            rounds.append(
                ConstraintRound(
                    new_constraints=[],
                    complement_vectors=vecs,
                    consequences_used=consequences,
                    status="singular_split",
                    singular_factors=singular,
                )
            )
            return ConstraintChain(rounds=rounds, ctx=ctx)
        if not new:
            rounds.append(
                ConstraintRound(
                    new_constraints=[],
                    complement_vectors=vecs,
                    consequences_used=consequences,
                    status="terminated",
                )
            )
            return ConstraintChain(rounds=rounds, ctx=ctx)
        for d in new:
            rec = _Record(d.expr, fresh_test())
            rec.rule = _orient_rule(ctx, rec.raw)
            records.append(rec)
        rounds.append(
            ConstraintRound(
                new_constraints=new,
                complement_vectors=vecs,
                consequences_used=consequences,
                status="continuing",
            )
        )
    rounds[-1].status = "budget"
    return ConstraintChain(rounds=rounds, ctx=ctx)


def _proportional(a, b):
    a, b = sp.cancel(a), sp.cancel(b)
    if a == 0 or b == 0:
        return sp.cancel(a - b) == 0
    q = sp.cancel(a / b)
    return q.is_Rational


class ProjectedConstraints(list):
    """Constraint list with notes about dropped, unprojectable members."""

    def __init__(self, items=(), notes=()):
        super().__init__(items)
        self.notes = list(notes)


def eliminate_auxiliary(chain: ConstraintChain, keep) -> ProjectedConstraints:
    """Project the chain onto the kept fields.

    Builds substitution rules oriented to eliminate non-kept fields, reduces
    every constraint by the other constraints' rules, and keeps the nonzero
    results involving only kept-field derivatives; the rest are dropped with
    a note.
    """
    ctx = chain.ctx
    keep = {ctx.register_field(k) for k in keep}
    cons = [sp.sympify(c.expr) for c in chain.all_constraints()]
    for r in chain.rounds:
        for d in r.singular_factors:
            cons.append(sp.sympify(d.expr))
    rules = []
    for c in cons:
        rule = _orient_aux_rule(ctx, c, keep)
        rules.append(rule)
    out = []
    notes = []
    seen = []
    for i, c in enumerate(cons):
        other = {r[0]: r[1] for j, r in enumerate(rules) if j != i and r is not None}
        red = _reduce_mod_rules(ctx, c, other)
        red = _normalize_density(ctx, red)
        if red == 0:
            continue
        if all(ctx.info(s)[0] in keep for s in ctx.jets_in(red)):
            if not any(_proportional(red, p) for p in seen):
                seen.append(red)
                out.append(Density(ctx, red))
        else:
            notes.append(f"dropped unprojectable constraint {sp.sstr(c)}")
    return ProjectedConstraints(out, notes)


def _orient_aux_rule(ctx, expr, keep):
    num = sp.expand(sp.fraction(sp.together(expr))[0])
    best = None
    for s in ctx.jets_in(num):
        fld, _ = ctx.info(s)
        if fld in keep:
            continue
        coeff = sp.diff(num, s)
        if coeff == 0 or any(t in ctx._info for t in coeff.free_symbols):
            continue
        if best is None or ctx.jet_key(s) > ctx.jet_key(best[0]):
            best = (s, coeff)
    if best is None:
        return None
    head, coeff = best
    return head, sp.cancel(-(num - coeff * head) / coeff)


# ---------------------------------------------------------------------------
# Dirac constraints through the exterior-systems route
# ---------------------------------------------------------------------------


def dirac_via_eds_detailed(
    P: VariationalProblem,
    time_coord,
    value,
    max_steps: int = 6,
    multipliers=None,
    seed: int = DEFAULT_SEED,
):
    time_coord = _as_symbol(time_coord)
    L = build_lepage_local(P, multipliers=multipliers, seed=seed)
    S, _primaries = hamilton_cartan_detailed(L)
    d0 = VectorField(S.chart, {time_coord: 1})
    for g in S.generators:
        lg = lie_derivative(d0, g)
        if not algebraic_reduce(S, lg, seed=seed).is_zero():
            raise TauInvarianceFailed(
                f"Lie derivative of {g} along the time direction leaves the ideal"
            )
    result = cartan_kuranishi(S, S.n, max_steps, seed=seed)
    sliced = slice_eds(result.final, time_coord, value)
    return sliced, result, L


def dirac_via_eds(
    P: VariationalProblem, time_coord, value, max_steps: int = 6, **kw
) -> ExteriorSystem:
    return dirac_via_eds_detailed(P, time_coord, value, max_steps, **kw)[0]

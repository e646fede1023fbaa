"""Exterior differential systems: integral elements, characters, prolongation.

The character notion implemented here follows the codimension-of-polar-space
variant (with reduced characters obtained by deleting the independence
coframe columns); it is close to, but not identical with, the textbook s_k
characters. Involutivity is decided by Cartan's test: the codimension of the
integral-element variety at a generic flag equals the sum of the reduced
characters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import sympy as sp

from .errors import (
    GenericPointExhausted,
    NotCoordinateSolvable,
    NotIntegralFlag,
    NotSolvable,
    RankMismatch,
    UnbranchableVariety,
    GenericityWarning,
)
from .forms import (
    Chart,
    DiffForm,
    VectorField,
    exterior_derivative,
    restrict_to_slice,
    wedge,
)
from .scalars import ScalarExpr, factor_simple, generic_point, make_symbol, substitute

DEFAULT_SEED = 7


# -- rank utilities ---------------------------------------------------


def _iszero(e):
    return sp.cancel(sp.together(e)) == 0


def _eval_at(expr, point):
    """Evaluate an expression at a rational point; xreplace is much faster
    than subs for pure symbol-to-number maps."""
    out = expr.xreplace(point)
    if out.free_symbols:
        out = sp.cancel(out)
    return out


def rank_exact(matrix: sp.Matrix) -> int:
    if not matrix.free_symbols:
        # dense rational matrices: fraction-free elimination over QQ is far
        # faster than generic row reduction
        from sympy.polys.matrices import DomainMatrix

        return DomainMatrix.from_Matrix(matrix, field=True).rank()
    return matrix.rank(iszerofunc=_iszero)


def rank_sampled(matrix: sp.Matrix, seed: int) -> int:
    syms = sorted(matrix.free_symbols, key=lambda s: s.name)
    if not syms:
        return rank_exact(matrix)
    best = 0
    denominators = [
        sp.fraction(sp.cancel(e))[1] for e in matrix if sp.fraction(sp.cancel(e))[1].free_symbols
    ]
    for probe in range(3):
        pt = generic_point(syms, denominators, seed + 1000 * probe)
        numeric = matrix.subs(pt)
        best = max(best, rank_exact(numeric))
    return best


def matrix_rank(matrix: sp.Matrix, seed: int = DEFAULT_SEED) -> int:
    """Exact rank for small matrices, sampled rank for large ones.

    When both methods run (small matrix with symbolic entries) their answers
    must agree; a mismatch is a hard error rather than a silent guess.
    """
    if matrix.rows == 0 or matrix.cols == 0:
        return 0
    small = matrix.rows * matrix.cols <= 400
    if not matrix.free_symbols:
        return rank_exact(matrix)
    if small:
        exact = rank_exact(matrix)
        sampled = rank_sampled(matrix, seed)
        if sampled > exact:
            raise RankMismatch(f"exact rank {exact} but sampled rank {sampled}")
        return exact
    return rank_sampled(matrix, seed)


# -- core data --------------------------------------------------------


@dataclass(frozen=True)
class ExteriorSystem:
    chart: Chart
    generators: tuple
    zero_forms: tuple = ()
    independence: tuple = ()
    closed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(
            self, "zero_forms", tuple(ScalarExpr(z) for z in self.zero_forms)
        )
        indep = tuple(
            c if isinstance(c, sp.Symbol) else make_symbol(c) for c in self.independence
        )
        object.__setattr__(self, "independence", indep)
        for g in self.generators:
            if g.chart != self.chart:
                raise ValueError("generator lives on a different chart")
            if g.degree < 1:
                raise ValueError("generators must have degree >= 1; use zero_forms")
        for c in indep:
            if c not in self.chart.base_coords:
                raise ValueError(f"independence coordinate {c} is not a base coordinate")

    @property
    def n(self):
        return len(self.independence)


@dataclass
class Branch:
    branch_id: str
    solved: dict
    residuals: list
    flags: list
    chosen_factors: list = field(default_factory=list)

    def is_generic(self):
        return "coordinate-condition" not in self.flags


@dataclass
class IntegralVariety:
    system: ExteriorSystem
    n: int
    graph_symbols: dict
    branches: list
    seed: int


@dataclass
class Flag:
    point: dict
    vectors: list
    order: tuple


@dataclass
class CharacterReport:
    characters: list
    reduced_characters: list
    variety_codim: int
    cartan_sum: int
    involutive_at_flag: bool
    branch_id: str


# -- evaluation helpers -----------------------------------------------


def eval_on_vectors(form: DiffForm, vectors) -> ScalarExpr:
    """Evaluate a d-form on d vectors given as coordinate->value maps."""
    chart = form.chart
    d = form.degree
    if len(vectors) != d:
        raise ValueError("vector count must match form degree")
    total = sp.Integer(0)
    for idx, coeff in form.terms.items():
        mat = sp.Matrix(
            d, d, lambda r, c: _component(vectors[r], chart.coords[idx[c]])
        )
        total += coeff.expr * mat.det()
    return ScalarExpr(total)


def _component(vector, coord):
    if isinstance(vector, VectorField):
        return vector.component(coord).expr
    v = vector.get(coord, 0)
    return v.expr if isinstance(v, ScalarExpr) else sp.sympify(v)


def _subsets(items, k):
    items = list(items)
    if k == 0:
        yield ()
        return
    for i in range(len(items) - k + 1):
        for rest in _subsets(items[i + 1:], k - 1):
            yield (items[i],) + rest


# -- differential closure and reduction -------------------------------


def _leading(form: DiffForm):
    idx = max(form.terms)
    return idx, form.terms[idx]


def exterior_reduce(a: DiffForm, generators, budget: int = 400) -> DiffForm:
    """Normal form of a modulo the algebraic span, by exterior division.

    Repeatedly cancels the greatest reducible term of a against a generator
    whose leading index tuple divides it. If the step budget runs out the
    current remainder is returned; callers treat a nonzero remainder as
    not-proven-member, which is always safe.
    """
    gens = [g for g in generators if not g.is_zero() and g.degree <= a.degree]
    if not gens or a.is_zero():
        return a
    leads = [( _leading(g), g) for g in gens]
    remainder = a
    untouchable = set()
    for _ in range(budget):
        if remainder.is_zero():
            break
        candidates = [idx for idx in remainder.terms if idx not in untouchable]
        if not candidates:
            break
        target = max(candidates)
        coeff = remainder.terms[target]
        hit = None
        for (lead_idx, lead_coeff), g in leads:
            if set(lead_idx) <= set(target):
                hit = (lead_idx, lead_coeff, g)
                break
        if hit is None:
            untouchable.add(target)
            continue
        lead_idx, lead_coeff, g = hit
        cof_idx = tuple(i for i in target if i not in lead_idx)
        cofactor = DiffForm(a.chart, len(cof_idx), {cof_idx: ScalarExpr(1)})
        product = wedge(cofactor, g)
        prod_coeff = product.terms.get(target)
        if prod_coeff is None or prod_coeff.is_zero():
            untouchable.add(target)
            continue
        remainder = remainder - (coeff / prod_coeff) * product
    return remainder


def differential_closure(S: ExteriorSystem) -> ExteriorSystem:
    gens = list(S.generators)
    added = True
    while added:
        added = False
        for g in list(gens):
            dg = exterior_derivative(g)
            if dg.is_zero():
                continue
            if any(
                h.degree == dg.degree
                and ((dg - h).is_zero() or (dg + h).is_zero())
                for h in gens
            ):
                continue
            if exterior_reduce(dg, gens).is_zero():
                continue
            gens.append(dg)
            added = True
    return replace(S, generators=tuple(gens), closed=True)


def _solve_one_form_rules(S: ExteriorSystem, seed: int):
    """Orient each degree-1 generator as a rule d(fiber) -> 1-form."""
    chart = S.chart
    base = set(chart.base_coords)
    one_forms = [g for g in S.generators if g.degree == 1]
    rules = {}
    leftover = []
    point_syms = sorted(
        {s for g in one_forms for c in g.terms.values() for s in c.free_symbols},
        key=lambda s: s.name,
    )
    avoid = []
    for g in one_forms:
        g = _apply_diff_rules(g, rules)
        if g.is_zero():
            continue
        fiber_entries = [
            (idx[0], coeff)
            for idx, coeff in g.terms.items()
            if chart.coords[idx[0]] not in base and idx[0] not in rules
        ]
        pivot = None
        if fiber_entries:
            pt = generic_point(point_syms, avoid, seed) if point_syms else {}
            for i, coeff in sorted(fiber_entries):
                if sp.cancel(coeff.expr.subs(pt)) != 0:
                    pivot = (i, coeff)
                    break
        if pivot is None:
            # No fiber differential left to orient (e.g. a semibasic
            # combination); keep it for exterior division instead.
            leftover.append(g)
            continue
        i, coeff = pivot
        rest = DiffForm(chart, 1, {k: v for k, v in g.terms.items() if k != (i,)})
        rules[i] = (-1 / coeff) * rest
        avoid.append(coeff)
    # triangularize: substitute rules into each other to a fixpoint
    for _ in range(len(rules) + 1):
        changed = False
        for i, rhs in list(rules.items()):
            new = _apply_diff_rules(rhs, {j: r for j, r in rules.items() if j != i})
            if not (new - rhs).is_zero():
                rules[i] = new
                changed = True
        if not changed:
            break
    leftover = [
        g
        for g in (_apply_diff_rules(h, rules) for h in leftover)
        if not g.is_zero()
    ]
    return rules, leftover


def _apply_diff_rules(a: DiffForm, rules, depth: int = 0) -> DiffForm:
    if not rules:
        return a
    if depth > 30:
        raise NotSolvable("fiber-differential substitution rules do not triangularize")
    chart = a.chart
    out = DiffForm.zero(chart, a.degree)
    changed = False
    for idx, coeff in a.terms.items():
        piece = DiffForm.scalar(chart, coeff)
        for i in idx:
            if i in rules:
                piece = wedge(piece, rules[i])
                changed = True
            else:
                piece = wedge(piece, DiffForm(chart, 1, {(i,): ScalarExpr(1)}))
        out = out + piece
    if not changed:
        return a
    return _apply_diff_rules(out, rules, depth + 1)


def algebraic_reduce(S: ExteriorSystem, a: DiffForm, seed: int = DEFAULT_SEED) -> DiffForm:
    """Normal form of a modulo the algebraic ideal of S.

    Degree-1 generators are oriented as substitution rules for fiber
    differentials and applied to a fixpoint; remaining higher-degree
    generators reduce by exterior division.
    """
    rules, leftover = _solve_one_form_rules(S, seed)
    reduced = _apply_diff_rules(a, rules)
    higher = list(leftover) + [
        _apply_diff_rules(g, rules) for g in S.generators if g.degree > 1
    ]
    higher = [g for g in higher if not g.is_zero()]
    return exterior_reduce(reduced, higher)


# -- integral varieties -----------------------------------------------


def graph_symbol_table(S: ExteriorSystem):
    chart = S.chart
    table = {}
    for a in chart.fiber_coords:
        for x in S.independence:
            table[(a, x)] = make_symbol(f"p_{a}_{x}")
    return table


def integral_variety(S: ExteriorSystem, n: int = None, seed: int = DEFAULT_SEED) -> IntegralVariety:
    if n is None:
        n = S.n
    if n != S.n:
        raise ValueError("n must equal the length of the independence list")
    if not S.closed:
        S = differential_closure(S)
    chart = S.chart
    table = graph_symbol_table(S)
    vectors = []
    for x in S.independence:
        comp = {x: ScalarExpr(1)}
        for a in chart.fiber_coords:
            comp[a] = ScalarExpr(table[(a, x)])
        vectors.append(comp)
    equations = []
    for g in S.generators:
        if g.degree > n:
            continue
        for tup in _subsets(range(n), g.degree):
            val = eval_on_vectors(g, [vectors[i] for i in tup])
            if not val.is_zero():
                equations.append(val)
    equations.extend(z for z in S.zero_forms if not z.is_zero())
    graph_syms = set(table.values())
    branches = []
    _branch_search(
        chart, graph_syms, equations, {}, [], [], branches, seed, "b"
    )
    branches = _prune_subsumed(branches)
    for i, b in enumerate(branches):
        b.branch_id = f"b{i}"
    return IntegralVariety(S, n, table, branches, seed)


def _branch_search(chart, graph_syms, equations, solved, flags, chosen, out, seed, bid):
    """Depth-first branch decomposition of the integral-element equations."""
    solved = dict(solved)
    flags = list(flags)
    eqs = [substitute(e, solved) for e in equations]
    eqs = [e for e in eqs if not e.is_zero()]

    progress = True
    while progress:
        progress = False
        for k, e in enumerate(eqs):
            pivot = _constant_linear_pivot(e, graph_syms)
            if pivot is None:
                continue
            s, value = pivot
            solved[s] = value
            new_solved = {
                k2: substitute(v2, {s: value}) for k2, v2 in solved.items() if k2 != s
            }
            new_solved[s] = value
            solved = new_solved
            eqs = [substitute(e2, {s: value}) for j, e2 in enumerate(eqs) if j != k]
            eqs = [e2 for e2 in eqs if not e2.is_zero()]
            progress = True
            break

    # try to split a residual into simple factors and branch on them
    for k, e in enumerate(eqs):
        factors, branchable = factor_simple(e)
        unique, seen = [], set()
        for fct in factors:
            key = sp.srepr(fct.expr)
            if key not in seen:
                seen.add(key)
                unique.append(fct)
        splits = len(unique) > 1 or (unique and not (unique[0] - e).is_zero())
        if branchable and splits:
            rest = [e2 for j, e2 in enumerate(eqs) if j != k]
            for fct in unique:
                _branch_search(
                    chart,
                    graph_syms,
                    rest + [fct],
                    solved,
                    flags,
                    chosen + [fct],
                    out,
                    seed,
                    bid,
                )
            return
        if not branchable and not _is_linear_in(e, graph_syms):
            warnings.warn(
                f"residual {e} cannot be split into simple factors",
                UnbranchableVariety,
            )

    # Deduplicate residuals up to a factor free of graph symbols: such a
    # factor is generically nonzero, so both equations cut the same locus
    # near a generic point and keeping both would over-constrain the branch.
    graph_set = set(graph_syms)
    residuals = []
    for e in eqs:
        duplicate = False
        for kept in residuals:
            q = sp.cancel(e.expr / kept.expr)
            if not (q.free_symbols & graph_set) and sp.fraction(q)[1].free_symbols.isdisjoint(graph_set):
                duplicate = True
                break
        if not duplicate:
            residuals.append(e)
    branch_flags = list(flags)
    for e in residuals:
        if not (e.free_symbols & graph_syms):
            branch_flags.append("coordinate-condition")
            break
    out.append(
        Branch(
            branch_id=bid,
            solved=solved,
            residuals=residuals,
            flags=branch_flags,
            chosen_factors=list(chosen),
        )
    )


def _constant_linear_pivot(e, graph_syms):
    """Find a graph symbol appearing linearly with nonzero rational coefficient."""
    candidates = sorted(e.free_symbols & graph_syms, key=lambda s: s.name)
    for s in candidates:
        coeff = sp.diff(e.expr, s)
        if coeff.free_symbols or coeff == 0:
            continue
        if sp.diff(coeff, s) != 0:
            continue
        rest = sp.cancel(e.expr - coeff * s)
        if s in rest.free_symbols:
            continue
        return s, ScalarExpr(sp.cancel(-rest / coeff))
    return None


def _is_linear_in(e, syms):
    expr = e.expr
    present = sorted(expr.free_symbols & syms, key=lambda s: s.name)
    if not present:
        return True
    try:
        poly = sp.Poly(expr, *present)
    except sp.PolynomialError:
        return False
    return poly.total_degree() <= 1


def _prune_subsumed(branches):
    """Drop branches whose chosen-factor set strictly contains another's.

    Duplicated factor sets are also collapsed to the first representative.
    """
    keyed = [
        (frozenset(sp.srepr(f.expr) for f in b.chosen_factors), b) for b in branches
    ]
    kept = []
    seen = set()
    for key, b in keyed:
        if key in seen:
            continue
        if any(other < key for other, _ in keyed):
            continue
        seen.add(key)
        kept.append(b)
    return kept


# -- flags, polar spaces, characters ----------------------------------


def branch_point(S: ExteriorSystem, variety: IntegralVariety, branch: Branch, seed: int):
    """A generic rational point on the branch, for coordinates and jets."""
    graph_syms = set(variety.graph_symbols.values())
    solved_syms = set(branch.solved)
    free_graph = sorted(graph_syms - solved_syms, key=lambda s: s.name)
    coord_syms = list(S.chart.coords)
    all_syms = coord_syms + free_graph
    avoid = []
    for v in branch.solved.values():
        _, den = v.numer_denom()
        if not den.is_rational_constant():
            avoid.append(den)
    residuals = [r for r in branch.residuals]
    for attempt in range(30):
        try:
            pt = generic_point(all_syms, avoid, seed + 101 * attempt)
        except GenericPointExhausted:
            continue
        if residuals:
            pt = _adjust_to_residuals(residuals, pt, free_graph, attempt)
            if pt is None:
                continue
        if any(sp.cancel(a.expr.subs(pt)) == 0 for a in avoid):
            continue
        full = dict(pt)
        ok = True
        for s, v in branch.solved.items():
            val = sp.cancel(v.expr.subs(pt))
            if val.free_symbols:
                ok = False
                break
            full[s] = sp.Rational(val)
        if not ok:
            continue
        return full
    raise GenericPointExhausted("no generic point on branch")


def _adjust_to_residuals(residuals, pt, free_graph, attempt):
    """Re-solve a subset of point values so the residual equations hold."""
    unknowns = []
    for r in residuals:
        syms = sorted(r.free_symbols, key=lambda s: s.name)
        graph_first = [s for s in syms if s in free_graph] + [
            s for s in syms if s not in free_graph
        ]
        pick = None
        for s in graph_first:
            if s not in unknowns:
                pick = s
                break
        if pick is None:
            continue
        unknowns.append(pick)
    fixed = {s: v for s, v in pt.items() if s not in unknowns}
    system = [sp.cancel(r.expr.subs(fixed)) for r in residuals]
    system = [e for e in system if e != 0]
    if not system:
        return {**pt}
    try:
        sols = sp.solve(system, unknowns, dict=True)
    except Exception:
        return None
    for sol in sols:
        candidate = dict(fixed)
        good = True
        # dependent residuals leave some unknowns as free parameters of the
        # solution; pin those at their sampled values first, then evaluate
        # the solved expressions at the completed point
        for s in unknowns:
            if s not in sol:
                candidate[s] = pt[s]
        for s in unknowns:
            if s not in sol:
                continue
            val = sp.cancel(sol[s].subs(candidate))
            if val.free_symbols or not val.is_rational:
                good = False
                break
            candidate[s] = sp.Rational(val)
        if good and all(sp.cancel(r.expr.subs(candidate)) == 0 for r in residuals):
            return candidate
    return None


def build_flag(
    S: ExteriorSystem,
    variety: IntegralVariety,
    branch: Branch,
    seed: int = DEFAULT_SEED,
    order=None,
):
    chart = S.chart
    if order is None:
        order = tuple(S.independence)
    else:
        order = tuple(c if isinstance(c, sp.Symbol) else make_symbol(c) for c in order)
    if sorted(order, key=lambda s: s.name) != sorted(S.independence, key=lambda s: s.name):
        raise ValueError("flag order must permute the independence coordinates")
    point = branch_point(S, variety, branch, seed)
    vectors = []
    for x in order:
        comp = {x: sp.Integer(1)}
        for a in chart.fiber_coords:
            comp[a] = point[variety.graph_symbols[(a, x)]]
        vectors.append(comp)
    flag = Flag(point=point, vectors=vectors, order=order)
    _check_flag_integral(S, flag)
    return flag


def _point_restrict(point, chart):
    return {s: v for s, v in point.items() if s in chart.coords}


def _check_flag_integral(S: ExteriorSystem, flag: Flag):
    pt = _point_restrict(flag.point, S.chart)
    for k in range(1, len(flag.vectors) + 1):
        for g in S.generators:
            if g.degree > k:
                continue
            for tup in _subsets(range(k), g.degree):
                val = eval_on_vectors(g, [flag.vectors[i] for i in tup])
                if sp.cancel(val.expr.subs(pt)) != 0:
                    raise NotIntegralFlag(
                        f"generator {g} does not vanish on flag prefix E_{k}"
                    )


def polar_space(S: ExteriorSystem, flag: Flag, k: int = None, seed: int = DEFAULT_SEED):
    """Polar space of the flag prefix E_k: basis and codimension."""
    if k is None:
        k = len(flag.vectors)
    chart = S.chart
    pt = _point_restrict(flag.point, chart)
    rows = []
    for g in S.generators:
        if g.degree > k + 1:
            continue
        for tup in _subsets(range(k), g.degree - 1):
            row = []
            for c in chart.coords:
                unit = {c: sp.Integer(1)}
                val = eval_on_vectors(g, [flag.vectors[i] for i in tup] + [unit])
                row.append(_eval_at(val.expr, pt))
            if any(v != 0 for v in row):
                rows.append(row)
    if not rows:
        mat = sp.zeros(0, chart.dim)
    else:
        mat = sp.Matrix(rows)
    codim = matrix_rank(mat, seed)
    basis = [
        VectorField(chart, {chart.coords[i]: v for i, v in enumerate(vec)})
        for vec in mat.nullspace()
    ] if rows else [
        VectorField(chart, {c: 1}) for c in chart.coords
    ]
    indep_cols = [chart.index(c) for c in S.independence]
    reduced_mat = mat[:, [j for j in range(chart.dim) if j not in indep_cols]] if rows else sp.zeros(0, chart.dim - len(indep_cols))
    reduced_codim = matrix_rank(reduced_mat, seed)
    return {"basis": basis, "codim": codim, "reduced_codim": reduced_codim, "matrix": mat}


def variety_codim_at(variety: IntegralVariety, branch: Branch, flag: Flag, seed: int):
    graph_syms = sorted(set(variety.graph_symbols.values()), key=lambda s: s.name)
    eqs = [ScalarExpr(s) - v for s, v in branch.solved.items()]
    eqs.extend(branch.residuals)
    rows = []
    for e in eqs:
        expr = e.expr
        present = expr.free_symbols
        row = [
            _eval_at(sp.diff(expr, s), flag.point) if s in present else sp.Integer(0)
            for s in graph_syms
        ]
        rows.append(row)
    if not rows:
        return 0
    return matrix_rank(sp.Matrix(rows), seed)


def characters(
    S: ExteriorSystem,
    flag: Flag,
    variety: IntegralVariety = None,
    branch: Branch = None,
    seed: int = DEFAULT_SEED,
) -> CharacterReport:
    n = len(flag.vectors)
    cs, reduced = [], []
    for k in range(n):
        polar = polar_space(S, flag, k, seed)
        cs.append(polar["codim"])
        reduced.append(polar["reduced_codim"])
    if variety is not None and branch is not None:
        codim = variety_codim_at(variety, branch, flag, seed)
        bid = branch.branch_id
    else:
        codim = None
        bid = ""
    cartan_sum = sum(reduced)
    involutive = codim is not None and codim == cartan_sum
    return CharacterReport(
        characters=cs,
        reduced_characters=reduced,
        variety_codim=codim,
        cartan_sum=cartan_sum,
        involutive_at_flag=involutive,
        branch_id=bid,
    )


def stable_characters(S, variety, branch, seed=DEFAULT_SEED, order=None, retries=2):
    """Characters at three generic points; disagreement warns and retries."""
    for attempt in range(retries + 1):
        reports = []
        for j in range(3):
            flag = build_flag(S, variety, branch, seed + 37 * j + 511 * attempt, order)
            reports.append(characters(S, flag, variety, branch, seed + 37 * j))
        first = reports[0]
        if all(
            r.characters == first.characters
            and r.reduced_characters == first.reduced_characters
            and r.variety_codim == first.variety_codim
            for r in reports
        ):
            return first
        warnings.warn(
            "character values differ between generic points; retrying",
            GenericityWarning,
        )
    return reports[0]


# -- prolongation -----------------------------------------------------


def _jet_name(chart: Chart, fiber, base, taken):
    jl = chart.jet_labels.get(fiber)
    base_order = {str(c): i for i, c in enumerate(chart.base_coords)}
    if jl is not None:
        fname, multi = jl
    else:
        fname, multi = str(fiber), ()
    multi = tuple(sorted(multi + (str(base),), key=lambda b: base_order.get(b, 99)))
    name = f"{fname}_{''.join(multi)}"
    while name in taken:
        name += "'"
    return name, (fname, multi)


def prolong(
    S: ExteriorSystem,
    n: int = None,
    branch: Branch = None,
    variety: IntegralVariety = None,
    seed: int = DEFAULT_SEED,
) -> ExteriorSystem:
    """Pull the contact system on the jet chart back to an integral branch."""
    if variety is None:
        variety = integral_variety(S, n, seed)
    if branch is None:
        branch = pick_generic_branch(variety)
    chart = S.chart
    surviving = []
    for (a, x), s in sorted(variety.graph_symbols.items(), key=lambda kv: kv[1].name):
        if s not in branch.solved:
            surviving.append(((a, x), s))
    taken = {str(c) for c in chart.coords}
    rename = {}
    jet_labels = dict(chart.jet_labels)
    new_coords = []
    for (a, x), s in surviving:
        name, label = _jet_name(chart, a, x, taken)
        taken.add(name)
        sym = make_symbol(name)
        rename[s] = sym
        jet_labels[sym] = label
        new_coords.append(sym)
    new_chart = chart.with_coords(
        coords=chart.coords + tuple(new_coords), jet_labels=jet_labels
    )
    rename_scalars = {s: ScalarExpr(t) for s, t in rename.items()}
    gens = []
    for a in chart.fiber_coords:
        terms = {(new_chart.index(a),): ScalarExpr(1)}
        theta = DiffForm(new_chart, 1, terms)
        for x in S.independence:
            p = variety.graph_symbols[(a, x)]
            value = branch.solved.get(p, ScalarExpr(p))
            value = substitute(value, rename_scalars)
            dx = DiffForm.d_coord(new_chart, x)
            theta = theta - value * dx
        gens.append(theta)
    zero_forms = [substitute(r, rename_scalars) for r in branch.residuals]
    new_system = ExteriorSystem(
        chart=new_chart,
        generators=tuple(gens),
        zero_forms=tuple(z for z in zero_forms if not z.is_zero()),
        independence=S.independence,
        closed=False,
    )
    return differential_closure(new_system)


def pick_generic_branch(variety: IntegralVariety) -> Branch:
    """Prefer branches not cut out by pure coordinate conditions."""
    if not variety.branches:
        raise ValueError("variety has no branches")
    for b in variety.branches:
        if b.is_generic():
            return b
    return variety.branches[0]


def restrict_zero_forms(S: ExteriorSystem) -> ExteriorSystem:
    current = S
    budget = len(S.zero_forms) * 4 + 4
    while current.zero_forms:
        budget -= 1
        if budget < 0:
            raise NotCoordinateSolvable("zero-form restriction did not terminate")
        z = current.zero_forms[0]
        rest = list(current.zero_forms[1:])
        if z.is_zero():
            current = replace(current, zero_forms=tuple(rest))
            continue
        pivot = None
        for c in reversed(current.chart.coords):
            coeff = sp.diff(z.expr, c)
            if coeff.free_symbols or coeff == 0 or sp.diff(coeff, c) != 0:
                continue
            value = ScalarExpr(sp.cancel(-(z.expr - coeff * c) / coeff))
            if c in value.free_symbols:
                continue
            pivot = (c, value)
            break
        if pivot is None:
            raise NotCoordinateSolvable(
                f"zero-form {z} is not linear in any coordinate with constant coefficient"
            )
        c, value = pivot
        new_chart = current.chart.drop_coord(c)
        if value.free_symbols - set(new_chart.coords):
            raise NotCoordinateSolvable(
                f"solving {z} for {c} leaves symbols outside the chart"
            )
        gens = []
        for g in current.generators:
            pulled = _substitute_coord_in_form(g, c, value, new_chart)
            if not pulled.is_zero():
                gens.append(pulled)
        new_zero = [substitute(r, {c: value}) for r in rest]
        current = ExteriorSystem(
            chart=new_chart,
            generators=tuple(gens),
            zero_forms=tuple(r for r in new_zero if not r.is_zero()),
            independence=current.independence,
            closed=False,
        )
    return differential_closure(current)


def _substitute_coord_in_form(g: DiffForm, coord, value: ScalarExpr, new_chart: Chart) -> DiffForm:
    """Substitute coord = value(other coords) into a form, with d(coord) = d(value)."""
    old_chart = g.chart
    ci = old_chart.index(coord)
    dvalue_terms = {}
    for s in value.free_symbols:
        if s in new_chart.coords:
            dv = ScalarExpr(sp.diff(value.expr, s))
            if not dv.is_zero():
                dvalue_terms[(new_chart.index(s),)] = dv
    dvalue = DiffForm(new_chart, 1, dvalue_terms)
    out = DiffForm.zero(new_chart, g.degree)
    for idx, coeff in g.terms.items():
        coeff = substitute(coeff, {coord: value})
        if coeff.is_zero():
            continue
        piece = DiffForm.scalar(new_chart, coeff)
        for i in idx:
            if i == ci:
                factor = dvalue
            else:
                factor = DiffForm.d_coord(new_chart, old_chart.coords[i])
            piece = wedge(piece, factor)
            if piece.is_zero():
                break
        out = out + piece
    return out


# -- Cartan-Kuranishi loop --------------------------------------------


@dataclass
class KuranishiResult:
    final: ExteriorSystem
    trace: list
    surfaced_zero_forms: list
    status: str


def cartan_kuranishi(
    S: ExteriorSystem,
    n: int = None,
    max_steps: int = 2,
    seed: int = DEFAULT_SEED,
    order=None,
) -> KuranishiResult:
    """Prolong and restrict until Cartan's test passes or the budget runs out.

    max_steps bounds consecutive prolongations; the counter restarts after
    every zero-form restriction, mirroring the restart semantics of the
    prolongation theorem.
    """
    if n is None:
        n = S.n
    current = S if S.closed else differential_closure(S)
    trace = []
    surfaced = []
    steps_since_restrict = 0
    status = "involutive"
    while True:
        if current.zero_forms:
            seen = {str(z) for z in surfaced}
            surfaced.extend(z for z in current.zero_forms if str(z) not in seen)
            current = restrict_zero_forms(current)
            steps_since_restrict = 0
            continue
        variety = integral_variety(current, n, seed)
        branch = pick_generic_branch(variety)
        graph_syms = set(variety.graph_symbols.values())
        torsion = [
            r for r in branch.residuals if not (r.free_symbols & graph_syms)
        ]
        if torsion:
            # Torsion: integral elements only exist on a proper subvariety
            # of the base, so restrict there before judging involutivity.
            # Residuals still involving graph symbols are polar conditions
            # with non-constant coefficients and stay with the branch.
            seen = {str(z) for z in surfaced}
            surfaced.extend(r for r in torsion if str(r) not in seen)
            current = replace(
                current,
                zero_forms=current.zero_forms + tuple(torsion),
                closed=False,
            )
            current = restrict_zero_forms(current)
            steps_since_restrict = 0
            continue
        report = stable_characters(current, variety, branch, seed, order)
        trace.append(report)
        if report.involutive_at_flag:
            break
        if steps_since_restrict >= max_steps:
            status = "budget"
            break
        current = prolong(current, n, branch, variety, seed)
        steps_since_restrict += 1
    return KuranishiResult(
        final=current, trace=trace, surfaced_zero_forms=surfaced, status=status
    )


# -- slicing ----------------------------------------------------------


def slice_eds(S: ExteriorSystem, time_coord, value) -> ExteriorSystem:
    t = time_coord if isinstance(time_coord, sp.Symbol) else make_symbol(time_coord)
    if t not in S.independence:
        raise ValueError(f"{t} is not an independence coordinate")
    gens = []
    for g in S.generators:
        r = restrict_to_slice(g, t, value)
        if not r.is_zero():
            gens.append(r)
    zero_forms = [substitute(z, {t: sp.Rational(value)}) for z in S.zero_forms]
    new_chart = S.chart.drop_coord(t)
    return ExteriorSystem(
        chart=new_chart,
        generators=tuple(gens),
        zero_forms=tuple(z for z in zero_forms if not z.is_zero()),
        independence=tuple(c for c in S.independence if c != t),
        closed=S.closed,
    )

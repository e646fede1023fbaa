"""Spec-file language: tokenizer, parser, resolver, and pretty-printer.

A spec file declares charts, named forms (expression grammar over d(),
star(), ^, *, /, +, -), exterior systems, variational problems, slices and
check directives. `forall i in a..b:` replicates a declaration over an
index range and `sum(i in a..b, expr)` does the same inside expressions;
`{i}` inside a name is replaced by the index value. `#` starts a line
comment. Diagnostics carry line/column positions.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

import sympy as sp

from .errors import (
    CartanEdsError,
    DegreeMismatch,
    SpecError,
    SpecSyntaxError,
    UnresolvedName,
)
from .eds import ExteriorSystem
from .forms import (
    Chart,
    DiffForm,
    exterior_derivative,
    hodge_star_semibasic,
    wedge,
)
from .scalars import ScalarExpr

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>[ \t\r\n]+)
    | (?P<comment>\#[^\n]*)
    | (?P<name>(?:[A-Za-z_][A-Za-z0-9_]*|\{[A-Za-z_][A-Za-z0-9_]*\})+)
    | (?P<int>[0-9]+)
    | (?P<op>\*\*|==|\.\.|[{}()\[\]:;,=+\-*^/|])
    """,
    re.VERBOSE,
)

_KEYWORDS = {
    "chart", "coords", "base", "metric", "orientation", "jets",
    "form", "eds", "on", "generators", "independence", "problem",
    "prolongation", "lagrangian", "lepage_sign", "lepage", "multipliers",
    "fieldorder", "seeds", "slice", "check", "run", "forall", "in", "sum",
    "d", "star",
}


@dataclass(frozen=True)
class Token:
    kind: str  # name | int | op | eof
    text: str
    line: int
    column: int


def tokenize(text: str):
    tokens = []
    pos, line, col = 0, 1, 1
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise SpecSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind not in ("ws", "comment"):
            tokens.append(Token(kind, chunk, line, col))
        newlines = chunk.count("\n")
        if newlines:
            line += newlines
            col = len(chunk) - chunk.rfind("\n")
        else:
            col += len(chunk)
        pos = m.end()
    tokens.append(Token("eof", "", line, col))
    return tokens


# -- AST --------------------------------------------------------------


@dataclass
class Node:
    kind: str  # num | name | neg | add | sub | mul | div | pow | wedge | d | star | sum
    token: Token
    children: tuple = ()
    name: str = ""
    value: int = 0
    var: str = ""
    lo: int = 0
    hi: int = 0


@dataclass
class ProblemDecl:
    name: str
    chart: Chart
    generators: tuple = ()
    lagrangian: DiffForm = None
    lepage_sign: int = 1
    multipliers: list = None  # per-generator list of (name, base-coord names)
    fieldorder: tuple = None
    seeds: tuple = ()
    lepage_direct: DiffForm = None


@dataclass
class ProblemSpec:
    charts: dict = field(default_factory=dict)
    forms: dict = field(default_factory=dict)
    systems: dict = field(default_factory=dict)
    problems: dict = field(default_factory=dict)
    slices: list = field(default_factory=list)  # (coord name, sympy Rational)
    checks: list = field(default_factory=list)  # (lhs DiffForm, rhs DiffForm, Token)
    runs: list = field(default_factory=list)

    def the_chart(self):
        if len(self.charts) != 1:
            raise SpecError("spec must declare exactly one chart for this command")
        return next(iter(self.charts.values()))

    def the_system(self):
        if not self.systems:
            raise SpecError("spec declares no exterior system")
        return next(reversed(self.systems.values()))

    def the_problem(self):
        if not self.problems:
            raise SpecError("spec declares no variational problem")
        return next(reversed(self.problems.values()))


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.i = 0
        self.spec = ProblemSpec()
        self.current_chart = None

    # -- token plumbing ----------------------------------------------

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        t = self.tokens[self.i]
        if t.kind != "eof":
            self.i += 1
        return t

    def error(self, message, token=None):
        t = token or self.peek()
        raise SpecSyntaxError(message, t.line, t.column)

    def expect(self, text) -> Token:
        t = self.peek()
        if t.text != text:
            self.error(f"expected {text!r}, found {t.text or 'end of file'!r}")
        return self.next()

    def expect_name(self) -> Token:
        t = self.peek()
        if t.kind != "name":
            self.error(f"expected a name, found {t.text or 'end of file'!r}")
        return self.next()

    def expect_int(self) -> int:
        sign = 1
        if self.peek().text in ("+", "-"):
            sign = -1 if self.next().text == "-" else 1
        t = self.peek()
        if t.kind != "int":
            self.error(f"expected an integer, found {t.text or 'end of file'!r}")
        self.next()
        return sign * int(t.text)

    def expect_rational(self):
        num = self.expect_int()
        if self.peek().text == "/":
            self.next()
            return sp.Rational(num, self.expect_int())
        return sp.Rational(num)

    # -- top level ----------------------------------------------------

    def parse(self) -> ProblemSpec:
        while self.peek().kind != "eof":
            self.item({})
        return self.spec

    def item(self, env):
        t = self.peek()
        if t.text == "chart":
            self.chart_decl(env)
        elif t.text == "form":
            self.form_decl(env)
        elif t.text == "eds":
            self.eds_decl(env)
        elif t.text == "problem":
            self.problem_decl(env)
        elif t.text == "slice":
            self.slice_decl(env)
        elif t.text == "check":
            self.check_decl(env)
        elif t.text == "run":
            self.run_decl()
        elif t.text == "forall":
            self.forall_item(env)
        else:
            self.error(
                "expected one of: chart, form, eds, problem, slice, check, "
                f"run, forall; found {t.text or 'end of file'!r}"
            )

    def forall_item(self, env):
        self.expect("forall")
        var = self.expect_name().text
        self.expect("in")
        lo = self.expect_int()
        self.expect("..")
        hi = self.expect_int()
        self.expect(":")
        mark = self.i
        for value in range(lo, hi + 1):
            self.i = mark
            self.item({**env, var: value})

    # -- declarations --------------------------------------------------

    def chart_decl(self, env):
        self.expect("chart")
        name_tok = self.expect_name()
        self.expect("{")
        coords, base = [], []
        metric, jets = None, {}
        orientation = 1
        while self.peek().text != "}":
            key = self.expect_name()
            self.expect(":")
            if key.text == "coords":
                coords = self.name_list(env)
            elif key.text == "base":
                base = self.name_list(env)
            elif key.text == "metric":
                metric = {}
                while True:
                    c = self.resolve_name(self.expect_name(), env)
                    self.expect("=")
                    metric[c] = self.expect_rational()
                    if self.peek().text != ",":
                        break
                    self.next()
                self.expect(";")
            elif key.text == "orientation":
                orientation = self.expect_int()
                self.expect(";")
            elif key.text == "jets":
                while True:
                    jet = self.resolve_name(self.expect_name(), env)
                    self.expect("=")
                    fld = self.resolve_name(self.expect_name(), env)
                    self.expect("/")
                    multi = []
                    while self.peek().kind == "name":
                        multi.append(self.resolve_name(self.next(), env))
                    jets[sp.Symbol(jet)] = (fld, tuple(multi))
                    if self.peek().text != ",":
                        break
                    self.next()
                self.expect(";")
            else:
                self.error(
                    "expected one of: coords, base, metric, orientation, jets",
                    key,
                )
        self.expect("}")
        try:
            chart = Chart(
                coords=tuple(coords),
                base_coords=tuple(base),
                metric=metric,
                orientation=orientation,
                jet_labels=jets,
            )
        except (ValueError, CartanEdsError) as exc:
            raise SpecError(str(exc), name_tok.line, name_tok.column) from exc
        self.spec.charts[self.resolve_name(name_tok, env)] = chart
        self.current_chart = chart

    def form_decl(self, env):
        self.expect("form")
        name_tok = self.expect_name()
        self.expect("=")
        node = self.expression()
        self.expect(";")
        chart = self.need_chart(name_tok)
        value = _Evaluator(self.spec, chart, env).eval(node)
        self.spec.forms[self.resolve_name(name_tok, env)] = value

    def eds_decl(self, env):
        self.expect("eds")
        name_tok = self.expect_name()
        self.expect("on")
        chart_tok = self.expect_name()
        chart = self.lookup_chart(chart_tok, env)
        self.expect("{")
        gens, zero_forms, indep = [], [], ()
        while self.peek().text != "}":
            key = self.expect_name()
            self.expect(":")
            if key.text == "generators":
                for node in self.expr_list(env):
                    g = _Evaluator(self.spec, chart, env).eval(node)
                    if g.degree == 0:
                        zero_forms.extend(g.terms.values())
                    elif not g.is_zero():
                        gens.append(g)
            elif key.text == "independence":
                indep = tuple(self.name_list(env))
            else:
                self.error("expected one of: generators, independence", key)
        self.expect("}")
        try:
            system = ExteriorSystem(
                chart=chart,
                generators=tuple(gens),
                zero_forms=tuple(zero_forms),
                independence=indep or chart.base_coords,
            )
        except (ValueError, CartanEdsError) as exc:
            raise SpecError(str(exc), name_tok.line, name_tok.column) from exc
        self.spec.systems[self.resolve_name(name_tok, env)] = system

    def problem_decl(self, env):
        self.expect("problem")
        name_tok = self.expect_name()
        self.expect("on")
        chart_tok = self.expect_name()
        chart = self.lookup_chart(chart_tok, env)
        decl = ProblemDecl(name=self.resolve_name(name_tok, env), chart=chart)
        self.expect("{")
        while self.peek().text != "}":
            key = self.expect_name()
            self.expect(":")
            ev = _Evaluator(self.spec, chart, env)
            if key.text == "prolongation":
                decl.generators = tuple(ev.eval(n) for n in self.expr_list(env))
            elif key.text == "lagrangian":
                decl.lagrangian = ev.eval(self.expression())
                self.expect(";")
            elif key.text == "lepage_sign":
                decl.lepage_sign = self.expect_int()
                self.expect(";")
            elif key.text == "lepage":
                decl.lepage_direct = ev.eval(self.expression())
                self.expect(";")
            elif key.text == "multipliers":
                decl.multipliers = self.multiplier_groups(env)
            elif key.text == "fieldorder":
                decl.fieldorder = tuple(self.name_list(env))
            elif key.text == "seeds":
                lax = _Evaluator(self.spec, chart, env, lax=True)
                decl.seeds = tuple(lax.eval(n) for n in self.expr_list(env))
            else:
                self.error(
                    "expected one of: prolongation, lagrangian, lepage_sign, "
                    "lepage, multipliers, fieldorder, seeds",
                    key,
                )
        self.expect("}")
        self.spec.problems[decl.name] = decl

    def multiplier_groups(self, env):
        groups = []
        while self.peek().text == "[":
            self.next()
            group = []
            while self.peek().text != "]":
                comp = self.resolve_name(self.expect_name(), env)
                mono = []
                if self.peek().text == ":":
                    self.next()
                    mono.append(self.resolve_name(self.expect_name(), env))
                    while self.peek().text == "^":
                        self.next()
                        mono.append(self.resolve_name(self.expect_name(), env))
                group.append((comp, tuple(mono)))
                if self.peek().text == ",":
                    self.next()
            self.expect("]")
            groups.append(group)
        self.expect(";")
        if not groups:
            self.error("expected at least one [..] multiplier group")
        return groups

    def slice_decl(self, env):
        self.expect("slice")
        self.expect(":")
        coord = self.resolve_name(self.expect_name(), env)
        self.expect("=")
        value = self.expect_rational()
        self.expect(";")
        self.spec.slices.append((coord, value))

    def check_decl(self, env):
        tok = self.expect("check")
        self.expect(":")
        lhs_node = self.expression()
        self.expect("==")
        rhs_node = self.expression()
        self.expect(";")
        chart = self.need_chart(tok)
        ev = _Evaluator(self.spec, chart, env)
        lhs, rhs = ev.eval(lhs_node), ev.eval(rhs_node)
        comparable = lhs.degree == rhs.degree or lhs.is_zero() or rhs.is_zero()
        if not comparable or not (lhs - rhs).is_zero():
            raise SpecError("check failed: sides differ", tok.line, tok.column)
        self.spec.checks.append((lhs, rhs, tok))

    def run_decl(self):
        self.expect("run")
        command = self.expect_name().text
        self.expect(";")
        self.spec.runs.append(command)

    # -- shared pieces -------------------------------------------------

    def name_list(self, env):
        names = [self.resolve_name(self.expect_name(), env)]
        while self.peek().kind == "name":
            names.append(self.resolve_name(self.next(), env))
        self.expect(";")
        return names

    def expr_list(self, env):
        nodes = [self.expression()]
        while self.peek().text == ",":
            self.next()
            nodes.append(self.expression())
        self.expect(";")
        return nodes

    def need_chart(self, token) -> Chart:
        if self.current_chart is None:
            raise SpecError("no chart declared yet", token.line, token.column)
        return self.current_chart

    def lookup_chart(self, token, env) -> Chart:
        name = self.resolve_name(token, env)
        if name not in self.spec.charts:
            raise UnresolvedName(f"unknown chart {name!r}", token.line, token.column)
        return self.spec.charts[name]

    @staticmethod
    def resolve_name(token, env) -> str:
        return _subst_indices(token.text, env, token)

    # -- expressions ---------------------------------------------------

    def expression(self) -> Node:
        node = self.term()
        while self.peek().text in ("+", "-"):
            op = self.next()
            rhs = self.term()
            node = Node("add" if op.text == "+" else "sub", op, (node, rhs))
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().text in ("*", "^", "/"):
            op = self.next()
            kind = {"*": "mul", "^": "wedge", "/": "div"}[op.text]
            node = Node(kind, op, (node, self.unary()))
        return node

    def unary(self) -> Node:
        if self.peek().text == "-":
            op = self.next()
            return Node("neg", op, (self.unary(),))
        if self.peek().text == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        node = self.atom()
        while self.peek().text == "**":
            op = self.next()
            node = Node("pow", op, (node,), value=self.expect_int())
        return node

    def atom(self) -> Node:
        t = self.peek()
        if t.kind == "int":
            self.next()
            return Node("num", t, value=int(t.text))
        if t.text == "(":
            self.next()
            node = self.expression()
            self.expect(")")
            return node
        if t.text in ("d", "star"):
            self.next()
            self.expect("(")
            inner = self.expression()
            self.expect(")")
            return Node(t.text, t, (inner,))
        if t.text == "sum":
            self.next()
            self.expect("(")
            var = self.expect_name().text
            self.expect("in")
            lo = self.expect_int()
            self.expect("..")
            hi = self.expect_int()
            self.expect(",")
            body = self.expression()
            self.expect(")")
            return Node("sum", t, (body,), var=var, lo=lo, hi=hi)
        if t.kind == "name":
            self.next()
            return Node("name", t, name=t.text)
        self.error(
            "expected a number, name, '(', '-', d(, star( or sum(; found "
            f"{t.text or 'end of file'!r}"
        )


def _subst_indices(name: str, env: dict, token: Token) -> str:
    def repl(m):
        var = m.group(1)
        if var not in env:
            raise UnresolvedName(
                f"index variable {var!r} is not bound here", token.line, token.column
            )
        return str(env[var])

    return re.sub(r"\{([A-Za-z_][A-Za-z0-9_]*)\}", repl, name)


class _Evaluator:
    """Evaluates expression AST nodes to DiffForms on a chart."""

    def __init__(self, spec: ProblemSpec, chart: Chart, env: dict, lax=False):
        self.spec = spec
        self.chart = chart
        self.env = env
        self.lax = lax

    def eval(self, node: Node) -> DiffForm:
        try:
            return self._eval(node)
        except SpecError:
            raise
        except (ValueError, CartanEdsError) as exc:
            raise SpecError(str(exc), node.token.line, node.token.column) from exc

    def _eval(self, node: Node) -> DiffForm:
        kind = node.kind
        if kind == "num":
            return DiffForm.scalar(self.chart, node.value)
        if kind == "name":
            return self.resolve(node)
        if kind == "neg":
            return -self._eval(node.children[0])
        if kind in ("add", "sub"):
            a = self._eval(node.children[0])
            b = self._eval(node.children[1])
            if a.degree != b.degree and not a.is_zero() and not b.is_zero():
                raise DegreeMismatch(
                    f"cannot {'add' if kind == 'add' else 'subtract'} a "
                    f"{a.degree}-form and a {b.degree}-form",
                    node.token.line,
                    node.token.column,
                )
            return a + b if kind == "add" else a - b
        if kind in ("mul", "wedge"):
            return wedge(self._eval(node.children[0]), self._eval(node.children[1]))
        if kind == "div":
            a = self._eval(node.children[0])
            b = self._eval(node.children[1])
            if b.degree != 0 or b.is_zero():
                raise DegreeMismatch(
                    "divisor must be a nonzero scalar",
                    node.token.line,
                    node.token.column,
                )
            return a.map_coefficients(lambda c: c / b.terms[()])
        if kind == "pow":
            a = self._eval(node.children[0])
            if a.degree != 0:
                raise DegreeMismatch(
                    "** applies to scalars only", node.token.line, node.token.column
                )
            return DiffForm.scalar(self.chart, a.terms.get((), ScalarExpr.zero()) ** node.value)
        if kind == "d":
            return exterior_derivative(self._eval(node.children[0]))
        if kind == "star":
            return hodge_star_semibasic(self._eval(node.children[0]))
        if kind == "sum":
            total = None
            for value in range(node.lo, node.hi + 1):
                inner = _Evaluator(
                    self.spec, self.chart, {**self.env, node.var: value}, self.lax
                )
                piece = inner.eval(node.children[0])
                total = piece if total is None else total + piece
            if total is None:
                return DiffForm.zero(self.chart)
            return total
        raise SpecError(f"unknown node {kind}", node.token.line, node.token.column)

    def resolve(self, node: Node) -> DiffForm:
        name = _subst_indices(node.name, self.env, node.token)
        if name in self.spec.forms:
            f = self.spec.forms[name]
            if f.chart != self.chart:
                raise SpecError(
                    f"form {name!r} lives on a different chart",
                    node.token.line,
                    node.token.column,
                )
            return f
        sym = sp.Symbol(name)
        if sym in self.chart.coords:
            return DiffForm(self.chart, 0, {(): sym})
        if self.lax:
            # seed constraints may mention jet symbols such as q_x that only
            # exist after slicing; keep them as free scalar symbols
            return DiffForm(self.chart, 0, {(): sym})
        raise UnresolvedName(
            f"{name!r} is neither a named form nor a chart coordinate",
            node.token.line,
            node.token.column,
        )


def parse_spec(text: str) -> ProblemSpec:
    """Parse and resolve a spec file; see the module docstring for grammar."""
    return _Parser(tokenize(text)).parse()


# -- pretty printing --------------------------------------------------


def _print_scalar(e: ScalarExpr) -> str:
    s = sp.sstr(sp.cancel(e.expr))
    return f"({s})"


def print_form(a: DiffForm) -> str:
    """Render a form in the spec expression grammar."""
    if a.is_zero():
        return "0" if a.degree == 0 else "0 * " + " ^ ".join(
            f"d({a.chart.coords[0]})" for _ in range(max(a.degree, 1))
        )
    parts = []
    for idx in sorted(a.terms):
        coeff = _print_scalar(a.terms[idx])
        mono = " ^ ".join(f"d({a.chart.coords[i]})" for i in idx)
        if not idx:
            parts.append(coeff)
        elif coeff == "(1)":
            parts.append(mono)
        else:
            parts.append(f"{coeff} * {mono}")
    return " + ".join(parts)


def print_spec(spec: ProblemSpec) -> str:
    """Canonical text for a spec; reparsing reproduces the same charts/forms."""
    out = []
    for name, chart in spec.charts.items():
        out.append(f"chart {name} {{")
        out.append("  coords: " + " ".join(str(c) for c in chart.coords) + ";")
        out.append("  base: " + " ".join(str(c) for c in chart.base_coords) + ";")
        if chart.metric:
            pairs = ", ".join(
                f"{c} = {sp.Rational(v)}" for c, v in sorted(
                    chart.metric.items(), key=lambda kv: str(kv[0])
                )
            )
            out.append(f"  metric: {pairs};")
        if chart.orientation != 1:
            out.append(f"  orientation: {chart.orientation};")
        if chart.jet_labels:
            pairs = ", ".join(
                f"{j} = {fld} / {' '.join(m)}"
                for j, (fld, m) in sorted(
                    chart.jet_labels.items(), key=lambda kv: str(kv[0])
                )
            )
            out.append(f"  jets: {pairs};")
        out.append("}")
    for name, f in spec.forms.items():
        out.append(f"form {name} = {print_form(f)};")
    for name, system in spec.systems.items():
        chart_name = next(k for k, v in spec.charts.items() if v == system.chart)
        out.append(f"eds {name} on {chart_name} {{")
        gens = [print_form(g) for g in system.generators]
        gens.extend(_print_scalar(z) for z in system.zero_forms)
        if gens:
            out.append("  generators: " + ", ".join(gens) + ";")
        out.append(
            "  independence: " + " ".join(str(c) for c in system.independence) + ";"
        )
        out.append("}")
    for coord, value in spec.slices:
        out.append(f"slice: {coord} = {value};")
    for command in spec.runs:
        out.append(f"run {command};")
    return "\n".join(out) + "\n"

"""Command-line driver: ``eds <command> <spec-file> [options]``.

Commands: analyze, involution, prolong, slice, dirac, gotay-nester.
Reports are deterministic for a fixed (spec, command, options, seed) and
can be emitted as text or as JSON under the schema ``cartan-eds/1``.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import dataclass, field

import sympy as sp

from . import __version__
from .dsl import ProblemDecl, ProblemSpec, parse_spec, print_form
from .eds import (
    DEFAULT_SEED,
    ExteriorSystem,
    cartan_kuranishi,
    differential_closure,
    integral_variety,
    pick_generic_branch,
    slice_eds,
    stable_characters,
)
from .errors import CartanEdsError, SpecError
from .forms import DiffForm
from .varcalc import (
    LepageProblem,
    VariationalProblem,
    build_lepage_local,
    dirac_via_eds_detailed,
    eliminate_auxiliary,
    gotay_nester,
    hamilton_cartan_detailed,
    slice_dynamics,
)

SCHEMA = "cartan-eds/1"
COMMANDS = ("analyze", "involution", "prolong", "slice", "dirac", "gotay-nester")


@dataclass
class Report:
    command: str
    seed: int
    version: str = __version__
    schema: str = SCHEMA
    branches: list = field(default_factory=list)
    characters: list = field(default_factory=list)
    reduced_characters: list = field(default_factory=list)
    codim: int = None
    involutive: bool = None
    generators: list = field(default_factory=list)
    zero_forms: list = field(default_factory=list)
    chain: list = field(default_factory=list)
    projected: list = field(default_factory=list)
    surfaced: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def as_dict(self):
        return {
            "schema": self.schema,
            "command": self.command,
            "seed": self.seed,
            "version": self.version,
            "branches": self.branches,
            "characters": self.characters,
            "reduced_characters": self.reduced_characters,
            "codim": self.codim,
            "involutive": self.involutive,
            "generators": self.generators,
            "zero_forms": self.zero_forms,
            "chain": self.chain,
            "projected": self.projected,
            "surfaced": self.surfaced,
            "trace": self.trace,
            "warnings": self.warnings,
            "notes": self.notes,
        }


def _sstr(e):
    return sp.sstr(sp.cancel(sp.sympify(e.expr if hasattr(e, "expr") else e)))


def _branch_record(variety, branch):
    return {
        "id": branch.branch_id,
        "generic": branch.is_generic(),
        "chosen_factors": sorted(_sstr(f) for f in branch.chosen_factors),
        "equations": sorted(
            f"{s} = {_sstr(v)}" for s, v in branch.solved.items()
        ),
        "residuals": sorted(_sstr(r) for r in branch.residuals),
    }


def _character_fields(rec, report):
    rec["characters"] = list(report.characters)
    rec["reduced_characters"] = list(report.reduced_characters)
    rec["codim"] = report.variety_codim
    rec["cartan_sum"] = report.cartan_sum
    rec["involutive"] = report.involutive_at_flag
    return rec


def _lepage_of(decl: ProblemDecl, seed):
    """(LepageProblem, VariationalProblem-or-None) from a problem block."""
    chart = decl.chart
    if decl.lepage_direct is not None:
        return (
            LepageProblem(
                chart=chart,
                lepage_form=decl.lepage_direct,
                multiplier_symbols=(),
                lepage_sign=decl.lepage_sign,
                field_order=tuple(sp.Symbol(f) for f in decl.fieldorder)
                if decl.fieldorder
                else None,
            ),
            None,
        )
    n = len(chart.base_coords)
    lagrangian = decl.lagrangian if decl.lagrangian is not None else DiffForm.zero(chart, n)
    P = VariationalProblem(
        chart=chart,
        prolongation_eds=ExteriorSystem(
            chart, decl.generators, (), chart.base_coords
        ),
        lagrangian=lagrangian,
        lepage_sign=decl.lepage_sign,
    )
    L = build_lepage_local(P, multipliers=decl.multipliers, seed=seed)
    return L, P


def _slice_of(spec: ProblemSpec, options):
    if options.get("slice"):
        coord, _, value = options["slice"].partition("=")
        if not value:
            raise SpecError("--slice expects coord=value")
        return coord.strip(), sp.Rational(value.strip())
    if spec.slices:
        return spec.slices[-1]
    raise SpecError("no slice declared in the spec and no --slice given")


def _register_seed_symbols(ctx, expr):
    """Register jet symbols such as q_x mentioned by seed constraints."""
    expr = sp.sympify(expr)
    for s in expr.free_symbols:
        if ctx.info(s) is not None:
            continue
        stem, _, suffix = s.name.rpartition("_")
        fld = sp.Symbol(stem)
        if not stem or fld not in ctx.fields:
            continue
        multi = tuple(sp.Symbol(ch) for ch in suffix)
        if multi and all(m in ctx.coords for m in multi):
            ctx.jet(fld, multi)
    return expr


def run(spec: ProblemSpec, command: str, options=None) -> Report:
    """Execute a command against a parsed spec and build a Report."""
    options = dict(options or {})
    seed = int(options.get("seed", DEFAULT_SEED))
    report = Report(command=command, seed=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        _dispatch(spec, command, options, seed, report)
    report.warnings = sorted(
        {f"{w.category.__name__}: {w.message}" for w in caught}
    )
    return report


def _dispatch(spec, command, options, seed, report):
    order = None
    if options.get("flag_order"):
        order = tuple(options["flag_order"].split(","))

    if command in ("analyze", "involution", "prolong", "slice"):
        S = spec.the_system()
        S = S if S.closed else differential_closure(S)

    if command == "analyze":
        variety = integral_variety(S, S.n, seed)
        for branch in variety.branches:
            rec = _branch_record(variety, branch)
            try:
                rep = stable_characters(S, variety, branch, seed, order)
                _character_fields(rec, rep)
            except CartanEdsError as exc:
                rec["characters_error"] = str(exc)
            report.branches.append(rec)
        report.generators = [print_form(g) for g in S.generators]
        report.zero_forms = [_sstr(z) for z in S.zero_forms]
    elif command == "involution":
        variety = integral_variety(S, S.n, seed)
        branch = pick_generic_branch(variety)
        rep = stable_characters(S, variety, branch, seed, order)
        report.characters = list(rep.characters)
        report.reduced_characters = list(rep.reduced_characters)
        report.codim = rep.variety_codim
        report.involutive = rep.involutive_at_flag
        report.branches.append(
            _character_fields(_branch_record(variety, branch), rep)
        )
        report.generators = [print_form(g) for g in S.generators]
    elif command == "prolong":
        max_steps = int(options.get("max_steps", 2))
        result = cartan_kuranishi(S, S.n, max_steps, seed=seed, order=order)
        report.surfaced = [_sstr(z) for z in result.surfaced_zero_forms]
        report.trace = [
            _character_fields({"branch": r.branch_id}, r) for r in result.trace
        ]
        report.involutive = result.status == "involutive"
        report.notes.append(f"status: {result.status}")
        report.generators = [print_form(g) for g in result.final.generators]
    elif command == "slice":
        coord, value = _slice_of(spec, options)
        sliced = slice_eds(S, coord, value)
        report.generators = [print_form(g) for g in sliced.generators]
        report.zero_forms = [_sstr(z) for z in sliced.zero_forms]
        report.notes.append(f"slice: {coord} = {value}")
    elif command == "dirac":
        decl = spec.the_problem()
        L, P = _lepage_of(decl, seed)
        if P is None:
            raise SpecError(
                "dirac needs a problem with prolongation generators and "
                "multipliers (not a direct lepage form)"
            )
        coord, value = _slice_of(spec, options)
        max_steps = int(options.get("max_steps", 4))
        sliced, result, _ = dirac_via_eds_detailed(
            P, coord, value, max_steps, multipliers=decl.multipliers, seed=seed
        )
        report.generators = [print_form(g) for g in sliced.generators]
        report.zero_forms = [_sstr(z) for z in sliced.zero_forms]
        report.surfaced = [_sstr(z) for z in result.surfaced_zero_forms]
        report.trace = [
            _character_fields({"branch": r.branch_id}, r) for r in result.trace
        ]
        report.notes.append(f"status: {result.status}")
        report.notes.append(f"slice: {coord} = {value}")
    elif command == "gotay-nester":
        decl = spec.the_problem()
        L, _ = _lepage_of(decl, seed)
        coord, value = _slice_of(spec, options)
        dyn = slice_dynamics(L, coord, value)
        seeds = []
        for s in decl.seeds:
            expr = s.terms.get((), None)
            if expr is None:
                continue
            seeds.append(_register_seed_symbols(dyn.ctx, expr.expr))
        chain = gotay_nester(
            dyn,
            max_rounds=int(options.get("max_rounds", 10)),
            consequence_order=int(options.get("consequence_order", 2)),
            seed_constraints=seeds,
        )
        for i, rnd in enumerate(chain.rounds):
            report.chain.append(
                {
                    "round": i,
                    "status": rnd.status,
                    "constraints": [_sstr(c) for c in rnd.new_constraints],
                    "singular_factors": [_sstr(f) for f in rnd.singular_factors],
                }
            )
        report.notes.append(f"status: {chain.status}")
        report.notes.append(f"slice: {coord} = {value}")
        keep = options.get("keep")
        if keep:
            projected = eliminate_auxiliary(
                chain, {sp.Symbol(k) for k in keep.split(",")}
            )
            report.projected = [_sstr(c) for c in projected]
            report.notes.extend(projected.notes)
    else:
        raise SpecError(f"unknown command {command!r}; expected one of {COMMANDS}")


def emit_report(report: Report, fmt: str = "text") -> bytes:
    if fmt == "json":
        return (
            json.dumps(report.as_dict(), sort_keys=True, separators=(",", ":"))
            + "\n"
        ).encode()
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = [
        f"command: {report.command}",
        f"seed: {report.seed}",
        f"version: {report.version}",
    ]
    for note in report.notes:
        lines.append(note)
    if report.characters:
        lines.append(f"characters: {tuple(report.characters)}")
        lines.append(f"reduced characters: {tuple(report.reduced_characters)}")
        lines.append(f"codim: {report.codim}")
        lines.append(f"involutive: {report.involutive}")
    for rec in report.branches:
        lines.append(f"branch {rec['id']}" + ("" if rec["generic"] else " (non-generic)"))
        for eq in rec["equations"]:
            lines.append(f"  {eq}")
        for r in rec["residuals"]:
            lines.append(f"  residual: {r} = 0")
        if rec.get("chosen_factors"):
            lines.append("  chosen factors: " + ", ".join(rec["chosen_factors"]))
        if "characters" in rec:
            lines.append(
                f"  characters {tuple(rec['characters'])} reduced "
                f"{tuple(rec['reduced_characters'])} codim {rec['codim']} "
                f"involutive {rec['involutive']}"
            )
        if "characters_error" in rec:
            lines.append(f"  characters unavailable: {rec['characters_error']}")
    if report.generators:
        lines.append("generators:")
        lines.extend(f"  {g}" for g in report.generators)
    if report.zero_forms:
        lines.append("zero-forms:")
        lines.extend(f"  {z}" for z in report.zero_forms)
    if report.surfaced:
        lines.append("surfaced conditions:")
        lines.extend(f"  {z}" for z in report.surfaced)
    for rec in report.trace:
        lines.append(
            f"trace: characters {tuple(rec['characters'])} codim {rec['codim']} "
            f"involutive {rec['involutive']}"
        )
    for rnd in report.chain:
        lines.append(f"round {rnd['round']} [{rnd['status']}]")
        lines.extend(f"  {c}" for c in rnd["constraints"])
        if rnd["singular_factors"]:
            lines.append(
                "  singular factors: " + ", ".join(rnd["singular_factors"])
            )
    if report.projected:
        lines.append("projected constraints:")
        lines.extend(f"  {c}" for c in report.projected)
    if report.warnings:
        lines.append("warnings:")
        lines.extend(f"  {w}" for w in report.warnings)
    return ("\n".join(lines) + "\n").encode()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="eds",
        description="exterior differential systems workbench",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("spec_file")
    parser.add_argument("--slice", dest="slice", default=None, metavar="coord=value")
    parser.add_argument("--flag-order", dest="flag_order", default=None)
    parser.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    parser.add_argument("--max-rounds", dest="max_rounds", type=int, default=None)
    parser.add_argument(
        "--consequence-order", dest="consequence_order", type=int, default=None
    )
    parser.add_argument("--keep", dest="keep", default=None)
    parser.add_argument("--seed", dest="seed", type=int, default=DEFAULT_SEED)
    parser.add_argument(
        "--report", dest="report", choices=("text", "json"), default="text"
    )
    args = parser.parse_args(argv)

    try:
        with open(args.spec_file, encoding="utf-8") as fh:
            text = fh.read()
        spec = parse_spec(text)
        options = {
            k: v
            for k, v in vars(args).items()
            if k not in ("command", "spec_file", "report") and v is not None
        }
        report = run(spec, args.command, options)
    except SpecError as exc:
        print(f"{args.spec_file}: {exc}", file=sys.stderr)
        return 2
    except CartanEdsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.buffer.write(emit_report(report, args.report))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: validate documents, check proofs, explore runs
under an attacker, and render DOT diagrams.

Exit codes: 0 when every requested check passes, 1 when an artifact fails a
check (structural problem, rejected proof, counterexample, unsound input),
2 on usage errors or malformed input text. Diagnostics go to stderr and
carry file:line:column spans when the error points into source text; ANSI
color is used only on a terminal and is disabled entirely by ANP_COLOR=0.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .dot import (
    RenderOptions,
    emit_derivation_dot,
    emit_network_dot,
    emit_run_dot,
)
from .errors import AnpSyntaxError, AnprocError
from .explore import (
    AttackerModel,
    ExplorationBounds,
    export_run_document,
    observation_implication,
    semantic_validate,
)
from .logic import check_proof
from .network import validate_network
from .runs import check_complete, check_sound
from .specfmt import load_spec, summary

_USAGE_ERROR = 2
_CHECK_FAILED = 1


def _color_enabled() -> bool:
    if os.environ.get("ANP_COLOR", "") == "0":
        return False
    return sys.stderr.isatty()


def _error(path: str | None, err: AnprocError | str) -> None:
    if isinstance(err, AnprocError):
        span = err.span
        where = (
            f"{path}:{span.line}:{span.col}" if path and span else (path or "")
        )
        message = str(err)
    else:
        where = path or ""
        message = err
    prefix = f"{where}: " if where else ""
    text = f"{prefix}error: {message}"
    if _color_enabled():
        text = f"\x1b[31m{text}\x1b[0m"
    print(text, file=sys.stderr)


class _Failure(Exception):
    """Internal: abort the current command with an exit code."""

    def __init__(self, code: int):
        self.code = code


def _load(path: str):
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        _error(None, f"cannot read {path}: {e.strerror or e}")
        raise _Failure(_USAGE_ERROR) from None
    try:
        from .specfmt import parse_spec

        return parse_spec(text)
    except AnpSyntaxError as e:
        _error(path, e)
        raise _Failure(_USAGE_ERROR) from None
    except AnprocError as e:
        _error(path, e)
        raise _Failure(_CHECK_FAILED) from None


def _pick(kind: str, table: dict, name: str | None, path: str):
    """Select a named object, or the only one of its kind."""
    if name is not None:
        if name not in table:
            _error(
                path,
                f"no {kind} named {name}; available: "
                + (", ".join(sorted(table)) or "none"),
            )
            raise _Failure(_USAGE_ERROR)
        return table[name]
    if len(table) == 1:
        return next(iter(table.values()))
    _error(
        path,
        f"document defines {len(table)} {kind}s; pick one with --{kind} "
        + (f"({', '.join(sorted(table))})" if table else ""),
    )
    raise _Failure(_USAGE_ERROR)


# -- commands ----------------------------------------------------------------------

def _cmd_validate(args: argparse.Namespace) -> int:
    doc = _load(args.file)
    problems: list[str] = []
    for net in doc.networks.values():
        problems += [f"network {net.name}: {p}" for p in validate_network(net)]
    for run in doc.runs.values():
        ok, report = check_sound(run)
        problems += [f"run {run.name}: {p}" for p in report]
        if ok:
            complete, mismatches = check_complete(run, doc.theory)
            if not complete:
                problems += [f"run {run.name}: {m}" for m in mismatches]
    if problems:
        for p in problems:
            _error(args.file, p)
        return _CHECK_FAILED
    print(f"{args.file}: OK — {summary(doc)}")
    return 0


def _select_proofs(doc, name: str | None, path: str) -> list:
    """--proof accepts a proof name, or a procedure name meaning every proof
    written against that procedure."""
    if name is None:
        if not doc.proofs:
            _error(path, "document contains no proofs")
            raise _Failure(_USAGE_ERROR)
        return list(doc.proofs.values())
    if name in doc.proofs:
        return [doc.proofs[name]]
    if name in doc.procedures:
        chosen = [p for p in doc.proofs.values() if p.procedure_name == name]
        if chosen:
            return chosen
        _error(path, f"no proof is written against procedure {name}")
        raise _Failure(_USAGE_ERROR)
    _error(
        path,
        f"no proof or procedure named {name}; available proofs: "
        + (", ".join(sorted(doc.proofs)) or "none"),
    )
    raise _Failure(_USAGE_ERROR)


def _cmd_check_proof(args: argparse.Namespace) -> int:
    doc = _load(args.file)
    failed = False
    for pf in _select_proofs(doc, args.proof, args.file):
        try:
            result = check_proof(pf, doc.procedure_of(pf), doc.theory)
        except AnprocError as e:
            _error(args.file, e)
            return _CHECK_FAILED
        if result.status == "accepted":
            print(f"accepted: {pf.name} ({len(pf.steps)} steps)")
        else:
            failed = True
            print(
                f"rejected: {pf.name} at step {result.failed_step}: "
                f"{result.reason}"
            )
    return _CHECK_FAILED if failed else 0


def _describe_counterexample(run, doc) -> list[str]:
    from .specfmt import _event_text

    lines = ["  counterexample run:"]
    for reader in sorted(run.assignment):
        f = run.assignment[reader]
        lines.append(f"    flow {f.writer} -{f.channel.id}-> {f.reader}")
    source_nodes = {n for net in doc.networks.values() for n in net.nodes}
    for ev in sorted(run.process.iter_events(), key=lambda e: e.point):
        if ev.location not in source_nodes:
            lines.append(f"    attacker {ev.point}: {_event_text(ev.kind)}")
    return lines


def _cmd_explore(args: argparse.Namespace) -> int:
    doc = _load(args.file)
    procedure = _pick("procedure", doc.procedures, args.procedure, args.file)
    if args.proof is not None:
        proofs = _select_proofs(doc, args.proof, args.file)
    else:
        proofs = [
            p for p in doc.proofs.values() if p.procedure_name == procedure.name
        ]
        if not proofs:
            _error(
                args.file,
                f"no proof is written against procedure {procedure.name}; "
                "exploration needs one to know what implication to check",
            )
            raise _Failure(_USAGE_ERROR)
    try:
        bounds = ExplorationBounds(
            max_sessions=args.max_sessions,
            max_attacker_events=args.max_attacker_events,
            max_term_depth=args.max_term_depth,
        )
    except AnprocError as e:
        _error(None, e)
        raise _Failure(_USAGE_ERROR) from None
    capabilities = []
    for opname in args.capability:
        op = doc.theory.operators.get(opname)
        if op is None:
            _error(
                args.file,
                f"--capability {opname}: not a declared operator; declared: "
                + (", ".join(sorted(doc.theory.operators)) or "none"),
            )
            raise _Failure(_USAGE_ERROR)
        capabilities.append(op)
    attacker = AttackerModel(
        controlled_channels=(
            frozenset(args.controlled_type)
            if args.controlled_type
            else AttackerModel().controlled_channels
        ),
        capabilities=frozenset(capabilities),
    )
    failed = False
    exported = False
    for pf in proofs:
        impl = observation_implication(pf.observations, pf.goal.formula)
        try:
            outcome = semantic_validate(
                impl, procedure, attacker, bounds, doc.theory
            )
        except AnprocError as e:
            _error(args.file, e)
            return _CHECK_FAILED
        print(
            f"{pf.name}: {outcome.verdict} "
            f"(runs examined: {outcome.runs_examined}, "
            f"matching premise: {outcome.runs_matching_premise}, "
            f"bounds: {bounds.max_sessions} sessions / "
            f"{bounds.max_attacker_events} attacker events / "
            f"depth {bounds.max_term_depth})"
        )
        if outcome.counterexample is not None:
            failed = True
            for line in _describe_counterexample(outcome.counterexample, doc):
                print(line)
            if args.export and not exported:
                text = export_run_document(doc, outcome.counterexample)
                Path(args.export).write_text(text, encoding="utf-8")
                print(f"  counterexample written to {args.export}")
                exported = True
    if args.export and not exported:
        print("nothing to export: no counterexample found")
    return _CHECK_FAILED if failed else 0


def _cmd_render(args: argparse.Namespace) -> int:
    doc = _load(args.file)
    opts = RenderOptions(
        target=args.target,
        strand_spacing=args.spacing,
        label_verbosity=args.verbosity,
    )
    try:
        if args.target == "network":
            net = _pick("network", doc.networks, args.name, args.file)
            text = emit_network_dot(net, opts)
        elif args.target == "run":
            run = _pick("run", doc.runs, args.name, args.file)
            text = emit_run_dot(run, opts)
        else:
            table = doc.proofs
            pf = (
                table[args.name]
                if args.name in table
                else _pick("proof", table, args.name, args.file)
            )
            procedure = doc.procedure_of(pf)
            if not procedure.secure_runs:
                _error(args.file, f"procedure {procedure.name} names no secure run")
                return _CHECK_FAILED
            run = next(iter(procedure.secure_runs.values()))
            text = emit_derivation_dot(pf, procedure, run, doc.theory, opts)
    except AnprocError as e:
        _error(args.file, e)
        return _CHECK_FAILED
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# -- argument parsing --------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anproc",
        description=(
            "Actor-network procedure toolkit: validate specifications, "
            "check derivations, explore adversarial runs, render diagrams."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="structural checks on a document")
    p.add_argument("file")
    p.set_defaults(fn=_cmd_validate)

    p = sub.add_parser("check-proof", help="replay derivations step by step")
    p.add_argument("file")
    p.add_argument(
        "--proof",
        help=(
            "proof to check, or a procedure name meaning every proof "
            "written against it (default: all proofs)"
        ),
    )
    p.set_defaults(fn=_cmd_check_proof)

    p = sub.add_parser(
        "explore",
        help="exhaustively enumerate adversarial runs and check implications",
    )
    p.add_argument("file")
    p.add_argument(
        "--procedure", help="procedure to explore (default: the only one)"
    )
    p.add_argument(
        "--proof",
        help="proof whose observations/goal form the implication "
        "(default: every proof on the procedure)",
    )
    p.add_argument("--max-sessions", type=int, default=1, metavar="N")
    p.add_argument("--max-attacker-events", type=int, default=0, metavar="N")
    p.add_argument("--max-term-depth", type=int, default=4, metavar="N")
    p.add_argument(
        "--capability",
        action="append",
        default=[],
        metavar="OP",
        help="operator the attacker may apply (repeatable)",
    )
    p.add_argument(
        "--controlled-type",
        action="append",
        default=[],
        metavar="TYPE",
        help="channel type the attacker controls (repeatable; default: cyb)",
    )
    p.add_argument(
        "--export",
        metavar="PATH",
        help="write the first counterexample as a re-loadable document",
    )
    p.set_defaults(fn=_cmd_explore)

    p = sub.add_parser("render", help="emit a DOT diagram")
    p.add_argument("file")
    p.add_argument(
        "--target",
        required=True,
        choices=("network", "run", "derivation"),
    )
    p.add_argument(
        "--name",
        help="which network/run/proof to render (default: the only one)",
    )
    p.add_argument("-o", "--output", metavar="PATH", help="default: stdout")
    p.add_argument("--spacing", type=float, default=1.0, metavar="INCHES")
    p.add_argument("--verbosity", type=int, default=1, choices=(0, 1, 2))
    p.set_defaults(fn=_cmd_render)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _Failure as f:
        return f.code
    except AnprocError as e:
        _error(getattr(args, "file", None), e)
        return _CHECK_FAILED


if __name__ == "__main__":
    raise SystemExit(main())

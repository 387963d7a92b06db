"""Runs: processes with every coaction wired to a writer by a flow.

A flow pairs a receive with a send (message flow) or a sample with an emit
(source flow) over a declared channel that lifts between the two locations.
A run is sound when nothing reads a value that is only written later, and
complete when every reader pattern matches its writer's payload and every
receive guard holds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

from .errors import (
    AlreadyAssigned,
    IncompleteAssignment,
    NoFlowChannel,
    OrderCycle,
    TypeMismatch,
    UnknownPoint,
)
from .network import ActorNetwork, Channel
from .process import (
    Compare,
    Emit,
    Generate,
    LocalizedEvent,
    Process,
    Receive,
    Sample,
    Send,
    READER_KINDS,
)
from .terms import App, Const, Indet, Term, TermTheory, Tick, Tup, normalize


@dataclass(frozen=True)
class Flow:
    writer: str
    reader: str
    channel: Channel
    kind: str  # "message" | "source"


@dataclass
class Run:
    name: str
    process: Process
    assignment: dict[str, Flow] = field(default_factory=dict)

    def iter_events(self) -> Iterator[LocalizedEvent]:
        return self.process.iter_events()

    def flows(self) -> list[Flow]:
        return list(self.assignment.values())

    def coactions(self) -> list[LocalizedEvent]:
        return [
            ev for ev in self.process.iter_events() if isinstance(ev.kind, READER_KINDS)
        ]

    def unassigned(self) -> list[str]:
        return [ev.point for ev in self.coactions() if ev.point not in self.assignment]

    def edge_pairs(self) -> set[tuple[str, str]]:
        """Process precedence plus writer-before-reader for each flow."""
        edges = set(self.process.order_pairs())
        for flow in self.assignment.values():
            edges.add((flow.writer, flow.reader))
        return edges

    def precedes(self, a: str, b: str) -> bool:
        return (a, b) in _closure(self.edge_pairs())


def assign_flow(run: Run, coaction: str, writer: str, channel: Channel) -> Run:
    reader_ev = run.process[coaction]
    writer_ev = run.process[writer]
    if coaction in run.assignment:
        raise AlreadyAssigned(f"coaction {coaction} already has a flow")
    match writer_ev.kind, reader_ev.kind:
        case Send(), Receive():
            kind = "message"
        case Emit(), Sample():
            kind = "source"
        case _:
            raise TypeMismatch(
                f"cannot pair {type(writer_ev.kind).__name__.lower()} at "
                f"{writer} with {type(reader_ev.kind).__name__.lower()} at "
                f"{coaction}"
            )
    net = run.process.network
    if channel not in net.channels:
        raise NoFlowChannel(f"channel {channel.id} is not declared in {net.name}")
    if (
        channel.entry not in net.subrefs(writer_ev.location)
        or channel.exit not in net.subrefs(reader_ev.location)
    ):
        raise NoFlowChannel(
            f"channel {channel.id} ({channel.entry} -> {channel.exit}) does not "
            f"flow from {writer_ev.location} to {reader_ev.location}"
        )
    run.assignment[coaction] = Flow(writer, coaction, channel, kind)
    return run


def _closure(pairs: set[tuple[str, str]]) -> set[tuple[str, str]]:
    out = set(pairs)
    succ: dict[str, set[str]] = {}
    for a, b in pairs:
        succ.setdefault(a, set()).add(b)
    changed = True
    while changed:
        changed = False
        for a, b in list(out):
            for c in succ.get(b, ()):
                if (a, c) not in out:
                    out.add((a, c))
                    succ.setdefault(a, set()).add(c)
                    changed = True
    return out


def check_sound(run: Run) -> tuple[bool, list[Flow]]:
    """A run is sound when no flow's reader comes before its writer."""
    missing = run.unassigned()
    if missing:
        raise IncompleteAssignment(
            f"run {run.name}: coactions without flows: {', '.join(sorted(missing))}"
        )
    closed = _closure(run.edge_pairs())
    offenders = [
        flow
        for flow in run.assignment.values()
        if (flow.reader, flow.writer) in closed
    ]
    return not offenders, offenders


def run_order(run: Run) -> frozenset[tuple[str, str]]:
    closed = _closure(run.edge_pairs())
    cyclic = sorted({a for a, b in closed if a == b})
    if cyclic:
        raise OrderCycle(
            f"run {run.name} has a cyclic order through {', '.join(cyclic)}"
        )
    return frozenset(closed)


def _topological(run: Run, order: frozenset[tuple[str, str]] | None = None) -> list[str]:
    if order is None:
        order = run_order(run)
    points = list(run.process.events)
    preds: dict[str, int] = {p: 0 for p in points}
    for _, b in order:
        if b in preds:
            preds[b] += 1
    return sorted(points, key=lambda p: (preds[p], p))


def _substitute(t: Term, binding: dict[int, Term]) -> Term:
    match t:
        case Indet(uid=uid) if uid in binding:
            return binding[uid]
        case Tup(items):
            return Tup(tuple(_substitute(i, binding) for i in items))
        case App(op, args):
            return App(op, tuple(_substitute(a, binding) for a in args))
        case _:
            return t


def _bind_match(
    pattern: Term, value: Term, binding: dict[int, Term], rigid: frozenset[int]
) -> bool:
    """One-way match: fresh indeterminates in the pattern bind to value parts;
    rigid ones (introduced by generate events) stand for themselves."""
    match pattern:
        case Indet(uid=uid):
            if uid in binding:
                return binding[uid] == value
            if uid in rigid:
                return pattern == value
            binding[uid] = value
            return True
        case Const() | Tick():
            return pattern == value
        case Tup(items):
            return (
                isinstance(value, Tup)
                and len(value.items) == len(items)
                and all(
                    _bind_match(p, v, binding, rigid)
                    for p, v in zip(items, value.items)
                )
            )
        case App(op, args):
            return (
                isinstance(value, App)
                and value.op.name == op.name
                and all(
                    _bind_match(p, v, binding, rigid)
                    for p, v in zip(args, value.args)
                )
            )
    return False


def rigid_indets(proc: Process) -> frozenset[int]:
    return frozenset(
        ev.kind.indet.uid
        for ev in proc.iter_events()
        if isinstance(ev.kind, Generate)
    )


def eval_guard(theory: TermTheory, guard: Term) -> bool:
    """Guards hold only through declared verifier equivalences (or literal
    equality via the builtin eq); nothing else evaluates to true."""
    guard = normalize(theory, guard)
    match guard:
        case App(op, args) if op.name == "eq" and len(args) == 2:
            return args[0] == args[1]
        case App(op, args):
            target = op.verifier_target()
            if target is not None and len(args) >= 2:
                expected = normalize(
                    theory, App(theory.operator(target), tuple(args[1:]))
                )
                return args[0] == expected
    return False


def run_binding(
    run: Run,
    theory: TermTheory,
    order: frozenset[tuple[str, str]] | None = None,
) -> tuple[dict[int, Term] | None, list[str]]:
    """Instantiate reader patterns along the run order.

    Returns the accumulated indeterminate binding, or None plus the list of
    mismatched flows/guards when the run is not complete. A precomputed run
    order may be passed to avoid recomputing the closure.
    """
    position = {p: i for i, p in enumerate(_topological(run, order))}
    flows = sorted(run.assignment.values(), key=lambda f: position[f.reader])
    rigid = rigid_indets(run.process)
    binding: dict[int, Term] = {}
    mismatches: list[str] = []
    for flow in flows:
        writer_ev = run.process[flow.writer]
        reader_ev = run.process[flow.reader]
        if reader_ev.payload is None:
            continue
        value = normalize(theory, _substitute(writer_ev.payload, binding))
        pattern = normalize(theory, _substitute(reader_ev.payload, binding))
        if not _bind_match(pattern, value, binding, rigid):
            mismatches.append(
                f"flow {flow.writer} -> {flow.reader}: sent {value!r}, "
                f"expected {pattern!r}"
            )
    for ev in run.process.iter_events():
        if isinstance(ev.kind, Receive) and ev.kind.guard is not None:
            guard = _substitute(ev.kind.guard, binding)
            if not eval_guard(theory, guard):
                mismatches.append(f"guard at {ev.point}: {guard!r} does not hold")
        elif isinstance(ev.kind, Compare):
            left = normalize(theory, _substitute(ev.kind.left, binding))
            right = normalize(theory, _substitute(ev.kind.right, binding))
            if left != right:
                mismatches.append(
                    f"comparison at {ev.point}: {left!r} differs from {right!r}"
                )
    if mismatches:
        return None, mismatches
    return binding, []


def check_complete(
    run: Run,
    theory: TermTheory,
    order: frozenset[tuple[str, str]] | None = None,
) -> tuple[bool, list[str]]:
    binding, mismatches = run_binding(run, theory, order)
    return binding is not None, mismatches


@dataclass
class Procedure:
    """A process bundled with its reference (secure) runs and axioms."""
    name: str
    network: ActorNetwork
    process: Process
    secure_runs: dict[str, Run] = field(default_factory=dict)
    axioms: tuple = ()

    def add_secure_run(self, run: Run) -> "Procedure":
        if run.process is not self.process:
            raise UnknownPoint(
                f"run {run.name} is over a different process than procedure "
                f"{self.name}"
            )
        self.secure_runs[run.name] = run
        return self

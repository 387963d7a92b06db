"""Processes: partially ordered multisets of localized events.

Every event sits at a configuration reference of a fixed network. Two
well-formedness conditions are enforced at mutation time: actions may only be
located where a controller is defined, and the order may only relate events at
subtree-comparable locations (no subliminal synchronization between disjoint
parts of the network).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .errors import (
    CycleIntroduced,
    DuplicatePoint,
    SubliminalSynchronization,
    UnknownConfiguration,
    UnknownPoint,
    UncontrolledActionLocation,
)
from .network import ActorNetwork, controller
from .terms import Indet, Term, TermTheory, easy_contains, indeterminates


# -- event kinds ---------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    payload: Term


@dataclass(frozen=True)
class Receive:
    payload: Term
    guard: Term | None = None


@dataclass(frozen=True)
class Emit:
    payload: Term


@dataclass(frozen=True)
class Sample:
    payload: Term | None = None


@dataclass(frozen=True)
class Generate:
    indet: Indet


@dataclass(frozen=True)
class Assign:
    store: str
    payload: Term


@dataclass(frozen=True)
class Compare:
    left: Term
    right: Term


@dataclass(frozen=True)
class Custom:
    tag: str
    payload: Term | None = None


EventKind = Send | Receive | Emit | Sample | Generate | Assign | Compare | Custom

# Actions demand a controller at their location; the rest are coactions or
# passive markers and may sit anywhere.
ACTION_KINDS = (Send, Sample, Generate, Assign, Compare)

# Event kinds that put a term somewhere (channel or store); origination is
# defined over these.
WRITE_KINDS = (Send, Emit, Assign)

# Reader/writer split used when a flow pairs two events.
READER_KINDS = (Receive, Sample)
WRITER_KINDS = (Send, Emit)


def carried_terms(kind: EventKind) -> tuple[Term, ...]:
    """Every term syntactically present in the event."""
    match kind:
        case Send(payload) | Emit(payload) | Assign(_, payload):
            return (payload,)
        case Receive(payload, guard):
            return (payload,) if guard is None else (payload, guard)
        case Sample(payload) | Custom(_, payload):
            return () if payload is None else (payload,)
        case Generate(indet):
            return (indet,)
        case Compare(left, right):
            return (left, right)
    return ()


def write_payload(kind: EventKind) -> Term | None:
    match kind:
        case Send(payload) | Emit(payload) | Assign(_, payload):
            return payload
    return None


@dataclass(frozen=True)
class LocalizedEvent:
    point: str
    kind: EventKind
    location: str

    @property
    def payload(self) -> Term | None:
        terms = carried_terms(self.kind)
        return terms[0] if terms else None

    def __repr__(self) -> str:
        return f"{self.point}:{type(self.kind).__name__.lower()}@{self.location}"


# -- the pomset ----------------------------------------------------------------

@dataclass
class Process:
    name: str
    network: ActorNetwork
    events: dict[str, LocalizedEvent] = field(default_factory=dict)
    # Held transitively closed at all times.
    _order: set[tuple[str, str]] = field(default_factory=set)

    def __getitem__(self, point: str) -> LocalizedEvent:
        try:
            return self.events[point]
        except KeyError:
            raise UnknownPoint(f"no point {point} in process {self.name}") from None

    def iter_events(self) -> Iterator[LocalizedEvent]:
        return iter(self.events.values())

    def used_indeterminates(self) -> frozenset[Indet]:
        out: set[Indet] = set()
        for ev in self.events.values():
            for t in carried_terms(ev.kind):
                out.update(indeterminates(t))
        return frozenset(out)

    def add_event(self, ev: LocalizedEvent) -> "Process":
        if ev.point in self.events:
            raise DuplicatePoint(f"point {ev.point} already in process {self.name}")
        if not self.network.is_declared(ev.location):
            raise UnknownConfiguration(
                f"event {ev.point} at undeclared location {ev.location}"
            )
        if isinstance(ev.kind, ACTION_KINDS):
            if controller(self.network, ev.location) is None:
                raise UncontrolledActionLocation(
                    f"{type(ev.kind).__name__.lower()} at {ev.location}: "
                    f"no controller defined"
                )
        if isinstance(ev.kind, Generate) and ev.kind.indet in self.used_indeterminates():
            raise DuplicatePoint(
                f"generate at {ev.point}: indeterminate {ev.kind.indet.name} "
                f"already used in process {self.name}"
            )
        self.events[ev.point] = ev
        return self

    def add_precedence(self, earlier: str, later: str) -> "Process":
        for p in (earlier, later):
            if p not in self.events:
                raise UnknownPoint(f"no point {p} in process {self.name}")
        if earlier == later or (later, earlier) in self._order:
            raise CycleIntroduced(f"ordering {earlier} before {later} creates a cycle")
        if (earlier, later) in self._order:
            return self
        before = {earlier} | {a for a, b in self._order if b == earlier}
        after = {later} | {b for a, b in self._order if a == later}
        fresh = {(a, b) for a in before for b in after} - self._order
        for a, b in fresh:
            la, lb = self.events[a].location, self.events[b].location
            if not self.network.comparable(la, lb):
                raise SubliminalSynchronization(
                    f"ordering {a}@{la} before {b}@{lb}: locations are "
                    f"subtree-incomparable"
                )
        for a, b in fresh:
            if a == b or (b, a) in self._order:
                raise CycleIntroduced(
                    f"ordering {earlier} before {later} creates a cycle through "
                    f"{a} and {b}"
                )
        self._order |= fresh
        return self

    def add_chain(self, *points: str) -> "Process":
        for a, b in zip(points, points[1:]):
            self.add_precedence(a, b)
        return self

    def precedes(self, a: str, b: str) -> bool:
        for p in (a, b):
            if p not in self.events:
                raise UnknownPoint(f"no point {p} in process {self.name}")
        return (a, b) in self._order

    def order_pairs(self) -> frozenset[tuple[str, str]]:
        return frozenset(self._order)

    def events_within(self, ref: str) -> list[LocalizedEvent]:
        """Events located at `ref` or inside its subtree."""
        refs = self.network.subrefs(ref)
        return [ev for ev in self.events.values() if ev.location in refs]

    def events_at(self, ref: str) -> list[LocalizedEvent]:
        return [ev for ev in self.events.values() if ev.location == ref]


def origination_points(history, t: Term, theory: TermTheory) -> frozenset[str]:
    """Minimal write events (under the history's order) carrying `t`.

    `history` is anything with iter_events() and precedes(a, b) — a process or
    a run. The result is an antichain: mutually order-incomparable writes whose
    payload contains `t` as an easy subterm, with no earlier such write.
    """
    matching = [
        ev
        for ev in history.iter_events()
        if isinstance(ev.kind, WRITE_KINDS)
        and easy_contains(theory, write_payload(ev.kind), t)
    ]
    out = set()
    for ev in matching:
        if not any(
            other.point != ev.point and history.precedes(other.point, ev.point)
            for other in matching
        ):
            out.add(ev.point)
    return frozenset(out)


def strand(
    proc: Process,
    location: str,
    items: Iterable[tuple[str, EventKind]],
) -> Process:
    """Add a totally ordered column of events at one location."""
    prev: str | None = None
    for point, kind in items:
        proc.add_event(LocalizedEvent(point, kind, location))
        if prev is not None:
            proc.add_precedence(prev, point)
        prev = point
    return proc

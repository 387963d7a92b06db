"""Derivation logic: order-of-events statements and the proof checker.

Statements are built from event descriptions (kind, payload, location, with a
tilde marking easy-containment instead of exact payload). A derivation starts
from a principal's assumed observations and advances by citing axiom schemas
(orig.m, fresh.2, ...) and procedure axioms; the checker replays each step,
discharging premises against the fact store and opening existentials as
eigenvariables, and accepts the script only if every claim is forced.

Epistemics: the declared process (the protocol) is public, so the checker may
scan declared strands for structural facts — who can generate a value, whether
an emit exists at all. Runtime facts stay local: only the verifier's own
observations and what the cited axioms yield ever enter the fact store.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

from .errors import (
    MissingBinding,
    SideConditionViolated,
    UnknownAxiomName,
    UnknownPrincipal,
    UnjustifiedStep,
)
from .network import ActorNetwork, Channel
from .process import (
    Assign,
    Compare,
    Custom,
    Emit,
    Generate,
    LocalizedEvent,
    Process,
    Receive,
    Sample,
    Send,
)
from .runs import Procedure, Run, run_order
from .terms import (
    App,
    Const,
    Indet,
    Term,
    TermTheory,
    Tick,
    TICK,
    Tup,
    easy_contains,
    fresh_indet,
    full_subterms,
    indeterminates,
    normalize,
)

ATTACKER = "ATK"
DEFAULT_ATTACKER_TYPES = frozenset({"cyb"})

WRITE_DESC_KINDS = frozenset({"send", "emit", "assign"})
READ_DESC_KINDS = frozenset({"recv", "samp"})


# -- event descriptions --------------------------------------------------------

@dataclass(frozen=True)
class EventDesc:
    """A description of an event: kind, payload shape, location.

    With tilde=True the payload is a lower bound — the described event carries
    some term containing it. kind "write" matches any of send/emit/assign.
    """
    kind: str
    payload: Term | None
    location: str
    tilde: bool = False

    def __repr__(self) -> str:
        mark = "~" if self.tilde else ""
        if self.payload is None:
            return f"{self.kind}{mark} at {self.location}"
        return f"{self.kind}{mark} {self.payload!r} at {self.location}"


def desc_kind_of(kind) -> str:
    match kind:
        case Send():
            return "send"
        case Receive():
            return "recv"
        case Emit():
            return "emit"
        case Sample():
            return "samp"
        case Generate():
            return "nu"
        case Assign():
            return "assign"
        case Compare():
            return "cmp"
        case Custom(tag=tag):
            return f"custom:{tag}"
    raise TypeError(f"no description kind for {kind!r}")


def desc_of_event(ev: LocalizedEvent) -> EventDesc:
    return EventDesc(desc_kind_of(ev.kind), ev.payload, ev.location)


def kind_matches(claimed: str, actual: str) -> bool:
    return claimed == actual or (claimed == "write" and actual in WRITE_DESC_KINDS)


# -- atoms -----------------------------------------------------------------------

@dataclass(frozen=True)
class Happened:
    desc: EventDesc

    def __repr__(self) -> str:
        return f"<{self.desc!r}>"


@dataclass(frozen=True)
class Before:
    first: EventDesc
    second: EventDesc

    def __repr__(self) -> str:
        return f"<{self.first!r} -> {self.second!r}>"


@dataclass(frozen=True)
class OriginatesAt:
    term: Term
    desc: EventDesc

    def __repr__(self) -> str:
        return f"<orig {self.desc!r}>"


@dataclass(frozen=True)
class EqualTerms:
    left: Term
    right: Term

    def __repr__(self) -> str:
        return f"<{self.left!r} == {self.right!r}>"


@dataclass(frozen=True)
class ConfigEq:
    left: str
    right: str

    def __repr__(self) -> str:
        return f"<{self.left} == {self.right}>"


@dataclass(frozen=True)
class ControlledBy:
    config: str
    principal: str

    def __repr__(self) -> str:
        return f"<controlled {self.config} by {self.principal}>"


@dataclass(frozen=True)
class LocalHistoryFact:
    tag: str
    payload: Term | None
    location: str

    def __repr__(self) -> str:
        if self.payload is None:
            return f"<lhf {self.tag} at {self.location}>"
        return f"<lhf {self.tag}({self.payload!r}) at {self.location}>"


Atom = (
    Happened
    | Before
    | OriginatesAt
    | EqualTerms
    | ConfigEq
    | ControlledBy
    | LocalHistoryFact
)


# -- formulas --------------------------------------------------------------------

@dataclass(frozen=True)
class FAtom:
    atom: Atom


@dataclass(frozen=True)
class FAnd:
    parts: tuple["Formula", ...]


@dataclass(frozen=True)
class FOr:
    parts: tuple["Formula", ...]


@dataclass(frozen=True)
class FImp:
    premise: "Formula"
    conclusion: "Formula"


@dataclass(frozen=True)
class FExists:
    var: str
    body: "Formula"


@dataclass(frozen=True)
class FNot:
    atom: Atom  # restricted: generate descriptions and local history facts


Formula = FAtom | FAnd | FOr | FImp | FExists | FNot

TRUTH = FAnd(())


def conj(parts: Iterable[Formula]) -> Formula:
    items = tuple(parts)
    if len(items) == 1:
        return items[0]
    return FAnd(items)


ChainElement = EventDesc | OriginatesAt


def chain(elements: Iterable[ChainElement]) -> Formula:
    """a -> b -> c: every element happened, in the listed order."""
    elems = list(elements)
    parts: list[Formula] = []
    descs: list[EventDesc] = []
    for el in elems:
        if isinstance(el, OriginatesAt):
            parts.append(FAtom(el))
            descs.append(el.desc)
        else:
            parts.append(FAtom(Happened(el)))
            descs.append(el)
    for a, b in zip(descs, descs[1:]):
        parts.append(FAtom(Before(a, b)))
    return conj(parts)


def iter_atoms(f: Formula) -> Iterator[Atom]:
    match f:
        case FAtom(atom):
            yield atom
        case FNot(atom):
            yield atom
        case FAnd(parts) | FOr(parts):
            for p in parts:
                yield from iter_atoms(p)
        case FImp(premise, conclusion):
            yield from iter_atoms(premise)
            yield from iter_atoms(conclusion)
        case FExists(_, body):
            yield from iter_atoms(body)


def _map_term(t: Term, tmap: Mapping[Term, Term]) -> Term:
    if t in tmap:
        return tmap[t]
    match t:
        case Tup(items):
            return Tup(tuple(_map_term(i, tmap) for i in items))
        case App(op, args):
            return App(op, tuple(_map_term(a, tmap) for a in args))
        case _:
            return t


def _map_desc(d: EventDesc, tmap: Mapping[Term, Term], lmap: Mapping[str, str]) -> EventDesc:
    payload = None if d.payload is None else _map_term(d.payload, tmap)
    return EventDesc(d.kind, payload, lmap.get(d.location, d.location), d.tilde)


def map_atom(a: Atom, tmap: Mapping[Term, Term], lmap: Mapping[str, str]) -> Atom:
    match a:
        case Happened(desc):
            return Happened(_map_desc(desc, tmap, lmap))
        case Before(first, second):
            return Before(_map_desc(first, tmap, lmap), _map_desc(second, tmap, lmap))
        case OriginatesAt(term, desc):
            return OriginatesAt(_map_term(term, tmap), _map_desc(desc, tmap, lmap))
        case EqualTerms(left, right):
            return EqualTerms(_map_term(left, tmap), _map_term(right, tmap))
        case ConfigEq(left, right):
            return ConfigEq(lmap.get(left, left), lmap.get(right, right))
        case ControlledBy(config, principal):
            return ControlledBy(lmap.get(config, config), principal)
        case LocalHistoryFact(tag, payload, location):
            return LocalHistoryFact(
                tag,
                None if payload is None else _map_term(payload, tmap),
                lmap.get(location, location),
            )
    raise TypeError(f"not an atom: {a!r}")


def map_formula(
    f: Formula, tmap: Mapping[Term, Term], lmap: Mapping[str, str]
) -> Formula:
    match f:
        case FAtom(atom):
            return FAtom(map_atom(atom, tmap, lmap))
        case FNot(atom):
            return FNot(map_atom(atom, tmap, lmap))
        case FAnd(parts):
            return FAnd(tuple(map_formula(p, tmap, lmap) for p in parts))
        case FOr(parts):
            return FOr(tuple(map_formula(p, tmap, lmap) for p in parts))
        case FImp(premise, conclusion):
            return FImp(
                map_formula(premise, tmap, lmap), map_formula(conclusion, tmap, lmap)
            )
        case FExists(var, body):
            return FExists(var, map_formula(body, tmap, lmap))
    raise TypeError(f"not a formula: {f!r}")


# -- axiom schemas ---------------------------------------------------------------

SCHEMA_NAMES = (
    "orig.m",
    "orig.s",
    "fresh.1",
    "fresh.2",
    "auch.m.1",
    "auch.m.2",
    "auch.p.1",
    "auch.p.2",
    "cr",
    "cog",
)


@dataclass(frozen=True)
class AxiomSchema:
    name: str
    holes: tuple[str, ...]


SCHEMAS: dict[str, AxiomSchema] = {
    "orig.m": AxiomSchema("orig.m", ("t", "at")),
    "orig.s": AxiomSchema("orig.s", ("t", "at")),
    "fresh.1": AxiomSchema("fresh.1", ("x", "trigger")),
    "fresh.2": AxiomSchema("fresh.2", ("x", "trigger")),
    "auch.m.1": AxiomSchema("auch.m.1", ("channel", "t")),
    "auch.m.2": AxiomSchema("auch.m.2", ("channel", "t")),
    "auch.p.1": AxiomSchema("auch.p.1", ("channel", "t")),
    "auch.p.2": AxiomSchema("auch.p.2", ("channel", "t")),
    "cr": AxiomSchema("cr", ("P", "Q", "x", "c", "r")),
    "cog": AxiomSchema("cog", ("at", "event")),
}

_eigen_counter = itertools.count(1)


def _fresh_eigen_name() -> str:
    return f"?E{next(_eigen_counter)}"


def cr_global_chain(P: str, Q: str, x: Term, c: Term, r: Term) -> Formula:
    """The strong challenge-response conclusion: fresh challenge out, the
    responder touched it, the response originated there, response back."""
    return chain(
        [
            EventDesc("nu", x, P),
            EventDesc("send", c, P),
            EventDesc("recv", c, Q, tilde=True),
            OriginatesAt(r, EventDesc("write", r, Q, tilde=True)),
            EventDesc("recv", r, P),
        ]
    )


def cr_local_chain(P: str, x: Term, c: Term, r: Term) -> Formula:
    return chain(
        [
            EventDesc("nu", x, P),
            EventDesc("send", c, P),
            EventDesc("recv", r, P),
        ]
    )


def instantiate_axiom(
    schema: AxiomSchema | str,
    bindings: Mapping[str, object],
    env: Procedure | None = None,
) -> Formula:
    """Build the formula an axiom schema yields under the given hole bindings.

    The result is an implication ready for premise discharge; existential
    conclusions keep a placeholder variable which the checker opens as an
    eigenvariable.
    """
    if isinstance(schema, str):
        try:
            schema = SCHEMAS[schema]
        except KeyError:
            raise UnknownAxiomName(f"no axiom schema named {schema}") from None
    missing = [h for h in schema.holes if h not in bindings]
    if missing:
        raise MissingBinding(
            f"{schema.name}: unbound holes {', '.join(missing)}"
        )
    name = schema.name
    if name in ("orig.m", "orig.s"):
        t = bindings["t"]
        at = str(bindings["at"])
        if not isinstance(t, (Const, Indet, Tup, App, Tick)):
            raise MissingBinding(f"{name}: t must be a term, got {t!r}")
        write_kind, read_kind = ("send", "recv") if name == "orig.m" else ("emit", "samp")
        var = _fresh_eigen_name()
        return FImp(
            FAtom(Happened(EventDesc(read_kind, t, at))),
            FExists(
                var,
                chain([EventDesc(write_kind, t, var), EventDesc(read_kind, t, at)]),
            ),
        )
    if name in ("fresh.1", "fresh.2"):
        x = bindings["x"]
        trigger = bindings["trigger"]
        if not isinstance(x, Indet):
            raise MissingBinding(f"{name}: x must be an indeterminate, got {x!r}")
        if not isinstance(trigger, EventDesc):
            raise MissingBinding(
                f"{name}: trigger must be an event description, got {trigger!r}"
            )
        var = _fresh_eigen_name()
        if name == "fresh.1":
            return FImp(
                FAtom(Happened(trigger)),
                FExists(var, chain([EventDesc("nu", x, var), trigger])),
            )
        send_branch = chain(
            [
                EventDesc("nu", x, var),
                OriginatesAt(x, EventDesc("send", x, var, tilde=True)),
                EventDesc("recv", x, trigger.location, tilde=True),
                trigger,
            ]
        )
        apr_branch = chain(
            [
                EventDesc("nu", x, var),
                OriginatesAt(x, EventDesc("emit", x, var, tilde=True)),
                EventDesc("samp", x, trigger.location, tilde=True),
                trigger,
            ]
        )
        return FImp(
            FAnd(
                (
                    FNot(Happened(EventDesc("nu", x, trigger.location))),
                    FAtom(Happened(trigger)),
                )
            ),
            FExists(var, FOr((send_branch, apr_branch))),
        )
    if name.startswith("auch."):
        channel = bindings["channel"]
        t = bindings["t"]
        if not isinstance(channel, Channel):
            raise MissingBinding(f"{name}: channel binding must be a Channel")
        if name not in channel.auth_flags:
            raise SideConditionViolated(
                f"channel {channel.id} does not carry the {name} flag"
            )
        write_kind, read_kind = (
            ("send", "recv") if name.startswith("auch.m") else ("emit", "samp")
        )
        entry_desc = EventDesc(write_kind, t, channel.entry)
        exit_desc = EventDesc(read_kind, t, channel.exit)
        # .1 is asserted from the writing end, .2 from the reading end.
        premise = entry_desc if name.endswith(".1") else exit_desc
        return FImp(FAtom(Happened(premise)), chain([entry_desc, exit_desc]))
    if name == "cog":
        at = str(bindings["at"])
        event = bindings["event"]
        if not isinstance(event, EventDesc):
            raise MissingBinding("cog: event must be an event description")
        if event.location != at:
            raise SideConditionViolated(
                f"cog at {at} can only confirm events at {at}, not {event.location}"
            )
        if event.kind != "samp":
            raise SideConditionViolated("cog confirms sampling events only")
        rep = desc_representation(event)
        return FImp(
            FAtom(Happened(EventDesc("samp", rep, at))),
            FAtom(Happened(event)),
        )
    if name == "cr":
        P, Q = str(bindings["P"]), str(bindings["Q"])
        x, c, r = bindings["x"], bindings["c"], bindings["r"]
        if not isinstance(x, Indet):
            raise MissingBinding("cr: x must be an indeterminate")
        return FImp(cr_local_chain(P, x, c, r), cr_global_chain(P, Q, x, c, r))
    raise UnknownAxiomName(f"no axiom schema named {name}")


def desc_representation(desc: EventDesc) -> Term:
    """The term standing for a described event, mirroring event representation."""
    kind = desc.kind
    tag = f"ev.{_REP_TAGS.get(kind, kind)}"
    payload = desc.payload if desc.payload is not None else TICK
    return Tup((Const(tag), Const(f"at.{desc.location}"), payload))


_REP_TAGS = {"recv": "receive", "samp": "sample", "nu": "generate", "cmp": "compare"}


# -- procedure axioms ------------------------------------------------------------

@dataclass(frozen=True)
class ProcedureAxiom:
    """A procedure-specific assumption: optionally universally quantified
    premise => conclusion over the procedure's vocabulary."""
    name: str
    formula: Formula
    term_vars: tuple[Indet, ...] = ()
    loc_vars: tuple[str, ...] = ()

    def injective_operator(self) -> str | None:
        """The operator this axiom declares injective, if it has that shape:
        f(..) == f(..) => pairwise argument equalities."""
        f = self.formula
        if not isinstance(f, FImp):
            return None
        prem = f.premise
        if not (isinstance(prem, FAtom) and isinstance(prem.atom, EqualTerms)):
            return None
        left, right = prem.atom.left, prem.atom.right
        if not (isinstance(left, App) and isinstance(right, App)):
            return None
        if left.op.name != right.op.name:
            return None
        conclusion_atoms = list(iter_atoms(f.conclusion))
        if not conclusion_atoms or not all(
            isinstance(a, EqualTerms) for a in conclusion_atoms
        ):
            return None
        pairs = {(a.left, a.right) for a in conclusion_atoms}
        expected = set(zip(left.args, right.args))
        if pairs <= expected and pairs:
            return left.op.name
        return None


# -- derivations -----------------------------------------------------------------

@dataclass(frozen=True)
class Step:
    index: int
    citations: tuple[str, ...]  # schema names and procedure axiom names; () = given
    bindings: Mapping[str, object]
    claim: Formula
    span: object | None = field(default=None, compare=False)


@dataclass(frozen=True)
class QedClause:
    formula: Formula
    instance_of: str | None = None
    bindings: Mapping[str, object] = field(default_factory=dict)
    span: object | None = field(default=None, compare=False)


@dataclass
class Derivation:
    name: str
    principal: str
    procedure_name: str
    observations: tuple[Formula, ...]
    complete_history: bool
    steps: tuple[Step, ...]
    goal: QedClause
    status: str = "unchecked"  # unchecked | accepted | rejected
    failed_step: int | None = None
    reason: str | None = None

    def reject(self, step_index: int, reason: str) -> "Derivation":
        self.status = "rejected"
        self.failed_step = step_index
        self.reason = reason
        return self

    def accept(self) -> "Derivation":
        self.status = "accepted"
        self.failed_step = None
        self.reason = None
        return self


# -- the fact store ---------------------------------------------------------------

_LOC_RANKS = {"declared": 0, "attacker": 1, "named": 2, "internal": 3}


def _term_rank(t: Term) -> tuple[int, str]:
    """Preference order for canonical representatives: ground terms first,
    then rigid-looking indeterminates, eigen placeholders last."""
    match t:
        case Const() | Tick():
            return (0, repr(t))
        case App() | Tup():
            return (1, repr(t))
        case Indet(uid=uid):
            name = t.name
            if name.startswith("?"):
                return (3, f"{name}#{uid}")
            return (2, f"{name}#{uid}")
    return (4, repr(t))


class FactStore:
    """Everything the verifier has established, plus the equality and
    eigenvariable bookkeeping needed to match claims against it."""

    def __init__(
        self,
        procedure: Procedure,
        theory: TermTheory,
        verifier: str,
        attacker_types: frozenset[str] = DEFAULT_ATTACKER_TYPES,
    ):
        self.procedure = procedure
        self.theory = theory
        self.network = procedure.network
        self.verifier = verifier
        self.attacker_types = attacker_types
        self.happened: set[EventDesc] = set()
        self.befores: set[tuple[EventDesc, EventDesc]] = set()
        self.origs: set[tuple[Term, EventDesc]] = set()
        self.equalities: dict[Term, Term] = {}
        self.loc_parent: dict[str, str] = {}
        self.lhfs: set[LocalHistoryFact] = set()
        self.controlled: set[ControlledBy] = set()
        self.disjunctions: list[FOr] = []
        self.implications: list[FImp] = []
        self.eigen_domains: dict[str, frozenset[str] | None] = {}
        self.eigen_terms: dict[int, Indet] = {}
        self.complete_history = False
        self.resolved_origs: set[tuple[Term, EventDesc]] = set()
        self.axiom_firings: set[tuple] = set()
        self.schema_firings: set[tuple] = set()

    def copy(self) -> "FactStore":
        out = FactStore(self.procedure, self.theory, self.verifier, self.attacker_types)
        out.happened = set(self.happened)
        out.befores = set(self.befores)
        out.origs = set(self.origs)
        out.equalities = dict(self.equalities)
        out.loc_parent = dict(self.loc_parent)
        out.lhfs = set(self.lhfs)
        out.controlled = set(self.controlled)
        out.disjunctions = list(self.disjunctions)
        out.implications = list(self.implications)
        out.eigen_domains = dict(self.eigen_domains)
        out.eigen_terms = dict(self.eigen_terms)
        out.complete_history = self.complete_history
        out.resolved_origs = set(self.resolved_origs)
        out.axiom_firings = set(self.axiom_firings)
        out.schema_firings = set(self.schema_firings)
        return out

    # -- equality engine --

    def _find_term(self, t: Term) -> Term:
        seen = []
        while t in self.equalities:
            seen.append(t)
            t = self.equalities[t]
        for s in seen:
            self.equalities[s] = t
        return t

    def canon_term(self, t: Term) -> Term:
        t = normalize(self.theory, t)
        for _ in range(50):
            rebuilt: Term
            match t:
                case Tup(items):
                    rebuilt = Tup(tuple(self.canon_term(i) for i in items))
                case App(op, args):
                    rebuilt = App(op, tuple(self.canon_term(a) for a in args))
                case _:
                    rebuilt = t
            found = self._find_term(rebuilt)
            if found == t:
                return t
            t = found
        return t

    def union_terms(self, a: Term, b: Term) -> None:
        ca, cb = self.canon_term(a), self.canon_term(b)
        if ca == cb:
            return
        keep, drop = sorted((ca, cb), key=_term_rank)
        self.equalities[drop] = keep

    def terms_equal(self, a: Term, b: Term) -> bool:
        return self.canon_term(a) == self.canon_term(b)

    # -- location equality / eigenvariables --

    def canon_loc(self, loc: str) -> str:
        seen = []
        while loc in self.loc_parent:
            seen.append(loc)
            loc = self.loc_parent[loc]
        for s in seen:
            self.loc_parent[s] = loc
        return loc

    def _loc_rank(self, loc: str) -> tuple[int, str]:
        if self.network.is_declared(loc):
            return (_LOC_RANKS["declared"], loc)
        if loc == ATTACKER:
            return (_LOC_RANKS["attacker"], loc)
        if loc.startswith("?"):
            return (_LOC_RANKS["internal"], loc)
        return (_LOC_RANKS["named"], loc)

    def union_locs(self, a: str, b: str) -> None:
        ca, cb = self.canon_loc(a), self.canon_loc(b)
        if ca == cb:
            return
        keep, drop = sorted((ca, cb), key=self._loc_rank)
        self.loc_parent[drop] = keep
        if drop in self.eigen_domains:
            dom = self.eigen_domains.pop(drop)
            if self.network.is_declared(keep) or keep == ATTACKER:
                pass  # resolved to a concrete place; no domain to carry
            elif keep in self.eigen_domains:
                kd = self.eigen_domains[keep]
                if dom is not None:
                    self.eigen_domains[keep] = dom if kd is None else (kd & dom)
            else:
                self.eigen_domains[keep] = dom

    def locs_equal(self, a: str, b: str) -> bool:
        return self.canon_loc(a) == self.canon_loc(b)

    def is_eigen_loc(self, loc: str) -> bool:
        loc = self.canon_loc(loc)
        return not self.network.is_declared(loc) and loc != ATTACKER

    def new_config_eigen(self, domain: frozenset[str] | None) -> str:
        name = _fresh_eigen_name()
        self.eigen_domains[name] = domain
        return name

    def new_term_eigen(self, display: str) -> Indet:
        e = fresh_indet(f"?{display}")
        self.eigen_terms[e.uid] = e
        return e

    def canon_desc(self, d: EventDesc) -> EventDesc:
        payload = None if d.payload is None else self.canon_term(d.payload)
        return EventDesc(d.kind, payload, self.canon_loc(d.location), d.tilde)

    # -- adding facts --

    def add_atom(self, a: Atom) -> None:
        match a:
            case Happened(desc):
                self.happened.add(self.canon_desc(desc))
            case Before(first, second):
                f, s = self.canon_desc(first), self.canon_desc(second)
                self.befores.add((f, s))
                self.happened.add(f)
                self.happened.add(s)
            case OriginatesAt(term, desc):
                d = self.canon_desc(desc)
                self.origs.add((self.canon_term(term), d))
                self.happened.add(d)
            case EqualTerms(left, right):
                self.union_terms(left, right)
            case ConfigEq(left, right):
                self.union_locs(left, right)
            case ControlledBy():
                self.controlled.add(a)
            case LocalHistoryFact(tag, payload, location):
                self.lhfs.add(
                    LocalHistoryFact(
                        tag,
                        None if payload is None else self.canon_term(payload),
                        self.canon_loc(location),
                    )
                )
            case _:
                raise TypeError(f"cannot store {a!r}")

    def add_formula(self, f: Formula) -> None:
        match f:
            case FAtom(atom):
                self.add_atom(atom)
            case FAnd(parts):
                for p in parts:
                    self.add_formula(p)
            case FOr() as disj:
                survivors = [p for p in disj.parts if not self.refutes(p)]
                if len(survivors) == 1:
                    self.add_formula(survivors[0])
                elif survivors:
                    self.disjunctions.append(FOr(tuple(survivors)))
            case FImp() as imp:
                self.implications.append(imp)
            case FExists(var, body):
                opened = self.open_existential(var, body)
                self.add_formula(opened)
            case FNot():
                pass  # negative facts are discharged, never stored
            case _:
                raise TypeError(f"cannot store {f!r}")

    def open_existential(self, var: str, body: Formula) -> Formula:
        """Replace the bound variable by a fresh eigenvariable (configuration
        or term, according to how the variable is used)."""
        used_as_loc = any(
            var in _atom_locations(a) for a in iter_atoms(body)
        )
        if used_as_loc:
            domain = self.config_eigen_domain(var, body)
            name = self.new_config_eigen(domain)
            if domain is not None and len(domain) == 1:
                only = next(iter(domain))
                self.union_locs(name, only)
            return map_formula(body, {}, {var: name})
        # a term variable: occurrences were parsed as an indeterminate
        placeholders = [
            i
            for a in iter_atoms(body)
            for t in _atom_terms(a)
            for i in indeterminates(t)
            if i.name == var
        ]
        if not placeholders:
            return body
        eigen = self.new_term_eigen(var)
        return map_formula(body, {placeholders[0]: eigen}, {})

    # -- structural scans over the declared process (the protocol is public) --

    def declared_events(self) -> Iterator[LocalizedEvent]:
        return self.procedure.process.iter_events()

    def nu_hosts(self, x: Term) -> frozenset[str]:
        x = self.canon_term(x)
        return frozenset(
            ev.location
            for ev in self.declared_events()
            if isinstance(ev.kind, Generate) and self.canon_term(ev.kind.indet) == x
        )

    def _payload_could_contain(self, payload: Term, t: Term) -> bool:
        """Whether a declared payload could carry t in some run: it contains
        t already, or it has unbound binder indeterminates."""
        if easy_contains(self.theory, self.canon_term(payload), self.canon_term(t)):
            return True
        rigid = {
            ev.kind.indet.uid
            for ev in self.declared_events()
            if isinstance(ev.kind, Generate)
        }
        return any(
            i.uid not in rigid and i.uid not in self.eigen_terms
            for i in indeterminates(self.canon_term(payload))
        )

    def emit_branch_alive(self, x: Term) -> bool:
        """fresh.2's source branch needs the generator of x to also emit it."""
        hosts = self.nu_hosts(x)
        for host in hosts:
            refs = self.network.subrefs(host)
            for ev in self.declared_events():
                if ev.location in refs and isinstance(ev.kind, Emit):
                    if self._payload_could_contain(ev.kind.payload, x):
                        return True
        return False

    def send_branch_alive(self, x: Term) -> bool:
        hosts = self.nu_hosts(x)
        for host in hosts:
            refs = self.network.subrefs(host)
            for ev in self.declared_events():
                if ev.location in refs and isinstance(ev.kind, (Send, Assign)):
                    if self._payload_could_contain(ev.kind.payload, x):
                        return True
        return False

    def config_eigen_domain(self, var: str, body: Formula) -> frozenset[str] | None:
        """Feasible configurations for an existential location: declared
        locations whose strands could host the described events, plus the
        attacker when an attacker-writable channel can carry them."""
        descs = [
            d
            for a in iter_atoms(body)
            for d in _atom_descs(a)
            if d.location == var
        ]
        if not descs:
            return None
        # the reader's side, if the body pins one, narrows by channel support
        reader_locs = {
            d.location
            for a in iter_atoms(body)
            for d in _atom_descs(a)
            if d.location != var and d.kind in READ_DESC_KINDS
        }
        domain: set[str] | None = None
        for d in descs:
            feasible = self._hosts_for_desc(d, reader_locs)
            domain = feasible if domain is None else (domain & feasible)
        return frozenset(domain) if domain is not None else None

    def _hosts_for_desc(self, d: EventDesc, reader_locs: set[str]) -> set[str]:
        out: set[str] = set()
        for ev in self.declared_events():
            if not kind_matches(d.kind, desc_kind_of(ev.kind)):
                continue
            payload = ev.payload
            if d.payload is not None and payload is not None:
                if not self._payload_unifiable(payload, d.payload):
                    continue
            host = ev.location
            if d.kind in ("send", "emit") and reader_locs:
                if not self._route_exists(host, reader_locs):
                    continue
            out.add(host)
        if d.kind in WRITE_DESC_KINDS or d.kind == "write":
            if self._attacker_route(reader_locs):
                out.add(ATTACKER)
        return out

    def _payload_unifiable(self, declared: Term, target: Term) -> bool:
        binding, ok = unify_terms(
            self, declared, target, licenses=frozenset(), require_license=False
        )
        return ok

    def _route_exists(self, writer: str, reader_locs: set[str]) -> bool:
        for reader in reader_locs:
            reader = self.canon_loc(reader)
            if self.is_eigen_loc(reader):
                return True  # unknown reader: no narrowing possible
            for ch in self.network.channels:
                if ch.entry in self.network.subrefs(writer) and ch.exit in self.network.subrefs(reader):
                    return True
        return not reader_locs

    def _attacker_route(self, reader_locs: set[str]) -> bool:
        if not reader_locs:
            return bool(self.attacker_types)
        for reader in reader_locs:
            reader = self.canon_loc(reader)
            if self.is_eigen_loc(reader):
                return bool(self.attacker_types)
            for ch in self.network.channels:
                if ch.type in self.attacker_types and ch.exit in self.network.subrefs(reader):
                    return True
        return False

    # -- negative discharge (complete local history / protocol structure) --

    def refutes(self, f: Formula) -> bool:
        """Whether a disjunct is structurally impossible: an origination the
        verifier's complete history rules out, or a location identification
        that cannot hold."""
        atoms = list(iter_atoms(f))
        for a in atoms:
            if isinstance(a, OriginatesAt):
                if self._refute_orig(a):
                    return True
            if isinstance(a, ConfigEq):
                if self._refute_config_eq(a):
                    return True
        return False

    def _refute_config_eq(self, a: ConfigEq) -> bool:
        left, right = self.canon_loc(a.left), self.canon_loc(a.right)
        if left == right:
            return False
        le, re = self.is_eigen_loc(left), self.is_eigen_loc(right)
        if not le and not re:
            return True  # two distinct concrete locations never coincide
        if le and re:
            return False
        eigen, other = (left, right) if le else (right, left)
        dom = self.eigen_domains.get(eigen)
        if dom is not None and other not in dom:
            return True
        if self._refute_orig_relocation(eigen, other):
            return True
        return False

    def _refute_orig_relocation(self, eigen: str, other: str) -> bool:
        """Whether moving the eigenvariable's origination handles to the
        concrete location contradicts the verifier's complete history."""
        for (t, d) in self.origs:
            if self.canon_loc(d.location) != eigen:
                continue
            moved = EventDesc(d.kind, d.payload, other, d.tilde)
            if self._refute_orig(OriginatesAt(t, moved)):
                return True
        return False

    def _refute_orig(self, a: OriginatesAt) -> bool:
        if not self.complete_history:
            return False
        loc = self.canon_loc(a.desc.location)
        if self.is_eigen_loc(loc):
            return False
        owner = self.network.control.get(loc)
        if owner != self.verifier:
            return False
        t = self.canon_term(a.term)
        refs = self.network.subrefs(loc)
        for ev in self.declared_events():
            if ev.location in refs and isinstance(ev.kind, (Send, Emit, Assign)):
                if self._payload_could_contain(ev.payload, t):
                    return False
        return True

    def discharge_negative(self, atom: Atom) -> bool:
        """Negated premises: no-generation claims and local history facts."""
        match atom:
            case Happened(EventDesc(kind="nu", payload=x, location=loc)) if x is not None:
                hosts = self.nu_hosts(x)
                loc = self.canon_loc(loc)
                if self.is_eigen_loc(loc):
                    dom = self.eigen_domains.get(loc)
                    return dom is not None and not (set(dom) & set(hosts))
                return not (set(hosts) & self.network.subrefs(loc)) if self.network.is_declared(loc) else loc not in hosts
            case LocalHistoryFact():
                return atom not in self.lhfs and self.complete_history
        return False


def _atom_descs(a: Atom) -> tuple[EventDesc, ...]:
    match a:
        case Happened(desc):
            return (desc,)
        case Before(first, second):
            return (first, second)
        case OriginatesAt(_, desc):
            return (desc,)
    return ()


def _atom_locations(a: Atom) -> tuple[str, ...]:
    locs = [d.location for d in _atom_descs(a)]
    match a:
        case ConfigEq(left, right):
            locs += [left, right]
        case ControlledBy(config, _):
            locs.append(config)
        case LocalHistoryFact(_, _, location):
            locs.append(location)
    return tuple(locs)


def _atom_terms(a: Atom) -> tuple[Term, ...]:
    out = [d.payload for d in _atom_descs(a) if d.payload is not None]
    match a:
        case OriginatesAt(term, _):
            out.append(term)
        case EqualTerms(left, right):
            out += [left, right]
        case LocalHistoryFact(_, payload, _) if payload is not None:
            out.append(payload)
    return tuple(out)


# -- unification with injectivity licensing ---------------------------------------

def unify_terms(
    store: FactStore,
    pattern: Term,
    target: Term,
    licenses: frozenset[str],
    require_license: bool = True,
    _opaque: str | None = None,
) -> tuple[dict[int, Term], bool]:
    """Unify a declared payload (whose binder indeterminates may bind) with a
    target term. Binding inside an opaque argument position infers argument
    equality from operator equality, which is only sound for operators whose
    injectivity axiom is cited this step."""
    binding: dict[int, Term] = {}

    rigid = {
        ev.kind.indet.uid
        for ev in store.declared_events()
        if isinstance(ev.kind, Generate)
    } | set(store.eigen_terms)

    def walk(p: Term, t: Term, opaque_op: str | None) -> bool:
        p = store.canon_term(_map_uid(p, binding))
        t = store.canon_term(t)
        if p == t:
            return True
        match p:
            case Indet(uid=uid) if uid not in rigid:
                if opaque_op is not None and require_license and opaque_op not in licenses:
                    return False
                binding[uid] = t
                return True
            case Tup(items):
                return (
                    isinstance(t, Tup)
                    and len(t.items) == len(items)
                    and all(walk(a, b, opaque_op) for a, b in zip(items, t.items))
                )
            case App(op, args):
                if not (isinstance(t, App) and t.op.name == op.name):
                    return False
                return all(
                    walk(
                        a,
                        b,
                        opaque_op if transparent else op.name,
                    )
                    for a, b, transparent in zip(args, t.args, op.transparency)
                )
        return False

    ok = walk(pattern, target, _opaque)
    return binding, ok


def _map_uid(t: Term, binding: Mapping[int, Term]) -> Term:
    match t:
        case Indet(uid=uid) if uid in binding:
            return binding[uid]
        case Tup(items):
            return Tup(tuple(_map_uid(i, binding) for i in items))
        case App(op, args):
            return App(op, tuple(_map_uid(a, binding) for a in args))
        case _:
            return t


# -- entailment against the store --------------------------------------------------

def desc_entails(store: FactStore, actual: EventDesc, claimed: EventDesc) -> bool:
    """Whether a stored event description satisfies a claimed one: same or
    more specific kind, a location at or below the claimed one, and a payload
    that carries the claimed content."""
    e, d = store.canon_desc(actual), store.canon_desc(claimed)
    if not kind_matches(d.kind, e.kind):
        return False
    if e.location != d.location:
        if not (
            store.network.is_declared(d.location)
            and e.location in store.network.subrefs(d.location)
        ):
            return False
    if d.payload is None:
        return True
    if e.payload is None:
        return False
    if d.tilde:
        return e.payload == d.payload or easy_contains(store.theory, e.payload, d.payload)
    if e.tilde:
        return False  # a lower bound never certifies an exact payload
    return e.payload == d.payload


def _reaches(store: FactStore, starts: set[EventDesc], targets: set[EventDesc]) -> bool:
    if not starts or not targets:
        return False
    edges: dict[EventDesc, set[EventDesc]] = {}
    for a, b in store.befores:
        edges.setdefault(store.canon_desc(a), set()).add(store.canon_desc(b))
    frontier = list(starts)
    seen = set(starts)
    while frontier:
        node = frontier.pop()
        if node in targets:
            return True
        for nxt in edges.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    return bool(seen & targets)


def atom_entailed(store: FactStore, a: Atom) -> bool:
    match a:
        case Happened(desc):
            return any(desc_entails(store, e, desc) for e in store.happened)
        case Before(first, second):
            starts = {
                store.canon_desc(e)
                for e in store.happened
                if desc_entails(store, e, first)
            }
            targets = {
                store.canon_desc(e)
                for e in store.happened
                if desc_entails(store, e, second)
            }
            return _reaches(store, starts, targets)
        case OriginatesAt(term, desc):
            t = store.canon_term(term)
            return any(
                store.canon_term(t2) == t and desc_entails(store, d2, desc)
                for (t2, d2) in store.origs
            )
        case EqualTerms(left, right):
            return store.terms_equal(left, right)
        case ConfigEq(left, right):
            return store.locs_equal(left, right)
        case ControlledBy(config, principal):
            if a in store.controlled:
                return True
            return store.network.control.get(store.canon_loc(config)) == principal
        case LocalHistoryFact(tag, payload, location):
            want = LocalHistoryFact(
                tag,
                None if payload is None else store.canon_term(payload),
                store.canon_loc(location),
            )
            return any(
                LocalHistoryFact(
                    l.tag,
                    None if l.payload is None else store.canon_term(l.payload),
                    store.canon_loc(l.location),
                )
                == want
                for l in store.lhfs
            )
    return False


def entails(
    store: FactStore,
    f: Formula,
    *,
    allow_case: bool = True,
    commit_aliases: bool = False,
) -> bool:
    match f:
        case FAtom(atom):
            return atom_entailed(store, atom)
        case FNot(atom):
            return store.discharge_negative(atom)
        case FAnd(parts):
            return all(
                entails(store, p, allow_case=allow_case, commit_aliases=commit_aliases)
                for p in parts
            )
        case FOr(parts):
            if any(entails(store, p, allow_case=False) for p in parts):
                return True
            if not allow_case:
                return False
            return _case_analysis(store, parts)
        case FImp(premise, conclusion):
            if entails(store, conclusion, allow_case=allow_case):
                return True
            for imp in store.implications:
                if _formulas_alike(store, imp.premise, premise) and _formulas_alike(
                    store, imp.conclusion, conclusion
                ):
                    return True
            return False
        case FExists(var, body):
            return _entail_exists(store, var, body, commit_aliases)
    return False


def _case_analysis(store: FactStore, claim_parts: tuple[Formula, ...]) -> bool:
    """A disjunctive claim holds if some stored disjunction forces one of the
    claimed disjuncts in every case."""
    for disj in store.disjunctions:
        if all(
            any(
                entails(_store_with(store, part), cp, allow_case=False)
                for cp in claim_parts
            )
            for part in disj.parts
        ):
            return True
    return False


def _store_with(store: FactStore, f: Formula) -> FactStore:
    clone = store.copy()
    clone.add_formula(f)
    return clone


def _formulas_alike(store: FactStore, a: Formula, b: Formula) -> bool:
    atoms_a = [repr(_canon_atom(store, x)) for x in iter_atoms(a)]
    atoms_b = [repr(_canon_atom(store, x)) for x in iter_atoms(b)]
    return sorted(atoms_a) == sorted(atoms_b)


def _canon_atom(store: FactStore, a: Atom) -> Atom:
    tmap: dict[Term, Term] = {}
    lmap: dict[str, str] = {}
    for t in _atom_terms(a):
        tmap[t] = store.canon_term(t)
    for l in _atom_locations(a):
        lmap[l] = store.canon_loc(l)
    mapped = map_atom(a, {}, lmap)
    match mapped:
        case Happened(desc):
            return Happened(store.canon_desc(desc))
        case Before(first, second):
            return Before(store.canon_desc(first), store.canon_desc(second))
        case OriginatesAt(term, desc):
            return OriginatesAt(store.canon_term(term), store.canon_desc(desc))
        case EqualTerms(left, right):
            return EqualTerms(store.canon_term(left), store.canon_term(right))
        case LocalHistoryFact(tag, payload, location):
            return LocalHistoryFact(
                tag,
                None if payload is None else store.canon_term(payload),
                location,
            )
        case _:
            return mapped


def _entail_exists(store: FactStore, var: str, body: Formula, commit: bool) -> bool:
    used_as_loc = any(var in _atom_locations(a) for a in iter_atoms(body))
    if used_as_loc:
        candidates = [
            name
            for name in store.eigen_domains
            if store.canon_loc(name) == name
        ]
        candidates += sorted(store.network.nodes) + sorted(store.network.configurations)
        candidates.append(ATTACKER)
        for cand in candidates:
            trial = map_formula(body, {}, {var: cand})
            if entails(store, trial, allow_case=True, commit_aliases=False):
                if commit and store.is_eigen_loc(cand):
                    store.union_locs(var, cand)
                return True
        return False
    witnesses = [
        i
        for a in iter_atoms(body)
        for t in _atom_terms(a)
        for i in indeterminates(t)
        if i.name == var
    ]
    if not witnesses:
        return entails(store, body, commit_aliases=commit)
    hole = witnesses[0]
    for cand in list(store.eigen_terms.values()):
        trial = map_formula(body, {hole: cand}, {})
        if entails(store, trial, allow_case=True, commit_aliases=False):
            if commit:
                store.union_terms(hole, cand)
            return True
    return False


# -- free saturation ----------------------------------------------------------------

def saturate(
    store: FactStore,
    licenses: frozenset[str] = frozenset(),
    demands: Iterable[Term] = (),
) -> None:
    demand_list = [store.canon_term(t) for t in demands]
    for _ in range(30):
        changed = False
        changed |= _modus_ponens_pass(store)
        changed |= _disjunction_pass(store)
        changed |= _orig_exists_pass(store, demand_list)
        changed |= _strand_resolution_pass(store, licenses)
        changed |= _compare_success_pass(store)
        changed |= _generation_ordering_pass(store)
        changed |= _origination_ordering_pass(store)
        if not changed:
            return


def _modus_ponens_pass(store: FactStore) -> bool:
    changed = False
    for imp in list(store.implications):
        if entails(store, imp.premise, allow_case=False) and not entails(
            store, imp.conclusion, allow_case=False
        ):
            store.implications.remove(imp)
            store.add_formula(imp.conclusion)
            changed = True
    return changed


def _disjunction_pass(store: FactStore) -> bool:
    changed = False
    kept: list[FOr] = []
    for disj in store.disjunctions:
        survivors = [p for p in disj.parts if not store.refutes(p)]
        if len(survivors) == 1:
            store.add_formula(survivors[0])
            changed = True
        elif len(survivors) != len(disj.parts):
            kept.append(FOr(tuple(survivors)))
            changed = True
        else:
            kept.append(disj)
    store.disjunctions = kept
    return changed


def _orig_exists_pass(store: FactStore, demands: list[Term]) -> bool:
    """Any term seen in the history has a minimal write somewhere: when a step
    needs an origination fact for a term that has none, open one with an
    eigenvariable location ranging over the feasible writers."""
    changed = False
    for t in demands:
        t = store.canon_term(t)
        if any(store.canon_term(t2) == t for (t2, _) in store.origs):
            continue
        if not any(_payload_carries(store, e, t) for e in store.happened):
            continue
        domain = store._hosts_for_desc(EventDesc("write", t, "", tilde=True), set())
        name = store.new_config_eigen(frozenset(domain))
        if len(domain) == 1:
            store.union_locs(name, next(iter(domain)))
        store.add_atom(OriginatesAt(t, EventDesc("write", t, name, tilde=True)))
        changed = True
    return changed


def _strand_resolution_pass(store: FactStore, licenses: frozenset[str]) -> bool:
    """An origination pinned to a declared location must be one of the strand's
    own writes; when exactly one declared write can carry the term, identify
    the origination with it and import that event's strand context."""
    changed = False
    for (t, d) in list(store.origs):
        d = store.canon_desc(d)
        if not (d.tilde or d.kind == "write"):
            continue
        loc = store.canon_loc(d.location)
        if not store.network.is_declared(loc):
            continue
        if (store.canon_term(t), d) in store.resolved_origs:
            continue
        refs = store.network.subrefs(loc)
        candidates: list[tuple[LocalizedEvent, dict[int, Term]]] = []
        licensing_blocked = False
        for ev in store.declared_events():
            if ev.location not in refs:
                continue
            if not isinstance(ev.kind, (Send, Emit, Assign)):
                continue
            if d.kind != "write" and desc_kind_of(ev.kind) != d.kind:
                continue
            payload = ev.payload
            if payload is None:
                continue
            binding, ok = unify_terms(store, payload, t, licenses)
            if ok:
                candidates.append((ev, binding))
            else:
                free_binding, would = unify_terms(
                    store, payload, t, licenses, require_license=False
                )
                if would:
                    licensing_blocked = True
        if licensing_blocked and not candidates:
            continue
        proc = store.procedure.process
        minimal = [
            (ev, b)
            for (ev, b) in candidates
            if not any(
                other is not ev and proc.precedes(other.point, ev.point)
                for (other, _) in candidates
            )
        ]
        if len(minimal) != 1:
            continue
        ev, binding = minimal[0]
        for uid, value in binding.items():
            holes = [i for i in indeterminates(ev.payload) if i.uid == uid]
            if holes:
                store.union_terms(holes[0], value)
        concrete = store.canon_desc(desc_of_event(ev))
        _rewrite_desc(store, d, concrete)
        store.add_atom(OriginatesAt(t, concrete))
        store.resolved_origs.add((store.canon_term(t), store.canon_desc(concrete)))
        for prior in proc.iter_events():
            if proc.precedes(prior.point, ev.point):
                store.add_atom(Before(desc_of_event(prior), concrete))
        changed = True
    return changed


def _compare_success_pass(store: FactStore) -> bool:
    """Under a complete history, a comparison event that happened is a passed
    test: the run only proceeds past it when the two sides agree, so the
    compared terms may be identified."""
    if not store.complete_history:
        return False
    changed = False
    for ev in store.declared_events():
        if not isinstance(ev.kind, Compare):
            continue
        if store.terms_equal(ev.kind.left, ev.kind.right):
            continue
        d = store.canon_desc(desc_of_event(ev))
        if any(store.canon_desc(e) == d for e in store.happened):
            store.union_terms(ev.kind.left, ev.kind.right)
            changed = True
    return changed


def _rewrite_desc(store: FactStore, old: EventDesc, new: EventDesc) -> None:
    old, new = store.canon_desc(old), store.canon_desc(new)
    if old == new:
        return

    def swap(d: EventDesc) -> EventDesc:
        return new if store.canon_desc(d) == old else d

    store.happened = {swap(d) for d in store.happened}
    store.befores = {(swap(a), swap(b)) for (a, b) in store.befores}
    store.origs = {(t, swap(d)) for (t, d) in store.origs}


def _payload_carries(store: FactStore, e: EventDesc, t: Term) -> bool:
    """Whether the described event certainly carries t: the payload depends on
    t syntactically, opaque wrappers included — building the payload needed t
    or a term containing it. For a tilde payload p the event carries some
    superterm of p, so only content inside p counts."""
    if e.payload is None:
        return False
    p = store.canon_term(e.payload)
    return p == t or t in full_subterms(p)


def _generation_ordering_pass(store: FactStore) -> bool:
    """A generated indeterminate exists only after its generation event."""
    changed = False
    for n in list(store.happened):
        if n.kind != "nu" or n.payload is None:
            continue
        x = store.canon_term(n.payload)
        for e in list(store.happened):
            if e == n or e.kind == "nu":
                continue
            if not _payload_carries(store, e, x):
                continue
            pair = (store.canon_desc(n), store.canon_desc(e))
            if pair not in store.befores and not _reaches(store, {pair[1]}, {pair[0]}):
                store.befores.add(pair)
                changed = True
    return changed


def _origination_ordering_pass(store: FactStore) -> bool:
    """Once a term's origination is identified with a single concrete event,
    every other appearance of the term sits above it."""
    changed = False
    by_term: dict[Term, set[EventDesc]] = {}
    for (t, d) in store.origs:
        by_term.setdefault(store.canon_term(t), set()).add(store.canon_desc(d))
    for t, descs in by_term.items():
        if len(descs) != 1:
            continue
        d = next(iter(descs))
        if d.tilde or d.kind == "write":
            continue  # not yet resolved to a concrete event
        if not store.network.is_declared(store.canon_loc(d.location)):
            continue
        for e in list(store.happened):
            e = store.canon_desc(e)
            if e == d or e.kind == "nu":
                continue
            if not _payload_carries(store, e, t):
                continue
            if (d, e) in store.befores or _reaches(store, {e}, {d}):
                continue
            store.befores.add((d, e))
            changed = True
    return changed


# -- firing cited axioms --------------------------------------------------------------

def _match_term_pattern(
    store: FactStore,
    pattern: Term,
    value: Term,
    theta: dict[int, Term],
    var_uids: frozenset[int],
) -> bool:
    """One-way match of an axiom pattern against a stored term. Axiom
    variables bind freely (universal instantiation); everything else must be
    equal up to the known equalities."""
    pattern = _map_uid(pattern, theta)
    value = store.canon_term(value)
    match pattern:
        case Indet(uid=uid) if uid in var_uids:
            theta[uid] = value
            return True
        case Tup(items):
            return (
                isinstance(value, Tup)
                and len(value.items) == len(items)
                and all(
                    _match_term_pattern(store, p, v, theta, var_uids)
                    for p, v in zip(items, value.items)
                )
            )
        case App(op, args):
            return (
                isinstance(value, App)
                and value.op.name == op.name
                and all(
                    _match_term_pattern(store, p, v, theta, var_uids)
                    for p, v in zip(args, value.args)
                )
            )
        case _:
            return store.canon_term(pattern) == value


def _match_desc_pattern(
    store: FactStore,
    pattern: EventDesc,
    fact: EventDesc,
    theta_t: dict[int, Term],
    theta_l: dict[str, str],
    var_uids: frozenset[int],
    loc_vars: frozenset[str],
) -> bool:
    fact = store.canon_desc(fact)
    if not kind_matches(pattern.kind, fact.kind):
        return False
    ploc = theta_l.get(pattern.location, pattern.location)
    if ploc in loc_vars:
        theta_l[ploc] = fact.location
    else:
        ploc = store.canon_loc(ploc)
        if fact.location != ploc:
            if not (
                store.network.is_declared(ploc)
                and fact.location in store.network.subrefs(ploc)
            ):
                return False
    if pattern.payload is None:
        return True
    if fact.payload is None:
        return False
    if fact.tilde and not pattern.tilde:
        return False  # a lower bound cannot witness an exact payload
    return _match_term_pattern(store, pattern.payload, fact.payload, theta_t, var_uids)


def _premise_matches(
    store: FactStore,
    premise_atoms: list[Atom],
    theta_t: dict[int, Term],
    theta_l: dict[str, str],
    var_uids: frozenset[int],
    loc_vars: frozenset[str],
) -> Iterator[tuple[dict[int, Term], dict[str, str]]]:
    if not premise_atoms:
        yield dict(theta_t), dict(theta_l)
        return
    head, rest = premise_atoms[0], premise_atoms[1:]
    match head:
        case Happened(desc):
            facts: Iterable = store.happened
            for fact in sorted(facts, key=repr):
                tt, tl = dict(theta_t), dict(theta_l)
                if _match_desc_pattern(store, desc, fact, tt, tl, var_uids, loc_vars):
                    yield from _premise_matches(store, rest, tt, tl, var_uids, loc_vars)
        case OriginatesAt(term, desc):
            for (t2, d2) in sorted(store.origs, key=repr):
                tt, tl = dict(theta_t), dict(theta_l)
                if not _match_term_pattern(store, term, t2, tt, var_uids):
                    continue
                if _match_desc_pattern(store, desc, d2, tt, tl, var_uids, loc_vars):
                    yield from _premise_matches(store, rest, tt, tl, var_uids, loc_vars)
        case LocalHistoryFact(tag, payload, location):
            for l in sorted(store.lhfs, key=repr):
                if l.tag != tag:
                    continue
                tt, tl = dict(theta_t), dict(theta_l)
                loc = tl.get(location, location)
                if loc in loc_vars:
                    tl[loc] = l.location
                elif store.canon_loc(loc) != store.canon_loc(l.location):
                    continue
                if payload is None and l.payload is None:
                    yield from _premise_matches(store, rest, tt, tl, var_uids, loc_vars)
                elif payload is not None and l.payload is not None:
                    if _match_term_pattern(store, payload, l.payload, tt, var_uids):
                        yield from _premise_matches(store, rest, tt, tl, var_uids, loc_vars)
        case EqualTerms(left, right):
            tt, tl = dict(theta_t), dict(theta_l)
            lg = _map_uid(left, tt)
            rg = _map_uid(right, tt)
            still_free = any(
                i.uid in var_uids for i in indeterminates(lg) | indeterminates(rg)
            )
            if not still_free and store.terms_equal(lg, rg):
                yield from _premise_matches(store, rest, tt, tl, var_uids, loc_vars)
        case Before(first, second):
            for a in sorted(store.happened, key=repr):
                tt0, tl0 = dict(theta_t), dict(theta_l)
                if not _match_desc_pattern(store, first, a, tt0, tl0, var_uids, loc_vars):
                    continue
                for b in sorted(store.happened, key=repr):
                    tt, tl = dict(tt0), dict(tl0)
                    if not _match_desc_pattern(store, second, b, tt, tl, var_uids, loc_vars):
                        continue
                    if _reaches(store, {store.canon_desc(a)}, {store.canon_desc(b)}):
                        yield from _premise_matches(store, rest, tt, tl, var_uids, loc_vars)
        case _:
            return


def fire_procedure_axiom(
    store: FactStore,
    axiom: ProcedureAxiom,
    explicit: Mapping[str, object],
) -> bool:
    """Instantiate a cited procedure axiom against the store: every match of
    its premise (extending any explicit bindings) contributes its conclusion."""
    var_uids = frozenset(v.uid for v in axiom.term_vars)
    loc_vars = frozenset(axiom.loc_vars)
    theta_t: dict[int, Term] = {}
    theta_l: dict[str, str] = {}
    for name, value in explicit.items():
        tv = next((v for v in axiom.term_vars if v.name == name), None)
        if tv is not None:
            if not isinstance(value, (Const, Indet, Tup, App, Tick)):
                raise MissingBinding(f"{axiom.name}: {name} must be a term")
            theta_t[tv.uid] = store.canon_term(value)
            continue
        if name in loc_vars:
            theta_l[name] = store.canon_loc(str(value))
            continue
        raise MissingBinding(f"{axiom.name} has no variable named {name}")
    formula = axiom.formula
    if isinstance(formula, FImp):
        premise, conclusion = formula.premise, formula.conclusion
    else:
        premise, conclusion = TRUTH, formula
    premise_atoms: list[Atom] = []
    ok_shape = True
    for part in premise.parts if isinstance(premise, FAnd) else (premise,):
        match part:
            case FAtom(atom):
                premise_atoms.append(atom)
            case FAnd():
                premise_atoms.extend(iter_atoms(part))
            case _:
                ok_shape = False
    if not ok_shape:
        return False
    changed = False
    for tt, tl in _premise_matches(
        store, premise_atoms, theta_t, theta_l, var_uids, loc_vars
    ):
        tmap = {v: tt[v.uid] for v in axiom.term_vars if v.uid in tt}
        lmap = {lv: tl[lv] for lv in axiom.loc_vars if lv in tl}
        key = (
            axiom.name,
            tuple(sorted((v.name, repr(t)) for v, t in tmap.items())),
            tuple(sorted(lmap.items())),
        )
        if key in store.axiom_firings:
            continue
        store.axiom_firings.add(key)
        instance = map_formula(conclusion, tmap, lmap)
        store.add_formula(instance)
        changed = True
    return changed


def fire_schema(
    store: FactStore,
    name: str,
    bindings: Mapping[str, object],
) -> bool:
    """Fire a cited axiom schema under explicit hole bindings, discharging its
    premise against the store before committing the conclusion."""
    resolved = dict(bindings)
    if name.startswith("auch.") and isinstance(resolved.get("channel"), str):
        wanted = resolved["channel"]
        match = next((c for c in store.network.channels if c.id == wanted), None)
        if match is None:
            raise MissingBinding(f"{name}: no channel named {wanted}")
        resolved["channel"] = match
    for hole in ("t", "x", "c", "r"):
        if isinstance(resolved.get(hole), Term):
            resolved[hole] = store.canon_term(resolved[hole])
    key = (name, tuple(sorted((k, repr(v)) for k, v in resolved.items())))
    if key in store.schema_firings:
        return False
    if name == "fresh.2":
        fired = _fire_fresh2(store, resolved)
        if fired:
            store.schema_firings.add(key)
        return fired
    formula = instantiate_axiom(name, resolved, store.procedure)
    assert isinstance(formula, FImp)
    if not entails(store, formula.premise, allow_case=False):
        return False
    store.schema_firings.add(key)
    conclusion = formula.conclusion
    if isinstance(conclusion, FExists):
        opened = store.open_existential(conclusion.var, conclusion.body)
        store.add_formula(opened)
    else:
        store.add_formula(conclusion)
    return True


def _fire_fresh2(store: FactStore, bindings: Mapping[str, object]) -> bool:
    x = bindings.get("x")
    trigger = bindings.get("trigger")
    if not isinstance(x, Indet):
        raise MissingBinding("fresh.2: x must be an indeterminate")
    if not isinstance(trigger, EventDesc):
        raise MissingBinding("fresh.2: trigger must be an event description")
    trigger = store.canon_desc(trigger)
    if trigger.payload is None or not _payload_carries(store, trigger, store.canon_term(x)):
        raise SideConditionViolated("fresh.2: the trigger event must carry x")
    if not atom_entailed(store, Happened(trigger)):
        return False
    if not store.discharge_negative(Happened(EventDesc("nu", x, trigger.location))):
        return False
    hosts = store.nu_hosts(x)
    if not hosts:
        return False
    send_alive = store.send_branch_alive(x)
    emit_alive = store.emit_branch_alive(x)
    if not send_alive and not emit_alive:
        return False
    if len(hosts) == 1:
        gen = next(iter(hosts))
    else:
        gen = store.new_config_eigen(hosts)

    def branch(write_kind: str, read_kind: str) -> Formula:
        return chain(
            [
                EventDesc("nu", x, gen),
                OriginatesAt(x, EventDesc(write_kind, x, gen, tilde=True)),
                EventDesc(read_kind, x, trigger.location, tilde=True),
                trigger,
            ]
        )

    if send_alive and emit_alive:
        store.add_formula(FOr((branch("send", "recv"), branch("emit", "samp"))))
    elif send_alive:
        store.add_formula(branch("send", "recv"))
    else:
        store.add_formula(branch("emit", "samp"))
    return True


# -- the step checker ------------------------------------------------------------------

_SCHEMA_PREFIXES = ("orig.", "fresh.", "auch.")


def _resolve_citation(
    name: str, axioms: Mapping[str, ProcedureAxiom]
) -> tuple[str, ProcedureAxiom | None]:
    if name in SCHEMAS:
        return ("schema", None)
    if name in axioms:
        return ("axiom", axioms[name])
    if name in ("cr", "cog") or any(name.startswith(p) for p in _SCHEMA_PREFIXES):
        raise UnknownAxiomName(f"no axiom schema named {name}")
    raise UnjustifiedStep(f"cites {name}, which this procedure does not assume")


def step_licenses(
    citations: Iterable[str], axioms: Mapping[str, ProcedureAxiom]
) -> frozenset[str]:
    out = set()
    for c in citations:
        ax = axioms.get(c)
        if ax is not None:
            op = ax.injective_operator()
            if op is not None:
                out.add(op)
    return frozenset(out)


def _claim_demands(store: FactStore, claim: Formula) -> list[Term]:
    return [
        store.canon_term(a.term)
        for a in iter_atoms(claim)
        if isinstance(a, OriginatesAt)
    ]


def check_step(
    store: FactStore,
    step: Step,
    axioms: Mapping[str, ProcedureAxiom],
) -> None:
    """Replay one derivation step against the store. On success the store is
    extended with everything the cited axioms yielded; on failure an
    UnjustifiedStep error carries the reason."""
    schema_citations: list[str] = []
    axiom_citations: list[ProcedureAxiom] = []
    for name in step.citations:
        kind, ax = _resolve_citation(name, axioms)
        if kind == "schema":
            schema_citations.append(name)
        else:
            axiom_citations.append(ax)
    licenses = step_licenses(step.citations, axioms)
    demands = _claim_demands(store, step.claim)
    schema_bindings = dict(step.bindings)
    for _ in range(4):
        saturate(store, licenses, demands)
        for name in schema_citations:
            fire_schema(store, name, schema_bindings)
        for ax in axiom_citations:
            explicit = {
                k: v
                for k, v in step.bindings.items()
                if k in ax.loc_vars or any(v2.name == k for v2 in ax.term_vars)
            }
            fire_procedure_axiom(store, ax, explicit)
        saturate(store, licenses, demands)
        if entails(store, step.claim, commit_aliases=True):
            return
    raise UnjustifiedStep(
        f"step {step.index}: claim does not follow from the cited axioms"
    )


def _collect_locations(f: Formula) -> set[str]:
    return {loc for a in iter_atoms(f) for loc in _atom_locations(a)}


def _collect_indets(f: Formula) -> set[Indet]:
    return {
        i for a in iter_atoms(f) for t in _atom_terms(a) for i in indeterminates(t)
    }


def _qed_eigen_check(store: FactStore, derivation: Derivation) -> str | None:
    """Eigenvariables opened during the derivation may not appear in the goal."""
    goal = derivation.goal.formula
    net = store.network
    for loc in _collect_locations(goal):
        if loc.startswith("?") or loc in store.eigen_domains:
            return f"goal mentions eigenvariable {loc}"
        if not net.is_declared(loc) and loc != ATTACKER:
            return f"goal mentions undeclared location {loc}"
    allowed = {
        i.uid
        for ev in store.declared_events()
        for t in carried_terms_of(ev)
        for i in indeterminates(t)
    }
    for obs in derivation.observations:
        for i in _collect_indets(obs):
            allowed.add(i.uid)
    for i in _collect_indets(goal):
        if i.uid in store.eigen_terms:
            return f"goal mentions eigenvariable {i.name}"
        if i.uid not in allowed:
            return f"goal mentions {i.name}, which is bound in no observation"
    return None


def carried_terms_of(ev: LocalizedEvent) -> tuple[Term, ...]:
    from .process import carried_terms

    return carried_terms(ev.kind)


def _instance_matches(
    store: FactStore, goal: Formula, template: Formula
) -> bool:
    """Whether some conjunct of the goal is exactly the instantiated schema
    conclusion: every template atom must already be claimed by that conjunct."""
    conjuncts = list(goal.parts) if isinstance(goal, FAnd) else [goal]
    template_atoms = [_canon_atom(store, a) for a in iter_atoms(template)]
    for lead in range(len(conjuncts)):
        for width in range(1, len(conjuncts) - lead + 1):
            group = conjuncts[lead : lead + width]
            group_atoms = [
                _canon_atom(store, a) for c in group for a in iter_atoms(c)
            ]
            if _atoms_cover(store, group_atoms, template_atoms):
                return True
    return False


def _atoms_cover(
    store: FactStore, have: list[Atom], want: list[Atom]
) -> bool:
    before_edges = {
        (store.canon_desc(a.first), store.canon_desc(a.second))
        for a in have
        if isinstance(a, Before)
    }

    def local_reach(d1: EventDesc, d2: EventDesc) -> bool:
        frontier, seen = [d1], {d1}
        while frontier:
            node = frontier.pop()
            if node == d2:
                return True
            for (a, b) in before_edges:
                if a == node and b not in seen:
                    seen.add(b)
                    frontier.append(b)
        return False

    for w in want:
        match w:
            case Happened(desc):
                if not any(
                    isinstance(h, (Happened, OriginatesAt, Before))
                    and any(
                        desc_entails(store, d, desc)
                        for d in _atom_descs(h)
                    )
                    for h in have
                ):
                    return False
            case OriginatesAt(term, desc):
                if not any(
                    isinstance(h, OriginatesAt)
                    and store.terms_equal(h.term, term)
                    and desc_entails(store, h.desc, desc)
                    for h in have
                ):
                    return False
            case Before(first, second):
                starts = {
                    store.canon_desc(d)
                    for h in have
                    for d in _atom_descs(h)
                    if desc_entails(store, d, first)
                }
                targets = {
                    store.canon_desc(d)
                    for h in have
                    for d in _atom_descs(h)
                    if desc_entails(store, d, second)
                }
                if not any(local_reach(s, t) for s in starts for t in targets):
                    return False
            case _:
                if _canon_atom(store, w) not in [_canon_atom(store, h) for h in have]:
                    return False
    return True


def check_proof(
    derivation: Derivation,
    procedure: Procedure,
    theory: TermTheory,
    attacker_types: frozenset[str] = DEFAULT_ATTACKER_TYPES,
) -> Derivation:
    """Replay a whole derivation. The result carries accepted/rejected status;
    rejection points at the first step whose claim is not forced (the goal
    counts as step len(steps)+1)."""
    network = procedure.network
    if derivation.principal not in network.principals:
        raise UnknownPrincipal(
            f"{derivation.principal} is not a principal of {network.name}"
        )
    store = FactStore(procedure, theory, derivation.principal, attacker_types)
    store.complete_history = derivation.complete_history
    for obs in derivation.observations:
        store.add_formula(obs)
    saturate(store)
    axioms = {a.name: a for a in procedure.axioms}
    expected = 1
    for step in derivation.steps:
        if step.index != expected:
            return derivation.reject(
                step.index, f"steps must be numbered consecutively from 1"
            )
        expected += 1
        try:
            check_step(store, step, axioms)
        except UnjustifiedStep as e:
            return derivation.reject(step.index, str(e))
        except (MissingBinding, SideConditionViolated, UnknownAxiomName) as e:
            return derivation.reject(step.index, str(e))
    goal_index = len(derivation.steps) + 1
    problem = _qed_eigen_check(store, derivation)
    if problem is not None:
        return derivation.reject(goal_index, problem)
    saturate(store, demands=_claim_demands(store, derivation.goal.formula))
    if not entails(store, derivation.goal.formula, commit_aliases=True):
        return derivation.reject(goal_index, "goal does not follow from the steps")
    if derivation.goal.instance_of is not None:
        name = derivation.goal.instance_of
        if name != "cr":
            return derivation.reject(goal_index, f"{name} has no conclusion template")
        b = dict(derivation.goal.bindings)
        try:
            template = cr_global_chain(
                str(b["P"]), str(b["Q"]), b["x"], b["c"], b["r"]
            )
        except KeyError as e:
            return derivation.reject(goal_index, f"instance binding {e} missing")
        if not _instance_matches(store, derivation.goal.formula, template):
            return derivation.reject(
                goal_index, "goal is not an instance of the cited conclusion"
            )
    return derivation.accept()


# -- a principal's local view of a run ----------------------------------------------

def local_view(run: Run, principal: str, network: ActorNetwork | None = None) -> Formula:
    """The order-of-events formula a principal observes in a run: events at
    its own configurations, their relative order, successful guard checks, and
    the cross-channel facts licensed by authenticity flags."""
    net = network if network is not None else run.process.network
    if principal not in net.principals:
        raise UnknownPrincipal(f"{principal} is not a principal of {net.name}")
    proc = run.process
    owned: set[str] = set()
    for ref, owner in net.control.items():
        if owner == principal:
            owned |= net.subrefs(ref)

    included = [ev for ev in proc.iter_events() if ev.location in owned]
    included.sort(key=lambda ev: ev.point)
    included_points = {ev.point for ev in included}

    parts: list[Formula] = []
    for ev in included:
        parts.append(FAtom(Happened(desc_of_event(ev))))

    order = run_order(run)
    restricted = {
        (a, b) for (a, b) in order if a in included_points and b in included_points
    }
    covering = {
        (a, b)
        for (a, b) in restricted
        if not any((a, c) in restricted and (c, b) in restricted for c in included_points)
    }
    for (a, b) in sorted(covering):
        parts.append(FAtom(Before(desc_of_event(proc[a]), desc_of_event(proc[b]))))

    for coaction, flow in sorted(run.assignment.items()):
        writer, reader = proc[flow.writer], proc[flow.reader]
        channel = flow.channel
        w_in, r_in = writer.point in included_points, reader.point in included_points
        pair = None
        if flow.kind == "message":
            if "auch.m.2" in channel.auth_flags and r_in:
                pair = (
                    EventDesc("send", reader.payload, writer.location),
                    desc_of_event(reader),
                )
            elif "auch.m.1" in channel.auth_flags and w_in and not r_in:
                pair = (
                    desc_of_event(writer),
                    EventDesc("recv", writer.payload, reader.location),
                )
        else:
            if "auch.p.2" in channel.auth_flags and r_in:
                pair = (
                    EventDesc("emit", reader.payload, writer.location),
                    desc_of_event(reader),
                )
            elif "auch.p.1" in channel.auth_flags and w_in and not r_in:
                pair = (
                    desc_of_event(writer),
                    EventDesc("samp", writer.payload, reader.location),
                )
        if pair is not None and not (w_in and r_in):
            parts.append(FAtom(Happened(pair[0])))
            parts.append(FAtom(Happened(pair[1])))
            parts.append(FAtom(Before(pair[0], pair[1])))
        elif pair is not None:
            parts.append(FAtom(Before(pair[0], pair[1])))

    for ev in included:
        if isinstance(ev.kind, Receive) and ev.kind.guard is not None:
            parts.append(
                FAtom(LocalHistoryFact("holds", ev.kind.guard, ev.location))
            )

    return FAnd(tuple(parts))

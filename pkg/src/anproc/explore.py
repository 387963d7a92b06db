"""Bounded exhaustive exploration of runs under an active channel attacker.

The attacker is modeled as an extra pseudo-node wired into the network: every
channel type it controls gets tap channels (role writer -> attacker) through
which it observes traffic, and injection channels (attacker -> role reader)
through which it writes. An attacker behavior is a totally ordered strand of
tap receives and injection sends; injected payloads must be constructible
from what the attacker has observed so far, its initial knowledge, and its
declared operator capabilities.

`enumerate_runs` streams every sound, complete run of a procedure up to the
bounds: number of whole-process session copies, number of attacker write
events, and construction depth of injected terms. `semantic_validate` checks
a premise/conclusion implication against every enumerated run and reports the
first counterexample under a canonical minimal ordering (fewest attacker
writes, then fewest flows).
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator, Sequence

from .errors import BoundsExceeded, OrderCycle, UnknownOperator
from .logic import (
    ATTACKER,
    DEFAULT_ATTACKER_TYPES,
    Before,
    ConfigEq,
    ControlledBy,
    EqualTerms,
    EventDesc,
    FAtom,
    FAnd,
    FExists,
    FImp,
    FNot,
    FOr,
    Formula,
    Happened,
    LocalHistoryFact,
    OriginatesAt,
    desc_kind_of,
    kind_matches,
)
from .network import ActorNetwork, Channel, controller
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
    WRITE_KINDS,
    carried_terms,
    write_payload,
)
from .runs import (
    Flow,
    Procedure,
    Run,
    _bind_match,
    _substitute,
    eval_guard,
    rigid_indets,
    run_binding,
    run_order,
)
from .terms import (
    App,
    Const,
    Indet,
    OperatorDecl,
    Term,
    TermTheory,
    Tup,
    easy_contains,
    easy_subterms,
    fresh_indet,
    full_subterms,
    indeterminates,
    normalize,
    rename_indets,
)

# The one opaque constant the attacker can always produce out of thin air.
JUNK = Const("junk")


def term_depth(t: Term) -> int:
    """Nesting depth: atoms are 1, constructors add a level."""
    match t:
        case Tup(items):
            return 1 + max((term_depth(i) for i in items), default=0)
        case App(_, args):
            return 1 + max((term_depth(a) for a in args), default=0)
        case _:
            return 1


def term_width(t: Term) -> int:
    """Number of leaf atoms in a term."""
    match t:
        case Tup(items):
            return max(1, sum(term_width(i) for i in items))
        case App(_, args):
            return max(1, sum(term_width(a) for a in args))
        case _:
            return 1


# -- attacker model -------------------------------------------------------------

@dataclass(frozen=True)
class KnowledgeState:
    """A party's term knowledge: everything it has observed or constructed."""
    owner: str
    known: frozenset[Term] = frozenset()


@dataclass(frozen=True)
class AttackerModel:
    """What the network attacker can do.

    It reads and writes every channel of a controlled type (cyber channels by
    default; physical and visual channels stay attacker-free unless listed),
    may apply the given theory operators when constructing payloads, and
    starts out knowing `initial_knowledge` plus one junk constant.
    """
    controlled_channels: frozenset[str] = DEFAULT_ATTACKER_TYPES
    capabilities: frozenset[OperatorDecl] = frozenset()
    initial_knowledge: frozenset[Term] = frozenset()

    def capability_names(self) -> frozenset[str]:
        return frozenset(op.name for op in self.capabilities)


@dataclass(frozen=True)
class ExplorationBounds:
    """Finite caps that keep enumeration exhaustive and terminating."""
    max_sessions: int = 1
    max_attacker_events: int = 0
    max_term_depth: int = 4
    # Resource guard: total flow assignments the enumerator may examine.
    max_examined: int = 500_000

    def __post_init__(self) -> None:
        if self.max_sessions < 1:
            raise BoundsExceeded("max_sessions must be at least 1")
        if self.max_attacker_events < 0:
            raise BoundsExceeded("max_attacker_events must not be negative")
        if self.max_term_depth < 1:
            raise BoundsExceeded("max_term_depth must be at least 1")
        if self.max_examined < 1:
            raise BoundsExceeded("max_examined must be at least 1")


def _check_capabilities(theory: TermTheory, attacker: AttackerModel) -> None:
    for op in attacker.capabilities:
        declared = theory.operators.get(op.name)
        if declared is None:
            raise UnknownOperator(
                f"attacker capability {op.name} is not a declared operator"
            )


_CLOSURE_CAP = 50_000


def attacker_closure(
    state: KnowledgeState,
    theory: TermTheory,
    depth: int,
    capabilities: frozenset[OperatorDecl] = frozenset(),
) -> KnowledgeState:
    """Close a knowledge set under extraction and bounded construction.

    The fixpoint adds easy subterms of known terms, pairs of known terms, and
    applications of capability operators to known terms. A construction is
    kept when the term it builds, measured before normalization, stays within
    `depth` nesting levels and `2**(depth-1)` leaf atoms — the widest term a
    chain of pairings within the depth budget could assemble. Both measures
    are intrinsic to the term, so the closure is monotone and reaches the same
    fixpoint when re-applied to its own result.
    """
    if depth < 1:
        raise BoundsExceeded("closure depth must be at least 1")
    width = 2 ** (depth - 1)

    def fits(t: Term) -> bool:
        return term_depth(t) <= depth and term_width(t) <= width

    known: set[Term] = {normalize(theory, t) for t in state.known}
    caps = sorted(capabilities, key=lambda op: op.name)
    frontier = set(known)
    while frontier:
        new: set[Term] = set()

        def consider(cand: Term) -> None:
            if not fits(cand):
                return
            norm = normalize(theory, cand)
            if norm not in known and fits(norm):
                new.add(norm)

        for t in frontier:
            new |= easy_subterms(theory, t) - known
        ordered = sorted(known, key=_term_key)
        fresh = sorted(frontier, key=_term_key)
        # Only form terms with at least one part from the frontier: anything
        # built purely from older terms was already produced in a prior round.
        for a in fresh:
            for b in ordered:
                consider(Tup((a, b)))
                consider(Tup((b, a)))
        for op in caps:
            for args in itertools.product(ordered, repeat=op.arity):
                if any(a in frontier for a in args):
                    consider(App(op, tuple(args)))
        known |= new
        frontier = new
        if len(known) > _CLOSURE_CAP:
            raise BoundsExceeded(
                f"knowledge closure exceeded {_CLOSURE_CAP} terms at depth {depth}"
            )
    return KnowledgeState(state.owner, frozenset(known))


def _term_key(t: Term) -> str:
    match t:
        case Const(name):
            return f"c:{name}"
        case Indet(uid=uid, name=name):
            return f"i:{name}:{uid:08d}"
        case Tup(items):
            return "t:(" + ",".join(_term_key(i) for i in items) + ")"
        case App(op, args):
            return f"a:{op.name}(" + ",".join(_term_key(a) for a in args) + ")"
        case _:
            return f"k:{t!r}"


# -- exploration network ---------------------------------------------------------

def _fresh_name(base: str, taken: frozenset[str]) -> str:
    if base not in taken:
        return base
    n = 2
    while f"{base}{n}" in taken:
        n += 1
    return f"{base}{n}"


@dataclass(frozen=True)
class _Arena:
    """The attacker-extended network plus its tap and injection channels."""
    network: ActorNetwork
    attacker_node: str
    taps: tuple[Channel, ...]       # role entry -> attacker
    injections: tuple[Channel, ...]  # attacker -> role exit


def attacker_arena(net: ActorNetwork, attacker: AttackerModel) -> _Arena:
    """Extend a network with the attacker pseudo-node and its channels."""
    taken = net.nodes | frozenset(net.configurations)
    atk = _fresh_name(ATTACKER, taken)
    principal = _fresh_name("Atk", net.principals)
    entries = sorted(
        {
            (c.entry, c.type)
            for c in net.channels
            if c.type in attacker.controlled_channels
        }
    )
    exits = sorted(
        {
            (c.exit, c.type)
            for c in net.channels
            if c.type in attacker.controlled_channels
        }
    )
    chan_ids = frozenset(c.id for c in net.channels)
    taps = tuple(
        Channel(_fresh_name(f"tap_{ref}_{typ}", chan_ids), ref, atk, typ)
        for ref, typ in entries
    )
    injections = tuple(
        Channel(_fresh_name(f"inj_{ref}_{typ}", chan_ids), atk, ref, typ)
        for ref, typ in exits
    )
    extended = ActorNetwork(
        name=f"{net.name}_atk",
        principals=net.principals | {principal},
        nodes=net.nodes | {atk},
        configurations=net.configurations,
        channels=net.channels + taps + injections,
        channel_types=net.channel_types,
        control={**net.control, atk: principal},
    )
    return _Arena(extended, atk, taps, injections)


# -- session replication ---------------------------------------------------------

def _copy_kind(kind, renaming: dict[int, Indet]):
    def ren(t: Term | None) -> Term | None:
        return None if t is None else rename_indets(t, renaming)

    match kind:
        case Send(payload):
            return Send(ren(payload))
        case Receive(payload, guard):
            return Receive(ren(payload), ren(guard))
        case Emit(payload):
            return Emit(ren(payload))
        case Sample(payload):
            return Sample(ren(payload))
        case Generate(indet):
            return Generate(renaming.get(indet.uid, indet))
        case Assign(store, payload):
            return Assign(store, ren(payload))
        case Compare(left, right):
            return Compare(ren(left), ren(right))
        case Custom(tag, payload):
            return Custom(tag, ren(payload))
    raise TypeError(f"cannot copy event kind {kind!r}")


def session_process(proc: Process, sessions: int, net: ActorNetwork) -> Process:
    """`sessions` whole copies of the process, run side by side.

    The first copy keeps the original points and indeterminates, so formulas
    stated over the source process read directly against it; later copies get
    suffixed points and freshly minted indeterminates.
    """
    sp = Process(f"{proc.name}_explored", net)
    for ev in proc.iter_events():
        sp.add_event(ev)
    for a, b in sorted(proc.order_pairs()):
        sp.add_precedence(a, b)
    originals = sorted(proc.used_indeterminates(), key=lambda i: i.uid)
    for s in range(2, sessions + 1):
        renaming = {i.uid: fresh_indet(f"{i.name}_s{s}") for i in originals}
        for ev in proc.iter_events():
            sp.add_event(
                LocalizedEvent(
                    f"{ev.point}_s{s}", _copy_kind(ev.kind, renaming), ev.location
                )
            )
        for a, b in sorted(proc.order_pairs()):
            sp.add_precedence(f"{a}_s{s}", f"{b}_s{s}")
    return sp


# -- attacker behaviors ----------------------------------------------------------

@dataclass(frozen=True)
class _Tap:
    writer: str
    channel: Channel


@dataclass(frozen=True)
class _Inject:
    reader: str
    channel: Channel
    payload: Term


def _tap_alphabet(sp: Process, arena: _Arena) -> list[tuple[LocalizedEvent, Channel]]:
    net = arena.network
    out = []
    for ev in sp.iter_events():
        if not isinstance(ev.kind, Send):
            continue
        for tc in arena.taps:
            if tc.entry in net.subrefs(ev.location):
                out.append((ev, tc))
    out.sort(key=lambda pair: (pair[0].point, pair[1].id))
    return out


def _injection_targets(
    sp: Process, arena: _Arena
) -> list[tuple[LocalizedEvent, Channel]]:
    net = arena.network
    out = []
    for ev in sp.iter_events():
        if not isinstance(ev.kind, Receive):
            continue
        for ic in arena.injections:
            if ic.exit in net.subrefs(ev.location):
                out.append((ev, ic))
    out.sort(key=lambda pair: (pair[0].point, pair[1].id))
    return out


def _derivable(
    t: Term,
    avail: frozenset[Term],
    cap_names: frozenset[str],
    depth: int,
) -> bool:
    """Whether the attacker can construct `t` from available material."""
    if term_depth(t) > depth:
        return False
    if t in avail:
        return True
    match t:
        case Tup(items):
            return all(_derivable(i, avail, cap_names, depth) for i in items)
        case App(op, args):
            return op.name in cap_names and all(
                _derivable(a, avail, cap_names, depth) for a in args
            )
        case _:
            return False


def _viable_payload(
    theory: TermTheory,
    reader: LocalizedEvent,
    payload: Term,
    rigid: frozenset[int],
) -> bool:
    """Quick structural filter: could this payload ever satisfy the reader?

    Rejects payloads that cannot match the reader's pattern (rigid parts
    differ) or that decidably fail its guard. Stays permissive whenever the
    answer depends on bindings made elsewhere in a run.
    """
    assert isinstance(reader.kind, Receive)
    binding: dict[int, Term] = {}
    pattern = normalize(theory, reader.kind.payload)
    if not _bind_match(pattern, payload, binding, rigid):
        return False
    guard = reader.kind.guard
    if guard is None:
        return True
    bound_guard = _substitute(guard, binding)
    if any(i.uid not in rigid for i in indeterminates(bound_guard)):
        return True
    return eval_guard(theory, bound_guard)


def _guard_solutions(
    theory: TermTheory,
    guard: Term | None,
    frees: Sequence[Indet],
    fill: dict[int, Term],
) -> list[tuple[int, Term]]:
    """Bindings a verifier or equality guard forces on a free pattern slot."""
    free_uids = {i.uid for i in frees}
    match guard:
        case App(op, args) if len(args) >= 2 and isinstance(args[0], Indet):
            slot = args[0]
            if slot.uid not in free_uids or slot.uid in fill:
                return []
            rest = tuple(_substitute(a, fill) for a in args[1:])
            if any(
                i.uid in free_uids and i.uid not in fill
                for a in rest
                for i in indeterminates(a)
            ):
                return []
            if op.name == "eq" and len(args) == 2:
                return [(slot.uid, normalize(theory, rest[0]))]
            target = op.verifier_target()
            if target is not None:
                built = normalize(theory, App(theory.operator(target), rest))
                return [(slot.uid, built)]
    return []


_MAX_PATTERN_SLOTS = 3


def _payload_candidates(
    theory: TermTheory,
    reader: LocalizedEvent,
    avail: frozenset[Term],
    rigid: frozenset[int],
    cap_names: frozenset[str],
    capabilities: Sequence[OperatorDecl],
    depth: int,
) -> list[Term]:
    """Demand-driven injected payloads for one targeted reader.

    Covers replays of observed material, junk, instantiations of the reader's
    pattern over observed material, terms a verifier/equality guard demands,
    and one-level capability constructions — each checked constructible from
    what the attacker has seen.
    """
    out: set[Term] = set()
    base = sorted(avail, key=_term_key)
    out.update(base)
    for op in capabilities:
        for args in itertools.product(base, repeat=op.arity):
            cand = normalize(theory, App(op, tuple(args)))
            if term_depth(cand) <= depth:
                out.add(cand)
    assert isinstance(reader.kind, Receive)
    pattern = reader.kind.payload
    guard = reader.kind.guard
    frees = sorted(
        (i for i in indeterminates(pattern) if i.uid not in rigid),
        key=lambda i: i.uid,
    )
    if len(frees) <= _MAX_PATTERN_SLOTS:
        for combo in itertools.product(base, repeat=len(frees)):
            fill = {i.uid: v for i, v in zip(frees, combo)}
            for uid, forced in _guard_solutions(theory, guard, frees, fill):
                forced_fill = dict(fill)
                forced_fill[uid] = forced
                cand = normalize(theory, _substitute(pattern, forced_fill))
                if _derivable(cand, avail, cap_names, depth):
                    out.add(cand)
            cand = normalize(theory, _substitute(pattern, fill))
            if _derivable(cand, avail, cap_names, depth):
                out.add(cand)
    return sorted(
        (t for t in out if _viable_payload(theory, reader, t, rigid)),
        key=_term_key,
    )


def _behaviors(
    theory: TermTheory,
    sp: Process,
    arena: _Arena,
    attacker: AttackerModel,
    taps_n: int,
    writes_n: int,
    depth: int,
) -> Iterator[tuple[_Tap | _Inject, ...]]:
    """All attacker strands with exactly `taps_n` taps and `writes_n` writes.

    Taps never repeat a writer/channel pair, and every tap happens while a
    write is still pending (a trailing tap observes nothing anyone acts on).
    Injected payloads draw on material observed by earlier taps only.
    """
    taps = _tap_alphabet(sp, arena)
    targets = _injection_targets(sp, arena)
    rigid = rigid_indets(sp)
    cap_names = attacker.capability_names()
    capabilities = sorted(attacker.capabilities, key=lambda op: op.name)
    base = frozenset(
        normalize(theory, t) for t in attacker.initial_knowledge
    ) | {JUNK}
    avail0 = frozenset().union(*(easy_subterms(theory, t) for t in base))
    candidate_cache: dict[tuple[str, frozenset[Term]], list[Term]] = {}

    def candidates(ev: LocalizedEvent, avail: frozenset[Term]) -> list[Term]:
        key = (ev.point, avail)
        if key not in candidate_cache:
            candidate_cache[key] = _payload_candidates(
                theory, ev, avail, rigid, cap_names, capabilities, depth
            )
        return candidate_cache[key]

    def extend(
        prefix: tuple[_Tap | _Inject, ...],
        avail: frozenset[Term],
        taps_left: int,
        writes_left: int,
        used_readers: frozenset[str],
    ) -> Iterator[tuple[_Tap | _Inject, ...]]:
        if taps_left == 0 and writes_left == 0:
            yield prefix
            return
        last = prefix[-1] if prefix else None
        if taps_left > 0 and writes_left > 0:
            tapped = {(e.writer, e.channel.id) for e in prefix if isinstance(e, _Tap)}
            for ev, tc in taps:
                if (ev.point, tc.id) in tapped:
                    continue
                # Runs differing only in the order of adjacent taps are
                # indistinguishable; keep the sorted arrangement.
                if isinstance(last, _Tap) and (ev.point, tc.id) < (
                    last.writer,
                    last.channel.id,
                ):
                    continue
                gained = easy_subterms(theory, normalize(theory, ev.kind.payload))
                yield from extend(
                    prefix + (_Tap(ev.point, tc),),
                    avail | gained,
                    taps_left - 1,
                    writes_left,
                    used_readers,
                )
        if writes_left > 0:
            for ev, ic in targets:
                if ev.point in used_readers:
                    continue
                # Same canonicalization for adjacent injections.
                if isinstance(last, _Inject) and ev.point < last.reader:
                    continue
                for payload in candidates(ev, avail):
                    yield from extend(
                        prefix + (_Inject(ev.point, ic, payload),),
                        avail,
                        taps_left,
                        writes_left - 1,
                        used_readers | {ev.point},
                    )

    yield from extend((), avail0, taps_n, writes_n, frozenset())


# -- run assembly ----------------------------------------------------------------

def _role_flow_options(
    sp: Process, base_channels: Sequence[Channel], reader: LocalizedEvent
) -> list[tuple[str, Channel]]:
    net = sp.network
    out = []
    for ev in sorted(sp.iter_events(), key=lambda e: e.point):
        if isinstance(reader.kind, Receive) and not isinstance(ev.kind, Send):
            continue
        if isinstance(reader.kind, Sample) and not isinstance(ev.kind, Emit):
            continue
        for c in base_channels:
            if c.entry in net.subrefs(ev.location) and c.exit in net.subrefs(
                reader.location
            ):
                out.append((ev.point, c))
    out.sort(key=lambda pair: (pair[0], pair[1].id))
    return out


def _shaped_process(
    sp: Process, arena: _Arena, behavior: tuple[_Tap | _Inject, ...]
) -> tuple[Process, list[tuple[str, _Tap | _Inject]]]:
    shaped = Process(sp.name, sp.network, dict(sp.events), set(sp.order_pairs()))
    placed: list[tuple[str, _Tap | _Inject]] = []
    prev: str | None = None
    for n, act in enumerate(behavior, start=1):
        point = f"atk{n}"
        if isinstance(act, _Tap):
            kind = Receive(fresh_indet(f"g{n}"))
        else:
            kind = Send(act.payload)
        shaped.add_event(LocalizedEvent(point, kind, arena.attacker_node))
        if prev is not None:
            shaped.add_precedence(prev, point)
        prev = point
        placed.append((point, act))
    return shaped, placed


def _session_flow_plan(
    bounds: ExplorationBounds, readers_per_session: int, max_taps: int
) -> list[tuple[int, int]]:
    """(sessions, taps) pairs ordered by resulting flow count, then size."""
    pairs = [
        (s, t)
        for s in range(1, bounds.max_sessions + 1)
        for t in range(0, max_taps + 1)
    ]
    pairs.sort(key=lambda st: (readers_per_session * st[0] + st[1], st[0], st[1]))
    return pairs


def _order_closure(
    points: Sequence[str], succ: dict[str, list[str]]
) -> frozenset[tuple[str, str]] | None:
    """Reachability pairs of the event graph, or None when it has a cycle."""
    pairs: set[tuple[str, str]] = set()
    for start in points:
        seen: set[str] = set()
        stack = list(succ.get(start, ()))
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(succ.get(cur, ()))
        if start in seen:
            return None
        pairs.update((start, other) for other in seen)
    return frozenset(pairs)


def _enumerate_models(
    proc: Procedure,
    attacker: AttackerModel,
    bounds: ExplorationBounds,
    theory: TermTheory,
) -> Iterator[tuple[Run, dict[int, Term], frozenset[tuple[str, str]]]]:
    """Canonical-order stream of (run, binding, order) triples."""
    _check_capabilities(theory, attacker)
    arena = attacker_arena(proc.network, attacker)
    base_channels = sorted(proc.network.channels, key=lambda c: c.id)

    sessions_cache: dict[int, Process] = {}

    def sp_for(sessions: int) -> Process:
        if sessions not in sessions_cache:
            sessions_cache[sessions] = session_process(
                proc.process, sessions, arena.network
            )
        return sessions_cache[sessions]

    readers_per_session = sum(
        1 for ev in proc.process.iter_events() if isinstance(ev.kind, (Receive, Sample))
    )
    examined = 0
    seen: set[tuple] = set()
    counter = itertools.count(1)

    for writes_n in range(0, bounds.max_attacker_events + 1):
        max_taps = (
            0
            if writes_n == 0
            else len(_tap_alphabet(sp_for(bounds.max_sessions), arena))
        )
        for sessions, taps_n in _session_flow_plan(
            bounds, readers_per_session, max_taps
        ):
            sp = sp_for(sessions)
            if taps_n > len(_tap_alphabet(sp, arena)):
                continue
            role_options_cache: dict[str, list[tuple[str, Channel]]] = {}
            for behavior in _behaviors(
                theory, sp, arena, attacker, taps_n, writes_n, bounds.max_term_depth
            ):
                shaped, placed = _shaped_process(sp, arena, behavior)
                base_succ: dict[str, list[str]] = {}
                for a, b in shaped.order_pairs():
                    base_succ.setdefault(a, []).append(b)
                injected = {
                    act.reader for _, act in placed if isinstance(act, _Inject)
                }
                open_readers = sorted(
                    ev.point
                    for ev in sp.iter_events()
                    if isinstance(ev.kind, (Receive, Sample))
                    and ev.point not in injected
                )
                for r in open_readers:
                    if r not in role_options_cache:
                        role_options_cache[r] = _role_flow_options(
                            sp, base_channels, sp[r]
                        )
                options = [role_options_cache[r] for r in open_readers]
                if any(not o for o in options):
                    continue
                fixed_flows = [
                    Flow(act.writer, point, act.channel, "message")
                    if isinstance(act, _Tap)
                    else Flow(point, act.reader, act.channel, "message")
                    for point, act in placed
                ]
                points = list(shaped.events)
                for choice in itertools.product(*options):
                    examined += 1
                    if examined > bounds.max_examined:
                        raise BoundsExceeded(
                            f"enumeration examined more than "
                            f"{bounds.max_examined} candidate runs"
                        )
                    flows = list(fixed_flows)
                    for r, (w, c) in zip(open_readers, choice):
                        kind = (
                            "message" if isinstance(sp[r].kind, Receive) else "source"
                        )
                        flows.append(Flow(w, r, c, kind))
                    succ = {k: list(v) for k, v in base_succ.items()}
                    for f in flows:
                        succ.setdefault(f.writer, []).append(f.reader)
                    order = _order_closure(points, succ)
                    if order is None:
                        continue
                    run = Run(
                        f"x{next(counter)}",
                        shaped,
                        {f.reader: f for f in flows},
                    )
                    binding, _ = run_binding(run, theory, order)
                    if binding is None:
                        continue
                    key = (
                        tuple(sorted(run.process.events)),
                        tuple(
                            sorted(
                                (f.reader, f.writer, f.channel.id)
                                for f in run.assignment.values()
                            )
                        ),
                        tuple(
                            (p, _term_key(shaped[p].payload)) for p, _ in placed
                        ),
                    )
                    if key in seen:
                        continue
                    seen.add(key)
                    yield run, binding, order


def enumerate_runs(
    proc: Procedure,
    attacker: AttackerModel | None = None,
    bounds: ExplorationBounds | None = None,
    theory: TermTheory | None = None,
) -> Iterator[Run]:
    """Stream every sound, complete run of the procedure within the bounds.

    Runs are emitted in canonical order: attacker write count ascending, then
    total flows, then a fixed traversal of behaviors and flow assignments.
    Every emitted run passes the independent soundness check, and the stream
    deduplicates structurally identical runs.
    """
    attacker = attacker or AttackerModel()
    bounds = bounds or ExplorationBounds()
    theory = theory if theory is not None else TermTheory({})
    for run, _binding, _order in _enumerate_models(proc, attacker, bounds, theory):
        yield run


# -- semantic evaluation ---------------------------------------------------------

class RunModel:
    """Evaluate formulas against one complete run."""

    def __init__(
        self,
        run: Run,
        theory: TermTheory,
        binding: dict[int, Term] | None = None,
        order: frozenset[tuple[str, str]] | None = None,
    ):
        self.run = run
        self.theory = theory
        self.net = run.process.network
        if order is None:
            order = run_order(run)
        if binding is None:
            binding, mismatches = run_binding(run, theory, order)
            if binding is None:
                raise OrderCycle(
                    f"run {run.name} is not complete: {'; '.join(mismatches)}"
                )
        self.binding = binding
        self.order = order
        self.events = sorted(run.process.iter_events(), key=lambda e: e.point)
        self._values: dict[str, tuple[Term, ...]] = {}
        self._universe: list[Term] | None = None

    def value(self, t: Term) -> Term:
        return normalize(self.theory, _substitute(t, self.binding))

    def event_values(self, ev: LocalizedEvent) -> tuple[Term, ...]:
        if ev.point not in self._values:
            self._values[ev.point] = tuple(
                self.value(t) for t in carried_terms(ev.kind)
            )
        return self._values[ev.point]

    def main_value(self, ev: LocalizedEvent) -> Term | None:
        vals = self.event_values(ev)
        return vals[0] if vals else None

    def before(self, a: LocalizedEvent, b: LocalizedEvent) -> bool:
        return (a.point, b.point) in self.order

    def matches(self, ev: LocalizedEvent, d: EventDesc) -> bool:
        if not kind_matches(d.kind, desc_kind_of(ev.kind)):
            return False
        if ev.location not in self.net.subrefs(d.location):
            return False
        if d.payload is None:
            return True
        val = self.main_value(ev)
        if val is None:
            return False
        want = self.value(d.payload)
        if d.tilde:
            return val == want or easy_contains(self.theory, val, want)
        return val == want

    def witnesses(self, d: EventDesc) -> list[LocalizedEvent]:
        return [ev for ev in self.events if self.matches(ev, d)]

    def _carries(self, ev: LocalizedEvent, t: Term) -> bool:
        if not isinstance(ev.kind, WRITE_KINDS):
            return False
        val = self.value(write_payload(ev.kind))
        return val == t or t in full_subterms(val)

    def origination_witnesses(self, t: Term) -> list[LocalizedEvent]:
        carriers = [ev for ev in self.events if self._carries(ev, t)]
        return [
            ev
            for ev in carriers
            if not any(
                other.point != ev.point and self.before(other, ev)
                for other in carriers
            )
        ]

    def term_universe(self) -> list[Term]:
        if self._universe is None:
            pool: set[Term] = set()
            for ev in self.events:
                for v in self.event_values(ev):
                    pool |= easy_subterms(self.theory, v)
            self._universe = sorted(pool, key=_term_key)
        return self._universe

    # -- atoms --------------------------------------------------------------

    def _ancestors(self, loc: str) -> frozenset[str]:
        refs = set(self.net.nodes) | set(self.net.configurations)
        return frozenset(r for r in refs if loc in self.net.subrefs(r))

    def eval_atom(self, a) -> bool:
        match a:
            case Happened(desc):
                return bool(self.witnesses(desc))
            case Before(first, second):
                firsts = self.witnesses(first)
                seconds = self.witnesses(second)
                return any(
                    self.before(e1, e2) for e1 in firsts for e2 in seconds
                )
            case OriginatesAt(term, desc):
                t = self.value(term)
                return any(
                    self.matches(ev, desc)
                    for ev in self.origination_witnesses(t)
                )
            case EqualTerms(left, right):
                return self.value(left) == self.value(right)
            case ConfigEq(left, right):
                return left == right
            case ControlledBy(config, principal):
                if not self.net.is_declared(config):
                    return False
                return controller(self.net, config) == principal
            case LocalHistoryFact(tag, payload, location):
                return self._eval_lhf(tag, payload, location)
        raise TypeError(f"cannot evaluate atom {a!r}")

    def _eval_lhf(self, tag: str, payload: Term | None, location: str) -> bool:
        within = self.net.subrefs(location)
        if tag == "holds":
            if payload is None:
                return False
            want = self.value(payload)
            for ev in self.events:
                if ev.location not in within:
                    continue
                if isinstance(ev.kind, Receive) and ev.kind.guard is not None:
                    if self.value(ev.kind.guard) == want:
                        return True
            return False
        if tag == "knows":
            if payload is None:
                return False
            want = self.value(payload)
            visible = within | self._ancestors(location)
            for ev in self.events:
                if ev.location not in visible:
                    continue
                for v in self.event_values(ev):
                    if v == want or easy_contains(self.theory, v, want):
                        return True
            return False
        for ev in self.events:
            if ev.location not in within:
                continue
            if isinstance(ev.kind, Custom) and ev.kind.tag == tag:
                if payload is None:
                    return True
                val = self.main_value(ev)
                if val is not None and val == self.value(payload):
                    return True
        return False

    # -- formulas ------------------------------------------------------------

    def satisfies(self, f: Formula) -> bool:
        match f:
            case FAtom(atom):
                return self.eval_atom(atom)
            case FAnd(parts):
                return all(self.satisfies(p) for p in parts)
            case FOr(parts):
                return any(self.satisfies(p) for p in parts)
            case FImp(premise, conclusion):
                return not self.satisfies(premise) or self.satisfies(conclusion)
            case FNot(atom):
                return not self.eval_atom(atom)
            case FExists(var, body):
                return self._eval_exists(var, body)
        raise TypeError(f"cannot evaluate formula {f!r}")

    def _eval_exists(self, var: str, body: Formula) -> bool:
        as_loc = _mentions_location(body, var)
        term_uids = _indet_uids_named(body, var)
        if as_loc:
            refs = sorted(set(self.net.nodes) | set(self.net.configurations))
            for ref in refs:
                if self.satisfies(_subst_formula(body, {var: ref}, {})):
                    return True
        if term_uids:
            for cand in self.term_universe():
                sub = {uid: cand for uid in term_uids}
                if self.satisfies(_subst_formula(body, {}, sub)):
                    return True
        if not as_loc and not term_uids:
            return self.satisfies(body)
        return False


def _mentions_location(f: Formula, var: str) -> bool:
    def in_desc(d: EventDesc) -> bool:
        return d.location == var

    def walk(g: Formula) -> bool:
        match g:
            case FAtom(a) | FNot(a):
                match a:
                    case Happened(d):
                        return in_desc(d)
                    case Before(d1, d2):
                        return in_desc(d1) or in_desc(d2)
                    case OriginatesAt(_, d):
                        return in_desc(d)
                    case ConfigEq(l, r):
                        return var in (l, r)
                    case ControlledBy(c, _):
                        return c == var
                    case LocalHistoryFact(_, _, loc):
                        return loc == var
                    case _:
                        return False
            case FAnd(parts) | FOr(parts):
                return any(walk(p) for p in parts)
            case FImp(premise, conclusion):
                return walk(premise) or walk(conclusion)
            case FExists(v, body):
                return v != var and walk(body)
        return False

    return walk(f)


def _indet_uids_named(f: Formula, var: str) -> frozenset[int]:
    uids: set[int] = set()

    def scan_term(t: Term | None) -> None:
        if t is None:
            return
        for i in indeterminates(t):
            if i.name == var:
                uids.add(i.uid)

    def scan_desc(d: EventDesc) -> None:
        scan_term(d.payload)

    def walk(g: Formula) -> None:
        match g:
            case FAtom(a) | FNot(a):
                match a:
                    case Happened(d):
                        scan_desc(d)
                    case Before(d1, d2):
                        scan_desc(d1)
                        scan_desc(d2)
                    case OriginatesAt(t, d):
                        scan_term(t)
                        scan_desc(d)
                    case EqualTerms(l, r):
                        scan_term(l)
                        scan_term(r)
                    case LocalHistoryFact(_, payload, _):
                        scan_term(payload)
                    case _:
                        pass
            case FAnd(parts) | FOr(parts):
                for p in parts:
                    walk(p)
            case FImp(premise, conclusion):
                walk(premise)
                walk(conclusion)
            case FExists(v, body):
                if v != var:
                    walk(body)

    walk(f)
    return frozenset(uids)


def _subst_formula(
    f: Formula, loc_map: dict[str, str], term_map: dict[int, Term]
) -> Formula:
    def sub_term(t: Term | None) -> Term | None:
        return None if t is None else _substitute(t, term_map)

    def sub_desc(d: EventDesc) -> EventDesc:
        return EventDesc(
            d.kind, sub_term(d.payload), loc_map.get(d.location, d.location), d.tilde
        )

    def sub_atom(a):
        match a:
            case Happened(d):
                return Happened(sub_desc(d))
            case Before(d1, d2):
                return Before(sub_desc(d1), sub_desc(d2))
            case OriginatesAt(t, d):
                return OriginatesAt(sub_term(t), sub_desc(d))
            case EqualTerms(l, r):
                return EqualTerms(sub_term(l), sub_term(r))
            case ConfigEq(l, r):
                return ConfigEq(loc_map.get(l, l), loc_map.get(r, r))
            case ControlledBy(c, p):
                return ControlledBy(loc_map.get(c, c), p)
            case LocalHistoryFact(tag, payload, loc):
                return LocalHistoryFact(tag, sub_term(payload), loc_map.get(loc, loc))
        raise TypeError(f"cannot substitute into atom {a!r}")

    match f:
        case FAtom(a):
            return FAtom(sub_atom(a))
        case FNot(a):
            return FNot(sub_atom(a))
        case FAnd(parts):
            return FAnd(tuple(_subst_formula(p, loc_map, term_map) for p in parts))
        case FOr(parts):
            return FOr(tuple(_subst_formula(p, loc_map, term_map) for p in parts))
        case FImp(premise, conclusion):
            return FImp(
                _subst_formula(premise, loc_map, term_map),
                _subst_formula(conclusion, loc_map, term_map),
            )
        case FExists(v, body):
            inner_locs = {k: val for k, val in loc_map.items() if k != v}
            return FExists(v, _subst_formula(body, inner_locs, term_map))
    raise TypeError(f"cannot substitute into formula {f!r}")


def run_satisfies(run: Run, theory: TermTheory, formula: Formula) -> bool:
    """Whether one complete run satisfies a formula."""
    return RunModel(run, theory).satisfies(formula)


# -- validation ------------------------------------------------------------------

@dataclass(frozen=True)
class ValidationOutcome:
    verdict: str  # "holds" | "counterexample"
    counterexample: Run | None
    runs_examined: int
    runs_matching_premise: int
    bounds: ExplorationBounds

    @property
    def holds(self) -> bool:
        return self.verdict == "holds"


def semantic_validate(
    implication: Formula,
    proc: Procedure,
    attacker: AttackerModel | None = None,
    bounds: ExplorationBounds | None = None,
    theory: TermTheory | None = None,
) -> ValidationOutcome:
    """Check a premise/conclusion implication against every enumerated run.

    The implication holds when every sound, complete run within the bounds
    that satisfies the premise also satisfies the conclusion. Otherwise the
    first failing run in canonical order is returned — minimal in attacker
    writes, then in total flows.
    """
    if not isinstance(implication, FImp):
        raise TypeError("semantic validation needs a premise => conclusion formula")
    attacker = attacker or AttackerModel()
    bounds = bounds or ExplorationBounds()
    theory = theory if theory is not None else TermTheory({})
    examined = 0
    matched = 0
    for run, binding, order in _enumerate_models(proc, attacker, bounds, theory):
        examined += 1
        model = RunModel(run, theory, binding, order)
        if not model.satisfies(implication.premise):
            continue
        matched += 1
        if not model.satisfies(implication.conclusion):
            return ValidationOutcome(
                "counterexample", run, examined, matched, bounds
            )
    return ValidationOutcome("holds", None, examined, matched, bounds)


def observation_implication(observations: Sequence[Formula], goal: Formula) -> FImp:
    """Bundle a verifier's assumed observations and a goal into one implication."""
    return FImp(FAnd(tuple(observations)), goal)


# -- counterexample export ---------------------------------------------------------

def export_run_document(source, run: Run, run_name: str = "counterexample") -> str:
    """Render a run found by exploration as a complete, re-loadable document.

    The text contains the source document's theory blocks, the attacker-
    extended network the run lives on, its process (session copies plus the
    attacker strand), and the run itself, so `parse_spec` reproduces a run
    that is again sound and complete.
    """
    from .specfmt import ProcessLayout, SpecDocument, serialize

    shaped = run.process
    net = shaped.network
    closure = frozenset(shaped.order_pairs())

    preds: dict[str, int] = {p: 0 for p in shaped.events}
    for _, b in closure:
        preds[b] += 1
    # Sorting by closure-predecessor count is topological: a path a -> b gives
    # b every predecessor of a, plus a itself.
    topo = sorted(shaped.events, key=lambda p: (preds[p], p))

    strands: dict[str, list[str]] = {}
    strand_seen: list[str] = []
    for p in topo:
        loc = shaped[p].location
        if loc not in strands:
            strands[loc] = []
            strand_seen.append(loc)
        strands[loc].append(p)

    mint_loc = {
        ev.kind.indet.uid: ev.location
        for ev in shaped.iter_events()
        if isinstance(ev.kind, Generate)
    }
    minted = set(mint_loc)

    # A name minted by one strand and used in another must be declared first,
    # so strands are listed in dependency order (first-seen order otherwise).
    deps: dict[str, set[str]] = {loc: set() for loc in strand_seen}
    for ev in shaped.iter_events():
        for t in carried_terms(ev.kind):
            if isinstance(ev.kind, Generate):
                continue
            for i in indeterminates(t):
                home = mint_loc.get(i.uid)
                if home is not None and home != ev.location:
                    deps[ev.location].add(home)
    strand_order: list[str] = []
    remaining = list(strand_seen)
    while remaining:
        ready = [loc for loc in remaining if deps[loc] <= set(strand_order)]
        if not ready:
            raise ValueError(
                "cannot export: strands generate and use each other's "
                "indeterminates cyclically"
            )
        strand_order.append(ready[0])
        remaining.remove(ready[0])
    nonce_names = set(source.nonces)
    free_names: list[str] = []
    seen_names: dict[str, int] = {}
    for p in topo:
        for t in carried_terms(shaped[p].kind):
            for i in sorted(indeterminates(t), key=lambda i: i.uid):
                if i.uid in minted or i.name in nonce_names:
                    continue
                prior = seen_names.get(i.name)
                if prior is None:
                    seen_names[i.name] = i.uid
                    free_names.append(i.name)
                elif prior != i.uid:
                    raise ValueError(
                        f"cannot export: two distinct indeterminates are both "
                        f"named {i.name}"
                    )

    index = {p: n for n, p in enumerate(topo)}
    succ: dict[str, set[str]] = {}
    for a, b in closure:
        succ.setdefault(a, set()).add(b)
    reduced = [
        (a, b)
        for a, b in closure
        if not any(
            (c, b) in closure for c in succ.get(a, ()) if c != b
        )
    ]
    reduced.sort(key=lambda ab: (index[ab[0]], index[ab[1]]))

    # The parser resolves names in reading order, so check that every
    # indeterminate is in scope by the time a statement mentions it.
    scope = set(free_names) | nonce_names
    for loc in strand_order:
        for p in strands[loc]:
            kind = shaped[p].kind
            if isinstance(kind, Generate):
                scope.add(kind.indet.name)
                continue
            for t in carried_terms(kind):
                for i in indeterminates(t):
                    if i.name not in scope:
                        raise ValueError(
                            f"cannot export: {p} mentions {i.name} before any "
                            f"statement introduces it"
                        )

    layout = ProcessLayout()
    if free_names:
        layout.items.append(("vars", free_names))
    for loc in strand_order:
        layout.items.append(("strand", (loc, strands[loc])))
    for a, b in reduced:
        layout.items.append(("order", [a, b]))

    doc = SpecDocument(
        theory=source.theory,
        nonces=dict(source.nonces),
        theory_blocks=dict(source.theory_blocks),
        networks={net.name: net},
        processes={shaped.name: shaped},
        runs={run_name: Run(run_name, shaped, dict(run.assignment))},
        procedures={},
        proofs={},
        layouts={shaped.name: layout},
        order=(
            [("theory", n) for k, n in source.order if k == "theory"]
            + [("network", net.name), ("process", shaped.name), ("run", run_name)]
        ),
    )
    return serialize(doc)

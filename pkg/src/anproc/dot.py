"""Deterministic DOT rendering of networks, runs, and checked derivations.

All emitters produce byte-identical text for equal inputs: every collection
is emitted in a sorted or canonically derived order, and nothing depends on
hash ordering. Rendering to images is left to external DOT tooling.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import RejectedDerivation, UnsoundRun
from .logic import (
    Before,
    Derivation,
    EventDesc,
    FAnd,
    FAtom,
    FExists,
    FImp,
    FNot,
    FOr,
    Formula,
    Happened,
    OriginatesAt,
    check_proof,
    desc_kind_of,
    kind_matches,
)
from .network import ActorNetwork
from .process import LocalizedEvent
from .runs import Procedure, Run, check_sound
from .specfmt import _event_text
from .terms import TermTheory

_TARGETS = ("network", "run", "derivation")


@dataclass(frozen=True)
class RenderOptions:
    """Layout hints for the DOT emitters.

    `strand_spacing` sets the horizontal separation between strands (DOT
    nodesep, in inches). `label_verbosity` is 0 for bare point identifiers,
    1 for event text, 2 for event text with locations. Output is always
    deterministic; the flag records that contract and cannot be disabled.
    """
    target: str = "network"
    strand_spacing: float = 1.0
    label_verbosity: int = 1
    deterministic: bool = True

    def __post_init__(self) -> None:
        if self.target not in _TARGETS:
            raise ValueError(
                f"target must be one of {', '.join(_TARGETS)}; got {self.target!r}"
            )
        if self.strand_spacing <= 0:
            raise ValueError("strand_spacing must be positive")
        if self.label_verbosity not in (0, 1, 2):
            raise ValueError("label_verbosity must be 0, 1, or 2")
        if not self.deterministic:
            raise ValueError("deterministic output cannot be disabled")


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


# -- networks ----------------------------------------------------------------------

def _config_tree(net: ActorNetwork) -> tuple[list[str], dict[str, list[str]]]:
    """Top-level configuration names and each configuration's direct members."""
    members = {name: sorted(net.configurations[name]) for name in net.configurations}
    nested = {m for ms in members.values() for m in ms if m in members}
    top = sorted(name for name in members if name not in nested)
    return top, members


def emit_network_dot(net: ActorNetwork, opts: RenderOptions | None = None) -> str:
    """Render a network: nodes as dots, configurations as clusters, channels
    as typed edges."""
    opts = opts or RenderOptions(target="network")
    lines = [f"digraph {_quote(net.name)} {{"]
    if net.nodes or net.channels or net.configurations:
        lines.append(f"  graph [nodesep={opts.strand_spacing:.2f}];")
        lines.append("  node [shape=point, width=0.12];")

    def node_stmt(ref: str, indent: str) -> str:
        if opts.label_verbosity == 0:
            return f"{indent}{_quote(ref)};"
        return f"{indent}{_quote(ref)} [xlabel={_quote(ref)}];"

    top, members = _config_tree(net)
    placed: set[str] = set()

    def emit_config(name: str, indent: str) -> None:
        lines.append(f"{indent}subgraph {_quote('cluster_' + name)} {{")
        lines.append(f"{indent}  label={_quote(name)};")
        for m in members[name]:
            if m in members:
                emit_config(m, indent + "  ")
            else:
                lines.append(node_stmt(m, indent + "  "))
                placed.add(m)
        lines.append(f"{indent}}}")

    for name in top:
        emit_config(name, "  ")
    for n in sorted(net.nodes):
        if n not in placed:
            lines.append(node_stmt(n, "  "))
    for ch in sorted(net.channels, key=lambda c: c.id):
        if opts.label_verbosity == 0:
            label = ch.type
        else:
            label = f"{ch.id}:{ch.type}"
            if opts.label_verbosity == 2 and ch.auth_flags:
                label += " [" + ", ".join(sorted(ch.auth_flags)) + "]"
        lines.append(
            f"  {_quote(ch.entry)} -> {_quote(ch.exit)} [label={_quote(label)}];"
        )
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- runs --------------------------------------------------------------------------

def _event_label(ev: LocalizedEvent, verbosity: int) -> str:
    if verbosity == 0:
        return ev.point
    text = f"{ev.point}: {_event_text(ev.kind)}"
    if verbosity == 2:
        text = f"{ev.point}@{ev.location}: {_event_text(ev.kind)}"
    return text


def _group_of(net: ActorNetwork, top_configs: list[str]) -> dict[str, str]:
    """Map every declared ref to its top-level group (a top-level
    configuration, or the ref itself when it sits in none)."""
    out: dict[str, str] = {}
    for ref in sorted(net.nodes | frozenset(net.configurations)):
        out[ref] = ref
        for c in top_configs:
            if ref in net.subrefs(c):
                out[ref] = c
                break
    return out


def _strand_structure(
    run: Run,
) -> tuple[dict[str, list[str]], list[tuple[str, str]], list[list[str]]]:
    """Group events, vertical edges, and strands for a run's process.

    Events are grouped by the top-level configuration containing their
    location. Vertical (strand successor) edges are the covering pairs of the
    process order between events of one group; a strand is one connected
    chain of those edges.
    """
    proc = run.process
    net = proc.network
    top, _ = _config_tree(net)
    group_of = _group_of(net, top)

    groups: dict[str, list[str]] = {}
    for ev in sorted(proc.iter_events(), key=lambda e: e.point):
        groups.setdefault(group_of.get(ev.location, ev.location), []).append(ev.point)

    closure = frozenset(proc.order_pairs())
    vertical: list[tuple[str, str]] = []
    for gname, pts in sorted(groups.items()):
        inside = set(pts)
        for a in pts:
            for b in pts:
                if (a, b) not in closure:
                    continue
                if any(
                    c != a and c != b and (a, c) in closure and (c, b) in closure
                    for c in inside
                ):
                    continue
                vertical.append((a, b))
    vertical.sort()

    # Strands: weakly connected components of the vertical edges, confined to
    # one group by construction; events with no vertical edge stand alone.
    parent: dict[str, str] = {}

    def find(x: str) -> str:
        while parent.setdefault(x, x) != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for a, b in vertical:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
    strands_by_root: dict[str, list[str]] = {}
    preds: dict[str, int] = {p: 0 for p in proc.events}
    for _, b in closure:
        preds[b] += 1
    for gname, pts in sorted(groups.items()):
        for p in pts:
            strands_by_root.setdefault(find(p), []).append(p)
    strands = [
        sorted(pts, key=lambda p: (preds[p], p))
        for pts in strands_by_root.values()
    ]
    strands.sort(key=lambda pts: pts[0])
    return groups, vertical, strands


def _run_lines(run: Run, opts: RenderOptions) -> list[str]:
    proc = run.process
    net = proc.network
    groups, vertical, strands = _strand_structure(run)
    lines = [f"digraph {_quote(run.name)} {{"]
    lines.append(f"  graph [nodesep={opts.strand_spacing:.2f}, ranksep=0.35];")
    lines.append("  node [shape=box, style=rounded];")

    strand_of: dict[str, int] = {}
    for k, pts in enumerate(strands):
        for p in pts:
            strand_of[p] = k

    top, _ = _config_tree(net)
    group_of = _group_of(net, top)

    def emit_points(pts: list[str], indent: str) -> None:
        by_strand: dict[int, list[str]] = {}
        for p in pts:
            by_strand.setdefault(strand_of[p], []).append(p)
        for k in sorted(by_strand):
            spts = [p for p in strands[k] if p in set(by_strand[k])]
            lines.append(f"{indent}// strand {spts[0]}")
            for p in spts:
                label = _event_label(proc[p], opts.label_verbosity)
                lines.append(f"{indent}{_quote(p)} [label={_quote(label)}];")

    for gname in sorted(groups):
        pts = groups[gname]
        if gname in net.configurations:
            lines.append(f"  subgraph {_quote('cluster_' + gname)} {{")
            lines.append(f"    label={_quote(gname)};")
            emit_points(pts, "    ")
            lines.append("  }")
        else:
            emit_points(pts, "  ")
    for a, b in vertical:
        lines.append(f"  {_quote(a)} -> {_quote(b)};")
    for reader in sorted(run.assignment):
        flow = run.assignment[reader]
        label = f"{flow.channel.id}:{flow.channel.type}"
        lines.append(
            f"  {_quote(flow.writer)} -> {_quote(flow.reader)} "
            f"[label={_quote(label)}, style=dashed, constraint=false];"
        )
    return lines


def emit_run_dot(run: Run, opts: RenderOptions | None = None) -> str:
    """Render a sound run: strands as vertical chains grouped per
    configuration, flows as dashed typed edges."""
    opts = opts or RenderOptions(target="run")
    ok, problems = check_sound(run)
    if not ok:
        raise UnsoundRun(
            f"run {run.name} is not sound: {'; '.join(problems)}"
        )
    return "\n".join(_run_lines(run, opts) + ["}"]) + "\n"


# -- derivations -------------------------------------------------------------------

def _claim_descs(f: Formula) -> list[EventDesc]:
    out: list[EventDesc] = []

    def walk(g: Formula) -> None:
        match g:
            case FAtom(atom):
                match atom:
                    case Happened(desc):
                        out.append(desc)
                    case OriginatesAt(_, desc):
                        out.append(desc)
                    case Before(first, second):
                        out.append(first)
                        out.append(second)
            case FAnd(parts) | FOr(parts):
                for p in parts:
                    walk(p)
            case FImp(premise, conclusion):
                walk(premise)
                walk(conclusion)
            case FExists(_, body):
                walk(body)
            case FNot(atom):
                walk(FAtom(atom))

    walk(f)
    return out


def _anchor_point(run: Run, descs: list[EventDesc]) -> str | None:
    net = run.process.network
    events = sorted(run.process.iter_events(), key=lambda e: e.point)
    for d in descs:
        for ev in events:
            if not kind_matches(d.kind, desc_kind_of(ev.kind)):
                continue
            if net.is_declared(d.location) and ev.location not in net.subrefs(
                d.location
            ):
                continue
            return ev.point
    return None


def emit_derivation_dot(
    derivation: Derivation,
    procedure: Procedure,
    run: Run,
    theory: TermTheory,
    opts: RenderOptions | None = None,
) -> str:
    """Render an accepted derivation: the reference run's diagram with one
    numbered badge per step, attached to an event the step's claim mentions."""
    opts = opts or RenderOptions(target="derivation")
    result = check_proof(derivation, procedure, theory)
    if result.status != "accepted":
        raise RejectedDerivation(
            f"derivation {derivation.name} is rejected at step "
            f"{result.failed_step}: {result.reason}"
        )
    lines = _run_lines(run, opts)
    lines.append(
        "  node [shape=circle, style=solid, fontsize=10, "
        "width=0.25, fixedsize=true];"
    )
    previous: str | None = None
    for step in derivation.steps:
        badge = f"step_{step.index}"
        lines.append(f"  {_quote(badge)} [label={_quote(str(step.index))}];")
        anchor = _anchor_point(run, _claim_descs(step.claim))
        if anchor is not None:
            lines.append(
                f"  {_quote(badge)} -> {_quote(anchor)} "
                "[style=dotted, arrowhead=none, constraint=false];"
            )
        elif previous is not None:
            lines.append(
                f"  {_quote(previous)} -> {_quote(badge)} "
                "[style=invis];"
            )
        previous = badge
    lines.append("}")
    return "\n".join(lines) + "\n"

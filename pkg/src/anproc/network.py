"""Actor-networks.

A network is a set of principals, a set of nodes, a forest of configurations
over those nodes, and typed channels between configuration references, plus a
partial control map saying which principal drives which configuration.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import UnknownConfiguration

AUTH_FLAGS = frozenset({"auch.m.1", "auch.m.2", "auch.p.1", "auch.p.2"})


@dataclass(frozen=True)
class Channel:
    id: str
    entry: str
    exit: str
    type: str
    auth_flags: frozenset[str] = frozenset()


@dataclass(frozen=True)
class ActorNetwork:
    name: str
    principals: frozenset[str]
    nodes: frozenset[str]
    configurations: Mapping[str, frozenset[str]]
    channels: tuple[Channel, ...]
    channel_types: frozenset[str]
    control: Mapping[str, str] = field(default_factory=dict)

    # -- structure queries ---------------------------------------------------

    def is_declared(self, ref: str) -> bool:
        return ref in self.nodes or ref in self.configurations

    def members(self, ref: str) -> frozenset[str]:
        return self.configurations.get(ref, frozenset())

    def subrefs(self, ref: str) -> frozenset[str]:
        """`ref` plus everything reachable downward through membership."""
        seen: set[str] = set()
        stack = [ref]
        while stack:
            cur = stack.pop()
            if cur in seen:
                continue
            seen.add(cur)
            stack.extend(self.members(cur))
        return frozenset(seen)

    def leaf_nodes(self, ref: str) -> frozenset[str]:
        return frozenset(r for r in self.subrefs(ref) if r in self.nodes)

    def contains(self, outer: str, inner: str) -> bool:
        return inner in self.subrefs(outer)

    def comparable(self, a: str, b: str) -> bool:
        """Subtree comparability used by the no-subliminal-synchronization rule."""
        return self.contains(a, b) or self.contains(b, a)


UNDEFINED = None


def controller(net: ActorNetwork, ref: str) -> str | None:
    """The principal controlling `ref`, or None when control is undefined."""
    if not net.is_declared(ref):
        raise UnknownConfiguration(f"{ref} is not a declared node or configuration")
    return net.control.get(ref, UNDEFINED)


def validate_network(net: ActorNetwork) -> list[str]:
    """All structural violations; an empty report means the network is well formed."""
    report: list[str] = []

    for config, members in net.configurations.items():
        if config in net.nodes:
            report.append(f"configuration {config} reuses a node name")
        if not members:
            report.append(f"configuration {config} is empty")
        for member in members:
            if not net.is_declared(member):
                report.append(
                    f"configuration {config} contains undeclared member {member}"
                )

    # membership must be a forest: walk for cycles
    state: dict[str, int] = {}

    def visit(ref: str, trail: tuple[str, ...]) -> None:
        if state.get(ref) == 2:
            return
        if state.get(ref) == 1:
            report.append(
                "configuration cycle: " + " -> ".join(trail + (ref,))
            )
            return
        state[ref] = 1
        for member in net.members(ref):
            if member in net.configurations:
                visit(member, trail + (ref,))
        state[ref] = 2

    for config in net.configurations:
        visit(config, ())

    for ch in net.channels:
        for end, label in ((ch.entry, "entry"), (ch.exit, "exit")):
            if not net.is_declared(end):
                report.append(f"channel {ch.id}: {label} {end} is undeclared")
        if ch.type not in net.channel_types:
            report.append(f"channel {ch.id}: undeclared type {ch.type}")
        bad = ch.auth_flags - AUTH_FLAGS
        if bad:
            report.append(f"channel {ch.id}: unknown flags {sorted(bad)}")

    seen_ids: set[str] = set()
    for ch in net.channels:
        if ch.id in seen_ids:
            report.append(f"duplicate channel id {ch.id}")
        seen_ids.add(ch.id)

    for ref, principal in net.control.items():
        if not net.is_declared(ref):
            report.append(f"control entry for undeclared {ref}")
        if principal not in net.principals:
            report.append(f"control of {ref} names undeclared principal {principal}")

    return report


def flow_channel_exists(
    net: ActorNetwork, frm: str, to: str, ctype: str
) -> tuple[bool, Channel | None]:
    """Whether a channel of `ctype` flows from `frm` to `to`.

    A channel lifts to any configuration containing its entry on the writing
    side and any configuration containing its exit on the reading side; the
    witness is the underlying direct channel.
    """
    if not net.is_declared(frm):
        raise UnknownConfiguration(f"{frm} is not declared")
    if not net.is_declared(to):
        raise UnknownConfiguration(f"{to} is not declared")
    from_refs = net.subrefs(frm)
    to_refs = net.subrefs(to)
    for ch in net.channels:
        if ch.type == ctype and ch.entry in from_refs and ch.exit in to_refs:
            return True, ch
    return False, None


def channels_into(net: ActorNetwork, ref: str) -> list[Channel]:
    """All channels whose exit lies inside `ref`'s subtree."""
    refs = net.subrefs(ref)
    return [ch for ch in net.channels if ch.exit in refs]


def is_cyber_network(net: ActorNetwork) -> bool:
    """Degenerate single-medium shape: one channel type, node-only
    configurations, a channel for every ordered node pair, and control a
    bijection between nodes and principals."""
    if net.configurations:
        return False
    if net.nodes and len(net.channel_types) != 1:
        return False
    pairs = {(ch.entry, ch.exit) for ch in net.channels}
    for a in net.nodes:
        for b in net.nodes:
            if a != b and (a, b) not in pairs:
                return False
    controlled = {ref for ref in net.control if ref in net.nodes}
    owners = [net.control[ref] for ref in sorted(controlled)]
    if controlled != net.nodes:
        return False
    if len(set(owners)) != len(owners) or set(owners) != set(net.principals):
        return False
    return True


def build_network(
    name: str,
    principals: Iterable[str],
    nodes: Iterable[str],
    configurations: Mapping[str, Iterable[str]] | None = None,
    channels: Iterable[Channel] = (),
    channel_types: Iterable[str] = (),
    control: Mapping[str, str] | None = None,
) -> ActorNetwork:
    return ActorNetwork(
        name=name,
        principals=frozenset(principals),
        nodes=frozenset(nodes),
        configurations={
            k: frozenset(v) for k, v in (configurations or {}).items()
        },
        channels=tuple(channels),
        channel_types=frozenset(channel_types),
        control=dict(control or {}),
    )

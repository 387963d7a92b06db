"""Message algebra.

Terms are constants, indeterminates, flat tuples, operator applications, and
the check-mark constant. A theory declares the operators (with per-argument
transparency and axiom tags) plus oriented rewrite rules; everything a
principal can extract from a term without secrets is its set of easy subterms.
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Iterator, Mapping

from .errors import ArityMismatch, IndexOutOfRange, NotATuple, UnknownOperator

# Axiom tags an operator declaration may carry. Parametrized tags are encoded
# as "verifier_of:<op>" and "originates_at:<name>".
TAG_INJECTIVE = "injective"
TAG_VERIFIER_OF = "verifier_of"
TAG_ORIGINATES_AT = "originates_at"


@dataclass(frozen=True)
class OperatorDecl:
    name: str
    arity: int
    transparency: tuple[bool, ...]  # True = argument is an easy subterm
    tags: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.arity < 0:
            raise ArityMismatch(f"operator {self.name}: negative arity")
        if len(self.transparency) != self.arity:
            raise ArityMismatch(
                f"operator {self.name}: {self.arity} arguments but "
                f"{len(self.transparency)} transparency flags"
            )

    @property
    def injective(self) -> bool:
        return TAG_INJECTIVE in self.tags

    def verifier_target(self) -> str | None:
        for tag in self.tags:
            if tag.startswith(TAG_VERIFIER_OF + ":"):
                return tag.split(":", 1)[1]
        return None


# -- term variants -----------------------------------------------------------

@dataclass(frozen=True)
class Const:
    name: str

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Indet:
    uid: int
    name: str = field(compare=False)

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Tup:
    items: tuple["Term", ...]

    def __repr__(self) -> str:
        return "(" + ", ".join(map(repr, self.items)) + ")"


@dataclass(frozen=True)
class App:
    op: OperatorDecl
    args: tuple["Term", ...]

    def __repr__(self) -> str:
        return self.op.name + "(" + ", ".join(map(repr, self.args)) + ")"


@dataclass(frozen=True)
class Tick:
    def __repr__(self) -> str:
        return "✓"


Term = Const | Indet | Tup | App | Tick
TICK = Tick()

_indet_counter = itertools.count(1)


def fresh_indet(name: str) -> Indet:
    """Mint an indeterminate with a globally unique id; the name is display-only."""
    return Indet(next(_indet_counter), name)


# -- theories ----------------------------------------------------------------

@dataclass(frozen=True)
class TermTheory:
    operators: Mapping[str, OperatorDecl] = field(default_factory=dict)
    rewrites: tuple[tuple[Term, Term], ...] = ()

    def __post_init__(self) -> None:
        for op in self.operators.values():
            target = op.verifier_target()
            if target is not None and target not in self.operators:
                raise UnknownOperator(
                    f"operator {op.name} verifies undeclared operator {target}"
                )

    def operator(self, name: str) -> OperatorDecl:
        try:
            return self.operators[name]
        except KeyError:
            raise UnknownOperator(f"operator {name} is not declared") from None


EMPTY_THEORY = TermTheory({})


# -- construction and normalization ------------------------------------------

def _flatten(t: Term) -> Term:
    match t:
        case Tup(items):
            flat: list[Term] = []
            for item in items:
                item = _flatten(item)
                if isinstance(item, Tup):
                    flat.extend(item.items)
                else:
                    flat.append(item)
            if len(flat) == 1:
                return flat[0]
            return Tup(tuple(flat))
        case App(op, args):
            return App(op, tuple(_flatten(a) for a in args))
        case _:
            return t


def _match(pattern: Term, t: Term, binding: dict[int, Term]) -> bool:
    """Pattern matching; indeterminates in the pattern bind anything."""
    match pattern:
        case Indet(uid=uid):
            if uid in binding:
                return binding[uid] == t
            binding[uid] = t
            return True
        case Const() | Tick():
            return pattern == t
        case Tup(items):
            return (
                isinstance(t, Tup)
                and len(t.items) == len(items)
                and all(_match(p, s, binding) for p, s in zip(items, t.items))
            )
        case App(op, args):
            return (
                isinstance(t, App)
                and t.op.name == op.name
                and all(_match(p, s, binding) for p, s in zip(args, t.args))
            )
    return False


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


def _rewrite_once(theory: TermTheory, t: Term) -> Term | None:
    for lhs, rhs in theory.rewrites:
        binding: dict[int, Term] = {}
        if _match(lhs, t, binding):
            return _substitute(rhs, binding)
    match t:
        case Tup(items):
            for i, item in enumerate(items):
                new = _rewrite_once(theory, item)
                if new is not None:
                    return Tup(items[:i] + (new,) + items[i + 1:])
        case App(op, args):
            for i, arg in enumerate(args):
                new = _rewrite_once(theory, arg)
                if new is not None:
                    return App(op, args[:i] + (new,) + args[i + 1:])
    return None


REWRITE_DEPTH = 100


def normalize(theory: TermTheory, t: Term) -> Term:
    """Flatten tuples and apply the theory's oriented rewrites to a fixpoint.

    Rewriting is bounded: a theory whose rules loop past the bound keeps the
    last form reached rather than diverging.
    """
    t = _flatten(t)
    for _ in range(REWRITE_DEPTH):
        new = _rewrite_once(theory, t)
        if new is None:
            return t
        t = _flatten(new)
    return t


def normal_equal(theory: TermTheory, a: Term, b: Term) -> bool:
    return normalize(theory, a) == normalize(theory, b)


# -- term expression syntax ---------------------------------------------------

_TOKEN = re.compile(r"\s*([A-Za-z_][A-Za-z0-9_]*|[(),]|\S)")


def _tokenize_expr(syntax: str) -> list[str]:
    out, pos = [], 0
    while pos < len(syntax):
        m = _TOKEN.match(syntax, pos)
        if not m:
            break
        out.append(m.group(1))
        pos = m.end()
    return out


class _ExprParser:
    def __init__(self, theory: TermTheory, tokens: list[str], env: Mapping[str, Term]):
        self.theory = theory
        self.tokens = tokens
        self.env = env
        self.pos = 0

    def peek(self) -> str | None:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def take(self) -> str:
        tok = self.peek()
        if tok is None:
            raise NotATuple("unexpected end of term expression")
        self.pos += 1
        return tok

    def expect(self, tok: str) -> None:
        got = self.take()
        if got != tok:
            raise NotATuple(f"expected {tok!r} in term expression, got {got!r}")

    def expr(self) -> Term:
        tok = self.take()
        if tok == "(":
            items = [self.expr()]
            while self.peek() == ",":
                self.take()
                items.append(self.expr())
            self.expect(")")
            if len(items) == 1:
                return items[0]
            return Tup(tuple(items))
        if not tok[0].isalpha() and tok[0] != "_":
            raise NotATuple(f"unexpected token {tok!r} in term expression")
        if self.peek() == "(":
            self.take()
            args: list[Term] = []
            if self.peek() != ")":
                args.append(self.expr())
                while self.peek() == ",":
                    self.take()
                    args.append(self.expr())
            self.expect(")")
            if tok == "pair":
                if len(args) != 2:
                    raise ArityMismatch("pair takes exactly 2 arguments")
                return Tup(tuple(args))
            op = self.theory.operator(tok)
            if len(args) != op.arity:
                raise ArityMismatch(
                    f"operator {tok} expects {op.arity} arguments, got {len(args)}"
                )
            return App(op, tuple(args))
        if tok == "tick":
            return TICK
        if tok in self.env:
            return self.env[tok]
        if tok in self.theory.operators:
            raise ArityMismatch(f"operator {tok} used without arguments")
        return Const(tok)


def build_term(theory: TermTheory, syntax: str, env: Mapping[str, Term] | None = None) -> Term:
    """Parse a term expression and return it normalized.

    `env` maps names to terms (indeterminates in scope, declared nonces);
    any other bare identifier is a constant.
    """
    parser = _ExprParser(theory, _tokenize_expr(syntax), env or {})
    t = parser.expr()
    if parser.peek() is not None:
        raise NotATuple(f"trailing input in term expression: {parser.peek()!r}")
    return normalize(theory, t)


# -- queries -------------------------------------------------------------------

def project(t: Term, index: int) -> Term:
    """Tuple projection; `index` is 1-based."""
    if not isinstance(t, Tup):
        raise NotATuple(f"cannot project from non-tuple {t!r}")
    if not 1 <= index <= len(t.items):
        raise IndexOutOfRange(f"index {index} out of range for {len(t.items)}-tuple")
    return t.items[index - 1]


def easy_subterms(theory: TermTheory, t: Term) -> frozenset[Term]:
    """Downward closure of {t} under the easy-subterm order.

    Tuple components are always extractable; operator arguments only in
    transparent positions.
    """
    out: set[Term] = set()

    def walk(s: Term) -> None:
        if s in out:
            return
        out.add(s)
        match s:
            case Tup(items):
                for item in items:
                    walk(item)
            case App(op, args):
                for transparent, arg in zip(op.transparency, args):
                    if transparent:
                        walk(arg)

    walk(t)
    return frozenset(out)


def easy_contains(theory: TermTheory, t: Term, sub: Term) -> bool:
    return sub in easy_subterms(theory, t)


def full_subterms(t: Term) -> frozenset[Term]:
    """All subterms regardless of transparency (the raw syntax tree)."""
    out: set[Term] = set()

    def walk(s: Term) -> None:
        if s in out:
            return
        out.add(s)
        match s:
            case Tup(items):
                for item in items:
                    walk(item)
            case App(_, args):
                for arg in args:
                    walk(arg)

    walk(t)
    return frozenset(out)


def indeterminates(t: Term) -> frozenset[Indet]:
    return frozenset(s for s in full_subterms(t) if isinstance(s, Indet))


def alpha_equal(t1: Term, t2: Term) -> tuple[bool, dict[int, int] | None]:
    """Equality up to a bijective renaming of indeterminates.

    Returns the witnessing uid renaming when the terms match.
    """
    fwd: dict[int, int] = {}
    bwd: dict[int, int] = {}

    def walk(a: Term, b: Term) -> bool:
        match a, b:
            case Indet(uid=ua), Indet(uid=ub):
                if fwd.get(ua, ub) != ub or bwd.get(ub, ua) != ua:
                    return False
                fwd[ua] = ub
                bwd[ub] = ua
                return True
            case (Const(), Const()) | (Tick(), Tick()):
                return a == b
            case Tup(items=ia), Tup(items=ib):
                return len(ia) == len(ib) and all(walk(x, y) for x, y in zip(ia, ib))
            case App(op=oa, args=aa), App(op=ob, args=ab):
                return oa.name == ob.name and all(walk(x, y) for x, y in zip(aa, ab))
        return False

    if walk(t1, t2):
        return True, fwd
    return False, None


def rename_indets(t: Term, renaming: Mapping[int, Indet]) -> Term:
    match t:
        case Indet(uid=uid) if uid in renaming:
            return renaming[uid]
        case Tup(items):
            return Tup(tuple(rename_indets(i, renaming) for i in items))
        case App(op, args):
            return App(op, tuple(rename_indets(a, renaming) for a in args))
        case _:
            return t


# -- event representation -----------------------------------------------------

# Packs a compare event's two payloads opaquely so the representation of
# compare(l, r) can never collide with the representation of send((l, r)).
_CMP_OP = OperatorDecl("~cmp", 2, (False, False))


def represent_event(ev) -> Term:
    """The term standing for a localized event: tuple[tag, path, payload].

    Payload-free events carry ✓ in the payload slot. The tag encodes the event
    kind (and the custom tag or assignment store where needed) so that
    representation is injective over any finite event set.
    """
    kind = ev.kind
    loc = ev.location
    name = type(kind).__name__.lower()
    tag = f"ev.{name}"
    payload: Term = TICK
    match name:
        case "send" | "receive" | "emit" | "sample":
            if kind.payload is not None:
                payload = kind.payload
        case "generate":
            payload = kind.indet
        case "assign":
            tag = f"ev.assign:{kind.store}"
            payload = kind.payload
        case "compare":
            payload = App(_CMP_OP, (kind.left, kind.right))
        case "custom":
            tag = f"ev.custom:{kind.tag}"
            if kind.payload is not None:
                payload = kind.payload
    return Tup((Const(tag), Const(f"at.{loc}"), payload))


def iter_subterm_pairs(theory: TermTheory, t: Term) -> Iterator[tuple[Term, Term]]:
    """(s, t) for every easy subterm s of t; handy for closure property tests."""
    for s in easy_subterms(theory, t):
        yield s, t

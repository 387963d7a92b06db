"""Reading and writing the .anp interchange format.

A .anp document is a sequence of named blocks, in any order as long as a
block only refers to blocks that came before it:

    theory crypto {
      op sig/1 opaque [injective]
      nonce x
      rewrite pAbar -> pA
    }
    network net { principals A, B ... }
    process p on net { vars u ... strand P { p1: nu x } order p1 -> p2 }
    run r on p { flow p2 -c1-> q1 }
    procedure pr { process p ... axiom a: ... }
    proof pf for B on pr { assume ... step 1: ... qed ...: ... }

Statements end at a newline or `;` (newlines inside parentheses or square
brackets do not terminate a statement); `#` starts a comment that runs to
the end of the line.  The complete grammar, with a worked example, lives in
docs/grammar.md.

Parsing is deterministic: indeterminates are minted in reading order with
negative uids (the engine mints eigenvariables with positive ones, so the
two spaces never collide), which makes parse -> serialize -> parse the
identity on documents.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import (
    AnpSyntaxError,
    AnprocError,
    DuplicateName,
    Span,
    UnresolvedReference,
)
from .logic import (
    ATTACKER,
    Atom,
    Before,
    ConfigEq,
    ControlledBy,
    Derivation,
    EqualTerms,
    EventDesc,
    FAnd,
    FAtom,
    FExists,
    FImp,
    FNot,
    FOr,
    Formula,
    Happened,
    LocalHistoryFact,
    OriginatesAt,
    ProcedureAxiom,
    QedClause,
    SCHEMAS,
    Step,
    chain,
    desc_representation,
)
from .network import ActorNetwork, Channel
from .process import (
    Assign,
    Compare,
    Custom,
    Emit,
    EventKind,
    Generate,
    LocalizedEvent,
    Process,
    Receive,
    Sample,
    Send,
)
from .runs import Procedure, Run, assign_flow
from .terms import (
    App,
    Const,
    Indet,
    OperatorDecl,
    TICK,
    Term,
    TermTheory,
    Tick,
    Tup,
)

CORPUS_NAMES = ("cr_sig", "cap", "handshake")

_BLOCK_KINDS = ("theory", "network", "process", "run", "procedure", "proof")

# Event-description kinds that may open an atom in a formula.
_DESC_KINDS = frozenset(
    {"nu", "send", "recv", "emit", "samp", "assign", "cmp", "write", "custom"}
)

# Hole sorts for every axiom schema, used to parse step bindings.
_SCHEMA_HOLE_SORTS: dict[str, dict[str, str]] = {
    "orig.m": {"t": "term", "at": "loc"},
    "orig.s": {"t": "term", "at": "loc"},
    "fresh.1": {"x": "term", "trigger": "desc"},
    "fresh.2": {"x": "term", "trigger": "desc"},
    "auch.m.1": {"channel": "name", "t": "term"},
    "auch.m.2": {"channel": "name", "t": "term"},
    "auch.p.1": {"channel": "name", "t": "term"},
    "auch.p.2": {"channel": "name", "t": "term"},
    "cog": {"at": "loc", "event": "desc"},
    "cr": {"P": "loc", "Q": "loc", "x": "term", "c": "term", "r": "term"},
}
assert set(_SCHEMA_HOLE_SORTS) == set(SCHEMAS), "schema table out of sync"

# Inverse of the event-representation tagging, for the rep(...) sugar.
_REP_KIND_BY_TAG = {
    "ev.send": "send",
    "ev.receive": "recv",
    "ev.emit": "emit",
    "ev.sample": "samp",
    "ev.generate": "nu",
    "ev.assign": "assign",
    "ev.compare": "cmp",
}


# -- tokens --------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"(?P<ws>[ \t\r]+)"
    r"|(?P<comment>#[^\n]*)"
    r"|(?P<nl>\n)"
    r"|(?P<int>\d+)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*(?:\.[A-Za-z0-9_]+)*)"
    r"|(?P<punct>->|=>|==|[{}()\[\],:;=~/.\-])"
)


@dataclass(frozen=True)
class Token:
    kind: str  # "ident" | "int" | "punct" | "nl" | "eof"
    value: str
    span: Span


def _tokenize(text: str) -> list[Token]:
    out: list[Token] = []
    pos, line, bol = 0, 1, 0
    depth = 0  # parens/brackets suppress newline tokens
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            span = Span(pos, pos + 1, line, pos - bol + 1)
            raise AnpSyntaxError(f"unexpected character {text[pos]!r}", span)
        kind = m.lastgroup
        value = m.group()
        span = Span(m.start(), m.end(), line, m.start() - bol + 1)
        pos = m.end()
        if kind == "nl":
            line += 1
            bol = pos
            if depth == 0 and out and out[-1].kind != "nl":
                out.append(Token("nl", value, span))
            continue
        if kind in ("ws", "comment"):
            continue
        if kind == "punct":
            if value in "([":
                depth += 1
            elif value in ")]":
                depth = max(0, depth - 1)
        out.append(Token(kind, value, span))
    end = Span(len(text), len(text), line, len(text) - bol + 1)
    out.append(Token("eof", "", end))
    return out


# -- parsed document -------------------------------------------------------------

@dataclass
class TheoryBlock:
    """Statements of a theory block in authored order: ("op", OperatorDecl),
    ("nonce", [names]), or ("rewrite", (lhs, rhs)). Statement order is kept
    because nonce declarations mint indeterminates in reading order."""
    name: str
    items: list[tuple[str, object]] = field(default_factory=list)


@dataclass
class ProcessLayout:
    """Statements of a process block in authored order: ("vars", [names]),
    ("strand", (location, [points])), or ("order", [points]). Kept so a
    re-rendered document mints its indeterminates in the same sequence."""
    items: list[tuple[str, object]] = field(default_factory=list)


@dataclass
class SpecDocument:
    theory: TermTheory
    nonces: dict[str, Indet]
    theory_blocks: dict[str, TheoryBlock]
    networks: dict[str, ActorNetwork]
    processes: dict[str, Process]
    runs: dict[str, Run]
    procedures: dict[str, Procedure]
    proofs: dict[str, Derivation]
    layouts: dict[str, ProcessLayout]
    order: list[tuple[str, str]]

    def procedure_of(self, proof: Derivation) -> Procedure:
        try:
            return self.procedures[proof.procedure_name]
        except KeyError:
            raise UnresolvedReference(
                f"proof {proof.name} names procedure {proof.procedure_name}, "
                f"which this document does not define"
            ) from None


# -- name scopes -----------------------------------------------------------------

@dataclass
class _Scope:
    """Sort bookkeeping for one naming context (a process, axiom, or proof).

    `pending` holds quantified names whose sort (term vs location) is decided
    by first use; commitments are permanent for the rest of the scope.
    """
    env: dict[str, Term]
    locs: set[str]
    pending: set[str] = field(default_factory=set)
    committed_terms: dict[str, Indet] = field(default_factory=dict)
    committed_locs: list[str] = field(default_factory=list)


class _Parser:
    def __init__(self, text: str) -> None:
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self._uid = 0  # parser-minted indeterminates count downwards

        self.operators: dict[str, OperatorDecl] = {}
        self.rewrites: list[tuple[Term, Term]] = []
        self.nonces: dict[str, Indet] = {}
        self.theory_blocks: dict[str, TheoryBlock] = {}
        self.networks: dict[str, ActorNetwork] = {}
        self.processes: dict[str, Process] = {}
        self.layouts: dict[str, ProcessLayout] = {}
        self.process_envs: dict[str, dict[str, Term]] = {}
        self.runs: dict[str, Run] = {}
        self.procedures: dict[str, Procedure] = {}
        self.proofs: dict[str, Derivation] = {}
        self.order: list[tuple[str, str]] = []

    # -- token helpers --

    def _peek(self, offset: int = 0) -> Token:
        i = min(self.pos + offset, len(self.tokens) - 1)
        return self.tokens[i]

    def _next(self) -> Token:
        tok = self.tokens[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def _at_punct(self, value: str) -> bool:
        tok = self._peek()
        return tok.kind == "punct" and tok.value == value

    def _at_ident(self, value: str | None = None) -> bool:
        tok = self._peek()
        return tok.kind == "ident" and (value is None or tok.value == value)

    def _fail(self, message: str, tok: Token | None = None) -> None:
        tok = tok or self._peek()
        raise AnpSyntaxError(message, tok.span)

    def _expect_punct(self, value: str) -> Token:
        if not self._at_punct(value):
            self._fail(f"expected {value!r}, found {self._peek().value!r}")
        return self._next()

    def _expect_ident(self, value: str | None = None) -> Token:
        tok = self._peek()
        if tok.kind != "ident" or (value is not None and tok.value != value):
            wanted = value or "a name"
            self._fail(f"expected {wanted}, found {tok.value!r}")
        return self._next()

    def _expect_int(self) -> int:
        tok = self._peek()
        if tok.kind != "int":
            self._fail(f"expected a number, found {tok.value!r}")
        self._next()
        return int(tok.value)

    def _skip_nl(self) -> None:
        while self._peek().kind == "nl" or self._at_punct(";"):
            self._next()

    def _end_stmt(self) -> None:
        tok = self._peek()
        if tok.kind in ("nl", "eof") or tok.value in (";", "}"):
            self._skip_nl()
            return
        self._fail(f"expected end of statement, found {tok.value!r}")

    def _name_list(self) -> list[str]:
        names = [self._expect_ident().value]
        while self._at_punct(","):
            self._next()
            names.append(self._expect_ident().value)
        return names

    def _mint(self, name: str) -> Indet:
        self._uid -= 1
        return Indet(self._uid, name)

    def _rescue(self, err: AnprocError, tok: Token) -> AnprocError:
        """Attach a source span to a model-level error raised mid-parse."""
        if err.span is None:
            err.span = tok.span
        return err

    # -- names with sorts --

    def _term_name(self, sc: _Scope, tok: Token) -> Term:
        name = tok.value
        if name in sc.env:
            return sc.env[name]
        if name in sc.pending:
            sc.pending.discard(name)
            i = self._mint(name)
            sc.env[name] = i
            sc.committed_terms[name] = i
            return i
        if name in sc.locs:
            self._fail(f"{name} names a location but is used as a term", tok)
        return Const(name)

    def _loc_name(self, sc: _Scope, tok: Token) -> str:
        name = tok.value
        if name in sc.locs:
            return name
        if name in sc.pending:
            sc.pending.discard(name)
            sc.locs.add(name)
            sc.committed_locs.append(name)
            return name
        if name in sc.env:
            self._fail(f"{name} names a term but is used as a location", tok)
        self._fail(f"unknown location {name}", tok)
        raise AssertionError  # unreachable

    # -- terms --

    def _parse_term(self, sc: _Scope) -> Term:
        tok = self._peek()
        if self._at_punct("("):
            self._next()
            items = [self._parse_term(sc)]
            while self._at_punct(","):
                self._next()
                items.append(self._parse_term(sc))
            self._expect_punct(")")
            return items[0] if len(items) == 1 else Tup(tuple(items))
        if tok.kind != "ident":
            self._fail(f"expected a term, found {tok.value!r}")
        if tok.value == "tick":
            self._next()
            return TICK
        if tok.value == "rep":
            return self._parse_rep(sc)
        if self._peek(1).kind == "punct" and self._peek(1).value == "(":
            op = self.operators.get(tok.value)
            if op is None:
                self._fail(f"unknown operator {tok.value}", tok)
            self._next()
            self._next()  # "("
            args: list[Term] = []
            if not self._at_punct(")"):
                args.append(self._parse_term(sc))
                while self._at_punct(","):
                    self._next()
                    args.append(self._parse_term(sc))
            closing = self._peek()
            self._expect_punct(")")
            if len(args) != op.arity:
                self._fail(
                    f"operator {op.name} takes {op.arity} arguments, got {len(args)}",
                    closing,
                )
            return App(op, tuple(args))
        self._next()
        return self._term_name(sc, tok)

    def _parse_rep(self, sc: _Scope) -> Term:
        self._expect_ident("rep")
        self._expect_punct("(")
        kind_tok = self._expect_ident()
        kind = kind_tok.value
        if kind not in _REP_KIND_BY_TAG.values():
            self._fail(f"rep(...) cannot describe a {kind} event", kind_tok)
        self._expect_ident("at")
        loc = self._loc_name(sc, self._expect_ident())
        self._expect_punct(")")
        return desc_representation(EventDesc(kind, None, loc))

    # -- event descriptions (formula side) --

    def _parse_desc(self, sc: _Scope) -> EventDesc:
        kind_tok = self._expect_ident()
        kind = kind_tok.value
        if kind not in _DESC_KINDS:
            self._fail(f"{kind} is not an event kind", kind_tok)
        if kind == "custom":
            self._expect_punct("[")
            tag = self._expect_ident().value
            self._expect_punct("]")
            kind = f"custom:{tag}"
        tilde = False
        if self._at_punct("~"):
            self._next()
            tilde = True
        payload: Term | None = None
        if not self._at_ident("at"):
            payload = self._parse_term(sc)
        self._expect_ident("at")
        loc = self._loc_name(sc, self._expect_ident())
        return EventDesc(kind, payload, loc, tilde=tilde)

    # -- formulas --

    def _parse_formula(self, sc: _Scope) -> Formula:
        left = self._parse_disj(sc)
        if self._at_punct("=>"):
            self._next()
            right = self._parse_formula(sc)
            return FImp(left, right)
        return left

    def _parse_disj(self, sc: _Scope) -> Formula:
        parts = [self._parse_conj(sc)]
        while self._at_ident("or"):
            self._next()
            parts.append(self._parse_conj(sc))
        return parts[0] if len(parts) == 1 else FOr(tuple(parts))

    def _parse_conj(self, sc: _Scope) -> Formula:
        parts = [self._parse_chain(sc)]
        while self._at_ident("and"):
            self._next()
            parts.append(self._parse_chain(sc))
        return parts[0] if len(parts) == 1 else FAnd(tuple(parts))

    def _parse_chain(self, sc: _Scope) -> Formula:
        start = self._peek()
        first = self._parse_element(sc)
        if not self._at_punct("->"):
            return self._element_formula(first)
        elements = [first]
        while self._at_punct("->"):
            self._next()
            elements.append(self._parse_element(sc))
        links: list[EventDesc | OriginatesAt] = []
        for tag, value in elements:
            if tag == "formula":
                self._fail(
                    "only event descriptions can be linked with ->", start
                )
            links.append(value)
        return chain(links)

    @staticmethod
    def _element_formula(element: tuple[str, object]) -> Formula:
        tag, value = element
        if tag == "formula":
            return value  # type: ignore[return-value]
        if tag == "orig":
            return FAtom(value)  # type: ignore[arg-type]
        return FAtom(Happened(value))  # type: ignore[arg-type]

    def _parse_element(self, sc: _Scope) -> tuple[str, object]:
        tok = self._peek()
        if self._at_punct("("):
            self._next()
            f = self._parse_formula(sc)
            self._expect_punct(")")
            return ("formula", f)
        if tok.kind != "ident":
            self._fail(f"expected a formula, found {tok.value!r}")
        if tok.value == "exists":
            self._next()
            names = self._name_list()
            self._expect_punct(".")
            for n in names:
                if n in sc.env or n in sc.locs or n in sc.pending:
                    self._fail(f"exists {n}: the name is already in scope", tok)
                sc.pending.add(n)
            body = self._parse_formula(sc)
            for n in reversed(names):
                if n in sc.pending:
                    sc.pending.discard(n)
                    self._fail(f"exists {n}: the variable is never used", tok)
                body = FExists(n, body)
            return ("formula", body)
        if tok.value == "orig":
            self._next()
            d = self._parse_desc(sc)
            if d.payload is None:
                self._fail("an origination atom needs a payload term", tok)
            return ("orig", OriginatesAt(d.payload, d))
        if tok.value == "holds":
            self._next()
            t = self._parse_term(sc)
            self._expect_ident("at")
            loc = self._loc_name(sc, self._expect_ident())
            return ("formula", FAtom(LocalHistoryFact("holds", t, loc)))
        if tok.value == "lhf":
            self._next()
            tag = self._expect_ident().value
            payload: Term | None = None
            if self._at_punct("("):
                self._next()
                payload = self._parse_term(sc)
                self._expect_punct(")")
            self._expect_ident("at")
            loc = self._loc_name(sc, self._expect_ident())
            return ("formula", FAtom(LocalHistoryFact(tag, payload, loc)))
        if tok.value == "controlled":
            self._next()
            ref = self._expect_ident().value
            self._expect_ident("by")
            principal = self._expect_ident().value
            return ("formula", FAtom(ControlledBy(ref, principal)))
        if tok.value in _DESC_KINDS:
            return ("desc", self._parse_desc(sc))
        # configuration equality, term equality, or a syntax error
        nxt, third, fourth = self._peek(1), self._peek(2), self._peek(3)
        if (
            nxt.kind == "punct"
            and nxt.value == "=="
            and third.kind == "ident"
            and not (fourth.kind == "punct" and fourth.value == "(")
        ):
            a, b = tok.value, third.value
            # a committed location on either side makes this a configuration
            # equality; a pending (quantified) name on the other side is then
            # committed to the location sort too.
            if a in sc.locs or b in sc.locs:
                self._next()
                left = self._loc_name(sc, tok)
                self._next()
                right = self._loc_name(sc, self._next())
                return ("formula", FAtom(ConfigEq(left, right)))
        t = self._parse_term(sc)
        if self._at_punct("=="):
            self._next()
            t2 = self._parse_term(sc)
            return ("formula", FAtom(EqualTerms(t, t2)))
        self._fail(f"expected == after a bare term, found {self._peek().value!r}")
        raise AssertionError  # unreachable

    # -- blocks --

    def parse_document(self) -> SpecDocument:
        self._skip_nl()
        while self._peek().kind != "eof":
            tok = self._expect_ident()
            match tok.value:
                case "theory":
                    self._parse_theory()
                case "network":
                    self._parse_network()
                case "process":
                    self._parse_process()
                case "run":
                    self._parse_run()
                case "procedure":
                    self._parse_procedure()
                case "proof":
                    self._parse_proof()
                case other:
                    self._fail(
                        f"expected one of {', '.join(_BLOCK_KINDS)}; found {other!r}",
                        tok,
                    )
            self._skip_nl()
        return SpecDocument(
            theory=TermTheory(dict(self.operators), tuple(self.rewrites)),
            nonces=self.nonces,
            theory_blocks=self.theory_blocks,
            networks=self.networks,
            processes=self.processes,
            runs=self.runs,
            procedures=self.procedures,
            proofs=self.proofs,
            layouts=self.layouts,
            order=self.order,
        )

    def _open_block(self, kind: str, existing: Mapping[str, object]) -> str:
        tok = self._expect_ident()
        name = tok.value
        if name in existing:
            raise DuplicateName(f"{kind} {name} is defined twice", tok.span)
        return name

    def _enter_body(self) -> None:
        self._expect_punct("{")
        self._skip_nl()

    def _at_body_end(self) -> bool:
        return self._at_punct("}") or self._peek().kind == "eof"

    def _close_body(self) -> None:
        self._expect_punct("}")

    # theory -------------------------------------------------------------

    def _parse_theory(self) -> None:
        name = self._open_block("theory", self.theory_blocks)
        block = TheoryBlock(name)
        sc = _Scope(env=self.nonces, locs=set())
        self._enter_body()
        while not self._at_body_end():
            kw = self._expect_ident()
            match kw.value:
                case "op":
                    block.items.append(("op", self._parse_op_decl()))
                case "nonce":
                    names = self._name_list()
                    for tok_name in names:
                        if tok_name in self.nonces:
                            raise DuplicateName(
                                f"nonce {tok_name} is declared twice", kw.span
                            )
                        self.nonces[tok_name] = self._mint(tok_name)
                    block.items.append(("nonce", names))
                case "rewrite":
                    lhs = self._parse_term(sc)
                    self._expect_punct("->")
                    rhs = self._parse_term(sc)
                    self.rewrites.append((lhs, rhs))
                    block.items.append(("rewrite", (lhs, rhs)))
                case other:
                    self._fail(
                        f"expected op, nonce, or rewrite; found {other!r}", kw
                    )
            self._end_stmt()
        self._close_body()
        self.theory_blocks[name] = block
        self.order.append(("theory", name))

    def _parse_op_decl(self) -> OperatorDecl:
        name_tok = self._expect_ident()
        name = name_tok.value
        if name in self.operators:
            raise DuplicateName(f"operator {name} is declared twice", name_tok.span)
        self._expect_punct("/")
        arity = self._expect_int()
        trans_tok = self._expect_ident()
        match trans_tok.value:
            case "opaque":
                transparency = (False,) * arity
            case "transparent":
                transparency = (True,) * arity
            case "mix":
                self._expect_punct("(")
                flags: list[bool] = []
                while True:
                    f = self._expect_ident()
                    if f.value not in ("o", "t"):
                        self._fail("mix(...) flags are o or t", f)
                    flags.append(f.value == "t")
                    if self._at_punct(","):
                        self._next()
                        continue
                    break
                self._expect_punct(")")
                if len(flags) != arity:
                    self._fail(
                        f"operator {name} has arity {arity} but "
                        f"{len(flags)} mix flags",
                        trans_tok,
                    )
                transparency = tuple(flags)
            case other:
                self._fail(
                    f"expected opaque, transparent, or mix(...); found {other!r}",
                    trans_tok,
                )
        tags: list[str] = []
        if self._at_punct("["):
            self._next()
            while True:
                tag = self._expect_ident().value
                if self._at_punct(":"):
                    self._next()
                    tag = f"{tag}:{self._expect_ident().value}"
                tags.append(tag)
                if self._at_punct(","):
                    self._next()
                    continue
                break
            self._expect_punct("]")
        try:
            decl = OperatorDecl(name, arity, transparency, frozenset(tags))
        except AnprocError as e:
            raise self._rescue(e, name_tok)
        self.operators[name] = decl
        return decl

    # network -------------------------------------------------------------

    def _parse_network(self) -> None:
        name = self._open_block("network", self.networks)
        principals: list[str] = []
        nodes: list[str] = []
        types: list[str] = []
        configs: dict[str, frozenset[str]] = {}
        channels: list[Channel] = []
        channel_ids: set[str] = set()
        control: dict[str, str] = {}
        self._enter_body()
        while not self._at_body_end():
            kw = self._expect_ident()
            match kw.value:
                case "principals":
                    principals.extend(self._name_list())
                case "nodes":
                    nodes.extend(self._name_list())
                case "types":
                    types.extend(self._name_list())
                case "config":
                    cname_tok = self._expect_ident()
                    if cname_tok.value in configs:
                        raise DuplicateName(
                            f"config {cname_tok.value} is declared twice",
                            cname_tok.span,
                        )
                    self._expect_punct("=")
                    self._expect_punct("{")
                    members = self._name_list()
                    self._expect_punct("}")
                    configs[cname_tok.value] = frozenset(members)
                case "channel":
                    cid_tok = self._expect_ident()
                    if cid_tok.value in channel_ids:
                        raise DuplicateName(
                            f"channel {cid_tok.value} is declared twice",
                            cid_tok.span,
                        )
                    self._expect_punct(":")
                    entry = self._expect_ident().value
                    self._expect_punct("->")
                    exit_ = self._expect_ident().value
                    ctype = self._expect_ident().value
                    flags: list[str] = []
                    if self._at_punct("["):
                        self._next()
                        flags = self._name_list()
                        self._expect_punct("]")
                    channel_ids.add(cid_tok.value)
                    channels.append(
                        Channel(cid_tok.value, entry, exit_, ctype, frozenset(flags))
                    )
                case "control":
                    principal = self._expect_ident().value
                    self._expect_punct(":")
                    for ref in self._name_list():
                        if ref in control:
                            raise DuplicateName(
                                f"{ref} is assigned two controllers", kw.span
                            )
                        control[ref] = principal
                case other:
                    self._fail(
                        "expected principals, nodes, types, config, channel, "
                        f"or control; found {other!r}",
                        kw,
                    )
            self._end_stmt()
        self._close_body()
        self.networks[name] = ActorNetwork(
            name=name,
            principals=frozenset(principals),
            nodes=frozenset(nodes),
            configurations=configs,
            channels=tuple(channels),
            channel_types=frozenset(types),
            control=control,
        )
        self.order.append(("network", name))

    # process -------------------------------------------------------------

    def _network_scope_locs(self, net: ActorNetwork) -> set[str]:
        return set(net.nodes) | set(net.configurations) | {ATTACKER}

    def _parse_process(self) -> None:
        name = self._open_block("process", self.processes)
        self._expect_ident("on")
        net_tok = self._expect_ident()
        net = self.networks.get(net_tok.value)
        if net is None:
            raise UnresolvedReference(
                f"process {name} is on undefined network {net_tok.value}",
                net_tok.span,
            )
        proc = Process(name, net)
        layout = ProcessLayout()
        sc = _Scope(env=dict(self.nonces), locs=self._network_scope_locs(net))
        self._enter_body()
        while not self._at_body_end():
            kw = self._expect_ident()
            match kw.value:
                case "vars":
                    names = self._name_list()
                    for vname in names:
                        if vname in sc.env:
                            raise DuplicateName(
                                f"variable {vname} is declared twice", kw.span
                            )
                        sc.env[vname] = self._mint(vname)
                    layout.items.append(("vars", names))
                    self._end_stmt()
                case "strand":
                    loc_tok = self._expect_ident()
                    # The attacker name is always in formula scope, but a
                    # strand may live there only when the network genuinely
                    # declares such a node (as exported exploration runs do).
                    if loc_tok.value not in sc.locs or (
                        loc_tok.value == ATTACKER and not net.is_declared(ATTACKER)
                    ):
                        self._fail(
                            f"unknown location {loc_tok.value}", loc_tok
                        )
                    points: list[str] = []
                    self._enter_body()
                    while not self._at_body_end():
                        pt_tok = self._expect_ident()
                        self._expect_punct(":")
                        kind = self._parse_event(sc, pt_tok)
                        ev = LocalizedEvent(pt_tok.value, kind, loc_tok.value)
                        try:
                            proc.add_event(ev)
                        except AnprocError as e:
                            raise self._rescue(e, pt_tok)
                        points.append(pt_tok.value)
                        self._end_stmt()
                    self._close_body()
                    layout.items.append(("strand", (loc_tok.value, points)))
                    self._end_stmt()
                case "order":
                    first = self._expect_ident()
                    pts = [first.value]
                    while self._at_punct("->"):
                        self._next()
                        pts.append(self._expect_ident().value)
                    if len(pts) < 2:
                        self._fail("order needs at least two points", first)
                    try:
                        proc.add_chain(*pts)
                    except AnprocError as e:
                        raise self._rescue(e, first)
                    layout.items.append(("order", pts))
                    self._end_stmt()
                case other:
                    self._fail(
                        f"expected vars, strand, or order; found {other!r}", kw
                    )
        self._close_body()
        self.processes[name] = proc
        self.layouts[name] = layout
        self.process_envs[name] = sc.env
        self.order.append(("process", name))

    def _parse_event(self, sc: _Scope, pt_tok: Token) -> EventKind:
        kw = self._expect_ident()
        match kw.value:
            case "nu":
                n_tok = self._expect_ident()
                if n_tok.value in sc.env:
                    raise DuplicateName(
                        f"nu {n_tok.value}: the name is already in scope",
                        n_tok.span,
                    )
                i = self._mint(n_tok.value)
                sc.env[n_tok.value] = i
                return Generate(i)
            case "send":
                return Send(self._parse_term(sc))
            case "emit":
                return Emit(self._parse_term(sc))
            case "recv":
                payload = self._parse_term(sc)
                guard: Term | None = None
                if self._at_ident("if"):
                    self._next()
                    guard = self._parse_term(sc)
                return Receive(payload, guard)
            case "samp":
                if self._stmt_done():
                    return Sample(None)
                return Sample(self._parse_term(sc))
            case "assign":
                store = self._expect_ident().value
                self._expect_punct("=")
                return Assign(store, self._parse_term(sc))
            case "cmp":
                left = self._parse_term(sc)
                self._expect_punct(",")
                right = self._parse_term(sc)
                return Compare(left, right)
            case "custom":
                self._expect_punct("[")
                tag = self._expect_ident().value
                self._expect_punct("]")
                if self._stmt_done():
                    return Custom(tag, None)
                return Custom(tag, self._parse_term(sc))
            case other:
                self._fail(f"{other!r} is not an event kind", kw)
                raise AssertionError  # unreachable

    def _stmt_done(self) -> bool:
        tok = self._peek()
        return tok.kind in ("nl", "eof") or tok.value in (";", "}")

    # run -------------------------------------------------------------

    def _parse_run(self) -> None:
        name = self._open_block("run", self.runs)
        self._expect_ident("on")
        proc_tok = self._expect_ident()
        proc = self.processes.get(proc_tok.value)
        if proc is None:
            raise UnresolvedReference(
                f"run {name} is on undefined process {proc_tok.value}",
                proc_tok.span,
            )
        run = Run(name, proc)
        self._enter_body()
        while not self._at_body_end():
            kw = self._expect_ident("flow")
            writer = self._expect_ident().value
            self._expect_punct("-")
            chan_tok = self._expect_ident()
            self._expect_punct("->")
            reader = self._expect_ident().value
            channel = next(
                (c for c in proc.network.channels if c.id == chan_tok.value), None
            )
            if channel is None:
                raise UnresolvedReference(
                    f"no channel {chan_tok.value} in network {proc.network.name}",
                    chan_tok.span,
                )
            try:
                assign_flow(run, reader, writer, channel)
            except AnprocError as e:
                raise self._rescue(e, kw)
            self._end_stmt()
        self._close_body()
        self.runs[name] = run
        self.order.append(("run", name))

    # procedure -------------------------------------------------------------

    def _parse_procedure(self) -> None:
        name = self._open_block("procedure", self.procedures)
        proc: Process | None = None
        secure: list[Run] = []
        axioms: dict[str, ProcedureAxiom] = {}
        self._enter_body()
        while not self._at_body_end():
            kw = self._expect_ident()
            match kw.value:
                case "process":
                    if proc is not None:
                        self._fail("the procedure already names a process", kw)
                    ptok = self._expect_ident()
                    proc = self.processes.get(ptok.value)
                    if proc is None:
                        raise UnresolvedReference(
                            f"undefined process {ptok.value}", ptok.span
                        )
                case "secure":
                    self._expect_punct("-")
                    self._expect_ident("run")
                    rtok = self._expect_ident()
                    run = self.runs.get(rtok.value)
                    if run is None:
                        raise UnresolvedReference(
                            f"undefined run {rtok.value}", rtok.span
                        )
                    secure.append(run)
                case "axiom":
                    if proc is None:
                        self._fail("state the process before any axiom", kw)
                    atok = self._expect_ident()
                    if atok.value in axioms:
                        raise DuplicateName(
                            f"axiom {atok.value} is declared twice", atok.span
                        )
                    quant: list[str] = []
                    if self._at_ident("forall"):
                        self._next()
                        quant = self._name_list()
                    self._expect_punct(":")
                    sc = _Scope(
                        env=dict(self.nonces),
                        locs=self._network_scope_locs(proc.network),
                        pending=set(quant),
                    )
                    formula = self._parse_formula(sc)
                    for q in quant:
                        if q in sc.pending:
                            self._fail(
                                f"quantified variable {q} is never used", atok
                            )
                    term_vars = tuple(
                        sc.committed_terms[q] for q in quant if q in sc.committed_terms
                    )
                    loc_vars = tuple(q for q in quant if q in sc.committed_locs)
                    axioms[atok.value] = ProcedureAxiom(
                        atok.value, formula, term_vars, loc_vars
                    )
                case other:
                    self._fail(
                        f"expected process, secure-run, or axiom; found {other!r}",
                        kw,
                    )
            self._end_stmt()
        self._close_body()
        if proc is None:
            raise UnresolvedReference(f"procedure {name} names no process")
        procedure = Procedure(name, proc.network, proc, axioms=tuple(axioms.values()))
        for run in secure:
            procedure.add_secure_run(run)
        self.procedures[name] = procedure
        self.order.append(("procedure", name))

    # proof -------------------------------------------------------------

    def _parse_proof(self) -> None:
        name = self._open_block("proof", self.proofs)
        self._expect_ident("for")
        principal = self._expect_ident().value
        self._expect_ident("on")
        proc_tok = self._expect_ident()
        procedure = self.procedures.get(proc_tok.value)
        if procedure is None:
            raise UnresolvedReference(
                f"proof {name} is on undefined procedure {proc_tok.value}",
                proc_tok.span,
            )
        axioms_by_name = {a.name: a for a in procedure.axioms}
        sc = _Scope(
            env=dict(self.process_envs[procedure.process.name]),
            locs=self._network_scope_locs(procedure.network),
        )
        observations: list[Formula] = []
        complete_history = False
        steps: list[Step] = []
        goal: QedClause | None = None
        self._enter_body()
        while not self._at_body_end():
            kw = self._expect_ident()
            match kw.value:
                case "assume":
                    if self._at_ident("complete") and self._peek(1).value == "history":
                        self._next()
                        self._next()
                        complete_history = True
                    else:
                        observations.append(self._parse_formula(sc))
                case "step":
                    if goal is not None:
                        self._fail("steps cannot follow the qed clause", kw)
                    index = self._expect_int()
                    self._expect_punct(":")
                    citations: tuple[str, ...] = ()
                    bindings: dict[str, object] = {}
                    if self._at_ident("given"):
                        self._next()
                    else:
                        citations = tuple(self._name_list())
                        if self._at_punct("["):
                            bindings = self._parse_bindings(
                                sc, citations, axioms_by_name
                            )
                        self._expect_ident("gives")
                    claim = self._parse_formula(sc)
                    steps.append(
                        Step(index, citations, bindings, claim, span=kw.span)
                    )
                case "qed":
                    if goal is not None:
                        self._fail("a proof has a single qed clause", kw)
                    instance_of: str | None = None
                    bindings = {}
                    if self._at_ident("instance"):
                        self._next()
                        instance_of = self._expect_ident().value
                        if self._at_punct("["):
                            bindings = self._parse_bindings(
                                sc, (instance_of,), axioms_by_name
                            )
                    self._expect_punct(":")
                    formula = self._parse_formula(sc)
                    goal = QedClause(formula, instance_of, bindings, span=kw.span)
                case other:
                    self._fail(
                        f"expected assume, step, or qed; found {other!r}", kw
                    )
            self._end_stmt()
        self._close_body()
        if goal is None:
            self._fail("the proof has no qed clause")
            raise AssertionError  # unreachable
        self.proofs[name] = Derivation(
            name=name,
            principal=principal,
            procedure_name=procedure.name,
            observations=tuple(observations),
            complete_history=complete_history,
            steps=tuple(steps),
            goal=goal,
        )
        self.order.append(("proof", name))

    def _parse_bindings(
        self,
        sc: _Scope,
        citations: tuple[str, ...],
        axioms_by_name: Mapping[str, ProcedureAxiom],
    ) -> dict[str, object]:
        sorts: dict[str, str] = {}
        for c in citations:
            if c in _SCHEMA_HOLE_SORTS:
                sorts.update(_SCHEMA_HOLE_SORTS[c])
            elif c in axioms_by_name:
                ax = axioms_by_name[c]
                for v in ax.term_vars:
                    sorts[v.name] = "term"
                for l in ax.loc_vars:
                    sorts[l] = "loc"
        out: dict[str, object] = {}
        self._expect_punct("[")
        while not self._at_punct("]"):
            key_tok = self._expect_ident()
            self._expect_punct("=")
            sort = sorts.get(key_tok.value) or self._guess_sort(sc)
            match sort:
                case "term":
                    out[key_tok.value] = self._parse_term(sc)
                case "loc":
                    out[key_tok.value] = self._loc_name(sc, self._expect_ident())
                case "desc":
                    out[key_tok.value] = self._parse_desc(sc)
                case _:
                    out[key_tok.value] = self._expect_ident().value
            if self._at_punct(","):
                self._next()
                continue
            break
        self._expect_punct("]")
        return out

    def _guess_sort(self, sc: _Scope) -> str:
        tok = self._peek()
        if tok.kind != "ident":
            return "term"
        if tok.value in _DESC_KINDS:
            return "desc"
        follows_call = self._peek(1).kind == "punct" and self._peek(1).value == "("
        if tok.value in sc.locs and not follows_call:
            return "loc"
        return "term"


def parse_spec(text: str) -> SpecDocument:
    """Parse a .anp document."""
    return _Parser(text).parse_document()


def load_spec(path: str | Path) -> SpecDocument:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


# -- serialization ----------------------------------------------------------------

def _term_text(t: Term) -> str:
    match t:
        case Const(name):
            return name
        case Indet(_, name):
            return name
        case Tick():
            return "tick"
        case App(op, args):
            return f"{op.name}(" + ", ".join(_term_text(a) for a in args) + ")"
        case Tup(items):
            rep = _rep_sugar(items)
            if rep is not None:
                return rep
            if len(items) < 2:
                raise ValueError(f"cannot render a {len(items)}-tuple")
            return "(" + ", ".join(_term_text(i) for i in items) + ")"
    raise ValueError(f"cannot render term {t!r}")


def _rep_sugar(items: tuple[Term, ...]) -> str | None:
    if len(items) != 3 or items[2] != TICK:
        return None
    tag, at = items[0], items[1]
    if not (isinstance(tag, Const) and isinstance(at, Const)):
        return None
    kind = _REP_KIND_BY_TAG.get(tag.name)
    if kind is None or not at.name.startswith("at."):
        return None
    return f"rep({kind} at {at.name[3:]})"


def _desc_text(d: EventDesc) -> str:
    kind = d.kind
    if kind.startswith("custom:"):
        kind = f"custom[{kind[len('custom:'):]}]"
    head = kind + ("~" if d.tilde else "")
    parts = [head]
    if d.payload is not None:
        parts.append(_term_text(d.payload))
    parts.append(f"at {d.location}")
    return " ".join(parts)


def _atom_text(a: Atom) -> str:
    match a:
        case Happened(desc):
            return _desc_text(desc)
        case OriginatesAt(term, desc):
            if desc.payload != term:
                raise ValueError("origination atom does not carry its own term")
            return "orig " + _desc_text(desc)
        case EqualTerms(left, right):
            return f"{_term_text(left)} == {_term_text(right)}"
        case ConfigEq(left, right):
            return f"{left} == {right}"
        case LocalHistoryFact("holds", payload, location):
            return f"holds {_term_text(payload)} at {location}"
        case LocalHistoryFact(tag, None, location):
            return f"lhf {tag} at {location}"
        case LocalHistoryFact(tag, payload, location):
            return f"lhf {tag}({_term_text(payload)}) at {location}"
        case ControlledBy(config, principal):
            return f"controlled {config} by {principal}"
    raise ValueError(f"cannot render a bare {type(a).__name__} atom")


def _chain_texts(f: FAnd) -> list[str] | None:
    """Recognize the output shape of chain(): k happened/origination atoms
    followed by the k-1 consecutive orderings."""
    if not all(isinstance(p, FAtom) for p in f.parts):
        return None
    atoms = [p.atom for p in f.parts]  # type: ignore[union-attr]
    descs: list[EventDesc] = []
    texts: list[str] = []
    k = 0
    for a in atoms:
        if isinstance(a, Happened):
            descs.append(a.desc)
            texts.append(_desc_text(a.desc))
        elif isinstance(a, OriginatesAt):
            if a.desc.payload != a.term:
                return None
            descs.append(a.desc)
            texts.append("orig " + _desc_text(a.desc))
        else:
            break
        k += 1
    if k < 2 or len(atoms) != 2 * k - 1:
        return None
    for i, a in enumerate(atoms[k:]):
        if not isinstance(a, Before):
            return None
        if a.first != descs[i] or a.second != descs[i + 1]:
            return None
    return texts


_LVL_IMP, _LVL_OR, _LVL_AND, _LVL_ATOM = 0, 1, 2, 3


def _formula_text(f: Formula, level: int = _LVL_IMP) -> str:
    match f:
        case FImp(premise, conclusion):
            text = (
                f"{_formula_text(premise, _LVL_OR)} => "
                f"{_formula_text(conclusion, _LVL_IMP)}"
            )
            needs = level > _LVL_IMP
        case FExists(var, body):
            names = [var]
            while isinstance(body, FExists):
                names.append(body.var)
                body = body.body
            text = f"exists {', '.join(names)}. {_formula_text(body, _LVL_IMP)}"
            needs = level > _LVL_IMP
        case FOr(parts):
            text = " or ".join(_formula_text(p, _LVL_AND) for p in parts)
            needs = level > _LVL_OR
        case FAnd(parts):
            links = _chain_texts(f)
            if links is not None:
                return " -> ".join(links)
            text = " and ".join(_formula_text(p, _LVL_ATOM) for p in parts)
            needs = level > _LVL_AND
        case FAtom(atom):
            return _atom_text(atom)
        case FNot(atom):
            raise ValueError("negations are engine-internal and cannot be rendered")
        case _:
            raise ValueError(f"cannot render formula {f!r}")
    return f"({text})" if needs else text


def _event_text(kind: EventKind) -> str:
    match kind:
        case Generate(indet):
            return f"nu {indet.name}"
        case Send(payload):
            return f"send {_term_text(payload)}"
        case Emit(payload):
            return f"emit {_term_text(payload)}"
        case Receive(payload, guard):
            base = f"recv {_term_text(payload)}"
            return base if guard is None else f"{base} if {_term_text(guard)}"
        case Sample(payload):
            return "samp" if payload is None else f"samp {_term_text(payload)}"
        case Assign(store, payload):
            return f"assign {store} = {_term_text(payload)}"
        case Compare(left, right):
            return f"cmp {_term_text(left)}, {_term_text(right)}"
        case Custom(tag, payload):
            base = f"custom[{tag}]"
            return base if payload is None else f"{base} {_term_text(payload)}"
    raise ValueError(f"cannot render event kind {kind!r}")


def _op_decl_text(d: OperatorDecl) -> str:
    if not d.transparency or not any(d.transparency):
        shape = "opaque"
    elif all(d.transparency):
        shape = "transparent"
    else:
        shape = "mix(" + ", ".join("t" if b else "o" for b in d.transparency) + ")"
    tags = f" [{', '.join(sorted(d.tags))}]" if d.tags else ""
    return f"op {d.name}/{d.arity} {shape}{tags}"


def _binding_value_text(value: object) -> str:
    if isinstance(value, EventDesc):
        return _desc_text(value)
    if isinstance(value, (Const, Indet, Tup, App, Tick)):
        return _term_text(value)
    return str(value)


def _bindings_text(bindings: Mapping[str, object]) -> str:
    inner = ", ".join(f"{k} = {_binding_value_text(v)}" for k, v in bindings.items())
    return f"[{inner}]"


def _emit_theory(out: list[str], block: TheoryBlock) -> None:
    out.append(f"theory {block.name} {{")
    for kind, payload in block.items:
        match kind:
            case "op":
                out.append(f"  {_op_decl_text(payload)}")
            case "nonce":
                out.append(f"  nonce {', '.join(payload)}")
            case "rewrite":
                lhs, rhs = payload
                out.append(f"  rewrite {_term_text(lhs)} -> {_term_text(rhs)}")
    out.append("}")


def _emit_network(out: list[str], net: ActorNetwork) -> None:
    out.append(f"network {net.name} {{")
    if net.principals:
        out.append(f"  principals {', '.join(sorted(net.principals))}")
    if net.nodes:
        out.append(f"  nodes {', '.join(sorted(net.nodes))}")
    if net.channel_types:
        out.append(f"  types {', '.join(sorted(net.channel_types))}")
    for cname, members in net.configurations.items():
        out.append(f"  config {cname} = {{ {', '.join(sorted(members))} }}")
    for ch in net.channels:
        flags = f" [{', '.join(sorted(ch.auth_flags))}]" if ch.auth_flags else ""
        out.append(f"  channel {ch.id}: {ch.entry} -> {ch.exit} {ch.type}{flags}")
    by_principal: dict[str, list[str]] = {}
    for ref, principal in net.control.items():
        by_principal.setdefault(principal, []).append(ref)
    for principal in sorted(by_principal):
        refs = ", ".join(sorted(by_principal[principal]))
        out.append(f"  control {principal}: {refs}")
    out.append("}")


def _emit_process(out: list[str], proc: Process, layout: ProcessLayout) -> None:
    out.append(f"process {proc.name} on {proc.network.name} {{")
    for kind, payload in layout.items:
        match kind:
            case "vars":
                out.append(f"  vars {', '.join(payload)}")
            case "strand":
                loc, points = payload
                out.append(f"  strand {loc} {{")
                for p in points:
                    out.append(f"    {p}: {_event_text(proc[p].kind)}")
                out.append("  }")
            case "order":
                out.append(f"  order {' -> '.join(payload)}")
    out.append("}")


def _emit_run(out: list[str], run: Run) -> None:
    out.append(f"run {run.name} on {run.process.name} {{")
    for flow in run.assignment.values():
        out.append(f"  flow {flow.writer} -{flow.channel.id}-> {flow.reader}")
    out.append("}")


def _emit_procedure(out: list[str], procedure: Procedure) -> None:
    out.append(f"procedure {procedure.name} {{")
    out.append(f"  process {procedure.process.name}")
    for rname in procedure.secure_runs:
        out.append(f"  secure-run {rname}")
    for ax in procedure.axioms:
        names = [v.name for v in ax.term_vars] + list(ax.loc_vars)
        quant = f" forall {', '.join(names)}" if names else ""
        out.append(f"  axiom {ax.name}{quant}: {_formula_text(ax.formula)}")
    out.append("}")


def _emit_proof(out: list[str], proof: Derivation) -> None:
    out.append(
        f"proof {proof.name} for {proof.principal} on {proof.procedure_name} {{"
    )
    for obs in proof.observations:
        out.append(f"  assume {_formula_text(obs)}")
    if proof.complete_history:
        out.append("  assume complete history")
    for step in proof.steps:
        if not step.citations:
            out.append(f"  step {step.index}: given {_formula_text(step.claim)}")
            continue
        cites = ", ".join(step.citations)
        binds = f" {_bindings_text(step.bindings)}" if step.bindings else ""
        out.append(
            f"  step {step.index}: {cites}{binds} gives {_formula_text(step.claim)}"
        )
    goal = proof.goal
    if goal.instance_of is None:
        out.append(f"  qed: {_formula_text(goal.formula)}")
    else:
        binds = f" {_bindings_text(goal.bindings)}" if goal.bindings else ""
        out.append(
            f"  qed instance {goal.instance_of}{binds}: {_formula_text(goal.formula)}"
        )
    out.append("}")


def serialize(doc: SpecDocument) -> str:
    """Render a document in canonical form; parsing it back yields an equal
    document (same indeterminate identities included)."""
    out: list[str] = []
    for kind, name in doc.order:
        if out:
            out.append("")
        match kind:
            case "theory":
                _emit_theory(out, doc.theory_blocks[name])
            case "network":
                _emit_network(out, doc.networks[name])
            case "process":
                _emit_process(out, doc.processes[name], doc.layouts[name])
            case "run":
                _emit_run(out, doc.runs[name])
            case "procedure":
                _emit_procedure(out, doc.procedures[name])
            case "proof":
                _emit_proof(out, doc.proofs[name])
            case other:
                raise ValueError(f"unknown block kind {other!r}")
    return "\n".join(out) + "\n"


def summary(doc: SpecDocument) -> str:
    """One-line inventory of a document's contents."""

    def plural(n: int, noun: str, nouns: str | None = None) -> str:
        return f"{n} {noun if n == 1 else (nouns or noun + 's')}"

    parts: list[str] = []
    if len(doc.networks) == 1:
        net = next(iter(doc.networks.values()))
        parts.append(
            f"1 network ({plural(len(net.nodes), 'node')}, "
            f"{plural(len(net.channels), 'channel')})"
        )
    elif doc.networks:
        parts.append(plural(len(doc.networks), "network"))
    if doc.processes:
        parts.append(plural(len(doc.processes), "process", "processes"))
    if doc.runs:
        parts.append(plural(len(doc.runs), "run"))
    n_axioms = sum(len(p.axioms) for p in doc.procedures.values())
    if n_axioms:
        parts.append(plural(n_axioms, "procedure axiom"))
    if doc.proofs:
        parts.append(plural(len(doc.proofs), "proof"))
    return ", ".join(parts) if parts else "empty document"


# -- bundled corpus ----------------------------------------------------------------

def corpus_path(name: str) -> Path:
    if name not in CORPUS_NAMES:
        raise UnresolvedReference(
            f"no bundled document named {name}; available: {', '.join(CORPUS_NAMES)}"
        )
    return Path(str(resources.files("anproc") / "corpus" / f"{name}.anp"))


def load_corpus(name: str) -> SpecDocument:
    return parse_spec(corpus_path(name).read_text(encoding="utf-8"))

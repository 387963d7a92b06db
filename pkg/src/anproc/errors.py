"""Error types shared across the toolkit.

Every error that can point at a source location carries an optional span
(start offset, end offset, line, column) so diagnostics stay precise.
"""
from __future__ import annotations


class Span:
    """Half-open region of an input text, tracked as offsets plus line/column."""

    __slots__ = ("start", "end", "line", "col")

    def __init__(self, start: int, end: int, line: int, col: int):
        self.start = start
        self.end = end
        self.line = line
        self.col = col

    def __repr__(self) -> str:
        return f"Span({self.line}:{self.col})"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Span):
            return NotImplemented
        return (self.start, self.end) == (other.start, other.end)

    def __hash__(self) -> int:
        return hash((self.start, self.end))


class AnprocError(Exception):
    """Base class; `span` is set when the error points into source text."""

    def __init__(self, message: str, span: Span | None = None):
        super().__init__(message)
        self.span = span


# -- term algebra ------------------------------------------------------------

class UnknownOperator(AnprocError):
    pass


class ArityMismatch(AnprocError):
    pass


class NotATuple(AnprocError):
    pass


class IndexOutOfRange(AnprocError):
    pass


# -- network model -----------------------------------------------------------

class UnknownConfiguration(AnprocError):
    pass


# -- process model -----------------------------------------------------------

class UncontrolledActionLocation(AnprocError):
    pass


class DuplicatePoint(AnprocError):
    pass


class CycleIntroduced(AnprocError):
    pass


class SubliminalSynchronization(AnprocError):
    pass


class UnknownPoint(AnprocError):
    pass


# -- run semantics -----------------------------------------------------------

class TypeMismatch(AnprocError):
    pass


class NoFlowChannel(AnprocError):
    pass


class AlreadyAssigned(AnprocError):
    pass


class IncompleteAssignment(AnprocError):
    pass


class OrderCycle(AnprocError):
    pass


# -- logic -------------------------------------------------------------------

class MissingBinding(AnprocError):
    pass


class SideConditionViolated(AnprocError):
    pass


class UnknownPrincipal(AnprocError):
    pass


class UnjustifiedStep(AnprocError):
    def __init__(self, message: str, step_index: int | None = None, span: Span | None = None):
        super().__init__(message, span)
        self.step_index = step_index


# -- explorer ----------------------------------------------------------------

class BoundsExceeded(AnprocError):
    pass


# -- spec format -------------------------------------------------------------

class AnpSyntaxError(AnprocError):
    """Malformed input text. Named to avoid shadowing the builtin SyntaxError."""


class UnresolvedReference(AnprocError):
    pass


class DuplicateName(AnprocError):
    pass


class UnknownAxiomName(AnprocError):
    pass


# -- diagrams ----------------------------------------------------------------

class UnsoundRun(AnprocError):
    pass


class RejectedDerivation(AnprocError):
    pass

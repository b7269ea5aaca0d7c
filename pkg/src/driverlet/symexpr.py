"""Symbolic expressions over 64-bit values and the tracked values that carry them.

Expressions are immutable trees built from symbols, constants, and unary or
binary operators.  All arithmetic wraps at 64 bits and all comparisons are
unsigned.  The textual form is prefix notation, e.g. ``(AND blkid (NOT 7))``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

MASK64 = (1 << 64) - 1

UNARY_OPS = ("NOT", "NEG")
ARITH_OPS = ("ADD", "SUB", "MUL", "DIV", "MOD", "SHL", "SHR", "AND", "OR", "XOR")
COMPARE_OPS = ("EQ", "NE", "LT", "LE", "GT", "GE")
BINARY_OPS = ARITH_OPS + COMPARE_OPS

# negation of a comparison, and the comparison seen from the other operand
NEGATED = {"EQ": "NE", "NE": "EQ", "LT": "GE", "GE": "LT", "LE": "GT", "GT": "LE"}
SWAPPED = {"EQ": "EQ", "NE": "NE", "LT": "GT", "GT": "LT", "LE": "GE", "GE": "LE"}


class EvalError(Exception):
    pass


class UnboundSymbol(EvalError):
    def __init__(self, name: str):
        super().__init__(f"unbound symbol {name!r}")
        self.name = name


class DivideByZero(EvalError):
    pass


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, pos: int = 0):
        super().__init__(f"{message} at column {pos + 1}")
        self.pos = pos


@dataclass(frozen=True)
class Sym:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Const:
    value: int

    def __post_init__(self):
        if not 0 <= self.value <= MASK64:
            raise ValueError(f"constant {self.value} outside 64-bit range")

    def __str__(self) -> str:
        return format_int(self.value)


@dataclass(frozen=True)
class Unary:
    op: str
    child: "SymExpr"

    def __post_init__(self):
        if self.op not in UNARY_OPS:
            raise ValueError(f"unknown unary operator {self.op}")

    def __str__(self) -> str:
        return f"({self.op} {self.child})"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "SymExpr"
    right: "SymExpr"

    def __post_init__(self):
        if self.op not in BINARY_OPS:
            raise ValueError(f"unknown binary operator {self.op}")

    def __str__(self) -> str:
        return f"({self.op} {self.left} {self.right})"


SymExpr = Union[Sym, Const, Unary, Binary]


def format_int(value: int) -> str:
    """Canonical integer spelling: decimal below ten, lowercase hex otherwise."""
    return str(value) if value < 10 else hex(value)


def _apply(op: str, a: int, b: int) -> int:
    if op == "ADD":
        return (a + b) & MASK64
    if op == "SUB":
        return (a - b) & MASK64
    if op == "MUL":
        return (a * b) & MASK64
    if op == "DIV":
        if b == 0:
            raise DivideByZero("division by zero")
        return a // b
    if op == "MOD":
        if b == 0:
            raise DivideByZero("modulo by zero")
        return a % b
    if op == "SHL":
        return (a << b) & MASK64 if b < 64 else 0
    if op == "SHR":
        return a >> b if b < 64 else 0
    if op == "AND":
        return a & b
    if op == "OR":
        return a | b
    if op == "XOR":
        return a ^ b
    if op == "EQ":
        return int(a == b)
    if op == "NE":
        return int(a != b)
    if op == "LT":
        return int(a < b)
    if op == "LE":
        return int(a <= b)
    if op == "GT":
        return int(a > b)
    if op == "GE":
        return int(a >= b)
    raise ValueError(op)


def evaluate(e: SymExpr, bindings: Mapping[str, int]) -> int:
    """Evaluate ``e`` with every symbol looked up in ``bindings``."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Sym):
        try:
            return bindings[e.name] & MASK64
        except KeyError:
            raise UnboundSymbol(e.name) from None
    if isinstance(e, Unary):
        v = evaluate(e.child, bindings)
        return (~v) & MASK64 if e.op == "NOT" else (-v) & MASK64
    return _apply(e.op, evaluate(e.left, bindings), evaluate(e.right, bindings))


def symbols(e: SymExpr) -> frozenset[str]:
    if isinstance(e, Sym):
        return frozenset((e.name,))
    if isinstance(e, Const):
        return frozenset()
    if isinstance(e, Unary):
        return symbols(e.child)
    return symbols(e.left) | symbols(e.right)


def constants(e: SymExpr) -> list[int]:
    if isinstance(e, Const):
        return [e.value]
    if isinstance(e, Sym):
        return []
    if isinstance(e, Unary):
        return constants(e.child)
    return constants(e.left) + constants(e.right)


def substitute(e: SymExpr, mapping: Mapping[str, SymExpr]) -> SymExpr:
    if isinstance(e, Sym):
        return mapping.get(e.name, e)
    if isinstance(e, Const):
        return e
    if isinstance(e, Unary):
        return Unary(e.op, substitute(e.child, mapping))
    return Binary(e.op, substitute(e.left, mapping), substitute(e.right, mapping))


def as_expr(value: "int | SymExpr") -> SymExpr:
    return Const(value & MASK64) if isinstance(value, int) else value


# -- parsing ---------------------------------------------------------------

_TOKEN = re.compile(r"\s*(?:(\()|(\))|([A-Za-z_][A-Za-z0-9_]*)|(0[xX][0-9a-fA-F]+|[0-9]+))")


def parse_expr(text: str) -> SymExpr:
    """Parse prefix notation.  The whole string must be consumed."""
    expr, pos = _parse_at(text, 0)
    if text[pos:].strip():
        raise ExprSyntaxError("trailing input", pos)
    return expr


def _next_token(text: str, pos: int):
    m = _TOKEN.match(text, pos)
    if not m:
        if pos >= len(text) or not text[pos:].strip():
            raise ExprSyntaxError("unexpected end of expression", pos)
        raise ExprSyntaxError(f"unexpected character {text[pos]!r}", pos)
    return m, m.end()


def _parse_at(text: str, pos: int) -> tuple[SymExpr, int]:
    m, end = _next_token(text, pos)
    lparen, rparen, ident, number = m.groups()
    if number is not None:
        value = int(number, 0)
        if value > MASK64:
            raise ExprSyntaxError("constant exceeds 64 bits", m.start(4))
        return Const(value), end
    if ident is not None:
        return Sym(ident), end
    if rparen is not None:
        raise ExprSyntaxError("unexpected ')'", m.start(2))
    m, end = _next_token(text, end)
    op = m.group(3)
    if op is None or (op not in UNARY_OPS and op not in BINARY_OPS):
        raise ExprSyntaxError("expected operator", m.start())
    args = []
    while True:
        m2 = _TOKEN.match(text, end)
        if m2 and m2.group(2) is not None:
            end = m2.end()
            break
        arg, end = _parse_at(text, end)
        args.append(arg)
    if op in UNARY_OPS:
        if len(args) != 1:
            raise ExprSyntaxError(f"{op} takes one operand", pos)
        return Unary(op, args[0]), end
    if len(args) != 2:
        raise ExprSyntaxError(f"{op} takes two operands", pos)
    return Binary(op, args[0], args[1]), end


# -- tracked values ----------------------------------------------------------

class UntracedBranch(TypeError):
    """A tainted value was used for control flow outside ``hal_branch``."""


# x op c == x for these constants; used to keep expressions free of no-op nodes
_IDENTITY = {"ADD": 0, "SUB": 0, "OR": 0, "XOR": 0, "SHL": 0, "SHR": 0, "MUL": 1, "DIV": 1}
_COMMUTATIVE = ("ADD", "MUL", "AND", "OR", "XOR")


def _split(other) -> tuple[int, SymExpr | None]:
    if isinstance(other, Tracked):
        return other.concrete, other.expr
    if isinstance(other, bool) or not isinstance(other, int):
        raise TypeError(f"cannot combine Tracked with {type(other).__name__}")
    return other & MASK64, None


@dataclass(frozen=True)
class Tracked:
    """A concrete 64-bit value plus the expression it was derived from.

    Operators propagate taint: the result's expression composes the operand
    expressions.  An untainted value has ``expr=None``.  Tainted values refuse
    implicit truth testing so drivers cannot branch on them untraced.
    """

    concrete: int
    expr: SymExpr | None = None

    def __post_init__(self):
        object.__setattr__(self, "concrete", self.concrete & MASK64)

    @classmethod
    def literal(cls, value: int) -> "Tracked":
        """A constant that keeps its own node so later operators show up in
        expressions, e.g. ``blkid & ~Tracked.literal(7)``."""
        return cls(value, Const(value & MASK64))

    @property
    def tainted(self) -> bool:
        """True when the value depends on at least one symbol."""
        return self.expr is not None and bool(symbols(self.expr))

    def as_expr(self) -> SymExpr:
        return self.expr if self.expr is not None else Const(self.concrete)

    def _binop(self, op: str, other, reverse: bool = False) -> "Tracked":
        oc, oe = _split(other)
        a, b = (oc, self.concrete) if reverse else (self.concrete, oc)
        value = _apply(op, a, b)
        if self.expr is None and oe is None:
            return Tracked(value)
        if oe is None and _IDENTITY.get(op) == oc and (not reverse or op in _COMMUTATIVE):
            return self
        se, oe2 = self.as_expr(), (oe if oe is not None else Const(oc))
        left, right = (oe2, se) if reverse else (se, oe2)
        return Tracked(value, Binary(op, left, right))

    def __add__(self, o):
        return self._binop("ADD", o)

    def __radd__(self, o):
        return self._binop("ADD", o, True)

    def __sub__(self, o):
        return self._binop("SUB", o)

    def __rsub__(self, o):
        return self._binop("SUB", o, True)

    def __mul__(self, o):
        return self._binop("MUL", o)

    def __rmul__(self, o):
        return self._binop("MUL", o, True)

    def __floordiv__(self, o):
        return self._binop("DIV", o)

    def __mod__(self, o):
        return self._binop("MOD", o)

    def __lshift__(self, o):
        return self._binop("SHL", o)

    def __rshift__(self, o):
        return self._binop("SHR", o)

    def __and__(self, o):
        return self._binop("AND", o)

    def __rand__(self, o):
        return self._binop("AND", o, True)

    def __or__(self, o):
        return self._binop("OR", o)

    def __ror__(self, o):
        return self._binop("OR", o, True)

    def __xor__(self, o):
        return self._binop("XOR", o)

    def __invert__(self):
        v = (~self.concrete) & MASK64
        return Tracked(v, None if self.expr is None else Unary("NOT", self.expr))

    def __neg__(self):
        v = (-self.concrete) & MASK64
        return Tracked(v, None if self.expr is None else Unary("NEG", self.expr))

    def __lt__(self, o):
        return self._binop("LT", o)

    def __le__(self, o):
        return self._binop("LE", o)

    def __gt__(self, o):
        return self._binop("GT", o)

    def __ge__(self, o):
        return self._binop("GE", o)

    def eq(self, o) -> "Tracked":
        return self._binop("EQ", o)

    def ne(self, o) -> "Tracked":
        return self._binop("NE", o)

    def __bool__(self):
        if self.tainted:
            raise UntracedBranch(f"branch on tainted value {self.expr}; use hal_branch")
        return self.concrete != 0

    def __index__(self):
        if self.tainted:
            raise UntracedBranch(f"tainted value {self.expr} used as an index")
        return self.concrete

    def __int__(self):
        return self.concrete

    def __repr__(self):
        if self.expr is None:
            return f"Tracked({self.concrete:#x})"
        return f"Tracked({self.concrete:#x}, {self.expr})"

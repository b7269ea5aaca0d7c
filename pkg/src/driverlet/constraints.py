"""The finite constraint language for template parameters and input events.

Comparison operands are normally integers.  An operand may also be an
expression over earlier-bound symbols (``"=dev_in_5"``), which lets a device
input be pinned to another input, e.g. a confirmed transfer size that has to
match the size the device announced earlier.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Mapping, Union

from .symexpr import MASK64, Const, ExprSyntaxError, SymExpr, evaluate, parse_expr, symbols

Operand = Union[int, SymExpr]

WORD_ANY_HI = (1 << 32) - 1


def _operand_value(v: Operand, bindings: Mapping[str, int] | None) -> int:
    if isinstance(v, int):
        return v
    return evaluate(v, bindings or {})


def _fmt_operand(v: Operand, hexa: bool) -> str:
    if isinstance(v, int):
        return hex(v) if hexa else str(v)
    if isinstance(v, Const):
        return hex(v.value) if hexa else str(v.value)
    return str(v)


@dataclass(frozen=True)
class Eq:
    v: Operand

    def __str__(self):
        return "=" + _fmt_operand(self.v, True)


@dataclass(frozen=True)
class Ne:
    v: Operand

    def __str__(self):
        return "!=" + _fmt_operand(self.v, True)


@dataclass(frozen=True)
class Le:
    v: Operand

    def __str__(self):
        return "<=" + _fmt_operand(self.v, False)


@dataclass(frozen=True)
class Lt:
    v: Operand

    def __str__(self):
        return "<" + _fmt_operand(self.v, False)


@dataclass(frozen=True)
class Ge:
    v: Operand

    def __str__(self):
        return ">=" + _fmt_operand(self.v, False)


@dataclass(frozen=True)
class Gt:
    v: Operand

    def __str__(self):
        return ">" + _fmt_operand(self.v, False)


@dataclass(frozen=True)
class Mask:
    m: int
    v: int

    def __str__(self):
        return f"&{self.m:#x}={self.v:#x}"


@dataclass(frozen=True)
class Range:
    lo: int
    hi: int

    def __str__(self):
        return f"in[{self.lo},{self.hi}]"


@dataclass(frozen=True)
class AlignedTo:
    k: int

    def __post_init__(self):
        if self.k <= 0 or self.k & (self.k - 1):
            raise ValueError(f"alignment {self.k} is not a power of two")

    def __str__(self):
        return f"align{self.k}"


@dataclass(frozen=True)
class All:
    items: tuple = ()

    def __init__(self, items=()):
        object.__setattr__(self, "items", tuple(items))

    def __str__(self):
        return "all(" + ",".join(str(c) for c in self.items) + ")"


@dataclass(frozen=True)
class AnyOf:
    items: tuple = ()

    def __init__(self, items=()):
        object.__setattr__(self, "items", tuple(items))

    def __str__(self):
        return "any(" + ",".join(str(c) for c in self.items) + ")"


Constraint = Union[Eq, Ne, Le, Lt, Ge, Gt, Mask, Range, AlignedTo, All, AnyOf]

ANY_WORD = Range(0, WORD_ANY_HI)
COMPARISONS = {"EQ": Eq, "NE": Ne, "LE": Le, "LT": Lt, "GE": Ge, "GT": Gt}


def satisfies(c: Constraint, x: int, bindings: Mapping[str, int] | None = None) -> bool:
    """Total predicate: does ``x`` satisfy ``c``?

    ``bindings`` resolve symbolic operands; an unbound operand makes the
    constraint unsatisfied rather than raising.
    """
    try:
        return _sat(c, x & MASK64, bindings)
    except Exception:
        return False


def _sat(c, x, b) -> bool:
    if isinstance(c, Eq):
        return x == _operand_value(c.v, b)
    if isinstance(c, Ne):
        return x != _operand_value(c.v, b)
    if isinstance(c, Le):
        return x <= _operand_value(c.v, b)
    if isinstance(c, Lt):
        return x < _operand_value(c.v, b)
    if isinstance(c, Ge):
        return x >= _operand_value(c.v, b)
    if isinstance(c, Gt):
        return x > _operand_value(c.v, b)
    if isinstance(c, Mask):
        return x & c.m == c.v
    if isinstance(c, Range):
        return c.lo <= x <= c.hi
    if isinstance(c, AlignedTo):
        return x % c.k == 0
    if isinstance(c, All):
        return all(_sat(i, x, b) for i in c.items)
    if isinstance(c, AnyOf):
        return any(_sat(i, x, b) for i in c.items)
    raise TypeError(f"not a constraint: {c!r}")


def constraint_symbols(c: Constraint) -> frozenset[str]:
    if isinstance(c, (All, AnyOf)):
        out = frozenset()
        for i in c.items:
            out |= constraint_symbols(i)
        return out
    v = getattr(c, "v", None)
    if v is not None and not isinstance(v, int):
        return symbols(v)
    return frozenset()


def conjoin(items) -> Constraint:
    """Conjunction with duplicates removed, order of first appearance kept."""
    flat: list = []
    for c in items:
        for i in (c.items if isinstance(c, All) else (c,)):
            if i not in flat:
                flat.append(i)
    return All(flat)


def disjoin(a: Constraint, b: Constraint) -> Constraint:
    if a == b:
        return a
    opts: list = []
    for c in (a, b):
        for i in (c.items if isinstance(c, AnyOf) else (c,)):
            if i not in opts:
                opts.append(i)
    return opts[0] if len(opts) == 1 else AnyOf(opts)


# -- surface syntax ------------------------------------------------------------

class ConstraintSyntaxError(ValueError):
    def __init__(self, message: str, pos: int = 0):
        super().__init__(f"{message} at column {pos + 1}")
        self.pos = pos


def _split_top(text: str) -> list[str]:
    parts, depth, start = [], 0, 0
    for i, ch in enumerate(text):
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif ch == "," and depth == 0:
            parts.append(text[start:i])
            start = i + 1
    parts.append(text[start:])
    return parts


def _parse_operand(text: str, pos: int) -> Operand:
    t = text.strip()
    if not t:
        raise ConstraintSyntaxError("missing operand", pos)
    if t[0].isdigit():
        try:
            value = int(t, 0)
        except ValueError:
            raise ConstraintSyntaxError(f"bad number {t!r}", pos) from None
        if value > MASK64:
            raise ConstraintSyntaxError("operand exceeds 64 bits", pos)
        return value
    try:
        return parse_expr(t)
    except ExprSyntaxError as exc:
        raise ConstraintSyntaxError(f"bad expression: {exc}", pos + exc.pos) from None


def _int(text: str, pos: int) -> int:
    try:
        value = int(text.strip(), 0)
    except ValueError:
        raise ConstraintSyntaxError(f"bad number {text!r}", pos) from None
    if not 0 <= value <= MASK64:
        raise ConstraintSyntaxError("number outside 64-bit range", pos)
    return value


def parse_constraint(text: str, pos: int = 0) -> Constraint:
    """Parse the unquoted surface form (``=0x1``, ``<=8``, ``all(...)``...)."""
    t = text
    if t.startswith(("all(", "any(")):
        if not t.endswith(")"):
            raise ConstraintSyntaxError("unterminated group", pos + len(t))
        inner = t[4:-1]
        items, off = [], pos + 4
        if inner:
            for part in _split_top(inner):
                items.append(parse_constraint(part, off))
                off += len(part) + 1
        return All(items) if t.startswith("all") else AnyOf(items)
    if t.startswith("in[") and t.endswith("]"):
        bounds = t[3:-1].split(",")
        if len(bounds) != 2:
            raise ConstraintSyntaxError("range needs two bounds", pos)
        lo, hi = _int(bounds[0], pos + 3), _int(bounds[1], pos + 3)
        if lo > hi:
            raise ConstraintSyntaxError("empty range", pos)
        return Range(lo, hi)
    if t.startswith("align"):
        k = _int(t[5:], pos + 5)
        try:
            return AlignedTo(k)
        except ValueError as exc:
            raise ConstraintSyntaxError(str(exc), pos) from None
    if t.startswith("&"):
        body = t[1:].split("=")
        if len(body) != 2:
            raise ConstraintSyntaxError("mask needs '&m=v'", pos)
        return Mask(_int(body[0], pos + 1), _int(body[1], pos + 1))
    for prefix, cls in (("!=", Ne), ("<=", Le), (">=", Ge), ("=", Eq), ("<", Lt), (">", Gt)):
        if t.startswith(prefix):
            return cls(_parse_operand(t[len(prefix):], pos + len(prefix)))
    raise ConstraintSyntaxError(f"unknown constraint {t!r}", pos)


# -- regions: normalized views used for coverage, sampling and overlap ------------

@dataclass
class Region:
    """Conjunction of integer-operand atoms folded to bounds plus side tests."""

    lo: int = 0
    hi: int = MASK64
    align: int = 1
    mask: int = 0
    value: int = 0
    excluded: frozenset = frozenset()
    empty: bool = False

    def contains(self, x: int) -> bool:
        return (not self.empty and self.lo <= x <= self.hi and x % self.align == 0
                and x & self.mask == self.value and x not in self.excluded)

    def first(self, limit: int = 1 << 16):
        if self.empty:
            return None
        x = -(-self.lo // self.align) * self.align
        for _ in range(limit):
            if x > self.hi:
                return None
            y = (x & ~self.mask) | self.value
            if y >= x and self.contains(y):
                return y
            x += self.align
        return None

    def describe(self) -> str:
        if self.empty:
            return "{}"
        if self.lo == self.hi:
            return "{%d}" % self.lo
        base = f"[{self.lo},{self.hi}]"
        if self.align > 1:
            base = f"aligned-{self.align} in {base}"
        if self.mask:
            base += f" with &{self.mask:#x}={self.value:#x}"
        if self.excluded:
            base += " except {" + ",".join(str(v) for v in sorted(self.excluded)) + "}"
        return base


def _region_of(atoms) -> Region:
    r = Region()
    for c in atoms:
        if isinstance(c, Range):
            r.lo, r.hi = max(r.lo, c.lo), min(r.hi, c.hi)
        elif isinstance(c, (Eq, Ne, Le, Lt, Ge, Gt)):
            if not isinstance(c.v, int):
                continue
            v = c.v
            if isinstance(c, Eq):
                r.lo, r.hi = max(r.lo, v), min(r.hi, v)
            elif isinstance(c, Ne):
                r.excluded = r.excluded | {v}
            elif isinstance(c, Le):
                r.hi = min(r.hi, v)
            elif isinstance(c, Lt):
                if v == 0:
                    r.empty = True
                r.hi = min(r.hi, v - 1)
            elif isinstance(c, Ge):
                r.lo = max(r.lo, v)
            else:
                r.lo = max(r.lo, v + 1)
        elif isinstance(c, AlignedTo):
            r.align = r.align * c.k // math.gcd(r.align, c.k)
        elif isinstance(c, Mask):
            if (r.mask & c.m) and (r.value & c.m & r.mask) != (c.v & c.m & r.mask):
                r.empty = True
            r.mask |= c.m
            r.value = (r.value & ~c.m) | (c.v & c.m)
    # trim excluded endpoints so singleton regions stay singletons
    while not r.empty and r.lo in r.excluded and r.lo <= r.hi:
        r.lo += 1
    while not r.empty and r.hi in r.excluded and r.lo <= r.hi:
        r.hi -= 1
    r.excluded = frozenset(v for v in r.excluded if r.lo < v < r.hi)
    if r.lo > r.hi:
        r.empty = True
    return r


def _dnf(c: Constraint) -> list[list]:
    if isinstance(c, AnyOf):
        return [atoms for i in c.items for atoms in _dnf(i)]
    if isinstance(c, All):
        out: list[list] = [[]]
        for i in c.items:
            out = [a + b for a in out for b in _dnf(i)]
        return out
    return [[c]]


def regions(c: Constraint) -> list[Region]:
    """Disjunctive normal form of ``c`` as a list of non-empty regions."""
    out = []
    for atoms in _dnf(c):
        r = _region_of(atoms)
        if not r.empty:
            out.append(r)
    return out


def _subsumes(big: Region, small: Region) -> bool:
    """Conservative containment test used to tidy descriptions."""
    if big.mask or big.excluded:
        return False
    return (big.lo <= small.lo and small.hi <= big.hi
            and (small.align % big.align == 0 or small.lo == small.hi and small.lo % big.align == 0))


def describe(c: Constraint) -> str:
    regs = regions(c)
    if not regs:
        return "{}"
    kept = []
    for i, r in enumerate(regs):
        dominated = any(j != i and _subsumes(o, r) and not (_subsumes(r, o) and j > i)
                        for j, o in enumerate(regs))
        if not dominated:
            kept.append(r)
    # merge singleton points into one set literal
    points = sorted({r.lo for r in kept if r.lo == r.hi})
    others = [r.describe() for r in kept if r.lo != r.hi]
    out = []
    if points:
        out.append("{" + ",".join(str(p) for p in points) + "}")
    out.extend(dict.fromkeys(others))
    return " ∪ ".join(out)


def find_witness(c: Constraint, limit: int = 1 << 16):
    """Smallest value found satisfying ``c`` (bounded search), or None."""
    best = None
    for r in regions(c):
        x = r.first(limit)
        if x is not None and satisfies(c, x) and (best is None or x < best):
            best = x
    return best


def intersects(a: Constraint, b: Constraint) -> bool:
    return find_witness(All([a, b])) is not None


def sample(c: Constraint, rng: random.Random, tries: int = 64):
    """Draw a random value satisfying ``c``; None if none could be found."""
    regs = regions(c)
    if not regs:
        return None
    for _ in range(tries):
        r = rng.choice(regs)
        lo = -(-r.lo // r.align)
        hi = r.hi // r.align
        if lo > hi:
            continue
        x = rng.randint(lo, hi) * r.align
        x = (x & ~r.mask) | r.value
        if satisfies(c, x):
            return x
    return find_witness(c)

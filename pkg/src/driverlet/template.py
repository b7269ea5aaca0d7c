"""Interaction templates: data model, canonical text form, signing, merging, coverage.

A template file looks like::

    template RD_8 entry=blk_rw(rw,blkid,blkcnt,data_addr) device=mockblk reset=BLK_RESET
    param rw scalar "all(in[0,1],!=0x1)"
    event write(SDARG, (AND blkid (NOT 7)), 4) src=blk.py:65
    event read(SDHSTS, "=0x1", 4) -> dev_in_0 src=blk.py:53
    snapshot 0 00000000...
    mac 3f1c...

The MAC covers every byte before the ``mac`` line.
"""

from __future__ import annotations

import hashlib
import hmac
import re
from dataclasses import dataclass, field, replace

from .constraints import (
    Constraint, ConstraintSyntaxError, constraint_symbols, describe, disjoin, intersects,
    parse_constraint, satisfies,
)
from .symexpr import Const, ExprSyntaxError, SymExpr, format_int, parse_expr, symbols

EVENT_KINDS = ("READ", "WRITE", "MEM_READ", "MEM_WRITE", "POLL", "DELAY", "DMA_ALLOC",
               "WAIT_IRQ", "LOAD_MEM", "COPY", "ENV")
ROLES = ("scalar", "data_in_addr", "data_out_addr")
ENV_SOURCES = ("rand", "time")
MAC_HEX = 64


class TemplateError(Exception):
    pass


class ParseError(TemplateError):
    def __init__(self, message: str, line: int, column: int = 1):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ScopeError(TemplateError):
    pass


@dataclass(frozen=True)
class TemplateParam:
    name: str
    role: str
    constraint: Constraint

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown parameter role {self.role!r}")


@dataclass(frozen=True)
class Event:
    """One replay action.  Which fields matter depends on ``kind``:

    READ/WRITE/POLL use ``reg``; MEM_READ/MEM_WRITE use ``region`` and
    ``offset``; COPY moves ``value`` bytes from ``src_region+src_offset`` to
    ``region+offset``; DMA_ALLOC's ``value`` is the size; POLL, WAIT_IRQ and
    DELAY use ``timeout`` as their step count; LOAD_MEM names a snapshot and
    the ``fixups`` patched into it.
    """

    kind: str
    reg: str = ""
    region: str = ""
    offset: SymExpr | None = None
    src_region: str = ""
    src_offset: SymExpr | None = None
    value: SymExpr | None = None
    constraint: Constraint | None = None
    width: int = 4
    timeout: int = 0
    line: int = 0
    snapshot: int = -1
    fixups: tuple = ()
    env: str = ""
    binds: str | None = None
    source_loc: str = ""

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    def uses(self) -> frozenset[str]:
        out = set()
        for e in (self.offset, self.src_offset, self.value):
            if e is not None:
                out |= symbols(e)
        if self.constraint is not None:
            out |= constraint_symbols(self.constraint)
        for _, e in self.fixups:
            out |= symbols(e)
        for r in (self.region, self.src_region):
            if r:
                out.add(r)
        return frozenset(out)

    def skeleton_key(self) -> "Event":
        """The event with replay-tuning fields blanked, for structural comparison."""
        return replace(self, timeout=0) if self.kind == "POLL" else self


@dataclass
class InteractionTemplate:
    name: str
    entry_signature: str
    device_id: str
    reset_template: str
    params: list[TemplateParam] = field(default_factory=list)
    events: list[Event] = field(default_factory=list)
    snapshots: dict[int, bytes] = field(default_factory=dict)
    mac: str | None = None

    @property
    def entry(self) -> str:
        return self.entry_signature.split("(", 1)[0]

    def param(self, name: str) -> TemplateParam:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def scalar_params(self) -> list[TemplateParam]:
        return [p for p in self.params if p.role == "scalar"]

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    def accepts(self, args: dict) -> bool:
        """Every scalar parameter constraint holds for ``args``."""
        for p in self.scalar_params():
            if p.name not in args or not satisfies(p.constraint, args[p.name]):
                return False
        return True


# -- scoping -------------------------------------------------------------------

def check_scoping(t: InteractionTemplate) -> None:
    """Every symbol must be bound (param, read, alloc, env) before use."""
    names = [p.name for p in t.params]
    if len(set(names)) != len(names):
        raise ScopeError(f"{t.name}: duplicate parameter names")
    bound = set(names)
    for i, ev in enumerate(t.events):
        missing = ev.uses() - bound
        if missing:
            raise ScopeError(f"{t.name}: event {i} uses unbound {sorted(missing)}")
        if ev.kind == "LOAD_MEM" and ev.snapshot not in t.snapshots:
            raise ScopeError(f"{t.name}: event {i} loads missing snapshot {ev.snapshot}")
        if ev.binds:
            if ev.binds in bound:
                raise ScopeError(f"{t.name}: event {i} rebinds {ev.binds}")
            bound.add(ev.binds)


# -- serialization ----------------------------------------------------------------

def _q(c: Constraint) -> str:
    return f'"{c}"'


def _x(e: SymExpr | None) -> str:
    return str(e if e is not None else Const(0))


def format_event(ev: Event) -> str:
    k = ev.kind
    if k == "READ":
        body = f"read({ev.reg}, {_q(ev.constraint)}, {ev.width})"
    elif k == "WRITE":
        body = f"write({ev.reg}, {_x(ev.value)}, {ev.width})"
    elif k == "MEM_READ":
        body = f"mem_read({ev.region}, {_x(ev.offset)}, {_q(ev.constraint)}, {ev.width})"
    elif k == "MEM_WRITE":
        body = f"mem_write({ev.region}, {_x(ev.offset)}, {_x(ev.value)}, {ev.width})"
    elif k == "POLL":
        body = f"poll({ev.reg}, {_q(ev.constraint)}, {ev.timeout})"
    elif k == "DELAY":
        body = f"delay({ev.timeout})"
    elif k == "DMA_ALLOC":
        body = f"dma_alloc({_x(ev.value)})"
    elif k == "WAIT_IRQ":
        body = f"wait_irq({ev.line}, {ev.timeout})"
    elif k == "LOAD_MEM":
        fx = ", ".join(f"{format_int(o)}:{e}" for o, e in ev.fixups)
        body = f"load_mem({ev.region}, {ev.snapshot}, [{fx}])"
    elif k == "COPY":
        body = (f"copy({ev.region}, {_x(ev.offset)}, {ev.src_region}, "
                f"{_x(ev.src_offset)}, {_x(ev.value)})")
    else:
        body = f"env({ev.env})"
    if ev.binds:
        body += f" -> {ev.binds}"
    if ev.source_loc:
        body += f" src={ev.source_loc}"
    return body


def body_text(t: InteractionTemplate) -> str:
    lines = [f"template {t.name} entry={t.entry_signature} device={t.device_id} "
             f"reset={t.reset_template}"]
    lines += [f"param {p.name} {p.role} {_q(p.constraint)}" for p in t.params]
    lines += ["event " + format_event(ev) for ev in t.events]
    for sid in sorted(t.snapshots):
        data = t.snapshots[sid]
        lines.append(f"snapshot {sid} {data.hex() if data else '-'}")
    return "".join(line + "\n" for line in lines)


def serialize(t: InteractionTemplate) -> bytes:
    text = body_text(t)
    if t.mac is not None:
        text += f"mac {t.mac}\n"
    return text.encode("utf-8")


_NAME = r"[A-Za-z_][A-Za-z0-9_]*"
_HEADER = re.compile(rf"template ({_NAME}) entry=(\S+) device=({_NAME}) reset=({_NAME})$")
_SIG = re.compile(rf"{_NAME}\((?:{_NAME}(?:,{_NAME})*)?\)$")
_PARAM = re.compile(rf'param ({_NAME}) ({_NAME}) "([^"]*)"$')
_SNAP = re.compile(r"snapshot (\d+) (-|(?:[0-9a-f]{2})+)$")
_MAC = re.compile(rf"mac ([0-9a-f]{{{MAC_HEX}}})$")
_EVENT_TAIL = re.compile(rf"(?: -> ({_NAME}))?(?: src=(\S+))?$")
_INT = re.compile(r"0x[0-9a-f]+|[0-9]+$")


def _split_args(text: str, line: int, col: int) -> list[tuple[str, int]]:
    """Split on top-level commas, honouring quotes, parens and brackets."""
    out, depth, quoted, start = [], 0, False, 0
    for i, ch in enumerate(text):
        if ch == '"':
            quoted = not quoted
        elif quoted:
            continue
        elif ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
            if depth < 0:
                raise ParseError("unbalanced bracket", line, col + i)
        elif ch == "," and depth == 0:
            out.append((text[start:i], start))
            start = i + 1
    if quoted or depth:
        raise ParseError("unterminated argument list", line, col + len(text))
    out.append((text[start:], start))
    return [(a.strip(), col + s + (len(a) - len(a.lstrip()))) for a, s in out]


class _EventParser:
    def __init__(self, text: str, lineno: int, col0: int):
        self.text, self.lineno, self.col0 = text, lineno, col0

    def fail(self, msg: str, col: int):
        raise ParseError(msg, self.lineno, col)

    def parse(self) -> Event:
        m = re.match(r"([a-z_]+)\(", self.text)
        if not m:
            self.fail("expected event name", self.col0)
        name = m.group(1)
        depth, quoted, end = 0, False, None
        for i in range(m.end() - 1, len(self.text)):
            ch = self.text[i]
            if ch == '"':
                quoted = not quoted
            elif quoted:
                continue
            elif ch in "([":
                depth += 1
            elif ch in ")]":
                depth -= 1
                if depth == 0:
                    end = i
                    break
        if end is None:
            self.fail("unterminated event", self.col0 + len(self.text))
        args = _split_args(self.text[m.end():end], self.lineno, self.col0 + m.end())
        tail = _EVENT_TAIL.match(self.text, end + 1)
        if not tail:
            self.fail("malformed event suffix", self.col0 + end + 1)
        binds, src = tail.group(1), tail.group(2) or ""
        ev = self._build(name, args)
        return replace(ev, binds=binds, source_loc=src)

    def _arity(self, name, args, n):
        if len(args) != n or any(not a for a, _ in args):
            self.fail(f"{name} takes {n} arguments", self.col0)

    def _int(self, arg):
        text, col = arg
        if not _INT.match(text):
            self.fail(f"expected integer, got {text!r}", col)
        return int(text, 0)

    def _ident(self, arg):
        text, col = arg
        if not re.fullmatch(_NAME, text):
            self.fail(f"expected identifier, got {text!r}", col)
        return text

    def _expr(self, arg):
        text, col = arg
        try:
            return parse_expr(text)
        except ExprSyntaxError as e:
            self.fail(str(e), col + e.pos)

    def _constraint(self, arg):
        text, col = arg
        if len(text) < 2 or text[0] != '"' or text[-1] != '"':
            self.fail("expected quoted constraint", col)
        try:
            return parse_constraint(text[1:-1])
        except (ConstraintSyntaxError, ValueError) as e:
            self.fail(f"bad constraint: {e}", col + 1 + getattr(e, "pos", 0))

    def _fixups(self, arg):
        text, col = arg
        if not (text.startswith("[") and text.endswith("]")):
            self.fail("expected fixup list", col)
        inner = text[1:-1]
        if not inner.strip():
            return ()
        out = []
        for item, icol in _split_args(inner, self.lineno, col + 1):
            off, sep, expr = item.partition(":")
            if not sep:
                self.fail("fixup needs offset:expression", icol)
            out.append((self._int((off, icol)), self._expr((expr, icol + len(off) + 1))))
        return tuple(out)

    def _build(self, name, a) -> Event:
        if name == "read":
            self._arity(name, a, 3)
            return Event("READ", reg=self._ident(a[0]), constraint=self._constraint(a[1]),
                         width=self._int(a[2]))
        if name == "write":
            self._arity(name, a, 3)
            return Event("WRITE", reg=self._ident(a[0]), value=self._expr(a[1]),
                         width=self._int(a[2]))
        if name == "mem_read":
            self._arity(name, a, 4)
            return Event("MEM_READ", region=self._ident(a[0]), offset=self._expr(a[1]),
                         constraint=self._constraint(a[2]), width=self._int(a[3]))
        if name == "mem_write":
            self._arity(name, a, 4)
            return Event("MEM_WRITE", region=self._ident(a[0]), offset=self._expr(a[1]),
                         value=self._expr(a[2]), width=self._int(a[3]))
        if name == "poll":
            self._arity(name, a, 3)
            return Event("POLL", reg=self._ident(a[0]), constraint=self._constraint(a[1]),
                         timeout=self._int(a[2]))
        if name == "delay":
            self._arity(name, a, 1)
            return Event("DELAY", timeout=self._int(a[0]))
        if name == "dma_alloc":
            self._arity(name, a, 1)
            return Event("DMA_ALLOC", value=self._expr(a[0]))
        if name == "wait_irq":
            self._arity(name, a, 2)
            return Event("WAIT_IRQ", line=self._int(a[0]), timeout=self._int(a[1]))
        if name == "load_mem":
            self._arity(name, a, 3)
            return Event("LOAD_MEM", region=self._ident(a[0]), snapshot=self._int(a[1]),
                         fixups=self._fixups(a[2]))
        if name == "copy":
            self._arity(name, a, 5)
            return Event("COPY", region=self._ident(a[0]), offset=self._expr(a[1]),
                         src_region=self._ident(a[2]), src_offset=self._expr(a[3]),
                         value=self._expr(a[4]))
        if name == "env":
            self._arity(name, a, 1)
            src = self._ident(a[0])
            if src not in ENV_SOURCES:
                self.fail(f"unknown environment source {src!r}", a[0][1])
            return Event("ENV", env=src)
        self.fail(f"unknown event {name!r}", self.col0)


def parse(data: bytes | str) -> InteractionTemplate:
    """Parse a template file.  Raises ParseError; never returns a partial template."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    if not text.endswith("\n"):
        raise ParseError("missing final newline", text.count("\n") + 1, len(text.rsplit("\n", 1)[-1]) + 1)
    lines = text[:-1].split("\n")
    m = _HEADER.match(lines[0])
    if not m or not _SIG.match(m.group(2)):
        raise ParseError("expected template header", 1)
    t = InteractionTemplate(m.group(1), m.group(2), m.group(3), m.group(4))
    section = "param"
    for n, line in enumerate(lines[1:], start=2):
        if t.mac is not None:
            raise ParseError("content after mac line", n)
        word = line.split(" ", 1)[0]
        if word == "param":
            if section != "param":
                raise ParseError("param after events", n)
            pm = _PARAM.match(line)
            if not pm:
                raise ParseError("malformed param line", n)
            if pm.group(2) not in ROLES:
                raise ParseError(f"unknown role {pm.group(2)!r}", n, pm.start(2) + 1)
            try:
                c = parse_constraint(pm.group(3))
            except (ConstraintSyntaxError, ValueError) as e:
                raise ParseError(f"bad constraint: {e}", n, pm.start(3) + 1) from None
            t.params.append(TemplateParam(pm.group(1), pm.group(2), c))
        elif word == "event":
            if section == "snapshot":
                raise ParseError("event after snapshots", n)
            section = "event"
            try:
                t.events.append(_EventParser(line[6:], n, 7).parse())
            except ValueError as e:
                if isinstance(e, ParseError):
                    raise
                raise ParseError(str(e), n) from None
        elif word == "snapshot":
            section = "snapshot"
            sm = _SNAP.match(line)
            if not sm:
                raise ParseError("malformed snapshot line", n)
            sid = int(sm.group(1))
            if sid in t.snapshots:
                raise ParseError(f"duplicate snapshot {sid}", n)
            t.snapshots[sid] = b"" if sm.group(2) == "-" else bytes.fromhex(sm.group(2))
        elif word == "mac":
            mm = _MAC.match(line)
            if not mm:
                raise ParseError("malformed mac line", n)
            t.mac = mm.group(1)
        else:
            raise ParseError(f"unknown line kind {word!r}", n)
    try:
        check_scoping(t)
    except ScopeError as e:
        raise ParseError(str(e), len(lines)) from None
    if serialize(t) != text.encode("utf-8"):
        raise ParseError("template is not in canonical form", 1)
    return t


# -- authentication -------------------------------------------------------------

def _tag(body: bytes, key: bytes) -> str:
    return hmac.new(key, body, hashlib.sha256).hexdigest()


def sign(t: InteractionTemplate, key: bytes) -> InteractionTemplate:
    return replace(t, mac=_tag(body_text(t).encode("utf-8"), key))


def verify(t: InteractionTemplate, key: bytes) -> bool:
    if t.mac is None:
        return False
    return hmac.compare_digest(t.mac, _tag(body_text(t).encode("utf-8"), key))


def verify_bytes(data: bytes, key: bytes) -> bool:
    """Check a raw template file: the last line must be a valid mac over the rest."""
    if not data.endswith(b"\n"):
        return False
    cut = data.rfind(b"\n", 0, len(data) - 1) + 1
    last = data[cut:-1]
    if not last.startswith(b"mac ") or len(last) != 4 + MAC_HEX:
        return False
    try:
        mac = last[4:].decode("ascii")
    except UnicodeDecodeError:
        return False
    return hmac.compare_digest(mac, _tag(data[:cut], key))


def load_verified(data: bytes, key: bytes) -> InteractionTemplate:
    if not verify_bytes(data, key):
        raise TemplateError("template failed authentication")
    return parse(data)


# -- merging ------------------------------------------------------------------

def same_skeleton(a: InteractionTemplate, b: InteractionTemplate) -> bool:
    if (a.entry_signature, a.device_id, a.reset_template) != \
            (b.entry_signature, b.device_id, b.reset_template):
        return False
    if [(p.name, p.role) for p in a.params] != [(p.name, p.role) for p in b.params]:
        return False
    if len(a.events) != len(b.events) or a.snapshots != b.snapshots:
        return False
    return all(x.skeleton_key() == y.skeleton_key() for x, y in zip(a.events, b.events))


def merge(a: InteractionTemplate, b: InteractionTemplate) -> InteractionTemplate | None:
    """Fold two recordings of the same path into one template, or None.

    Parameter constraints are joined with ``any(...)``; a POLL keeps the larger
    of the two timeouts.  The result is unsigned unless it equals ``a``.
    """
    if not same_skeleton(a, b):
        return None
    params = [replace(p, constraint=disjoin(p.constraint, q.constraint))
              for p, q in zip(a.params, b.params)]
    events = [replace(x, timeout=max(x.timeout, y.timeout)) if x.kind == "POLL" else x
              for x, y in zip(a.events, b.events)]
    merged = replace(a, params=params, events=events, mac=None)
    if body_text(merged) == body_text(a):
        return a
    return merged


# -- coverage and selection sanity -------------------------------------------------

def coverage_report(templates, entry: str | None = None) -> str:
    """Per-entry, per-parameter union of the accepted input regions."""
    ts = [t for t in templates if entry is None or t.entry == entry]
    ts = [t for t in ts if t.scalar_params()]
    if not ts:
        return "no coverage\n"
    out = []
    for sig in sorted({t.entry_signature for t in ts}):
        group = sorted((t for t in ts if t.entry_signature == sig), key=lambda t: t.name)
        out.append(f"{sig}: {len(group)} template{'s' if len(group) != 1 else ''}")
        out.append("  " + _union_line(group))
        for t in group:
            parts = [f"{p.name}∈{describe(p.constraint)}" for p in t.scalar_params()]
            out.append(f"  {t.name}: " + "; ".join(parts))
    return "\n".join(out) + "\n"


def _union_line(group) -> str:
    parts = []
    for p in group[0].scalar_params():
        u = group[0].param(p.name).constraint
        for t in group[1:]:
            u = disjoin(u, t.param(p.name).constraint)
        parts.append(f"{p.name}∈{describe(u)}")
    return "; ".join(parts)


def overlaps(a: InteractionTemplate, b: InteractionTemplate) -> bool:
    """Could one invocation satisfy both templates' parameter constraints?"""
    if a.entry_signature != b.entry_signature:
        return False
    return all(intersects(p.constraint, b.param(p.name).constraint) for p in a.scalar_params())


def overlapping_pairs(templates) -> list[tuple[str, str]]:
    ts = list(templates)
    return [(x.name, y.name) for i, x in enumerate(ts) for y in ts[i + 1:] if overlaps(x, y)]

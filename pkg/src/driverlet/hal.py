"""The traced boundary between a gold driver and the world.

Drivers touch registers, shared memory, DMA allocation, IRQs, time and
randomness only through a ``HalContext``.  In ``record`` mode every value
coming in from the device, the environment or the caller is bound to a fresh
symbol and returned as a ``Tracked`` value, and every access is appended to a
``RawTrace``.  In ``plain`` mode the same calls run untraced, which is how the
differential oracle drives the gold driver.
"""

from __future__ import annotations

import os
import random
import sys
from dataclasses import dataclass, field
from typing import Iterable

from .constraints import Constraint, satisfies
from .simdev.core import MAX_DMA_ALLOC, DeviceModel, MemoryFault, OutOfMemory
from .symexpr import (
    MASK64, Binary, Const, Sym, SymExpr, Tracked, evaluate, format_int, symbols,
)

RECORD, PLAIN = "record", "plain"

PROG_BASE = 0x7000_0000_0000
PROG_STRIDE = 1 << 32
WORD = 4

KINDS = ("REG_READ", "REG_WRITE", "MEM_READ", "MEM_WRITE", "MEM_SNAPSHOT", "DMA_ALLOC",
         "RAND", "TIME", "IRQ_WAIT", "DELAY", "POLL_ENTER", "POLL_EXIT", "BRANCH", "COPY")



class HalError(Exception):
    pass


class PollTimeout(HalError):
    def __init__(self, last: int, site: str = ""):
        super().__init__(f"poll timed out at {site or '?'}; last value {last:#x}")
        self.last = last


class IrqTimeout(HalError):
    pass


class ZeroSize(HalError):
    pass


class ConsistencyError(HalError):
    """A tracked value whose expression no longer evaluates to its concrete value."""


class ExplorationTimeout(HalError):
    pass


class SkeletonMismatch(HalError):
    """Raised inside a forced run as soon as its outputs leave the base run's."""

    def __init__(self, index: int, item, allocations: int = 0):
        super().__init__(f"output {index} differs: {item!r}")
        self.index = index
        self.item = item
        self.allocations = allocations


@dataclass
class TraceEntry:
    seq: int
    kind: str
    target: str = ""
    value: int | None = None
    expr: SymExpr | None = None
    symbol: str | None = None
    offset: SymExpr | None = None
    cond: Constraint | None = None
    count: int = 0
    src: str | None = None
    src_offset: SymExpr | None = None
    data: bytes | None = None
    fixups: tuple = ()
    published: bool = False
    in_poll: bool = False
    source_loc: str = ""

    def format(self) -> str:
        parts = [str(self.seq), self.kind, self.target or "-",
                 "-" if self.value is None else format_int(self.value),
                 "-" if self.expr is None else str(self.expr)]
        extra = []
        if self.symbol:
            extra.append(f"sym={self.symbol}")
        if self.offset is not None:
            extra.append(f"off={self.offset}")
        if self.cond is not None:
            extra.append(f'cond="{self.cond}"')
        if self.count:
            extra.append(f"n={self.count}")
        if self.src:
            extra.append(f"from={self.src}")
        if self.src_offset is not None:
            extra.append(f"from_off={self.src_offset}")
        if self.data is not None:
            extra.append(f"bytes={self.data.hex()}")
        if self.fixups:
            extra.append("fix=" + ",".join(f"{o:#x}:{e}" for o, e in self.fixups))
        if self.published:
            extra.append("pub")
        if self.in_poll:
            extra.append("poll")
        return " ".join(parts + extra + [f"src={self.source_loc}"])


@dataclass
class RawTrace:
    entries: list[TraceEntry] = field(default_factory=list)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def kinds(self) -> list[str]:
        return [e.kind for e in self.entries]

    def count(self, kind: str) -> int:
        return sum(1 for e in self.entries if e.kind == kind)

    def format(self) -> str:
        return "".join(e.format() + "\n" for e in self.entries)


@dataclass
class _Region:
    sym: str | None
    kind: str  # "dma" or "prog"
    base: int
    buf: bytearray
    region_id: int | None = None
    growable: bool = False
    limit: int = 0
    published: bool = False
    tracked: bool = False
    copied: bool = False
    word_exprs: dict = field(default_factory=dict)


def caller_location() -> str:
    f = sys._getframe(1)
    here = caller_location.__code__.co_filename
    while f is not None and f.f_code.co_filename == here:
        f = f.f_back
    if f is None:
        return "?"
    return f"{os.path.basename(f.f_code.co_filename)}:{f.f_lineno}"


def _terms(e: SymExpr) -> list[SymExpr]:
    if isinstance(e, Binary) and e.op == "ADD":
        return _terms(e.left) + _terms(e.right)
    return [e]


def offset_expr(addr: SymExpr, region_sym: str) -> SymExpr:
    """Express ``addr - region_sym`` with the region symbol stripped out.

    ``(ADD (ADD dma_1 16) 4)`` becomes ``0x14``; anything that is not a sum
    containing the region symbol falls back to an explicit subtraction.
    """
    terms = _terms(addr)
    base = Sym(region_sym)
    if base not in terms:
        return Binary("SUB", addr, base)
    terms.remove(base)
    const = sum(t.value for t in terms if isinstance(t, Const)) & MASK64
    rest = [t for t in terms if not isinstance(t, Const)]
    out: SymExpr | None = None
    for t in rest:
        out = t if out is None else Binary("ADD", out, t)
    if out is None:
        return Const(const)
    return out if const == 0 else Binary("ADD", out, Const(const))


class HalContext:
    """One driver execution against one device."""

    def __init__(self, device: DeviceModel, mode: str = RECORD, *,
                 overrides: dict[int, int] | None = None, step_budget: int | None = None,
                 expect: list | None = None, env_seed: int = 0):
        if mode not in (RECORD, PLAIN):
            raise ValueError(f"unknown HAL mode {mode!r}")
        self.dev = device
        self.mode = mode
        self.recording = mode == RECORD
        self.trace = RawTrace()
        self.bindings: dict[str, int] = {}
        self.bind_order: list[str] = []
        self.symbol_kind: dict[str, str] = {}
        self.overrides = dict(overrides or {})
        self.step_budget = step_budget
        self.steps_used = 0
        self.expect = expect
        self.skeleton: list[tuple] = []
        self.allocations: list[int] = []
        self._counters: dict[str, int] = {}
        self._regions: dict[int, _Region] = {}  # by base address
        self._dev_regions: dict[int, _Region] = {}  # by device region id
        self._prog: list[_Region] = []
        self._env_rng = random.Random(env_seed)
        self._poll_depth = 0

    # -- bookkeeping ---------------------------------------------------------

    def _log(self, kind: str, **kw) -> TraceEntry | None:
        if not self.recording:
            return None
        e = TraceEntry(len(self.trace.entries), kind, source_loc=caller_location(), **kw)
        self.trace.entries.append(e)
        return e

    def _emit(self, item: tuple) -> None:
        self.skeleton.append(item)
        if self.expect is not None:
            i = len(self.skeleton) - 1
            if i >= len(self.expect) or self.expect[i] != item:
                raise SkeletonMismatch(i, item, len(self.allocations))

    def _fresh(self, prefix: str, kind: str, value: int) -> Tracked:
        if not self.recording:
            return Tracked(value)
        k = self._counters.get(prefix, 0)
        self._counters[prefix] = k + 1
        name = f"{prefix}_{k}"
        self._bind(name, value, kind)
        return Tracked(value, Sym(name))

    def _bind(self, name: str, value: int, kind: str) -> None:
        if name in self.bindings:
            raise ValueError(f"symbol {name} bound twice")
        self.bindings[name] = value & MASK64
        self.bind_order.append(name)
        self.symbol_kind[name] = kind

    def _step(self, n: int = 1) -> None:
        self.steps_used += n
        if self.step_budget is not None and self.steps_used > self.step_budget:
            raise ExplorationTimeout(f"step budget {self.step_budget} exhausted")
        self.dev.step(n)

    def _check(self, v: Tracked) -> None:
        if self.recording and v.expr is not None:
            got = evaluate(v.expr, self.bindings)
            if got != v.concrete:
                raise ConsistencyError(f"{v.expr} evaluates to {got:#x}, carries {v.concrete:#x}")

    @staticmethod
    def _tracked(v) -> Tracked:
        return v if isinstance(v, Tracked) else Tracked(int(v))

    def _value_expr(self, v: Tracked) -> SymExpr:
        return v.expr if (self.recording and v.expr is not None) else Const(v.concrete)

    def _reg_name(self, offset: int) -> str:
        return self.dev.register_names.get(offset, f"{offset:#x}")

    # -- program/parameter interface ---------------------------------------

    def param(self, name: str, value: int) -> Tracked:
        """A scalar argument of the record entry."""
        if not self.recording:
            return Tracked(value)
        self._bind(name, value, "param")
        return Tracked(value, Sym(name))

    def program_buffer(self, name: str, data: bytes = b"", *, growable: bool = False,
                       limit: int = 64 << 20) -> Tracked:
        """Caller-owned memory passed by address (an entry's data buffer)."""
        base = PROG_BASE + len(self._prog) * PROG_STRIDE
        r = _Region(name, "prog", base, bytearray(data), growable=growable, limit=limit,
                    published=True)
        self._prog.append(r)
        self._regions[base] = r
        if not self.recording:
            return Tracked(base)
        self._bind(name, base, "param")
        return Tracked(base, Sym(name))

    def program_data(self, name: str) -> bytes:
        for r in self._prog:
            if r.sym == name:
                return bytes(r.buf)
        raise KeyError(name)

    # -- address resolution ----------------------------------------------

    def _resolve(self, addr: int, length: int, writing: bool = False) -> tuple[_Region, int]:
        if addr >= PROG_BASE:
            idx = (addr - PROG_BASE) // PROG_STRIDE
            if idx < len(self._prog):
                r = self._prog[idx]
                off = addr - r.base
                end = off + length
                if end <= len(r.buf):
                    return r, off
                if writing and r.growable and end <= r.limit:
                    r.buf.extend(bytes(end - len(r.buf)))
                    return r, off
            raise MemoryFault(f"program buffer access [{addr:#x}, +{length}) out of range")
        mr, off = self.dev.mem.locate(addr, length)
        r = self._dev_regions.get(mr.region_id)
        if r is None:
            r = _Region(None, "dma", mr.base, mr.data, region_id=mr.region_id)
            self._dev_regions[mr.region_id] = r
        return r, off

    def _offset(self, a: Tracked, r: _Region, off: int) -> SymExpr:
        if not self.recording or a.expr is None or r.sym is None:
            return Const(off)
        e = offset_expr(a.expr, r.sym)
        if evaluate(e, self.bindings) != off:
            raise ConsistencyError(f"offset {e} does not evaluate to {off:#x}")
        return e

    def _publish_symbols(self, e: SymExpr | None, exclude: _Region | None = None) -> None:
        if not self.recording or e is None:
            return
        for name in sorted(symbols(e), key=self.bind_order.index):
            if self.symbol_kind.get(name) != "dma":
                continue
            r = self._by_sym(name)
            if r is not None and r is not exclude and not r.published:
                self._publish(r)

    def _by_sym(self, name: str) -> _Region | None:
        for r in self._dev_regions.values():
            if r.sym == name:
                return r
        return None

    def _publish(self, r: _Region) -> None:
        """The region's address has reached the device: freeze its contents."""
        r.published = True
        if not r.tracked or r.copied:
            return
        data = bytearray(r.buf)
        for off in r.word_exprs:
            data[off:off + WORD] = bytes(WORD)
        end = len(data)
        while end > 0 and data[end - 1] == 0:
            end -= 1
        data = bytes(data[: -(-end // WORD) * WORD])
        fixups = tuple(sorted(r.word_exprs.items()))
        self._log("MEM_SNAPSHOT", target=r.sym, data=data, fixups=fixups)
        self._emit(("LOAD_MEM", r.sym, data, fixups))

    # -- device registers -------------------------------------------------

    def hal_read_reg(self, offset: int) -> Tracked:
        value = self.dev.reg_read(offset)
        if not self.recording:
            return Tracked(value)
        k = self._counters.get("dev_in", 0)
        value = self.overrides.get(k, value)
        t = self._fresh("dev_in", "dev", value)
        self._log("REG_READ", target=self._reg_name(offset), value=value, symbol=str(t.expr))
        return t

    def hal_write_reg(self, offset: int, v) -> None:
        v = self._tracked(v)
        self._check(v)
        if self.recording:
            self._publish_symbols(v.expr)
        self.dev.reg_write(offset, v.concrete)
        if self.recording:
            e = self._value_expr(v)
            name = self._reg_name(offset)
            self._log("REG_WRITE", target=name, value=v.concrete, expr=e)
            self._emit(("WRITE", name, e))

    def hal_poll(self, offset: int, cond: Constraint, timeout_steps: int) -> Tracked:
        if timeout_steps < 1:
            raise ValueError("poll timeout must be at least one step")
        name = self._reg_name(offset)
        self._log("POLL_ENTER", target=name, cond=cond, count=timeout_steps)
        self._poll_depth += 1
        reads = 0
        while True:
            value = self.dev.reg_read(offset)
            reads += 1
            self._log("REG_READ", target=name, value=value, cond=cond, in_poll=True)
            if satisfies(cond, value):
                break
            if reads >= timeout_steps:
                raise PollTimeout(value, name)
            self._step()
        self._poll_depth -= 1
        self._log("POLL_EXIT", target=name, cond=cond, count=reads)
        return Tracked(value)

    # -- shared memory ------------------------------------------------------

    def hal_mem_read(self, addr, width: int = WORD) -> Tracked:
        a = self._tracked(addr)
        r, off = self._resolve(a.concrete, width)
        value = int.from_bytes(r.buf[off:off + width], "little")
        if not self.recording:
            return Tracked(value)
        oe = self._offset(a, r, off)
        if r.kind == "prog":
            t = self._fresh("pin", "pin", value)
        else:
            k = self._counters.get("dev_in", 0)
            value = self.overrides.get(k, value)
            t = self._fresh("dev_in", "dev", value)
        self._log("MEM_READ", target=r.sym or f"{r.base:#x}", value=value, offset=oe,
                  symbol=str(t.expr), count=width)
        return t

    def hal_mem_write(self, addr, value, width: int = WORD) -> None:
        a, v = self._tracked(addr), self._tracked(value)
        self._check(v)
        r, off = self._resolve(a.concrete, width, writing=True)
        if self.recording:
            self._publish_symbols(v.expr, exclude=r)
        r.buf[off:off + width] = (v.concrete & ((1 << (8 * width)) - 1)).to_bytes(width, "little")
        if not self.recording:
            return
        oe = self._offset(a, r, off)
        e = self._value_expr(v)
        published = r.published
        if not published:
            r.tracked = True
            if v.tainted:
                r.word_exprs[off] = v.expr
            else:
                r.word_exprs.pop(off, None)
        self._log("MEM_WRITE", target=r.sym, value=v.concrete, expr=e, offset=oe,
                  count=width, published=published)
        if published:
            self._emit(("MEM_WRITE", r.sym, oe, e))

    def hal_copy(self, dst, src, length) -> None:
        """Bulk copy between caller buffers and DMA pages (payload bytes)."""
        d, s, n = self._tracked(dst), self._tracked(src), self._tracked(length)
        self._check(n)
        size = n.concrete
        sr, so = self._resolve(s.concrete, size)
        dr, do = self._resolve(d.concrete, size, writing=True)
        dr.buf[do:do + size] = sr.buf[so:so + size]
        if not self.recording:
            return
        sr.copied = dr.copied = True
        doe, soe, ne = self._offset(d, dr, do), self._offset(s, sr, so), self._value_expr(n)
        self._log("COPY", target=dr.sym, offset=doe, src=sr.sym, src_offset=soe, expr=ne,
                  value=size)
        self._emit(("COPY", dr.sym, doe, sr.sym, soe, ne))

    # -- environment -----------------------------------------------------------

    def hal_dma_alloc(self, size) -> Tracked:
        n = self._tracked(size)
        if n.concrete == 0:
            raise ZeroSize("zero-sized DMA allocation")
        if n.concrete > MAX_DMA_ALLOC:
            raise OutOfMemory(f"DMA allocation of {n.concrete} bytes exceeds {MAX_DMA_ALLOC}")
        self._check(n)
        mr = self.dev.mem.alloc(n.concrete)
        self.allocations.append(n.concrete)
        t = self._fresh("dma", "dma", mr.base)
        r = _Region(str(t.expr) if self.recording else None, "dma", mr.base, mr.data,
                    region_id=mr.region_id)
        self._dev_regions[mr.region_id] = r
        if self.recording:
            e = self._value_expr(n)
            self._log("DMA_ALLOC", target=r.sym, value=mr.base, expr=e, symbol=r.sym)
            self._emit(("DMA_ALLOC", e))
        return t

    def hal_dma_free(self, addr) -> None:
        a = self._tracked(addr)
        mr, _ = self.dev.mem.locate(a.concrete, 0)
        self.dev.mem.free(mr.region_id)
        self._dev_regions.pop(mr.region_id, None)

    def hal_rand(self) -> Tracked:
        value = self._env_rng.getrandbits(32)
        t = self._fresh("rand", "env", value)
        self._log("RAND", value=value, symbol=str(t.expr) if t.expr else None)
        return t

    def hal_time(self) -> Tracked:
        value = self.dev.steps
        t = self._fresh("time", "env", value)
        self._log("TIME", value=value, symbol=str(t.expr) if t.expr else None)
        return t

    def hal_delay(self, steps: int) -> None:
        if steps < 1:
            raise ValueError("delay must be at least one step")
        self._step(steps)
        self._log("DELAY", count=steps)

    def hal_wait_irq(self, line: int, timeout_steps: int) -> None:
        waited = 0
        while not self.dev.take_irq(line):
            if waited >= timeout_steps:
                raise IrqTimeout(f"no IRQ on line {line} within {timeout_steps} steps")
            self._step()
            waited += 1
        self._log("IRQ_WAIT", target=str(line), count=timeout_steps, value=waited)

    # -- control flow -----------------------------------------------------------

    def hal_branch(self, cond, source_loc: str | None = None) -> bool:
        """Concrete truth of ``cond``; tainted conditions are logged for exploration."""
        if not isinstance(cond, Tracked):
            return bool(cond)
        if self.recording and cond.tainted:
            self._check(cond)
            self._log("BRANCH", value=int(cond.concrete != 0), expr=cond.expr)
            if source_loc:
                self.trace.entries[-1].source_loc = source_loc
        return cond.concrete != 0

    # -- queries ---------------------------------------------------------------

    def regions_of(self, kind: str) -> Iterable[_Region]:
        pools = self._prog if kind == "prog" else self._dev_regions.values()
        return list(pools)

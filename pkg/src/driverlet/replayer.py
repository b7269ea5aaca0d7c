"""The runtime driverlet: verify, select, instantiate and execute templates.

Execution is transactional.  Each attempt starts from a soft reset, runs the
template's events strictly in order and releases every DMA region it
allocated.  A constraint violation, poll timeout or IRQ timeout is a
divergence: the attempt is abandoned and the whole template re-runs from its
first event, up to ``max_attempts`` times.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass, field

from .constraints import Constraint, satisfies
from .hal import PROG_BASE, PROG_STRIDE
from .golddriver import DATA_IN, DATA_PARAM, ENTRIES, OUTPUT_LIMIT, SCALAR
from .simdev import DeviceModel, OutOfMemory
from .simdev.core import MAX_DMA_ALLOC
from .symexpr import EvalError, MASK64, evaluate
from .template import (
    InteractionTemplate, ParseError, TemplateError, load_verified, verify, verify_bytes,
)

OK, NO_TEMPLATE, AMBIGUOUS, DIVERGED, VERIFY_FAILED = (
    "OK", "NO_TEMPLATE", "AMBIGUOUS", "DIVERGED", "VERIFY_FAILED")
MAX_ATTEMPTS = 3
WORD_LIMIT = (1 << 32) - 1


class ReplayError(Exception):
    pass


class VerifyFailed(ReplayError):
    pass


class NoTemplate(ReplayError):
    pass


class Ambiguous(ReplayError):
    pass


class BoundsViolation(ReplayError):
    """A template tried to touch something outside its declared device surface."""


class Divergence(Exception):
    def __init__(self, event_index: int, expected, observed: int, source_loc: str, why: str = ""):
        super().__init__(f"event {event_index}: expected {expected}, got {observed:#x} {why}")
        self.event_index = event_index
        self.expected = expected
        self.observed = observed
        self.source_loc = source_loc
        self.why = why


@dataclass
class Invocation:
    entry: str
    args: dict
    data: bytes | None = None
    max_attempts: int = MAX_ATTEMPTS


@dataclass
class DivergenceRecord:
    template: str
    event_index: int
    expected: Constraint | str
    observed: int
    source_loc: str
    why: str = ""

    def format(self) -> str:
        return (f'ev={self.event_index} expect="{self.expected}" got={self.observed:#x} '
                f"src={self.source_loc}")


@dataclass
class ReplayOutcome:
    status: str
    attempts: int = 0
    divergence: DivergenceRecord | None = None
    template: str | None = None
    data: bytes = b""
    history: list[DivergenceRecord] = field(default_factory=list)
    allocations: list[int] = field(default_factory=list)
    bindings: dict = field(default_factory=dict)
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status == OK

    def render(self) -> str:
        if self.status == OK:
            return f"OK attempts={self.attempts}"
        if self.status == DIVERGED and self.divergence is not None:
            return f"DIVERGED {self.divergence.format()}"
        return f"{self.status} {self.message}".rstrip()


# -- packages ------------------------------------------------------------------------

@dataclass(frozen=True)
class VerifiedPackage:
    """Templates whose signatures checked out; the only thing a Replayer accepts."""

    templates: tuple


def verify_package(templates, key: bytes) -> VerifiedPackage:
    for t in templates:
        if not verify(t, key):
            raise VerifyFailed(f"template {t.name}: bad or missing signature")
    return VerifiedPackage(tuple(templates))


def load_package(path: str, key: bytes) -> VerifiedPackage:
    """Load every ``*.tpl`` under ``path`` (or its templates/ subdirectory)."""
    tdir = os.path.join(path, "templates")
    if not os.path.isdir(tdir):
        tdir = path
    names = sorted(n for n in os.listdir(tdir) if n.endswith(".tpl"))
    raw = {}
    for n in names:
        with open(os.path.join(tdir, n), "rb") as f:
            raw[n] = f.read()
    # authenticate everything before interpreting anything
    for n in names:
        if not verify_bytes(raw[n], key):
            raise VerifyFailed(f"{n}: template failed authentication")
    out = []
    for n in names:
        try:
            out.append(load_verified(raw[n], key))
        except (TemplateError, ParseError, UnicodeDecodeError, ValueError) as e:
            raise VerifyFailed(f"{n}: {e}") from None
    return VerifiedPackage(tuple(out))


# -- the executor ---------------------------------------------------------------------

class _Attempt:
    """Per-attempt state: symbol bindings and the regions they name."""

    def __init__(self, dev: DeviceModel, rng: random.Random):
        self.dev = dev
        self.rng = rng
        self.env: dict[str, int] = {}
        self.dma: dict[str, object] = {}       # symbol -> MemRegion
        self.prog: dict[str, bytearray] = {}   # symbol -> caller buffer
        self.prog_limit: dict[str, int] = {}
        self.allocations: list[int] = []

    def release(self) -> None:
        for r in self.dma.values():
            self.dev.mem.free(r.region_id)
        self.dma.clear()


class Replayer:
    """Owns one device and a verified template package for it."""

    def __init__(self, package: VerifiedPackage, dev: DeviceModel,
                 max_attempts: int = MAX_ATTEMPTS, env_seed: int = 0):
        if not isinstance(package, VerifiedPackage):
            raise TypeError("Replayer needs a package returned by verify_package/load_package")
        self.dev = dev
        self.templates = [t for t in package.templates if t.device_id == dev.device_id]
        self.by_name = {t.name: t for t in self.templates}
        self.max_attempts = max_attempts
        self.rng = random.Random(env_seed)
        self._regs = dev.register_offsets

    # -- selection ------------------------------------------------------------

    def select(self, entry: str, args: dict) -> InteractionTemplate:
        found = [t for t in self.templates if t.entry == entry and t.accepts(args)]
        if not found:
            raise NoTemplate(f"{entry} {_fmt_args(args)}: inputs are out of coverage")
        if len(found) > 1:
            raise Ambiguous(f"{entry} {_fmt_args(args)}: matched {[t.name for t in found]}")
        return found[0]

    # -- top level ------------------------------------------------------------------

    def boot(self) -> ReplayOutcome:
        """Run the device's init template once."""
        init = next((t for t in self.templates
                     if ENTRIES.get(t.entry) is not None and ENTRIES[t.entry].kind == "init"), None)
        if init is None:
            return ReplayOutcome(NO_TEMPLATE, message="package has no init template")
        return self.execute(init, Invocation(init.entry, {}, max_attempts=self.max_attempts))

    def invoke(self, inv: Invocation) -> ReplayOutcome:
        try:
            t = self.select(inv.entry, inv.args)
        except NoTemplate as e:
            return ReplayOutcome(NO_TEMPLATE, message=str(e))
        except Ambiguous as e:
            return ReplayOutcome(AMBIGUOUS, message=str(e))
        return self.execute(t, inv)

    def reset_device(self, t_reset: InteractionTemplate) -> bool:
        return self._reset(t_reset) is None

    def _reset(self, t_reset: InteractionTemplate) -> DivergenceRecord | None:
        a = _Attempt(self.dev, self.rng)
        try:
            self._run(t_reset, a, {}, None)
        except Divergence as d:
            return DivergenceRecord(t_reset.name, d.event_index, d.expected, d.observed,
                                    d.source_loc, d.why)
        finally:
            a.release()
        return None

    def execute(self, t: InteractionTemplate, inv: Invocation) -> ReplayOutcome:
        """Run ``t`` transactionally; BoundsViolation propagates without retry."""
        missing = {p.name for p in t.scalar_params()} - set(inv.args)
        if missing or not t.accepts(inv.args):
            return ReplayOutcome(NO_TEMPLATE, template=t.name,
                                 message=f"{t.name} does not accept {_fmt_args(inv.args)}")
        reset = self.by_name.get(t.reset_template)
        if reset is None:
            return ReplayOutcome(NO_TEMPLATE, template=t.name,
                                 message=f"package has no {t.reset_template} template")
        if inv.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        out = ReplayOutcome(DIVERGED, template=t.name)
        for attempt in range(1, inv.max_attempts + 1):
            out.attempts = attempt
            failed = self._reset(reset)
            if failed is not None:
                out.history.append(failed)
                continue
            a = _Attempt(self.dev, self.rng)
            try:
                data = self._run(t, a, inv.args, inv.data)
            except Divergence as d:
                out.history.append(DivergenceRecord(t.name, d.event_index, d.expected,
                                                    d.observed, d.source_loc, d.why))
                continue
            finally:
                a.release()
            out.status, out.data = OK, data
            out.allocations, out.bindings = a.allocations, a.env
            return out
        # prefer the request template's own divergence over later reset failures
        own = [h for h in out.history if h.template == t.name]
        out.divergence = (own or out.history)[-1]
        return out

    # -- one attempt ----------------------------------------------------------------

    def _run(self, t: InteractionTemplate, a: _Attempt, args: dict, data: bytes | None):
        out_name = None
        for p in t.params:
            if p.role == SCALAR:
                a.env[p.name] = args[p.name] & MASK64
                continue
            k = len(a.prog)
            a.env[p.name] = PROG_BASE + k * PROG_STRIDE
            if p.role == DATA_IN:
                a.prog[p.name] = bytearray(data or b"")
                a.prog_limit[p.name] = len(a.prog[p.name])
            else:
                a.prog[p.name] = bytearray()
                a.prog_limit[p.name] = OUTPUT_LIMIT
                out_name = p.name
        for i, ev in enumerate(t.events):
            self._event(t, i, ev, a)
        return bytes(a.prog[out_name]) if out_name else b""

    def _eval(self, e, a: _Attempt, i: int) -> int:
        try:
            return evaluate(e, a.env)
        except EvalError as err:
            raise BoundsViolation(f"event {i}: {err}") from None

    def _reg(self, name: str, i: int) -> int:
        off = self._regs.get(name)
        if off is None:
            raise BoundsViolation(f"event {i}: undeclared register {name}")
        return off

    def _span(self, a: _Attempt, region: str, off: int, length: int, i: int, growing=False):
        """Bounds-check ``[off, off+length)`` in ``region``; returns the backing buffer."""
        if region in a.dma:
            buf = a.dma[region].data
            limit = len(buf)
        elif region in a.prog:
            buf = a.prog[region]
            limit = a.prog_limit[region] if growing else len(buf)
        else:
            raise BoundsViolation(f"event {i}: unknown region {region}")
        if off < 0 or length < 0 or off + length > limit:
            raise BoundsViolation(f"event {i}: [{off:#x}, +{length:#x}) outside {region}")
        if growing and off + length > len(buf):
            buf.extend(bytes(off + length - len(buf)))
        return buf

    def _check(self, i: int, ev, value: int, env, why: str = "") -> None:
        if not satisfies(ev.constraint, value, env):
            raise Divergence(i, ev.constraint, value, ev.source_loc, why)

    def _event(self, t: InteractionTemplate, i: int, ev, a: _Attempt) -> None:
        dev, k = self.dev, ev.kind
        if ev.binds and (ev.binds in a.env or ev.binds in a.prog):
            raise BoundsViolation(f"event {i}: rebinds {ev.binds}")
        if k == "WRITE":
            off = self._reg(ev.reg, i)
            v = self._eval(ev.value, a, i)
            if v > WORD_LIMIT:
                raise BoundsViolation(f"event {i}: {v:#x} does not fit {ev.reg}")
            dev.reg_write(off, v)
        elif k == "READ":
            v = dev.reg_read(self._reg(ev.reg, i))
            self._check(i, ev, v, a.env)
            a.env[ev.binds] = v
        elif k == "POLL":
            off = self._reg(ev.reg, i)
            reads = 0
            while True:
                v = dev.reg_read(off)
                reads += 1
                if satisfies(ev.constraint, v, a.env):
                    break
                if reads >= ev.timeout:
                    raise Divergence(i, ev.constraint, v, ev.source_loc, "poll timeout")
                dev.step()
        elif k == "WAIT_IRQ":
            waited = 0
            while not dev.take_irq(ev.line):
                if waited >= ev.timeout:
                    raise Divergence(i, f"irq{ev.line}", 0, ev.source_loc, "irq timeout")
                dev.step()
                waited += 1
        elif k == "DELAY":
            dev.step(ev.timeout)
        elif k == "MEM_READ":
            off = self._eval(ev.offset, a, i)
            buf = self._span(a, ev.region, off, ev.width, i)
            v = int.from_bytes(buf[off:off + ev.width], "little")
            self._check(i, ev, v, a.env)
            a.env[ev.binds] = v
        elif k == "MEM_WRITE":
            off = self._eval(ev.offset, a, i)
            v = self._eval(ev.value, a, i)
            if v >> (8 * ev.width):
                raise BoundsViolation(f"event {i}: {v:#x} does not fit {ev.width} bytes")
            buf = self._span(a, ev.region, off, ev.width, i, growing=ev.region in a.prog)
            buf[off:off + ev.width] = v.to_bytes(ev.width, "little")
        elif k == "DMA_ALLOC":
            size = self._eval(ev.value, a, i)
            if not 0 < size <= MAX_DMA_ALLOC:
                raise BoundsViolation(f"event {i}: DMA allocation of {size:#x} bytes")
            try:
                r = dev.mem.alloc(size)
            except OutOfMemory as e:
                raise BoundsViolation(f"event {i}: {e}") from None
            a.dma[ev.binds] = r
            a.env[ev.binds] = r.base
            a.allocations.append(size)
        elif k == "LOAD_MEM":
            snap = t.snapshots[ev.snapshot]
            buf = self._span(a, ev.region, 0, len(snap), i)
            buf[:len(snap)] = snap
            for off, e in ev.fixups:
                v = self._eval(e, a, i)
                if v > WORD_LIMIT:
                    raise BoundsViolation(f"event {i}: fixup {v:#x} does not fit a word")
                self._span(a, ev.region, off, 4, i)[off:off + 4] = v.to_bytes(4, "little")
        elif k == "COPY":
            n = self._eval(ev.value, a, i)
            so = self._eval(ev.src_offset, a, i)
            do = self._eval(ev.offset, a, i)
            src = self._span(a, ev.src_region, so, n, i)
            dst = self._span(a, ev.region, do, n, i, growing=ev.region in a.prog)
            dst[do:do + n] = src[so:so + n]
        elif k == "ENV":
            a.env[ev.binds] = a.rng.getrandbits(32) if ev.env == "rand" else dev.steps
        else:
            raise BoundsViolation(f"event {i}: unsupported kind {k}")


def _fmt_args(args: dict) -> str:
    return " ".join(f"{k}={v}" for k, v in args.items())


# -- entry-shaped helpers ---------------------------------------------------------------

def replay_blk_rw(replayer: Replayer, rw: int, blkid: int, blkcnt: int,
                  data: bytes | None = None, max_attempts: int = MAX_ATTEMPTS) -> ReplayOutcome:
    args = {"rw": rw, "blkid": blkid, "blkcnt": blkcnt}
    return replayer.invoke(Invocation("blk_rw", args, data, max_attempts))


def replay_stream_capture(replayer: Replayer, resolution: int, frames: int,
                          max_attempts: int = MAX_ATTEMPTS) -> ReplayOutcome:
    args = {"resolution": resolution, "frames": frames}
    return replayer.invoke(Invocation("stream_capture", args, None, max_attempts))


__all__ = [
    "AMBIGUOUS", "Ambiguous", "BoundsViolation", "DATA_PARAM", "DIVERGED", "Divergence",
    "DivergenceRecord", "Invocation", "MAX_ATTEMPTS", "NO_TEMPLATE", "NoTemplate", "OK",
    "ReplayOutcome", "Replayer", "VerifiedPackage", "VERIFY_FAILED", "VerifyFailed", "load_package",
    "replay_blk_rw", "replay_stream_capture", "verify_package",
]

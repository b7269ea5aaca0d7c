"""Register files, shared memory and the steppable device base class."""

from __future__ import annotations

import bisect
import enum
import random
from dataclasses import dataclass
from typing import Callable, NamedTuple

PAGE_SIZE = 4096
MAX_DMA_ALLOC = 1 << 20
PHYS_BASE = 0x1000_0000
PHYS_LIMIT = 0x2000_0000
LATENCY_MIN, LATENCY_MAX = 1, 50
WORD_MASK = 0xFFFF_FFFF


class SimError(Exception):
    pass


class UndeclaredRegister(SimError):
    def __init__(self, offset: int):
        super().__init__(f"undeclared register offset {offset:#x}")
        self.offset = offset


class MemoryFault(SimError):
    pass


class OutOfMemory(SimError):
    pass


class IrqEvent(NamedTuple):
    line: int
    step: int


class FaultKind(enum.Enum):
    NONE = "none"
    TRANSIENT_BAD_STATUS = "transient-bad-status"
    TRANSIENT_DELAY = "transient-delay"
    PERSISTENT_MEDIUM_REMOVED = "medium-removed"


@dataclass(frozen=True)
class FaultPlan:
    """Which hardware jobs misbehave.

    With ``probability`` zero the fault hits exactly job ``trigger_job_index``
    (0-based, counted from power-on).  Otherwise every job draws from an RNG
    seeded with ``rng_seed``.  A transient fault never hits two jobs in a row,
    so the job after a faulted one (following a reset) runs clean.
    """

    kind: FaultKind = FaultKind.NONE
    trigger_job_index: int = 0
    probability: float = 0.0
    rng_seed: int = 0

    @property
    def transient(self) -> bool:
        return self.kind in (FaultKind.TRANSIENT_BAD_STATUS, FaultKind.TRANSIENT_DELAY)


NO_FAULT = FaultPlan()


class FaultInjector:
    def __init__(self, plan: FaultPlan):
        self.plan = plan
        self._rng = random.Random(plan.rng_seed)
        self._last_faulted = -2

    def decide(self, job_index: int) -> FaultKind:
        plan = self.plan
        if plan.kind is FaultKind.NONE:
            return FaultKind.NONE
        if plan.kind is FaultKind.PERSISTENT_MEDIUM_REMOVED:
            return plan.kind if job_index >= plan.trigger_job_index else FaultKind.NONE
        if plan.probability > 0:
            hit = self._rng.random() < plan.probability
        else:
            hit = job_index == plan.trigger_job_index
        if hit and job_index != self._last_faulted + 1:
            self._last_faulted = job_index
            return plan.kind
        return FaultKind.NONE


class RegisterFile:
    """32-bit registers at declared 64-bit offsets with optional hooks."""

    def __init__(self, names: dict[int, str]):
        self.names = dict(names)
        self.regs = {off: 0 for off in names}
        self.read_hooks: dict[int, Callable[[], int]] = {}
        self.write_hooks: dict[int, Callable[[int], None]] = {}

    def _check(self, offset: int):
        if offset not in self.regs:
            raise UndeclaredRegister(offset)

    def read(self, offset: int) -> int:
        self._check(offset)
        hook = self.read_hooks.get(offset)
        return (hook() if hook else self.regs[offset]) & WORD_MASK

    def write(self, offset: int, value: int) -> None:
        self._check(offset)
        if not 0 <= value <= WORD_MASK:
            raise ValueError(f"value {value:#x} does not fit a 32-bit register")
        hook = self.write_hooks.get(offset)
        if hook:
            hook(value)
        else:
            self.regs[offset] = value

    def declared(self, offset: int) -> bool:
        return offset in self.regs


@dataclass
class MemRegion:
    region_id: int
    base: int
    data: bytearray

    @property
    def size(self) -> int:
        return len(self.data)

    @property
    def end(self) -> int:
        return self.base + len(self.data)


class SharedMemory:
    """Page-aligned, non-overlapping regions in a physical address window.

    Allocation is first-fit from the bottom of the window, so the same
    allocation sequence on an empty memory always yields the same addresses.
    """

    def __init__(self, base: int = PHYS_BASE, limit: int = PHYS_LIMIT):
        self.window = (base, limit)
        self.regions: dict[int, MemRegion] = {}
        self._bases: list[int] = []
        self._at: dict[int, MemRegion] = {}
        self._next_id = 0

    def alloc(self, size: int) -> MemRegion:
        if size <= 0:
            raise ValueError("zero-sized allocation")
        span = -(-size // PAGE_SIZE) * PAGE_SIZE
        cursor = self.window[0]
        for b in self._bases:
            r = self._by_base(b)
            if b - cursor >= span:
                break
            cursor = max(cursor, -(-r.end // PAGE_SIZE) * PAGE_SIZE)
        if cursor + span > self.window[1]:
            raise OutOfMemory(f"no room for {size} bytes")
        region = MemRegion(self._next_id, cursor, bytearray(size))
        self._next_id += 1
        self.regions[region.region_id] = region
        bisect.insort(self._bases, cursor)
        self._at[cursor] = region
        return region

    def _by_base(self, base: int) -> MemRegion:
        return self._at[base]

    def free(self, region_id: int) -> None:
        region = self.regions.pop(region_id)
        self._bases.remove(region.base)
        del self._at[region.base]

    def free_all(self) -> None:
        self.regions.clear()
        self._bases.clear()
        self._at.clear()

    def locate(self, addr: int, length: int) -> tuple[MemRegion, int]:
        i = bisect.bisect_right(self._bases, addr) - 1
        if i >= 0:
            r = self._by_base(self._bases[i])
            if addr + length <= r.end and length >= 0:
                return r, addr - r.base
        raise MemoryFault(f"access [{addr:#x}, +{length}) outside shared memory")

    def read(self, addr: int, length: int) -> bytes:
        r, off = self.locate(addr, length)
        return bytes(r.data[off:off + length])

    def write(self, addr: int, data: bytes) -> None:
        r, off = self.locate(addr, len(data))
        r.data[off:off + len(data)] = data

    def read_word(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, 4), "little")

    def write_word(self, addr: int, value: int) -> None:
        self.write(addr, (value & WORD_MASK).to_bytes(4, "little"))


class DeviceModel:
    """Common machinery: registers, memory, RNG, IRQ latch, access log.

    Subclasses declare their register map and implement ``_tick``.  Every
    register access is counted in ``access_count``; when ``observe`` is set the
    device appends what it saw to ``observed`` (used by differential checks).
    """

    device_id = "device"
    register_names: dict[int, str] = {}

    def __init__(self, seed: int = 0, fault_plan: FaultPlan = NO_FAULT):
        self.seed = seed
        self.rng = random.Random(seed)
        self.fault_plan = fault_plan
        self.faults = FaultInjector(fault_plan)
        self.regs = RegisterFile(self.register_names)
        self.mem = SharedMemory()
        self.steps = 0
        self.irq_latched: set[int] = set()
        self.irq_log: list[IrqEvent] = []
        self.access_count = 0
        self.observe = False
        self.observed: list[tuple] = []

    def draw_latency(self) -> int:
        return self.rng.randint(LATENCY_MIN, LATENCY_MAX)

    def note(self, *item) -> None:
        if self.observe:
            self.observed.append(item)

    def reg_read(self, offset: int) -> int:
        value = self.regs.read(offset)
        self.access_count += 1
        self.note("R", offset, value)
        return value

    def reg_write(self, offset: int, value: int) -> None:
        if not self.regs.declared(offset):
            raise UndeclaredRegister(offset)
        self.access_count += 1
        self.note("W", offset, value)
        self.regs.write(offset, value)

    def raise_irq(self, line: int) -> IrqEvent:
        ev = IrqEvent(line, self.steps)
        self.irq_latched.add(line)
        self.irq_log.append(ev)
        self.note("IRQ", line)
        return ev

    def take_irq(self, line: int) -> bool:
        if line in self.irq_latched:
            self.irq_latched.discard(line)
            return True
        return False

    def step(self, n: int = 1) -> list[IrqEvent]:
        if n < 1:
            raise ValueError("step count must be at least 1")
        fired: list[IrqEvent] = []
        for _ in range(n):
            self.steps += 1
            before = len(self.irq_log)
            self._tick()
            fired.extend(self.irq_log[before:])
        return fired

    def _tick(self) -> None:
        raise NotImplementedError

    @property
    def register_offsets(self) -> dict[str, int]:
        return {name: off for off, name in self.register_names.items()}

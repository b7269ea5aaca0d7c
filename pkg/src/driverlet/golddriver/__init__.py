"""Reference drivers and the table of record entries they export."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable

from ..constraints import Constraint, Range, satisfies
from ..simdev.mockblk import BLOCK_SIZE, NUM_BLOCKS
from . import blk, stream
from .blk import blk_init, blk_reset, blk_rw
from .errors import DeviceError, DriverError, SizeMismatch
from .stream import stream_capture, stream_init, stream_reset

SCALAR, DATA_IN, DATA_OUT = "scalar", "data_in_addr", "data_out_addr"
ROLES = (SCALAR, DATA_IN, DATA_OUT)
DATA_PARAM = "data_addr"
OUTPUT_LIMIT = 256 << 20

STREAM_TAGS = {1: "OneShot", 10: "ShortBurst", 100: "LongBurst"}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    role: str
    domain: Constraint | None = None


@dataclass
class InvokeResult:
    data: bytes
    value: object = None


@dataclass(frozen=True)
class EntrySpec:
    name: str
    device: str
    kind: str  # "request", "init" or "reset"
    params: tuple
    func: Callable
    init: str
    reset: str

    @property
    def signature(self) -> str:
        return f"{self.name}({','.join(p.name for p in self.params)})"

    @property
    def scalars(self) -> list[ParamSpec]:
        return [p for p in self.params if p.role == SCALAR]

    @property
    def has_data(self) -> bool:
        return any(p.name == DATA_PARAM for p in self.params)

    def data_role(self, args: dict) -> str:
        if self.name == "blk_rw" and args.get("rw") == 1:
            return DATA_IN
        return DATA_OUT

    def tag(self, args: dict) -> str:
        if self.name == "blk_rw":
            return f"{'WR' if args['rw'] == 1 else 'RD'}_{args['blkcnt']}"
        if self.name == "stream_capture":
            return STREAM_TAGS.get(args["frames"], f"Burst_{args['frames']}")
        return self.name.upper()

    def check(self, args: dict) -> None:
        """Gold-driver preconditions on concrete arguments."""
        names = {p.name for p in self.scalars}
        if set(args) - names:
            raise DriverError(f"{self.name}: unknown arguments {sorted(set(args) - names)}")
        missing = names - set(args)
        if missing:
            raise DriverError(f"{self.name}: missing arguments {sorted(missing)}")
        for p in self.scalars:
            if p.domain is not None and not satisfies(p.domain, args[p.name]):
                raise DriverError(f"{self.name}: {p.name}={args[p.name]} outside {p.domain}")
        if self.name == "blk_rw":
            blk.check_request(args["rw"], args["blkid"], args["blkcnt"], NUM_BLOCKS)

    def payload_size(self, args: dict) -> int:
        if self.name == "blk_rw":
            return args["blkcnt"] * BLOCK_SIZE
        return 0

    def default_payload(self, args: dict, seed: int) -> bytes | None:
        """Deterministic write payload for a record run."""
        if self.data_role(args) != DATA_IN or not self.has_data:
            return None
        key = ",".join(f"{k}={args[k]}" for k in sorted(args))
        return random.Random(f"{seed}:{self.name}:{key}").randbytes(self.payload_size(args))

    def invoke(self, hal, args: dict, payload: bytes | None = None) -> InvokeResult:
        self.check(args)
        call = []
        for p in self.params:
            if p.name == DATA_PARAM:
                if self.data_role(args) == DATA_IN:
                    if payload is None or len(payload) != self.payload_size(args):
                        raise DriverError(f"{self.name}: need a {self.payload_size(args)}-byte payload")
                    call.append(hal.program_buffer(DATA_PARAM, payload))
                else:
                    call.append(hal.program_buffer(DATA_PARAM, bytes(self.payload_size(args)),
                                                   growable=True, limit=OUTPUT_LIMIT))
            else:
                call.append(hal.param(p.name, args[p.name]))
        value = self.func(hal, *call)
        data = hal.program_data(DATA_PARAM) if self.has_data else b""
        return InvokeResult(data, value)


ENTRIES: dict[str, EntrySpec] = {}


def _register(*specs: EntrySpec) -> None:
    for s in specs:
        ENTRIES[s.name] = s


_register(
    EntrySpec("blk_init", "mockblk", "init", (), blk_init, "blk_init", "blk_reset"),
    EntrySpec("blk_reset", "mockblk", "reset", (), blk_reset, "blk_init", "blk_reset"),
    EntrySpec("blk_rw", "mockblk", "request", (
        ParamSpec("rw", SCALAR, Range(0, 1)),
        ParamSpec("blkid", SCALAR, Range(0, NUM_BLOCKS - 1)),
        ParamSpec("blkcnt", SCALAR, Range(1, NUM_BLOCKS)),
        ParamSpec(DATA_PARAM, DATA_OUT),
    ), blk_rw, "blk_init", "blk_reset"),
    EntrySpec("stream_init", "mockstream", "init", (), stream_init, "stream_init", "stream_reset"),
    EntrySpec("stream_reset", "mockstream", "reset", (), stream_reset, "stream_init", "stream_reset"),
    EntrySpec("stream_capture", "mockstream", "request", (
        ParamSpec("resolution", SCALAR, Range(0, 15)),
        ParamSpec("frames", SCALAR, Range(1, 1000)),
        ParamSpec(DATA_PARAM, DATA_OUT),
    ), stream_capture, "stream_init", "stream_reset"),
)


def get_entry(name: str) -> EntrySpec:
    try:
        return ENTRIES[name]
    except KeyError:
        raise KeyError(f"unknown entry {name!r}") from None


__all__ = [
    "DATA_IN", "DATA_OUT", "DATA_PARAM", "DeviceError", "DriverError", "ENTRIES", "EntrySpec",
    "InvokeResult", "ParamSpec", "ROLES", "SCALAR", "SizeMismatch", "blk", "blk_init",
    "blk_reset", "blk_rw", "get_entry", "stream", "stream_capture", "stream_init",
    "stream_reset",
]

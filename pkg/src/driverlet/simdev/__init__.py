"""Deterministic, steppable device simulators."""

from .core import (
    LATENCY_MAX, LATENCY_MIN, MAX_DMA_ALLOC, NO_FAULT, PAGE_SIZE, SimError, DeviceModel,
    FaultKind, FaultPlan, IrqEvent, MemoryFault, MemRegion, OutOfMemory, RegisterFile,
    SharedMemory, UndeclaredRegister,
)
from .mockblk import MockBlk, State
from .mockstream import MockStream, frame_size

DEVICES = {MockBlk.device_id: MockBlk, MockStream.device_id: MockStream}


def mockblk_new(seed: int = 0, fault_plan: FaultPlan = NO_FAULT) -> MockBlk:
    return MockBlk(seed, fault_plan)


def mockstream_new(seed: int = 0, fault_plan: FaultPlan = NO_FAULT) -> MockStream:
    return MockStream(seed, fault_plan)


def new_device(device_id: str, seed: int = 0, fault_plan: FaultPlan = NO_FAULT) -> DeviceModel:
    try:
        cls = DEVICES[device_id]
    except KeyError:
        raise ValueError(f"unknown device {device_id!r}") from None
    return cls(seed, fault_plan)


def register_map(device_id: str) -> dict[int, str]:
    return dict(DEVICES[device_id].register_names)


__all__ = [
    "DEVICES", "SimError", "DeviceModel", "FaultKind", "FaultPlan", "IrqEvent",
    "LATENCY_MAX", "LATENCY_MIN", "MAX_DMA_ALLOC", "MemRegion", "MemoryFault", "MockBlk",
    "MockStream", "NO_FAULT", "OutOfMemory", "PAGE_SIZE", "RegisterFile", "SharedMemory",
    "State", "UndeclaredRegister", "frame_size", "mockblk_new", "mockstream_new",
    "new_device", "register_map",
]

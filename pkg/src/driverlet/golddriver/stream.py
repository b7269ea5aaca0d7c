"""Gold driver for the MockStream camera (message queue + doorbells)."""

from __future__ import annotations

from ..simdev.mockstream import (
    BELL0, BELL2, DEVICE_SLOT, FIRMWARE_VERSION, HOST_SLOT, MBOX_WRITE, META_DEV_WPTR,
    META_HOST_WPTR, META_SLOT_COUNT, MSG_ACK, MSG_BULK_DONE, MSG_BULK_RX, MSG_BYTES,
    MSG_CAPTURE, MSG_CONFIGURE, MSG_ENABLE, MSG_FRAME_READY, MSG_GET_VERSION, MSG_OPEN_PORT,
    MSG_VERSION, NUM_SLOTS, QUEUE_BYTES, RING_ENTRIES, SLOT_SIZE,
)
from .errors import DeviceError, DriverError, SizeMismatch

IRQ_TIMEOUT = 1000
MAX_RESOLUTION = 2


class _Queue:
    def __init__(self, base):
        self.base = base
        self.sent = 0
        self.received = 0


def _open_queue(hal) -> _Queue:
    q = _Queue(hal.hal_dma_alloc(QUEUE_BYTES))
    hal.hal_mem_write(q.base + META_SLOT_COUNT, NUM_SLOTS)
    hal.hal_mem_write(q.base + META_HOST_WPTR, 0)
    hal.hal_mem_write(q.base + META_DEV_WPTR, 0)
    hal.hal_write_reg(MBOX_WRITE, q.base)
    return q


def _close_queue(hal, q: _Queue) -> None:
    hal.hal_write_reg(MBOX_WRITE, 0)
    hal.hal_dma_free(q.base)


def _exchange(hal, q: _Queue, msg_type: int, payload, reply_type: int, nreply: int = 0) -> list:
    """Post one message, ring the device and collect its reply payload."""
    rec = q.base + HOST_SLOT * SLOT_SIZE + (q.sent % RING_ENTRIES) * MSG_BYTES
    hal.hal_mem_write(rec, msg_type)
    hal.hal_mem_write(rec + 4, 4 * len(payload))
    for i, word in enumerate(payload):
        hal.hal_mem_write(rec + 8 + 4 * i, word)
    q.sent += 1
    hal.hal_mem_write(q.base + META_HOST_WPTR, q.sent)
    hal.hal_write_reg(BELL2, 1)
    hal.hal_wait_irq(0, IRQ_TIMEOUT)
    hal.hal_write_reg(BELL0, 0)
    rep = q.base + DEVICE_SLOT * SLOT_SIZE + (q.received % RING_ENTRIES) * MSG_BYTES
    q.received += 1
    got = hal.hal_mem_read(rep)
    if not hal.hal_branch(got.eq(reply_type)):
        raise DeviceError(f"expected reply {reply_type:#x}, got {int(got):#x}")
    return [hal.hal_mem_read(rep + 8 + 4 * i) for i in range(nreply)]


def _command(hal, q: _Queue, msg_type: int, payload=()) -> None:
    (status,) = _exchange(hal, q, msg_type, list(payload), MSG_ACK, 1)
    if not hal.hal_branch(status.eq(0)):
        raise DeviceError(f"message {msg_type:#x} rejected with status {int(status)}")


def stream_reset(hal) -> None:
    hal.hal_write_reg(MBOX_WRITE, 0)


def stream_init(hal) -> None:
    stream_reset(hal)
    q = _open_queue(hal)
    (version,) = _exchange(hal, q, MSG_GET_VERSION, [], MSG_VERSION, 1)
    if not hal.hal_branch(version.eq(FIRMWARE_VERSION)):
        raise DeviceError(f"unsupported firmware {int(version):#x}")
    _close_queue(hal, q)


def stream_capture(hal, resolution, frames, data_addr) -> list[int]:
    """Capture ``frames`` frames back to back into the buffer at ``data_addr``.

    Returns the concrete frame sizes; frame ``k`` starts right after frame
    ``k-1`` in the output buffer.
    """
    if not hal.hal_branch(resolution <= MAX_RESOLUTION):
        raise DriverError(f"unsupported resolution {int(resolution)}")
    q = _open_queue(hal)
    _command(hal, q, MSG_OPEN_PORT)
    _command(hal, q, MSG_CONFIGURE, [resolution])
    _command(hal, q, MSG_ENABLE)
    out = 0
    sizes = []
    i = 0
    while hal.hal_branch(frames > i):
        (img_size,) = _exchange(hal, q, MSG_CAPTURE, [], MSG_FRAME_READY, 1)
        buf = hal.hal_dma_alloc(img_size)
        (confirmed,) = _exchange(hal, q, MSG_BULK_RX, [img_size, buf], MSG_BULK_DONE, 1)
        if not hal.hal_branch(confirmed.eq(img_size)):
            raise SizeMismatch(f"device sent {int(confirmed)} bytes, announced {int(img_size)}")
        hal.hal_copy(data_addr + out, buf, img_size)
        out = out + img_size
        sizes.append(int(img_size))
        hal.hal_dma_free(buf)
        i += 1
    _close_queue(hal, q)
    return sizes

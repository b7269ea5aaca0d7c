"""A message-queue camera: shared-memory mailboxes plus two doorbells."""

from __future__ import annotations

from .core import NO_FAULT, DeviceModel, FaultKind, FaultPlan, MemoryFault

MBOX_WRITE, BELL0, BELL2 = 0x00, 0x40, 0x48
REGISTERS = {MBOX_WRITE: "MBOX_WRITE", BELL0: "BELL0", BELL2: "BELL2"}

SLOT_SIZE = 4096
NUM_SLOTS = 3
QUEUE_BYTES = SLOT_SIZE * NUM_SLOTS
HOST_SLOT, DEVICE_SLOT = 1, 2
MSG_BYTES = 32
MSG_PAYLOAD_WORDS = 6
RING_ENTRIES = SLOT_SIZE // MSG_BYTES

# slot 0 metadata words
META_SLOT_COUNT, META_HOST_WPTR, META_DEV_WPTR = 0, 4, 8

MSG_OPEN_PORT = 0x01
MSG_CONFIGURE = 0x02
MSG_ENABLE = 0x03
MSG_CAPTURE = 0x04
MSG_BULK_RX = 0x05
MSG_GET_VERSION = 0x06
MSG_ACK = 0x81
MSG_FRAME_READY = 0x84
MSG_BULK_DONE = 0x85
MSG_VERSION = 0x86
MSG_ERROR = 0xFF

FIRMWARE_VERSION = 0x0004_0002
RESOLUTIONS = {0: "720p", 1: "1080p", 2: "1440p"}
BASE_FRAME_BYTES = {0: 48_000, 1: 96_000, 2: 160_000}
JITTER = 4096
DELAY_PENALTY = 5000


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFF_FFFF_FFFF_FFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFF_FFFF_FFFF_FFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFF_FFFF_FFFF_FFFF
    return x ^ (x >> 31)


def frame_size(resolution: int, index: int, seed: int = 0) -> int:
    """Compressed size of frame ``index`` after a queue open (4-byte aligned)."""
    h = _splitmix64((seed << 20) ^ (resolution << 16) ^ index)
    return BASE_FRAME_BYTES[resolution] + (h % JITTER) // 4 * 4


def frame_bytes(size: int, index: int) -> bytes:
    """A JPEG-looking payload: SOI marker, filler, EOI marker."""
    body = bytes([(index * 7 + i) & 0xFF for i in range(251)])
    fill = (body * (size // len(body) + 1))[: max(size - 4, 0)]
    return (b"\xff\xd8" + fill + b"\xff\xd9")[:size]


class MockStream(DeviceModel):
    """Camera-style device driven entirely by queued messages.

    The host hands over a 12 KB queue by writing its base to MBOX_WRITE; slot 0
    carries ``{slot_count, host_wptr, dev_wptr}``, slot 1 host->device records
    and slot 2 device->host records of 32 bytes ``{type, len, payload[6]}``.
    Ringing BELL2 makes the device consume new host records after a latency,
    write replies, set BELL0 and raise IRQ line 0.  A CAPTURE picks a frame
    size from a deterministic table; BULK_RX then DMA-writes that frame.
    """

    device_id = "mockstream"
    register_names = REGISTERS

    def __init__(self, seed: int = 0, fault_plan: FaultPlan = NO_FAULT):
        super().__init__(seed, fault_plan)
        self.queue_base = 0
        self.host_rptr = 0
        self.dev_wptr = 0
        self.resolution = 0
        self.port_open = False
        self.enabled = False
        self.frame_index = 0
        self.job_index = 0
        self.pending_frame: int | None = None
        self.pending_fault = FaultKind.NONE
        self.latency_remaining = 0
        self.irq_delay = 0
        self.regs.write_hooks.update({MBOX_WRITE: self._write_mbox, BELL2: self._write_bell2,
                                      BELL0: self._write_bell0})

    def _teardown(self) -> None:
        self.queue_base = 0
        self.host_rptr = self.dev_wptr = 0
        self.resolution = 0
        self.port_open = self.enabled = False
        self.frame_index = 0
        self.pending_frame = None
        self.latency_remaining = 0
        self.irq_delay = 0
        self.irq_latched.discard(0)
        for off in self.regs.regs:
            self.regs.regs[off] = 0

    def _write_mbox(self, value: int) -> None:
        if value == 0:
            self._teardown()
            return
        self.regs.regs[MBOX_WRITE] = value
        self.queue_base = value
        self.host_rptr = self.dev_wptr = 0

    def _write_bell0(self, value: int) -> None:
        self.regs.regs[BELL0] = value
        if value == 0:
            self.irq_latched.discard(0)

    def _write_bell2(self, value: int) -> None:
        self.regs.regs[BELL2] = value
        if not self.queue_base or not value:
            return
        if self.latency_remaining == 0:
            self.latency_remaining = self.draw_latency()

    def _tick(self) -> None:
        if self.irq_delay > 0:
            self.irq_delay -= 1
            if self.irq_delay == 0:
                self._notify()
        if self.latency_remaining > 0:
            self.latency_remaining -= 1
            if self.latency_remaining == 0:
                self._service()

    def _service(self) -> None:
        self.regs.regs[BELL2] = 0
        try:
            count = self.mem.read_word(self.queue_base + META_SLOT_COUNT)
            host_wptr = self.mem.read_word(self.queue_base + META_HOST_WPTR)
        except MemoryFault:
            return
        if count != NUM_SLOTS:
            return
        delayed = False
        while self.host_rptr != host_wptr:
            rec = self.queue_base + HOST_SLOT * SLOT_SIZE + (self.host_rptr % RING_ENTRIES) * MSG_BYTES
            words = [self.mem.read_word(rec + 4 * i) for i in range(2 + MSG_PAYLOAD_WORDS)]
            self.host_rptr = (self.host_rptr + 1) & 0xFFFF_FFFF
            reply_type, payload, delay = self._handle(words[0], words[2:])
            delayed = delayed or delay
            self._reply(reply_type, payload)
        if delayed:
            self.irq_delay = DELAY_PENALTY
            return
        self._notify()

    def _notify(self) -> None:
        self.regs.regs[BELL0] = 1
        self.raise_irq(0)

    def _reply(self, msg_type: int, payload: list[int]) -> None:
        rec = self.queue_base + DEVICE_SLOT * SLOT_SIZE + (self.dev_wptr % RING_ENTRIES) * MSG_BYTES
        words = [msg_type, 4 * len(payload)] + list(payload) + [0] * (MSG_PAYLOAD_WORDS - len(payload))
        for i, w in enumerate(words):
            self.mem.write_word(rec + 4 * i, w)
        self.dev_wptr = (self.dev_wptr + 1) & 0xFFFF_FFFF
        self.mem.write_word(self.queue_base + META_DEV_WPTR, self.dev_wptr)

    def _handle(self, msg_type: int, p: list[int]) -> tuple[int, list[int], bool]:
        if msg_type == MSG_OPEN_PORT:
            self.port_open = True
            return MSG_ACK, [0], False
        if msg_type == MSG_GET_VERSION:
            return MSG_VERSION, [FIRMWARE_VERSION], False
        if msg_type == MSG_CONFIGURE and self.port_open and p[0] in RESOLUTIONS:
            self.resolution = p[0]
            return MSG_ACK, [0], False
        if msg_type == MSG_ENABLE and self.port_open:
            self.enabled = True
            return MSG_ACK, [0], False
        if msg_type == MSG_CAPTURE and self.enabled and self.pending_frame is None:
            size = frame_size(self.resolution, self.frame_index, self.seed)
            self.pending_frame = size
            self.pending_fault = self.faults.decide(self.job_index)
            self.job_index += 1
            delay = self.pending_fault is FaultKind.TRANSIENT_DELAY
            return MSG_FRAME_READY, [size], delay
        if msg_type == MSG_BULK_RX and self.pending_frame is not None:
            size, addr = p[0], p[1]
            img = self.pending_frame
            if size < img:
                return MSG_ERROR, [size], False
            sent = img
            if self.pending_fault in (FaultKind.TRANSIENT_BAD_STATUS,
                                      FaultKind.PERSISTENT_MEDIUM_REMOVED):
                sent = img - 4
            try:
                self.mem.write(addr, frame_bytes(sent, self.frame_index))
            except MemoryFault:
                return MSG_ERROR, [0], False
            self.note("DMA", addr, sent)
            self.pending_frame = None
            self.frame_index += 1
            return MSG_BULK_DONE, [sent], False
        return MSG_ERROR, [msg_type], False

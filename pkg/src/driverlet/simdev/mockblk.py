"""A block device with a PIO data register and a descriptor-chain DMA engine."""

from __future__ import annotations

import enum

from .core import NO_FAULT, DeviceModel, FaultKind, FaultPlan, MemoryFault

SDCMD, SDARG, SDHCFG, SDHSTS = 0x00, 0x04, 0x08, 0x0C
SDDATA, SDEDM, SDRST = 0x10, 0x14, 0x18
DMA_ADDR, DMA_CS = 0x20, 0x24

REGISTERS = {
    SDCMD: "SDCMD", SDARG: "SDARG", SDHCFG: "SDHCFG", SDHSTS: "SDHSTS",
    SDDATA: "SDDATA", SDEDM: "SDEDM", SDRST: "SDRST",
    DMA_ADDR: "DMA_ADDR", DMA_CS: "DMA_CS",
}

CMD_READ_PIO, CMD_WRITE_PIO = 0x10, 0x11
CMD_READ_DMA, CMD_WRITE_DMA = 0x18, 0x19
CMD_SET_BLKCNT = 0x17
DATA_COMMANDS = (CMD_READ_PIO, CMD_WRITE_PIO, CMD_READ_DMA, CMD_WRITE_DMA)
CMD_NEW = 0x8000

STS_DONE, STS_ERROR = 0x1, 0x2

BLOCK_SIZE = 512
NUM_BLOCKS = 1 << 16
WORDS_PER_BLOCK = BLOCK_SIZE // 4
FIFO_DEPTH = 16
DESC_WORDS = 8
DESC_BYTES = DESC_WORDS * 4
DIR_TO_MEDIUM = 0x1  # descriptor info bit0: memory -> medium
DELAY_PENALTY = 5000
MAX_CHAIN = 4096


class State(enum.Enum):
    IDLE = "IDLE"
    CMD_ISSUED = "CMD_ISSUED"
    XFER = "XFER"
    DONE = "DONE"
    ERROR = "ERROR"


class Medium:
    """Sparse store of 512-byte blocks; unwritten blocks read as zeros."""

    def __init__(self, num_blocks: int = NUM_BLOCKS):
        self.num_blocks = num_blocks
        self.blocks: dict[int, bytes] = {}

    @property
    def size(self) -> int:
        return self.num_blocks * BLOCK_SIZE

    def read(self, offset: int, length: int) -> bytes:
        if offset < 0 or offset + length > self.size:
            raise MemoryFault(f"medium access [{offset:#x}, +{length}) out of range")
        out = bytearray()
        pos = offset
        while pos < offset + length:
            blk, within = divmod(pos, BLOCK_SIZE)
            take = min(BLOCK_SIZE - within, offset + length - pos)
            data = self.blocks.get(blk, bytes(BLOCK_SIZE))
            out += data[within:within + take]
            pos += take
        return bytes(out)

    def write(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.size:
            raise MemoryFault(f"medium access [{offset:#x}, +{len(data)}) out of range")
        pos = offset
        view = memoryview(data)
        while view:
            blk, within = divmod(pos, BLOCK_SIZE)
            take = min(BLOCK_SIZE - within, len(view))
            cur = bytearray(self.blocks.get(blk, bytes(BLOCK_SIZE)))
            cur[within:within + take] = view[:take]
            if any(cur):
                self.blocks[blk] = bytes(cur)
            else:
                self.blocks.pop(blk, None)
            view = view[take:]
            pos += take

    def read_blocks(self, blkid: int, count: int) -> bytes:
        return self.read(blkid * BLOCK_SIZE, count * BLOCK_SIZE)

    def write_blocks(self, blkid: int, data: bytes) -> None:
        self.write(blkid * BLOCK_SIZE, data)


class MockBlk(DeviceModel):
    """Reactive block controller.

    A data command moves IDLE -> CMD_ISSUED; after a latency drawn from the
    device RNG the command is accepted (XFER).  PIO jobs then move words
    through a 16-word FIFO whose level shows up in the low byte of SDEDM; DMA
    jobs wait for a DMA_CS go bit, then walk the descriptor chain after a
    second latency.  Completion latches status 0x1 and raises IRQ line 0.
    Every transition depends only on the state, register writes and elapsed
    steps, never on payload bytes.
    """

    device_id = "mockblk"
    register_names = REGISTERS

    def __init__(self, seed: int = 0, fault_plan: FaultPlan = NO_FAULT):
        super().__init__(seed, fault_plan)
        self.medium = Medium()
        self.state = State.IDLE
        self.pending_cmd = 0
        self.latency_remaining = 0
        self.blkcnt = 0
        self.job_index = 0
        self.job_fault = FaultKind.NONE
        self.medium_removed = False
        self.resetting = False
        self.edm_config = 0
        self.watermark = 0
        self.fifo: list[int] = []
        self.words_left = 0
        self.job_buffer = bytearray()
        self.job_blkid = 0
        self.phase = ""
        self.regs.read_hooks.update({SDCMD: self._read_cmd, SDEDM: self._read_edm,
                                     SDRST: lambda: int(self.resetting),
                                     SDDATA: self._read_data})
        self.regs.write_hooks.update({SDCMD: self._write_cmd, SDEDM: self._write_edm,
                                      SDHSTS: self._write_sts, SDRST: self._write_rst,
                                      SDDATA: self._write_data, DMA_CS: self._write_dma_cs})

    # -- register hooks --------------------------------------------------

    def _read_cmd(self) -> int:
        if self.state is State.CMD_ISSUED:
            return self.pending_cmd | CMD_NEW
        return self.pending_cmd

    def _read_edm(self) -> int:
        return self.edm_config | (self.watermark & 0xFF)

    def _write_edm(self, value: int) -> None:
        self.edm_config = value & ~0xFF & 0xFFFF_FFFF

    def _write_cmd(self, value: int) -> None:
        if value == CMD_SET_BLKCNT:
            if self.state is State.IDLE:
                self.blkcnt = self.regs.regs[SDARG]
            else:
                self._fail()
            return
        if value not in DATA_COMMANDS or self.state is not State.IDLE or self.resetting:
            self._fail()
            return
        self.pending_cmd = value
        self.job_fault = self.faults.decide(self.job_index)
        self.job_index += 1
        if self.job_fault is FaultKind.PERSISTENT_MEDIUM_REMOVED:
            self.medium_removed = True
        self.job_blkid = self.regs.regs[SDARG]
        self.state = State.CMD_ISSUED
        self.phase = "accept"
        self.latency_remaining = self.draw_latency()

    def _write_sts(self, value: int) -> None:
        if value == 0:
            self.regs.regs[SDHSTS] = 0 if self.state is not State.ERROR else STS_ERROR
            self.irq_latched.discard(0)
            if self.state is State.DONE:
                self.state = State.IDLE
                self.pending_cmd = 0
        else:
            self.regs.regs[SDHSTS] = value

    def _write_rst(self, value: int) -> None:
        if value & 1:
            self._clear_job()
            self.state = State.IDLE
            self.resetting = True
            self.phase = "reset"
            self.latency_remaining = self.draw_latency()

    def _write_dma_cs(self, value: int) -> None:
        self.regs.regs[DMA_CS] = value
        if not value & 1:
            return
        if self.state is not State.XFER or self.pending_cmd not in (CMD_READ_DMA, CMD_WRITE_DMA) \
                or self.phase != "await-go":
            self._fail()
            return
        self.phase = "dma"
        self.latency_remaining = self._completion_latency()

    def _read_data(self) -> int:
        if self.state is not State.XFER or self.pending_cmd != CMD_READ_PIO or not self.fifo:
            self._fail()
            return 0
        word = self.fifo.pop(0)
        self._update_watermark()
        return word

    def _write_data(self, value: int) -> None:
        if (self.state is not State.XFER or self.pending_cmd != CMD_WRITE_PIO
                or len(self.fifo) >= FIFO_DEPTH or self.words_left == 0):
            self._fail()
            return
        self.fifo.append(value)
        self.words_left -= 1
        self._update_watermark()

    # -- FSM -------------------------------------------------------------

    def _completion_latency(self) -> int:
        extra = DELAY_PENALTY if self.job_fault is FaultKind.TRANSIENT_DELAY else 0
        return self.draw_latency() + extra

    def _clear_job(self) -> None:
        self.pending_cmd = 0
        self.latency_remaining = 0
        self.fifo = []
        self.words_left = 0
        self.job_buffer = bytearray()
        self.phase = ""
        self.irq_latched.discard(0)
        self.regs.regs[SDHSTS] = 0
        self.regs.regs[DMA_CS] = 0

    def _fail(self) -> None:
        self.state = State.ERROR
        self.phase = ""
        self.latency_remaining = 0
        self.regs.regs[SDHSTS] = STS_ERROR
        self.raise_irq(0)

    def _complete(self) -> None:
        faulted = self.job_fault is not FaultKind.NONE and self.job_fault is not FaultKind.TRANSIENT_DELAY
        if faulted or self.medium_removed:
            self._fail()
            return
        if self.pending_cmd == CMD_WRITE_PIO:
            self.medium.write_blocks(self.job_blkid, bytes(self.job_buffer))
        self.state = State.DONE
        self.phase = ""
        self.regs.regs[SDHSTS] = STS_DONE
        self.raise_irq(0)

    def _update_watermark(self) -> None:
        if self.state is State.XFER and self.pending_cmd in (CMD_READ_PIO, CMD_WRITE_PIO):
            if self.pending_cmd == CMD_READ_PIO:
                self.watermark = len(self.fifo)
            else:
                self.watermark = FIFO_DEPTH - len(self.fifo)

    def _pio_active(self) -> bool:
        return self.state is State.XFER and self.phase == "pio"

    def _tick(self) -> None:
        if self.resetting:
            if not self.medium_removed:
                self.latency_remaining -= 1
                if self.latency_remaining <= 0:
                    self._finish_reset()
            self.watermark = self.rng.randrange(FIFO_DEPTH)
            return
        if self._pio_active():
            self._pio_tick()
        else:
            self.watermark = self.rng.randrange(FIFO_DEPTH)
        if self.latency_remaining > 0:
            self.latency_remaining -= 1
            if self.latency_remaining == 0:
                self._latency_expired()

    def _finish_reset(self) -> None:
        self.resetting = False
        self._clear_job()
        self.state = State.IDLE
        self.blkcnt = 0
        for off in (SDCMD, SDARG, DMA_ADDR):
            self.regs.regs[off] = 0
        self.phase = ""

    def _latency_expired(self) -> None:
        if self.phase == "accept":
            self.state = State.XFER
            if self.pending_cmd in (CMD_READ_PIO, CMD_WRITE_PIO):
                self._start_pio()
            else:
                self.phase = "await-go"
        elif self.phase == "dma":
            self._run_dma()
        elif self.phase == "complete":
            self._complete()

    def _start_pio(self) -> None:
        self.phase = "pio"
        total = self.blkcnt * BLOCK_SIZE
        if self.blkcnt == 0 or self.job_blkid + self.blkcnt > self.medium.num_blocks:
            self._fail()
            return
        self.words_left = total // 4
        self.fifo = []
        if self.pending_cmd == CMD_READ_PIO:
            data = self.medium.read_blocks(self.job_blkid, self.blkcnt) if not self.medium_removed \
                else bytes(total)
            self.job_buffer = bytearray(data)
            self.watermark = 0
        else:
            self.job_buffer = bytearray()
            self.watermark = FIFO_DEPTH

    def _pio_tick(self) -> None:
        rate = self.rng.randint(1, 8)
        if self.pending_cmd == CMD_READ_PIO:
            n = min(rate, FIFO_DEPTH - len(self.fifo), self.words_left)
            start = len(self.job_buffer) - self.words_left * 4
            for i in range(n):
                pos = start + 4 * i
                self.fifo.append(int.from_bytes(self.job_buffer[pos:pos + 4], "little"))
            self.words_left -= n
            done = self.words_left == 0 and not self.fifo
        else:
            n = min(rate, len(self.fifo))
            for word in self.fifo[:n]:
                self.job_buffer += word.to_bytes(4, "little")
            del self.fifo[:n]
            done = self.words_left == 0 and not self.fifo
        self._update_watermark()
        if done:
            self.phase = "complete"
            self.latency_remaining = self._completion_latency() + 1

    def _run_dma(self) -> None:
        """Walk the descriptor chain and move the data."""
        to_medium = self.pending_cmd == CMD_WRITE_DMA
        expected_first = self.job_blkid * BLOCK_SIZE
        total_len = 0
        spans = []
        addr = self.regs.regs[DMA_ADDR]
        seen = set()
        try:
            while addr:
                if addr in seen or len(seen) >= MAX_CHAIN:
                    raise MemoryFault("descriptor chain cycle")
                seen.add(addr)
                words = [self.mem.read_word(addr + 4 * i) for i in range(DESC_WORDS)]
                self.note("DMA", *words)
                info, src, dst, length, stride, nxt = words[:6]
                if stride != 0 or length == 0 or bool(info & DIR_TO_MEDIUM) != to_medium:
                    raise MemoryFault("bad descriptor")
                medium_off = dst if to_medium else src
                if not spans and medium_off != expected_first:
                    raise MemoryFault("chain does not start at the programmed block")
                spans.append((src, dst, length))
                total_len += length
                addr = nxt
            if total_len != self.blkcnt * BLOCK_SIZE or not spans:
                raise MemoryFault("chain length does not match block count")
            for src, dst, length in spans:
                if to_medium:
                    data = self.mem.read(src, length)
                    if self.job_fault in (FaultKind.NONE, FaultKind.TRANSIENT_DELAY) \
                            and not self.medium_removed:
                        self.medium.write(dst, data)
                else:
                    data = self.medium.read(src, length) if not self.medium_removed else bytes(length)
                    self.mem.write(dst, data)
        except MemoryFault:
            self._fail()
            return
        self._complete()

    # -- convenience for tests and tools --------------------------------------

    def snapshot_state(self) -> tuple:
        return (self.state, dict(self.regs.regs), self.edm_config, self.steps,
                tuple(self.irq_log), self.blkcnt)

"""Gold driver for the MockBlk controller.

Authoring rule: every conditional that depends on a request field or a value
read from the device goes through ``hal.hal_branch`` so the recorder can see
and explore it.
"""

from __future__ import annotations

from collections import Counter

from ..constraints import Eq, Mask
from ..simdev.core import PAGE_SIZE
from ..simdev.mockblk import (
    BLOCK_SIZE, CMD_NEW, CMD_READ_DMA, CMD_READ_PIO, CMD_SET_BLKCNT, CMD_WRITE_DMA,
    CMD_WRITE_PIO, DESC_BYTES, DIR_TO_MEDIUM, DMA_ADDR, DMA_CS, FIFO_DEPTH, SDARG, SDCMD,
    SDDATA, SDEDM, SDHCFG, SDHSTS, SDRST, STS_DONE, WORDS_PER_BLOCK,
)
from ..symexpr import Tracked
from .errors import DeviceError, DriverError

POLL_TIMEOUT = 256
IRQ_TIMEOUT = 1000
HCFG_DEFAULT = 0x0000_040F
EDM_CONFIG = 0x0008_0100
PIO_MAX_BLOCKS = 8
BLOCKS_PER_PAGE = PAGE_SIZE // BLOCK_SIZE
FIFO_FULL = Mask(FIFO_DEPTH, FIFO_DEPTH)

# driver-internal statistics; never reach the device
STATS: Counter = Counter()


def blk_reset(hal) -> None:
    hal.hal_write_reg(SDRST, 1)
    hal.hal_poll(SDRST, Eq(0), POLL_TIMEOUT)
    hal.hal_write_reg(SDHSTS, 0)


def blk_init(hal) -> None:
    blk_reset(hal)
    hal.hal_write_reg(SDHCFG, HCFG_DEFAULT)
    edm = hal.hal_read_reg(SDEDM)
    # calibration: remember whether the FIFO looked deep at probe time
    if hal.hal_branch((edm & 0xFF) > 8):
        STATS["deep_fifo_probe"] += 1
    hal.hal_write_reg(SDEDM, EDM_CONFIG)
    hal.hal_write_reg(SDHSTS, 0)


def _finish(hal) -> None:
    hal.hal_wait_irq(0, IRQ_TIMEOUT)
    sts = hal.hal_read_reg(SDHSTS)
    if not hal.hal_branch(sts.eq(STS_DONE)):
        raise DeviceError(f"controller reported status {int(sts):#x}")
    hal.hal_write_reg(SDHSTS, 0)


def _set_blkcnt(hal, count) -> None:
    hal.hal_write_reg(SDARG, count)
    hal.hal_write_reg(SDCMD, CMD_SET_BLKCNT)


def _issue(hal, blkaddr, cmd: int) -> None:
    hal.hal_write_reg(SDARG, blkaddr)
    hal.hal_write_reg(SDCMD, cmd)
    hal.hal_poll(SDCMD, Mask(CMD_NEW, 0), POLL_TIMEOUT)


def _pio(hal, write: bool, blkid, blkcnt, data_addr) -> None:
    """Shift every word through SDDATA, one FIFO-full at a time."""
    _set_blkcnt(hal, blkcnt)
    _issue(hal, blkid, CMD_WRITE_PIO if write else CMD_READ_PIO)
    b = 0
    while hal.hal_branch(blkcnt > b):
        block = data_addr + b * BLOCK_SIZE
        for chunk in range(WORDS_PER_BLOCK // FIFO_DEPTH):
            hal.hal_poll(SDEDM, FIFO_FULL, POLL_TIMEOUT)
            for w in range(FIFO_DEPTH):
                addr = block + (chunk * FIFO_DEPTH + w) * 4
                if write:
                    hal.hal_write_reg(SDDATA, hal.hal_mem_read(addr))
                else:
                    hal.hal_mem_write(addr, hal.hal_read_reg(SDDATA))
        b += 1
    _finish(hal)


def _dma(hal, write: bool, blkid, blkcnt, data_addr) -> None:
    """One 4 KB page and one chained descriptor per eight blocks."""
    start = blkid & ~Tracked.literal(7)
    npages = (blkcnt + (BLOCKS_PER_PAGE - 1)) >> 3
    descs = []
    while hal.hal_branch(npages > len(descs)):
        descs.append(hal.hal_dma_alloc(DESC_BYTES))
    pages = [hal.hal_dma_alloc(PAGE_SIZE) for _ in descs]
    lengths = []
    for i in range(len(pages)):
        remaining = blkcnt - BLOCKS_PER_PAGE * i
        if hal.hal_branch(remaining >= BLOCKS_PER_PAGE):
            lengths.append(PAGE_SIZE)
        else:
            lengths.append(remaining * BLOCK_SIZE)
    if write:
        for i, page in enumerate(pages):
            hal.hal_copy(page, data_addr + PAGE_SIZE * i, lengths[i])
    # fill back to front so a descriptor is complete before its address is
    # handed to the previous one
    for i in reversed(range(len(descs))):
        medium = (start + BLOCKS_PER_PAGE * i) * BLOCK_SIZE
        src, dst = (pages[i], medium) if write else (medium, pages[i])
        nxt = descs[i + 1] if i + 1 < len(descs) else 0
        words = (DIR_TO_MEDIUM if write else 0, src, dst, lengths[i], 0, nxt, 0, 0)
        for w, value in enumerate(words):
            hal.hal_mem_write(descs[i] + 4 * w, value)
    hal.hal_write_reg(DMA_ADDR, descs[0])
    _set_blkcnt(hal, blkcnt)
    _issue(hal, start, CMD_WRITE_DMA if write else CMD_READ_DMA)
    hal.hal_write_reg(DMA_CS, 1)
    _finish(hal)
    if not write:
        for i, page in enumerate(pages):
            hal.hal_copy(data_addr + PAGE_SIZE * i, page, lengths[i])
    for region in pages + descs:
        hal.hal_dma_free(region)


def blk_rw(hal, rw, blkid, blkcnt, data_addr) -> None:
    """Read (rw=0) or write (rw=1) ``blkcnt`` blocks starting at ``blkid``.

    Fewer than eight blocks go through PIO.  Larger requests use DMA when
    ``blkid`` is 8-block aligned; unaligned large requests fall back to PIO
    rather than touching blocks outside the request.
    """
    write = hal.hal_branch(rw.eq(1))
    if hal.hal_branch(blkcnt <= PIO_MAX_BLOCKS) and hal.hal_branch(blkcnt < PIO_MAX_BLOCKS):
        _pio(hal, write, blkid, blkcnt, data_addr)
    elif hal.hal_branch((blkid & 7).ne(0)):
        _pio(hal, write, blkid, blkcnt, data_addr)
    else:
        _dma(hal, write, blkid, blkcnt, data_addr)


def check_request(rw: int, blkid: int, blkcnt: int, capacity: int) -> None:
    if rw not in (0, 1):
        raise DriverError(f"rw must be 0 or 1, got {rw}")
    if blkcnt < 1:
        raise DriverError("blkcnt must be at least 1")
    if blkid < 0 or blkid + blkcnt > capacity:
        raise DriverError(f"blocks [{blkid}, {blkid + blkcnt}) exceed the device")

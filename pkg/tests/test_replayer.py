from dataclasses import replace

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from driverlet.constraints import AnyOf, Eq, Le, Range
from driverlet.golddriver import get_entry
from driverlet.hal import PLAIN, HalContext
from driverlet.replayer import (
    AMBIGUOUS, DIVERGED, NO_TEMPLATE, OK, Ambiguous, BoundsViolation, Divergence, Invocation,
    NoTemplate, Replayer, VerifiedPackage, VerifyFailed, load_package, replay_blk_rw,
    replay_stream_capture, verify_package,
)
from driverlet.recorder import write_campaign
from driverlet.simdev import FaultKind, FaultPlan, MockBlk, MockStream, frame_size
from driverlet.symexpr import Binary, Const, Sym
from driverlet.template import Event, serialize, sign

from conftest import KEY, by_name


def booted(package, seed=0, plan=FaultPlan(), dev_cls=MockBlk):
    rp = Replayer(package, dev_cls(seed, plan))
    assert rp.boot().ok
    return rp


def test_replayer_only_takes_verified_packages(block_campaign):
    with pytest.raises(TypeError):
        Replayer(block_campaign.templates, MockBlk(0))
    with pytest.raises(TypeError):
        Replayer(tuple(block_campaign.templates), MockBlk(0))


def test_verify_package_rejects_tampering(block_campaign):
    ts = list(block_campaign.templates)
    ts[3] = replace(ts[3], params=ts[3].params[::-1])
    with pytest.raises(VerifyFailed):
        verify_package(ts, KEY)
    with pytest.raises(VerifyFailed):
        verify_package(block_campaign.templates, b"wrong")


def test_load_package(tmp_path, block_campaign):
    write_campaign(block_campaign, str(tmp_path))
    pkg = load_package(str(tmp_path), KEY)
    assert len(pkg.templates) == len(block_campaign.templates)
    f = tmp_path / "templates" / "blk_rw_RD_8.tpl"
    f.write_bytes(f.read_bytes().replace(b"0x18", b"0x19", 1))
    with pytest.raises(VerifyFailed):
        load_package(str(tmp_path), KEY)


def test_read_write_round_trip(block_package):
    rp = booted(block_package, seed=3)
    payload = bytes(range(256)) * 16
    w = replay_blk_rw(rp, 1, 40, 8, payload)
    assert w.status == OK and w.attempts == 1
    assert rp.dev.medium.read_blocks(40, 8) == payload
    r = replay_blk_rw(rp, 0, 40, 8)
    assert r.ok and r.data == payload
    assert r.allocations == [0x20, 0x1000]


@pytest.mark.parametrize("args", [
    {"rw": 0, "blkid": 0, "blkcnt": 9}, {"rw": 0, "blkid": 3, "blkcnt": 8},
    {"rw": 2, "blkid": 0, "blkcnt": 1}, {"rw": 0, "blkid": 0},
])
def test_out_of_coverage_touches_nothing(block_package, args):
    rp = booted(block_package)
    before = rp.dev.access_count
    out = rp.invoke(Invocation("blk_rw", args))
    assert out.status == NO_TEMPLATE
    assert rp.dev.access_count == before
    with pytest.raises(NoTemplate):
        rp.select("blk_rw", args)


def test_execute_rechecks_coverage(block_package):
    rp = booted(block_package)
    rd8 = by_name(block_package.templates, "RD_8")
    out = rp.execute(rd8, Invocation("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 1}))
    assert out.status == NO_TEMPLATE
    with pytest.raises(ValueError):
        rp.execute(rd8, Invocation("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 8}, max_attempts=0))


def test_planted_overlap_is_ambiguous(block_campaign):
    rd8 = by_name(block_campaign.templates, "RD_8")
    wide = replace(rd8, name="RD_WIDE", mac=None,
                   params=[replace(p, constraint=AnyOf((p.constraint, Le(8))))
                           if p.name == "blkcnt" else p for p in rd8.params])
    pkg = verify_package(list(block_campaign.templates) + [sign(wide, KEY)], KEY)
    rp = booted(pkg)
    before = rp.dev.access_count
    out = replay_blk_rw(rp, 0, 0, 8)
    assert out.status == AMBIGUOUS and rp.dev.access_count == before
    with pytest.raises(Ambiguous):
        rp.select("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 8})


def test_transient_fault_is_retried(block_package):
    # only data transfers count as device jobs, so job 0 is the first request
    rp = booted(block_package, plan=FaultPlan(FaultKind.TRANSIENT_BAD_STATUS, 0))
    out = replay_blk_rw(rp, 0, 0, 8)
    assert out.status == OK and out.attempts == 2
    assert len(out.history) == 1 and out.history[0].template == "RD_8"


def test_failed_attempt_leaves_no_regions(block_package):
    rp = booted(block_package, plan=FaultPlan(FaultKind.PERSISTENT_MEDIUM_REMOVED, 0))
    out = replay_blk_rw(rp, 0, 0, 32)
    assert out.status == DIVERGED and out.attempts == 3
    assert out.divergence.template == "RD_32"
    assert out.divergence.source_loc.startswith("blk.py:")
    assert out.render().startswith(f"DIVERGED ev={out.divergence.event_index} ")
    assert not rp.dev.mem.regions


def test_write_is_transactional(block_package):
    """A retried write still leaves exactly the payload on the medium."""
    plan = FaultPlan(FaultKind.TRANSIENT_BAD_STATUS, 0, 0.3, rng_seed=11)
    rp = booted(block_package, plan=plan)
    for k in range(30):
        payload = bytes([k]) * (8 * 512)
        out = replay_blk_rw(rp, 1, 8 * k, 8, payload)
        assert out.ok, out.render()
        assert rp.dev.medium.read_blocks(8 * k, 8) == payload


def test_reset_device(block_package):
    rp = booted(block_package)
    assert rp.reset_device(by_name(block_package.templates, "BLK_RESET"))


def test_render_forms(block_package):
    rp = booted(block_package)
    assert replay_blk_rw(rp, 0, 0, 1).render() == "OK attempts=1"
    assert replay_blk_rw(rp, 0, 0, 2).render().startswith("NO_TEMPLATE blk_rw rw=0 blkid=0 blkcnt=2")


def test_stream_replay_sizes(stream_package):
    rp = booted(stream_package, seed=5, dev_cls=MockStream)
    out = replay_stream_capture(rp, 2, 10)
    assert out.ok and out.template == "ShortBurst"
    assert out.allocations[1:] == [frame_size(2, i, 5) for i in range(10)]


def test_boot_without_init(block_campaign):
    pkg = verify_package([t for t in block_campaign.templates if t.name != "BLK_INIT"], KEY)
    assert Replayer(pkg, MockBlk(0)).boot().status == NO_TEMPLATE


def test_divergence_carries_event_details():
    d = Divergence(4, Eq(1), 0x81, "blk.py:53", "status")
    assert d.event_index == 4 and d.observed == 0x81


# -- hostile templates ------------------------------------------------------------------

NAMES = ["rw", "blkid", "blkcnt", "data_addr", "dma_0", "nope"]
REGS = ["SDCMD", "SDARG", "SDHSTS", "DMA_CS", "DMA_ADDR", "BOGUS"]
big = st.integers(0, 2**64 - 1) | st.integers(0, 0x2000)
exprs = st.one_of(big.map(Const), st.sampled_from(NAMES).map(Sym),
                  st.tuples(st.sampled_from(["ADD", "MUL", "SUB"]), st.sampled_from(NAMES), big)
                  .map(lambda x: Binary(x[0], Sym(x[1]), Const(x[2]))))
events = st.one_of(
    st.builds(lambda r, v: Event("WRITE", reg=r, value=v), st.sampled_from(REGS), exprs),
    st.builds(lambda r: Event("READ", reg=r, constraint=Range(0, 2**32 - 1), binds=None),
              st.sampled_from(REGS)),
    st.builds(lambda v: Event("DMA_ALLOC", value=v, binds="dma_0"), exprs),
    st.builds(lambda g, o, v, w: Event("MEM_WRITE", region=g, offset=o, value=v, width=w),
              st.sampled_from(NAMES), exprs, exprs, st.sampled_from([1, 2, 4, 8])),
    st.builds(lambda g, o: Event("MEM_READ", region=g, offset=o, constraint=Range(0, 2**64 - 1),
                                 width=4, binds="m"), st.sampled_from(NAMES), exprs),
    st.builds(lambda g, o, s, so, n: Event("COPY", region=g, offset=o, src_region=s,
                                           src_offset=so, value=n),
              st.sampled_from(NAMES), exprs, st.sampled_from(NAMES), exprs, exprs),
    st.builds(lambda g, off, e: Event("LOAD_MEM", region=g, snapshot=0, fixups=((off, e),)),
              st.sampled_from(NAMES), st.integers(0, 64), exprs),
)


@pytest.fixture(scope="module")
def small_package(block_campaign):
    keep = ("BLK_INIT", "BLK_RESET", "RD_1", "WR_1")
    return {t.name: t for t in block_campaign.templates if t.name in keep}


def test_hostile_templates_cannot_escape_bounds(small_package):
    """Validly signed garbage either replays, diverges, or is stopped by a bounds check."""

    @settings(max_examples=300, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(st.lists(events, min_size=1, max_size=6), st.booleans())
    def check(evs, write):
        hostile_run(small_package, evs, write)

    check()


def hostile_run(ts, evs, write):
    base = ts["WR_1" if write else "RD_1"]
    evil = sign(replace(base, name="EVIL", events=evs, snapshots={0: bytes(16)}, mac=None), KEY)
    pkg = verify_package([evil, ts["BLK_INIT"], ts["BLK_RESET"]], KEY)
    rp = booted(pkg)
    args = {"rw": int(write), "blkid": 5, "blkcnt": 1}
    try:
        out = rp.execute(evil, Invocation("blk_rw", args, bytes(512) if write else None))
    except BoundsViolation:
        pass
    else:
        assert out.status in (OK, DIVERGED)
        assert len(out.data) <= 1 << 24
    assert not rp.dev.mem.regions

"""Headline acceptance criteria, one test each, at their stated tolerances.

Every test prints a single PASS/FAIL line (also collected into the session
summary) so a run of this file reads as a checklist.
"""

import math
import os
import random
import tempfile
import time
from contextlib import contextmanager

from driverlet.constraints import AlignedTo, Le
from driverlet.golddriver import get_entry
from driverlet.hal import PLAIN, HalContext
from driverlet.oracle import diff_oracle
from driverlet.recorder import campaign, record_run, record_template, write_campaign
from driverlet.replayer import (
    DIVERGED, NO_TEMPLATE, OK, Replayer, VerifyFailed, load_package, replay_blk_rw,
    replay_stream_capture,
)
from driverlet.simdev import LATENCY_MAX, LATENCY_MIN, FaultKind, FaultPlan, MockBlk, MockStream, frame_size
from driverlet.simdev.mockblk import SDARG
from driverlet.template import parse, serialize

from conftest import ACCEPTANCE, BLOCK_RUNS, KEY, by_name


@contextmanager
def criterion(name: str):
    start = time.perf_counter()
    try:
        yield
    except BaseException as e:
        line = ("FAIL", name, f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}")
        ACCEPTANCE.append(line)
        print(" ".join(line))
        raise
    line = ("PASS", name, f"{time.perf_counter() - start:.2f}s")
    ACCEPTANCE.append(line)
    print(" ".join(line))


def booted_blk(package, seed=0, plan=FaultPlan()):
    rp = Replayer(package, MockBlk(seed, plan))
    assert rp.boot().ok
    return rp


def test_campaign_shape():
    with criterion("campaign shape"):
        start = time.perf_counter()
        res = campaign(BLOCK_RUNS, seed=7, key=KEY)
        elapsed = time.perf_counter() - start
        requests = [t for t in res.templates if t.entry == "blk_rw"]
        assert len(requests) == 10
        assert sorted(t.name for t in res.templates if t.entry != "blk_rw") == ["BLK_INIT", "BLK_RESET"]
        for d in ("RD", "WR"):
            assert by_name(requests, f"{d}_1").count("DMA_ALLOC") == 0
            t32 = by_name(requests, f"{d}_32")
            sizes = [int(str(e.value), 0) for e in t32.events if e.kind == "DMA_ALLOC"]
            assert sorted(sizes) == [0x20] * 4 + [0x1000] * 4
            for n in (8, 128, 256):
                assert by_name(requests, f"{d}_{n}").count("DMA_ALLOC") == 2 * math.ceil(n / 8)
        assert elapsed < 10, f"campaign took {elapsed:.1f}s"


def test_constraint_discovery(tmp_path, block_campaign):
    with criterion("constraint discovery"):
        t, _, evidence = record_template("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 6}, seed=1)
        ev = next(e for e in evidence if e.constraint == Le(8))
        assert ev.symbol == "blkcnt" and ev.divergent and ev.reason == "skeleton"
        assert ev.forced_allocs > ev.base_allocs and ev.forced_item.startswith("DMA_ALLOC")
        write_campaign(block_campaign, str(tmp_path))
        tdir = tmp_path / "templates"
        rd6 = tmp_path / "rd6.tpl"
        rd6.write_bytes(serialize(t))
        blkcnt = parse(rd6.read_bytes()).param("blkcnt").constraint
        assert Le(8) in blkcnt.items and "<=8" in str(blkcnt)
        for d in ("RD", "WR"):
            for n in (8, 32, 128, 256):
                f = parse((tdir / f"blk_rw_{d}_{n}.tpl").read_bytes())
                assert AlignedTo(8) in f.param("blkid").constraint.items, f.name
            assert AlignedTo(8) not in parse((tdir / f"blk_rw_{d}_1.tpl").read_bytes()) \
                .param("blkid").constraint.items
        trace = (tmp_path / "evidence").iterdir()
        assert any("constraint=\"align8\"" in p.read_text() for p in trace)


def test_differential_faithfulness(block_package):
    with criterion("differential faithfulness"):
        start = time.perf_counter()
        report = diff_oracle(block_package, "blk_rw", trials=200, seed=2024)
        elapsed = time.perf_counter() - start
        assert report.total == 2000
        assert report.mismatches == [], report.format()
        assert elapsed < 30, f"oracle took {elapsed:.1f}s"


def test_poll_nondeterminism(block_package):
    with criterion("poll nondeterminism"):
        assert (LATENCY_MIN, LATENCY_MAX) == (1, 50)
        rp = booted_blk(block_package, seed=99)
        rng = random.Random(5)
        ok = 0
        for _ in range(1000):
            blkid = 8 * rng.randrange(0, 8000)
            out = replay_blk_rw(rp, 0, blkid, 8)
            ok += out.ok and out.attempts == 1 and out.data == rp.dev.medium.read_blocks(blkid, 8)
        assert ok == 1000, f"{ok}/1000 succeeded"
        rd8 = by_name(block_package.templates, "RD_8")
        run = record_run("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 8}, seed=7)
        sites = [e.source_loc for e in run.trace if e.kind == "POLL_EXIT"]
        polls = [e.source_loc for e in rd8.events if e.kind == "POLL"]
        assert polls == sites and len(polls) >= 1
        polled = {e.reg for e in rd8.events if e.kind == "POLL"}
        assert not any(e.kind == "READ" and e.reg in polled for e in rd8.events)


def test_fault_recovery(block_package):
    with criterion("fault recovery"):
        start = time.perf_counter()
        names = [f"{d}_{n}" for d in ("RD", "WR") for n in (1, 8, 32)]
        for kind in (FaultKind.TRANSIENT_BAD_STATUS, FaultKind.TRANSIENT_DELAY):
            rp = booted_blk(block_package, seed=3, plan=FaultPlan(kind, 0, 0.2, rng_seed=17))
            rng = random.Random(kind.value)
            retried = 0
            for k in range(1000):
                n = int(names[k % len(names)].split("_")[1])
                blkid = 8 * rng.randrange(0, 8000)
                write = names[k % len(names)].startswith("WR")
                payload = rng.randbytes(n * 512) if write else None
                out = replay_blk_rw(rp, int(write), blkid, n, payload)
                assert out.status == OK and out.attempts <= 3, (kind, k, out.render())
                if write:
                    assert rp.dev.medium.read_blocks(blkid, n) == payload
                retried += out.attempts > 1
            assert retried > 100, f"only {retried} retried jobs; fault rate too low to test"
        rp = booted_blk(block_package, plan=FaultPlan(FaultKind.PERSISTENT_MEDIUM_REMOVED, 0))
        out = replay_blk_rw(rp, 0, 0, 8)
        assert out.status == DIVERGED and out.attempts == 3
        d = out.divergence
        assert d.template == "RD_8" and d.event_index >= 0 and d.source_loc.startswith("blk.py:")
        assert f"ev={d.event_index}" in out.render() and f"src={d.source_loc}" in out.render()
        elapsed = time.perf_counter() - start
        assert elapsed < 60, f"fault recovery took {elapsed:.1f}s"


def test_out_of_coverage_rejection(block_package):
    with criterion("out-of-coverage rejection"):
        cases = [(0, 0, 9), (1, 0, 9)] + [(rw, b, n) for rw in (0, 1) for b in (1, 3, 7, 12)
                                          for n in (8, 32, 128, 256)]
        for rw, blkid, blkcnt in cases:
            dev = MockBlk(0)
            rp = Replayer(block_package, dev)
            out = replay_blk_rw(rp, rw, blkid, blkcnt, bytes(512 * blkcnt) if rw else None)
            assert out.status == NO_TEMPLATE, (rw, blkid, blkcnt, out.render())
            assert dev.access_count == 0


def test_template_integrity(tmp_path, block_campaign, stream_campaign):
    with criterion("template integrity"):
        root = tmp_path / "pkg"
        write_campaign(block_campaign, str(root))
        sroot = tmp_path / "spkg"
        write_campaign(stream_campaign, str(sroot))
        files = sorted((root / "templates").iterdir()) + sorted((sroot / "templates").iterdir())
        originals = {f: f.read_bytes() for f in files}
        rng = random.Random(10_000)
        detected = 0
        trials = 10_000
        for _ in range(trials):
            f = rng.choice(files)
            raw = bytearray(originals[f])
            i = rng.randrange(len(raw))
            raw[i] = (raw[i] + rng.randrange(1, 256)) % 256
            f.write_bytes(bytes(raw))
            dev = MockBlk(0)
            try:
                package = load_package(str(f.parent.parent), KEY)
            except VerifyFailed:
                detected += dev.access_count == 0
            else:
                Replayer(package, dev).boot()
            f.write_bytes(originals[f])
        assert detected == trials, f"{detected}/{trials} detected"


def test_determinism():
    with criterion("determinism"):
        a = campaign(BLOCK_RUNS, seed=7, key=KEY)
        b = campaign(BLOCK_RUNS, seed=7, key=KEY)
        assert a.files() == b.files()
        assert a.coverage == b.coverage
        with tempfile.TemporaryDirectory() as x, tempfile.TemporaryDirectory() as y:
            write_campaign(a, x)
            write_campaign(b, y)
            for rel in a.files():
                with open(os.path.join(x, rel), "rb") as fx, open(os.path.join(y, rel), "rb") as fy:
                    assert fx.read() == fy.read(), rel


def _gold_view(args, seed):
    dev = MockBlk(seed)
    get_entry("blk_init").invoke(HalContext(dev, PLAIN), {})
    dev.observe = True
    get_entry("blk_reset").invoke(HalContext(dev, PLAIN), {})
    get_entry("blk_rw").invoke(HalContext(dev, PLAIN), args)
    return _values(dev)


def _values(dev):
    return [o for o in dev.observed if (o[0] == "W" and o[1] == SDARG) or o[0] == "DMA"]


def test_taint_exactness(block_package):
    with criterion("taint exactness"):
        checked = 0
        for blkcnt in (8, 32, 128, 256):
            for blkid in range(0, 1025, 8):
                args = {"rw": 0, "blkid": blkid, "blkcnt": blkcnt}
                seed = blkid * 1000 + blkcnt
                gold = _gold_view(args, seed)
                rp = booted_blk(block_package, seed=seed)
                rp.dev.observe = True
                out = replay_blk_rw(rp, 0, blkid, blkcnt)
                assert out.ok, out.render()
                replay = _values(rp.dev)
                assert replay == gold, (blkid, blkcnt)
                assert ("W", SDARG, blkid) in replay
                assert sum(o[0] == "DMA" for o in replay) == math.ceil(blkcnt / 8)
                checked += 1
        assert checked == 129 * 4


def test_stream_device(stream_campaign, stream_package):
    with criterion("stream device"):
        requests = sorted(t.name for t in stream_campaign.templates if t.entry == "stream_capture")
        assert requests == ["LongBurst", "OneShot", "ShortBurst"]
        for t in stream_campaign.templates:
            if t.entry == "stream_capture":
                assert all(t.accepts({"resolution": r, "frames": f})
                           for r in (0, 1, 2) for f in ({"OneShot": 1, "ShortBurst": 10,
                                                         "LongBurst": 100}[t.name],))
        for seed in (1, 2, 3):
            rp = Replayer(stream_package, MockStream(seed))
            assert rp.boot().ok
            for res in (0, 1, 2):
                out = replay_stream_capture(rp, res, 10)
                assert out.ok and out.template == "ShortBurst"
                sized = out.allocations[1:]
                assert sized == [frame_size(res, i, seed) for i in range(10)]
        plan = FaultPlan(FaultKind.TRANSIENT_BAD_STATUS, 3)
        rp = Replayer(stream_package, MockStream(4, plan))
        assert rp.boot().ok
        out = replay_stream_capture(rp, 1, 10, max_attempts=1)
        assert out.status == DIVERGED and out.divergence.template == "ShortBurst"
        assert out.divergence.source_loc.startswith("stream.py:")
        rp = Replayer(stream_package, MockStream(4, plan))
        assert rp.boot().ok
        out = replay_stream_capture(rp, 1, 10)
        assert out.ok and out.attempts == 2

import random
from dataclasses import replace

from driverlet.oracle import compare_once, diff_oracle, observed_events, sample_args
from driverlet.replayer import verify_package
from driverlet.simdev import MockBlk
from driverlet.simdev.mockblk import SDARG
from driverlet.symexpr import Sym
from driverlet.template import sign

from conftest import KEY, by_name


def test_block_templates_agree_with_gold(block_package):
    report = diff_oracle(block_package, "blk_rw", trials=20, seed=1)
    assert report.total == 200
    assert report.mismatches == []
    assert report.format().endswith("total: 200 trials, 0 mismatches\n")


def test_stream_templates_agree_with_gold(stream_package):
    for name in ("OneShot", "ShortBurst"):
        report = diff_oracle(stream_package, "stream_capture", trials=3, seed=2, only=name)
        assert report.total == 3 and report.mismatches == []


def test_samples_stay_in_coverage(block_package):
    rng = random.Random(0)
    rd8 = by_name(block_package.templates, "RD_8")
    for _ in range(50):
        args = sample_args(rd8, rng)
        assert rd8.accepts(args) and args["blkid"] + 8 <= 65536


def test_wrong_taint_is_caught(block_campaign):
    """SDARG carries the block count where the block id belongs."""
    rd8 = by_name(block_campaign.templates, "RD_8")
    events = list(rd8.events)
    i = next(k for k, e in enumerate(events) if e.kind == "WRITE" and e.reg == "SDARG"
             and "blkid" in str(e.value))
    events[i] = replace(events[i], value=Sym("blkcnt"))
    bad = sign(replace(rd8, events=events, mac=None), KEY)
    pkg = verify_package([bad if t.name == "RD_8" else t for t in block_campaign.templates], KEY)
    report = diff_oracle(pkg, "blk_rw", trials=5, seed=3, only="RD_8")
    assert report.mismatches
    m = report.mismatches[0]
    if m.index is not None:
        # the device accepted the command and the logs differ at the SDARG write
        assert m.gold[:2] == ("W", SDARG) and m.replay == ("W", SDARG, 8)
    else:
        # the device refused the inconsistent command; the divergence names the event
        assert m.reason.startswith("replay DIVERGED ev=") and "src=blk.py:" in m.reason
    assert "MISMATCH RD_8" in report.format()


def test_poll_reads_are_filtered():
    dev = MockBlk(0)
    dev.observed = [("R", 0x00, 5), ("R", 0x20, 1), ("W", 0x04, 3)]
    assert observed_events(dev) == [("R", 0x20, 1), ("W", 0x04, 3)]


def test_compare_once_write(block_package):
    wr = by_name(block_package.templates, "WR_32")
    payload = bytes(range(256)) * 64
    assert compare_once(block_package, wr, {"rw": 1, "blkid": 64, "blkcnt": 32}, payload, 9) is None

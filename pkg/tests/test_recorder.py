import pytest
from hypothesis import given, settings, strategies as st

from driverlet.constraints import AlignedTo, All, Eq, Ge, Gt, Le, Lt, Mask, Ne, Range, satisfies
from driverlet.golddriver import DriverError
from driverlet.recorder import (
    POLL_FLOOR, DistillError, campaign, distill, explore, find_witness, branch_constraint,
    parse_manifest, record_run, record_template, write_campaign,
)
from driverlet.symexpr import Binary, Const, Sym, evaluate, parse_expr
from driverlet.template import parse, serialize, verify

from conftest import KEY, by_name

X = Sym("x")


@pytest.mark.parametrize("cond,taken,is_param,expected", [
    ("(LE x 8)", True, True, Le(8)),
    ("(LE x 8)", False, True, Gt(8)),
    ("(LT x 8)", True, True, Lt(8)),
    ("(GT 8 x)", True, True, Lt(8)),
    ("(EQ x 1)", False, True, Ne(1)),
    ("(GE x 3)", True, True, Ge(3)),
    ("(NE (AND x 7) 0)", False, True, AlignedTo(8)),
    ("(EQ (AND x 0xf0) 0x30)", True, True, Mask(0xF0, 0x30)),
    ("x", True, True, Ne(0)),
    ("(LT (ADD x 1) 9)", True, True, Eq(5)),
    ("(EQ x 1)", True, False, Eq(1)),
    ("(LT x 8)", True, False, Eq(5)),
    ("(EQ x y)", True, False, Eq(Sym("y"))),
])
def test_branch_constraint_table(cond, taken, is_param, expected):
    assert branch_constraint(parse_expr(cond), taken, "x", 5, is_param) == expected


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["LE", "LT", "GE", "GT", "EQ", "NE"]), st.integers(0, 300),
       st.integers(0, 300))
def test_branch_constraint_holds_for_the_recorded_value(op, c, v):
    cond = Binary(op, X, Const(c))
    taken = evaluate(cond, {"x": v}) != 0
    k = branch_constraint(cond, taken, "x", v, True)
    assert satisfies(k, v)
    # and it is exact: it holds iff the branch goes the same way
    for w in (0, c - 1, c, c + 1, v, 400):
        if w >= 0:
            assert satisfies(k, w) == ((evaluate(cond, {"x": w}) != 0) == taken)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(["LE", "LT", "GE", "GT", "EQ", "NE"]), st.integers(0, 100),
       st.integers(0, 100))
def test_witness_is_smallest_flipping_value(op, c, v):
    cond = Binary(op, X, Const(c))
    taken = evaluate(cond, {"x": v}) != 0
    w = find_witness(cond, taken, "x", {"x": v}, Range(0, 1000))
    flips = [u for u in range(0, 1001) if (evaluate(cond, {"x": u}) != 0) != taken]
    assert w == (flips[0] if flips else None)


def test_witness_respects_domain():
    cond = parse_expr("(LE x 8)")
    assert find_witness(cond, True, "x", {"x": 6}, Range(1, 65536)) == 9
    assert find_witness(cond, True, "x", {"x": 6}, Range(1, 8)) is None


def test_record_run_blkcnt6_is_pio():
    run = record_run("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 6}, seed=1)
    assert run.allocations == [] or len(run.allocations) == 0
    first = next(e for e in run.trace if e.kind == "BRANCH" and "blkcnt" in str(e.expr))
    assert str(first.expr) == "(LE blkcnt 8)" and first.value == 1
    assert len(run.output) == 6 * 512


def test_blkcnt6_exploration_finds_le8_with_dma_evidence():
    t, run, evidence = record_template("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 6}, seed=1)
    ev = next(e for e in evidence if str(e.condition) == "(LE blkcnt 8)")
    assert ev.witness == 9 and ev.divergent and ev.constraint == Le(8)
    assert (ev.base_allocs, ev.forced_allocs) == (0, 1)
    assert ev.forced_item.startswith("DMA_ALLOC")
    assert Le(8) in t.param("blkcnt").constraint.items
    assert t.count("DMA_ALLOC") == 0


def test_dma_runs_derive_alignment(block_campaign):
    for name in ("RD_8", "RD_32", "WR_128", "WR_256"):
        c = by_name(block_campaign.templates, name).param("blkid").constraint
        assert AlignedTo(8) in c.items


def test_tainted_register_values():
    t, _, _ = record_template("blk_rw", {"rw": 0, "blkid": 16, "blkcnt": 8})
    sdarg = [str(e.value) for e in t.events if e.kind == "WRITE" and e.reg == "SDARG"]
    assert sdarg == ["blkcnt", "(AND blkid (NOT 7))"]
    fix = next(e for e in t.events if e.kind == "LOAD_MEM").fixups
    assert str(fix[0][1]) == "(MUL (AND blkid (NOT 7)) 0x200)"


def test_poll_lifting():
    t, run, _ = record_template("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 8})
    polls = [e for e in t.events if e.kind == "POLL"]
    assert polls
    for p in polls:
        assert p.timeout >= POLL_FLOOR
    raw_reads = [e for e in t.events if e.kind == "READ" and e.reg == "SDCMD"]
    assert raw_reads == []


def test_device_input_branches_are_not_explored_for_non_inputs():
    run = record_run("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 1})
    evidence = explore(run)
    assert all(e.symbol in run.symbol_kind for e in evidence)


def test_record_run_rejects_bad_args():
    with pytest.raises(DriverError):
        record_run("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 0})


def test_recording_is_deterministic():
    a = record_template("blk_rw", {"rw": 1, "blkid": 8, "blkcnt": 32}, seed=3)[0]
    b = record_template("blk_rw", {"rw": 1, "blkid": 8, "blkcnt": 32}, seed=3)[0]
    assert serialize(a) == serialize(b)


def test_block_campaign_shape(block_campaign):
    names = sorted(t.name for t in block_campaign.templates)
    assert names == sorted([f"{d}_{n}" for d in ("RD", "WR") for n in (1, 8, 32, 128, 256)]
                           + ["BLK_INIT", "BLK_RESET"])
    assert block_campaign.overlaps == [] and block_campaign.errors == []
    assert all(verify(t, KEY) for t in block_campaign.templates)
    assert by_name(block_campaign.templates, "RD_1").accepts({"rw": 0, "blkid": 77, "blkcnt": 1})


def test_campaign_merges_same_path_runs():
    runs = [("blk_rw", {"rw": 0, "blkid": 0, "blkcnt": 8}),
            ("blk_rw", {"rw": 0, "blkid": 64, "blkcnt": 8})]
    res = campaign(runs, seed=0, key=KEY)
    assert [t.name for t in res.templates if t.entry == "blk_rw"] == ["RD_8"]


def test_campaign_reports_bad_runs():
    res = campaign([("blk_rw", {"rw": 5, "blkid": 0, "blkcnt": 1})], seed=0, key=KEY)
    assert len(res.errors) == 1
    assert {t.name for t in res.templates} == {"BLK_INIT", "BLK_RESET"}


def test_write_campaign(tmp_path, block_campaign):
    paths = write_campaign(block_campaign, str(tmp_path))
    assert (tmp_path / "coverage.txt").read_text() == block_campaign.coverage
    tpl = tmp_path / "templates" / "blk_rw_RD_8.tpl"
    assert parse(tpl.read_bytes()) == by_name(block_campaign.templates, "RD_8")
    assert len(list((tmp_path / "evidence").iterdir())) == len(block_campaign.reports)
    assert len(paths) == len(block_campaign.files())


def test_manifest():
    text = "# runs\nrun blk_rw rw=0 blkid=0x10 blkcnt=8\n\nrun stream_capture resolution=1 frames=10  # burst\n"
    assert parse_manifest(text) == [("blk_rw", {"rw": 0, "blkid": 16, "blkcnt": 8}),
                                    ("stream_capture", {"resolution": 1, "frames": 10})]
    for bad in ("go blk_rw", "run", "run blk_rw rw"):
        with pytest.raises(ValueError):
            parse_manifest(bad)


def test_stream_campaign_shape(stream_campaign):
    names = {t.name for t in stream_campaign.templates if t.entry == "stream_capture"}
    assert names == {"OneShot", "ShortBurst", "LongBurst"}
    short = by_name(stream_campaign.templates, "ShortBurst")
    sized = [e for e in short.events if e.kind == "DMA_ALLOC" and e.value.__class__ is Sym]
    assert len(sized) == 10  # one per frame, sized by the device's reply
    assert short.count("DMA_ALLOC") == 11  # plus the fixed message buffer
    assert short.param("resolution").constraint is not None
    assert all(short.accepts({"resolution": r, "frames": 10}) for r in (0, 1, 2))
    assert not short.accepts({"resolution": 3, "frames": 10})
    assert stream_campaign.overlaps == []

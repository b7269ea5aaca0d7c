import subprocess
import sys

import pytest

from driverlet.cli import load_medium, main, resolve_key, save_medium
from driverlet.replayer import Invocation, Replayer, load_package
from driverlet.simdev import MockBlk

from conftest import KEY

MANIFEST = """# small block campaign
run blk_rw rw=0 blkid=0 blkcnt=1
run blk_rw rw=0 blkid=0 blkcnt=8
run blk_rw rw=1 blkid=0 blkcnt=8
"""


@pytest.fixture(scope="module")
def recorded(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "key").write_bytes(KEY)
    (root / "runs.txt").write_text(MANIFEST)
    code = main(["record", "--manifest", str(root / "runs.txt"), "--out", str(root / "out"),
                 "--key", str(root / "key")])
    assert code == 0
    return root


def cli(recorded, *words):
    return main(list(words) + ["--templates", str(recorded / "out"), "--key", str(recorded / "key")])


def test_record_writes_files(recorded):
    names = sorted(p.name for p in (recorded / "out" / "templates").iterdir())
    assert names == ["blk_init_BLK_INIT.tpl", "blk_reset_BLK_RESET.tpl", "blk_rw_RD_1.tpl",
                     "blk_rw_RD_8.tpl", "blk_rw_WR_8.tpl"]
    assert (recorded / "out" / "coverage.txt").read_text().startswith("blk_rw(")


def test_replay_matches_library(recorded, capsys, tmp_path):
    out = tmp_path / "read.bin"
    code = cli(recorded, "replay", "--entry", "blk_rw", "rw=0", "blkid=16", "blkcnt=8",
               "--seed", "4", "--out", str(out))
    assert code == 0
    assert capsys.readouterr().out == "OK attempts=1\n"
    rp = Replayer(load_package(str(recorded / "out"), KEY), MockBlk(4), env_seed=4)
    rp.boot()
    lib = rp.invoke(Invocation("blk_rw", {"rw": 0, "blkid": 16, "blkcnt": 8}))
    assert lib.ok and out.read_bytes() == lib.data


def test_exit_codes(recorded, capsys):
    assert cli(recorded, "replay", "--entry", "blk_rw", "rw=0", "blkid=0", "blkcnt=9") == 2
    assert capsys.readouterr().out.startswith("NO_TEMPLATE")
    assert cli(recorded, "replay", "--entry", "blk_rw", "rw=0", "blkid=0", "blkcnt=8",
               "--fault", "medium-removed") == 3
    assert capsys.readouterr().out.startswith("DIVERGED ev=")
    assert cli(recorded, "replay", "--entry", "blk_rw", "rw=0", "blkid=0", "blkcnt=8",
               "--fault", "transient-bad-status") == 0
    assert capsys.readouterr().out == "OK attempts=2\n"
    assert cli(recorded, "replay", "--entry", "blk_rw", "rw=0", "blkid=0", "blkcnt=8",
               "--fault", "medium-removed", "--max-attempts", "1") == 3
    assert cli(recorded, "replay", "--entry", "nope") == 1
    assert cli(recorded, "replay", "--entry", "blk_rw", "rw=1", "blkid=0", "blkcnt=8") == 1
    assert main(["replay"]) == 1
    assert main(["frobnicate"]) == 1


def test_verify_failure_exit_code(recorded, tmp_path, capsys):
    bad = tmp_path / "bad"
    (bad / "templates").mkdir(parents=True)
    for p in (recorded / "out" / "templates").iterdir():
        (bad / "templates" / p.name).write_bytes(p.read_bytes())
    f = bad / "templates" / "blk_rw_RD_8.tpl"
    f.write_bytes(f.read_bytes().replace(b"SDARG", b"SDARH", 1))
    key = str(recorded / "key")
    assert main(["verify", "--templates", str(bad), "--key", key]) == 4
    assert main(["replay", "--templates", str(bad), "--key", key, "--entry", "blk_rw",
                 "rw=0", "blkid=0", "blkcnt=1"]) == 4
    assert "VERIFY_FAILED" in capsys.readouterr().out
    assert main(["verify", "--templates", str(recorded / "out"), "--key", key]) == 0


def test_medium_round_trip(recorded, tmp_path, capsys):
    medium = tmp_path / "disk.bin"
    data = tmp_path / "in.bin"
    data.write_bytes(bytes(range(256)) * 16)
    assert cli(recorded, "replay", "--entry", "blk_rw", "rw=1", "blkid=24", "blkcnt=8",
               "--data-file", str(data), "--medium", str(medium)) == 0
    back = tmp_path / "back.bin"
    assert cli(recorded, "replay", "--entry", "blk_rw", "rw=0", "blkid=24", "blkcnt=8",
               "--medium", str(medium), "--out", str(back)) == 0
    assert back.read_bytes() == data.read_bytes()
    dev = MockBlk(0)
    load_medium(dev, str(medium))
    assert dev.medium.read_blocks(24, 8) == data.read_bytes()
    save_medium(dev, str(tmp_path / "copy.bin"))
    assert (tmp_path / "copy.bin").read_bytes() == medium.read_bytes()


def test_coverage_and_oracle(recorded, capsys):
    assert main(["coverage", "--templates", str(recorded / "out")]) == 0
    text = capsys.readouterr().out
    assert text == (recorded / "out" / "coverage.txt").read_text()
    assert "RD_8:" in text and "BLK_INIT" not in text
    assert cli(recorded, "diff-oracle", "--entry", "blk_rw", "--trials", "5") == 0
    assert capsys.readouterr().out.endswith("total: 15 trials, 0 mismatches\n")


def test_key_resolution(tmp_path, monkeypatch):
    f = tmp_path / "k"
    f.write_bytes(b"abc")
    assert resolve_key(str(f)) == b"abc"
    monkeypatch.setenv("DRIVERLET_KEY", str(f))
    assert resolve_key(None) == b"abc"
    monkeypatch.setenv("DRIVERLET_KEY", "literal-key")
    assert resolve_key(None) == b"literal-key"
    monkeypatch.delenv("DRIVERLET_KEY")
    assert main(["verify", "--templates", str(tmp_path)]) == 1


def test_module_entry_point(recorded):
    res = subprocess.run([sys.executable, "-m", "driverlet", "verify", "--templates",
                          str(recorded / "out"), "--key", str(recorded / "key")],
                         capture_output=True, text=True)
    assert res.returncode == 0 and res.stdout.startswith("OK 5 templates")

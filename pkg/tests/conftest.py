import pytest

from driverlet.recorder import campaign
from driverlet.replayer import verify_package

KEY = b"test-signing-key"
BLOCK_COUNTS = (1, 8, 32, 128, 256)
BLOCK_RUNS = [("blk_rw", {"rw": rw, "blkid": 0, "blkcnt": n}) for rw in (0, 1) for n in BLOCK_COUNTS]
STREAM_RUNS = [("stream_capture", {"resolution": res, "frames": f})
               for f in (1, 10, 100) for res in (0, 1, 2)]


@pytest.fixture(scope="session")
def key():
    return KEY


@pytest.fixture(scope="session")
def block_campaign():
    return campaign(BLOCK_RUNS, seed=7, key=KEY)


@pytest.fixture(scope="session")
def block_package(block_campaign):
    return verify_package(block_campaign.templates, KEY)


@pytest.fixture(scope="session")
def stream_campaign():
    return campaign(STREAM_RUNS, seed=7, key=KEY)


@pytest.fixture(scope="session")
def stream_package(stream_campaign):
    return verify_package(stream_campaign.templates, KEY)


def by_name(templates, name):
    return next(t for t in templates if t.name == name)


# acceptance criteria outcomes, printed once at the end of the session
ACCEPTANCE: list[tuple[str, str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for verdict, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{verdict} {name}: {detail}")

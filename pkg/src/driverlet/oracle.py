"""Differential oracle: gold driver and replayer on twin-seeded devices.

Both sides start from a freshly booted device with the same seed.  The gold
driver then runs reset + request in plain mode; the replayer runs the
selected template (which performs its own reset).  What each device observed
is compared event by event, along with the returned data.  Reads of the
registers a driver polls are dropped first: how many times a poll spins is
timing, not behavior.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .constraints import sample
from .golddriver import DATA_IN, DriverError, get_entry
from .hal import PLAIN, HalContext
from .replayer import Invocation, Replayer, VerifiedPackage
from .simdev import new_device
from .simdev.core import PHYS_BASE, PHYS_LIMIT
from .simdev.mockblk import SDCMD, SDEDM, SDRST
from .template import InteractionTemplate

POLLED = {"mockblk": {SDCMD, SDEDM, SDRST}, "mockstream": set()}
# stream buffers are freed per frame by the gold driver but held for the
# whole attempt by the replayer, so their addresses legitimately differ
CANONICAL_ADDRESSES = {"mockblk": False, "mockstream": True}
SAMPLE_TRIES = 256


@dataclass
class Mismatch:
    template: str
    args: dict
    reason: str
    index: int | None = None
    gold: object = None
    replay: object = None

    def format(self) -> str:
        args = " ".join(f"{k}={v}" for k, v in self.args.items())
        where = "" if self.index is None else f" at observed event {self.index}: gold={self.gold} replay={self.replay}"
        return f"{self.template} {args}: {self.reason}{where}"


@dataclass
class OracleReport:
    entry: str
    trials: dict[str, int] = field(default_factory=dict)
    mismatches: list[Mismatch] = field(default_factory=list)

    @property
    def total(self) -> int:
        return sum(self.trials.values())

    def format(self) -> str:
        lines = [f"{name}: {n} trials, {sum(1 for m in self.mismatches if m.template == name)} mismatches"
                 for name, n in self.trials.items()]
        lines += ["MISMATCH " + m.format() for m in self.mismatches]
        lines.append(f"total: {self.total} trials, {len(self.mismatches)} mismatches")
        return "\n".join(lines) + "\n"


def observed_events(dev) -> list[tuple]:
    """The device's observation log with poll-site reads removed."""
    polled = POLLED.get(dev.device_id, set())
    canon = CANONICAL_ADDRESSES.get(dev.device_id, False)
    out = []
    for item in dev.observed:
        if item[0] == "R" and item[1] in polled:
            continue
        if canon:
            item = tuple("addr" if isinstance(v, int) and PHYS_BASE <= v < PHYS_LIMIT else v
                         for v in item)
        out.append(item)
    return out


def sample_args(t: InteractionTemplate, rng: random.Random) -> dict | None:
    """Random scalar arguments inside ``t``'s coverage that the entry also accepts."""
    spec = get_entry(t.entry)
    for _ in range(SAMPLE_TRIES):
        args = {p.name: sample(p.constraint, rng) for p in t.scalar_params()}
        if any(v is None for v in args.values()):
            return None
        try:
            spec.check(args)
        except DriverError:
            continue
        return args
    return None


def gold_device(entry: str, seed: int):
    """A booted device (gold init) with observation switched on."""
    spec = get_entry(entry)
    dev = new_device(spec.device, seed)
    get_entry(spec.init).invoke(HalContext(dev, PLAIN), {})
    dev.observed.clear()
    dev.observe = True
    return dev


def run_gold(entry: str, args: dict, payload: bytes | None, seed: int):
    spec = get_entry(entry)
    dev = gold_device(entry, seed)
    get_entry(spec.reset).invoke(HalContext(dev, PLAIN), {})
    result = spec.invoke(HalContext(dev, PLAIN), args, payload)
    return dev, result.data


def compare_once(package: VerifiedPackage, t: InteractionTemplate,
                 args: dict, payload: bytes | None, seed: int) -> Mismatch | None:
    spec = get_entry(t.entry)
    try:
        gdev, gdata = run_gold(t.entry, args, payload, seed)
    except DriverError as e:
        return Mismatch(t.name, args, f"gold driver failed: {e}")
    rdev = new_device(spec.device, seed)
    rp = Replayer(package, rdev)
    booted = rp.boot()
    if not booted.ok:
        return Mismatch(t.name, args, f"replayer boot {booted.render()}")
    rdev.observed.clear()
    rdev.observe = True
    out = rp.execute(t, Invocation(t.entry, args, payload))
    if not out.ok:
        return Mismatch(t.name, args, f"replay {out.render()}")
    g, r = observed_events(gdev), observed_events(rdev)
    if g != r:
        i = next((k for k, (a, b) in enumerate(zip(g, r)) if a != b), min(len(g), len(r)))
        return Mismatch(t.name, args, "device observed different events", i,
                        g[i] if i < len(g) else "<end>", r[i] if i < len(r) else "<end>")
    writing = spec.data_role(args) == DATA_IN
    if not writing and out.data != gdata:
        return Mismatch(t.name, args, "returned data differs")
    if writing and spec.name == "blk_rw":
        lo, n = args["blkid"], args["blkcnt"]
        if rdev.medium.read_blocks(lo, n) != payload:
            return Mismatch(t.name, args, "medium does not hold the written payload")
        back = rp.invoke(Invocation("blk_rw", dict(args, rw=0)))
        if back.ok and back.data != payload:
            return Mismatch(t.name, args, "read-back differs from written payload")
        if not back.ok:
            _, gback = run_gold_read(rdev, lo, n)
            if gback != payload:
                return Mismatch(t.name, args, "read-back differs from written payload")
    return None


def run_gold_read(dev, blkid: int, blkcnt: int):
    spec = get_entry("blk_rw")
    get_entry(spec.reset).invoke(HalContext(dev, PLAIN), {})
    res = spec.invoke(HalContext(dev, PLAIN), {"rw": 0, "blkid": blkid, "blkcnt": blkcnt})
    return dev, res.data


def diff_oracle(package: VerifiedPackage, entry: str, trials: int, seed: int = 0,
                only: str | None = None) -> OracleReport:
    """``trials`` random in-coverage invocations per request template of ``entry``."""
    templates = package.templates
    report = OracleReport(entry)
    rng = random.Random(seed)
    spec = get_entry(entry)
    targets = [t for t in templates if t.entry == entry and (only is None or t.name == only)]
    for t in targets:
        report.trials[t.name] = 0
        for k in range(trials):
            args = sample_args(t, rng)
            if args is None:
                report.mismatches.append(Mismatch(t.name, {}, "no in-coverage input found"))
                break
            trial_seed = rng.getrandbits(32)
            payload = None
            if spec.data_role(args) == DATA_IN:
                payload = rng.randbytes(spec.payload_size(args))
            report.trials[t.name] += 1
            m = compare_once(package, t, args, payload, trial_seed)
            if m is not None:
                report.mismatches.append(m)
    return report

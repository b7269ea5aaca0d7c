"""Command line front end.  Every subcommand is a thin wrapper over the library.

Exit codes: 0 ok, 1 internal or usage error, 2 out of coverage, 3 diverged
(or oracle mismatches), 4 verification failure.
"""

from __future__ import annotations

import argparse
import os
import struct
import sys

from . import __version__
from .golddriver import DATA_IN, DriverError, get_entry
from .oracle import diff_oracle
from .recorder import CampaignError, campaign, parse_manifest, write_campaign
from .replayer import (
    AMBIGUOUS, DIVERGED, NO_TEMPLATE, OK, Invocation, Replayer, VerifyFailed, load_package,
)
from .simdev import FaultKind, FaultPlan, new_device
from .simdev.mockblk import BLOCK_SIZE
from .template import ParseError, TemplateError, coverage_report, parse

EXIT_OK, EXIT_INTERNAL, EXIT_COVERAGE, EXIT_DIVERGED, EXIT_VERIFY = 0, 1, 2, 3, 4
STATUS_EXIT = {OK: EXIT_OK, NO_TEMPLATE: EXIT_COVERAGE, AMBIGUOUS: EXIT_INTERNAL,
               DIVERGED: EXIT_DIVERGED}
KEY_ENV = "DRIVERLET_KEY"
FAULTS = {k.value: k for k in FaultKind if k is not FaultKind.NONE}
_BLOCK_HEAD = struct.Struct("<I")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage, which would read as "out of coverage"
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- helpers --------------------------------------------------------------------------

def resolve_key(path: str | None) -> bytes:
    """``--key`` names a file.  Otherwise DRIVERLET_KEY is a file path if one
    exists under that name, else the key itself."""
    if path is not None:
        if not os.path.isfile(path):
            raise UsageError(f"key file {path} does not exist")
        with open(path, "rb") as f:
            key = f.read().rstrip(b"\r\n")
    else:
        env = os.environ.get(KEY_ENV)
        if not env:
            raise UsageError(f"no key: pass --key or set {KEY_ENV}")
        if os.path.isfile(env):
            with open(env, "rb") as f:
                key = f.read().rstrip(b"\r\n")
        else:
            key = env.encode("utf-8")
    if not key:
        raise UsageError("the MAC key is empty")
    return key


def parse_assignments(words: list[str]) -> dict[str, int]:
    args = {}
    for w in words:
        name, sep, value = w.partition("=")
        if not sep or not name:
            raise UsageError(f"expected name=value, got {w!r}")
        try:
            args[name] = int(value, 0)
        except ValueError:
            raise UsageError(f"{name}: {value!r} is not an integer") from None
    return args


def load_medium(dev, path: str) -> None:
    """Sparse medium file: repeated (u32 block id, 512 bytes)."""
    with open(path, "rb") as f:
        raw = f.read()
    rec = _BLOCK_HEAD.size + BLOCK_SIZE
    if len(raw) % rec:
        raise UsageError(f"{path} is not a medium file")
    for pos in range(0, len(raw), rec):
        (blk,) = _BLOCK_HEAD.unpack_from(raw, pos)
        if blk >= dev.medium.num_blocks:
            raise UsageError(f"{path}: block {blk} beyond the device")
        dev.medium.blocks[blk] = raw[pos + _BLOCK_HEAD.size:pos + rec]


def save_medium(dev, path: str) -> None:
    with open(path, "wb") as f:
        for blk in sorted(dev.medium.blocks):
            f.write(_BLOCK_HEAD.pack(blk) + dev.medium.blocks[blk])


def _template_dir(path: str) -> str:
    if not os.path.isdir(path):
        raise UsageError(f"template directory {path} does not exist")
    return path


# -- subcommands -----------------------------------------------------------------------

def cmd_record(manifest_path: str, out_dir: str, seed: int, key: bytes, workers: int = 1,
               out=None, err=None) -> int:
    out, err = out or sys.stdout, err or sys.stderr
    with open(manifest_path, encoding="utf-8") as f:
        try:
            runs = parse_manifest(f.read())
        except ValueError as e:
            print(f"error: {e}", file=err)
            return EXIT_INTERNAL
    try:
        result = campaign(runs, seed, key, workers)
    except (CampaignError, KeyError) as e:
        print(f"error: {e}", file=err)
        return EXIT_INTERNAL
    write_campaign(result, out_dir)
    out.write(result.coverage)
    for e in result.errors:
        print(f"run failed: {e}", file=err)
    for a, b in result.overlaps:
        print(f"error: templates {a} and {b} overlap", file=err)
    print(f"{len(result.templates)} templates written to {out_dir}", file=err)
    return EXIT_INTERNAL if result.errors or result.overlaps else EXIT_OK


def fault_plan(kind: str | None, job: int = 0, prob: float = 0.0, seed: int = 0) -> FaultPlan:
    if kind is None:
        return FaultPlan()
    if kind not in FAULTS:
        raise UsageError(f"unknown fault {kind!r}; choose from {', '.join(FAULTS)}")
    return FaultPlan(FAULTS[kind], job, prob, seed)


def cmd_replay(template_dir: str, entry: str, args: dict, key: bytes, *, seed: int = 0,
               plan: FaultPlan = FaultPlan(), data_file: str | None = None,
               out_file: str | None = None, medium: str | None = None,
               max_attempts: int = 3, out=None, err=None) -> int:
    out, err = out or sys.stdout, err or sys.stderr
    try:
        package = load_package(_template_dir(template_dir), key)
    except VerifyFailed as e:
        print(f"VERIFY_FAILED {e}", file=out)
        return EXIT_VERIFY
    try:
        spec = get_entry(entry)
    except KeyError as e:
        raise UsageError(str(e.args[0])) from None
    dev = new_device(spec.device, seed, plan)
    if medium is not None and os.path.exists(medium):
        if not hasattr(dev, "medium"):
            raise UsageError(f"{spec.device} has no medium")
        load_medium(dev, medium)
    data = None
    if data_file is not None:
        with open(data_file, "rb") as f:
            data = f.read()
    elif spec.has_data and spec.data_role(args) == DATA_IN:
        raise UsageError(f"{entry} with these arguments writes data: pass --data-file")
    rp = Replayer(package, dev, max_attempts=max_attempts, env_seed=seed)
    booted = rp.boot()
    if not booted.ok:
        print(f"boot {booted.render()}", file=out)
        return STATUS_EXIT.get(booted.status, EXIT_INTERNAL)
    outcome = rp.invoke(Invocation(entry, args, data, max_attempts))
    print(outcome.render(), file=out)
    for h in outcome.history:
        print(f"  attempt failed in {h.template}: {h.format()}", file=err)
    if outcome.ok:
        if out_file is not None:
            with open(out_file, "wb") as f:
                f.write(outcome.data)
        if medium is not None:
            save_medium(dev, medium)
    return STATUS_EXIT.get(outcome.status, EXIT_INTERNAL)


def read_templates(template_dir: str, key: bytes | None):
    if key is not None:
        return list(load_package(_template_dir(template_dir), key).templates)
    tdir = os.path.join(_template_dir(template_dir), "templates")
    tdir = tdir if os.path.isdir(tdir) else template_dir
    out = []
    for n in sorted(os.listdir(tdir)):
        if n.endswith(".tpl"):
            with open(os.path.join(tdir, n), "rb") as f:
                out.append(parse(f.read()))
    return out


def cmd_coverage(template_dir: str, key: bytes | None = None, entry: str | None = None,
                 out=None) -> int:
    out = out or sys.stdout
    try:
        templates = read_templates(template_dir, key)
    except VerifyFailed as e:
        print(f"VERIFY_FAILED {e}", file=out)
        return EXIT_VERIFY
    out.write(coverage_report([t for t in templates if _is_request(t)], entry))
    return EXIT_OK


def _is_request(t) -> bool:
    try:
        return get_entry(t.entry).kind == "request"
    except KeyError:
        return True


def cmd_diff_oracle(template_dir: str, entry: str, trials: int, seed: int, key: bytes,
                    out=None) -> int:
    out = out or sys.stdout
    if trials < 0:
        raise UsageError("--trials must be non-negative")
    try:
        package = load_package(_template_dir(template_dir), key)
    except VerifyFailed as e:
        print(f"VERIFY_FAILED {e}", file=out)
        return EXIT_VERIFY
    report = diff_oracle(package, entry, trials, seed)
    out.write(report.format())
    return EXIT_OK if not report.mismatches else EXIT_DIVERGED


def cmd_verify(template_dir: str, key: bytes, out=None) -> int:
    out = out or sys.stdout
    try:
        package = load_package(_template_dir(template_dir), key)
    except VerifyFailed as e:
        print(f"VERIFY_FAILED {e}", file=out)
        return EXIT_VERIFY
    print(f"OK {len(package.templates)} templates verified", file=out)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="driverlet", allow_abbrev=False,
                description="Record driver/device interaction templates and replay them.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, key=True):
        if key:
            sp.add_argument("--key", help=f"MAC key file (default: ${KEY_ENV})")
        sp.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("record", allow_abbrev=False, help="run a record campaign")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--workers", type=int, default=1)
    common(r)

    rp = sub.add_parser("replay", allow_abbrev=False, help="replay one invocation")
    rp.add_argument("--templates", required=True)
    rp.add_argument("--entry", required=True)
    rp.add_argument("args", nargs="*", metavar="name=value")
    rp.add_argument("--data-file")
    rp.add_argument("--out")
    rp.add_argument("--medium", help="block medium state file, loaded and saved")
    rp.add_argument("--fault", choices=sorted(FAULTS))
    rp.add_argument("--fault-job", type=int, default=0)
    rp.add_argument("--fault-prob", type=float, default=0.0)
    rp.add_argument("--max-attempts", type=int, default=3)
    common(rp)

    c = sub.add_parser("coverage", allow_abbrev=False, help="print cumulative coverage")
    c.add_argument("--templates", required=True)
    c.add_argument("--entry")
    c.add_argument("--key", help="verify signatures first")

    d = sub.add_parser("diff-oracle", allow_abbrev=False, help="compare replay with the gold driver")
    d.add_argument("--templates", required=True)
    d.add_argument("--entry", required=True)
    d.add_argument("--trials", type=int, default=200)
    common(d)

    v = sub.add_parser("verify", allow_abbrev=False, help="check template signatures")
    v.add_argument("--templates", required=True)
    v.add_argument("--key")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command == "record":
            if not os.path.isfile(ns.manifest):
                raise UsageError(f"manifest {ns.manifest} does not exist")
            return cmd_record(ns.manifest, ns.out, ns.seed, resolve_key(ns.key), ns.workers)
        if ns.command == "replay":
            if ns.max_attempts < 1:
                raise UsageError("--max-attempts must be at least 1")
            if ns.data_file is not None and not os.path.isfile(ns.data_file):
                raise UsageError(f"data file {ns.data_file} does not exist")
            plan = fault_plan(ns.fault, ns.fault_job, ns.fault_prob, ns.seed)
            return cmd_replay(ns.templates, ns.entry, parse_assignments(ns.args),
                              resolve_key(ns.key), seed=ns.seed, plan=plan,
                              data_file=ns.data_file, out_file=ns.out, medium=ns.medium,
                              max_attempts=ns.max_attempts)
        if ns.command == "coverage":
            key = resolve_key(ns.key) if ns.key else None
            return cmd_coverage(ns.templates, key, ns.entry)
        if ns.command == "diff-oracle":
            return cmd_diff_oracle(ns.templates, ns.entry, ns.trials, ns.seed, resolve_key(ns.key))
        if ns.command == "verify":
            return cmd_verify(ns.templates, resolve_key(ns.key))
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except (OSError, DriverError, TemplateError, ParseError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

"""Record campaigns: run gold drivers, explore branches, distill templates.

Exploration is depth-1 concolic: for every logged branch over an input symbol
the driver is re-executed from scratch with the symbol's value changed to the
smallest witness of the opposite arm.  If the forced run's output skeleton
differs from the base run's, the input is state-changing at that branch and the
taken arm's condition becomes a template constraint.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

from .constraints import (
    ANY_WORD, COMPARISONS, AlignedTo, Constraint, Eq, Mask, Range, conjoin, regions, satisfies,
)
from .golddriver import DATA_PARAM, SCALAR, DriverError, get_entry
from .hal import (
    PLAIN, RECORD, ExplorationTimeout, HalContext, HalError, RawTrace, SkeletonMismatch,
)
from .simdev import NO_FAULT, FaultPlan, SimError, new_device
from .symexpr import (
    COMPARE_OPS, MASK64, NEGATED, SWAPPED, Binary, Const, EvalError, Sym, SymExpr, UntracedBranch,
    constants, evaluate, symbols,
)
from .template import (
    Event, InteractionTemplate, ScopeError, TemplateParam, check_scoping, coverage_report, merge,
    overlapping_pairs, serialize, sign,
)

POLL_FLOOR = 64
POLL_FACTOR = 4
WITNESS_SCAN = 4096
ANY_ADDR = Range(0, MASK64)
DEVICE_DOMAIN = Range(0, ANY_WORD.hi)


class DistillError(Exception):
    pass


class CampaignError(Exception):
    pass


@dataclass
class RecordRun:
    entry: str
    args: dict
    seed: int
    trace: RawTrace
    bindings: dict
    bind_order: list
    symbol_kind: dict
    skeleton: list
    allocations: list
    steps: int
    payload: bytes | None = None
    output: bytes = b""


@dataclass
class Evidence:
    """Outcome of one forced re-execution, kept so classification can be re-checked."""

    seq: int
    symbol: str
    condition: SymExpr
    taken: bool
    source_loc: str
    witness: int | None = None
    divergent: bool = False
    constraint: Constraint | None = None
    reason: str = ""
    base_allocs: int = 0
    forced_allocs: int = 0
    first_diff: int | None = None
    base_item: str = ""
    forced_item: str = ""

    def format(self) -> str:
        parts = [f"branch seq={self.seq}", f"sym={self.symbol}", f"cond={self.condition}",
                 f"taken={int(self.taken)}",
                 f"witness={'-' if self.witness is None else self.witness}",
                 f"divergent={int(self.divergent)}", f"reason={self.reason}",
                 f'constraint="{self.constraint if self.constraint is not None else "-"}"',
                 f"allocs={self.base_allocs}/{self.forced_allocs}"]
        if self.first_diff is not None:
            parts.append(f"diff@{self.first_diff} base={self.base_item} forced={self.forced_item}")
        return " ".join(parts) + f" src={self.source_loc}"


# -- running ----------------------------------------------------------------------

def _execute(entry: str, args: dict, seed: int, payload, *, overrides=None, expect=None,
             step_budget=None, fault_plan: FaultPlan = NO_FAULT):
    spec = get_entry(entry)
    dev = new_device(spec.device, seed, fault_plan)
    if spec.kind != "init":
        get_entry(spec.init).invoke(HalContext(dev, PLAIN), {})
    ctx = HalContext(dev, RECORD, overrides=overrides, expect=expect, step_budget=step_budget,
                     env_seed=seed)
    result = spec.invoke(ctx, args, payload)
    return ctx, result


def record_run(entry: str, args: dict | None = None, seed: int = 0, payload: bytes | None = None,
               fault_plan: FaultPlan = NO_FAULT) -> RecordRun:
    """Trace one successful execution of ``entry`` on a fresh device."""
    spec = get_entry(entry)
    args = dict(args or {})
    spec.check(args)
    if payload is None:
        payload = spec.default_payload(args, seed)
    try:
        ctx, result = _execute(entry, args, seed, payload, fault_plan=fault_plan)
    except DriverError:
        raise
    except (HalError, SimError, UntracedBranch) as e:
        raise DriverError(f"{entry} failed while recording: {e}") from e
    return RecordRun(entry, args, seed, ctx.trace, dict(ctx.bindings), list(ctx.bind_order),
                     dict(ctx.symbol_kind), list(ctx.skeleton), list(ctx.allocations),
                     ctx.steps_used, payload, result.data)


# -- exploration -------------------------------------------------------------------

def _domain(run: RecordRun, sym: str) -> Constraint | None:
    kind = run.symbol_kind.get(sym)
    if kind == "dev":
        return DEVICE_DOMAIN
    if kind == "param":
        for p in get_entry(run.entry).scalars:
            if p.name == sym:
                return p.domain
    return None


def find_witness(cond: SymExpr, taken: bool, sym: str, bindings: dict, domain: Constraint):
    """Smallest value of ``sym`` inside ``domain`` that flips ``cond``."""
    regs = regions(domain)
    if not regs:
        return None
    lo = min(r.lo for r in regs)
    hi = max(r.hi for r in regs)
    cands = {lo, hi}
    for c in constants(cond):
        cands.update(v for v in (c - 1, c, c + 1) if 0 <= v <= MASK64)
    cands.update(range(lo, min(hi, lo + WITNESS_SCAN) + 1))
    trial = dict(bindings)
    for v in sorted(cands):
        if not satisfies(domain, v):
            continue
        trial[sym] = v
        try:
            flipped = (evaluate(cond, trial) != 0) != taken
        except EvalError:
            continue
        if flipped:
            return v
    return None


def branch_constraint(cond: SymExpr, taken: bool, sym: str, recorded: int,
                      is_param: bool) -> Constraint:
    """Translate the taken arm of ``cond`` into a constraint on ``sym``.

    Comparisons of the bare symbol against a constant map to the matching
    comparison; ``(sym & m) == v`` maps to a mask (or alignment when v is 0
    and m+1 is a power of two).  Device inputs only keep equalities.
    Anything else is pinned to the recorded value.
    """
    e = cond
    if not (isinstance(e, Binary) and e.op in COMPARE_OPS):
        e = Binary("NE", e, Const(0))
    op = e.op if taken else NEGATED[e.op]
    s = Sym(sym)
    if e.left == s and sym not in symbols(e.right):
        rhs = e.right
    elif e.right == s and sym not in symbols(e.left):
        op, rhs = SWAPPED[op], e.left
    else:
        if is_param and op == "EQ":
            for side, other in ((e.left, e.right), (e.right, e.left)):
                if (isinstance(side, Binary) and side.op == "AND" and isinstance(other, Const)):
                    m = side.right if side.left == s else side.left if side.right == s else None
                    if isinstance(m, Const):
                        mv, v = m.value, other.value & m.value
                        if v == 0 and mv and (mv + 1) & mv == 0:
                            return AlignedTo(mv + 1)
                        return Mask(mv, v)
        return Eq(recorded)
    if isinstance(rhs, Const):
        if is_param:
            return COMPARISONS[op](rhs.value)
        return Eq(rhs.value) if op == "EQ" else Eq(recorded)
    if not is_param and op == "EQ":
        return Eq(rhs)
    return Eq(recorded)


def _forced_job(run: RecordRun, ev: Evidence, budget: int):
    """Run one forced execution; returns (divergent, reason, allocs, diff, base, forced)."""
    spec = get_entry(run.entry)
    args, overrides, payload = dict(run.args), None, run.payload
    if run.symbol_kind[ev.symbol] == "param":
        args[ev.symbol] = ev.witness
        try:
            spec.check(args)
        except DriverError as e:
            return True, f"precondition:{e}", 0, None, "", ""
        if spec.data_role(args) != spec.data_role(run.args) or \
                spec.payload_size(args) != spec.payload_size(run.args):
            payload = spec.default_payload(args, run.seed)
    else:
        overrides = {int(ev.symbol.rsplit("_", 1)[1]): ev.witness}
    ctx = None
    try:
        ctx, _ = _execute(run.entry, args, run.seed, payload, overrides=overrides,
                          expect=run.skeleton, step_budget=budget)
    except SkeletonMismatch as m:
        base = run.skeleton[m.index] if m.index < len(run.skeleton) else None
        return True, "skeleton", m.allocations, m.index, _item(base), _item(m.item)
    except ExplorationTimeout:
        return True, "timeout", 0, None, "", ""
    except (DriverError, HalError, SimError, UntracedBranch, EvalError) as e:
        return True, f"failed:{type(e).__name__}", 0, None, "", ""
    if len(ctx.skeleton) != len(run.skeleton):
        i = len(ctx.skeleton)
        return True, "skeleton", len(ctx.allocations), i, _item(run.skeleton[i]), "<end>"
    return False, "identical", len(ctx.allocations), None, "", ""


def _item(item) -> str:
    if item is None:
        return "<end>"
    kind, *rest = item
    if kind == "LOAD_MEM":
        return f"LOAD_MEM({rest[0]},{len(rest[1])}B)"
    return f"{kind}(" + ",".join(str(r) for r in rest) + ")"


def _job(payload):
    run, ev, budget = payload
    return _forced_job(run, ev, budget)


def explore(run: RecordRun, workers: int = 1) -> list[Evidence]:
    """Depth-1 exploration of every symbolic branch in ``run``."""
    budget = 10 * run.steps + 10_000
    evidence: list[Evidence] = []
    jobs = []
    for entry in run.trace:
        if entry.kind != "BRANCH":
            continue
        syms = [s for s in run.bind_order if s in symbols(entry.expr)]
        sym = syms[-1]
        ev = Evidence(entry.seq, sym, entry.expr, bool(entry.value), entry.source_loc,
                      base_allocs=len(run.allocations))
        evidence.append(ev)
        domain = _domain(run, sym)
        if domain is None:
            ev.reason = "not-an-input"
            continue
        ev.witness = find_witness(entry.expr, ev.taken, sym, run.bindings, domain)
        if ev.witness is None:
            ev.reason = "no-witness"
            continue
        jobs.append(ev)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_job, [(run, ev, budget) for ev in jobs], chunksize=4))
    else:
        results = [_forced_job(run, ev, budget) for ev in jobs]
    for ev, (div, reason, allocs, diff, base, forced) in zip(jobs, results):
        ev.divergent, ev.reason, ev.forced_allocs = div, reason, allocs
        ev.first_diff, ev.base_item, ev.forced_item = diff, base, forced
        if div:
            is_param = run.symbol_kind[ev.symbol] == "param"
            ev.constraint = branch_constraint(ev.condition, ev.taken, ev.symbol,
                                              run.bindings[ev.symbol], is_param)
    return evidence


def path_conditions(evidence: list[Evidence]) -> list[tuple[str, Constraint, str]]:
    return [(e.symbol, e.constraint, e.source_loc) for e in evidence if e.constraint is not None]


# -- distillation --------------------------------------------------------------------

def distill(run: RecordRun, evidence: list[Evidence], name: str | None = None) -> InteractionTemplate:
    """Turn a traced run plus its exploration evidence into a template."""
    spec = get_entry(run.entry)
    found: dict[str, list[Constraint]] = {}
    for sym, c, _ in path_conditions(evidence):
        if c not in found.setdefault(sym, []):
            found[sym].append(c)
    params = []
    for p in spec.params:
        if p.role == SCALAR:
            params.append(TemplateParam(p.name, SCALAR, conjoin([p.domain] + found.get(p.name, []))))
        else:
            params.append(TemplateParam(p.name, spec.data_role(run.args), ANY_ADDR))

    def read_constraint(sym: str) -> Constraint:
        cs = found.get(sym)
        if not cs:
            return ANY_WORD
        return cs[0] if len(cs) == 1 else conjoin(cs)

    events: list[Event] = []
    snapshots: dict[int, bytes] = {}
    poll = None
    for e in run.trace:
        k = e.kind
        if poll is not None:
            if k == "REG_READ" and e.in_poll:
                if e.target != poll.target or e.cond != poll.cond:
                    raise DistillError(f"poll at seq {poll.seq} reads mixed sites")
                continue
            if k != "POLL_EXIT" or e.target != poll.target:
                raise DistillError(f"poll at seq {poll.seq} not closed before seq {e.seq}")
            timeout = max(POLL_FLOOR, POLL_FACTOR * e.count)
            events.append(Event("POLL", reg=poll.target, constraint=poll.cond, timeout=timeout,
                                source_loc=poll.source_loc))
            poll = None
            continue
        if k == "POLL_ENTER":
            poll = e
        elif k == "POLL_EXIT":
            raise DistillError(f"unmatched POLL_EXIT at seq {e.seq}")
        elif k == "REG_READ":
            events.append(Event("READ", reg=e.target, constraint=read_constraint(e.symbol),
                                binds=e.symbol, source_loc=e.source_loc))
        elif k == "REG_WRITE":
            events.append(Event("WRITE", reg=e.target, value=e.expr, source_loc=e.source_loc))
        elif k == "MEM_READ":
            events.append(Event("MEM_READ", region=e.target, offset=e.offset,
                                constraint=read_constraint(e.symbol), width=e.count,
                                binds=e.symbol, source_loc=e.source_loc))
        elif k == "MEM_WRITE":
            if e.published:
                events.append(Event("MEM_WRITE", region=e.target, offset=e.offset, value=e.expr,
                                    width=e.count, source_loc=e.source_loc))
        elif k == "MEM_SNAPSHOT":
            sid = len(snapshots)
            snapshots[sid] = e.data
            events.append(Event("LOAD_MEM", region=e.target, snapshot=sid, fixups=e.fixups,
                                source_loc=e.source_loc))
        elif k == "DMA_ALLOC":
            events.append(Event("DMA_ALLOC", value=e.expr, binds=e.symbol, source_loc=e.source_loc))
        elif k == "IRQ_WAIT":
            events.append(Event("WAIT_IRQ", line=int(e.target), timeout=e.count,
                                source_loc=e.source_loc))
        elif k == "DELAY":
            events.append(Event("DELAY", timeout=e.count, source_loc=e.source_loc))
        elif k == "COPY":
            events.append(Event("COPY", region=e.target, offset=e.offset, src_region=e.src,
                                src_offset=e.src_offset, value=e.expr, source_loc=e.source_loc))
        elif k in ("RAND", "TIME"):
            events.append(Event("ENV", env=k.lower(), binds=e.symbol, source_loc=e.source_loc))
    if poll is not None:
        raise DistillError(f"poll at seq {poll.seq} never closed")
    t = InteractionTemplate(name or spec.tag(run.args), spec.signature, spec.device,
                            get_entry(spec.reset).tag({}), params, events, snapshots)
    try:
        check_scoping(t)
    except ScopeError as e:
        raise DistillError(str(e)) from None
    return t


def record_template(entry: str, args: dict | None = None, seed: int = 0, workers: int = 1):
    """record_run + explore + distill in one call."""
    run = record_run(entry, args, seed)
    evidence = explore(run, workers)
    return distill(run, evidence), run, evidence


# -- campaigns -----------------------------------------------------------------------

@dataclass
class RunReport:
    entry: str
    args: dict
    label: str
    template: str | None = None
    error: str | None = None
    trace_text: str = ""


@dataclass
class CampaignResult:
    templates: list[InteractionTemplate] = field(default_factory=list)
    coverage: str = "no coverage\n"
    reports: list[RunReport] = field(default_factory=list)
    overlaps: list[tuple[str, str]] = field(default_factory=list)

    @property
    def errors(self) -> list[str]:
        return [f"{r.label}: {r.error}" for r in self.reports if r.error]

    def files(self) -> dict[str, bytes]:
        """Relative path -> file content for everything the campaign emits."""
        out = {}
        for t in self.templates:
            out[f"templates/{t.entry}_{t.name}.tpl"] = serialize(t)
        out["coverage.txt"] = self.coverage.encode("utf-8")
        for r in self.reports:
            out[f"evidence/{r.label}.trace"] = r.trace_text.encode("utf-8")
        return out


def _trace_text(run: RecordRun, evidence: list[Evidence]) -> str:
    head = f"# {run.entry} " + " ".join(f"{k}={v}" for k, v in run.args.items()) + f" seed={run.seed}\n"
    return head + run.trace.format() + "".join("# " + e.format() + "\n" for e in evidence)


def _add(templates: list[InteractionTemplate], t: InteractionTemplate) -> str:
    """Merge into a same-named template when the paths match; else add with a suffix."""
    for i, other in enumerate(templates):
        if other.entry == t.entry and (other.name == t.name or other.name.startswith(t.name + "_")):
            m = merge(other, t)
            if m is not None:
                templates[i] = m
                return m.name
    names = {x.name for x in templates if x.entry == t.entry}
    name, k = t.name, 2
    while name in names:
        name, k = f"{t.name}_{k}", k + 1
    t.name = name
    templates.append(t)
    return name


def campaign(runs: list[tuple[str, dict]], seed: int, key: bytes, workers: int = 1) -> CampaignResult:
    """Record every run, merge same-path templates, add init/reset, sign all."""
    result = CampaignResult()
    templates: list[InteractionTemplate] = []
    devices = []
    for entry, _ in runs:
        spec = get_entry(entry)
        if spec.device not in devices:
            devices.append(spec.device)
    for n, (entry, args) in enumerate(runs):
        spec = get_entry(entry)
        label = f"{n:03d}_{entry}"
        try:
            spec.check(dict(args))
            label += "_" + spec.tag(args)
            run = record_run(entry, args, seed)
            evidence = explore(run, workers)
            t = distill(run, evidence)
        except (DriverError, DistillError, KeyError) as e:
            result.reports.append(RunReport(entry, dict(args), label, error=str(e)))
            continue
        name = _add(templates, t)
        result.reports.append(RunReport(entry, dict(args), label, name, None,
                                        _trace_text(run, evidence)))
    for dev in devices:
        for kind in ("init", "reset"):
            spec = next(s for s in _entries() if s.device == dev and s.kind == kind)
            try:
                run = record_run(spec.name, {}, seed)
                evidence = explore(run, workers)
                t = distill(run, evidence)
            except (DriverError, DistillError) as e:
                raise CampaignError(f"{spec.name} could not be recorded: {e}") from e
            templates.append(t)
            result.reports.append(RunReport(spec.name, {}, f"{dev}_{kind}", t.name, None,
                                            _trace_text(run, evidence)))
    result.templates = [sign(t, key) for t in templates]
    result.coverage = coverage_report(result.templates)
    for entry in dict.fromkeys(t.entry for t in result.templates):
        group = [t for t in result.templates if t.entry == entry]
        result.overlaps += overlapping_pairs(group)
    return result


def _entries():
    from .golddriver import ENTRIES
    return ENTRIES.values()


def write_campaign(result: CampaignResult, out_dir: str) -> list[str]:
    written = []
    for rel, data in result.files().items():
        path = os.path.join(out_dir, rel)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
        written.append(path)
    return written


def parse_manifest(text: str) -> list[tuple[str, dict]]:
    """``run <entry> name=value ...`` per line; blank lines and # comments ignored."""
    runs = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        words = line.split()
        if words[0] != "run" or len(words) < 2:
            raise ValueError(f"manifest line {n}: expected 'run <entry> name=value...'")
        args = {}
        for w in words[2:]:
            k, sep, v = w.partition("=")
            if not sep or not k:
                raise ValueError(f"manifest line {n}: bad argument {w!r}")
            args[k] = int(v, 0)
        runs.append((words[1], args))
    return runs

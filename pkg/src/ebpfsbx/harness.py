"""Fault-injection campaigns, built-in microbenchmark scenarios, reporting.

The injector plants one synthetic out-of-bounds load or store into a
program that already passed the loader, at a random executed position,
using a pointer the program legitimately holds there, displaced to a
target outside every sandbox component (the address pool covers the whole
kernel arena and includes a planted 64-byte secret).  Because injection
happens before the SFI rewriting step, the masking pass instruments the
injected access exactly like any other.  Outcomes are observational: a
trial escapes only if the arena digest outside the components changed or
secret bytes surfaced in the guest-visible outputs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .analyze import AccessSet, CTX, HEAP, MAPVAL, STACK, check_and_analyze
from .engine import component_masks, prepare_and_run, run, trace_values
from .errors import ConfigError, Error
from .instrument import rewrite_sfi, splice
from .isa import (
    BYTES_TO_SIZE,
    CLS_LDX,
    CLS_STX,
    MODE_MEM,
    Instruction,
    Origin,
    assemble,
)
from .memory import strip_tag, tag_of
from .sandbox import Mode
from .scenario import World, parse_scenario

__all__ = [
    "TrialRecord",
    "InjectionReport",
    "inject_faults",
    "run_microbench",
    "BenchResult",
    "BenchTable",
    "builtin_scenarios",
    "builtin_scenario",
]

_POINTER_KINDS = (CTX, STACK, HEAP, MAPVAL)
_WIDTHS = (1, 2, 4, 8)
_OFF_MIN, _OFF_MAX = -(1 << 15), (1 << 15) - 1


# ---------------------------------------------------------------------------
# Built-in scenarios
# ---------------------------------------------------------------------------

_SKB_DESCRIPTOR = {
    "name": "sock_pkt",
    "size": 32,
    "fields": [
        {"name": "len", "offset": 0, "size": 4},
        {"name": "protocol", "offset": 4, "size": 4},
        {"name": "saddr", "offset": 8, "size": 4},
        {"name": "daddr", "offset": 12, "size": 4},
        {"name": "sport", "offset": 16, "size": 4},
        {"name": "dport", "offset": 20, "size": 4},
    ],
}

_BUILTIN_DOCS = {
    # packet fields copied to the trace log; mirrors 6 fields, touches 2
    "sockfilter": {
        "config": {
            "arena_size": 1 << 16,
            "cores": 1,
            "descriptors": [_SKB_DESCRIPTOR],
            "kernel_objects": [
                {
                    "name": "pkt0",
                    "descriptor": "sock_pkt",
                    "init": {
                        "len": 1500,
                        "protocol": 8,
                        "saddr": 0x0A000001,
                        "daddr": 0x0A000002,
                        "sport": 443,
                        "dport": 51515,
                    },
                }
            ],
            "context": {
                "name": "pkt_ctx",
                "object": "pkt0",
                "fields": [
                    {"name": "len", "ctx_offset": 0, "path": "len", "size": 4},
                    {"name": "protocol", "ctx_offset": 4, "path": "protocol", "size": 4},
                    {"name": "saddr", "ctx_offset": 8, "path": "saddr", "size": 4},
                    {"name": "daddr", "ctx_offset": 12, "path": "daddr", "size": 4},
                    {"name": "sport", "ctx_offset": 16, "path": "sport", "size": 4},
                    {"name": "dport", "ctx_offset": 20, "path": "dport", "size": 4},
                ],
            },
        },
        "programs": {
            "sockfilter": """
                ldxw r2, [r1+4]        ; protocol
                ldxw r3, [r1+8]        ; source address
                mov64 r4, r10
                add64 r4, -8
                stxw [r4+0], r2
                stxw [r4+4], r3
                mov64 r1, r4
                mov64 r2, 8
                call 3                 ; trace_log(frame-8, 8)
                mov64 r0, 0
                exit
            """,
        },
    },
    # per-protocol packet counter in an array map
    "sockex1": {
        "config": {
            "arena_size": 1 << 16,
            "cores": 1,
            "maps": [{"id": 0, "value_size": 8, "max_entries": 16}],
            "descriptors": [_SKB_DESCRIPTOR],
            "kernel_objects": [
                {
                    "name": "pkt0",
                    "descriptor": "sock_pkt",
                    "init": {"len": 98, "protocol": 8, "saddr": 0x0A000005,
                             "daddr": 0x0A000007},
                }
            ],
            "context": {
                "name": "pkt_ctx",
                "object": "pkt0",
                "fields": [
                    {"name": "len", "ctx_offset": 0, "path": "len", "size": 4},
                    {"name": "protocol", "ctx_offset": 4, "path": "protocol", "size": 4},
                    {"name": "saddr", "ctx_offset": 8, "path": "saddr", "size": 4},
                    {"name": "daddr", "ctx_offset": 12, "path": "daddr", "size": 4},
                ],
            },
        },
        "programs": {
            "sockex1": """
                ldxw r6, [r1+4]        ; protocol
                and64 r6, 15
                mov64 r1, 0
                mov64 r2, r6
                call 1                 ; map_lookup(0, protocol)
                jeq r0, 0, +3
                ldxdw r3, [r0+0]
                add64 r3, 1
                stxdw [r0+0], r3
                mov64 r0, 0
                exit
            """,
        },
    },
    # nested flow-keys object reached through a context reference, plus a map
    "sockex2": {
        "config": {
            "arena_size": 1 << 16,
            "cores": 1,
            "maps": [{"id": 1, "value_size": 8, "max_entries": 32}],
            "descriptors": [
                {
                    "name": "pkt_head",
                    "size": 24,
                    "fields": [
                        {"name": "len", "offset": 0, "size": 4},
                        {"name": "proto", "offset": 4, "size": 4},
                        {"name": "flow", "offset": 8, "size": 8,
                         "kind": "reference", "target": "flow_keys"},
                    ],
                },
                {
                    "name": "flow_keys",
                    "size": 16,
                    "fields": [
                        {"name": "dst", "offset": 0, "size": 4},
                        {"name": "src", "offset": 4, "size": 4},
                        {"name": "hash", "offset": 8, "size": 4},
                    ],
                },
            ],
            "kernel_objects": [
                {
                    "name": "head0",
                    "descriptor": "pkt_head",
                    "init": {"len": 1514, "proto": 0x0800},
                    "refs": {"flow": "fk0"},
                },
                {
                    "name": "fk0",
                    "descriptor": "flow_keys",
                    "init": {"dst": 0x0A00002A, "src": 0x0A000001, "hash": 77},
                },
            ],
            "context": {
                "name": "head_ctx",
                "object": "head0",
                "fields": [
                    {"name": "len", "ctx_offset": 0, "path": "len", "size": 4},
                    {"name": "proto", "ctx_offset": 4, "path": "proto", "size": 4},
                    {"name": "flow", "ctx_offset": 8, "path": "flow", "size": 8},
                ],
            },
        },
        "programs": {
            "sockex2": """
                ldxdw r7, [r1+8]       ; flow keys
                ldxw r6, [r7+0]        ; destination address
                and64 r6, 31
                mov64 r1, 1
                mov64 r2, r6
                call 1
                jeq r0, 0, +3
                ldxdw r3, [r0+0]
                add64 r3, 1
                stxdw [r0+0], r3
                mov64 r0, 0
                exit
            """,
        },
    },
    # inter-arrival time tracking; writes the delta back through the context
    "ddos": {
        "config": {
            "arena_size": 1 << 16,
            "cores": 1,
            "maps": [{"id": 2, "value_size": 8, "max_entries": 4}],
            "descriptors": [
                {
                    "name": "probe_ctx",
                    "size": 16,
                    "fields": [
                        {"name": "last_delta", "offset": 0, "size": 8},
                        {"name": "flags", "offset": 8, "size": 4},
                    ],
                }
            ],
            "kernel_objects": [
                {"name": "probe0", "descriptor": "probe_ctx", "init": {"flags": 1}}
            ],
            "context": {
                "name": "probe",
                "object": "probe0",
                "fields": [
                    {"name": "last_delta", "ctx_offset": 0, "path": "last_delta",
                     "size": 8, "access": "rw"},
                    {"name": "flags", "ctx_offset": 8, "path": "flags", "size": 4},
                ],
            },
        },
        "programs": {
            "ddos": """
                mov64 r9, r1
                call 4                 ; now
                mov64 r6, r0
                mov64 r1, 2
                mov64 r2, 0
                call 1                 ; timestamp slot
                jeq r0, 0, +5
                ldxdw r3, [r0+0]
                stxdw [r0+0], r6
                mov64 r7, r6
                sub64 r7, r3
                stxdw [r9+0], r7       ; write delta into the context
                mov64 r0, 0
                exit
            """,
        },
    },
    # entry/return pair sharing one map, combined latency accounting
    "vfslat": {
        "config": {
            "arena_size": 1 << 16,
            "cores": 1,
            "maps": [{"id": 3, "value_size": 8, "max_entries": 4}],
            "descriptors": [
                {
                    "name": "vfs_evt",
                    "size": 16,
                    "fields": [
                        {"name": "bytes_req", "offset": 0, "size": 8},
                        {"name": "kind", "offset": 8, "size": 4},
                    ],
                }
            ],
            "kernel_objects": [
                {"name": "evt0", "descriptor": "vfs_evt", "init": {"bytes_req": 4096}}
            ],
            "context": {
                "name": "vfs",
                "object": "evt0",
                "fields": [
                    {"name": "bytes_req", "ctx_offset": 0, "path": "bytes_req", "size": 8},
                    {"name": "kind", "ctx_offset": 8, "path": "kind", "size": 4},
                ],
            },
        },
        "programs": {
            "vfs_entry": """
                mov64 r9, r1
                call 4
                mov64 r6, r0
                mov64 r1, 3
                mov64 r2, 0
                call 1                 ; start-timestamp slot
                jeq r0, 0, +1
                stxdw [r0+0], r6
                ldxdw r7, [r9+0]       ; bytes requested
                mov64 r1, 3
                mov64 r2, 2
                call 1
                jeq r0, 0, +1
                stxdw [r0+0], r7
                mov64 r0, 0
                exit
            """,
            "vfs_return": """
                call 4
                mov64 r6, r0
                mov64 r1, 3
                mov64 r2, 0
                call 1
                jeq r0, 0, +8
                ldxdw r3, [r0+0]
                sub64 r6, r3           ; latency
                mov64 r1, 3
                mov64 r2, 1
                call 1                 ; accumulator slot
                jeq r0, 0, +3
                ldxdw r4, [r0+0]
                add64 r4, r6
                stxdw [r0+0], r4
                mov64 r0, 0
                exit
            """,
        },
    },
}

BUILTIN_NAMES = tuple(_BUILTIN_DOCS)


def builtin_scenarios():
    return BUILTIN_NAMES


def builtin_scenario(name):
    """Returns (ScenarioConfig, {program_name: Program}) for a built-in."""
    doc = _BUILTIN_DOCS.get(name)
    if doc is None:
        raise ConfigError(f"unknown scenario {name!r}; builtins: {BUILTIN_NAMES}")
    config = parse_scenario(doc["config"], name=name)
    programs = {
        pname: assemble(src, context_type=config.context_name)
        for pname, src in doc["programs"].items()
    }
    return config, programs


# ---------------------------------------------------------------------------
# Fault injection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrialRecord:
    pc_inserted: int
    kind: str  # "load" | "store"
    target_addr: int
    outcome: str  # "redirected" | "faulted" | "escaped"
    fault_kind: str = ""
    fault_pc: int = -1


@dataclass
class InjectionReport:
    trials: int
    contained: int
    escapes: int
    records: list
    secret_leaked: bool
    arena_digest_match: bool
    outcomes: dict

    def to_json(self, include_records=True):
        doc = {
            "trials": self.trials,
            "contained": self.contained,
            "escapes": self.escapes,
            "secret_leaked": self.secret_leaked,
            "arena_digest_match": self.arena_digest_match,
            "outcomes": dict(self.outcomes),
        }
        if include_records:
            doc["records"] = [
                {
                    "pc_inserted": r.pc_inserted,
                    "kind": r.kind,
                    "target_addr": r.target_addr,
                    "outcome": r.outcome,
                }
                for r in self.records
            ]
        return doc


def _subtract_spans(window, keepout):
    """Subtract keepout spans from one [lo, hi) window; returns kept pieces."""
    pieces = [window]
    for klo, klen in keepout:
        khi = klo + klen
        nxt = []
        for lo, hi in pieces:
            if khi <= lo or klo >= hi:
                nxt.append((lo, hi))
                continue
            if klo > lo:
                nxt.append((lo, klo))
            if khi < hi:
                nxt.append((khi, hi))
        pieces = nxt
    return [p for p in pieces if p[1] > p[0]]


def _scratch_registers(program):
    used = set()
    for ins in program.insns:
        used |= ins.regs_mentioned()
    order = (8, 9, 7, 6, 5, 4, 3, 2, 0)
    free = [r for r in order if r not in used]
    if not free:
        raise ConfigError("no free register available for injected loads")
    return free[0]


class _Campaign:
    """Precomputed per-(program, mode) state shared by all trials."""

    def __init__(self, config, program, mode):
        self.config = config
        self.program = program
        self.mode = mode
        self.provenance, self.access_set = check_and_analyze(
            program, World(config, mode).analysis_env()
        )
        self.load_dst = _scratch_registers(program)

        world = World(config, mode)
        self.baseline_digest = world.snapshot()
        self.keepout = world.injection_keepout()
        self.arena_lo = world.space.base
        self.arena_hi = world.space.base + world.space.size
        self.secret_span = (world.secret_base, config.secret_len)
        self.secret = world.secret
        trace, result = trace_values(program, self.access_set, mode, world)
        if result.status != "completed":
            raise Error(
                f"scenario program faults without injection: {result.fault}"
            )
        self.trace = trace
        self.candidates = self._find_candidates()
        self._windows = {}

    def _find_candidates(self):
        out = []
        for pc in sorted(self.trace):
            state = self.provenance[pc]
            regs = self.trace[pc]
            for r in range(11):
                if state[r][0] not in _POINTER_KINDS:
                    continue
                value = regs[r]
                sv = strip_tag(value)
                if not self.arena_lo <= sv < self.arena_hi:
                    continue
                if self.mode in (Mode.MTE, Mode.MTE_MIN) and tag_of(value) == 0:
                    continue  # only legitimately tagged bases are displaced
                out.append((pc, r, value, state[r]))
        if not out:
            raise Error("no pointer-valued registers available for injection")
        return out

    def windows(self, sv, width):
        key = (sv, width)
        got = self._windows.get(key)
        if got is None:
            lo = max(self.arena_lo, sv + _OFF_MIN)
            hi = min(self.arena_hi - width, sv + _OFF_MAX)
            got = _subtract_spans((lo, hi), self.keepout) if hi > lo else []
            self._windows[key] = got
        return got


def _classify_component(prov):
    if prov[0] == MAPVAL:
        return ("map", prov[1])
    return ("private",)


def _scan_for_secret(secret, result, world):
    chunks = [secret[i : i + 8] for i in range(len(secret) - 7)]
    blobs = [result.r0.to_bytes(8, "little")]
    blobs.extend(result.log)
    for desc in world.maps.values():
        blobs.append(world.space.read_bytes(desc.base, desc.region_size))
    for blob in blobs:
        for chunk in chunks:
            if chunk in blob:
                return True
    return False


def inject_faults(config, program, mode, trials, seed, strategy="uniform"):
    """Run a seeded campaign of one synthetic OOB access per trial.

    `strategy` is "uniform" (targets drawn over the whole reachable arena
    outside the components) or "sentinel" (stores aimed at the planted
    secret, the overwrite demonstration).  Same seed, same report.
    """
    if not isinstance(mode, Mode):
        raise ConfigError(f"unsupported mode {mode!r}")
    if strategy not in ("uniform", "sentinel"):
        raise ConfigError(f"unknown injection strategy {strategy!r}")
    camp = _Campaign(config, program, mode)
    records = []
    contained = escapes = 0
    outcomes = {"redirected": 0, "faulted": 0, "escaped": 0}
    any_leak = False
    all_digests_match = True

    for trial in range(trials):
        rng = random.Random(seed * 1_000_003 + trial)
        rec, digest_ok, leaked = _run_trial(camp, rng, strategy)
        records.append(rec)
        outcomes[rec.outcome] += 1
        if rec.outcome == "escaped":
            escapes += 1
        else:
            contained += 1
        any_leak = any_leak or leaked
        all_digests_match = all_digests_match and digest_ok

    report = InjectionReport(
        trials=trials,
        contained=contained,
        escapes=escapes,
        records=records,
        secret_leaked=any_leak,
        arena_digest_match=all_digests_match,
        outcomes=outcomes,
    )
    return report


def _pick_injection(camp, rng, strategy):
    width = _WIDTHS[rng.randrange(4)]
    candidates = camp.candidates
    for _ in range(64):
        pc, reg, value, prov = candidates[rng.randrange(len(candidates))]
        sv = strip_tag(value)
        if strategy == "sentinel":
            s_lo, s_len = camp.secret_span
            lo = max(s_lo, sv + _OFF_MIN)
            hi = min(s_lo + s_len - width + 1, sv + _OFF_MAX + 1)
            windows = [(lo, hi)] if hi > lo else []
        else:
            windows = camp.windows(sv, width)
        if not windows:
            continue
        total = sum(hi - lo for lo, hi in windows)
        pick = rng.randrange(total)
        for lo, hi in windows:
            if pick < hi - lo:
                target = lo + pick
                break
            pick -= hi - lo
        return pc, reg, value, prov, width, target
    raise Error("injection sampler found no admissible target")


def _run_trial(camp, rng, strategy):
    kind = "store" if strategy == "sentinel" else ("load", "store")[rng.randrange(2)]
    pc, reg, value, prov, width, target = _pick_injection(camp, rng, strategy)
    off = target - strip_tag(value)
    size_bits = BYTES_TO_SIZE[width]
    if kind == "load":
        ins = Instruction(CLS_LDX | MODE_MEM | size_bits,
                          dst=camp.load_dst, src=reg, off=off)
    else:
        # prefer a register that holds something visible so an uncontained
        # store actually perturbs memory
        nonzero = [r for r in range(11) if camp.trace[pc][r] & ((1 << (8 * width)) - 1)]
        value_reg = nonzero[rng.randrange(len(nonzero))] if nonzero else reg
        ins = Instruction(CLS_STX | MODE_MEM | size_bits,
                          dst=reg, src=value_reg, off=off)
    injected, _ = splice(camp.program, {pc: [(ins, Origin.ORIGINAL)]})

    # splice the injected access into the classification the rewriter sees,
    # exactly as an access the loader never vetted
    base_access = camp.access_set
    classify = {}
    for old_pc, comp in base_access.classify.items():
        classify[old_pc if old_pc < pc else old_pc + 1] = comp
    classify[pc] = _classify_component(prov)
    access_set = AccessSet(
        ctx_reads=base_access.ctx_reads,
        ctx_writes=base_access.ctx_writes,
        classify=classify,
        ctx_dynamic=base_access.ctx_dynamic,
    )

    world = World(camp.config, camp.mode)
    to_run = injected
    if camp.mode == Mode.SFI:
        to_run, _report = rewrite_sfi(injected, None, access_set,
                                      component_masks(world, 0))
    result = run(to_run, access_set, camp.mode, world, core_id=0)

    if result.status == "faulted":
        digest_ok = world.snapshot() == camp.baseline_digest
        rec = TrialRecord(
            pc_inserted=pc,
            kind=kind,
            target_addr=target,
            outcome="faulted",
            fault_kind=result.fault.kind,
            fault_pc=result.fault.pc,
        )
        return rec, digest_ok, False
    digest_ok = world.snapshot() == camp.baseline_digest
    leaked = _scan_for_secret(camp.secret, result, world)
    if digest_ok and not leaked:
        rec = TrialRecord(pc_inserted=pc, kind=kind, target_addr=target,
                          outcome="redirected")
    else:
        rec = TrialRecord(
            pc_inserted=pc,
            kind=kind,
            target_addr=target,
            outcome="escaped",
            fault_kind="secret_leak" if leaked else "digest_mismatch",
        )
    return rec, digest_ok, leaked


# ---------------------------------------------------------------------------
# Microbenchmark
# ---------------------------------------------------------------------------


@dataclass
class BenchResult:
    scenario: str
    program: str
    mode: str
    reps: int
    cost: dict  # category -> mean units
    guarded_static: int
    access_checks: int
    mem_accesses: int
    tag_loads: int

    def to_json(self):
        return {
            "scenario": self.scenario,
            "program": self.program,
            "mode": self.mode,
            "reps": self.reps,
            "cost": dict(self.cost),
            "guarded_static": self.guarded_static,
            "access_checks": self.access_checks,
            "mem_accesses": self.mem_accesses,
            "tag_loads": self.tag_loads,
        }


@dataclass
class BenchTable:
    results: list
    context_comparison: list  # per scenario/mode: partial vs full context cost

    def to_json(self):
        return {
            "results": [r.to_json() for r in self.results],
            "context_comparison": [dict(c) for c in self.context_comparison],
        }

    def render_text(self):
        cols = ["scenario", "program", "mode", "program_c", "context",
                "tagging", "sandbox", "access", "total"]
        rows = [cols]
        for r in self.results:
            rows.append([
                r.scenario, r.program, r.mode,
                str(r.cost["program"]), str(r.cost["context"]),
                str(r.cost["tagging"]), str(r.cost["sandbox"]),
                str(r.cost["access"]), str(r.cost["total"]),
            ])
        widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
        lines.append("")
        lines.append("full vs partial context cost:")
        for c in self.context_comparison:
            lines.append(
                f"  {c['scenario']:<12} {c['mode']:<8} "
                f"partial={c['partial_context']:<6} full={c['full_context']}"
            )
        return "\n".join(lines)


def _scenario_cost(config, programs, mode, copy_mode):
    """One pass over a scenario's programs on a shared world; summed context cost."""
    world = World(config, mode)
    per_program = []
    ctx_total = 0
    for pname, program in programs.items():
        result, report, _ = prepare_and_run(world, program, mode,
                                            copy_mode=copy_mode)
        if result.status != "completed":
            raise Error(f"benchmark program {pname} faulted: {result.fault}")
        per_program.append((pname, result, report))
        ctx_total += result.cost.context
    return per_program, ctx_total


def run_microbench(scenario_set="builtin", modes=None, reps=3):
    """Mean per-category cost for every built-in program under each mode."""
    if scenario_set != "builtin":
        raise ConfigError(f"unknown scenario set {scenario_set!r}")
    if modes is None:
        modes = (Mode.VANILLA, Mode.SFI, Mode.MTE, Mode.MTE_MIN)
    results = []
    comparison = []
    for name in BUILTIN_NAMES:
        config, programs = builtin_scenario(name)
        for mode in modes:
            acc = {}
            for _ in range(reps):
                per_program, _ctx = _scenario_cost(config, programs, mode, "partial")
                for pname, result, report in per_program:
                    entry = acc.setdefault(pname, [])
                    entry.append((result, report))
            for pname, entries in acc.items():
                costs = [r.cost for r, _ in entries]
                mean = {
                    cat: sum(getattr(c, cat) for c in costs) // len(costs)
                    for cat in ("program", "context", "tagging", "sandbox", "access")
                }
                mean["total"] = sum(mean.values())
                result, report = entries[0]
                results.append(
                    BenchResult(
                        scenario=name,
                        program=pname,
                        mode=mode.value,
                        reps=reps,
                        cost=mean,
                        guarded_static=report.guarded_accesses if report else 0,
                        access_checks=result.metrics.access_checks,
                        mem_accesses=result.metrics.mem_accesses,
                        tag_loads=result.metrics.tag_loads,
                    )
                )
            if mode in (Mode.SFI, Mode.MTE):
                _, partial_ctx = _scenario_cost(config, programs, mode, "partial")
                _, full_ctx = _scenario_cost(config, programs, mode, "full")
                comparison.append(
                    {
                        "scenario": name,
                        "mode": mode.value,
                        "partial_context": partial_ctx,
                        "full_context": full_ctx,
                    }
                )
    return BenchTable(results=results, context_comparison=comparison)

"""Deterministic execution of programs in four isolation modes.

One run is: reserve the core, build the context view for the mode, switch
onto the sandbox stack, execute the body, synchronize context state back,
and tear everything down (teardown also happens on a fault).  Every cost
unit is attributed to one of five categories:

    program   original instructions and helper bodies
    context   copying mirrored fields in/out and heap materialization
    tagging   granule tag/untag work (tag-only mode)
    sandbox   acquire/enter/exit/release, prologue/epilogue, sync setup
    access    the masking check pair (sfi) or tag-load analogs (tag modes)

Under tag checking, every guest memory access also emits one tag-load
analog, the stand-in for the hardware's tag fetch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .analyze import AccessSet, check_and_analyze
from .context import (
    SyncTable,
    flush_object,
    mte_min_tag_object,
    prepare_context,
    refresh_object,
    restore_tags,
    sync_out,
    translate_for_helper,
)
from .errors import Error, GuestFault, HelperFault, UnknownHelper
from .instrument import PRIVATE, rewrite_sfi
from .isa import (
    CLS_ALU32,
    CLS_ALU64,
    CLS_JMP,
    CLS_LDX,
    CLS_ST,
    CLS_STX,
    OP_CALL,
    OP_EXIT,
    OP_JA,
    SRC_X,
    Origin,
)
from .memory import Context, POLICY_SYNC, POLICY_OFF, strip_tag, with_tag
from .sandbox import Mode, STACK_SIZE

__all__ = [
    "CostBreakdown",
    "FaultRecord",
    "Metrics",
    "RunResult",
    "StepBudgetExceeded",
    "run",
    "prepare_and_run",
    "component_masks",
    "DEFAULT_STEP_BUDGET",
]

_MASK64 = (1 << 64) - 1
_MASK32 = (1 << 32) - 1

DEFAULT_STEP_BUDGET = 1_000_000
_CALLER_SP = 0xC0FE_0000_0000

# origin -> cost bucket (0 program, 3 sandbox, 4 access)
_BUCKET = {
    Origin.ORIGINAL: 0,
    Origin.ACCESS_CHECK: 4,
    Origin.ADDRESS_FORM: 4,
    Origin.SANDBOX: 3,
}


class StepBudgetExceeded(Error):
    pass


@dataclass
class CostBreakdown:
    program: int = 0
    context: int = 0
    tagging: int = 0
    sandbox: int = 0
    access: int = 0

    @property
    def total(self):
        return self.program + self.context + self.tagging + self.sandbox + self.access

    def to_json(self):
        return {
            "program": self.program,
            "context": self.context,
            "tagging": self.tagging,
            "sandbox": self.sandbox,
            "access": self.access,
            "total": self.total,
        }


@dataclass
class Metrics:
    mem_accesses: int = 0
    tag_loads: int = 0
    access_checks: int = 0
    address_forms: int = 0
    ctx_bytes_in: int = 0
    ctx_bytes_out: int = 0
    ctx_bytes_refresh: int = 0
    ctx_fields_copied: int = 0
    sync_entries: int = 0
    heap_allocs: int = 0
    synced_fields: int = 0
    skipped_readonly: int = 0
    granules_tagged: int = 0
    helper_calls: int = 0


@dataclass(frozen=True)
class FaultRecord:
    kind: str
    pc: int
    addr: int = None  # type: ignore[assignment]


@dataclass
class RunResult:
    r0: int
    status: str  # "completed" | "faulted"
    fault: FaultRecord = None  # type: ignore[assignment]
    log: list = field(default_factory=list)
    cost: CostBreakdown = field(default_factory=CostBreakdown)
    steps: int = 0
    metrics: Metrics = field(default_factory=Metrics)

    def to_json(self):
        return {
            "r0": self.r0,
            "status": self.status,
            "fault": None
            if self.fault is None
            else {"kind": self.fault.kind, "pc": self.fault.pc, "addr": self.fault.addr},
            "log": [entry.hex() for entry in self.log],
            "cost": self.cost.to_json(),
            "steps": self.steps,
        }


def component_masks(world, core_id):
    masks = {PRIVATE: world.pool.guest_mask(core_id)}
    for map_id, desc in world.maps.items():
        masks[("map", map_id)] = desc.mask
    return masks


class _HelperState:
    __slots__ = ("time", "time_step", "prng")

    def __init__(self, config):
        self.time = config.time_base
        self.time_step = config.time_step
        self.prng = ((config.seed + 0x9E3779B97F4A7C15) | 1) & _MASK64


def _prandom32(state):
    x = state.prng
    x ^= x >> 12
    x = (x ^ (x << 25)) & _MASK64
    x ^= x >> 27
    state.prng = x
    return ((x * 0x2545F4914F6CDD1D) & _MASK64) >> 32


class _Execution:
    def __init__(self, program, access_set, mode, world, core_id, step_budget,
                 copy_mode, audit, trace=None):
        self.program = program
        self.access_set = access_set
        self.mode = mode
        self.world = world
        self.core_id = core_id
        self.step_budget = step_budget
        self.copy_mode = copy_mode
        self.audit = audit
        self.trace = trace
        self.space = world.space
        self.units = world.cost_units
        self.cost = [0, 0, 0, 0, 0]  # program, context, tagging, sandbox, access
        self.metrics = Metrics()
        self.log = []
        self.table = None
        self.sandbox = None
        self.receipts = []
        self.helper_state = _HelperState(world.config)

    # -- setup / teardown ---------------------------------------------------

    def _setup(self):
        world, mode, units = self.world, self.mode, self.units
        if mode == Mode.VANILLA:
            world.pool.guard_core(self.core_id)
            stack_base = world.baseline_stacks[self.core_id]
            self.space.write_bytes(stack_base, bytes(STACK_SIZE))
            r10 = stack_base + STACK_SIZE
            r1 = world.ctx_object.base if world.ctx_object else 0
            return r1, r10

        sb = world.pool.acquire(self.core_id, mode)
        self.sandbox = sb
        self.cost[3] += units["sandbox_acquire"]

        if mode == Mode.MTE_MIN:
            r1 = self._mte_min_setup()
        else:
            r1 = self._copy_setup()

        r10 = sb.enter(_CALLER_SP)
        self.cost[3] += units["sandbox_enter"]
        if mode.tagged:
            r10 = with_tag(r10, sb.tag)
        return r1, r10

    def _copy_setup(self):
        world, sb, units = self.world, self.sandbox, self.units
        tagged = self.mode.tagged
        if world.ctx_spec is None:
            sb.set_context_end(0)
            self.table = SyncTable()
            base = sb.guest_base
            return with_tag(base, sb.tag) if tagged else base
        base, table, stats = prepare_context(
            sb,
            world.ctx_object,
            world.ctx_spec,
            self.access_set.touched_ranges(),
            self.copy_mode,
            world.objects_by_addr,
            tagged=tagged,
        )
        self.table = table
        self.cost[1] += (
            stats.bytes_copied * units["ctx_byte"]
            + stats.heap_allocs * units["heap_alloc"]
        )
        self.cost[3] += stats.entries * units["sync_entry"]
        m = self.metrics
        m.ctx_bytes_in += stats.bytes_copied
        m.ctx_fields_copied += stats.fields_copied
        m.heap_allocs += stats.heap_allocs
        m.sync_entries += stats.entries
        return base

    def _mte_min_setup(self):
        """Tag the real kernel objects the program may touch; copy nothing."""
        world, units = self.world, self.units
        if world.ctx_spec is None or world.ctx_object is None:
            return 0
        tag, weakened = world.tag_pool.acquire(self.core_id)
        self._pool_tag_held = True
        spec = world.ctx_spec
        if self.access_set.ctx_dynamic:
            included = list(spec.fields)
        else:
            included = spec.fields_touching(self.access_set.touched_ranges())
        top = world.ctx_object
        ranges = []
        ref_fields = []
        for mf in included:
            if len(mf.path) != 1 or mf.ctx_offset != top.descriptor.field(mf.path[0]).offset:
                raise Error(
                    "tag-only mode needs context offsets matching the kernel layout"
                )
            fdecl = top.descriptor.field(mf.path[0])
            ranges.append((fdecl.offset, fdecl.size))
            if fdecl.is_reference:
                ref_fields.append(fdecl)
        if ranges:
            receipt = mte_min_tag_object(self.space, top, ranges, tag, weakened)
            self._patch_references(top, ref_fields, tag, receipt, seen={top.name})
            self.receipts.append(receipt)
            self.cost[2] += receipt.granules_tagged * units["tag_granule"]
            self.metrics.granules_tagged += receipt.granules_tagged
        return with_tag(top.base, tag)

    def _patch_references(self, obj, ref_fields, tag, receipt, seen):
        world, units = self.world, self.units
        for fdecl in ref_fields:
            addr = obj.field_addr(fdecl)
            raw = self.space.read_bytes(addr, 8)
            ptr = int.from_bytes(raw, "little")
            nested = world.objects_by_addr.get(strip_tag(ptr))
            if nested is None or nested.name in seen:
                continue
            seen.add(nested.name)
            receipt.pointer_patches.append((addr, raw))
            self.space.write(addr, 8, with_tag(strip_tag(ptr), tag))
            nested_receipt = mte_min_tag_object(
                self.space, nested, [(0, nested.descriptor.size)], tag,
                receipt.weakened,
            )
            self.receipts.append(nested_receipt)
            self.cost[2] += nested_receipt.granules_tagged * units["tag_granule"]
            self.metrics.granules_tagged += nested_receipt.granules_tagged
            self._patch_references(
                nested,
                [f for f in nested.descriptor.fields if f.is_reference],
                tag,
                nested_receipt,
                seen,
            )

    def _teardown(self, faulted):
        world, units = self.world, self.units
        if self.mode == Mode.VANILLA:
            world.pool.release_core(self.core_id)
            return
        if not faulted and self.table is not None:
            written, skipped, nbytes = sync_out(self.space, self.table)
            self.cost[1] += nbytes * units["ctx_byte"]
            self.metrics.ctx_bytes_out += nbytes
            self.metrics.synced_fields += written
            self.metrics.skipped_readonly += skipped
        for receipt in reversed(self.receipts):
            restore_tags(self.space, receipt)
            self.cost[2] += receipt.granules_tagged * units["tag_granule"]
        if self.mode == Mode.MTE_MIN and getattr(self, "_pool_tag_held", False):
            world.tag_pool.release(self.core_id)
        sb = self.sandbox
        if sb is not None:
            if sb.entered:
                sb.exit()
                self.cost[3] += units["sandbox_exit"]
            world.pool.release(sb)
            self.cost[3] += units["sandbox_release"]

    # -- helpers --------------------------------------------------------------

    def _call_helper(self, pc, hid, regs):
        world = self.world
        if hid not in world.helpers_enabled:
            raise UnknownHelper(f"helper {hid} is not available", pc=pc)
        self.metrics.helper_calls += 1
        self.cost[0] += self.units["helper"].get(hid, self.units["helper_default"])
        if hid == 1:
            desc = world.maps.get(regs[1])
            if desc is None:
                raise HelperFault(f"map {regs[1]} does not exist", pc=pc)
            addr = desc.lookup(regs[2])
            if addr and self.mode.tagged:
                addr = with_tag(addr, desc.tag)
            return addr
        if hid == 2:
            desc = world.maps.get(regs[1])
            if desc is None:
                raise HelperFault(f"map {regs[1]} does not exist", pc=pc)
            value = self.space.read_bytes(strip_tag(regs[3]), desc.value_size)
            return 0 if desc.update(self.space, regs[2], value) else 1
        if hid == 3:
            length = regs[2]
            if length > 256:
                raise HelperFault(f"log length {length} exceeds 256", pc=pc)
            self.log.append(self.space.read_bytes(strip_tag(regs[1]), length))
            return 0
        if hid == 4:
            t = self.helper_state.time
            self.helper_state.time += self.helper_state.time_step
            return t
        if hid == 5:
            return _prandom32(self.helper_state)
        if hid == 6:
            return self._obj_poke(pc, regs)
        raise UnknownHelper(f"helper {hid} is not known", pc=pc)

    def _obj_poke(self, pc, regs):
        """Object-typed helper: mutate one field of a real kernel object."""
        width = regs[4]
        if width not in (1, 2, 4, 8):
            raise HelperFault(f"bad poke width {width}", pc=pc)
        offset = regs[2]
        if self.table is not None:
            obj = translate_for_helper(self.table, regs[1])
            nbytes = flush_object(self.space, self.table, obj)
            self.cost[1] += nbytes * self.units["ctx_byte"]
            self.metrics.ctx_bytes_out += nbytes
        else:
            obj = self.world.objects_by_addr.get(strip_tag(regs[1]))
            if obj is None:
                raise HelperFault(f"0x{regs[1]:x} is not a kernel object", pc=pc)
        if offset + width > obj.descriptor.size:
            raise HelperFault(f"poke beyond object: +{offset}/{width}", pc=pc)
        target = obj.base + offset
        old = self.space.read(target, width)
        self.space.write(target, width, regs[3])
        if self.table is not None:
            nbytes = refresh_object(self.space, self.table, obj)
            self.cost[1] += nbytes * self.units["ctx_byte"]
            self.metrics.ctx_bytes_refresh += nbytes
        return old

    # -- the interpreter ------------------------------------------------------

    def execute(self):
        r1, r10 = self._setup()
        fault = None
        r0 = 0
        steps = 0
        try:
            r0, steps = self._loop(r1, r10)
        except GuestFault as e:
            fault = FaultRecord(kind=e.kind, pc=e.pc if e.pc is not None else -1,
                                addr=e.addr)
            steps = self._steps_at_fault
        finally:
            self._teardown(faulted=fault is not None)

        cost = CostBreakdown(
            program=self.cost[0],
            context=self.cost[1],
            tagging=self.cost[2],
            sandbox=self.cost[3],
            access=self.cost[4],
        )
        return RunResult(
            r0=r0,
            status="faulted" if fault else "completed",
            fault=fault,
            log=self.log,
            cost=cost,
            steps=steps,
            metrics=self.metrics,
        )

    def _loop(self, r1, r10):
        program = self.program
        insns = program.insns
        origins = program.origins
        n = len(insns)
        regs = [0] * 13
        regs[1] = r1
        regs[10] = r10
        cost = self.cost
        units = self.units
        alu_unit = units["alu"]
        mem_unit = units["mem"]
        form_unit = units["address_form"]
        analog_unit = units["tag_load_analog"]
        tagged = self.mode.tagged
        policy = POLICY_SYNC if tagged else POLICY_OFF
        space = self.space
        table = self.table
        spans = table.dirty_spans if table is not None else ()
        audit = self.audit
        trace = self.trace
        metrics = self.metrics
        budget = self.step_budget

        pc = 0
        steps = 0
        self._steps_at_fault = 0
        while pc < n:
            if steps >= budget:
                raise StepBudgetExceeded(f"step budget of {budget} exhausted")
            steps += 1
            self._steps_at_fault = steps
            if trace is not None and pc not in trace:
                trace[pc] = tuple(regs)
            ins = insns[pc]
            op = ins.opcode
            cls = op & 7
            origin = origins[pc]
            bucket = _BUCKET[origin]

            if cls == 7 or cls == 4:  # ALU64 / ALU32
                cost[bucket] += form_unit if origin == Origin.ADDRESS_FORM else alu_unit
                if origin == Origin.ACCESS_CHECK:
                    metrics.access_checks += 1
                elif origin == Origin.ADDRESS_FORM:
                    metrics.address_forms += 1
                operand = regs[ins.src] if op & 8 else ins.imm & _MASK64
                alu_op = op & 0xF0
                a = regs[ins.dst]
                if cls == 4:
                    a &= _MASK32
                    operand &= _MASK32
                if alu_op == 0xB0:
                    v = operand
                elif alu_op == 0x00:
                    v = a + operand
                elif alu_op == 0x10:
                    v = a - operand
                elif alu_op == 0x20:
                    v = a * operand
                elif alu_op == 0x40:
                    v = a | operand
                elif alu_op == 0x50:
                    v = a & operand
                elif alu_op == 0x60:
                    v = a << (operand & (31 if cls == 4 else 63))
                elif alu_op == 0x70:
                    v = a >> (operand & (31 if cls == 4 else 63))
                else:  # 0xA0 xor
                    v = a ^ operand
                regs[ins.dst] = v & (_MASK32 if cls == 4 else _MASK64)
                pc += 1
                continue

            if cls == 1:  # LDX
                cost[bucket] += mem_unit
                width = ins.width
                addr = (regs[ins.src] + ins.off) & _MASK64
                metrics.mem_accesses += 1
                if tagged:
                    cost[4] += analog_unit
                    metrics.tag_loads += 1
                if audit is not None:
                    audit.append((pc, addr, width, "load"))
                try:
                    regs[ins.dst] = space.read(addr, width, policy, Context.GUEST)
                except GuestFault as e:
                    e.pc = pc
                    raise
                pc += 1
                continue

            if cls == 3 or cls == 2:  # STX / ST
                cost[bucket] += mem_unit
                width = ins.width
                addr = (regs[ins.dst] + ins.off) & _MASK64
                value = regs[ins.src] if cls == 3 else ins.imm & _MASK64
                metrics.mem_accesses += 1
                if tagged:
                    cost[4] += analog_unit
                    metrics.tag_loads += 1
                if audit is not None:
                    audit.append((pc, addr, width, "store"))
                try:
                    space.write(addr, width, value, policy, Context.GUEST)
                except GuestFault as e:
                    e.pc = pc
                    raise
                if spans:
                    sa = strip_tag(addr)
                    for lo, hi, entry in spans:
                        if sa < hi and sa + width > lo:
                            entry.dirty = True
                pc += 1
                continue

            # JMP class
            cost[bucket] += form_unit if origin == Origin.ADDRESS_FORM else alu_unit
            if op == OP_EXIT:
                return regs[0], steps
            if op == OP_CALL:
                try:
                    result = self._call_helper(pc, ins.imm, regs)
                except GuestFault as e:
                    if e.pc is None:
                        e.pc = pc
                    raise
                regs[0] = result & _MASK64
                regs[1] = regs[2] = regs[3] = regs[4] = regs[5] = 0
                pc += 1
                continue
            if op == OP_JA:
                pc += 1 + ins.off
                continue
            jop = op & 0xF0
            b = regs[ins.src] if op & 8 else ins.imm & _MASK64
            a = regs[ins.dst]
            if jop == 0x10:
                taken = a == b
            elif jop == 0x50:
                taken = a != b
            elif jop == 0x20:
                taken = a > b
            else:  # 0xA0
                taken = a < b
            pc += 1 + (ins.off if taken else 0)

        raise Error("control fell off the end of the program")


def run(program, access_set, mode, world, core_id=0,
        step_budget=DEFAULT_STEP_BUDGET, copy_mode="partial", audit=None):
    """Execute one program invocation; see the module docstring for the shape.

    The program must be SFI-rewritten when (and only when) mode is sfi.
    """
    if not isinstance(mode, Mode):
        raise Error(f"unsupported mode {mode!r}")
    inserted = program.inserted_counts()
    if mode == Mode.SFI:
        if not inserted:
            raise Error("sfi mode requires a rewritten program")
    elif inserted:
        raise Error(f"{mode.value} mode requires an unrewritten program")
    if access_set.ctx_dynamic:
        copy_mode = "full"
    ex = _Execution(program, access_set, mode, world, core_id, step_budget,
                    copy_mode, audit)
    return ex.execute()


def trace_values(program, access_set, mode, world, core_id=0,
                 step_budget=DEFAULT_STEP_BUDGET):
    """Register file at each pc of an unrewritten run with this mode's setup.

    For an in-bounds program the observed values match the enforced run:
    masking is the identity on in-bounds addresses and tag checks do not
    change values.  Used by the fault injector to aim displaced accesses.
    """
    trace = {}
    if access_set.ctx_dynamic:
        copy_mode = "full"
    else:
        copy_mode = "partial"
    ex = _Execution(program, access_set, mode, world, core_id, step_budget,
                    copy_mode, None, trace=trace)
    result = ex.execute()
    return trace, result


def prepare_and_run(world, program, mode, core_id=0,
                    step_budget=DEFAULT_STEP_BUDGET, copy_mode="partial",
                    audit=None):
    """Loader pipeline: analyze, rewrite when the mode needs it, execute.

    Returns (RunResult, RewriteReport or None, AccessSet).
    """
    provenance, access_set = check_and_analyze(program, world.analysis_env())
    report = None
    to_run = program
    if mode == Mode.SFI:
        to_run, report = rewrite_sfi(
            program, provenance, access_set, component_masks(world, core_id)
        )
    result = run(to_run, access_set, mode, world, core_id=core_id,
                 step_budget=step_budget, copy_mode=copy_mode, audit=audit)
    return result, report, access_set

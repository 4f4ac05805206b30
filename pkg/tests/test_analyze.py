import pytest

from ebpfsbx.analyze import (
    AnalysisEnv,
    CtxFieldDecl,
    RejectedProgram,
    check_and_analyze,
)
from ebpfsbx.isa import Privilege, Program, assemble
from ebpfsbx.scenario import World
from ebpfsbx.sandbox import Mode
from genprog import gen_scenario, random_semantic_program
from refvm import ReferenceMachine, OracleFault

ENV = AnalysisEnv(
    map_ids=frozenset({0, 5}),
    ctx_fields=(
        CtxFieldDecl(0, 8, False),
        CtxFieldDecl(8, 4, False),
        CtxFieldDecl(12, 4, False),
        CtxFieldDecl(16, 8, True),
        CtxFieldDecl(24, 8, False),
    ),
)


def analyze(text, privilege=Privilege.UNPRIVILEGED, env=ENV):
    return check_and_analyze(assemble(text, privilege=privilege), env)


def code_of(excinfo):
    return excinfo.value.code


class TestProvenance:
    def test_ctx_load_becomes_scalar_and_classified_private(self):
        prov, acc = analyze("ldxw r2, [r1+8]\nmov64 r0, 0\nexit")
        assert acc.classify[0] == ("private",)
        assert acc.ctx_reads == [(8, 4)]
        assert prov[1][2] == ("scalar", None)

    def test_reference_field_load_becomes_heap(self):
        prov, acc = analyze("ldxdw r2, [r1+16]\nldxw r3, [r2+0]\nmov64 r0, 0\nexit")
        assert prov[1][2] == ("heap",)
        assert acc.classify[1] == ("private",)

    def test_stack_store_at_frame_minus_8(self):
        prov, acc = analyze(
            "mov64 r3, r10\nadd64 r3, -8\nstxdw [r3+0], r0\nmov64 r0, 0\nexit"
        )
        assert prov[2][3] == ("stack", -8)
        assert acc.classify[2] == ("private",)

    def test_map_value_classification(self):
        text = (
            "mov64 r1, 0\nmov64 r2, 3\ncall 1\n"
            "jeq r0, 0, +1\nldxw r3, [r0+4]\nmov64 r0, 0\nexit"
        )
        prov, acc = analyze(text)
        assert prov[4][0] == ("mapval", 0)
        assert acc.classify[4] == ("map", 0)

    def test_pointer_plus_scalar_keeps_provenance(self):
        prov, acc = analyze(
            "ldxw r2, [r1+8]\nmov64 r3, r1\nadd64 r3, r2\n"
            "ldxb r4, [r3+0]\nmov64 r0, 0\nexit"
        )
        assert prov[3][3] == ("ctx", None)
        assert acc.ctx_dynamic is True

    def test_entry_state(self):
        prov, _ = analyze("mov64 r0, 0\nexit")
        assert prov[0][1] == ("ctx", 0)
        assert prov[0][10] == ("stack", 0)
        assert prov[0][2] == ("unknown",)


class TestRejections:
    def test_pointer_plus_pointer(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("add64 r1, r10\nmov64 r0, 0\nexit")
        assert code_of(e) == "PointerPlusPointer"

    def test_pointer_minus_pointer(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("mov64 r2, r1\nsub64 r2, r10\nmov64 r0, 0\nexit")
        assert code_of(e) == "PointerPlusPointer"

    def test_too_many_instructions_unprivileged(self):
        body = "\n".join(["mov64 r0, 0"] * 4096) + "\nexit"
        with pytest.raises(RejectedProgram) as e:
            analyze(body)
        assert code_of(e) == "TooManyInstructions"
        # the same size is fine for privileged programs
        analyze(body, privilege=Privilege.PRIVILEGED)

    def test_limit_boundary_is_4096(self):
        body = "\n".join(["mov64 r0, 0"] * 4095) + "\nexit"
        analyze(body)  # exactly 4096 instructions passes

    def test_backward_jump(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("mov64 r0, 0\nja -1\nexit")
        assert code_of(e) == "BackwardJump"

    def test_self_jump(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("jeq r1, 0, -1\nmov64 r0, 0\nexit")
        assert code_of(e) == "BackwardJump"

    def test_unknown_base_access(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("mov64 r2, 64\nldxw r3, [r2+0]\nmov64 r0, 0\nexit")
        assert code_of(e) == "UnknownBaseAccess"

    def test_reserved_registers(self):
        p = assemble("mov64 r11, 0\nexit", allow_reserved=True)
        with pytest.raises(RejectedProgram) as e:
            check_and_analyze(p, ENV)
        assert e.value.code == "ReservedRegister"

    def test_unreachable_code(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("mov64 r0, 0\nexit\nmov64 r0, 1\nexit")
        assert code_of(e) == "UnreachableCode"

    def test_out_of_bounds_jump(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("ja +5\nmov64 r0, 0\nexit")
        assert code_of(e) == "OutOfBoundsJump"

    def test_missing_exit(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("mov64 r0, 0")
        assert code_of(e) == "MissingExit"

    def test_ctx_access_outside_declared_fields(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("ldxw r2, [r1+40]\nmov64 r0, 0\nexit")
        assert code_of(e) == "CtxOutOfRange"

    def test_stack_out_of_bounds(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("stxdw [r10-520], r1\nmov64 r0, 0\nexit")
        assert code_of(e) == "StackOutOfBounds"
        with pytest.raises(RejectedProgram) as e:
            analyze("ldxw r2, [r10+0]\nmov64 r0, 0\nexit")
        assert code_of(e) == "StackOutOfBounds"

    def test_frame_register_write(self):
        p = Program(assemble("mov64 r1, 1\nexit").insns)
        # hand-build an ALU write to r10 (the assembler refuses the text form)
        from ebpfsbx.isa import Instruction
        bad = Program(
            (Instruction(0xB7, dst=10, imm=0),) + p.insns, privilege=p.privilege
        )
        with pytest.raises(RejectedProgram) as e:
            check_and_analyze(bad, ENV)
        assert e.value.code == "FrameRegisterWrite"

    def test_helper_map_id_must_be_constant(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("ldxw r1, [r1+8]\nmov64 r2, 0\ncall 1\nmov64 r0, 0\nexit")
        assert code_of(e) == "HelperArg"

    def test_helper_unknown_map_id(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("mov64 r1, 9\nmov64 r2, 0\ncall 1\nmov64 r0, 0\nexit")
        assert code_of(e) == "HelperArg"

    def test_trace_log_needs_pointer(self):
        with pytest.raises(RejectedProgram) as e:
            analyze("mov64 r1, 4\nmov64 r2, 8\ncall 3\nmov64 r0, 0\nexit")
        assert code_of(e) == "HelperArg"

    def test_empty_program(self):
        with pytest.raises(RejectedProgram):
            check_and_analyze(Program(()), ENV)


class TestJoins:
    def test_scalar_join_stays_scalar(self):
        text = (
            "mov64 r2, 1\n"
            "jeq r1, r1, +1\n"
            "mov64 r2, 2\n"
            "mov64 r0, r2\n"
            "exit"
        )
        prov, _ = analyze(text)
        assert prov[3][2] == ("scalar", None)

    def test_same_kind_join_keeps_region(self):
        text = (
            "mov64 r3, r10\n"
            "add64 r3, -8\n"
            "jeq r1, r1, +2\n"
            "mov64 r3, r10\n"
            "add64 r3, -16\n"
            "stxdw [r3+0], r0\n"
            "mov64 r0, 0\n"
            "exit"
        )
        prov, acc = analyze(text)
        assert prov[5][3] == ("stack", None)
        assert acc.classify[5] == ("private",)

    def test_mixed_kind_join_is_unknown(self):
        text = (
            "mov64 r3, r10\n"
            "jeq r1, r1, +1\n"
            "mov64 r3, r1\n"
            "mov64 r0, 0\n"
            "exit"
        )
        prov, _ = analyze(text)
        assert prov[3][3] == ("unknown",)


class TestSoundnessVsTracer:
    def test_1000_random_programs(self):
        # every access the concrete tracer observes must carry the same
        # component the static analysis assigned, or the program was rejected
        cfg = gen_scenario()
        world = World(cfg, Mode.VANILLA)
        env = world.analysis_env()
        kind_map = {"ctx": ("private",), "stack": ("private",), "heap": ("private",)}
        checked = 0
        for seed in range(1000):
            p = random_semantic_program(seed)
            try:
                prov, acc = check_and_analyze(p, env)
            except RejectedProgram:
                continue
            try:
                oracle = ReferenceMachine(cfg).execute(p)
            except OracleFault:
                continue
            for pc, _kind, region_kind, map_id in oracle.accesses:
                want = kind_map.get(region_kind, ("map", map_id))
                assert acc.classify[pc] == want, (seed, pc)
                checked += 1
        assert checked > 2000

"""Command-line front end: rewrite, run, inject, bench, disasm.

Exit codes: 0 success, 1 guest fault (run), 2 usage or configuration
error, 3 at least one injection escape.  All inputs come from flags and
files; there are no environment knobs.
"""

from __future__ import annotations

import argparse
import json
import sys

from .analyze import RejectedProgram, check_and_analyze
from .engine import component_masks, prepare_and_run
from .errors import ConfigError, Error
from .harness import builtin_scenarios, inject_faults, run_microbench
from .instrument import rewrite_sfi
from .isa import AssemblyError, DecodeError, assemble, decode, disassemble, encode
from .sandbox import Mode
from .scenario import World, load_scenario

_MODES = {m.value: m for m in Mode}


def _parse_mode(text):
    mode = _MODES.get(text)
    if mode is None:
        raise ConfigError(
            f"unsupported mode {text!r} (choose from {', '.join(_MODES)})"
        )
    return mode


def _load_program(path, context_type=""):
    try:
        if path.endswith(".bin"):
            with open(path, "rb") as fh:
                return decode(fh.read(), context_type=context_type)
        with open(path) as fh:
            return assemble(fh.read(), context_type=context_type)
    except OSError as e:
        raise ConfigError(f"cannot read program {path}: {e}") from None


def _emit_program(program, path):
    if path.endswith(".bin"):
        with open(path, "wb") as fh:
            fh.write(encode(program))
    else:
        with open(path, "w") as fh:
            fh.write(disassemble(program) + "\n")


def _cmd_rewrite(args):
    config = load_scenario(args.scenario)
    program = _load_program(args.program, config.context_name)
    world = World(config, Mode.SFI)
    provenance, access_set = check_and_analyze(program, world.analysis_env())
    rewritten, report = rewrite_sfi(
        program, provenance, access_set, component_masks(world, args.core)
    )
    if args.out:
        _emit_program(rewritten, args.out)
    else:
        print(disassemble(rewritten))
    print(json.dumps(report.to_json()))
    return 0


def _cmd_run(args):
    mode = _parse_mode(args.mode)
    config = load_scenario(args.scenario)
    program = _load_program(args.program, config.context_name)
    world = World(config, mode)
    result, _report, _access = prepare_and_run(
        world, program, mode, core_id=args.core
    )
    if args.json:
        print(json.dumps(result.to_json()))
    else:
        print(f"r0={result.r0} status={result.status} steps={result.steps}")
        if result.fault:
            print(
                f"fault kind={result.fault.kind} pc={result.fault.pc} "
                f"addr={hex(result.fault.addr) if result.fault.addr else None}"
            )
        for i, entry in enumerate(result.log):
            print(f"log[{i}]={entry.hex()}")
        c = result.cost
        print(
            f"cost program={c.program} context={c.context} tagging={c.tagging} "
            f"sandbox={c.sandbox} access={c.access} total={c.total}"
        )
    return 1 if result.status == "faulted" else 0


def _cmd_inject(args):
    mode = _parse_mode(args.mode)
    config = load_scenario(args.scenario)
    program = _load_program(args.program, config.context_name)
    report = inject_faults(config, program, mode, args.trials, args.seed,
                           strategy=args.strategy)
    if args.json:
        print(json.dumps(report.to_json(include_records=args.records)))
    else:
        print(
            f"trials={report.trials} contained={report.contained} "
            f"escapes={report.escapes} outcomes={report.outcomes}"
        )
        print(
            f"secret_leaked={report.secret_leaked} "
            f"arena_digest_match={report.arena_digest_match}"
        )
    return 3 if report.escapes else 0


def _cmd_bench(args):
    modes = tuple(_parse_mode(m) for m in args.modes.split(","))
    table = run_microbench(args.scenario_set, modes=modes, reps=args.reps)
    if args.json:
        print(json.dumps(table.to_json()))
    else:
        print(table.render_text())
    return 0


def _cmd_disasm(args):
    program = _load_program(args.program)
    print(disassemble(program))
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="ebpfsbx",
        description="sandboxed execution of eBPF-style bytecode with SFI "
        "masking or emulated memory tagging",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("rewrite", help="emit the SFI-instrumented program")
    p.add_argument("--program", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out")
    p.add_argument("--core", type=int, default=0)
    p.set_defaults(fn=_cmd_rewrite)

    p = sub.add_parser("run", help="execute a program in one mode")
    p.add_argument("--program", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", required=True)
    p.add_argument("--core", type=int, default=0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("inject", help="fault-injection campaign")
    p.add_argument("--program", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", required=True)
    p.add_argument("--trials", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--strategy", default="uniform",
                   choices=("uniform", "sentinel"))
    p.add_argument("--json", action="store_true")
    p.add_argument("--records", action="store_true",
                   help="include per-trial records in JSON output")
    p.set_defaults(fn=_cmd_inject)

    p = sub.add_parser("bench", help="microbenchmark cost table")
    p.add_argument("--scenario-set", default="builtin")
    p.add_argument("--modes", default="vanilla,sfi,mte,mte-min")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("disasm", help="disassemble a program file")
    p.add_argument("--program", required=True)
    p.set_defaults(fn=_cmd_disasm)

    return parser


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        return args.fn(args)
    except (ConfigError, AssemblyError, DecodeError, RejectedProgram) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Error as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

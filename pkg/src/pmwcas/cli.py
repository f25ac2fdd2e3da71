"""Command-line entry point: ``bench``, ``create-heap``, ``recover`` and ``modelcheck``.

Exit codes: 0 success, 1 usage error, 2 invariant violation, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .bench import BenchConfig, BenchConfigError, emit_report, parse_sweep, run_sweep, sweep_configs
from .pmem import DEFAULT_MAX_TARGETS, HeapError, MappedHeap, Variant
from .recovery import RecoveryError, recover

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VIOLATION = 2
EXIT_IO = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path: str | None, data: bytes) -> None:
    if path is None or path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    else:
        with open(path, "wb") as fh:
            fh.write(data)


# -- bench -------------------------------------------------------------------

def cmd_bench(args) -> int:
    try:
        base = BenchConfig(
            algorithm=args.algorithm, threads=args.threads, k=args.targets, word_count=args.words,
            alpha=args.alpha, block_size=args.block_size, timeout=args.timeout_s, max_ops=args.max_ops,
            seed=args.seed, backend=args.backend, order=args.order, scatter=not args.adjacent,
            instrument=not args.no_instrument, path=args.heap_path,
        )
        configs = sweep_configs(base, parse_sweep(args.sweep))
    except (BenchConfigError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    reports = run_sweep(configs)
    _write(args.out, emit_report(reports, args.format))
    bad = [r for r in reports if not r.invariant_ok]
    for r in bad:
        print(f"invariant violated: payload sum {r.payload_sum} != {r.config.k} x {r.succeeded}"
              f" or {r.residual_tags} tagged words remain", file=sys.stderr)
    return EXIT_VIOLATION if bad else EXIT_OK


# -- heap files --------------------------------------------------------------

def cmd_create_heap(args) -> int:
    try:
        heap = MappedHeap.create(args.path, args.words, args.block_size, args.workers,
                                 Variant(args.variant), args.max_targets)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    layout = heap.layout
    heap.close(clean=True)
    print(json.dumps({
        "path": args.path,
        "variant": args.variant,
        "word_capacity": layout.word_capacity,
        "block_size": layout.block_size,
        "worker_slots": layout.worker_slots,
        "max_targets": layout.max_targets,
        "bytes": layout.total_bytes,
    }, indent=2))
    return EXIT_OK


def cmd_recover(args) -> int:
    heap = MappedHeap.open(args.path)
    try:
        was_clean = heap.clean_shutdown
        report = recover(heap)
        heap.sync()
    except RecoveryError:
        heap.close(clean=False)
        raise
    heap.close(clean=True)
    print(json.dumps({"path": args.path, "was_clean": was_clean, **report.as_dict()}, indent=2))
    return EXIT_OK


# -- modelcheck --------------------------------------------------------------

def _violation_record(program, kind: str, message: str, schedule: dict, evict: str, max_evictions: int) -> dict:
    return {
        "kind": kind,
        "message": message,
        "program": program.to_json(),
        "schedule": schedule,
        "evict": evict,
        "max_evictions": max_evictions,
    }


def replay_counterexample(doc: dict) -> harness.Verdict:
    """Re-run a schedule written by ``modelcheck`` and return its verdict."""
    program = harness.StepProgram.from_json(doc["program"])
    schedule = harness.CrashSchedule.from_json(doc["schedule"])
    return harness.run_schedule(schedule, program, evict=doc.get("evict", "all"),
                                max_evictions=doc.get("max_evictions"))


def cmd_modelcheck(args) -> int:
    if args.replay:
        with open(args.replay) as fh:
            doc = json.load(fh)
        try:
            verdict = replay_counterexample(doc)
        except harness.HarnessError as exc:
            raise UsageError(f"counterexample does not apply to this build: {exc}") from None
        sm_ok, sm_msg = harness.check_state_machine(verdict, doc["program"]["variant"])
        ok = verdict.ok and sm_ok
        result = {"ok": ok, "message": verdict.message or sm_msg, "verdict": verdict.to_json()}
        _emit_modelcheck(args.report, result)
        return EXIT_OK if ok else EXIT_VIOLATION

    try:
        program = harness.increment_program(args.variant, args.workers, args.targets, args.words,
                                            args.block_size, args.ops_per_worker)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    evict = "none" if args.evictions == 0 else "all"
    violations: list[dict] = []
    if args.samples is None:
        try:
            rep = harness.explore(program, evict=evict, max_evictions=args.evictions, bound=args.bound,
                                  state_machine=not args.no_state_machine)
        except harness.InstanceTooLarge as exc:
            raise UsageError(f"{exc}; use --samples") from None
        summary = rep.summary()
        for v in rep.violations:
            violations.append(_violation_record(program, v["kind"], v["message"], v["schedule"],
                                                evict, args.evictions))
    else:
        checked = 0
        for sched in harness.sample_schedules(program, args.samples, seed=args.seed, evict=evict,
                                              max_evictions=args.evictions):
            checked += 1
            verdict = harness.run_schedule(sched, program, evict=evict, max_evictions=args.evictions)
            if not verdict.ok:
                violations.append(_violation_record(program, "crash", verdict.message, sched.to_json(),
                                                    evict, args.evictions))
            elif not args.no_state_machine:
                ok, msg = harness.check_state_machine(verdict, program.variant)
                if not ok:
                    violations.append(_violation_record(program, "state-machine", msg, sched.to_json(),
                                                        evict, args.evictions))
        summary = {"variant": program.variant.value, "workers": args.workers, "ok": not violations,
                   "exhaustive": False, "schedules_sampled": checked, "seed": args.seed}
    summary["violation_count"] = len(violations)
    if violations:
        with open(args.counterexample, "w") as fh:
            json.dump(violations[0], fh, indent=2)
        summary["counterexample"] = args.counterexample
        summary["first_violation"] = violations[0]["message"]
    _emit_modelcheck(args.report, summary)
    return EXIT_VIOLATION if violations else EXIT_OK


def _emit_modelcheck(fmt: str, result: dict) -> None:
    if fmt == "json":
        print(json.dumps(result, indent=2))
        return
    for key, value in result.items():
        if isinstance(value, dict):
            value = json.dumps(value)
        print(f"{key:>28}: {value}")


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pmwcas", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    b = sub.add_parser("bench", help="run the Zipf increment benchmark")
    b.add_argument("--algorithm", choices=["df", "nodf", "pcas"], default="nodf")
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--targets", type=int, default=3, help="words per operation (k)")
    b.add_argument("--words", type=int, default=1_000_000)
    b.add_argument("--alpha", type=float, default=0.0, help="Zipf skew")
    b.add_argument("--block-size", type=int, default=256, help="bytes between consecutive words")
    b.add_argument("--timeout-s", type=float, default=10.0)
    b.add_argument("--max-ops", type=int, default=1_000_000, help="successful operations per thread")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--backend", choices=["dram", "real"], default="dram")
    b.add_argument("--heap-path", help="heap file for the real backend (default: a temporary file)")
    b.add_argument("--order", choices=["index", "contended-first"], default="index")
    b.add_argument("--adjacent", action="store_true", help="map Zipf rank r to word r-1 instead of scattering")
    b.add_argument("--no-instrument", action="store_true")
    b.add_argument("--format", choices=["csv", "json"], default="csv")
    b.add_argument("--sweep", action="append", default=[], metavar="PARAM=V1,V2",
                   help="repeatable; runs the cross product of all sweeps")
    b.add_argument("--out", help="output file (default stdout)")
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("create-heap", help="create a file-backed heap")
    c.add_argument("--path", required=True)
    c.add_argument("--words", type=int, required=True)
    c.add_argument("--block-size", type=int, default=256)
    c.add_argument("--workers", type=int, default=1, help="descriptor slots")
    c.add_argument("--variant", choices=["df", "nodf", "pcas"], default="nodf")
    c.add_argument("--max-targets", type=int, default=DEFAULT_MAX_TARGETS)
    c.set_defaults(func=cmd_create_heap)

    r = sub.add_parser("recover", help="run crash recovery on a heap file")
    r.add_argument("--path", required=True)
    r.set_defaults(func=cmd_recover)

    m = sub.add_parser("modelcheck", help="crash-consistency model check of a small program")
    m.add_argument("--variant", choices=["df", "nodf", "pcas"], default="nodf")
    m.add_argument("--workers", type=int, default=2)
    m.add_argument("--targets", type=int, default=2)
    m.add_argument("--words", type=int, default=4)
    m.add_argument("--block-size", type=int, default=64)
    m.add_argument("--ops-per-worker", type=int, default=1)
    m.add_argument("--evictions", type=int, default=0, help="uncontrolled write-backs allowed before the crash")
    mode = m.add_mutually_exclusive_group()
    mode.add_argument("--exhaustive", action="store_true", help="check every schedule (default)")
    mode.add_argument("--samples", type=int, help="check N uniformly sampled schedules")
    mode.add_argument("--replay", metavar="FILE", help="replay a counterexample file")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--bound", type=int, default=10**6, help="largest exhaustive instance, in crash checks")
    m.add_argument("--no-state-machine", action="store_true")
    m.add_argument("--report", choices=["json", "text"], default="text")
    m.add_argument("--counterexample", default="counterexample.json", metavar="PATH")
    m.set_defaults(func=cmd_modelcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pmwcas {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RecoveryError as exc:
        print(f"pmwcas {args.command}: heap is inconsistent: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (OSError, HeapError) as exc:
        print(f"pmwcas {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO

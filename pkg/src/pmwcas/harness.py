"""Deterministic crash-injection harness for the simulated heap.

Workers are the algorithm generators from :mod:`pmwcas.core`, advanced one
shared-memory event per step.  A schedule picks which worker moves at each
step, where the machine crashes, and which dirty cache lines are evicted
just before the crash.  After the crash the heap is recovered and the
durable data words are checked against a brute-force sequential oracle.

A worker whose last load saw a reserved (descriptor or dirty) word is
*blocked* until that word's cache value changes; its spin loop adds no
states.  :func:`explore` walks the reachable state graph with state caching,
so every schedule is covered while each distinct (state, eviction subset)
is verified once.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import random
from dataclasses import asdict, dataclass, field
from typing import Iterator, Sequence

from . import events as ev
from .core import pcas_steps, pmwcas_steps, read_word_steps
from .pmem import DescriptorState, HeapError, HeapLayout, SimulatedHeap, Variant
from .recovery import RecoveryError, recover
from .words import DESCRIPTOR_TAG, DIRTY_TAG, TAG_MASK, encode


class HarnessError(RuntimeError):
    """The harness itself could not continue (divergence, deadlock)."""


class InstanceTooLarge(ValueError):
    pass


# -- programs ----------------------------------------------------------------

@dataclass(frozen=True)
class OpSpec:
    """One operation.  Without ``expected``/``desired`` it increments each target by one."""

    targets: tuple[int, ...]
    expected: tuple[int, ...] | None = None
    desired: tuple[int, ...] | None = None


@dataclass(frozen=True)
class StepProgram:
    variant: Variant
    workers: tuple[tuple[OpSpec, ...], ...]
    word_count: int = 4
    block_size: int = 64
    initial: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        for ops in self.workers:
            for op in ops:
                if self.variant is Variant.PCAS and len(op.targets) != 1:
                    raise ValueError("pcas operations take exactly one target")
                if len(set(op.targets)) != len(op.targets):
                    raise ValueError(f"duplicate targets in {op}")

    @property
    def max_targets(self) -> int:
        return max([len(op.targets) for ops in self.workers for op in ops] or [1])

    @property
    def layout(self) -> HeapLayout:
        return HeapLayout(self.word_count, self.block_size, max(1, len(self.workers)),
                          self.max_targets, align=64)

    def initial_values(self) -> tuple[int, ...]:
        if self.initial is not None:
            return self.initial
        return tuple(encode(10 * (a + 1)) for a in range(self.word_count))

    def initial_heap(self) -> SimulatedHeap:
        heap = SimulatedHeap(self.layout, self.variant)
        for a, v in enumerate(self.initial_values()):
            heap.store(a, v)
            heap.persist(a)
        heap.flush_count = 0
        return heap

    def op_keys(self) -> list[tuple[int, int]]:
        return [(w, j) for w, ops in enumerate(self.workers) for j in range(len(ops))]

    def to_json(self) -> dict:
        return {
            "variant": self.variant.value,
            "word_count": self.word_count,
            "block_size": self.block_size,
            "initial": list(self.initial) if self.initial is not None else None,
            "workers": [[asdict(op) for op in ops] for ops in self.workers],
        }

    @classmethod
    def from_json(cls, data: dict) -> "StepProgram":
        def op(d):
            return OpSpec(tuple(d["targets"]),
                          None if d.get("expected") is None else tuple(d["expected"]),
                          None if d.get("desired") is None else tuple(d["desired"]))

        return cls(Variant(data["variant"]),
                   tuple(tuple(op(o) for o in ops) for ops in data["workers"]),
                   data["word_count"], data["block_size"],
                   None if data.get("initial") is None else tuple(data["initial"]))


def increment_program(variant, workers: int, k: int, words: int = 4, block_size: int = 64,
                      ops_per_worker: int = 1) -> StepProgram:
    """Workers incrementing overlapping windows of ``k`` words.

    Worker ``w`` starts its window at ``w * (k - 1)``, so with ``k == 1``
    every worker hits word 0 and with ``k >= 2`` neighbours share one word.
    """
    variant = Variant(variant)
    if variant is Variant.PCAS and k != 1:
        raise ValueError("pcas programs need k == 1")
    if k > words:
        raise ValueError("k exceeds the number of words")
    ops = []
    for w in range(workers):
        start = (w * (k - 1)) % words
        targets = tuple(sorted((start + j) % words for j in range(k)))
        ops.append(tuple(OpSpec(targets) for _ in range(ops_per_worker)))
    return StepProgram(variant, tuple(ops), words, block_size)


class OpRecord:
    """What the workers have decided so far; rebuilt on every replay."""

    def __init__(self, n_workers: int):
        self.concrete: dict[tuple[int, int], tuple[tuple[int, int, int], ...]] = {}
        self.results: dict[tuple[int, int], bool] = {}
        self.current: list[tuple[int, int] | None] = [None] * n_workers


def worker_steps(program: StepProgram, w: int, desc_word: int, record: OpRecord):
    dirty = program.variant is Variant.DF
    for j, op in enumerate(program.workers[w]):
        key = (w, j)
        record.current[w] = key
        if op.expected is None:
            expected = []
            for a in op.targets:
                v = yield from read_word_steps(a)
                expected.append(v)
            desired = [v + 4 for v in expected]
        else:
            expected, desired = op.expected, op.desired
        triples = tuple(zip(op.targets, expected, desired))
        record.concrete[key] = triples
        if program.variant is Variant.PCAS:
            ok = yield from pcas_steps(*triples[0])
        else:
            ok = yield from pmwcas_steps(w, desc_word, triples, dirty)
        record.results[key] = ok
        record.current[w] = None


# -- schedules and execution -------------------------------------------------

def _choice_json(c):
    return c if isinstance(c, int) else {"evict": c[1]}


def _choice_from_json(c):
    return c if isinstance(c, int) else ("evict", c["evict"])


@dataclass(frozen=True)
class CrashSchedule:
    """Worker ids (or ``("evict", line)``) per step, a crash point and evicted lines."""

    interleaving: tuple
    crash_step: int | None = None
    eviction_subset: tuple[int, ...] = ()

    def to_json(self) -> dict:
        return {
            "interleaving": [_choice_json(c) for c in self.interleaving],
            "crash_step": self.crash_step,
            "eviction_subset": list(self.eviction_subset),
        }

    @classmethod
    def from_json(cls, data: dict) -> "CrashSchedule":
        return cls(tuple(_choice_from_json(c) for c in data["interleaving"]),
                   data["crash_step"], tuple(data["eviction_subset"]))


class _Worker:
    __slots__ = ("gen", "history", "pending", "last")

    def __init__(self, gen):
        self.gen = gen
        self.history: list = []
        self.last = None
        try:
            self.pending = next(gen)
        except StopIteration:
            self.pending = None

    def feed(self, result) -> None:
        self.history.append(result)
        try:
            self.pending = self.gen.send(result)
        except StopIteration:
            self.pending = None


class Execution:
    """One partially executed schedule of a program."""

    def __init__(self, program: StepProgram, *, evict: str = "none", max_evictions: int = 0,
                 _heap: SimulatedHeap | None = None):
        self.program = program
        self.evict = evict
        self.max_evictions = max_evictions
        self.heap = program.initial_heap() if _heap is None else _heap
        self.record = OpRecord(len(program.workers))
        self.workers = [
            _Worker(worker_steps(program, w, self.heap.descriptor_word(w), self.record))
            for w in range(len(program.workers))
        ]
        self.schedule: list = []
        self.evictions = 0
        self._data_lines = program.layout.data_lines()

    # -- state ------------------------------------------------------------

    @property
    def finished(self) -> bool:
        return all(w.pending is None for w in self.workers)

    def runnable(self) -> list[int]:
        out = []
        for i, w in enumerate(self.workers):
            p = w.pending
            if p is None:
                continue
            if p[0] == ev.WAIT and self.heap.load(p[1]) == p[2]:
                continue
            out.append(i)
        return out

    def effective_dirty_lines(self) -> list[int]:
        heap = self.heap
        lay = heap.layout
        out = []
        cache, durable = heap._words, heap._durable
        for line in sorted(heap.dirty_lines):
            r = lay.words_of_line(line)
            if cache[r.start:r.stop] != durable[r.start:r.stop]:
                out.append(line)
        return out

    def choices(self) -> list:
        out: list = list(self.runnable())
        if self.evict != "none" and self.evictions < self.max_evictions and not self.finished:
            for line in self.effective_dirty_lines():
                if self.evict == "all" or line in self._data_lines:
                    out.append(("evict", line))
        return out

    def key(self) -> bytes:
        k = (tuple(self.heap._words), tuple(self.heap._durable), tuple(sorted(self.heap.dirty_lines)),
             tuple(tuple(w.history) for w in self.workers), self.evictions)
        return hashlib.blake2b(repr(k).encode(), digest_size=16).digest()

    # -- stepping ---------------------------------------------------------

    def step(self, choice) -> None:
        if not isinstance(choice, int):
            line = choice[1]
            if self.evictions >= self.max_evictions:
                raise HarnessError(f"eviction budget exhausted at step {len(self.schedule)}")
            if line not in self.heap.dirty_lines:
                raise HarnessError(f"schedule evicts clean line {line} at step {len(self.schedule)}")
            self.heap.evict(line)
            self.evictions += 1
            self.schedule.append(choice)
            return
        if not 0 <= choice < len(self.workers):
            raise HarnessError(f"schedule names unknown worker {choice}")
        w = self.workers[choice]
        event = w.pending
        if event is None:
            raise HarnessError(f"worker {choice} scheduled after it finished (step {len(self.schedule)})")
        if event[0] == ev.WAIT:
            if self.heap.load(event[1]) == event[2]:
                raise HarnessError(f"worker {choice} scheduled while blocked (step {len(self.schedule)})")
            w.feed(None)
            event = w.pending
        self._check_isolation(choice, w, event)
        result = self.heap.execute(event)
        if event[0] == ev.LOAD:
            w.last = result
        w.feed(result)
        self.schedule.append(choice)

    def _check_isolation(self, wid: int, w: _Worker, event: tuple) -> None:
        op = event[0]
        if op == ev.CAS:
            if w.last is not None and w.last & TAG_MASK:
                raise HarnessError(f"worker {wid} attempted a CAS after observing reserved word {w.last:#x}")
            cur = self.heap.load(event[1])
            if cur & TAG_MASK == DESCRIPTOR_TAG and cur == event[2]:
                raise HarnessError(f"worker {wid} overwrote descriptor reference at word {event[1]}")
        elif op == ev.STORE:
            cur = self.heap.load(event[1])
            own = self.heap.descriptor_word(wid)
            if cur & TAG_MASK == DESCRIPTOR_TAG and cur != own:
                raise HarnessError(f"worker {wid} stored over another worker's reservation at word {event[1]}")

    def clone(self) -> "Execution":
        other = Execution.__new__(Execution)
        other.program = self.program
        other.evict = self.evict
        other.max_evictions = self.max_evictions
        other.heap = self.heap.clone()
        other.record = OpRecord(len(self.program.workers))
        other.workers = []
        for w, src in enumerate(self.workers):
            dst = _Worker(worker_steps(self.program, w, other.heap.descriptor_word(w), other.record))
            for r in src.history:
                dst.feed(r)
            dst.last = src.last
            other.workers.append(dst)
        other.schedule = list(self.schedule)
        other.evictions = self.evictions
        other._data_lines = self._data_lines
        return other

    def op_status(self) -> dict[tuple[int, int], str]:
        """Per operation: 'C' unless running, else its durable descriptor state."""
        out = {}
        heap = self.heap
        for key in self.program.op_keys():
            w = key[0]
            if self.record.current[w] != key or self.program.variant is Variant.PCAS:
                out[key] = "C"
                continue
            state = heap.read_durable_descriptor(w).state
            out[key] = {DescriptorState.FAILED: "F", DescriptorState.SUCCEEDED: "S"}.get(state, "C")
        return out

    def snapshot_word(self, addr: int) -> tuple[int, int]:
        return self.heap.load(addr), self.heap.durable_load(addr)


# -- oracle ------------------------------------------------------------------

def find_witness(initial: Sequence[int], ops: dict, final: Sequence[int], *,
                 must_include=(), must_exclude=(), cap: int = 100_000):
    """Sequential order of a subset of ``ops`` turning ``initial`` into ``final``.

    ``ops`` maps a key to ``(addr, expected, desired)`` triples; an operation
    applies only if every target currently holds its expected value.
    Returns the order as a tuple of keys, or ``None``.
    """
    include = set(must_include)
    candidates = [k for k in ops if k not in set(must_exclude)]
    if not include <= set(candidates):
        return None
    n = len(candidates)
    total = sum(_perm_count(n, r) for r in range(n + 1))
    if total > cap:
        raise InstanceTooLarge(f"{total} candidate orders exceed cap {cap}")
    final = list(final)
    initial = list(initial)
    for r in range(len(include), n + 1):
        for subset in itertools.combinations(candidates, r):
            if not include <= set(subset):
                continue
            for order in itertools.permutations(subset):
                state = list(initial)
                for key in order:
                    triples = ops[key]
                    if any(state[a] != e for a, e, _ in triples):
                        break
                    for a, _, d in triples:
                        state[a] = d
                else:
                    if state == final:
                        return order
    return None


def _perm_count(n: int, r: int) -> int:
    out = 1
    for i in range(n - r + 1, n + 1):
        out *= i
    return out


def durable_atomicity_oracle(initial: Sequence[int], ops: dict, final: Sequence[int], **kw) -> bool:
    return find_witness(initial, ops, final, **kw) is not None


# -- verdicts ----------------------------------------------------------------

@dataclass
class Verdict:
    schedule: CrashSchedule
    ok: bool
    outcomes: dict[str, str]
    live_results: dict[str, bool]
    final_words: list[int]
    witness: list[str] | None
    message: str = ""
    trace: dict[int, list[tuple[int, int, dict]]] = field(default_factory=dict)
    ops: dict[str, list[tuple[int, int, int]]] = field(default_factory=dict)
    desc_words: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "schedule": self.schedule.to_json(),
            "ok": self.ok,
            "outcomes": self.outcomes,
            "live_results": self.live_results,
            "final_words": self.final_words,
            "witness": self.witness,
            "message": self.message,
            "ops": {k: [list(t) for t in v] for k, v in self.ops.items()},
            "trace": {str(a): [[c, d, s] for c, d, s in t] for a, t in self.trace.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _k(key) -> str:
    return f"{key[0]}.{key[1]}"


def _classify(ops, final, witness):
    out = {}
    applied = set(witness or ())
    for key, triples in ops.items():
        if witness is not None:
            out[_k(key)] = "all-new" if key in applied else "all-old"
            continue
        vals = [final[a] for a, _, _ in triples]
        if vals == [d for _, _, d in triples]:
            out[_k(key)] = "all-new"
        elif vals == [e for _, e, _ in triples]:
            out[_k(key)] = "all-old"
        else:
            out[_k(key)] = "violation"
    return out


class _Checker:
    """Recovery + oracle with memoisation on the durable image."""

    def __init__(self, program: StepProgram):
        self.program = program
        self.layout = program.layout
        self.initial = program.initial_values()
        self._recovered: dict[tuple, tuple[list[int] | None, str]] = {}
        self._witness: dict = {}
        self.recoveries = 0

    def recovered_words(self, image: Sequence[int]):
        key = tuple(image)
        hit = self._recovered.get(key)
        if hit is None:
            heap = SimulatedHeap(self.layout, self.program.variant, durable=image)
            msg = ""
            try:
                recover(heap)
                words = heap.data_words()
                if any(w & TAG_MASK for w in words):
                    msg = "recovery left tagged words"
            except (RecoveryError, HeapError) as exc:
                words, msg = None, f"recovery failed: {exc}"
            hit = (words, msg)
            self._recovered[key] = hit
            self.recoveries += 1
        return hit

    def witness(self, ops, final, include, exclude):
        key = (tuple(sorted(ops.items())), tuple(final), include, exclude)
        if key not in self._witness:
            self._witness[key] = find_witness(self.initial, ops, final,
                                              must_include=include, must_exclude=exclude)
        return self._witness[key]

    def check(self, ex: Execution, eviction_subset: Sequence[int] | None):
        """Verify a crash (``eviction_subset`` given) or the live end state (``None``)."""
        rec = ex.record
        ops = dict(rec.concrete)
        include = tuple(sorted(k for k, v in rec.results.items() if v))
        exclude = tuple(sorted(k for k, v in rec.results.items() if not v))
        if eviction_subset is None:
            final = ex.heap.data_words()
            msg = "live end state holds tagged words" if any(w & TAG_MASK for w in final) else ""
        else:
            final, msg = self.recovered_words(ex.heap.image_after_eviction(eviction_subset))
        if final is None:
            return False, {}, [], None, msg
        witness = self.witness(ops, final, include, exclude)
        outcomes = _classify(ops, final, witness)
        ok = witness is not None and not msg
        if witness is None and not msg:
            msg = "no sequential execution explains the durable state"
        return ok, outcomes, final, witness, msg


def _all_subsets(lines: Sequence[int]):
    for r in range(len(lines) + 1):
        yield from itertools.combinations(lines, r)


# -- state-machine tables ----------------------------------------------------

OLD, NEW, OLD_D, NEW_D, DESC, FOREIGN = "old", "new", "old'", "new'", "desc", "desc*"

DF_ROWS = {
    0: {(OLD, OLD, "C")},
    1: {(DESC, OLD, "F")},
    2: {(DESC, DESC, "F")},
    3: {(OLD_D, OLD, "F")},
    4: {(OLD_D, DESC, "F")},
    5: {(OLD_D, OLD_D, "F")},
    6: {(OLD, OLD_D, "F")},
    7: {(DESC, DESC, "S")},
    8: {(NEW_D, DESC, "S")},
    9: {(NEW_D, NEW_D, "S")},
    10: {(NEW, NEW_D, "S")},
    11: {(FOREIGN, OLD_D, "F"), (FOREIGN, NEW_D, "S")},
}
DF_EDGES = {(0, 1), (1, 2), (1, 3), (2, 4), (2, 7), (3, 5), (4, 5), (5, 6), (6, 0),
            (7, 8), (8, 9), (9, 10), (10, 0), (6, 11), (10, 11), (11, 9), (11, 5)}
DF_CROSS = {(11, 2), (11, 5)}

NODF_ROWS = {
    0: {(OLD, OLD, "C")},
    1: {(DESC, OLD, "F")},
    2: {(DESC, DESC, "F")},
    3: {(OLD, DESC, "F")},
    4: {(DESC, DESC, "S")},
    5: {(NEW, DESC, "S")},
    6: {(FOREIGN, DESC, "F"), (FOREIGN, DESC, "S")},
}
NODF_EDGES = {(0, 1), (1, 2), (1, 0), (2, 3), (2, 4), (3, 0), (4, 5), (5, 0),
              (3, 6), (5, 6), (6, 3), (6, 5)}
NODF_CROSS = {(6, 2)}

# PCAS has no descriptor: rows are the dirty-flag states of one word.
# "p1" (dirty new over clean old) and "p5" (dirty new over the predecessor's
# dirty value) have no counterpart in the dirty-flag descriptor table.
PCAS_ROWS = {
    0: {(OLD, OLD, "*")},
    "p1": {(NEW_D, OLD, "*")},
    9: {(NEW_D, NEW_D, "*")},
    10: {(NEW, NEW_D, "*")},
    "p5": {(NEW_D, OLD_D, "*")},
}
PCAS_EDGES = {(0, "p1"), ("p1", 9), (9, 10), (10, 0), ("p5", 9)}
PCAS_CROSS = {(10, "p5")}

TABLES = {
    Variant.DF: (DF_ROWS, DF_EDGES, DF_CROSS),
    Variant.NODF: (NODF_ROWS, NODF_EDGES, NODF_CROSS),
    Variant.PCAS: (PCAS_ROWS, PCAS_EDGES, PCAS_CROSS),
}


def _symbol(value: int, expected: int, desired: int, own_desc: int | None) -> str | None:
    if value == expected:
        return OLD
    if value == desired:
        return NEW
    if value == expected | DIRTY_TAG:
        return OLD_D
    if value == desired | DIRTY_TAG:
        return NEW_D
    if value & TAG_MASK == DESCRIPTOR_TAG:
        return DESC if value == own_desc else FOREIGN
    return None


def row_labels(variant: Variant, addr: int, cache: int, durable: int, status: dict,
               ops: dict, desc_words: dict) -> set:
    """All (op, row) pairs the triple for word ``addr`` matches."""
    rows = TABLES[Variant(variant)][0]
    labels = set()
    if cache == durable and not cache & TAG_MASK:
        labels.add((None, 0))
    for key, triples in ops.items():
        for a, e, d in triples:
            if a != addr:
                continue
            state = status.get(key, "C")
            own = desc_words.get(key) if state != "C" else None
            c, p = _symbol(cache, e, d, own), _symbol(durable, e, d, own)
            for row, shapes in rows.items():
                for sc, sp, ss in shapes:
                    if sc == c and sp == p and (ss == "*" or ss == state):
                        labels.add((key, row))
    return labels


def edge_allowed(variant: Variant, before: set, after: set) -> bool:
    _, edges, cross = TABLES[Variant(variant)]
    for k1, r1 in before:
        for k2, r2 in after:
            if k1 is None or k2 is None or k1 == k2:
                if r1 == r2 or (r1, r2) in edges:
                    return True
            elif (r1, r2) in cross:
                return True
    return False


def check_state_machine(verdict: Verdict, variant) -> tuple[bool, str]:
    """Check every recorded (cache, durable, state) triple and transition of ``verdict``.

    Returns ``(True, "")`` or ``(False, description of the first offending triple)``.
    """
    variant = Variant(variant)
    ops = {tuple(int(x) for x in k.split(".")): [tuple(t) for t in v] for k, v in verdict.ops.items()}
    desc_words = {tuple(int(x) for x in k.split(".")): v for k, v in verdict.desc_words.items()}
    for addr, trace in verdict.trace.items():
        prev = None
        for cache, durable, status in trace:
            st = {tuple(int(x) for x in k.split(".")): v for k, v in status.items()}
            labels = row_labels(variant, addr, cache, durable, st, ops, desc_words)
            if not labels:
                return False, f"word {addr}: triple ({cache:#x}, {durable:#x}, {status}) matches no state"
            if prev is not None and not edge_allowed(variant, prev, labels):
                return False, f"word {addr}: no transition into ({cache:#x}, {durable:#x}, {status})"
            prev = labels
    return True, ""


# -- single schedule ---------------------------------------------------------

def _status_json(status: dict) -> dict:
    return {_k(k): v for k, v in sorted(status.items())}


def run_schedule(schedule: CrashSchedule, program: StepProgram, *, evict: str = "all",
                 max_evictions: int | None = None) -> Verdict:
    """Replay ``schedule``, crash and recover if it says so, and judge the result."""
    if max_evictions is None:
        max_evictions = sum(1 for c in schedule.interleaving if not isinstance(c, int))
    ex = Execution(program, evict=evict, max_evictions=max_evictions)
    steps = schedule.interleaving
    stop = len(steps) if schedule.crash_step is None else schedule.crash_step
    if stop > len(steps):
        raise HarnessError(f"crash step {stop} beyond {len(steps)}-step interleaving")
    targets = sorted({a for ops in program.workers for op in ops for a in op.targets})
    trace: dict[int, list] = {a: [] for a in targets}

    def record():
        status = _status_json(ex.op_status())
        for a in targets:
            c, d = ex.snapshot_word(a)
            entry = (c, d, status)
            if not trace[a] or trace[a][-1] != entry:
                trace[a].append(entry)

    record()
    for choice in steps[:stop]:
        ex.step(choice)
        record()

    checker = _Checker(program)
    if schedule.crash_step is None:
        if not ex.finished:
            raise HarnessError("schedule ends before every worker finished")
        ok, outcomes, final, witness, msg = checker.check(ex, None)
        live = {_k(k): v for k, v in ex.record.results.items()}
        for k, v in live.items():
            if outcomes.get(k) != ("all-new" if v else "all-old"):
                ok, msg = False, msg or f"op {k} returned {v} but its effect is {outcomes.get(k)}"
    else:
        subset = tuple(schedule.eviction_subset)
        dirty = set(ex.heap.dirty_lines)
        if not set(subset) <= dirty:
            raise HarnessError(f"eviction subset {subset} is not within dirty lines {sorted(dirty)}")
        ok, outcomes, final, witness, msg = checker.check(ex, subset)
        live = {_k(k): v for k, v in ex.record.results.items()}
    return Verdict(
        schedule=schedule,
        ok=ok,
        outcomes=outcomes,
        live_results=live,
        final_words=list(final),
        witness=None if witness is None else [_k(k) for k in witness],
        message=msg,
        trace=trace,
        ops={_k(k): [list(t) for t in v] for k, v in ex.record.concrete.items()},
        desc_words={_k(k): ex.heap.descriptor_word(k[0]) for k in program.op_keys()},
    )


# -- exhaustive exploration --------------------------------------------------

@dataclass
class ExplorationReport:
    program: StepProgram
    states: int = 0
    edges: int = 0
    terminal_states: int = 0
    crash_checks: int = 0
    recoveries: int = 0
    schedules: int = 0
    interleavings: int = 0
    state_machine_edges: int = 0
    rows_visited: set = field(default_factory=set)
    violations: list[dict] = field(default_factory=list)
    exhaustive: bool = True

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> dict:
        return {
            "variant": self.program.variant.value,
            "workers": len(self.program.workers),
            "ok": self.ok,
            "exhaustive": self.exhaustive,
            "states": self.states,
            "edges": self.edges,
            "terminal_states": self.terminal_states,
            "crash_checks": self.crash_checks,
            "recoveries": self.recoveries,
            "schedules_covered": self.schedules,
            "interleavings": self.interleavings,
            "state_machine_edges_checked": self.state_machine_edges,
            "rows_visited": sorted(map(str, self.rows_visited)),
            "violations": len(self.violations),
        }


def explore(program: StepProgram, *, evict: str = "none", max_evictions: int = 0,
            state_machine: bool = True, bound: int = 10**6, stop_on_violation: bool = False,
            max_violations: int = 10) -> ExplorationReport:
    """Exhaustively check every reachable state under every eviction subset.

    With ``evict`` set to ``"data"`` or ``"all"``, up to ``max_evictions``
    uncontrolled write-backs may also occur between steps.  Raises
    :class:`InstanceTooLarge` if more than ``bound`` crash checks would be
    needed.
    """
    report = ExplorationReport(program)
    checker = _Checker(program)
    variant = program.variant
    targets = sorted({a for ops in program.workers for op in ops for a in op.targets})
    desc_words = {k: None for k in program.op_keys()}

    root = Execution(program, evict=evict, max_evictions=max_evictions)
    for k in desc_words:
        desc_words[k] = root.heap.descriptor_word(k[0])
    root_key = root.key()
    seen = {root_key}
    children: dict[bytes, list[bytes]] = {}
    local: dict[bytes, int] = {}
    stack = [(root_key, root)]

    def violation(ex: Execution, kind: str, msg: str, crash_step=None, subset=()):
        if crash_step is None and not ex.finished:
            # stop the replay right where the offending state appears
            crash_step = len(ex.schedule)
        sched = CrashSchedule(tuple(ex.schedule), crash_step, tuple(subset))
        report.violations.append({"kind": kind, "message": msg, "schedule": sched.to_json()})
        if stop_on_violation or len(report.violations) >= max_violations:
            raise _Stop

    def labels_of(ex: Execution):
        status = ex.op_status()
        ops = ex.record.concrete
        return {a: row_labels(variant, a, *ex.snapshot_word(a), status, ops, desc_words) for a in targets}

    try:
        while stack:
            key, ex = stack.pop()
            report.states += 1
            dirty = ex.effective_dirty_lines()
            n_subsets = 1 << len(dirty)
            local[key] = 1 << len(ex.heap.dirty_lines)
            report.crash_checks += n_subsets
            if report.crash_checks > bound:
                raise InstanceTooLarge(f"more than {bound} crash checks needed")
            for subset in _all_subsets(dirty):
                ok, _, _, _, msg = checker.check(ex, subset)
                if not ok:
                    violation(ex, "crash", msg, len(ex.schedule), subset)
            choices = ex.choices()
            if not any(isinstance(c, int) for c in choices):
                if ex.finished:
                    report.terminal_states += 1
                    local[key] += 1
                    ok, outcomes, _, _, msg = checker.check(ex, None)
                    for k, v in ex.record.results.items():
                        if outcomes.get(_k(k)) != ("all-new" if v else "all-old"):
                            ok, msg = False, msg or f"op {_k(k)} returned {v} but had effect {outcomes.get(_k(k))}"
                    if not ok:
                        violation(ex, "live", msg)
                    children[key] = []
                    continue
                violation(ex, "deadlock", "no worker can make progress")
                children[key] = []
                continue
            before = labels_of(ex) if state_machine else None
            if before is not None:
                for a, lab in before.items():
                    report.rows_visited.update(r for _, r in lab)
                    if not lab:
                        violation(ex, "state-machine", f"word {a}: {ex.snapshot_word(a)} matches no state")
            kids = []
            for i, c in enumerate(choices):
                child = ex if i == len(choices) - 1 else ex.clone()
                child.step(c)
                report.edges += 1
                if before is not None:
                    after = labels_of(child)
                    report.state_machine_edges += 1
                    for a in targets:
                        if not after[a]:
                            violation(child, "state-machine",
                                      f"word {a}: {child.snapshot_word(a)} matches no state")
                        elif before[a] != after[a] and not edge_allowed(variant, before[a], after[a]):
                            violation(child, "state-machine",
                                      f"word {a}: no transition {sorted(map(str, before[a]))} -> "
                                      f"{sorted(map(str, after[a]))}")
                ck = child.key()
                kids.append(ck)
                if ck not in seen:
                    seen.add(ck)
                    stack.append((ck, child))
            children[key] = kids
    except _Stop:
        report.exhaustive = False

    report.recoveries = checker.recoveries
    if report.exhaustive:
        report.schedules, report.interleavings = _count_paths(root_key, children, local)
    return report


class _Stop(Exception):
    pass


def _path_weights(root, children, local):
    """Per node: (complete interleavings below it, schedules below it).

    A schedule is a complete interleaving plus a crash point on it, so a
    prefix shared by several interleavings is counted once per interleaving.
    ``local`` holds the crash options at each node (eviction subsets, plus
    one for "no crash" at terminal nodes).
    """
    inter: dict = {}
    sched: dict = {}
    for node in _topo(root, children):
        kids = children.get(node, ())
        if not kids:
            inter[node] = 1
            sched[node] = local.get(node, 0)
        else:
            inter[node] = sum(inter[c] for c in kids)
            sched[node] = local.get(node, 0) * inter[node] + sum(sched[c] for c in kids)
    return inter, sched


def _count_paths(root, children, local):
    """(schedules, complete interleavings) reachable from ``root`` in the state DAG."""
    inter, sched = _path_weights(root, children, local)
    return sched[root], inter[root]


# -- schedule streams --------------------------------------------------------

def enumerate_schedules(program: StepProgram, bound: int = 10**6, *, samples: int | None = None,
                        seed: int = 0, evict: str = "none", max_evictions: int = 0) -> Iterator[CrashSchedule]:
    """Every (interleaving, crash step, eviction subset), or a seeded sample.

    The full stream is produced when it has at most ``bound`` entries;
    otherwise ``samples`` (default ``bound``) schedules are drawn uniformly
    at random from it with ``seed``.
    """
    if not program.workers:
        yield CrashSchedule(())
        return
    total = count_schedules(program, evict=evict, max_evictions=max_evictions)
    if total <= bound:
        yield from _enumerate_all(Execution(program, evict=evict, max_evictions=max_evictions))
    else:
        yield from sample_schedules(program, samples or bound, seed=seed, evict=evict,
                                    max_evictions=max_evictions)


def enumerate_interleavings(program: StepProgram, *, evict: str = "none",
                            max_evictions: int = 0) -> Iterator[tuple]:
    """Every complete interleaving, as a tuple of choices."""
    root = Execution(program, evict=evict, max_evictions=max_evictions)
    stack = [root]
    while stack:
        ex = stack.pop()
        choices = ex.choices()
        if not any(isinstance(c, int) for c in choices):
            if not ex.finished:
                raise HarnessError(f"deadlock after {ex.schedule}")
            yield tuple(ex.schedule)
            continue
        for i, c in enumerate(reversed(choices)):
            child = ex if i == len(choices) - 1 else ex.clone()
            child.step(c)
            stack.append(child)


def _enumerate_all(root: Execution) -> Iterator[CrashSchedule]:
    for full in enumerate_interleavings(root.program, evict=root.evict, max_evictions=root.max_evictions):
        yield from _crash_points(root.program, full, root.evict, root.max_evictions)


def _crash_points(program, full, evict, max_evictions):
    ex = Execution(program, evict=evict, max_evictions=max_evictions)
    for step in range(len(full) + 1):
        for subset in _all_subsets(sorted(ex.heap.dirty_lines)):
            yield CrashSchedule(full, step, subset)
        if step < len(full):
            ex.step(full[step])
    yield CrashSchedule(full, None, ())


def _schedule_graph(program, evict, max_evictions):
    root = Execution(program, evict=evict, max_evictions=max_evictions)
    rk = root.key()
    seen = {rk: root}
    children: dict = {}
    local: dict = {}
    stack = [(rk, root)]
    while stack:
        key, ex = stack.pop()
        local[key] = 1 << len(ex.heap.dirty_lines)
        choices = ex.choices()
        if not any(isinstance(c, int) for c in choices):
            if not ex.finished:
                raise HarnessError(f"deadlock after {ex.schedule}")
            local[key] += 1
            children[key] = []
            continue
        kids = []
        for i, c in enumerate(choices):
            child = ex if i == len(choices) - 1 else ex.clone()
            child.step(c)
            ck = child.key()
            kids.append((c, ck))
            if ck not in seen:
                seen[ck] = None
                stack.append((ck, child))
        children[key] = kids
    return rk, children, local


def count_schedules(program: StepProgram, *, evict: str = "none", max_evictions: int = 0) -> int:
    """Size of the (interleaving, crash step, eviction subset) stream."""
    if not program.workers:
        return 1
    rk, children, local = _schedule_graph(program, evict, max_evictions)
    return _count_paths(rk, {k: [c for _, c in v] for k, v in children.items()}, local)[0]


def count_interleavings(program: StepProgram, *, evict: str = "none", max_evictions: int = 0) -> int:
    if not program.workers:
        return 1
    rk, children, local = _schedule_graph(program, evict, max_evictions)
    return _count_paths(rk, {k: [c for _, c in v] for k, v in children.items()}, local)[1]


def sample_schedules(program: StepProgram, n: int, *, seed: int = 0, evict: str = "none",
                     max_evictions: int = 0) -> Iterator[CrashSchedule]:
    """``n`` schedules drawn uniformly (with replacement) from the full stream."""
    if not program.workers:
        for _ in range(n):
            yield CrashSchedule(())
        return
    rk, children, local = _schedule_graph(program, evict, max_evictions)
    plain = {k: [c for _, c in v] for k, v in children.items()}
    inter, sched = _path_weights(rk, plain, local)
    rng = random.Random(seed)
    for _ in range(n):
        ex = Execution(program, evict=evict, max_evictions=max_evictions)
        node = rk
        prefix = 0
        points = []  # (crash options, steps taken, dirty lines) along the path
        while True:
            points.append((local[node], len(ex.schedule), sorted(ex.heap.dirty_lines)))
            prefix += local[node]
            kids = children[node]
            if not kids:
                break
            r = rng.randrange(sum(prefix * inter[ck] + sched[ck] for _, ck in kids))
            for c, ck in kids:
                w = prefix * inter[ck] + sched[ck]
                if r < w:
                    ex.step(c)
                    node = ck
                    break
                r -= w
        full = tuple(ex.schedule)
        r = rng.randrange(prefix)
        for options, step, dirty in points:
            if r < options:
                break
            r -= options
        if r == 1 << len(dirty):
            yield CrashSchedule(full, None, ())
        else:
            subset = tuple(line for i, line in enumerate(dirty) if r >> i & 1)
            yield CrashSchedule(full, step, subset)


def _topo(root, children):
    order, stack, seen = [], [(root, False)], set()
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        for c in children.get(node, ()):
            if c not in seen:
                stack.append((c, False))
    return order


def random_crash(program: StepProgram, rng: random.Random, *, max_evictions: int = 2) -> tuple[Execution, tuple[int, ...]]:
    """Random walk to a random crash point; returns the execution and an eviction subset."""
    ex = Execution(program, evict="all", max_evictions=max_evictions)
    total = None
    while True:
        choices = ex.choices()
        workers = [c for c in choices if isinstance(c, int)]
        if not workers:
            break
        if total is None:
            total = rng.randrange(1, 64)
        if len(ex.schedule) >= total:
            break
        ex.step(rng.choice(choices))
    dirty = sorted(ex.heap.dirty_lines)
    subset = tuple(line for line in dirty if rng.random() < 0.5)
    return ex, subset

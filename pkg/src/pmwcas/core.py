"""PMwCAS with and without dirty flags, the read procedure, and software PCAS.

Each routine exists as a ``*_steps`` generator yielding one event per
shared-memory access (see :mod:`pmwcas.events`).  :func:`run` drives a
generator straight against a heap; the crash harness drives the very same
generators one event at a time.
"""
from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field, fields
from typing import Generator, Iterable

from . import events as ev
from .events import CAS, DESC_PERSIST, DESC_STATE, DESC_WRITE, LOAD, PERSIST, STORE, WAIT
from .pmem import DescriptorState, PersistentHeap, Variant
from .words import DIRTY_TAG, TAG_MASK, TagError

FAILED = int(DescriptorState.FAILED)
SUCCEEDED = int(DescriptorState.SUCCEEDED)
COMPLETED = int(DescriptorState.COMPLETED)

Steps = Generator[tuple, object, object]


class ContractViolation(RuntimeError):
    pass


class ReadTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class TargetEntry:
    address: int
    expected: int
    desired: int

    def __post_init__(self):
        if self.expected & TAG_MASK or self.desired & TAG_MASK:
            raise TagError("PMwCAS targets must hold plain payload words")


class Descriptor:
    """One PMwCAS operation: a slot plus the target triples, in embedding order."""

    def __init__(self, slot: int, targets: Iterable[TargetEntry] = (), max_targets: int = 8):
        self.slot = slot
        self.max_targets = max_targets
        self.state = DescriptorState.COMPLETED
        self.targets: list[TargetEntry] = []
        for t in targets:
            self.add(t.address, t.expected, t.desired)

    def add(self, address: int, expected: int, desired: int) -> "Descriptor":
        """Append a target; values are raw payload words (see :func:`pmwcas.words.encode`)."""
        if len(self.targets) >= self.max_targets:
            raise ContractViolation(f"descriptor already holds {self.max_targets} targets")
        if any(t.address == address for t in self.targets):
            raise ContractViolation(f"address {address} appears twice in one descriptor")
        self.targets.append(TargetEntry(address, expected, desired))
        return self

    @property
    def count(self) -> int:
        return len(self.targets)

    def triples(self) -> tuple[tuple[int, int, int], ...]:
        return tuple((t.address, t.expected, t.desired) for t in self.targets)

    def __repr__(self):
        return f"Descriptor(slot={self.slot}, targets={self.targets!r})"


# -- step generators ---------------------------------------------------------

def read_word_steps(addr: int) -> Steps:
    """Load ``addr`` until it holds a plain payload."""
    while True:
        word = yield (LOAD, addr)
        if not word & TAG_MASK:
            return word
        yield (WAIT, addr, word)


def pmwcas_steps(slot: int, desc_word: int, targets: tuple[tuple[int, int, int], ...],
                 dirty_flags: bool) -> Steps:
    count = len(targets)
    yield (DESC_WRITE, slot, FAILED, targets)
    yield (DESC_PERSIST, slot, count)

    # reservation: embed the descriptor in target order
    success = True
    reserved = 0
    for addr, expected, _ in targets:
        while True:
            word = yield (LOAD, addr)
            if word & TAG_MASK:
                yield (WAIT, addr, word)
                continue
            word = yield (CAS, addr, expected, desc_word)
            if word & TAG_MASK:
                yield (WAIT, addr, word)
                continue
            break
        if word != expected:
            success = False
            break
        reserved += 1

    if success:
        for addr, _, _ in targets:
            yield (PERSIST, addr)
        yield (DESC_STATE, slot, SUCCEEDED)
        yield (DESC_PERSIST, slot, count)  # linearization point

    # finalization: commit or roll back the reserved prefix
    for addr, expected, desired in targets[:reserved]:
        word = desired if success else expected
        if dirty_flags:
            yield (STORE, addr, word | DIRTY_TAG)
            yield (PERSIST, addr)
        yield (STORE, addr, word)
        yield (PERSIST, addr)
    yield (DESC_STATE, slot, COMPLETED)
    return success


def pcas_steps(addr: int, expected: int, desired: int) -> Steps:
    """Persistent single-word CAS: install the dirty value, flush once, clear the flag."""
    dirty = desired | DIRTY_TAG
    while True:
        word = yield (LOAD, addr)
        if word & TAG_MASK:
            yield (WAIT, addr, word)
            continue
        word = yield (CAS, addr, expected, dirty)
        if word & TAG_MASK:
            yield (WAIT, addr, word)
            continue
        break
    if word != expected:
        return False
    yield (PERSIST, addr)
    yield (CAS, addr, dirty, desired)
    return True


def increment_steps(slot: int, desc_word: int, addrs, dirty_flags: bool, single: bool = False) -> Steps:
    """Add one to each word of ``addrs`` atomically, retrying with fresh reads.

    ``single`` uses PCAS for a one-word increment.  Returns the number of
    failed attempts.
    """
    failed = 0
    while True:
        triples = []
        for a in addrs:
            # read_word_steps, inlined: this loop is the benchmark's hot path
            v = yield (LOAD, a)
            while v & TAG_MASK:
                yield (WAIT, a, v)
                v = yield (LOAD, a)
            triples.append((a, v, v + 4))
        if single:
            ok = yield from pcas_steps(*triples[0])
        else:
            ok = yield from pmwcas_steps(slot, desc_word, tuple(triples), dirty_flags)
        if ok:
            return failed
        failed += 1


# -- instrumentation ---------------------------------------------------------

@dataclass
class OpStats:
    """Event counts for one operation.

    ``cas_count`` includes the owner's finalizing clean store, which takes the
    place of a second CAS on a reserved word.
    """

    cas_count: int = 0
    dirty_store_count: int = 0
    flush_count: int = 0
    target_flush_count: int = 0
    descriptor_flush_count: int = 0
    load_count: int = 0
    retry_count: int = 0

    def __iadd__(self, other: "OpStats") -> "OpStats":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def count(self, event: tuple) -> None:
        op = event[0]
        if op == LOAD:
            self.load_count += 1
        elif op == CAS:
            self.cas_count += 1
        elif op == STORE:
            if event[2] & TAG_MASK == DIRTY_TAG:
                self.dirty_store_count += 1
            else:
                self.cas_count += 1
        elif op == PERSIST:
            self.flush_count += 1
            self.target_flush_count += 1
        elif op == DESC_PERSIST:
            self.flush_count += 1
            self.descriptor_flush_count += 1
        elif op == WAIT:
            self.retry_count += 1


@dataclass
class Instrumentation:
    """Collects per-operation :class:`OpStats`; does nothing when disabled."""

    enabled: bool = True
    records: list[tuple[str, OpStats]] = field(default_factory=list)

    def new(self, kind: str) -> OpStats | None:
        if not self.enabled:
            return None
        stats = OpStats()
        self.records.append((kind, stats))
        return stats

    def aggregate(self) -> OpStats:
        total = OpStats()
        for _, s in self.records:
            total += s
        return total

    def report(self) -> dict:
        return {
            "operations": [{"kind": k, **s.as_dict()} for k, s in self.records],
            "aggregate": self.aggregate().as_dict(),
        }


# -- back-off and driver -----------------------------------------------------

class Backoff:
    """Spin a few rounds, then sleep with exponentially growing naps.

    Under a global interpreter lock a spinning waiter only delays the thread
    it waits for, so waiting soon turns into sleeping.
    """

    def __init__(self, spins: int = 2, initial_sleep: float = 5e-5, max_sleep: float = 1e-3):
        self.spins = spins
        self.initial_sleep = initial_sleep
        self.max_sleep = max_sleep
        self.reset()

    def reset(self) -> None:
        self._round = 0
        self._nap = self.initial_sleep

    def pause(self) -> None:
        self._round += 1
        if self._round <= self.spins:
            return
        time.sleep(self._nap)
        self._nap = min(self._nap * 2, self.max_sleep)


def _tally(stats: OpStats, counts: list[int], dirty_stores: int) -> None:
    stats.load_count += counts[LOAD]
    stats.cas_count += counts[CAS] + counts[STORE] - dirty_stores
    stats.dirty_store_count += dirty_stores
    stats.target_flush_count += counts[PERSIST]
    stats.descriptor_flush_count += counts[DESC_PERSIST]
    stats.flush_count += counts[PERSIST] + counts[DESC_PERSIST]
    stats.retry_count += counts[WAIT]


def _run_plain(table: tuple, send, backoff: Backoff | None):
    result = None
    try:
        while True:
            event = send(result)
            op = event[0]
            if op == WAIT:
                if backoff is None:
                    backoff = Backoff()
                backoff.pause()
                result = None
            else:
                result = table[op](event)
    except StopIteration as stop:
        return stop.value


def run(heap: PersistentHeap, steps: Steps, stats: OpStats | None = None,
        timeout: float | None = None, backoff: Backoff | None = None):
    """Execute a step generator to completion against ``heap``; return its result."""
    table = heap.dispatcher()
    send = steps.send
    if stats is None and timeout is None:
        return _run_plain(table, send, backoff)
    counts = [0] * 8
    dirty_stores = 0
    deadline = None
    result = None
    try:
        while True:
            event = send(result)
            op = event[0]
            counts[op] += 1
            if op == WAIT:
                if timeout is not None:
                    now = time.monotonic()
                    if deadline is None:
                        deadline = now + timeout
                    elif now > deadline:
                        steps.close()
                        raise ReadTimeout(f"word {event[1]} stayed reserved for more than {timeout}s")
                if backoff is None:
                    backoff = Backoff()
                backoff.pause()
                result = None
            else:
                if op == STORE and event[2] & TAG_MASK == DIRTY_TAG:
                    dirty_stores += 1
                result = table[op](event)
    except StopIteration as stop:
        return stop.value
    finally:
        if stats is not None:
            _tally(stats, counts, dirty_stores)


# -- slot ownership ----------------------------------------------------------

_busy_lock = threading.Lock()


def _claim(heap: PersistentHeap, slot: int) -> None:
    with _busy_lock:
        busy = heap.__dict__.setdefault("_busy_slots", set())
        if slot in busy:
            raise ContractViolation(f"descriptor slot {slot} is already in use")
        busy.add(slot)


def _release(heap: PersistentHeap, slot: int) -> None:
    with _busy_lock:
        heap.__dict__["_busy_slots"].discard(slot)


# -- public operations -------------------------------------------------------

def pmwcas(heap: PersistentHeap, desc: Descriptor, *, dirty_flags: bool | None = None,
           stats: OpStats | None = None) -> bool:
    """Atomically and durably swap every target of ``desc``, or none of them.

    ``dirty_flags`` defaults to the heap's variant.
    """
    if dirty_flags is None:
        dirty_flags = heap.variant is Variant.DF
    if desc.count == 0:
        raise ContractViolation("descriptor has no targets")
    if desc.count > heap.layout.max_targets:
        raise ContractViolation(f"{desc.count} targets exceed the heap's max_targets")
    for t in desc.targets:
        heap._offset(t.address)
    _claim(heap, desc.slot)
    try:
        desc.state = DescriptorState.FAILED
        ok = run(heap, pmwcas_steps(desc.slot, heap.descriptor_word(desc.slot), desc.triples(), dirty_flags),
                 stats)
        desc.state = DescriptorState.COMPLETED
        return ok
    finally:
        _release(heap, desc.slot)


def pmwcas_df(heap: PersistentHeap, desc: Descriptor, stats: OpStats | None = None) -> bool:
    return pmwcas(heap, desc, dirty_flags=True, stats=stats)


def pmwcas_nodf(heap: PersistentHeap, desc: Descriptor, stats: OpStats | None = None) -> bool:
    return pmwcas(heap, desc, dirty_flags=False, stats=stats)


def read_word(heap: PersistentHeap, addr: int, *, timeout: float | None = None,
              stats: OpStats | None = None) -> int:
    """Current payload word at ``addr``, waiting out any in-flight operation."""
    heap._offset(addr)
    return run(heap, read_word_steps(addr), stats, timeout=timeout)


def pcas(heap: PersistentHeap, addr: int, expected: int, desired: int,
         stats: OpStats | None = None) -> bool:
    if expected & TAG_MASK or desired & TAG_MASK:
        raise TagError("PCAS operands must be plain payload words")
    heap._offset(addr)
    return run(heap, pcas_steps(addr, expected, desired), stats)


def event_trace(heap: PersistentHeap, steps: Steps) -> tuple[object, list[str]]:
    """Run ``steps`` single-threaded and return (result, described events)."""
    log: list[str] = []
    result = None
    try:
        while True:
            event = steps.send(result)
            log.append(ev.describe(event))
            result = None if event[0] == WAIT else heap.execute(event)
    except StopIteration as stop:
        return stop.value, log


def hardware_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1

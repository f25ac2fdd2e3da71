"""Post-crash recovery.

Descriptors double as write-ahead logs: a data word that still references a
descriptor is rolled forward to its desired value when the descriptor is
durably Succeeded and rolled back to its expected value otherwise.  Heaps
that use dirty flags then have every flag cleared.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .pmem import DescriptorState, HeapError, PersistentHeap, SimulatedHeap
from .words import DESCRIPTOR_TAG, DIRTY_TAG, TAG_MASK


class RecoveryError(HeapError):
    pass


@dataclass
class RecoveryReport:
    descriptors_scanned: int = 0
    rolled_forward: int = 0
    rolled_back: int = 0
    dirty_flags_cleared: int = 0
    descriptors_completed: int = 0
    words_touched: list[int] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "descriptors_scanned": self.descriptors_scanned,
            "rolled_forward": self.rolled_forward,
            "rolled_back": self.rolled_back,
            "dirty_flags_cleared": self.dirty_flags_cleared,
            "descriptors_completed": self.descriptors_completed,
            "words_touched": list(self.words_touched),
        }


def _references(heap: PersistentHeap, words: list[int]) -> dict[int, list[int]]:
    refs: dict[int, list[int]] = {}
    for addr, w in enumerate(words):
        t = w & TAG_MASK
        if t == DESCRIPTOR_TAG:
            try:
                slot = heap.slot_of(w)
            except HeapError as exc:
                raise RecoveryError(f"word {addr}: {exc}") from None
            refs.setdefault(slot, []).append(addr)
        elif t == TAG_MASK:
            raise RecoveryError(f"word {addr} holds reserved tag 0b11 ({w:#x})")
    return refs


def _validate(heap: PersistentHeap, rec, live: list[int]) -> None:
    slot = rec.slot
    if not 1 <= rec.count <= heap.layout.max_targets:
        raise RecoveryError(f"descriptor slot {slot}: bad target count {rec.count}")
    addrs = [t[0] for t in rec.targets]
    if len(set(addrs)) != len(addrs):
        raise RecoveryError(f"descriptor slot {slot}: duplicate target addresses {addrs}")
    for a in addrs:
        if not 0 <= a < heap.word_capacity:
            raise RecoveryError(f"descriptor slot {slot}: target address {a} out of range")
    stray = set(live) - set(addrs)
    if stray:
        raise RecoveryError(f"descriptor slot {slot} is referenced by words {sorted(stray)} it does not target")
    if rec.state == DescriptorState.COMPLETED:
        raise RecoveryError(f"descriptor slot {slot} is Completed but still referenced by words {live}")


def recover(heap: PersistentHeap) -> RecoveryReport:
    """Bring ``heap`` to a state with no descriptor references or dirty flags.

    Must run single-threaded before any worker touches the heap.  Reads only
    the heap's current view, which after a crash is the durable view.
    """
    report = RecoveryReport()
    touched: dict[int, None] = {}
    refs = _references(heap, heap.data_words())

    for slot in range(heap.layout.worker_slots):
        rec = heap.read_descriptor(slot)
        report.descriptors_scanned += 1
        live = refs.get(slot)
        if live:
            _validate(heap, rec, live)
            # an unreadable state means the descriptor never finished its first persist
            forward = rec.state == DescriptorState.SUCCEEDED
            dword = heap.descriptor_word(slot)
            for addr, expected, desired in rec.targets:
                if heap.load(addr) & ~DIRTY_TAG == dword:
                    heap.store(addr, desired if forward else expected)
                    heap.persist(addr)
                    touched[addr] = None
                    if forward:
                        report.rolled_forward += 1
                    else:
                        report.rolled_back += 1
        if rec.state != DescriptorState.COMPLETED:
            heap.write_state(slot, DescriptorState.COMPLETED)
            heap.persist_descriptor(slot, 0)
            report.descriptors_completed += 1

    if heap.variant.uses_dirty_flags:
        for addr in range(heap.word_capacity):
            w = heap.load(addr)
            if w & TAG_MASK == DIRTY_TAG:
                heap.store(addr, w & ~TAG_MASK)
                heap.persist(addr)
                touched[addr] = None
                report.dirty_flags_cleared += 1

    report.words_touched = list(touched)
    return report


def durable_snapshot(heap: PersistentHeap):
    if isinstance(heap, SimulatedHeap):
        return heap.durable_image()
    mm = getattr(heap, "_mm", None)
    if mm is not None:
        return bytes(mm)
    return tuple(heap._words)


def recover_idempotence_check(heap: PersistentHeap) -> bool:
    """Run recovery again and report whether it left the durable image untouched."""
    before = durable_snapshot(heap)
    report = recover(heap)
    return not report.words_touched and durable_snapshot(heap) == before

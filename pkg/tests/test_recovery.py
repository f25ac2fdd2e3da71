import pytest
from hypothesis import given, settings, strategies as st

from pmwcas.core import pcas_steps, pmwcas_steps, run
from pmwcas.pmem import DescriptorState, HeapLayout, SimulatedHeap, Variant
from pmwcas.recovery import RecoveryError, durable_snapshot, recover, recover_idempotence_check
from pmwcas.words import DIRTY_TAG, encode

OLD, NEW = encode(10), encode(11)


def heap_with(variant=Variant.DF, slots=2):
    heap = SimulatedHeap(HeapLayout(4, 64, slots, 4), variant)
    for a in range(4):
        heap.store(a, encode(10 * (a + 1)))
        heap.persist(a)
    return heap


def durable_descriptor(heap, slot, state, targets):
    heap.write_descriptor(slot, state, targets)
    heap.persist_descriptor(slot, len(targets))


def durable_word(heap, addr, value):
    heap.store(addr, value)
    heap.persist(addr)


def test_df_row_2_rolls_back():
    heap = heap_with()
    durable_descriptor(heap, 0, DescriptorState.FAILED, ((0, OLD, NEW),))
    durable_word(heap, 0, heap.descriptor_word(0))
    heap.crash()
    report = recover(heap)
    assert heap.durable_load(0) == OLD
    assert report.rolled_back == 1 and report.rolled_forward == 0


def test_nodf_row_5_rolls_forward():
    heap = heap_with(Variant.NODF)
    durable_descriptor(heap, 0, DescriptorState.SUCCEEDED, ((0, OLD, NEW),))
    durable_word(heap, 0, heap.descriptor_word(0))
    heap.store(0, NEW)  # cached only
    heap.crash()
    report = recover(heap)
    assert heap.durable_load(0) == NEW
    assert report.rolled_forward == 1


def test_df_row_9_clears_dirty_flag():
    heap = heap_with()
    durable_descriptor(heap, 0, DescriptorState.SUCCEEDED, ((0, OLD, NEW),))
    durable_word(heap, 0, NEW | DIRTY_TAG)
    heap.crash()
    report = recover(heap)
    assert heap.durable_load(0) == NEW
    assert report.dirty_flags_cleared == 1
    assert report.rolled_forward == 0


def test_dirty_descriptor_reference_is_recognised():
    heap = heap_with()
    durable_descriptor(heap, 0, DescriptorState.SUCCEEDED, ((0, OLD, NEW),))
    durable_word(heap, 0, heap.descriptor_word(0) | DIRTY_TAG)
    heap.crash()
    with pytest.raises(RecoveryError):
        recover(heap)  # tag 0b11 is never produced by the algorithms


def test_clean_heap_untouched():
    heap = heap_with()
    before = durable_snapshot(heap)
    report = recover(heap)
    assert report.words_touched == []
    assert report.descriptors_completed == 0
    assert durable_snapshot(heap) == before


def test_foreign_descriptor_rollback_yields_expected_of_waiter():
    heap = heap_with(Variant.NODF)
    a, b = heap.descriptor_word(0), heap.descriptor_word(1)
    # op A reserved word 0; op B read the same old value and is waiting to reserve
    durable_descriptor(heap, 0, DescriptorState.FAILED, ((0, OLD, NEW),))
    durable_descriptor(heap, 1, DescriptorState.FAILED, ((1, encode(20), encode(21)), (0, OLD, encode(12))))
    durable_word(heap, 0, a)
    durable_word(heap, 1, b)
    heap.crash()
    recover(heap)
    assert heap.durable_load(0) == OLD == heap.read_durable_descriptor(1).targets[1][1]
    assert heap.durable_load(1) == encode(20)
    assert recover_idempotence_check(heap)


def test_undecodable_state_rolls_back():
    heap = heap_with(Variant.NODF)
    durable_descriptor(heap, 0, 7, ((0, OLD, NEW),))
    durable_word(heap, 0, heap.descriptor_word(0))
    heap.crash()
    recover(heap)
    assert heap.durable_load(0) == OLD


def test_descriptors_end_completed():
    heap = heap_with()
    durable_descriptor(heap, 0, DescriptorState.FAILED, ((0, OLD, NEW),))
    durable_descriptor(heap, 1, DescriptorState.SUCCEEDED, ((1, encode(20), encode(21)),))
    heap.crash()
    report = recover(heap)
    assert report.descriptors_completed == 2
    for s in range(2):
        assert heap.read_durable_descriptor(s).state == DescriptorState.COMPLETED
    assert heap.durable_load(1) == encode(20)  # no reference, nothing to roll


@pytest.mark.parametrize("corrupt", ["stray", "completed", "bad-slot", "range", "dup"])
def test_inconsistent_heaps_are_rejected(corrupt):
    heap = heap_with(slots=1)
    dword = heap.descriptor_word(0)
    if corrupt == "stray":
        durable_descriptor(heap, 0, DescriptorState.FAILED, ((1, OLD, NEW),))
        durable_word(heap, 0, dword)
    elif corrupt == "completed":
        durable_descriptor(heap, 0, DescriptorState.COMPLETED, ((0, OLD, NEW),))
        durable_word(heap, 0, dword)
    elif corrupt == "bad-slot":
        durable_word(heap, 0, dword + 8 * 64)
    elif corrupt == "range":
        durable_descriptor(heap, 0, DescriptorState.FAILED, ((0, OLD, NEW), (9, OLD, NEW)))
        durable_word(heap, 0, dword)
    else:
        durable_descriptor(heap, 0, DescriptorState.FAILED, ((0, OLD, NEW), (0, OLD, NEW)))
        durable_word(heap, 0, dword)
    heap.crash()
    with pytest.raises(RecoveryError):
        recover(heap)


def crash_mid(variant, cut, evict_mask):
    heap = heap_with(variant)
    targets = ((0, OLD, NEW), (2, encode(30), encode(31)))
    if variant is Variant.PCAS:
        steps = pcas_steps(0, OLD, NEW)
        targets = targets[:1]
    else:
        steps = pmwcas_steps(0, heap.descriptor_word(0), targets, variant is Variant.DF)
    result = None
    try:
        for _ in range(cut):
            result = heap.execute(steps.send(result))
    except StopIteration:
        pass
    lines = sorted(heap.dirty_lines)
    heap.crash([line for i, line in enumerate(lines) if evict_mask >> i & 1])
    return heap, targets


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(list(Variant)), st.integers(0, 30), st.integers(0, 255))
def test_any_crash_recovers_to_all_or_nothing(variant, cut, mask):
    heap, targets = crash_mid(variant, cut, mask)
    recover(heap)
    vals = [heap.durable_load(a) for a, _, _ in targets]
    assert vals in ([e for _, e, _ in targets], [d for _, _, d in targets])
    assert all(heap.durable_load(a) & 0b11 == 0 for a in range(4))
    assert recover_idempotence_check(heap)

"""Swap three words at once on a simulated heap and count what it cost."""
from pmwcas.core import Descriptor, OpStats, pmwcas, read_word
from pmwcas.pmem import HeapLayout, SimulatedHeap, Variant
from pmwcas.words import decode, encode

for variant in (Variant.NODF, Variant.DF):
    heap = SimulatedHeap(HeapLayout(8, 64, 1, 8), variant)
    for a in range(8):
        heap.store(a, encode(10 * a))
        heap.persist(a)

    desc = Descriptor(0)
    for a in (1, 4, 6):
        desc.add(a, encode(10 * a), encode(10 * a + 1))
    stats = OpStats()
    ok = pmwcas(heap, desc, stats=stats)
    values = [decode(read_word(heap, a)) for a in range(8)]
    print(f"{variant.value:>5}: success={ok} words={values}")
    print(f"       cas={stats.cas_count} dirty stores={stats.dirty_store_count} flushes={stats.flush_count}")

    # a stale expectation fails and leaves everything as it was
    stale = Descriptor(0)
    stale.add(1, encode(10), encode(99))
    print(f"       stale retry succeeds? {pmwcas(heap, stale)}")

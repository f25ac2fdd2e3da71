"""Crash a heap file halfway through an operation and let recovery repair it."""
import os
import tempfile

from pmwcas.core import pmwcas_steps
from pmwcas.pmem import MappedHeap, Variant, open_heap
from pmwcas.words import decode, encode

path = os.path.join(tempfile.mkdtemp(), "demo.heap")
heap = MappedHeap.create(path, 16, 64, 1, Variant.DF)
for a in range(16):
    heap.store(a, encode(a))
    heap.persist(a)

# drive the operation by hand and stop after the descriptor is installed in two words
steps = pmwcas_steps(0, heap.descriptor_word(0), ((2, encode(2), encode(200)), (5, encode(5), encode(500))), True)
result = None
for _ in range(6):
    event = steps.send(result)
    result = heap.execute(event)
print("before crash:", [hex(heap.load(a)) for a in (2, 5)])
heap.close(clean=False)

# the descriptor never reached Succeeded, so both words roll back

heap = open_heap(path)
print("recovery:", heap.last_recovery.as_dict())
print("after recovery:", [decode(heap.load(a)) for a in (2, 5)])
heap.close()

"""Shared-memory events yielded by the algorithm generators.

Every PMwCAS/PCAS/read routine is written as a generator that yields one
tuple per shared-memory access and receives the access result back through
``send``.  A driver executes the events, either directly against a heap
(:func:`pmwcas.core.run`) or one at a time under the crash harness.

Event layouts::

    (LOAD, addr)                      -> raw word
    (CAS, addr, expected, desired)    -> raw word seen before the CAS
    (STORE, addr, value)              -> None
    (PERSIST, addr)                   -> None
    (DESC_WRITE, slot, state, targets)-> None   # cache only
    (DESC_STATE, slot, state)         -> None   # cache only
    (DESC_PERSIST, slot, count)       -> None
    (WAIT, addr, observed)            -> None   # back-off, not a memory access

``addr`` is a data word index; ``targets`` is a tuple of
``(addr, expected, desired)`` raw triples.
"""

LOAD = 0
CAS = 1
STORE = 2
PERSIST = 3
DESC_WRITE = 4
DESC_STATE = 5
DESC_PERSIST = 6
WAIT = 7

NAMES = {
    LOAD: "load",
    CAS: "cas",
    STORE: "store",
    PERSIST: "persist",
    DESC_WRITE: "desc-write",
    DESC_STATE: "desc-state",
    DESC_PERSIST: "desc-persist",
    WAIT: "wait",
}

MEMORY_EVENTS = frozenset(NAMES) - {WAIT}


def describe(event: tuple) -> str:
    name = NAMES[event[0]]
    return f"{name}({', '.join(str(a) for a in event[1:])})"

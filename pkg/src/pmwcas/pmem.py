"""Word-addressable persistent heaps.

A heap is a flat image of 8-byte words: a header, a descriptor area with one
slot per worker, then one block per data word with the word at the head of
its block.  Word operations act on the *cache view*; :meth:`persist` makes a
cache line durable.

Three backends share this interface:

* :class:`SimulatedHeap` keeps separate cache and durable views and tracks
  dirty lines, so a crash can be injected with any subset of dirty lines
  evicted first.  Used for crash testing.
* :class:`DramHeap` is plain memory; persist only counts and fences.
* :class:`MappedHeap` is a memory-mapped file; persist writes the touched
  page back with ``msync``.
"""
from __future__ import annotations

import enum
import mmap
import os
import struct
import threading
from dataclasses import dataclass
from typing import Iterable, Sequence

from . import events as ev
from .words import DESCRIPTOR_TAG, TAG_MASK, descriptor_word

LINE_SIZE = 64
PAGE_SIZE = 4096
MAGIC = b"PMWC"
FORMAT_VERSION = 1
# magic, version, word_capacity, block_size, worker_slots, max_targets,
# variant, clean-shutdown marker
HEADER = struct.Struct("<4sIQIIIII")
DEFAULT_MAX_TARGETS = 8

DESC_STATE_WORD = 0
DESC_COUNT_WORD = 1
DESC_TARGETS_WORD = 2


class HeapError(Exception):
    pass


class AddressError(HeapError, IndexError):
    pass


class UnsupportedBackend(HeapError):
    pass


class Variant(enum.Enum):
    DF = "df"
    NODF = "nodf"
    PCAS = "pcas"

    @property
    def code(self) -> int:
        return {"df": 1, "nodf": 2, "pcas": 3}[self.value]

    @classmethod
    def from_code(cls, code: int) -> "Variant":
        for v in cls:
            if v.code == code:
                return v
        raise HeapError(f"unknown variant code {code}")

    @property
    def uses_dirty_flags(self) -> bool:
        return self is not Variant.NODF


class DescriptorState(enum.IntEnum):
    COMPLETED = 0
    FAILED = 1
    SUCCEEDED = 2


def _round_up(n: int, align: int) -> int:
    return (n + align - 1) // align * align


@dataclass(frozen=True)
class HeapLayout:
    word_capacity: int
    block_size: int = 256
    worker_slots: int = 1
    max_targets: int = DEFAULT_MAX_TARGETS
    align: int = PAGE_SIZE
    line_size: int = LINE_SIZE

    def __post_init__(self):
        if self.word_capacity < 1:
            raise HeapError("heap needs at least one word")
        bs = self.block_size
        if bs < 8 or bs & (bs - 1):
            raise HeapError(f"block size {bs} is not a power of two >= 8")
        if self.worker_slots < 1:
            raise HeapError("heap needs at least one descriptor slot")
        if self.max_targets < 1:
            raise HeapError("max_targets must be positive")
        if self.align < HEADER.size or self.align % self.line_size:
            raise HeapError(f"alignment {self.align} is too small or not line-aligned")

    @property
    def slot_bytes(self) -> int:
        return _round_up((DESC_TARGETS_WORD + 3 * self.max_targets) * 8, self.line_size)

    @property
    def descriptor_base(self) -> int:
        return self.align

    @property
    def data_base(self) -> int:
        end = self.descriptor_base + self.worker_slots * self.slot_bytes
        return _round_up(end, self.align)

    @property
    def total_bytes(self) -> int:
        return _round_up(self.data_base + self.word_capacity * self.block_size, self.line_size)

    @property
    def total_words(self) -> int:
        return self.total_bytes // 8

    def word_offset(self, addr: int) -> int:
        """Flat word index of data word ``addr``."""
        return (self.data_base + addr * self.block_size) >> 3

    def slot_offset(self, slot: int) -> int:
        """Byte offset of descriptor slot ``slot``."""
        return self.descriptor_base + slot * self.slot_bytes

    def line_of(self, word_index: int) -> int:
        return (word_index * 8) // self.line_size

    def data_line(self, addr: int) -> int:
        return self.line_of(self.word_offset(addr))

    def descriptor_lines(self, slot: int, count: int | None = None) -> range:
        n = self.max_targets if count is None else count
        start = self.slot_offset(slot)
        end = start + (DESC_TARGETS_WORD + 3 * n) * 8
        return range(start // self.line_size, (end - 1) // self.line_size + 1)

    def words_of_line(self, line: int) -> range:
        per = self.line_size // 8
        return range(line * per, (line + 1) * per)

    def data_lines(self) -> set[int]:
        return {self.data_line(a) for a in range(self.word_capacity)}


@dataclass(frozen=True)
class DescriptorRecord:
    """Raw contents of one descriptor slot as read from a heap view."""

    slot: int
    state: int
    count: int
    targets: tuple[tuple[int, int, int], ...]

    @property
    def valid_state(self) -> bool:
        return self.state in DescriptorState._value2member_map_


class PersistentHeap:
    """Common word/descriptor operations over a flat word array.

    Subclasses provide ``_words`` (indexable by flat word index) and
    ``_persist_lines``.
    """

    backend = "abstract"

    def __init__(self, layout: HeapLayout, variant: Variant = Variant.NODF):
        self.layout = layout
        self.variant = variant
        self.flush_count = 0
        self._capacity = layout.word_capacity
        self._base = layout.data_base >> 3
        self._stride = layout.block_size >> 3

    # -- addressing -------------------------------------------------------

    def _offset(self, addr: int) -> int:
        if not 0 <= addr < self._capacity:
            raise AddressError(f"word address {addr} outside heap of {self._capacity} words")
        return self._base + addr * self._stride

    def _check_slot(self, slot: int) -> None:
        if not 0 <= slot < self.layout.worker_slots:
            raise AddressError(f"descriptor slot {slot} outside 0..{self.layout.worker_slots - 1}")

    def descriptor_word(self, slot: int) -> int:
        self._check_slot(slot)
        return descriptor_word(self.layout.slot_offset(slot))

    def slot_of(self, raw: int) -> int:
        """Descriptor slot referenced by descriptor word ``raw``."""
        if raw & TAG_MASK != DESCRIPTOR_TAG:
            raise HeapError(f"word {raw:#x} is not a descriptor reference")
        off = (raw & ~TAG_MASK) - self.layout.descriptor_base
        slot, rem = divmod(off, self.layout.slot_bytes)
        if rem or not 0 <= slot < self.layout.worker_slots:
            raise HeapError(f"descriptor reference {raw:#x} does not name a slot")
        return slot

    @property
    def word_capacity(self) -> int:
        return self._capacity

    # -- word operations --------------------------------------------------

    def load(self, addr: int) -> int:
        return self._words[self._offset(addr)]

    def store(self, addr: int, value: int) -> None:
        self._store(self._offset(addr), value)

    def cas(self, addr: int, expected: int, desired: int) -> int:
        """Compare-and-swap returning the value seen, as a CAS instruction does."""
        return self._cas(self._offset(addr), expected, desired)

    def persist(self, addr: int) -> None:
        self._persist_lines((self.layout.line_of(self._offset(addr)),))

    def _store(self, off: int, value: int) -> None:
        self._words[off] = value

    def _cas(self, off: int, expected: int, desired: int) -> int:
        words = self._words
        cur = words[off]
        if cur == expected:
            words[off] = desired
        return cur

    def _persist_lines(self, lines: Iterable[int]) -> None:
        raise NotImplementedError

    # -- descriptor area --------------------------------------------------

    def _slot_word(self, slot: int, i: int) -> int:
        self._check_slot(slot)
        return (self.layout.slot_offset(slot) >> 3) + i

    def write_descriptor(self, slot: int, state: int, targets: Sequence[tuple[int, int, int]]) -> None:
        if len(targets) > self.layout.max_targets:
            raise HeapError(f"{len(targets)} targets exceed max_targets={self.layout.max_targets}")
        base = self._slot_word(slot, 0)
        self._store(base + DESC_STATE_WORD, int(state))
        self._store(base + DESC_COUNT_WORD, len(targets))
        i = base + DESC_TARGETS_WORD
        for addr, expected, desired in targets:
            self._store(i, addr)
            self._store(i + 1, expected)
            self._store(i + 2, desired)
            i += 3

    def write_state(self, slot: int, state: int) -> None:
        self._store(self._slot_word(slot, DESC_STATE_WORD), int(state))

    def persist_descriptor(self, slot: int, count: int | None = None) -> None:
        self._check_slot(slot)
        self._persist_lines(self.layout.descriptor_lines(slot, count))

    def read_descriptor(self, slot: int) -> DescriptorRecord:
        return self._read_descriptor(self._words, slot)

    def _read_descriptor(self, words, slot: int) -> DescriptorRecord:
        base = self._slot_word(slot, 0)
        state = words[base + DESC_STATE_WORD]
        count = words[base + DESC_COUNT_WORD]
        n = min(count, self.layout.max_targets)
        i = base + DESC_TARGETS_WORD
        targets = tuple(
            (words[i + 3 * j], words[i + 3 * j + 1], words[i + 3 * j + 2]) for j in range(n)
        )
        return DescriptorRecord(slot, state, count, targets)

    # -- bulk views -------------------------------------------------------

    def data_words(self) -> list[int]:
        words = self._words
        return [words[self._base + a * self._stride] for a in range(self._capacity)]

    def payload_sum(self) -> int:
        return sum(w >> 2 for w in self.data_words())

    # -- event dispatch ---------------------------------------------------

    def execute(self, event: tuple):
        """Apply one algorithm event and return its result."""
        op = event[0]
        if op == ev.LOAD:
            return self.load(event[1])
        if op == ev.CAS:
            return self.cas(event[1], event[2], event[3])
        if op == ev.STORE:
            return self.store(event[1], event[2])
        if op == ev.PERSIST:
            return self.persist(event[1])
        if op == ev.DESC_WRITE:
            return self.write_descriptor(event[1], event[2], event[3])
        if op == ev.DESC_STATE:
            return self.write_state(event[1], event[2])
        if op == ev.DESC_PERSIST:
            return self.persist_descriptor(event[1], event[2])
        raise HeapError(f"heap cannot execute {ev.describe(event)}")

    def dispatcher(self) -> tuple:
        """Handlers indexed by opcode, each taking the whole event tuple.

        Drivers call ``table[event[0]](event)``.  Built once per heap.
        """
        table = self.__dict__.get("_dispatch")
        if table is None:
            table = self._dispatch = self._build_dispatch()
        return table

    def _build_dispatch(self) -> tuple:
        # backends may override with faster closures of identical semantics
        return (
            lambda e: self.load(e[1]),
            lambda e: self.cas(e[1], e[2], e[3]),
            lambda e: self.store(e[1], e[2]),
            lambda e: self.persist(e[1]),
            lambda e: self.write_descriptor(e[1], e[2], e[3]),
            lambda e: self.write_state(e[1], e[2]),
            lambda e: self.persist_descriptor(e[1], e[2]),
            None,
        )

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class _StripedLocks:
    """Per-word mutual exclusion for CAS/store on shared-memory backends."""

    def __init__(self, n: int = 1024):
        self._mask = n - 1
        self._locks = [threading.Lock() for _ in range(n)]

    def __getitem__(self, off: int) -> threading.Lock:
        return self._locks[off & self._mask]


@dataclass(frozen=True)
class SimulatedMemoryState:
    cache: tuple[int, ...]
    durable: tuple[int, ...]
    dirty_lines: frozenset[int]


class SimulatedHeap(PersistentHeap):
    """Heap with an explicit cache view, durable view and dirty-line set.

    Every access is serialised through one lock, so the heap may be shared by
    threads, but its intended driver is the single-threaded crash harness.
    """

    backend = "simulated"

    def __init__(self, layout: HeapLayout, variant: Variant = Variant.NODF,
                 durable: Sequence[int] | None = None):
        super().__init__(layout, variant)
        n = layout.total_words
        if durable is None:
            self._durable = [0] * n
        else:
            if len(durable) != n:
                raise HeapError(f"durable image has {len(durable)} words, layout needs {n}")
            self._durable = list(durable)
        self._words = list(self._durable)
        self.dirty_lines: set[int] = set()
        self._lock = threading.RLock()
        self._line_words = layout.line_size // 8

    def _store(self, off: int, value: int) -> None:
        with self._lock:
            self._words[off] = value
            self.dirty_lines.add(off // self._line_words)

    def _cas(self, off: int, expected: int, desired: int) -> int:
        with self._lock:
            cur = self._words[off]
            if cur == expected:
                self._words[off] = desired
                self.dirty_lines.add(off // self._line_words)
            return cur

    def _write_back(self, line: int) -> None:
        lo = line * self._line_words
        hi = lo + self._line_words
        self._durable[lo:hi] = self._words[lo:hi]
        self.dirty_lines.discard(line)

    def _persist_lines(self, lines: Iterable[int]) -> None:
        with self._lock:
            for line in lines:
                self._write_back(line)
                self.flush_count += 1

    def evict(self, line: int) -> None:
        """Uncontrolled write-back of one line; not counted as a flush."""
        with self._lock:
            self._write_back(line)

    def durable_load(self, addr: int) -> int:
        return self._durable[self._offset(addr)]

    def durable_data_words(self) -> list[int]:
        d = self._durable
        return [d[self._base + a * self._stride] for a in range(self._capacity)]

    def read_durable_descriptor(self, slot: int) -> DescriptorRecord:
        return self._read_descriptor(self._durable, slot)

    def durable_image(self) -> tuple[int, ...]:
        return tuple(self._durable)

    def cache_image(self) -> tuple[int, ...]:
        return tuple(self._words)

    def state(self) -> SimulatedMemoryState:
        return SimulatedMemoryState(tuple(self._words), tuple(self._durable), frozenset(self.dirty_lines))

    def image_after_eviction(self, eviction_subset: Iterable[int]) -> list[int]:
        """Durable image a crash would leave if ``eviction_subset`` were evicted first."""
        image = list(self._durable)
        w = self._line_words
        for line in eviction_subset:
            if line not in self.dirty_lines:
                raise HeapError(f"line {line} is not dirty")
            lo = line * w
            image[lo:lo + w] = self._words[lo:lo + w]
        return image

    def crash(self, eviction_subset: Iterable[int] = ()) -> SimulatedMemoryState:
        """Evict the given dirty lines, then lose every cached value."""
        with self._lock:
            self._durable = self.image_after_eviction(eviction_subset)
            self._words = list(self._durable)
            self.dirty_lines.clear()
            return self.state()

    def clone(self) -> "SimulatedHeap":
        other = SimulatedHeap.__new__(SimulatedHeap)
        other.__dict__.update(self.__dict__)
        other.__dict__.pop("_dispatch", None)
        other._durable = list(self._durable)
        other._words = list(self._words)
        other.dirty_lines = set(self.dirty_lines)
        other._lock = threading.RLock()
        return other


class DramHeap(PersistentHeap):
    """Volatile heap for benchmarking; persist is a counted no-op."""

    backend = "dram"

    def __init__(self, layout: HeapLayout, variant: Variant = Variant.NODF):
        super().__init__(layout, variant)
        self._words = [0] * layout.total_words
        self._locks = _StripedLocks()

    def _store(self, off: int, value: int) -> None:
        with self._locks[off]:
            self._words[off] = value

    def _cas(self, off: int, expected: int, desired: int) -> int:
        with self._locks[off]:
            words = self._words
            cur = words[off]
            if cur == expected:
                words[off] = desired
            return cur

    def _persist_lines(self, lines: Iterable[int]) -> None:
        for _ in lines:
            self.flush_count += 1

    def crash(self, eviction_subset=()):
        raise UnsupportedBackend("crash injection needs the simulated backend")

    def _build_dispatch(self) -> tuple:
        words = self._words
        locks = self._locks._locks
        mask = self._locks._mask
        base, stride, cap = self._base, self._stride, self._capacity
        layout = self.layout
        slot_words = [layout.slot_offset(s) >> 3 for s in range(layout.worker_slots)]
        max_targets = layout.max_targets
        heap = self

        def bad(addr):
            return AddressError(f"word address {addr} outside heap of {cap} words")

        def load(e):
            a = e[1]
            if not 0 <= a < cap:
                raise bad(a)
            return words[base + a * stride]

        def cas(e):
            a = e[1]
            if not 0 <= a < cap:
                raise bad(a)
            o = base + a * stride
            with locks[o & mask]:
                cur = words[o]
                if cur == e[2]:
                    words[o] = e[3]
                return cur

        def store(e):
            a = e[1]
            if not 0 <= a < cap:
                raise bad(a)
            o = base + a * stride
            with locks[o & mask]:
                words[o] = e[2]

        def persist(e):
            if not 0 <= e[1] < cap:
                raise bad(e[1])
            heap.flush_count += 1

        # a descriptor slot is written only by the worker that owns it
        def desc_write(e):
            targets = e[3]
            if len(targets) > max_targets:
                raise HeapError(f"{len(targets)} targets exceed max_targets={max_targets}")
            b = slot_words[e[1]]
            words[b + DESC_STATE_WORD] = int(e[2])
            words[b + DESC_COUNT_WORD] = len(targets)
            i = b + DESC_TARGETS_WORD
            for t in targets:
                words[i:i + 3] = t
                i += 3

        def desc_state(e):
            words[slot_words[e[1]] + DESC_STATE_WORD] = int(e[2])

        spans: dict[tuple, int] = {}

        def desc_persist(e):
            n = spans.get(e[1:])
            if n is None:
                n = spans[e[1:]] = len(layout.descriptor_lines(e[1], e[2]))
            heap.flush_count += n

        return (load, cas, store, persist, desc_write, desc_state, desc_persist, None)


class MappedHeap(PersistentHeap):
    """Heap stored in a memory-mapped file.

    Commodity hardware gives no portable cache-line write-back from Python,
    so persist falls back to ``msync`` of the page holding the line.
    """

    backend = "real"

    def __init__(self, path: str | os.PathLike, layout: HeapLayout, variant: Variant,
                 fd: int, mm: mmap.mmap):
        super().__init__(layout, variant)
        self.path = os.fspath(path)
        self._fd = fd
        self._mm = mm
        self._words = memoryview(mm).cast("Q")
        self._locks = _StripedLocks()
        self._closed = False
        self.last_recovery = None

    @classmethod
    def create(cls, path, word_capacity: int, block_size: int = 256, worker_slots: int = 1,
               variant: Variant = Variant.NODF, max_targets: int = DEFAULT_MAX_TARGETS) -> "MappedHeap":
        layout = HeapLayout(word_capacity, block_size, worker_slots, max_targets)
        fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            os.ftruncate(fd, layout.total_bytes)
            mm = mmap.mmap(fd, layout.total_bytes)
        except OSError:
            os.close(fd)
            raise
        heap = cls(path, layout, variant, fd, mm)
        heap._write_header(clean=False)
        heap.sync()
        return heap

    @classmethod
    def open(cls, path) -> "MappedHeap":
        fd = os.open(path, os.O_RDWR)
        try:
            size = os.fstat(fd).st_size
            if size < HEADER.size:
                raise HeapError(f"{path}: file too small for a heap header")
            mm = mmap.mmap(fd, size)
        except Exception:
            os.close(fd)
            raise
        try:
            magic, version, cap, bs, slots, max_t, vcode, _clean = HEADER.unpack_from(mm, 0)
            if magic != MAGIC:
                raise HeapError(f"{path}: bad magic {magic!r}")
            if version != FORMAT_VERSION:
                raise HeapError(f"{path}: unsupported format version {version}")
            layout = HeapLayout(cap, bs, slots, max_t)
            if layout.total_bytes > size:
                raise HeapError(f"{path}: truncated heap ({size} < {layout.total_bytes} bytes)")
            variant = Variant.from_code(vcode)
        except Exception:
            mm.close()
            os.close(fd)
            raise
        return cls(path, layout, variant, fd, mm)

    def _write_header(self, clean: bool) -> None:
        lay = self.layout
        HEADER.pack_into(self._mm, 0, MAGIC, FORMAT_VERSION, lay.word_capacity, lay.block_size,
                         lay.worker_slots, lay.max_targets, self.variant.code, int(clean))
        self._mm.flush(0, PAGE_SIZE)

    @property
    def clean_shutdown(self) -> bool:
        return bool(HEADER.unpack_from(self._mm, 0)[-1])

    def mark_clean(self, clean: bool) -> None:
        self._write_header(clean)

    def _store(self, off: int, value: int) -> None:
        with self._locks[off]:
            self._words[off] = value

    def _cas(self, off: int, expected: int, desired: int) -> int:
        with self._locks[off]:
            words = self._words
            cur = words[off]
            if cur == expected:
                words[off] = desired
            return cur

    def _persist_lines(self, lines: Iterable[int]) -> None:
        pages = set()
        for line in lines:
            pages.add(line * self.layout.line_size // PAGE_SIZE)
            self.flush_count += 1
        size = len(self._mm)
        for p in sorted(pages):
            start = p * PAGE_SIZE
            self._mm.flush(start, min(PAGE_SIZE, size - start))

    def sync(self) -> None:
        self._mm.flush()

    def crash(self, eviction_subset=()):
        raise UnsupportedBackend("crash injection needs the simulated backend")

    def close(self, clean: bool = True) -> None:
        if self._closed:
            return
        if clean:
            self.sync()
            self._write_header(clean=True)
        self._words.release()
        self._mm.close()
        os.close(self._fd)
        self._closed = True


def create_heap(word_capacity: int, *, backend: str = "simulated", block_size: int = 256,
                worker_slots: int = 1, variant: Variant | str = Variant.NODF,
                max_targets: int = DEFAULT_MAX_TARGETS, path=None, align: int = PAGE_SIZE):
    """Build a zero-initialised heap on the requested backend."""
    variant = Variant(variant)
    if backend == "real":
        if path is None:
            raise HeapError("the real backend needs a file path")
        heap = MappedHeap.create(path, word_capacity, block_size, worker_slots, variant, max_targets)
        heap.mark_clean(False)
        return heap
    layout = HeapLayout(word_capacity, block_size, worker_slots, max_targets, align=align)
    if backend == "simulated":
        return SimulatedHeap(layout, variant)
    if backend == "dram":
        return DramHeap(layout, variant)
    raise UnsupportedBackend(f"unknown backend {backend!r}")


def open_heap(path, *, recover: bool = True) -> MappedHeap:
    """Open a heap file, running recovery first if it was not shut down cleanly."""
    heap = MappedHeap.open(path)
    if recover and not heap.clean_shutdown:
        from .recovery import recover as _recover

        heap.last_recovery = _recover(heap)
    heap.mark_clean(False)
    return heap

"""Persistent multi-word compare-and-swap on a simulated or file-backed heap."""
from .core import (
    ContractViolation,
    Descriptor,
    Instrumentation,
    OpStats,
    ReadTimeout,
    TargetEntry,
    pcas,
    pmwcas,
    pmwcas_df,
    pmwcas_nodf,
    read_word,
)
from .pmem import (
    DescriptorState,
    DramHeap,
    HeapError,
    HeapLayout,
    MappedHeap,
    SimulatedHeap,
    Variant,
    create_heap,
    open_heap,
)
from .recovery import RecoveryError, RecoveryReport, recover
from .words import decode, encode

__all__ = [
    "ContractViolation", "Descriptor", "DescriptorState", "DramHeap", "HeapError", "HeapLayout",
    "Instrumentation", "MappedHeap", "OpStats", "ReadTimeout", "RecoveryError", "RecoveryReport",
    "SimulatedHeap", "TargetEntry", "Variant", "create_heap", "decode", "encode", "open_heap",
    "pcas", "pmwcas", "pmwcas_df", "pmwcas_nodf", "read_word", "recover",
]

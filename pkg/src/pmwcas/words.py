"""Tagged 64-bit words.

The low two bits of every managed word say what the word holds::

    00  plain payload
    10  descriptor reference
    01  payload with a dirty flag

Application values live in the upper 62 bits, so value ``v`` is stored as
``v << 2``.
"""
from __future__ import annotations

import enum

TAG_MASK = 0b11
PAYLOAD_TAG = 0b00
DESCRIPTOR_TAG = 0b10
DIRTY_TAG = 0b01

WORD_MASK = (1 << 64) - 1
MAX_PAYLOAD = (1 << 62) - 1


class WordKind(enum.Enum):
    PAYLOAD = "payload"
    DESCRIPTOR = "descriptor"
    DIRTY = "dirty"


class TagError(ValueError):
    """A word carries a tag that is not allowed where it was used."""


def encode(value: int) -> int:
    """Raw word for application value ``value``."""
    if not 0 <= value <= MAX_PAYLOAD:
        raise ValueError(f"payload {value} does not fit in 62 bits")
    return value << 2


def decode(raw: int) -> int:
    """Application value held in ``raw`` (tag bits dropped)."""
    return raw >> 2


def tag(raw: int) -> int:
    return raw & TAG_MASK


def classify(raw: int) -> WordKind:
    t = raw & TAG_MASK
    if t == PAYLOAD_TAG:
        return WordKind.PAYLOAD
    if t == DESCRIPTOR_TAG:
        return WordKind.DESCRIPTOR
    if t == DIRTY_TAG:
        return WordKind.DIRTY
    raise TagError(f"word {raw:#x} has reserved tag 0b11")


def is_payload(raw: int) -> bool:
    return raw & TAG_MASK == PAYLOAD_TAG


def is_descriptor(raw: int) -> bool:
    return raw & TAG_MASK == DESCRIPTOR_TAG


def is_dirty(raw: int) -> bool:
    return raw & TAG_MASK == DIRTY_TAG


def set_dirty(raw: int) -> int:
    if raw & TAG_MASK != PAYLOAD_TAG:
        raise TagError(f"cannot set the dirty flag on non-payload word {raw:#x}")
    return raw | DIRTY_TAG


def clear_flags(raw: int) -> int:
    return raw & ~TAG_MASK & WORD_MASK


def descriptor_word(byte_offset: int) -> int:
    """Reference to the descriptor stored at ``byte_offset`` in the heap image."""
    if byte_offset < 0 or byte_offset & 0b111:
        raise ValueError(f"descriptor offset {byte_offset} is not 8-byte aligned")
    return byte_offset | DESCRIPTOR_TAG


def descriptor_offset(raw: int) -> int:
    if raw & TAG_MASK != DESCRIPTOR_TAG:
        raise TagError(f"word {raw:#x} is not a descriptor reference")
    return raw & ~TAG_MASK

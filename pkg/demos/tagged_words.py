"""How a 64-bit word carries a payload, a descriptor reference or a dirty flag."""
from pmwcas.words import classify, clear_flags, decode, descriptor_word, encode, set_dirty

value = encode(41)
print(f"payload 41 stored as {value:#x} -> {classify(value).name}, decodes to {decode(value)}")

dirty = set_dirty(value)
print(f"dirty copy {dirty:#x} -> {classify(dirty).name}, cleared back to {decode(clear_flags(dirty))}")

ref = descriptor_word(128)
print(f"descriptor at byte offset 128 -> {ref:#x} ({classify(ref).name})")

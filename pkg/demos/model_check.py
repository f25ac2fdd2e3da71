"""Explore every crash point of two conflicting increments."""
from pmwcas import harness

for variant in ("nodf", "df", "pcas"):
    k = 1 if variant == "pcas" else 2
    program = harness.increment_program(variant, 2, k, words=4)
    for evictions in (0, 2):
        report = harness.explore(program, evict="none" if evictions == 0 else "all", max_evictions=evictions)
        print(report.summary())

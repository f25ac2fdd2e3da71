import math
from collections import Counter

import pytest

from pmwcas import harness
from pmwcas.core import pmwcas_steps as real_pmwcas_steps
from pmwcas.events import DESC_PERSIST, DESC_STATE, PERSIST, WAIT
from pmwcas.harness import (
    CrashSchedule, Execution, InstanceTooLarge, OpSpec, StepProgram, check_state_machine,
    count_interleavings, count_schedules, durable_atomicity_oracle, enumerate_interleavings,
    enumerate_schedules, explore,
    find_witness, increment_program, row_labels, run_schedule, sample_schedules,
)
from pmwcas.pmem import SimulatedHeap, Variant
from pmwcas.words import encode


def solo_steps(program):
    """Number of events a lone worker issues, taken from its own trace."""
    heap = program.initial_heap()
    record = harness.OpRecord(1)
    gen = harness.worker_steps(program, 0, heap.descriptor_word(0), record)
    dirty_counts = [len(heap.dirty_lines)]
    result = None
    try:
        while True:
            event = gen.send(result)
            assert event[0] != WAIT
            result = heap.execute(event)
            dirty_counts.append(len(heap.dirty_lines))
    except StopIteration:
        pass
    return dirty_counts


def test_single_worker_schedule_count():
    program = increment_program("nodf", 1, 1)
    dirty = solo_steps(program)
    steps = len(dirty) - 1
    assert max(dirty) <= 2
    oracle = sum(2 ** d for d in dirty) + 1
    assert count_schedules(program) == oracle == len(list(enumerate_schedules(program)))
    assert oracle <= (steps + 1) * 4 + 1


def test_disjoint_workers_interleave_binomially():
    program = StepProgram(Variant.NODF, ((OpSpec((0,)),), (OpSpec((2,)),)), word_count=4)
    n = len(solo_steps(StepProgram(Variant.NODF, ((OpSpec((0,)),),), word_count=4))) - 1
    m = len(solo_steps(StepProgram(Variant.NODF, ((OpSpec((2,)),),), word_count=4))) - 1
    assert count_interleavings(program) == math.comb(n + m, n)


def test_no_workers_single_schedule():
    program = StepProgram(Variant.DF, ())
    assert list(enumerate_schedules(program)) == [CrashSchedule(())]
    assert count_schedules(program) == 1


@pytest.mark.parametrize("evict,max_evictions", [("none", 0), ("all", 1), ("data", 2)])
def test_count_matches_enumeration(evict, max_evictions):
    for program in (increment_program("pcas", 2, 1), increment_program("df", 1, 2)):
        stream = list(enumerate_schedules(program, evict=evict, max_evictions=max_evictions))
        assert len(stream) == len(set(stream))
        assert count_schedules(program, evict=evict, max_evictions=max_evictions) == len(stream)


def test_sampling_is_uniform_and_seeded():
    program = increment_program("nodf", 1, 2)
    full = set(enumerate_schedules(program))
    n = len(full)
    draws = list(sample_schedules(program, 200 * n, seed=5))
    assert draws[:50] == list(sample_schedules(program, 50, seed=5))
    counts = Counter(draws)
    assert set(counts) == full
    chi2 = sum((c - 200) ** 2 / 200 for c in counts.values())
    # chi-square with n-1 degrees of freedom; 5 standard deviations of slack
    assert chi2 < (n - 1) + 5 * math.sqrt(2 * (n - 1))


def test_enumerate_falls_back_to_sampling():
    program = increment_program("nodf", 2, 2)
    got = list(enumerate_schedules(program, bound=10, samples=7, seed=1))
    assert len(got) == 7


def crash_points(program):
    """Step index just before/after the first descriptor persist and the Succeeded persist."""
    heap = program.initial_heap()
    gen = harness.worker_steps(program, 0, heap.descriptor_word(0), harness.OpRecord(1))
    events = []
    result = None
    try:
        while True:
            event = gen.send(result)
            events.append(event)
            result = heap.execute(event)
    except StopIteration:
        pass
    first_persist = next(i for i, e in enumerate(events) if e[0] == DESC_PERSIST)
    succeeded = next(i for i, e in enumerate(events) if e[0] == DESC_STATE and e[2] == 2)
    return len(events), first_persist, succeeded + 1


@pytest.mark.parametrize("variant", ["df", "nodf"])
def test_crash_before_descriptor_persist_is_all_old(variant):
    program = increment_program(variant, 1, 2)
    n, first, _ = crash_points(program)
    for step in range(first + 1):
        v = run_schedule(CrashSchedule((0,) * n, step, ()), program)
        # before its reads finish the operation has no triples and hence no outcome
        assert v.ok and v.outcomes.get("0.0", "all-old") == "all-old"
        assert v.final_words == list(program.initial_values())


@pytest.mark.parametrize("variant", ["df", "nodf"])
def test_crash_after_linearization_is_all_new(variant):
    program = increment_program(variant, 1, 2)
    n, _, lin = crash_points(program)
    for step in range(lin + 1, n + 1):
        v = run_schedule(CrashSchedule((0,) * n, step, ()), program)
        assert v.ok and v.outcomes == {"0.0": "all-new"}, step


def test_no_crash_matches_live_results():
    program = increment_program("pcas", 2, 1)
    results = set()
    for full in enumerate_interleavings(program):
        v = run_schedule(CrashSchedule(full), program)
        assert v.ok
        for k, live in v.live_results.items():
            assert v.outcomes[k] == ("all-new" if live else "all-old")
        results.add(tuple(sorted(v.live_results.values())))
    assert results == {(False, True), (True, True)}


def test_concurrent_cas_exactly_one_wins():
    old = encode(10)
    program = StepProgram(Variant.PCAS, ((OpSpec((0,), (old,), (encode(11),)),),
                                         (OpSpec((0,), (old,), (encode(12),)),)), word_count=2)
    seen = 0
    for sched in enumerate_schedules(program):
        if sched.crash_step is None:
            v = run_schedule(sched, program)
            assert sorted(v.live_results.values()) == [False, True]
            seen += 1
    assert seen == count_interleavings(program) > 1


def test_reader_never_sees_descriptor():
    # both workers increment word 0; whoever reads second must wait out the first
    program = increment_program("df", 2, 1)
    for sched in sample_schedules(program, 300, seed=2):
        v = run_schedule(CrashSchedule(sched.interleaving), program)
        assert v.ok
        for triples in v.ops.values():
            assert all(e & 0b11 == 0 for _, e, _ in triples)
        wins = sum(v.live_results.values())
        assert v.final_words[0] == encode(10) + 4 * wins


def test_witness_oracle():
    init = [encode(10), encode(20), encode(30)]
    a = ((0, encode(10), encode(11)), (1, encode(20), encode(21)))
    b = ((1, encode(21), encode(22)), (2, encode(30), encode(31)))
    ops = {(0, 0): a, (1, 0): b}
    assert find_witness(init, {(0, 0): a}, [encode(11), encode(21), encode(30)]) == ((0, 0),)
    assert find_witness(init, ops, [encode(11), encode(22), encode(31)]) == ((0, 0), (1, 0))
    assert find_witness(init, ops, init) == ()
    torn = [encode(11), encode(20), encode(30)]
    assert not durable_atomicity_oracle(init, ops, torn)
    assert find_witness(init, ops, [encode(11), encode(21), encode(30)], must_include=((1, 0),)) is None
    assert find_witness(init, ops, [encode(11), encode(21), encode(30)], must_exclude=((0, 0),)) is None


def labels_visited(verdict, variant):
    rows = set()
    ops = {tuple(map(int, k.split("."))): [tuple(t) for t in v] for k, v in verdict.ops.items()}
    dw = {tuple(map(int, k.split("."))): v for k, v in verdict.desc_words.items()}
    for addr, tr in verdict.trace.items():
        for c, d, status in tr:
            st = {tuple(map(int, k.split("."))): s for k, s in status.items()}
            rows |= {r for _, r in row_labels(variant, addr, c, d, st, ops, dw)}
    return rows


def solo_run(program):
    n = len(solo_steps(program)) - 1
    return run_schedule(CrashSchedule((0,) * n), program)


def test_df_success_trace_rows():
    program = increment_program("df", 1, 2)
    v = solo_run(program)
    assert check_state_machine(v, "df") == (True, "")
    rows = labels_visited(v, Variant.DF)
    assert {7, 8, 9, 10} <= rows <= {0, 1, 2, 7, 8, 9, 10}


def test_nodf_failure_trace_rows():
    # second target mismatches; the first word's line is written back before the rollback
    old = encode(10)
    program = StepProgram(Variant.NODF, ((OpSpec((0, 1), (old, encode(99)), (encode(1), encode(2))),),),
                          word_count=2)
    line = program.layout.data_line(0)
    heap = program.initial_heap()
    gen = harness.worker_steps(program, 0, heap.descriptor_word(0), harness.OpRecord(1))
    result, events = None, []
    try:
        while True:
            e = gen.send(result)
            events.append(e)
            result = heap.execute(e)
    except StopIteration:
        pass
    # evict right after the first target holds the descriptor (its CAS is the 5th event)
    cas_at = next(i for i, e in enumerate(events) if e[0] == 1)
    choices = [0] * (cas_at + 1) + [("evict", line)] + [0] * (len(events) - cas_at - 1)
    v = run_schedule(CrashSchedule(tuple(choices)), program, max_evictions=1)
    assert v.ok and v.live_results == {"0.0": False}
    assert check_state_machine(v, "nodf")[0]
    assert labels_visited(v, Variant.NODF) == {0, 1, 2, 3}


def test_absent_row_is_rejected():
    old, new = encode(10), encode(11)
    ops = {(0, 0): [(0, old, new)]}
    dw = {(0, 0): 4096 | 2}
    assert row_labels(Variant.NODF, 0, new, old, {(0, 0): "S"}, ops, dw) == set()
    v = harness.Verdict(CrashSchedule(()), True, {}, {}, [], None,
                        trace={0: [(old, old, {"0.0": "C"}), (new, old, {"0.0": "S"})]},
                        ops={"0.0": [[0, old, new]]}, desc_words={"0.0": 4096 | 2})
    ok, msg = check_state_machine(v, "nodf")
    assert not ok and "matches no state" in msg


def test_schedule_and_program_json_round_trip():
    program = increment_program("df", 2, 2, ops_per_worker=2)
    assert StepProgram.from_json(program.to_json()) == program
    s = CrashSchedule((0, 1, ("evict", 3), 1), 3, (2, 5))
    assert CrashSchedule.from_json(s.to_json()) == s


@pytest.mark.parametrize("variant", ["df", "nodf", "pcas"])
def test_explore_small_instances(variant):
    rep = explore(increment_program(variant, 2, 1), evict="all", max_evictions=1)
    assert rep.ok, rep.violations[:1]
    assert rep.exhaustive and rep.states > 0 and rep.crash_checks > 0


def test_bound_is_enforced():
    with pytest.raises(InstanceTooLarge):
        explore(increment_program("df", 2, 2), bound=50)


# -- the checker must catch broken algorithms ---------------------------------

def skip_succeeded_persist(slot, desc_word, targets, dirty_flags):
    gen = real_pmwcas_steps(slot, desc_word, targets, dirty_flags)
    result, seen_state = None, False
    try:
        while True:
            e = gen.send(result)
            if e[0] == DESC_STATE and e[2] == 2:
                seen_state = True
            elif e[0] == DESC_PERSIST and seen_state:
                seen_state = False
                result = None
                continue
            result = yield e
    except StopIteration as stop:
        return stop.value


def drop_embed_persists(slot, desc_word, targets, dirty_flags):
    gen = real_pmwcas_steps(slot, desc_word, targets, dirty_flags)
    result, state_seen = None, False
    try:
        while True:
            e = gen.send(result)
            if e[0] == DESC_STATE:
                state_seen = True
            if e[0] == PERSIST and not state_seen:
                result = None
                continue
            result = yield e
    except StopIteration as stop:
        return stop.value


@pytest.mark.parametrize("mutant", [skip_succeeded_persist, drop_embed_persists])
def test_mutants_are_caught_and_replayable(monkeypatch, mutant):
    monkeypatch.setattr(harness, "pmwcas_steps", mutant)
    program = increment_program("nodf", 1, 2)
    rep = explore(program, stop_on_violation=True)
    assert not rep.ok
    v = rep.violations[0]
    sched = CrashSchedule.from_json(v["schedule"])
    verdict = run_schedule(sched, program)
    assert not verdict.ok or not check_state_machine(verdict, "nodf")[0]


def test_wrong_recovery_is_caught(monkeypatch):
    from pmwcas import recovery

    def always_forward(heap):
        for slot in range(heap.layout.worker_slots):
            rec = heap.read_descriptor(slot)
            for addr, _, desired in rec.targets[: max(0, min(rec.count, heap.layout.max_targets))]:
                if heap.load(addr) & 0b11:
                    heap.store(addr, desired)
                    heap.persist(addr)
        return recovery.RecoveryReport()

    monkeypatch.setattr(harness, "recover", always_forward)
    # the second target mismatches, so rolling the evicted first target forward tears the operation
    old = encode(10)
    program = StepProgram(Variant.NODF, ((OpSpec((0, 1), (old, encode(99)), (encode(1), encode(2))),),),
                          word_count=2)
    rep = explore(program, evict="data", max_evictions=1, stop_on_violation=True, state_machine=False)
    assert not rep.ok and rep.violations[0]["kind"] == "crash"

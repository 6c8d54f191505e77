"""Randomized property checks over adversary schedules and inputs."""

import random
from functools import partial

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from framkit.adversary import BucketAttack, InversionAttack, PQAttack, RandomUniform
from framkit.cli import COUNTERS, RunConfig, RunReport, TrialResult, Workload, parse_report, pq_workload, render
from framkit.fram import SAFE, Adversary, BudgetExceeded, Machine
from framkit.reliable import ReliableCell, read_reliable, write_reliable
from framkit.resilient_pq import pq_from_keys
from framkit.resilient_sort import bucket_merge, purifying_merge, s_merge, s_sort
from framkit.verify import InputSnapshot, assert_faithfully_ordered, check_sorted_output, merge_contract_check

from _util import origins

FAST = settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])

# factories, since strategies carry state across a run
adversaries = st.one_of(
    st.builds(partial, st.just(RandomUniform), p=st.sampled_from([0.002, 0.01, 0.05]),
              seed=st.integers(0, 10**6)),
    st.builds(partial, st.just(InversionAttack), seed=st.integers(0, 10**6)),
    st.builds(partial, st.just(BucketAttack), seed=st.integers(0, 10**6), per_round=st.integers(1, 4)),
)
machines = st.tuples(st.sampled_from([1, 2, 4, 8, 16]), st.integers(0, 24), adversaries)
distinct = st.lists(st.integers(-10**9, 10**9), unique=True, max_size=300)


class Greedy(Adversary):
    """Asks for one to three corruptions at random events, ignoring the budget."""

    name = "Greedy"
    wants_checkpoints = True

    def __init__(self, seed):
        self.rng = random.Random(seed)
        self.next_step = 1
        self.seen = []

    def on_event(self, event):
        m = self.machine
        self.seen.append(m.alpha_used)
        self.next_step = event.step + self.rng.randint(1, 40)
        regs = [r for r in m.live_faulty_regions() if r.v]
        if not regs or self.rng.random() < 0.5:
            return []
        out = []
        for _ in range(self.rng.randint(1, 3)):
            r = self.rng.choice(regs)
            out.append((r, self.rng.randrange(len(r.v)), self.rng.randint(-10**9, 10**9)))
        return out


def _sorted_run(spec, values):
    s, delta, adv = spec
    m = Machine(s=s, delta=delta, adversary=adv())
    X = m.load_keys(values)
    snap = InputSnapshot.of(m)
    return m, snap, s_sort(m, X)


@FAST
@given(machines, distinct)
def test_sort_contract(spec, values):
    m, snap, Z = _sorted_run(spec, values)
    assert check_sorted_output(Z, snap).ok
    assert m.alpha_used <= m.delta


@FAST
@given(machines, distinct)
def test_provenance_soundness(spec, values):
    m, snap, _ = _sorted_run(spec, values)
    for r in m.live_faulty_regions():
        assert snap.provenance_ok(r)


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 30), st.integers(0, 10**6), st.lists(st.integers(-99, 99), min_size=1, max_size=20))
def test_safe_memory_immunity(delta, seed, words):
    m = Machine(s=4, delta=delta, adversary=Greedy(seed))
    safe = m.alloc(SAFE, len(words), "kept")
    safe.v[:] = words
    try:
        s_sort(m, m.load_keys(random.Random(seed).sample(range(10**6), 200)))
    except BudgetExceeded:
        pass
    assert safe.v == words


@FAST
@given(st.integers(0, 30), st.integers(0, 10**6))
def test_budget_never_exceeded(delta, seed):
    adv = Greedy(seed)
    m = Machine(s=4, delta=delta, adversary=adv)
    try:
        s_sort(m, m.load_keys(random.Random(seed).sample(range(10**6), 300)))
    except BudgetExceeded:
        pass
    assert all(a <= delta for a in adv.seen)
    assert m.alpha_used <= delta


@FAST
@given(machines, distinct)
def test_determinism(spec, values):
    s, delta, adv = spec

    def once():
        m = Machine(s=s, delta=delta, adversary=adv())
        Z = s_sort(m, m.load_keys(values))
        return m.metrics().counters(), [c.record() for c in m.corruption_log], Z.v

    assert once() == once()


@settings(max_examples=300, deadline=None)
@given(st.integers(5, 8), st.integers(-10**6, 10**6), st.data())
def test_majority_survives_delta_corruptions(delta, value, data):
    m = Machine(s=2, delta=delta)
    cell = ReliableCell(m, 0)
    write_reliable(cell, value)
    hit = data.draw(st.lists(st.integers(0, 2 * delta), unique=True, max_size=delta))
    for i in hit:
        cell.region.v[i] = data.draw(st.integers(-10**6, 10**6))
    assert read_reliable(cell) == value


@FAST
@given(machines, distinct, st.integers(0, 300))
def test_merges_conserve_and_order(spec, values, cut):
    s, delta, adv = spec
    for merge in (s_merge, bucket_merge, purifying_merge):
        vals = sorted(values)
        cut = min(cut, len(vals))
        xs, ys = vals[:cut:2] + vals[cut::2], vals[1:cut:2] + vals[cut + 1::2]
        m = Machine(s=s, delta=delta, adversary=adv())
        X, Y = m.load_keys(sorted(xs)), m.load_keys(sorted(ys))
        snap = InputSnapshot.of(m)
        ids = sorted(origins(X) + origins(Y))
        out = merge(m, X, Y)
        if merge is purifying_merge:
            Z, F = out
            assert merge_contract_check(Z, F, snap, m.alpha_used).ok
            continue
        assert origins(out) == ids
        assert assert_faithfully_ordered(out)


@FAST
@given(st.lists(st.integers(-10**9, 10**9), unique=True, max_size=400), st.sampled_from([1, 2, 3, 8]))
def test_delta_zero_sort_is_exact(values, s):
    m = Machine(s=s, delta=0)
    assert s_sort(m, m.load_keys(values)).v == sorted(values)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([(2, 0), (2, 1), (4, 3), (4, 8), (8, 16)]), st.integers(0, 400),
       st.tuples(st.integers(1, 3), st.integers(1, 3)), st.integers(0, 10**6), st.booleans())
def test_pq_random_ops(sd, n, mix, seed, targeted):
    s, delta = sd
    adv = PQAttack(seed=seed, every=3) if targeted else RandomUniform(p=0.003, seed=seed)
    m = Machine(s=s, delta=delta, adversary=adv)
    run = pq_workload(m, n, Workload(mix[0], mix[1], 600), seed=seed)
    assert run.problems == []
    assert m.safe_high_water <= 16 * m.s_eff + 64


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 10**6), unique=True, max_size=200), st.lists(st.booleans(), max_size=300))
def test_pq_conservation(init, ops):
    m = Machine(s=4, delta=6, adversary=RandomUniform(p=0.01, seed=len(ops)))
    pq = pq_from_keys(m, init)
    inserted, returned = len(init), 0
    k = 2 * 10**6
    for is_insert in ops:
        if is_insert or not len(pq):
            k += 1
            pq.insert(k)
            inserted += 1
        else:
            pq.pop()
            returned += 1
        held = sorted(t >> 1 for t in pq.live_cells())
        assert len(held) == len(set(held)) == len(pq)
        assert inserted == returned + len(pq)


trials = st.builds(
    TrialResult,
    trial=st.integers(0, 100),
    seed=st.integers(0, 2**64 - 1),
    verdict=st.sampled_from(["PASS", "FAIL"]),
    counters=st.fixed_dictionaries({k: st.integers(0, 10**9) for k in COUNTERS}),
    overhead=st.one_of(st.none(), st.integers(-10**6, 10**6)),
    flags=st.lists(st.sampled_from(["budget_exhausted", "budget_exceeded"]), unique=True),
    problems=st.lists(st.text(max_size=20), max_size=2),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(trials, max_size=4), st.integers(0, 2**64 - 1))
def test_json_report_round_trip(ts, seed):
    rep = RunReport(RunConfig(seed=seed).echo(), ts, {"mean": {"comparisons": 1.5}})
    assert parse_report(render(rep, "json")) == rep
    assert len(render(rep, "csv").splitlines()) == 1 + len(ts) or any("\n" in p for t in ts for p in t.problems)

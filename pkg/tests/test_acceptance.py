"""Acceptance suite: one test per criterion.

Each criterion records a one-line PASS/FAIL verdict.  Under pytest the lines
are printed in the terminal summary (see conftest.py); ``python
tests/test_acceptance.py`` runs the suite and prints them directly.
"""

from __future__ import annotations

import itertools
import json
import multiprocessing
import os
import random
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cache
from statistics import fmean

sys.path.insert(0, os.path.dirname(__file__))

from framkit.adversary import make_adversary
from framkit.cli import KEY_SPACE, RunConfig, Workload, pq_workload, render, run, trial_seed
from framkit.fram import Machine
from framkit.reliable import ReliableCell, read_reliable, write_reliable
from framkit.resilient_sort import purifying_merge, s_merge, s_sort
from framkit.verify import ContractProbe, InputSnapshot, check_sorted_output, merge_contract_check

from _schedules import single_faults
from _util import faithful_values, origins, strictly_increasing

RESULTS: dict[int, tuple[bool, str]] = {}


@dataclass
class Outcome:
    ok: bool
    detail: str
    # (safe high water, S_eff) of every trial run for the criterion
    safe: list[tuple[int, int]] = field(default_factory=list)


def _record(k: int, out: Outcome) -> Outcome:
    RESULTS[k] = (out.ok, out.detail)
    return out


def _workers() -> int:
    return os.cpu_count() or 1


def _map(fn, items):
    """Order-preserving map over independent trials, in worker processes when
    more than one CPU is available."""
    items = list(items)
    if _workers() == 1:
        return [fn(x) for x in items]
    ctx = multiprocessing.get_context("fork")
    with ProcessPoolExecutor(_workers(), mp_context=ctx) as pool:
        return list(pool.map(fn, items, chunksize=4))


def _keys(seed: int, n: int) -> list[int]:
    return random.Random(seed).sample(range(KEY_SPACE), n)


def report_lines() -> list[str]:
    return [f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}" for k, (ok, detail) in sorted(RESULTS.items())]


# -- 1: delta = 0 equivalence ------------------------------------------------


@cache
def criterion_1() -> Outcome:
    t0 = time.perf_counter()
    bad, safe = [], []
    for n in (1, 2, 17, 1024, 10**5):
        vals = _keys(n, n)
        m = Machine(s=16, delta=0)
        if s_sort(m, m.load_keys(vals)).v != sorted(vals):
            bad.append(n)
        safe.append((m.safe_high_water, m.s_eff))
    dt = time.perf_counter() - t0
    ok = not bad and dt < 5
    return _record(1, Outcome(ok, f"mismatched n: {bad or 'none'}; {dt:.2f}s (limit 5s)", safe))


# -- 2: exhaustive single faults at n = 8 --------------------------------------


def _split8(m):
    v = random.Random(8).sample(range(1000), 8)
    return m.load_keys(sorted(v[:4])), m.load_keys(sorted(v[4:]))


def _purify8(m):
    X, Y = _split8(m)
    snap = InputSnapshot.of(m)
    Z, F = purifying_merge(m, X, Y)
    return merge_contract_check(Z, F, snap, m.alpha_used).ok and strictly_increasing(faithful_values(Z))


def _smerge8(m):
    X, Y = _split8(m)
    probe = ContractProbe(InputSnapshot.of(m))
    Z = s_merge(m, X, Y, probe=probe)
    return probe.ok and strictly_increasing(faithful_values(Z)) and origins(Z) == list(range(8))


def _ssort8(m):
    probe = ContractProbe()
    Z = s_sort(m, m.load_keys(random.Random(8).sample(range(1000), 8)), probe=probe)
    return probe.ok and strictly_increasing(faithful_values(Z)) and origins(Z) == list(range(8))


@cache
def criterion_2() -> Outcome:
    t0 = time.perf_counter()
    parts, safe, fails = [], [], 0
    for name, scenario in (("purifying_merge", _purify8), ("s_merge", _smerge8), ("s_sort", _ssort8)):
        count = 0
        for _, m, ok in single_faults(2, 2, scenario):
            count += 1
            fails += not ok
            safe.append((m.safe_high_water, m.s_eff))
        parts.append(f"{name} {count}")
    dt = time.perf_counter() - t0
    ok = fails == 0 and dt < 120
    return _record(2, Outcome(ok, f"schedules: {', '.join(parts)}; failures {fails}; {dt:.1f}s (limit 120s)", safe))


# -- 3: randomized sort matrix -------------------------------------------------

SORT_ADVERSARIES = ("RandomUniform", "InversionAttack", "BucketAttack")


def _sort_trial(job):
    n, s, delta, adv, i = job
    seed = trial_seed(3, i)
    m = Machine(s=s, delta=delta, adversary=make_adversary(adv, seed))
    X = m.load_keys(_keys(seed, n))
    snap = InputSnapshot.of(m)
    probe = ContractProbe(snap)
    Z = s_sort(m, X, probe=probe)
    ok = probe.ok and check_sorted_output(Z, snap).ok
    return ok, probe.max_restarts, probe.max_overflow, m.safe_high_water, m.s_eff


@cache
def criterion_3(seeds: int = 200) -> Outcome:
    t0 = time.perf_counter()
    jobs = list(itertools.product((1 << 10, 1 << 14), (4, 16, 64), (64, 512), SORT_ADVERSARIES, range(seeds)))
    res = _map(_sort_trial, jobs)
    dt = time.perf_counter() - t0
    fails = sum(not r[0] for r in res)
    detail = (f"{len(res)} trials, {fails} contract failures, max restarts {max(r[1] for r in res)}, "
              f"max |B_S| {max(r[2] for r in res)}; {dt / 60:.1f} min (limit 15) on {_workers()} CPU")
    return _record(3, Outcome(fails == 0 and dt < 900, detail, [(r[3], r[4]) for r in res]))


# -- 4: reliable variables -----------------------------------------------------


def _majority_exhaustive(delta: int) -> int:
    bad = 0
    k = 2 * delta + 1
    for hit in range(delta + 1):
        for idxs in itertools.combinations(range(k), hit):
            for vals in itertools.product((6, 7, -1), repeat=hit):
                m = Machine(s=2, delta=delta)
                cell = ReliableCell(m, 0)
                write_reliable(cell, 5)
                for i, v in zip(idxs, vals):
                    cell.region.v[i] = v
                bad += read_reliable(cell) != 5
    return bad


def _majority_random(delta: int, trials: int, seed: int) -> int:
    rng = random.Random(seed)
    bad = 0
    m = Machine(s=2, delta=delta)
    cell = ReliableCell(m, 0)
    for _ in range(trials):
        value = rng.randrange(-(1 << 40), 1 << 40)
        write_reliable(cell, value)
        hit = rng.sample(range(2 * delta + 1), rng.randint(0, delta))
        # all corruptions equal is the hardest case for a vote
        same = rng.random() < 0.5
        forged = rng.randrange(1 << 40)
        for i in hit:
            cell.region.v[i] = forged if same else rng.randrange(1 << 40)
        bad += read_reliable(cell) != value
    return bad


@cache
def criterion_4() -> Outcome:
    ex = sum(_majority_exhaustive(d) for d in range(5))
    rnd = sum(_majority_random(d, 10**4, d) for d in (8, 64))
    return _record(4, Outcome(ex == 0 and rnd == 0, f"exhaustive delta<=4 wrong reads {ex}; random 2x10^4 wrong reads {rnd}"))


# -- 5: priority queue soundness -----------------------------------------------

PQ_ADVERSARIES = ("NoFaults", "RandomUniform", "PQAttack")


def _pq_trial(job):
    mix, delta, s, adv, i = job
    seed = trial_seed(5, i)
    m = Machine(s=s, delta=delta, adversary=make_adversary(adv, seed))
    r = pq_workload(m, 0, Workload(*mix, 10**4), seed)
    return not r.problems, m.alpha_used, m.safe_high_water, m.s_eff


@cache
def criterion_5(seeds: int = 50) -> Outcome:
    t0 = time.perf_counter()
    jobs = list(itertools.product(((2, 1), (1, 1)), (0, 64, 512), (4, 16, 64), PQ_ADVERSARIES, range(seeds)))
    res = _map(_pq_trial, jobs)
    dt = time.perf_counter() - t0
    fails = sum(not r[0] for r in res)
    detail = (f"{len(res)} workloads of 10^4 ops, {fails} failing (verdict or invariant), "
              f"{sum(r[1] for r in res)} corruptions; {dt / 60:.1f} min (limit 20) on {_workers()} CPU")
    return _record(5, Outcome(fails == 0 and dt < 1200, detail, [(r[2], r[3]) for r in res]))


# -- 6: safe-space bound -----------------------------------------------------------


@cache
def criterion_6() -> Outcome:
    worst, ratio, trials = 0, 0.0, 0
    over = 0
    for k, crit in enumerate((criterion_1, criterion_2, criterion_3, criterion_4, criterion_5), 1):
        for hw, s_eff in crit().safe:
            trials += 1
            bound = 16 * s_eff + 64
            over += hw > bound
            if hw / bound > ratio:
                worst, ratio = hw, hw / bound
    detail = f"{trials} trials, {over} above 16*S_eff+64; peak {worst} words ({ratio:.0%} of its bound)"
    return _record(6, Outcome(over == 0 and trials > 0, detail))


# -- 7: sort overhead falls with S -------------------------------------------


@cache
def criterion_7(seeds: int = 100) -> Outcome:
    means = {}
    alpha_ok = True
    for s in (4, 64):
        rep = run(RunConfig(command="sort", n=1 << 14, s=s, delta=1 << 10,
                            adversary="InversionAttack", seed=7, trials=seeds))
        alpha_ok &= all(t.counters["alpha_used"] == 1 << 10 for t in rep.trials) and not rep.failed
        means[s] = fmean(t.overhead for t in rep.trials)
    ok = alpha_ok and means[64] < means[4]
    detail = (f"mean overhead S=4 {means[4]:.0f}, S=64 {means[64]:.0f}, ratio {means[4] / means[64]:.2f}; "
              f"full budget spent and verified: {alpha_ok}")
    return _record(7, Outcome(ok, detail))


# -- 8: priority queue cost per operation falls with S -------------------------


def _pq_cost(job):
    s, i = job
    seed = trial_seed(8, i)
    m = Machine(s=s, delta=1 << 10, adversary=make_adversary("PQAttack", seed))
    r = pq_workload(m, 1 << 12, Workload(1, 1, 10**4), seed, check=False)
    return (m.comparisons - r.preload_comparisons) / 10**4, not r.problems


@cache
def criterion_8(seeds: int = 50) -> Outcome:
    res = {s: _map(_pq_cost, [(s, i) for i in range(seeds)]) for s in (4, 64)}
    sound = all(ok for rs in res.values() for _, ok in rs)
    mean = {s: fmean(c for c, _ in rs) for s, rs in res.items()}
    ok = sound and mean[64] < mean[4]
    detail = (f"comparisons/op S=4 {mean[4]:.1f}, S=64 {mean[64]:.1f}, ratio {mean[4] / mean[64]:.2f}; "
              f"all deletemins sound: {sound}")
    return _record(8, Outcome(ok, detail))


# -- 9: replay ---------------------------------------------------------------------


REPLAY_CASES = (
    dict(command="sort", n=2000, s=4, delta=64, adversary="InversionAttack"),
    dict(command="merge", n=2000, s=8, delta=32, adversary="BucketAttack"),
    dict(command="pq", n=500, s=4, delta=16, adversary="PQAttack:every=2", workload="2:1:3000"),
    dict(command="sort", n=3000, s=64, delta=128, adversary="RandomUniform:p=0.01"),
)


def _replays(case: dict, tmp: str, env: dict[str, str]) -> tuple[bool, int]:
    """Run ``case`` twice from its config and once from its exported trace;
    returns whether all three reports agree and how many trials failed."""
    old = {k: os.environ.get(k) for k in env}
    os.environ.update(env)
    try:
        path = os.path.join(tmp, "trace.jsonl")
        first = run(RunConfig(seed=11, trials=3, trace=path, **case))
        with open(path, "rb") as fh:
            trace = fh.read()
        again = run(RunConfig(seed=11, trials=3, trace=path, **case))
        with open(path, "rb") as fh:
            same_file = fh.read() == trace
        replay_case = dict(case, adversary="TraceReplay")
        traced = run(RunConfig(seed=11, trials=3, trace=path, **replay_case))
    finally:
        for k, v in old.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v
    same_cfg = same_file and render(first) == render(again)
    a, b = first.to_dict(), traced.to_dict()
    for d in (a, b):
        d["config"].pop("adversary")
    same_trace = json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    return same_cfg and same_trace, sum(t.failed for t in first.trials)


@cache
def criterion_9() -> Outcome:
    ok, failed = True, 0
    with tempfile.TemporaryDirectory() as tmp:
        for case in REPLAY_CASES:
            same, f = _replays(case, tmp, {})
            ok &= same
            failed += f
        # a safe memory too small for the run makes every trial fail
        same, f = _replays(REPLAY_CASES[-1], tmp, {"FRAMKIT_CSAFE": "1"})
        ok &= same and f == 3
        failed += f
    detail = (f"{len(REPLAY_CASES) + 1} configs x 3 trials ({failed} failing) identical "
              f"from config and from trace: {ok}")
    return _record(9, Outcome(ok, detail))


# -- pytest entry points ----------------------------------------------------------


def test_criterion_1_delta_zero_equivalence():
    assert criterion_1().ok, criterion_1().detail


def test_criterion_2_exhaustive_single_faults():
    assert criterion_2().ok, criterion_2().detail


def test_criterion_3_sort_matrix():
    assert criterion_3().ok, criterion_3().detail


def test_criterion_4_reliable_variables():
    assert criterion_4().ok, criterion_4().detail


def test_criterion_5_pq_soundness():
    assert criterion_5().ok, criterion_5().detail


def test_criterion_6_safe_space():
    assert criterion_6().ok, criterion_6().detail


def test_criterion_7_sort_overhead_falls_with_s():
    assert criterion_7().ok, criterion_7().detail


def test_criterion_8_pq_cost_falls_with_s():
    assert criterion_8().ok, criterion_8().detail


def test_criterion_9_replay():
    assert criterion_9().ok, criterion_9().detail


if __name__ == "__main__":
    for k in range(1, 10):
        globals()[f"criterion_{k}"]()
        print(report_lines()[-1], flush=True)

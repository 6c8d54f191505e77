import pytest

from framkit.adversary import RandomUniform, TraceReplay, read_trace, write_trace
from framkit.fram import (
    CSAFE_ENV,
    FAULTY,
    SAFE,
    BudgetExceeded,
    DuplicateKey,
    FramError,
    KindMismatch,
    Machine,
    OutOfBounds,
    Phase,
    SafeBudgetExceeded,
    decode_tag,
    effective_safe_size,
)
from framkit.resilient_sort import s_sort

from _util import Scripted


def test_alloc_safe_zero_keeps_high_water():
    m = Machine(s=8, delta=8)
    r = m.alloc(SAFE, 0)
    assert len(r) == 0
    assert m.safe_high_water == 0


def test_safe_capacity_is_enforced():
    m = Machine(s=8, delta=8, c_safe=16, c_extra=0)
    m.alloc(SAFE, 128)
    with pytest.raises(SafeBudgetExceeded):
        m.alloc(SAFE, 1)


def test_safe_capacity_includes_additive_constant():
    m = Machine(s=8, delta=8)
    assert m.safe_capacity == 16 * 8 + 64


def test_free_returns_safe_words():
    m = Machine(s=4, delta=4, c_extra=0)
    r = m.alloc(SAFE, 64)
    m.free(r)
    m.alloc(SAFE, 64)
    assert m.safe_high_water == 64


def test_faulty_space_is_unbounded():
    m = Machine()
    r = m.alloc(FAULTY, 10**6)
    assert len(r) == 10**6


def test_read_fresh_cell_is_zero():
    m = Machine()
    r = m.alloc(FAULTY, 4)
    assert m.read(r, 2) == 0
    assert m.faulty_reads == 1


def test_read_your_write():
    m = Machine()
    r = m.alloc(FAULTY, 5)
    m.write_meta(r, 3, 42)
    assert m.read(r, 3) == 42


def test_last_write_wins():
    m = Machine()
    r = m.alloc(FAULTY, 2)
    m.write_meta(r, 0, 1)
    m.write_meta(r, 0, 2)
    assert m.read(r, 0) == 2


def test_read_out_of_bounds():
    m = Machine()
    r = m.alloc(FAULTY, 2)
    with pytest.raises(OutOfBounds):
        m.read(r, 2)
    with pytest.raises(OutOfBounds):
        m.write_meta(r, -1, 0)


def test_corruption_is_visible_and_marks_tag():
    m = Machine(s=2, delta=1)
    r = m.load_keys([10, 20])
    m.install_adversary(Scripted([(r, 1, -7)]))
    m.checkpoint(Phase.ROUND_START)
    assert m.read(r, 1) == -7
    tag = decode_tag(r.t[1])
    assert tag.kind == "KEY" and not tag.faithful and tag.origin_id == 1


def test_safe_memory_cannot_be_corrupted():
    m = Machine(s=2, delta=1)
    r = m.alloc(SAFE, 2)
    m.write_meta(r, 0, 5)
    m.install_adversary(Scripted([(r, 0, 9)]))
    with pytest.raises(FramError):
        m.checkpoint(Phase.ROUND_START)
    assert r.v[0] == 5


def test_copy_key_propagates_tag():
    m = Machine()
    src = m.load_keys([5])
    dst = m.alloc(FAULTY, 1)
    m.copy_key(src, 0, dst, 0)
    assert dst.v[0] == 5
    assert decode_tag(dst.t[0]) == decode_tag(src.t[0])
    assert decode_tag(dst.t[0]).faithful


def test_copy_of_corrupted_cell_is_corrupted():
    m = Machine(s=2, delta=1)
    src = m.load_keys([5])
    m.install_adversary(Scripted([(src, 0, 6)]))
    m.checkpoint(Phase.ROUND_START)
    dst = m.alloc(FAULTY, 1)
    m.copy_key(src, 0, dst, 0)
    assert dst.v[0] == 6 and not decode_tag(dst.t[0]).faithful


def test_copy_chain_stays_faithful():
    m = Machine()
    cur = m.load_keys([77])
    for _ in range(100):
        nxt = m.alloc(FAULTY, 1)
        m.copy_key(cur, 0, nxt, 0)
        cur = nxt
    assert decode_tag(cur.t[0]) == (("KEY", 0, True))


def test_copying_meta_as_key_fails():
    m = Machine()
    r = m.alloc(FAULTY, 2)
    with pytest.raises(KindMismatch):
        m.copy_key(r, 0, r, 1)


def test_duplicate_inputs_rejected():
    m = Machine()
    m.load_keys([1, 2])
    with pytest.raises(DuplicateKey):
        m.load_keys([2])


def test_nofaults_checkpoint_changes_nothing():
    m = Machine(s=2, delta=3)
    r = m.load_keys([1, 2, 3])
    m.checkpoint(Phase.ROUND_START)
    assert r.v == [1, 2, 3] and m.alpha_used == 0


def test_budget_arithmetic():
    m = Machine(s=2, delta=5)
    r = m.load_keys(range(5))
    m.install_adversary(Scripted([(r, i, -1 - i) for i in range(3)]))
    m.checkpoint(Phase.ROUND_START)
    assert m.alpha_used == 3
    assert m.remaining_budget == 2


def test_over_budget_request_is_rejected():
    m = Machine(s=2, delta=5)
    r = m.load_keys(range(5))
    m.install_adversary(Scripted([(r, i, -1 - i) for i in range(4)]))
    m.checkpoint(Phase.ROUND_START)
    m.install_adversary(Scripted([(r, 4, -9), (r, 3, -8)]))
    with pytest.raises(BudgetExceeded):
        m.checkpoint(Phase.ROUND_START)
    assert m.alpha_used == 4


def test_nofaults_sort_spends_nothing():
    m = Machine(s=4, delta=16)
    s_sort(m, m.load_keys(range(100, 0, -1)))
    assert m.alpha_used == 0


def test_random_uniform_is_deterministic():
    logs = []
    for _ in range(2):
        m = Machine(s=4, delta=32, adversary=RandomUniform(p=0.01, seed=1))
        s_sort(m, m.load_keys(range(300, 0, -1)))
        logs.append([c.record() for c in m.corruption_log])
    assert logs[0] == logs[1] and logs[0]


def test_metrics_start_at_zero():
    counters = Machine().metrics().counters()
    assert all(v == 0 for v in counters.values())
    assert "wall_time" not in counters


def test_metrics_count_reads():
    m = Machine()
    r = m.alloc(FAULTY, 10)
    for i in range(7):
        m.read(r, i)
    assert m.metrics().faulty_reads == 7


def test_alpha_matches_log():
    m = Machine(s=4, delta=20, adversary=RandomUniform(p=0.02, seed=3))
    s_sort(m, m.load_keys(range(500)))
    assert m.metrics().alpha_used == len(m.corruption_log) <= 20


@pytest.mark.parametrize("s,delta,expected", [
    (1, 0, 2), (64, 0, 2), (1, 5, 2), (3, 5, 2), (4, 5, 4), (7, 5, 4), (64, 512, 64), (64, 63, 62),
])
def test_effective_safe_size(s, delta, expected):
    assert effective_safe_size(s, delta) == expected


def test_csafe_environment_override(monkeypatch):
    monkeypatch.setenv(CSAFE_ENV, "20")
    assert Machine(s=4, delta=4).safe_capacity == 20 * 4 + 64
    monkeypatch.setenv(CSAFE_ENV, "zero")
    with pytest.raises(ValueError):
        Machine()


def test_trace_roundtrip_reproduces_metrics(tmp_path):
    m = Machine(s=4, delta=16, adversary=RandomUniform(p=0.01, seed=9))
    s_sort(m, m.load_keys(range(400, 0, -1)))
    path = tmp_path / "t.jsonl"
    write_trace([c.record() for c in m.corruption_log], str(path))
    recs = read_trace(str(path))
    assert set(recs[0]) == {"step", "address_space", "address", "old_value", "new_value"}
    again = Machine(s=4, delta=16, adversary=TraceReplay(recs))
    s_sort(again, again.load_keys(range(400, 0, -1)))
    assert again.metrics().counters() == m.metrics().counters()

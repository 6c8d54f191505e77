"""Oracles that read the hidden provenance tags.

Nothing here is used by the algorithms themselves; the harness and the tests
route outputs through these checks.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from itertools import compress
from operator import lt, not_
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

from .fram import KindMismatch, Machine, ProvenanceTag, Region, decode_tag

_odd = (1).__and__
_origin = (1).__rrshift__


class Verdict(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"


class Desync(Exception):
    """The calls mirrored into the reference model diverged from the queue's."""


@dataclass(frozen=True)
class InputSnapshot:
    """Original value of every faithful key instance, by origin id."""

    values: Mapping[int, int]
    total: int

    @classmethod
    def of(cls, machine: Machine) -> "InputSnapshot":
        vals = dict(machine.snapshot)
        return cls(MappingProxyType(vals), len(vals))

    def provenance_ok(self, region: Region, lo: int = 0, hi: int | None = None) -> bool:
        """Every faithful cell still shows the value its origin was loaded with."""
        hi = len(region.v) if hi is None else hi
        get = self.values.get
        for v, t in zip(region.v[lo:hi], region.t[lo:hi]):
            if t >= 0 and not t & 1 and get(t >> 1) != v:
                return False
        return True


def _faithful_values(vals: list[int], tags: list[int]) -> Iterable[int]:
    return compress(vals, map(not_, map(_odd, tags)))


def _increasing(seq: list[int]) -> bool:
    return all(map(lt, seq, seq[1:]))


def faithful_subsequence(region: Region, lo: int = 0, hi: int | None = None) -> list[tuple[int, int]]:
    hi = len(region.v) if hi is None else hi
    out = []
    for i in range(lo, hi):
        t = region.t[i]
        if t < 0:
            raise KindMismatch(f"cell {i} of {region!r} holds structural data")
        if not t & 1:
            out.append((i, region.v[i]))
    return out


def assert_faithfully_ordered(region: Region, lo: int = 0, hi: int | None = None) -> bool:
    """True iff the faithful keys in ``region[lo:hi]`` strictly increase."""
    hi = len(region.v) if hi is None else hi
    vals, tags = region.v[lo:hi], region.t[lo:hi]
    if min(tags, default=0) < 0:
        raise KindMismatch(f"{region!r} holds structural data")
    return _increasing(list(_faithful_values(vals, tags)))


@dataclass
class ContractReport:
    ok: bool = True
    problems: list[str] = field(default_factory=list)

    def fail(self, msg: str) -> None:
        self.ok = False
        self.problems.append(msg)

    def __bool__(self) -> bool:
        return self.ok


def merge_contract_check(
    Z: Region,
    F: Region,
    snapshot: InputSnapshot,
    alpha_call: int,
    inputs: list[tuple[Region, int, int]] | None = None,
    zr: tuple[int, int] | None = None,
) -> ContractReport:
    """Check one purifying merge: sizes, |F| <= 2 alpha, order, conservation.

    ``inputs`` lists the merged ranges; without it the merge is taken to
    cover every loaded key.  ``zr`` restricts Z to a range.
    """
    rep = ContractReport()
    zlo, zhi = zr if zr is not None else (0, len(Z.v))
    zt = Z.t[zlo:zhi]
    ft = F.t
    if inputs is None:
        n_in = snapshot.total
        in_origins = set(snapshot.values)
    else:
        n_in = sum(hi - lo for _, lo, hi in inputs)
        in_origins = set()
        for R, lo, hi in inputs:
            in_origins.update(map(_origin, R.t[lo:hi]))
    if len(zt) + len(ft) != n_in:
        rep.fail(f"|Z|+|F| = {len(zt)}+{len(ft)} but {n_in} keys went in")
    if len(ft) > 2 * alpha_call:
        rep.fail(f"|F| = {len(ft)} exceeds 2*alpha = {2 * alpha_call}")
    if min(zt, default=0) < 0 or min(ft, default=0) < 0:
        rep.fail("structural word among the merged keys")
        return rep
    if not _increasing(list(_faithful_values(Z.v[zlo:zhi], zt))):
        rep.fail("faithful keys of Z out of order")
    out = set(map(_origin, zt))
    out.update(map(_origin, ft))
    if len(out) != len(zt) + len(ft) or out != in_origins:
        rep.fail("origin multiset changed")
    return rep


class ContractProbe:
    """Runs the contract checks on every merge of a sort as it happens.

    ``alpha`` for a call is everything spent so far in the run: keys hit
    before the call still reach it as corrupted input.
    """

    def __init__(self, snapshot: InputSnapshot | None = None, keep: int = 5):
        self.snapshot = snapshot or InputSnapshot({}, 0)
        self.keep = keep
        self.merges = 0
        self.failures: list[str] = []
        self.n_failures = 0
        self.max_restarts = 0
        self.max_overflow = 0
        self.restart_slack = None

    @property
    def ok(self) -> bool:
        return self.n_failures == 0

    def _note(self, msg: str) -> None:
        self.n_failures += 1
        if len(self.failures) < self.keep:
            self.failures.append(msg)

    def on_purify(self, m: Machine, inputs: list[tuple[Region, int, int]],
                  Z: Region, F: Region, restarts: int) -> None:
        self.merges += 1
        alpha = m.alpha_used
        rep = merge_contract_check(Z, F, self.snapshot, alpha, inputs)
        if not rep:
            self._note(f"merge {self.merges}: " + "; ".join(rep.problems))
        bound = 2 * alpha // m.s_eff
        if restarts > bound:
            self._note(f"merge {self.merges}: {restarts} restarts > floor(2*{alpha}/{m.s_eff})")
        self.max_restarts = max(self.max_restarts, restarts)
        slack = bound - restarts
        self.restart_slack = slack if self.restart_slack is None else min(self.restart_slack, slack)

    def on_bucket(self, m: Machine, max_overflow: int) -> None:
        self.max_overflow = max(self.max_overflow, max_overflow)
        if max_overflow > m.delta + 1:
            self._note(f"merge {self.merges}: top bucket held {max_overflow} > delta+1 keys")


def check_sorted_output(out: Region, snapshot: InputSnapshot) -> ContractReport:
    """Final check of a whole sort: order, every origin exactly once, provenance."""
    rep = ContractReport()
    if len(out.v) != snapshot.total:
        rep.fail(f"{len(out.v)} keys out, {snapshot.total} in")
    if not assert_faithfully_ordered(out):
        rep.fail("faithful keys out of order")
    origins = sorted(map(_origin, out.t))
    if origins != sorted(snapshot.values):
        rep.fail("origin multiset changed")
    if not snapshot.provenance_ok(out):
        rep.fail("a faithful cell shows a value other than its input value")
    return rep


# ---------------------------------------------------------------------------
# priority queue reference model


class PQReferenceModel:
    """Shadow of the live faithful keys of a priority queue.

    Corruptions are learned from the machine's log.  A hit origin becomes a
    suspect; suspects are settled against ``live_tags`` (the tags of every
    key instance the queue currently holds, safe copies included) the next
    time they could matter.
    """

    def __init__(self, machine: Machine | None = None,
                 live_tags: Callable[[], Iterable[int]] | None = None):
        self.machine = machine
        self.live_tags = live_tags
        self.live: dict[int, int] = {}
        self.heap: list[tuple[int, int]] = []
        self.returned: list[tuple[int, ProvenanceTag]] = []
        self.suspects: set[int] = set()
        self._log_pos = 0
        self.corrupted_returns = 0

    def __len__(self) -> int:
        return len(self.live)

    def oracle_insert(self, key: int, origin: int) -> None:
        if origin in self.live:
            raise Desync(f"origin {origin} inserted twice")
        self.live[origin] = key
        heapq.heappush(self.heap, (key, origin))

    def _poll_log(self) -> None:
        m = self.machine
        if m is None:
            return
        log = m.corruption_log
        while self._log_pos < len(log):
            t = log[self._log_pos].old_tag
            self._log_pos += 1
            if t >= 0 and (t >> 1) in self.live:
                self.suspects.add(t >> 1)

    def _settle(self, extra_tag: int | None) -> None:
        if not self.suspects:
            return
        if self.live_tags is None:
            raise Desync("suspects pending but no way to inspect the queue")
        present = set(self.live_tags())
        if extra_tag is not None:
            present.add(extra_tag)
        for o in self.suspects:
            if (o << 1) not in present:
                # no faithful instance survives: the key left the faithful set
                self.live.pop(o, None)
        self.suspects.clear()

    def _min(self) -> tuple[int, int] | None:
        heap = self.heap
        live = self.live
        while heap and live.get(heap[0][1]) != heap[0][0]:
            heapq.heappop(heap)
        return heap[0] if heap else None

    def minimum(self) -> int | None:
        top = self._min()
        return None if top is None else top[0]

    def oracle_check_deletemin(self, value: int, tag: int | ProvenanceTag) -> Verdict:
        raw = tag if isinstance(tag, int) else None
        tag = decode_tag(tag) if isinstance(tag, int) else tag
        if tag.kind != "KEY":
            raise Desync("deletemin returned a structural word")
        self._poll_log()
        if raw is None and tag.faithful:
            raw = tag.origin_id << 1
        self._settle(raw if tag.faithful else None)
        top = self._min()
        self.returned.append((value, tag))
        o = tag.origin_id
        if tag.faithful:
            if o not in self.live:
                raise Desync(f"faithful origin {o} is not live in the model")
            ok = top is not None and value == top[0] and top[1] == o
            del self.live[o]
            return Verdict.PASS if ok else Verdict.FAIL
        self.corrupted_returns += 1
        self.live.pop(o, None)
        ok = top is None or value <= top[0]
        return Verdict.PASS if ok else Verdict.FAIL


__all__ = [
    "Verdict", "Desync", "InputSnapshot", "faithful_subsequence", "assert_faithfully_ordered",
    "ContractReport", "merge_contract_check", "ContractProbe", "check_sorted_output",
    "PQReferenceModel",
]

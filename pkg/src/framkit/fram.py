"""Two-memory faulty RAM simulator.

Every stored word is a pair (value, tag).  Values are what algorithms and
adversaries see.  Tags are a compact integer encoding of provenance that only
the verification layer decodes:

* ``tag >= 0`` marks a key instance; ``tag >> 1`` is its origin id.
* ``tag < 0`` marks structural (META) data.
* the low bit is set once a corruption touched the instance or anything it
  was copied from.

Regions keep their values and tags in two parallel Python lists.  The bulk
helpers (``copy_range``, ``append_range``, ``read_values``) fall back to a
per-word loop only when the installed adversary asked to be woken up inside
the range, so runs without faults pay for slicing rather than for method
calls.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Any, Iterable, NamedTuple

FAULTY = "faulty"
SAFE = "safe"

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1

META_OK = -2
META_BAD = -1

DEFAULT_C_SAFE = 16
DEFAULT_C_EXTRA = 64
CSAFE_ENV = "FRAMKIT_CSAFE"


class FramError(Exception):
    """Base class for simulator errors."""


class OutOfBounds(FramError, IndexError):
    pass


class KindMismatch(FramError, TypeError):
    pass


class SafeBudgetExceeded(FramError):
    pass


class BudgetExceeded(FramError):
    """The adversary asked for more corruptions than it has left."""


class DuplicateKey(FramError, ValueError):
    """Two faithful input keys share a value."""


class Phase(str, Enum):
    AFTER_READ = "AFTER_READ"
    AFTER_WRITE = "AFTER_WRITE"
    ROUND_START = "ROUND_START"
    ITERATION_START = "ITERATION_START"
    SAFETY_CHECK_BEGIN = "SAFETY_CHECK_BEGIN"
    BUCKET_ROUND_START = "BUCKET_ROUND_START"
    SORT_PASS_START = "SORT_PASS_START"
    PQ_OP_BEGIN = "PQ_OP_BEGIN"


_ALL_PHASES = frozenset(Phase)

class ProvenanceTag(NamedTuple):
    kind: str
    origin_id: int | None
    faithful: bool


class KeyWord(NamedTuple):
    value: int
    tag: ProvenanceTag


def decode_tag(t: int) -> ProvenanceTag:
    if t < 0:
        return ProvenanceTag("META", None, t == META_OK)
    return ProvenanceTag("KEY", t >> 1, not t & 1)


def effective_safe_size(s: int, delta: int) -> int:
    """Usable safe size: at most delta words help, and the value must be even."""
    if s < 1:
        raise ValueError("s must be >= 1")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if delta == 0:
        return 2
    v = max(2, min(s, delta))
    return v - (v & 1)


def c_safe_from_env() -> int:
    raw = os.environ.get(CSAFE_ENV)
    if raw is None or raw == "":
        return DEFAULT_C_SAFE
    try:
        val = int(raw)
    except ValueError as exc:
        raise ValueError(f"{CSAFE_ENV} must be a positive integer, got {raw!r}") from exc
    if val < 1:
        raise ValueError(f"{CSAFE_ENV} must be a positive integer, got {raw!r}")
    return val


class Region:
    """A contiguous run of words in one address space.

    ``wv`` counts algorithm writes and ``cv`` counts corruptions; invariant
    checkers key their caches on the pair.
    """

    __slots__ = ("rid", "space", "label", "v", "t", "wv", "cv", "live", "charge", "faulty")

    def __init__(self, rid: int, space: str, label: str, v: list, t: list, charge: int):
        self.rid = rid
        self.space = space
        self.faulty = space == FAULTY
        self.label = label
        self.v = v
        self.t = t
        self.wv = 0
        self.cv = 0
        self.live = True
        self.charge = charge

    def __len__(self) -> int:
        return len(self.v)

    def __repr__(self) -> str:
        return f"Region({self.rid}, {self.space}, {self.label!r}, len={len(self.v)})"


@dataclass
class RunMetrics:
    comparisons: int = 0
    faulty_reads: int = 0
    faulty_writes: int = 0
    safe_reads: int = 0
    safe_writes: int = 0
    rounds: int = 0
    restarts: int = 0
    binary_searches: int = 0
    pq_pushes: int = 0
    pq_pulls: int = 0
    rebuilds: int = 0
    alpha_used: int = 0
    safe_high_water: int = 0
    steps: int = 0
    wall_time: float = 0.0

    def counters(self) -> dict[str, int]:
        """Every field except wall time, which is the only nondeterministic one."""
        d = asdict(self)
        d.pop("wall_time")
        return d

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class AdversaryEvent:
    phase: Phase
    step: int
    region: Region | None = None
    index: int = -1
    info: Any = None


@dataclass(frozen=True)
class Corruption:
    step: int
    address_space: str
    address: int
    old_value: int
    new_value: int
    old_tag: int

    def record(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "address_space": self.address_space,
            "address": self.address,
            "old_value": self.old_value,
            "new_value": self.new_value,
        }


def address_of(region: Region, idx: int) -> int:
    return (region.rid << 32) | idx


def _phase_set(wanted: Any) -> frozenset[Phase]:
    if wanted is True:
        return _ALL_PHASES
    if not wanted:
        return frozenset()
    return frozenset(wanted)


class Adversary:
    """Strategy interface.

    ``next_step`` is the first step at which the machine must call
    ``on_event`` for a memory access.  Checkpoints are delivered for the
    phases in ``wants_checkpoints`` (True means all of them); the machine
    re-reads both after every call.  ``on_event`` returns a list of
    ``(region, index, new_value)`` triples.
    """

    name = "base"
    next_step: float = math.inf
    wants_checkpoints = False

    def bind(self, machine: "Machine") -> None:
        self.machine = machine

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        return []


class NoFaults(Adversary):
    name = "NoFaults"


class Machine:
    """One faulty RAM instance: both memories, counters, and the adversary."""

    def __init__(
        self,
        s: int = 2,
        delta: int = 0,
        c_safe: int | None = None,
        c_extra: int = DEFAULT_C_EXTRA,
        adversary: Adversary | None = None,
    ):
        self.s = s
        self.delta = delta
        self.s_eff = effective_safe_size(s, delta)
        self.c_safe = c_safe_from_env() if c_safe is None else c_safe
        self.safe_capacity = self.c_safe * self.s_eff + c_extra
        self.safe_in_use = 0
        self.safe_high_water = 0

        self.comparisons = 0
        self.faulty_reads = 0
        self.faulty_writes = 0
        self.safe_reads = 0
        self.safe_writes = 0
        self.rounds = 0
        self.restarts = 0
        self.binary_searches = 0
        self.pq_pushes = 0
        self.pq_pulls = 0
        self.rebuilds = 0
        self.step = 0

        self.corruption_log: list[Corruption] = []
        self.snapshot: dict[int, int] = {}
        self._loaded_values: set[int] = set()
        self.value_lo = 0
        self.value_hi = 0

        self._rid = 0
        self._regions: dict[int, Region] = {}
        self._t0 = time.perf_counter()
        self.adversary: Adversary = NoFaults()
        self._next = math.inf
        self._cp_phases: frozenset[Phase] = frozenset()
        self.install_adversary(adversary or NoFaults())

    # -- adversary plumbing -------------------------------------------------

    def install_adversary(self, strategy: Adversary) -> None:
        self.adversary = strategy
        strategy.bind(self)
        self._next = strategy.next_step
        self._cp_phases = _phase_set(strategy.wants_checkpoints)

    @property
    def alpha_used(self) -> int:
        return len(self.corruption_log)

    @property
    def remaining_budget(self) -> int:
        return self.delta - len(self.corruption_log)

    def _fire(self, phase: Phase, region: Region | None, idx: int, info: Any = None) -> None:
        adv = self.adversary
        corrs = adv.on_event(AdversaryEvent(phase, self.step, region, idx, info))
        if corrs:
            self._apply(corrs)
        self._next = adv.next_step
        self._cp_phases = _phase_set(adv.wants_checkpoints)

    def _apply(self, corrs: list[tuple[Region, int, int]]) -> None:
        if len(corrs) > self.delta - len(self.corruption_log):
            raise BudgetExceeded(
                f"{len(corrs)} corruptions requested with "
                f"{self.delta - len(self.corruption_log)} remaining"
            )
        for region, idx, value in corrs:
            if not region.faulty:
                raise FramError("safe memory cannot be corrupted")
            if not region.live:
                raise FramError(f"corruption of freed region {region!r}")
            if not 0 <= idx < len(region.v):
                raise OutOfBounds(f"corruption at {idx} outside {region!r}")
            value = int(value)
            if not INT64_MIN <= value <= INT64_MAX:
                raise FramError("corrupted value outside the 64-bit range")
            old = region.v[idx]
            old_tag = region.t[idx]
            region.v[idx] = value
            region.t[idx] = old_tag | 1
            region.cv += 1
            self.corruption_log.append(
                Corruption(self.step, FAULTY, address_of(region, idx), old, value, old_tag)
            )

    def checkpoint(self, phase: Phase, info: Any = None) -> None:
        self.step += 1
        if phase in self._cp_phases or self.step >= self._next:
            self._fire(phase, None, -1, info)

    # -- adversary views ----------------------------------------------------

    def peek(self, region: Region, idx: int) -> int:
        """Visible value without counting an access."""
        return region.v[idx]

    def live_faulty_regions(self) -> list[Region]:
        return [r for r in self._regions.values() if r.faulty]

    def region_at(self, address: int) -> tuple[Region, int]:
        rid, idx = address >> 32, address & 0xFFFFFFFF
        region = self._regions.get(rid)
        if region is None or not region.faulty:
            raise OutOfBounds(f"no live faulty region at address {address}")
        return region, idx

    # -- allocation ---------------------------------------------------------

    def _new_region(self, space: str, label: str, v: list, t: list, charge: int) -> Region:
        if space not in (FAULTY, SAFE):
            raise ValueError(f"unknown address space {space!r}")
        if space == SAFE:
            if self.safe_in_use + charge > self.safe_capacity:
                raise SafeBudgetExceeded(
                    f"safe allocation of {charge} words exceeds capacity "
                    f"{self.safe_capacity} ({self.safe_in_use} in use)"
                )
            self.safe_in_use += charge
            if self.safe_in_use > self.safe_high_water:
                self.safe_high_water = self.safe_in_use
        self._rid += 1
        region = Region(self._rid, space, label, v, t, charge if space == SAFE else 0)
        self._regions[self._rid] = region
        return region

    def alloc(self, space: str, n: int, label: str = "") -> Region:
        """Region of ``n`` META cells holding 0."""
        if n < 0:
            raise ValueError("length must be non-negative")
        return self._new_region(space, label, [0] * n, [META_OK] * n, n)

    def alloc_buffer(self, space: str, capacity: int, label: str = "") -> Region:
        """Empty region that grows by appends; safe buffers are charged ``capacity`` words."""
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        return self._new_region(space, label, [], [], capacity)

    def free(self, region: Region) -> None:
        if not region.live:
            return
        region.live = False
        if region.space == SAFE:
            self.safe_in_use -= region.charge
        del self._regions[region.rid]
        region.v = []
        region.t = []

    def load_keys(self, values: Iterable[int], label: str = "input") -> Region:
        """Faulty region of fresh faithful key instances."""
        vals = [int(x) for x in values]
        region = self._new_region(FAULTY, label, [], [], 0)
        self._register(vals)
        base = len(self.snapshot) - len(vals)
        region.v = vals
        region.t = [(base + i) << 1 for i in range(len(vals))]
        self.faulty_writes += len(vals)
        return region

    def _register(self, vals: list[int]) -> None:
        seen = self._loaded_values
        for x in vals:
            if not INT64_MIN <= x <= INT64_MAX:
                raise ValueError(f"key {x} outside the 64-bit range")
            if x in seen:
                raise DuplicateKey(f"faithful input value {x} loaded twice")
            seen.add(x)
        base = len(self.snapshot)
        for i, x in enumerate(vals):
            self.snapshot[base + i] = x
        if vals:
            lo, hi = min(vals), max(vals)
            if base == 0:
                self.value_lo, self.value_hi = lo, hi
            else:
                self.value_lo = min(self.value_lo, lo)
                self.value_hi = max(self.value_hi, hi)

    def new_key(self, value: int, dst: Region) -> None:
        """Append a fresh faithful instance of ``value`` to ``dst``."""
        self._register([int(value)])
        origin = len(self.snapshot) - 1
        dst.v.append(int(value))
        dst.t.append(origin << 1)
        dst.wv += 1
        self._count_write(dst, len(dst.v) - 1)

    # -- single-word access ---------------------------------------------------

    def _count_write(self, region: Region, idx: int) -> None:
        if region.faulty:
            self.faulty_writes += 1
            self.step += 1
            if self.step >= self._next:
                self._fire(Phase.AFTER_WRITE, region, idx)
        else:
            self.safe_writes += 1

    def _count_read(self, region: Region, idx: int) -> None:
        if region.faulty:
            self.faulty_reads += 1
            self.step += 1
            if self.step >= self._next:
                self._fire(Phase.AFTER_READ, region, idx)
        else:
            self.safe_reads += 1

    @staticmethod
    def _check(region: Region, idx: int) -> None:
        if not region.live:
            raise FramError(f"access to freed region {region!r}")
        if not 0 <= idx < len(region.v):
            raise OutOfBounds(f"index {idx} outside {region!r}")

    def read(self, region: Region, idx: int) -> int:
        self._check(region, idx)
        val = region.v[idx]
        self._count_read(region, idx)
        return val

    def write_meta(self, region: Region, idx: int, value: int) -> None:
        self._check(region, idx)
        region.v[idx] = int(value)
        region.t[idx] = META_OK
        region.wv += 1
        self._count_write(region, idx)

    def copy_key(self, src: Region, si: int, dst: Region, di: int) -> None:
        self._check(src, si)
        self._check(dst, di)
        if src.t[si] < 0:
            raise KindMismatch(f"cell {si} of {src!r} holds structural data, not a key")
        val, tag = src.v[si], src.t[si]
        self._count_read(src, si)
        dst.v[di] = val
        dst.t[di] = tag
        dst.wv += 1
        self._count_write(dst, di)

    def append_key(self, src: Region, si: int, dst: Region) -> None:
        val, tag = src.v[si], src.t[si]
        self._count_read(src, si)
        dst.v.append(val)
        dst.t.append(tag)
        dst.wv += 1
        self._count_write(dst, len(dst.v) - 1)

    def truncate(self, region: Region, n: int) -> None:
        """Drop cells from index ``n`` on; bookkeeping only, no word is accessed."""
        if n < len(region.v):
            del region.v[n:]
            del region.t[n:]
            region.wv += 1

    # -- bulk access ----------------------------------------------------------

    def _tally(self, src: Region | None, dst: Region | None, k: int) -> int:
        hooks = 0
        if src is not None:
            if src.faulty:
                self.faulty_reads += k
                hooks += k
            else:
                self.safe_reads += k
        if dst is not None:
            if dst.faulty:
                self.faulty_writes += k
                hooks += k
            else:
                self.safe_writes += k
        return hooks

    def read_values(self, src: Region, i: int, k: int) -> list[int]:
        """Values of ``src[i:i+k]``, read one word at a time."""
        if k <= 0:
            return []
        if src.faulty and self.step + k >= self._next:
            out = []
            v = src.v
            for e in range(i, i + k):
                out.append(v[e])
                self.faulty_reads += 1
                self.step += 1
                if self.step >= self._next:
                    self._fire(Phase.AFTER_READ, src, e)
            return out
        if src.faulty:
            self.faulty_reads += k
            self.step += k
        else:
            self.safe_reads += k
        return src.v[i:i + k]

    def copy_range(self, src: Region, i: int, dst: Region, j: int, k: int) -> None:
        """Sequential word-by-word copy of ``src[i:i+k]`` onto ``dst[j:j+k]``.

        Overlap is allowed only when ``j <= i`` within one region (left shifts).
        """
        if k <= 0:
            return
        dst.wv += 1
        hooks = (k if src.faulty else 0) + (k if dst.faulty else 0)
        if hooks == 0 or self.step + hooks < self._next:
            dst.v[j:j + k] = src.v[i:i + k]
            dst.t[j:j + k] = src.t[i:i + k]
            self._tally(src, dst, k)
            self.step += hooks
            return
        sv, st, dv, dt = src.v, src.t, dst.v, dst.t
        for e in range(k):
            val, tag = sv[i + e], st[i + e]
            self._count_read(src, i + e)
            dv[j + e] = val
            dt[j + e] = tag
            self._count_write(dst, j + e)

    def append_range(self, src: Region, i: int, k: int, dst: Region) -> None:
        """Append ``src[i:i+k]`` to ``dst`` word by word."""
        if k <= 0:
            return
        dst.wv += 1
        hooks = (k if src.faulty else 0) + (k if dst.faulty else 0)
        if hooks == 0 or self.step + hooks < self._next:
            dst.v.extend(src.v[i:i + k])
            dst.t.extend(src.t[i:i + k])
            self._tally(src, dst, k)
            self.step += hooks
            return
        sv, st, dv, dt = src.v, src.t, dst.v, dst.t
        for e in range(i, i + k):
            val, tag = sv[e], st[e]
            self._count_read(src, e)
            dv.append(val)
            dt.append(tag)
            self._count_write(dst, len(dv) - 1)

    def append_indices(self, src: Region, idxs: list[int], dst: Region) -> None:
        """Append ``src[e]`` for each ``e`` in ``idxs`` (a gather), word by word."""
        k = len(idxs)
        if k == 0:
            return
        dst.wv += 1
        hooks = (k if src.faulty else 0) + (k if dst.faulty else 0)
        sv, st, dv, dt = src.v, src.t, dst.v, dst.t
        if hooks == 0 or self.step + hooks < self._next:
            dv.extend([sv[e] for e in idxs])
            dt.extend([st[e] for e in idxs])
            self._tally(src, dst, k)
            self.step += hooks
            return
        for e in idxs:
            val, tag = sv[e], st[e]
            self._count_read(src, e)
            dv.append(val)
            dt.append(tag)
            self._count_write(dst, len(dv) - 1)

    def fill_meta(self, region: Region, value: int) -> None:
        """Overwrite every cell of ``region`` with a META word."""
        k = len(region.v)
        if k == 0:
            return
        region.wv += 1
        if not region.faulty or self.step + k < self._next:
            region.v[:] = [int(value)] * k
            region.t[:] = [META_OK] * k
            self._tally(None, region, k)
            if region.faulty:
                self.step += k
            return
        for e in range(k):
            region.v[e] = int(value)
            region.t[e] = META_OK
            self._count_write(region, e)

    def count_safe(self, reads: int = 0, writes: int = 0) -> None:
        """Tally safe-memory accesses an algorithm performed on its own lists."""
        self.safe_reads += reads
        self.safe_writes += writes

    # -- reporting ------------------------------------------------------------

    def metrics(self) -> RunMetrics:
        return RunMetrics(
            comparisons=self.comparisons,
            faulty_reads=self.faulty_reads,
            faulty_writes=self.faulty_writes,
            safe_reads=self.safe_reads,
            safe_writes=self.safe_writes,
            rounds=self.rounds,
            restarts=self.restarts,
            binary_searches=self.binary_searches,
            pq_pushes=self.pq_pushes,
            pq_pulls=self.pq_pulls,
            rebuilds=self.rebuilds,
            alpha_used=len(self.corruption_log),
            safe_high_water=self.safe_high_water,
            steps=self.step,
            wall_time=time.perf_counter() - self._t0,
        )

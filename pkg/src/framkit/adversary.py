"""Built-in corruption strategies and the ``name[:k=v,...]`` parser.

Strategies only look at visible values (through ``Machine.peek`` and the
state objects passed at checkpoints) and return corruption requests; the
machine applies them and charges the budget.
"""

from __future__ import annotations

import json
import math
import random
from typing import Any, Callable, Iterable

from .fram import (
    INT64_MAX,
    INT64_MIN,
    Adversary,
    AdversaryEvent,
    Machine,
    NoFaults,
    Phase,
    Region,
)


class AdversaryConfigError(ValueError):
    pass


def _geometric(rng: random.Random, p: float) -> int:
    """Number of hooks until the next success of a Bernoulli(p) trial."""
    if p >= 1.0:
        return 1
    if p <= 0.0:
        return 0
    u = rng.random()
    return int(math.log1p(-u) / math.log1p(-p)) + 1


def _random_cell(rng: random.Random, machine: Machine) -> tuple[Region, int] | None:
    regions = [r for r in machine.live_faulty_regions() if r.v]
    total = sum(len(r.v) for r in regions)
    if total == 0:
        return None
    k = rng.randrange(total)
    for r in regions:
        if k < len(r.v):
            return r, k
        k -= len(r.v)
    return None  # pragma: no cover


class RandomUniform(Adversary):
    """Each hook independently corrupts one random live faulty word with probability ``p``."""

    name = "RandomUniform"

    def __init__(self, p: float = 1e-3, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise AdversaryConfigError("RandomUniform p must lie in [0, 1]")
        self.p = float(p)
        self.seed = int(seed)
        self.rng = random.Random(self.seed)

    def bind(self, machine: Machine) -> None:
        super().bind(machine)
        self._schedule(machine.step)

    def _schedule(self, step: int) -> None:
        gap = _geometric(self.rng, self.p)
        self.next_step = math.inf if gap == 0 or self.machine.remaining_budget <= 0 else step + gap

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        m = self.machine
        out: list[tuple[Region, int, int]] = []
        if m.remaining_budget > 0:
            cell = _random_cell(self.rng, m)
            if cell is not None:
                region, idx = cell
                out.append((region, idx, self._value(region, idx)))
        if m.remaining_budget - len(out) <= 0:
            self.next_step = math.inf
        else:
            self._schedule(event.step)
        return out

    def _value(self, region: Region, idx: int) -> int:
        m = self.machine
        mode = self.rng.randrange(3)
        if mode == 0:
            return self.rng.randint(m.value_lo - 1, m.value_hi + 1)
        if mode == 1:
            j = idx + 1 if idx + 1 < len(region.v) else idx - 1
            if j >= 0:
                return m.peek(region, j)
        old = m.peek(region, idx)
        return max(INT64_MIN, min(INT64_MAX, old + self.rng.choice((-1, 1)) * self.rng.randint(1, 1 << 16)))


class InversionAttack(Adversary):
    """Feeds X2 (or Y2) a run of tiny keys so that every stored key gets paired
    off and the round has to roll back; each rollback costs as many faults as
    the safe buffer held keys.

    ``min_total`` restricts the attack to merges whose inputs hold at least
    that many keys, which pushes the budget towards the expensive top levels
    of a sort.
    """

    name = "InversionAttack"
    wants_checkpoints = frozenset((Phase.ITERATION_START,))

    def __init__(self, seed: int = 0, min_total: int = 0):
        self.rng = random.Random(int(seed))
        self.min_total = int(min_total)
        self.flip = 0

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        if event.phase is not Phase.ITERATION_START:
            return []
        st = event.info
        m = self.machine
        budget = m.remaining_budget
        if budget <= 0 or st.exempt or st.total < self.min_total:
            return []
        sides = (st.sx, st.sy) if self.flip == 0 else (st.sy, st.sx)
        self.flip ^= 1
        for side in sides:
            avail = len(side.buf1.v) - side.r
            need = len(side.buf2.v)
            if avail <= 0 or need == 0:
                continue
            k = min(need, avail, budget)
            if k == budget:
                self.wants_checkpoints = False
            lo = m.value_lo - 1
            return [(side.buf1, side.r + j, lo - j) for j in range(k)]
        return []


class BucketAttack(Adversary):
    """Spends half the budget planting inversions, ``burst`` at a time (so the
    bucket stage gets work), and the rest corrupting the next keys the bucket
    stage will scan, sending them to buckets far from the current one."""

    name = "BucketAttack"
    wants_checkpoints = frozenset((Phase.ITERATION_START, Phase.BUCKET_ROUND_START))

    def __init__(self, seed: int = 0, per_round: int = 2, burst: int = 4):
        self.rng = random.Random(int(seed))
        self.per_round = max(1, int(per_round))
        self.burst = max(1, int(burst))
        self.planted = 0

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        m = self.machine
        budget = m.remaining_budget
        if budget <= 0:
            self.wants_checkpoints = False
            return []
        st = event.info
        if event.phase is Phase.ITERATION_START:
            quota = (m.delta + 1) // 2
            if self.planted >= quota or st.exempt:
                return []
            side = st.sx if self.rng.random() < 0.5 else st.sy
            avail = len(side.buf1.v) - side.r
            if avail <= 0 or not side.buf2.v:
                return []
            k = min(self.burst, avail, quota - self.planted, budget)
            self.planted += k
            if k == budget:
                self.wants_checkpoints = False
            elif self.planted >= quota:
                self.wants_checkpoints = frozenset((Phase.BUCKET_ROUND_START,))
            low = side.buf2.v[0] - 1
            return [(side.buf1, side.r + j, low - j) for j in range(k)]
        if event.phase is Phase.BUCKET_ROUND_START and st.pv:
            out = []
            pv = st.pv
            c = st.cursor
            for j in range(min(self.per_round, budget, st.hi - c)):
                target = (len(pv) // 2) if j % 2 == 0 else 0
                if target == 0:
                    out.append((st.X, c + j, pv[0] - 1))
                else:
                    out.append((st.X, c + j, pv[target - 1]))
            if len(out) >= budget:
                self.wants_checkpoints = False
            return out
        return []


class PQAttack(Adversary):
    """Every ``every`` queue operations, corrupts the stored minimum of one
    sub-buffer behind the window queues (or of an insertion buffer), pushing it
    to an extreme value."""

    name = "PQAttack"
    wants_checkpoints = frozenset((Phase.PQ_OP_BEGIN,))

    def __init__(self, seed: int = 0, every: int = 8):
        self.rng = random.Random(int(seed))
        self.every = max(1, int(every))
        self.ops = 0

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        if event.phase is not Phase.PQ_OP_BEGIN:
            return []
        self.ops += 1
        m = self.machine
        if self.ops % self.every or m.remaining_budget <= 0:
            return []
        targets = event.info.attack_targets()
        if not targets:
            return []
        if m.remaining_budget == 1:
            self.wants_checkpoints = False
        region, idx = targets[self.rng.randrange(len(targets))]
        if self.rng.random() < 0.5:
            value = m.value_lo - 1 - self.rng.randrange(1 << 20)
        else:
            value = m.value_hi + 1 + self.rng.randrange(1 << 20)
        return [(region, idx, value)]


class ScheduledFault(Adversary):
    """Exactly one corruption at hook ``step``: ``kind`` is ``min``, ``max`` or
    ``swap`` (copy the value of the neighbouring cell)."""

    name = "ScheduledFault"

    def __init__(self, step: int, address: int, kind: str = "min"):
        if kind not in ("min", "max", "swap"):
            raise AdversaryConfigError(f"unknown crafted value {kind!r}")
        self.step = int(step)
        self.address = int(address)
        self.kind = kind
        self.next_step = self.step
        self.applied = False

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        self.next_step = math.inf
        if event.step != self.step or self.applied:
            return []
        m = self.machine
        try:
            region, idx = m.region_at(self.address)
        except Exception:
            return []
        if idx >= len(region.v):
            return []
        self.applied = True
        if self.kind == "min":
            return [(region, idx, INT64_MIN)]
        if self.kind == "max":
            return [(region, idx, INT64_MAX)]
        j = idx + 1 if idx + 1 < len(region.v) else idx - 1
        value = m.peek(region, j) if j >= 0 else m.peek(region, idx) ^ 1
        return [(region, idx, value)]


class HookRecorder(Adversary):
    """Wakes up at every hook and records the live faulty addresses there."""

    name = "HookRecorder"
    wants_checkpoints = True

    def __init__(self):
        self.next_step = 1
        self.hooks: list[tuple[int, list[int]]] = []

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        addrs = []
        for r in self.machine.live_faulty_regions():
            base = r.rid << 32
            addrs.extend(base | i for i in range(len(r.v)))
        self.hooks.append((event.step, addrs))
        self.next_step = event.step + 1
        return []


class TraceReplay(Adversary):
    """Re-applies a recorded corruption trace at the recorded steps."""

    name = "TraceReplay"

    def __init__(self, records: Iterable[dict[str, Any]]):
        self.records = sorted((dict(r) for r in records), key=lambda r: r["step"])
        self.pos = 0
        self.next_step = self.records[0]["step"] if self.records else math.inf
        self.wants_checkpoints = False

    def on_event(self, event: AdversaryEvent) -> list[tuple[Region, int, int]]:
        out = []
        m = self.machine
        while self.pos < len(self.records) and self.records[self.pos]["step"] <= event.step:
            rec = self.records[self.pos]
            self.pos += 1
            if rec["step"] != event.step:
                continue
            region, idx = m.region_at(int(rec["address"]))
            out.append((region, idx, int(rec["new_value"])))
        self.next_step = self.records[self.pos]["step"] if self.pos < len(self.records) else math.inf
        return out


def read_trace(path: str) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_trace(records: Iterable[dict[str, Any]], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


_FACTORIES: dict[str, Callable[..., Adversary]] = {
    "NoFaults": NoFaults,
    "RandomUniform": RandomUniform,
    "InversionAttack": InversionAttack,
    "BucketAttack": BucketAttack,
    "PQAttack": PQAttack,
}

STRATEGY_NAMES = tuple(_FACTORIES)


def _coerce(text: str) -> Any:
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def parse_adversary(spec: str) -> tuple[str, dict[str, Any]]:
    """Split ``name[:k=v,...]`` into a name and keyword arguments."""
    name, _, rest = spec.partition(":")
    name = name.strip()
    if name not in _FACTORIES:
        raise AdversaryConfigError(
            f"unknown adversary {name!r}; expected one of {', '.join(STRATEGY_NAMES)}"
        )
    kwargs: dict[str, Any] = {}
    if rest.strip():
        for item in rest.split(","):
            key, eq, val = item.partition("=")
            if not eq or not key.strip():
                raise AdversaryConfigError(f"malformed adversary parameter {item!r}")
            kwargs[key.strip()] = _coerce(val.strip())
    return name, kwargs


def make_adversary(spec: str, default_seed: int = 0) -> Adversary:
    name, kwargs = parse_adversary(spec)
    if name != "NoFaults":
        kwargs.setdefault("seed", default_seed)
    try:
        return _FACTORIES[name](**kwargs)
    except TypeError as exc:
        raise AdversaryConfigError(f"bad parameters for {name}: {exc}") from exc

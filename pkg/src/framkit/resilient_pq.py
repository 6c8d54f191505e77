"""Resilient priority queue built on the faulty RAM and S-word safe memory.

Layout:

* ``I_0``: the immediate insertion buffer (faulty), at most ``cap_I0`` keys.
* ``P_I``: up to S safe nodes, each pointing at a faulty buffer of earlier
  insertions and keyed by that buffer's minimum.
* layers ``L_0..L_{k-1}``, each an up buffer U_i and a down buffer D_i in
  faulty memory, with sizes and neighbour links kept in reliable cells.
* for U_0 and D_0 a window: their first delta+1 keys live in up to S
  sub-buffers of at most ``ceil(delta/S)+1`` keys, each behind a safe node
  (P_U / P_D); the rest of the buffer is read through a safe cursor p.

Safe nodes keep a copy of the key they are keyed by, so a deletemin that
picks a node returns the copy even when the adversary has hit the cell
since.  Before any push/pull cascade both windows are flattened back into
plain buffers, which keeps P_U and P_D out of safe memory while the merges
run.
"""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import dataclass, field
from itertools import compress
from operator import lt, not_
from typing import Iterable

from .fram import FAULTY, META_OK, SAFE, Machine, Phase, Region
from .reliable import ReliableCell, read_reliable, write_reliable
from .resilient_sort import ContractViolation, MergeParams, Workspace, merge_ranges, sort_into

N_REF_FLOOR = 16
_odd = (1).__and__


class EmptyQueue(Exception):
    pass


def _clog2(x: int) -> int:
    return max(0, (x - 1).bit_length())


def _cdiv(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class PQParams:
    s_eff: int
    delta: int
    n_ref: int = N_REF_FLOOR
    log_n: int = field(init=False, repr=False, compare=False)
    cap_i0: int = field(init=False, repr=False, compare=False)
    base: int = field(init=False, repr=False, compare=False)
    window: int = field(init=False, repr=False, compare=False)
    sub_len: int = field(init=False, repr=False, compare=False)

    @classmethod
    def make(cls, s_eff: int, delta: int, n_live: int = 0) -> "PQParams":
        return cls(s_eff, delta, max(N_REF_FLOOR, n_live))

    @classmethod
    def of(cls, machine: Machine, n_live: int = 0) -> "PQParams":
        return cls.make(machine.s_eff, machine.delta, n_live)

    def rescaled(self, n_live: int) -> "PQParams":
        return PQParams.make(self.s_eff, self.delta, n_live)

    def __post_init__(self) -> None:
        # derived sizes are read on every operation, so fix them once
        log_n = _clog2(self.n_ref)
        per = _cdiv(self.delta, self.s_eff)
        put = object.__setattr__
        put(self, "log_n", log_n)
        put(self, "cap_i0", log_n + per)
        put(self, "base", self.s_eff * log_n ** 2 + self.delta * (_clog2(self.s_eff) + per))
        put(self, "window", self.delta + 1)
        put(self, "sub_len", per + 1)

    def s(self, i: int) -> int:
        return (2 << i) * self.base


class _NodeQueue:
    """Binary heap of at most ``cap`` nodes in safe memory.

    A node is four words: the key (a copied key word, kept in slot ``j`` of
    ``keys``), the buffer it points at, that buffer's length and the
    position of its minimum.
    """

    __slots__ = ("m", "cap", "keys", "bufs", "minpos", "heap", "free_slots", "hcost", "version")

    def __init__(self, m: Machine, cap: int, label: str):
        self.m = m
        self.cap = cap
        self.keys = m.alloc_buffer(SAFE, 4 * cap, label)
        self.keys.v.extend([0] * cap)
        self.keys.t.extend([META_OK] * cap)
        self.bufs: list[Region | None] = [None] * cap
        self.minpos = [0] * cap
        self.heap: list[tuple[int, int]] = []
        self.free_slots = list(range(cap - 1, -1, -1))
        self.hcost = _clog2(cap + 1) + 1
        self.version = 0

    def __len__(self) -> int:
        return len(self.heap)

    def full(self) -> bool:
        return not self.free_slots

    def push(self, buf: Region) -> None:
        """Scan ``buf`` for its minimum and add a node for it."""
        m = self.m
        k = len(buf.v)
        vals = m.read_values(buf, 0, k)
        pos = min(range(k), key=vals.__getitem__)
        m.comparisons += k - 1 + self.hcost
        j = self.free_slots.pop()
        m.copy_key(buf, pos, self.keys, j)
        self.bufs[j] = buf
        self.minpos[j] = pos
        m.count_safe(reads=self.hcost, writes=self.hcost + 2)
        heapq.heappush(self.heap, (self.keys.v[j], j))
        self.version += 1

    def peek(self) -> int:
        self.m.safe_reads += 1
        return self.heap[0][0]

    def pop(self) -> tuple[int, int, Region, int]:
        """Remove the top node: (value, tag, buffer, min position)."""
        m = self.m
        _, j = heapq.heappop(self.heap)
        self.version += 1
        m.comparisons += self.hcost
        m.count_safe(reads=self.hcost + 3, writes=self.hcost)
        buf = self.bufs[j]
        self.bufs[j] = None
        self.free_slots.append(j)
        return self.keys.v[j], self.keys.t[j], buf, self.minpos[j]

    def nodes(self) -> list[tuple[int, int, Region, int]]:
        return [(self.keys.v[j], self.keys.t[j], self.bufs[j], self.minpos[j]) for _, j in self.heap]

    def dissolve(self) -> None:
        """Write every node's key back over the cell it was copied from, so a
        cell hit since the copy is restored, then free the queue."""
        m = self.m
        for _, j in self.heap:
            m.copy_key(self.keys, j, self.bufs[j], self.minpos[j])
        self.heap.clear()
        self.free()

    def free(self) -> None:
        self.m.free(self.keys)


class _Buf:
    """A faulty buffer whose keys are ``region[p:]`` plus, for U_0 and D_0,
    the keys in the window sub-buffers behind ``q``."""

    __slots__ = ("region", "p", "q", "n_win")

    def __init__(self, region: Region):
        self.region = region
        self.p = 0
        self.q: _NodeQueue | None = None
        self.n_win = 0

    def size(self) -> int:
        return len(self.region.v) - self.p + self.n_win

    def subs(self) -> list[Region]:
        return [b for b in self.q.bufs if b is not None] if self.q is not None else []


class Layer:
    __slots__ = ("U", "D", "size_u", "size_d", "link_prev", "link_next")

    def __init__(self, U: _Buf, D: _Buf, cells: tuple[ReliableCell, ...]):
        self.U = U
        self.D = D
        self.size_u, self.size_d, self.link_prev, self.link_next = cells


@dataclass
class InvariantReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


class ResilientPQ:
    def __init__(self, m: Machine, params: PQParams | None = None):
        self.m = m
        self.params = params or PQParams.of(m)
        if self.params.s_eff != m.s_eff or self.params.delta != m.delta:
            raise ValueError("queue parameters disagree with the machine")
        self.S = m.s_eff
        self.delta = m.delta
        # live count, cursors, cascade bounds and a few scalars
        self.regs = m.alloc(SAFE, 16, "pq-registers")
        self.live = 0
        self.i0 = m.alloc_buffer(FAULTY, 0, "I0")
        self.pi: _NodeQueue | None = _NodeQueue(m, self.S, "P_I")
        self.layers: list[Layer] = []
        self.last_tag = 0
        self.cascade_calls: Counter = Counter()
        self.repeat_invocations = 0
        self._in_cascade = 0
        self._cache: dict[int, tuple] = {}
        self._qcache: dict[int, tuple] = {}
        self._add_layer(m.alloc_buffer(FAULTY, 0, "D0"))

    # -- layer plumbing --------------------------------------------------------

    def _add_layer(self, d_region: Region) -> None:
        m = self.m
        i = len(self.layers)
        cells = tuple(ReliableCell(m, 0, f"L{i}-{name}") for name in ("U", "D", "prev", "next"))
        layer = Layer(_Buf(m.alloc_buffer(FAULTY, 0, f"U{i}")), _Buf(d_region), cells)
        self.layers.append(layer)
        write_reliable(layer.size_d, len(d_region.v))
        write_reliable(layer.link_prev, i - 1)
        write_reliable(layer.link_next, -1)
        if i:
            write_reliable(self.layers[i - 1].link_next, i)

    def _drop_last_layer(self) -> None:
        layer = self.layers.pop()
        for buf in (layer.U, layer.D):
            self.m.free(buf.region)
        for cell in (layer.size_u, layer.size_d, layer.link_prev, layer.link_next):
            cell.free()
        if self.layers:
            write_reliable(self.layers[-1].link_next, -1)

    def _set(self, i: int, kind: str, region: Region) -> None:
        """Install ``region`` as the plain U_i or D_i, freeing the old one."""
        layer = self.layers[i]
        old = layer.U if kind == "U" else layer.D
        if old.q is not None:
            raise ContractViolation("replacing a windowed buffer")
        if old.region is not region:
            self.m.free(old.region)
        region.label = f"{kind}{i}"
        buf = _Buf(region)
        if kind == "U":
            layer.U = buf
            write_reliable(layer.size_u, len(region.v))
        else:
            layer.D = buf
            write_reliable(layer.size_d, len(region.v))

    def _size(self, i: int, kind: str) -> int:
        layer = self.layers[i]
        cell = layer.size_u if kind == "U" else layer.size_d
        buf = layer.U if kind == "U" else layer.D
        if buf.q is not None or buf.p:
            return buf.size()
        n = read_reliable(cell)
        if n != len(buf.region.v):
            raise ContractViolation(f"reliable size of {kind}{i} disagrees with the buffer")
        return n

    def _next_layer(self, i: int) -> int:
        return read_reliable(self.layers[i].link_next)

    # -- windows over U_0 and D_0 ------------------------------------------

    def _build_window(self, buf: _Buf, label: str) -> None:
        m = self.m
        if buf.q is not None:
            raise ContractViolation("window already built")
        region = buf.region
        n = len(region.v) - buf.p
        if n == 0:
            return
        q = _NodeQueue(m, self.S, label)
        w = min(self.params.window, n)
        g = self.params.sub_len
        for start in range(0, w, g):
            sub = m.alloc_buffer(FAULTY, 0, label + "-sub")
            m.append_range(region, buf.p + start, min(g, w - start), sub)
            q.push(sub)
        buf.p += w
        buf.n_win = w
        buf.q = q
        m.safe_writes += 1

    def _window_pop(self, buf: _Buf) -> tuple[int, int]:
        """Delete the top node's key from its sub-buffer, backfilling from p."""
        m = self.m
        q = buf.q
        value, tag, sub, pos = q.pop()
        region = buf.region
        if buf.p < len(region.v):
            m.copy_key(region, buf.p, sub, pos)
            buf.p += 1
            m.safe_writes += 1
        else:
            k = len(sub.v)
            m.copy_range(sub, pos + 1, sub, pos, k - pos - 1)
            m.truncate(sub, k - 1)
            buf.n_win -= 1
        if sub.v:
            q.push(sub)
        else:
            m.free(sub)
        if not q.heap and buf.p < len(region.v):
            # every sub-buffer drained with keys left behind the cursor
            q.free()
            buf.q = None
            buf.n_win = 0
            self._build_window(buf, q.keys.label)
        return value, tag

    def _flatten(self, buf: _Buf, label: str) -> None:
        """Turn a windowed buffer back into a plain faithfully ordered one by
        draining the window through its queue."""
        m = self.m
        if buf.q is None and buf.p == 0:
            return
        out = m.alloc_buffer(FAULTY, 0, label)
        q = buf.q
        if q is not None:
            while q.heap:
                _, _, sub, pos = q.pop()
                j = q.free_slots[-1]
                m.append_key(q.keys, j, out)
                k = len(sub.v)
                m.copy_range(sub, pos + 1, sub, pos, k - pos - 1)
                m.truncate(sub, k - 1)
                if sub.v:
                    q.push(sub)
                else:
                    m.free(sub)
            q.free()
        region = buf.region
        m.append_range(region, buf.p, len(region.v) - buf.p, out)
        m.free(region)
        buf.region = out
        buf.p = 0
        buf.q = None
        buf.n_win = 0

    def _flatten_l0(self) -> None:
        layer = self.layers[0]
        self._flatten(layer.U, "U0")
        self._flatten(layer.D, "D0")
        write_reliable(layer.size_u, len(layer.U.region.v))
        write_reliable(layer.size_d, len(layer.D.region.v))

    def _windows_l0(self) -> None:
        layer = self.layers[0]
        if layer.U.q is None:
            self._build_window(layer.U, "P_U")
        if layer.D.q is None:
            self._build_window(layer.D, "P_D")

    # -- merges ------------------------------------------------------------

    def _workspace(self) -> Workspace:
        return Workspace(self.m, MergeParams(self.S, self.delta))

    def _merge3(self, a: Region, b: Region, c: Region) -> Region:
        """Two two-way resilient merges; inputs are left untouched."""
        m = self.m
        ws = self._workspace()
        try:
            ab = merge_ranges(m, ws, a, 0, len(a.v), b, 0, len(b.v))
            out = merge_ranges(m, ws, ab, 0, len(ab.v), c, 0, len(c.v))
            m.free(ab)
        finally:
            ws.free()
        return out

    def _split(self, M: Region, cut: int, label: str) -> Region:
        """Move ``M[cut:]`` into a fresh region and shorten M to ``cut``."""
        m = self.m
        rest = m.alloc_buffer(FAULTY, 0, label)
        m.append_range(M, cut, len(M.v) - cut, rest)
        m.truncate(M, cut)
        return rest

    # -- push / pull ---------------------------------------------------------

    def _note_call(self, kind: str, i: int) -> None:
        self.cascade_calls[(kind, i)] += 1
        if self.cascade_calls[(kind, i)] > 1:
            self.repeat_invocations += 1
        if sum(self.cascade_calls.values()) > 8 * (len(self.layers) + 4):
            raise RuntimeError("push/pull cascade does not settle")

    def _push1(self, i: int) -> None:
        m = self.m
        params = self.params
        nu = self._size(i, "U")
        if nu <= params.s(i) // 2:
            raise ContractViolation(f"push({i}) with |U_{i}| = {nu} <= s_{i}/2")
        self._note_call("push", i)
        m.pq_pushes += 1
        last = i == len(self.layers) - 1
        if last:
            self._add_layer(m.alloc_buffer(FAULTY, 0, f"D{i + 1}"))
        nd = self._size(i, "D")
        layer, nxt = self.layers[i], self.layers[i + 1]
        M = self._merge3(layer.U.region, layer.D.region, nxt.U.region)
        rest = self._split(M, max(0, nd - self.delta), f"U{i + 1}")
        self._set(i, "D", M)
        self._set(i, "U", m.alloc_buffer(FAULTY, 0, f"U{i}"))
        if last:
            self._set(i + 1, "D", rest)
        else:
            self._set(i + 1, "U", rest)

    def _pull1(self, i: int) -> None:
        m = self.m
        params = self.params
        if i >= len(self.layers) - 1:
            raise ContractViolation(f"pull({i}) on the last layer")
        nd = self._size(i, "D")
        s_i = params.s(i)
        if nd >= s_i // 2 + (s_i & 1):
            raise ContractViolation(f"pull({i}) with |D_{i}| = {nd} >= s_{i}/2")
        self._note_call("pull", i)
        m.pq_pulls += 1
        nd1 = self._size(i + 1, "D")
        layer, nxt = self.layers[i], self.layers[i + 1]
        M = self._merge3(layer.D.region, nxt.U.region, nxt.D.region)
        a = min(s_i, len(M.v))
        b = min(max(0, nd1 - (s_i - nd) - self.delta), len(M.v) - a)
        mid = self._split(M, a, f"D{i + 1}")
        up = self._split(mid, b, f"U{i + 1}")
        self._set(i, "D", M)
        self._set(i + 1, "D", mid)
        self._set(i + 1, "U", up)
        if not mid.v and not up.v and i + 1 == len(self.layers) - 1:
            self._drop_last_layer()

    def _u_over(self, i: int) -> bool:
        return i < len(self.layers) and self._size(i, "U") > self.params.s(i) // 2

    def _d_under(self, i: int) -> bool:
        if i >= len(self.layers) - 1:
            return False
        return 2 * self._size(i, "D") < self.params.s(i)

    def _push_from(self, i: int) -> None:
        m = self.m
        j = i
        while True:
            self._push1(j)
            if self._u_over(j + 1):
                j += 1
                continue
            break
        m.safe_writes += 2
        # down buffers shrank by up to delta; walk them and pull where needed
        lo, hi = i, j
        layer = lo
        while 0 <= layer <= hi and layer < len(self.layers):
            if self._d_under(layer):
                self._pull_from(layer)
            if layer >= len(self.layers):
                break
            layer = self._next_layer(layer)

    def _pull_from(self, i: int) -> None:
        j = i
        while True:
            self._pull1(j)
            if self._d_under(j + 1):
                j += 1
                continue
            break
        self.m.safe_writes += 2
        lo, hi = i, j
        layer = lo
        while 0 <= layer <= hi and layer < len(self.layers):
            nxt = self._next_layer(layer)
            if nxt < 0:
                break
            if self._u_over(nxt):
                self._push_from(nxt)
            layer = nxt

    def _cascade(self, kind: str, i: int) -> None:
        """Flatten layer 0, run a push or pull cascade from layer i, rebuild the windows."""
        self._in_cascade += 1
        try:
            if self._in_cascade == 1:
                self.cascade_calls.clear()
                self._flatten_l0()
            if kind == "push":
                self._push_from(i)
            else:
                self._pull_from(i)
        finally:
            self._in_cascade -= 1
        if self._in_cascade == 0:
            self._windows_l0()

    def push(self, i: int) -> None:
        """Push on U_i and everything it sets off; U_i must exceed s_i/2."""
        self._flatten_l0()
        if not self._u_over(i):
            self._windows_l0()
            raise ContractViolation(f"push({i}) while U_{i} satisfies its size bound")
        self._cascade("push", i)

    def pull(self, i: int) -> None:
        """Pull on D_i and everything it sets off; D_i must be under s_i/2 and not last."""
        self._flatten_l0()
        if not self._d_under(i):
            self._windows_l0()
            raise ContractViolation(f"pull({i}) while D_{i} satisfies its size bound")
        self._cascade("pull", i)

    # -- building and rebuilding ---------------------------------------------

    def _distribute(self, R: Region) -> None:
        """Lay the sorted keys of R out as D_0, D_1, ... of sizes s_i."""
        m = self.m
        n = len(R.v)
        pos = 0
        i = 0
        while True:
            k = min(self.params.s(i), n - pos)
            d = m.alloc_buffer(FAULTY, 0, f"D{i}")
            m.append_range(R, pos, k, d)
            pos += k
            self._add_layer(d)
            i += 1
            if pos >= n:
                break
        m.free(R)

    def _gather(self) -> Region:
        """Move every live key into one faulty region and free the structure."""
        m = self.m
        out = m.alloc_buffer(FAULTY, 0, "gather")
        m.append_range(self.i0, 0, len(self.i0.v), out)
        m.truncate(self.i0, 0)
        if self.pi is not None:
            bufs = self.pi.nodes()
            self.pi.dissolve()
            for _, _, buf, _ in bufs:
                m.append_range(buf, 0, len(buf.v), out)
                m.free(buf)
            self.pi = None
        while self.layers:
            layer = self.layers[-1]
            for buf in (layer.U, layer.D):
                subs = buf.subs()
                if buf.q is not None:
                    buf.q.dissolve()
                    buf.q = None
                for sub in subs:
                    m.append_range(sub, 0, len(sub.v), out)
                    m.free(sub)
                m.append_range(buf.region, buf.p, len(buf.region.v) - buf.p, out)
            self._drop_last_layer()
        return out

    def rebuild_global(self) -> None:
        m = self.m
        m.rebuilds += 1
        keys = self._gather()
        self.params = self.params.rescaled(len(keys.v))
        ws = self._workspace()
        try:
            R = sort_into(m, ws, keys)
        finally:
            ws.free()
        if R is not keys:
            m.free(keys)
        self._distribute(R)
        self.pi = _NodeQueue(m, self.S, "P_I")
        self._windows_l0()

    def _maybe_rebuild(self) -> None:
        n_ref = self.params.n_ref
        if self.live >= 2 * n_ref or (n_ref > N_REF_FLOOR and 2 * self.live <= n_ref):
            self.rebuild_global()

    # -- operations ------------------------------------------------------------

    def __len__(self) -> int:
        return self.live

    def insert(self, key: int) -> None:
        m = self.m
        m.checkpoint(Phase.PQ_OP_BEGIN, self)
        i0 = self.i0
        m.new_key(key, i0)
        self.live += 1
        m.safe_writes += 1
        cap = self.params.cap_i0
        if len(i0.v) >= cap:
            if not self.pi.full():
                buf = m.alloc_buffer(FAULTY, 0, "I'")
                m.append_range(i0, 0, len(i0.v), buf)
                m.truncate(i0, 0)
                self.pi.push(buf)
            else:
                self._flush()
        self._maybe_rebuild()

    def _flush(self) -> None:
        """Sort I_0, the P_I buffers and U_0's window, merge into U_0's rest."""
        m = self.m
        layer = self.layers[0]
        U = layer.U
        batch = m.alloc_buffer(FAULTY, 0, "flush")
        m.append_range(self.i0, 0, len(self.i0.v), batch)
        m.truncate(self.i0, 0)
        bufs = self.pi.nodes()
        self.pi.dissolve()
        self.pi = None
        for _, _, buf, _ in bufs:
            m.append_range(buf, 0, len(buf.v), batch)
            m.free(buf)
        subs = U.subs()
        if U.q is not None:
            U.q.dissolve()
            U.q = None
            U.n_win = 0
        for sub in subs:
            m.append_range(sub, 0, len(sub.v), batch)
            m.free(sub)
        ws = self._workspace()
        try:
            srt = sort_into(m, ws, batch)
            merged = merge_ranges(m, ws, srt, 0, len(srt.v), U.region, U.p, len(U.region.v))
        finally:
            ws.free()
        m.free(srt)
        if srt is not batch:
            m.free(batch)
        self._set(0, "U", merged)
        if self._u_over(0):
            self._cascade("push", 0)
        else:
            self._windows_l0()
        self.pi = _NodeQueue(m, self.S, "P_I")

    def _take(self) -> tuple[int, int]:
        m = self.m
        layer = self.layers[0]
        U, D = layer.U, layer.D
        best = None
        src = -1
        i0 = self.i0
        k = len(i0.v)
        pos = -1
        if k:
            vals = m.read_values(i0, 0, k)
            pos = min(range(k), key=vals.__getitem__)
            m.comparisons += k - 1
            best, src = vals[pos], 0
        for s, q in ((1, self.pi), (2, U.q), (3, D.q)):
            if q is not None and q.heap:
                v = q.peek()
                if best is not None:
                    m.comparisons += 1
                if best is None or v < best:
                    best, src = v, s
        if src < 0:
            raise RuntimeError("queue holds keys that no source can reach")
        if src == 0:
            tag = i0.t[pos]
            m.copy_range(i0, pos + 1, i0, pos, k - pos - 1)
            m.truncate(i0, k - 1)
            return best, tag
        if src == 1:
            return self._take_pi()
        buf = U if src == 2 else D
        value, tag = self._window_pop(buf)
        if src == 3 and self._d_under(0):
            self._cascade("pull", 0)
        return value, tag

    def _take_pi(self) -> tuple[int, int]:
        m = self.m
        value, tag, buf, pos = self.pi.pop()
        k = len(buf.v)
        m.copy_range(buf, pos + 1, buf, pos, k - pos - 1)
        m.truncate(buf, k - 1)
        c = k - 1
        half = self.params.cap_i0 // 2
        m.comparisons += 1
        if 2 * c >= self.params.cap_i0:
            self.pi.push(buf)
        elif self.i0.v:
            i0 = self.i0
            t = min(half, len(i0.v))
            m.append_range(i0, len(i0.v) - t, t, buf)
            m.truncate(i0, len(i0.v) - t)
            self.pi.push(buf)
        else:
            m.append_range(buf, 0, c, self.i0)
            m.free(buf)
        return value, tag

    def pop(self) -> tuple[int, int]:
        """Deletemin returning the removed key word as (value, raw tag)."""
        m = self.m
        if self.live == 0:
            raise EmptyQueue("deletemin on an empty queue")
        m.checkpoint(Phase.PQ_OP_BEGIN, self)
        value, tag = self._take()
        self.live -= 1
        m.safe_writes += 1
        self.last_tag = tag
        self._maybe_rebuild()
        return value, tag

    def deletemin(self) -> int:
        return self.pop()[0]

    # -- views for adversaries and oracles -----------------------------------

    def attack_targets(self) -> list[tuple[Region, int]]:
        """Cells holding the key a safe node is keyed by."""
        out = []
        layer = self.layers[0]
        for q in (self.pi, layer.U.q, layer.D.q):
            if q is not None:
                out.extend((buf, pos) for _, _, buf, pos in q.nodes() if buf.v)
        return out

    def _regions(self) -> list[tuple[Region, int]]:
        regs = [(self.i0, 0)]
        if self.pi is not None:
            regs.extend((buf, 0) for _, _, buf, _ in self.pi.nodes())
        for layer in self.layers:
            for buf in (layer.U, layer.D):
                regs.extend((sub, 0) for sub in buf.subs())
                regs.append((buf.region, buf.p))
        return regs

    def live_cells(self) -> list[int]:
        """Tags of every key cell in the structure (one per live key)."""
        out: list[int] = []
        for r, lo in self._regions():
            out.extend(r.t[lo:])
        return out

    def live_values(self) -> list[int]:
        out: list[int] = []
        for r, lo in self._regions():
            out.extend(r.v[lo:])
        return out

    def live_tags(self) -> list[int]:
        """``live_cells`` plus the key copies held by safe nodes."""
        out = self.live_cells()
        layer = self.layers[0]
        for q in (self.pi, layer.U.q, layer.D.q):
            if q is not None:
                out.extend(t for _, t, _, _ in q.nodes())
        return out

    # -- invariant checker (reads hidden tags) ---------------------------------

    def _summary(self, r: Region) -> tuple:
        """(ordered, first, last, min, max, index of last) over r's faithful keys, cached."""
        key = (r.wv, r.cv, len(r.v))
        hit = self._cache.get(r.rid)
        if hit is not None and hit[0] == key:
            return hit[1]
        f = list(compress(r.v, map(not_, map(_odd, r.t))))
        if f:
            ordered = all(map(lt, f, f[1:]))
            last_i = len(r.t) - 1
            while r.t[last_i] & 1:
                last_i -= 1
            summ = (ordered, f[0], f[-1], min(f), max(f), last_i)
        else:
            summ = (True, None, None, None, None, -1)
        self._cache[r.rid] = (key, summ)
        return summ

    def _suffix(self, r: Region, p: int) -> tuple:
        if p == 0:
            return self._summary(r)
        ordered, _, last, lo, hi, last_i = self._summary(r)
        if not ordered or last_i < p:
            vals = [v for v, t in zip(r.v[p:], r.t[p:]) if not t & 1]
            if not vals:
                return (True, None, None, None, None, -1)
            return (all(map(lt, vals, vals[1:])), vals[0], vals[-1], min(vals), max(vals), -1)
        i = p
        while r.t[i] & 1:
            i += 1
        return (True, r.v[i], last, r.v[i], last, last_i)

    def _queue_scan(self, q: _NodeQueue, cap: int) -> tuple[list[str], int | None, int | None]:
        """Node checks for one safe queue plus the faithful (min, max) over
        its buffers.  Cached until the queue changes or a fault lands."""
        stamp = (q.version, len(self.m.corruption_log), cap)
        hit = self._qcache.get(id(q))
        if hit is not None and hit[0] is q and hit[1] == stamp:
            return hit[2]
        msgs = []
        wmin = wmax = None
        keys, bufs = q.keys.v, q.bufs
        for _, j in q.heap:
            sub = bufs[j]
            s = self._summary(sub)
            if s[3] is not None:
                if keys[j] > s[3]:
                    msgs.append("node key above a faithful key of its buffer")
                wmin = s[3] if wmin is None or s[3] < wmin else wmin
                wmax = s[4] if wmax is None or s[4] > wmax else wmax
            if len(sub.v) > cap:
                msgs.append("buffer longer than its cap")
        out = (msgs, wmin, wmax)
        self._qcache[id(q)] = (q, stamp, out)
        return out

    def _buf_bounds(self, buf: _Buf, name: str, rep: InvariantReport) -> tuple[int | None, int | None]:
        """Check a buffer's order and return its faithful (min, max)."""
        ordered, first, last, lo, hi, _ = self._suffix(buf.region, buf.p)
        if not ordered:
            rep.violations.append(f"I1: {name} is not faithfully ordered")
        if buf.q is not None:
            msgs, wmin, wmax = self._queue_scan(buf.q, self.params.sub_len)
            rep.violations.extend(f"{name}: {msg}" for msg in msgs)
            if len(buf.q) > self.S:
                rep.violations.append(f"{name}: window queue holds more than S nodes")
            if wmax is not None and lo is not None and wmax > lo:
                rep.violations.append(f"I1: {name} window holds a faithful key above its remainder")
            if wmin is not None:
                lo = wmin if lo is None else min(lo, wmin)
                hi = wmax if hi is None else max(hi, wmax)
        return lo, hi

    def check_invariants(self) -> InvariantReport:
        rep = InvariantReport()
        p = self.params
        k = len(self.layers)
        bounds = []
        for i, layer in enumerate(self.layers):
            ub = self._buf_bounds(layer.U, f"U{i}", rep)
            db = self._buf_bounds(layer.D, f"D{i}", rep)
            bounds.append((ub, db))
            nu, nd = layer.U.size(), layer.D.size()
            if i < k - 1 and not (p.s(i) <= 2 * nd and nd <= p.s(i)):
                rep.violations.append(f"I3: |D{i}| = {nd} outside [s/2, s] = [{p.s(i) / 2}, {p.s(i)}]")
            if 2 * nu > p.s(i):
                rep.violations.append(f"I4: |U{i}| = {nu} > s/2 = {p.s(i) / 2}")
        for i in range(k - 1):
            dmax = bounds[i][1][1]
            if dmax is None:
                continue
            for name, (lo, _) in (("D", bounds[i + 1][1]), ("U", bounds[i + 1][0])):
                if lo is not None and lo < dmax:
                    rep.violations.append(f"I2: D{i}{name}{i + 1} is not faithfully ordered")
        if len(self.i0.v) > p.cap_i0:
            rep.violations.append("I0 over capacity")
        if self.pi is not None:
            if len(self.pi) > self.S:
                rep.violations.append("P_I holds more than S nodes")
            msgs, _, _ = self._queue_scan(self.pi, p.cap_i0)
            rep.violations.extend(f"P_I: {msg}" for msg in msgs)
        if self.repeat_invocations:
            rep.violations.append(f"{self.repeat_invocations} repeated push/pull calls within a cascade")
        return rep


def pq_new(machine: Machine, params: PQParams | None = None) -> ResilientPQ:
    return ResilientPQ(machine, params)


def pq_from_keys(machine: Machine, keys: Iterable[int], params: PQParams | None = None) -> ResilientPQ:
    """Queue holding ``keys``: sorted resiliently and laid out over D_0, D_1, ..."""
    vals = list(keys)
    params = params or PQParams.of(machine, len(vals))
    pq = ResilientPQ(machine, params)
    m = machine
    R = m.load_keys(vals, "pq-input")
    pq._drop_last_layer()
    ws = pq._workspace()
    pi = pq.pi
    pi.free()
    try:
        R = sort_into(m, ws, R)
    finally:
        ws.free()
    pq.pi = _NodeQueue(m, pq.S, "P_I")
    pq._distribute(R)
    pq.live = len(vals)
    pq._windows_l0()
    return pq


__all__ = ["PQParams", "ResilientPQ", "EmptyQueue", "InvariantReport", "pq_new", "pq_from_keys"]

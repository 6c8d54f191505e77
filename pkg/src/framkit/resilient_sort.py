"""Resilient merging and sorting with a safe memory of S words.

``purifying_merge`` produces a faithfully ordered sequence plus a small set
``F`` of discarded keys, ``bucket_merge`` folds an unordered set back into a
faithfully ordered sequence, ``s_merge`` chains the two and ``s_sort`` is a
bottom-up mergesort over ``s_merge``.

Index conventions: a side of the purifying merge reads its input ``src``
through cursor ``cur``; its large faulty buffer ``buf1`` holds live keys in
``[r, len)``; ``snap1`` is the round-start copy of that live part, so
snapshot index ``e`` corresponds to ``buf1`` index ``base + e``.
"""

from __future__ import annotations

import heapq
from bisect import bisect_left, bisect_right
from itertools import accumulate, islice
from operator import le, lt, sub
from dataclasses import dataclass
from typing import Protocol

from .fram import FAULTY, SAFE, Machine, Phase, Region

OK = "OK"
REMOVED_OK = "REMOVED_OK"
ROUND_FAIL = "ROUND_FAIL"

_SCAN_CHUNK = 64

# shortcuts taken when no adversary hook can fire; they reproduce the step-by-step
# results and counters exactly (tests switch them off to compare)
SHORTCUTS = True
_MERGE_PHASES = frozenset((Phase.ROUND_START, Phase.ITERATION_START, Phase.SAFETY_CHECK_BEGIN))


class ContractViolation(Exception):
    """An operation was called outside its precondition."""


def _clog2(x: int) -> int:
    return max(0, (x - 1).bit_length())


@dataclass(frozen=True)
class MergeParams:
    s_eff: int
    delta: int

    def __post_init__(self) -> None:
        if self.s_eff < 2 or self.s_eff % 2:
            raise ValueError(f"s_eff must be a positive even integer, got {self.s_eff}")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")

    @classmethod
    def of(cls, machine: Machine) -> "MergeParams":
        return cls(machine.s_eff, machine.delta)

    @property
    def x1_cap(self) -> int:
        return 4 * self.delta + self.s_eff

    @property
    def z1_cap(self) -> int:
        return self.delta + self.s_eff // 2

    @property
    def x2_cap(self) -> int:
        return self.s_eff

    @property
    def z2_cap(self) -> int:
        return self.s_eff // 2


class MergeProbe(Protocol):
    def on_purify(self, m: Machine, inputs: list[tuple[Region, int, int]],
                  Z: Region, F: Region, restarts: int) -> None: ...

    def on_bucket(self, m: Machine, max_overflow: int) -> None: ...


# ---------------------------------------------------------------------------
# workspace


class _Side:
    __slots__ = ("name", "src", "cur", "hi", "buf1", "snap1", "buf2", "snap2", "scratch",
                 "r", "base", "w", "n_snap", "snap_head", "cnt1", "swept")

    def __init__(self, m: Machine, name: str, s: int):
        self.name = name
        self.buf1 = m.alloc_buffer(FAULTY, 0, name + "1")
        self.snap1 = m.alloc_buffer(FAULTY, 0, name + "1-copy")
        self.buf2 = m.alloc_buffer(SAFE, s, name + "2")
        self.snap2 = m.alloc_buffer(SAFE, s, name + "2-copy")
        self.scratch = m.alloc_buffer(FAULTY, 0, name + "-sweep")

    def reset(self, m: Machine, src: Region, lo: int, hi: int) -> None:
        self.src = src
        self.cur = lo
        self.hi = hi
        m.truncate(self.buf1, 0)
        m.truncate(self.snap1, 0)
        m.truncate(self.buf2, 0)
        m.truncate(self.snap2, 0)
        self.r = self.base = self.w = 0
        self.n_snap = self.snap_head = self.cnt1 = 0
        self.swept = False

    def regions(self) -> list[Region]:
        return [self.buf1, self.snap1, self.buf2, self.snap2, self.scratch]

    def rest_empty(self) -> bool:
        """Nothing left on this side outside the safe buffer."""
        return self.r >= len(self.buf1.v) and self.cur >= self.hi

    def exhausted(self) -> bool:
        return not self.buf2.v and self.rest_empty()


class Workspace:
    """Buffers shared by every merge of one sort, allocated once."""

    def __init__(self, m: Machine, params: MergeParams):
        s = params.s_eff
        self.m = m
        self.params = params
        self.sx = _Side(m, "X", s)
        self.sy = _Side(m, "Y", s)
        self.z1 = m.alloc_buffer(FAULTY, 0, "Z1")
        self.z2 = m.alloc_buffer(SAFE, s // 2, "Z2")
        self.stage = m.alloc_buffer(SAFE, 1, "incoming")
        self.Z = m.alloc_buffer(FAULTY, 0, "Z")
        self.F = m.alloc_buffer(FAULTY, 0, "F")
        # bucket stage: P, segment minima, and 2 words per segment (length, min position)
        self.P = m.alloc_buffer(SAFE, s, "P")
        self.segkeys = m.alloc(SAFE, s, "segment-min")
        self.segmeta = m.alloc(SAFE, 2 * s, "segment-meta")
        self.buckets = [m.alloc_buffer(FAULTY, 0, f"B{i}") for i in range(s + 1)]
        self.regs = m.alloc(SAFE, 16, "registers")
        self.block = m.alloc_buffer(SAFE, s, "base-block")
        self.max_overflow = 0

    def clear(self) -> None:
        """Empty the faulty scratch buffers so every merge starts from the same state."""
        m = self.m
        for r in (self.sx.buf1, self.sx.snap1, self.sx.scratch, self.sy.buf1, self.sy.snap1,
                  self.sy.scratch, self.z1, self.Z, self.F, *self.buckets):
            m.truncate(r, 0)

    def free(self, keep: tuple[Region, ...] = ()) -> None:
        for r in (*self.sx.regions(), *self.sy.regions(), self.z1, self.z2, self.stage,
                  self.Z, self.F, self.P, self.segkeys, self.segmeta, self.regs, self.block,
                  *self.buckets):
            if r not in keep:
                self.m.free(r)


# ---------------------------------------------------------------------------
# purifying merge


class PurifyState:
    """State of one purifying merge; also what adversaries see at checkpoints."""

    def __init__(self, m: Machine, params: MergeParams, ws: Workspace,
                 X: Region, xlo: int, xhi: int, Y: Region, ylo: int, yhi: int):
        self.m = m
        self.params = params
        self.ws = ws
        self.S = params.s_eff
        self.delta = params.delta
        self.sx = ws.sx
        self.sy = ws.sy
        self.sx.reset(m, X, xlo, xhi)
        self.sy.reset(m, Y, ylo, yhi)
        self.z1 = ws.z1
        self.z2 = ws.z2
        m.truncate(self.z1, 0)
        m.truncate(self.z2, 0)
        m.truncate(ws.Z, 0)
        m.truncate(ws.F, 0)
        self.Z = ws.Z
        self.F = ws.F
        self.total = (xhi - xlo) + (yhi - ylo)
        self.z_last: int | None = None
        self.z_round: int | None = None
        self.first_round = True
        self.exempt = False
        self.restarts = 0

    def side(self, name: str) -> _Side:
        return self.sx if name == "X" else self.sy

    # -- round bookkeeping --------------------------------------------------

    def _fill(self, sd: _Side) -> None:
        """Compact buf1, top it up from the input, and take round-start copies."""
        m = self.m
        b1 = sd.buf1
        if sd.r:
            live = len(b1.v) - sd.r
            m.copy_range(b1, sd.r, b1, 0, live)
            m.truncate(b1, live)
            sd.r = 0
        k = min(self.params.x1_cap - len(b1.v), sd.hi - sd.cur)
        if k > 0:
            m.append_range(sd.src, sd.cur, k, b1)
            sd.cur += k
        sd.base = 0
        m.truncate(sd.snap1, 0)
        m.append_range(b1, 0, len(b1.v), sd.snap1)
        sd.w = 0
        m.truncate(sd.snap2, 0)
        m.append_range(sd.buf2, 0, len(sd.buf2.v), sd.snap2)
        sd.n_snap = len(sd.buf2.v)
        sd.snap_head = 0
        sd.cnt1 = 0

    def _rollback(self, sd: _Side) -> None:
        """Put the side back to its round-start content minus keys sent to F."""
        m = self.m
        s1 = sd.snap1
        e_read = sd.r - sd.base
        b1 = sd.buf1
        m.truncate(b1, 0)
        m.append_range(s1, 0, sd.w, b1)
        if sd.swept:
            # the unread part was swept; its survivors sit in the scratch stack
            m.append_range(sd.scratch, 0, len(sd.scratch.v), b1)
            sd.swept = False
        else:
            m.append_range(s1, e_read, len(s1.v) - e_read, b1)
        sd.r = 0
        m.truncate(sd.buf2, 0)
        m.append_range(sd.snap2, 0, len(sd.snap2.v), sd.buf2)

    def start_round(self) -> None:
        self.z_round = self.z_last
        self._fill(self.sx)
        self._fill(self.sy)

    def restart(self) -> None:
        self.m.restarts += 1
        self.restarts += 1
        self._rollback(self.sx)
        self._rollback(self.sy)
        m = self.m
        m.truncate(self.z1, 0)
        m.truncate(self.z2, 0)
        self.z_last = self.z_round
        self._fill(self.sx)
        self._fill(self.sy)

    def commit(self) -> None:
        z1 = self.z1
        self.m.append_range(z1, 0, len(z1.v), self.Z)
        self.m.truncate(z1, 0)
        self.first_round = False

    # -- one attempt at a round ------------------------------------------------

    def attempt(self) -> bool:
        m = self.m
        target = max(self.delta, 1)
        it = 0
        while True:
            k, finished = self._quiet_iterations(it, target)
            it += k
            if finished:
                break
            self.exempt = self.first_round and it == 0
            if not self._quiet_refill():
                m.checkpoint(Phase.ITERATION_START, self)
                if not self._refill(self.sx) or not self._refill(self.sy):
                    return False
            emitted = self._merge_step()
            it += 1
            if len(self.z1.v) >= target or emitted == 0:
                break
            if self.sx.exhausted() and self.sy.exhausted():
                break
        self.exempt = False
        m.checkpoint(Phase.SAFETY_CHECK_BEGIN, self)
        return safety_check(self) == OK

    def _quiet_iterations(self, it: int, target: int) -> tuple[int, bool]:
        """Run as many iterations as possible in one go, stopping before any
        iteration in which an adversary hook could fire, an inversion would be
        met, or a buffer would run dry early.  Returns the number of
        iterations done and whether the round's loop has finished."""
        m = self.m
        if Phase.ITERATION_START in m._cp_phases or not SHORTCUTS:
            return 0, False
        S = self.S
        h = S // 2
        room = m._next - m.step
        if room <= 1 + S + S + h:
            return 0, False
        sx, sy = self.sx, self.sy
        # survivors are compacted in the round-start copy when keys were dropped earlier
        gx = (sx.r - sx.base) != sx.w
        gy = (sy.r - sy.base) != sy.w
        z0 = len(self.z1.v)
        n0x, n0y = len(sx.buf2.v), len(sy.buf2.v)
        ax, ay = len(sx.buf1.v) - sx.r, len(sy.buf1.v) - sy.r
        # cheap look at the next load first: an inversion there rules out even one iteration
        for v2, v1, r, a in ((sx.buf2.v, sx.buf1.v, sx.r, ax), (sy.buf2.v, sy.buf1.v, sy.r, ay)):
            head = v2[-1:] + v1[r:r + min(a, S - len(v2))]
            if not all(map(lt, head, islice(head, 1, None))):
                return 0, False
        want = max(target - z0, 1)
        lim = min(-(-want // h) * h, room) + S
        xs = sx.buf2.v + sx.buf1.v[sx.r:sx.r + min(ax, lim)]
        ys = sy.buf2.v + sy.buf1.v[sy.r:sy.r + min(ay, lim)]
        # keep only the increasing prefix; loading past it needs the real checks
        for vs in (xs, ys):
            if not all(map(lt, vs, islice(vs, 1, None))):
                for q in range(len(vs) - 1):
                    if vs[q] >= vs[q + 1]:
                        del vs[q + 1:]
                        break
        nxs, nys = len(xs), len(ys)
        vals = xs + ys
        order = sorted(range(nxs + nys), key=vals.__getitem__)
        cx = list(accumulate(map(nxs.__gt__, order), initial=0))
        cy = list(map(sub, range(len(cx)), cx))
        k, finished, done, lx, ly, cmp, hooks = _iterate(
            cx, cy, 0, n0x, n0y, n0x + ax, n0y + ay, nxs, nys,
            sx.cur >= sx.hi, sy.cur >= sy.hi, S, target - z0, gx, gy, room)
        if k == 0:
            return 0, False
        rx, ry = lx - n0x, ly - n0y
        ex, ey = cx[done], cy[done]
        emitted = order[:done]
        z1 = self.z1
        xt = sx.buf2.t + sx.buf1.t[sx.r:sx.r + nxs - n0x]
        yt = sy.buf2.t + sy.buf1.t[sy.r:sy.r + nys - n0y]
        tags = xt + yt
        z1.v.extend(map(vals.__getitem__, emitted))
        z1.t.extend(map(tags.__getitem__, emitted))
        z1.wv += 1
        moved = 0
        for sd, n0, r_, e_, vs, ts, gap in ((sx, n0x, rx, ex, xs, xt, gx),
                                             (sy, n0y, ry, ey, ys, yt, gy)):
            b2 = sd.buf2
            b2.v[:] = vs[e_:n0 + r_]
            b2.t[:] = ts[e_:n0 + r_]
            b2.wv += 1
            if gap and r_:
                s1 = sd.snap1
                e0 = sd.r - sd.base
                s1.v[sd.w:sd.w + r_] = s1.v[e0:e0 + r_]
                s1.t[sd.w:sd.w + r_] = s1.t[e0:e0 + r_]
                s1.wv += 1
                moved += r_
            sd.r += r_
            sd.w += r_
            from_snap = min(e_, sd.n_snap)
            sd.snap_head += from_snap
            sd.n_snap -= from_snap
            sd.cnt1 += r_ - (e_ - from_snap)
        # Z2 holds what the last iteration emitted
        last = len(z1.v) - (done - (done - 1) // h * h if done else 0)
        z2 = self.z2
        z2.v[:] = z1.v[last:]
        z2.t[:] = z1.t[last:]
        z2.wv += 1
        if done:
            self.z_last = z1.v[-1]
        loads = rx + ry
        m.comparisons += cmp
        m.faulty_reads += loads + moved
        m.faulty_writes += done + moved
        m.safe_writes += loads + done
        m.safe_reads += loads + 3 * done
        m.step += hooks
        return k, finished

    def _quiet_refill(self) -> bool:
        """Checkpoint plus both refills in one go, when no adversary hook can
        fall inside them and both incoming runs continue X2/Y2 in order.
        Leaves everything untouched and returns False otherwise."""
        m = self.m
        if Phase.ITERATION_START in m._cp_phases or not SHORTCUTS:
            return False
        S = self.S
        sx, sy = self.sx, self.sy
        xv2, yv2 = sx.buf2.v, sy.buf2.v
        xv1, yv1 = sx.buf1.v, sy.buf1.v
        rx, ry = sx.r, sy.r
        kx = min(S - len(xv2), len(xv1) - rx)
        ky = min(S - len(yv2), len(yv1) - ry)
        if m.step + 1 + kx + ky + S // 2 >= m._next:
            return False
        if kx > 0:
            if sx.w != rx - sx.base:
                return False
            prev = xv2[-1] if xv2 else None
            for x in xv1[rx:rx + kx]:
                if prev is not None and x <= prev:
                    return False
                prev = x
        if ky > 0:
            if sy.w != ry - sy.base:
                return False
            prev = yv2[-1] if yv2 else None
            for x in yv1[ry:ry + ky]:
                if prev is not None and x <= prev:
                    return False
                prev = x
        # same effect and tallies as checkpoint + _refill on both sides
        m.step += 1
        cmp = 0
        k = 0
        if kx > 0:
            cmp += kx if xv2 else kx - 1
            xv2.extend(xv1[rx:rx + kx])
            sx.buf2.t.extend(sx.buf1.t[rx:rx + kx])
            sx.buf2.wv += 1
            sx.r += kx
            sx.w += kx
            sx.cnt1 += kx
            k += kx
        if ky > 0:
            cmp += ky if yv2 else ky - 1
            yv2.extend(yv1[ry:ry + ky])
            sy.buf2.t.extend(sy.buf1.t[ry:ry + ky])
            sy.buf2.wv += 1
            sy.r += ky
            sy.w += ky
            sy.cnt1 += ky
            k += ky
        m.comparisons += cmp
        m.faulty_reads += k
        m.step += k
        m.safe_writes += k
        m.safe_reads += k
        return True

    def _keep(self, sd: _Side, e: int, k: int) -> None:
        """Snapshot entries [e, e+k) survive; compact them down to ``w``."""
        if sd.w != e:
            self.m.copy_range(sd.snap1, e, sd.snap1, sd.w, k)
        sd.w += k
        sd.cnt1 += k

    def _refill(self, sd: _Side) -> bool:
        m = self.m
        S = self.S
        b2 = sd.buf2
        v2 = b2.v
        b1 = sd.buf1
        L = len(b1.v)
        stage = self.ws.stage
        while len(v2) < S and sd.r < L:
            k = min(S - len(v2), L - sd.r)
            start = len(v2)
            e0 = sd.r - sd.base
            m.append_range(b1, sd.r, k, b2)
            sd.r += k
            # common case: the incoming run is increasing and continues X2
            ok = True
            prev = v2[start - 1] if start else None
            for q in range(start, start + k):
                x = v2[q]
                if prev is not None and x <= prev:
                    ok = False
                    break
                prev = x
            if ok:
                m.comparisons += k if start else k - 1
                m.count_safe(reads=k)
                self._keep(sd, e0, k)
                continue
            incoming_v = v2[start:]
            incoming_t = b2.t[start:]
            m.truncate(b2, start)
            for q in range(k):
                m.truncate(stage, 0)
                stage.v.append(incoming_v[q])
                stage.t.append(incoming_t[q])
                m.count_safe(reads=1, writes=1)
                res = inversion_check(self, sd.name, stage, snap_pos=e0 + q)
                if res == ROUND_FAIL and not self.exempt:
                    # keys read after this one are still unread as far as the rollback is concerned
                    sd.r = sd.base + e0 + q + 1
                    return False
        return True

    def _merge_step(self) -> int:
        m = self.m
        sx, sy = self.sx, self.sy
        xb, yb = sx.buf2, sy.buf2
        xv, xt = xb.v, xb.t
        yv, yt = yb.v, yb.t
        need = self.S // 2
        nx, ny = len(xv), len(yv)
        x_done = sx.r >= len(sx.buf1.v) and sx.cur >= sx.hi
        y_done = sy.r >= len(sy.buf1.v) and sy.cur >= sy.hi
        i = j = 0
        cmp = 0
        # runs alternate between the sides; record them and copy afterwards
        runs = []
        taken = 0
        while taken < need:
            room = need - taken
            if i < nx and j < ny:
                if xv[i] <= yv[j]:
                    e = bisect_right(xv, yv[j], i, nx)
                    if e > i + room:
                        e = i + room
                    runs.append((0, i, e))
                    cmp += e - i
                    taken += e - i
                    i = e
                else:
                    e = bisect_left(yv, xv[i], j, ny)
                    if e > j + room:
                        e = j + room
                    runs.append((1, j, e))
                    cmp += e - j
                    taken += e - j
                    j = e
            elif i < nx and y_done:
                e = min(nx, i + room)
                runs.append((0, i, e))
                taken += e - i
                i = e
            elif j < ny and x_done:
                e = min(ny, j + room)
                runs.append((1, j, e))
                taken += e - j
                j = e
            else:
                break
        z2 = self.z2
        zv, zt = z2.v, z2.t
        if zv:
            del zv[:]
            del zt[:]
        z2.wv += 1
        for side, a, b in runs:
            if side:
                zv.extend(yv[a:b])
                zt.extend(yt[a:b])
            else:
                zv.extend(xv[a:b])
                zt.extend(xt[a:b])
        m.comparisons += cmp
        m.safe_reads += 2 * taken
        m.safe_writes += taken
        if i:
            self._consume(sx, i)
        if j:
            self._consume(sy, j)
        if taken:
            m.append_range(z2, 0, taken, self.z1)
            self.z_last = zv[-1]
        return taken

    @staticmethod
    def _consume(sd: _Side, used: int) -> None:
        b = sd.buf2
        del b.v[:used]
        del b.t[:used]
        b.wv += 1
        from_snap = min(used, sd.n_snap)
        sd.snap_head += from_snap
        sd.n_snap -= from_snap
        sd.cnt1 -= used - from_snap


def _steady_run(cx: list[int], cy: list[int], d0: int, h: int, lim_x: int, lim_y: int,
                emit_left: int, gx: bool, gy: bool, room: int) -> int:
    """How many steady iterations can be jumped from ``d0``; the run stops
    short of the one that would end the round."""
    j = -(-emit_left // h) - 1
    if j <= 0:
        return 0
    # loads stay inside the checked stream prefixes
    px = bisect_right(cx, lim_x) - 1
    py = bisect_right(cy, lim_y) - 1
    j = min(j, (px - d0) // h + 1, (py - d0) // h + 1)
    if j <= 0:
        return 0

    def cost(q: int) -> int:
        d_last = d0 + (q - 1) * h
        c = q * (1 + 2 * h)
        if gx:
            c += 2 * (cx[d_last] - cx[d0 - h])
        if gy:
            c += 2 * (cy[d_last] - cy[d0 - h])
        return c

    if cost(j) < room:
        return j
    lo, hi = 0, j
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if cost(mid) < room:
            lo = mid
        else:
            hi = mid - 1
    return lo


def _iterate(cx: list[int], cy: list[int], done: int, lx: int, ly: int, cap_x: int, cap_y: int,
             nxs: int, nys: int, x_src_done: bool, y_src_done: bool, S: int, emit_target: int,
             gx: bool, gy: bool, room: int) -> tuple[int, bool, int, int, int, int, int]:
    """Count what a round's iterations do when no inversion is met.

    Without inversions the iterations emit the plain merge of the streams
    X2+X1 and Y2+Y1, S/2 keys at a time, so outcome and exact access and
    comparison counts follow from that merge.  Stream positions are
    absolute: ``cx[p]``/``cy[p]`` count the X/Y keys among the first ``p``
    merged ones, ``done`` keys are already emitted, X2 holds stream keys
    ``[cx[done], lx)``, keys below ``cap_x`` can be loaded this round and
    only the first ``nxs`` are known to be in order.  The run stops before
    an iteration that would bring the hook count to ``room``, load an
    unchecked key, or stall the real merge.

    Returns (iterations, finished, done, lx, ly, comparisons, hooks).
    """
    h = S // 2
    start = done
    lim_x = min(nxs, cap_x - 1) - S
    lim_y = min(nys, cap_y - 1) - S
    hooks = cmp = k = 0
    finished = steady = False
    while True:
        if steady:
            # the last iteration topped both buffers up to S and emitted S/2;
            # until a buffer nears the end of its stream every further
            # iteration does the same, so jump over a run of them at once
            steady = False
            j = _steady_run(cx, cy, done, h, lim_x, lim_y, emit_target - (done - start),
                            gx, gy, room - hooks)
            if j:
                d_last = done + (j - 1) * h
                sum_x = cx[d_last] - cx[done - h]
                sum_y = cy[d_last] - cy[done - h]
                hooks += j * (1 + 2 * h) + (2 * sum_x if gx else 0) + (2 * sum_y if gy else 0)
                cmp += 2 * h * j
                lx, ly = cx[d_last] + S, cy[d_last] + S
                done += j * h
                k += j
        ux, uy = cx[done], cy[done]
        nx = ux + S
        if nx > cap_x:
            nx = cap_x
        ny = uy + S
        if ny > cap_y:
            ny = cap_y
        if nx > nxs or ny > nys:
            break
        kx, ky = nx - lx, ny - ly
        taken = nx - ux + ny - uy
        if taken > h:
            taken = h
        cost = 1 + kx + ky + taken
        if gx:
            cost += 2 * kx
        if gy:
            cost += 2 * ky
        if hooks + cost >= room:
            break
        b = done + taken
        px = bisect_left(cx, nx, done, b + 1)
        py = bisect_left(cy, ny, done, b + 1)
        x_done = nx == cap_x and x_src_done
        y_done = ny == cap_y and y_src_done
        # a buffer emptied mid-iteration stalls the real merge unless its side is done
        if (px < b and not x_done) or (py < b and not y_done):
            break
        if kx > 0:
            cmp += kx if lx > ux else kx - 1
        if ky > 0:
            cmp += ky if ly > uy else ky - 1
        cmp += min(px, py, b) - done
        hooks += cost
        steady = taken == h and nx == ux + S and ny == uy + S
        lx, ly = nx, ny
        done = b
        k += 1
        if done - start >= emit_target or taken == 0:
            finished = True
            break
        if x_done and y_done and cx[done] == nx and cy[done] == ny:
            finished = True
            break
    return k, finished, done, lx, ly, cmp, hooks


def inversion_check(state: PurifyState, side: str, incoming: Region, idx: int = 0,
                    snap_pos: int | None = None) -> str:
    """Admit the key ``incoming[idx]`` (a safe cell) into X2/Y2.

    If it does not exceed the last key in the buffer, both keys move to F.
    ``snap_pos`` is the key's position in the round-start copy of X1/Y1 so
    that a survivor can be compacted there.
    """
    m = state.m
    sd = state.side(side)
    b2 = sd.buf2
    x = incoming.v[idx]
    if b2.v:
        m.comparisons += 1
        m.count_safe(reads=1)
        if x <= b2.v[-1]:
            F = state.F
            m.append_key(b2, len(b2.v) - 1, F)
            m.append_key(incoming, idx, F)
            m.truncate(b2, len(b2.v) - 1)
            if sd.cnt1 > 0:
                sd.cnt1 -= 1
                sd.w -= 1
            else:
                pos = sd.snap_head + sd.n_snap - 1
                del sd.snap2.v[pos]
                del sd.snap2.t[pos]
                sd.snap2.wv += 1
                sd.n_snap -= 1
            return REMOVED_OK if b2.v else ROUND_FAIL
    b2.v.append(x)
    b2.t.append(incoming.t[idx])
    b2.wv += 1
    m.count_safe(reads=1, writes=1)
    if snap_pos is not None:
        state._keep(sd, snap_pos, 1)
    else:
        sd.cnt1 += 1
    return OK


def safety_check(state: PurifyState) -> str:
    """Count keys not above ``z`` left in X', Y'; too many means a rollback."""
    m = state.m
    sx, sy = state.sx, state.sy
    if sx.exhausted() and sy.exhausted():
        return OK
    z = state.z_last
    if z is None:
        return OK
    count = 0
    for sd in (sx, sy):
        v2 = sd.buf2.v
        m.comparisons += len(v2)
        m.count_safe(reads=len(v2))
        count += bisect_right(v2, z)
        L = len(sd.buf1.v)
        rest = m.read_values(sd.buf1, sd.r, L - sd.r)
        m.comparisons += len(rest)
        count += sum(1 for x in rest if x <= z)
    if 2 * count < state.S:
        return OK
    removed = _sweep(state, sx) + _sweep(state, sy)
    if removed == 0:
        # only keys equal to z sit at the head of X2/Y2; sweeping cannot help
        return OK
    return ROUND_FAIL


def _sweep(state: PurifyState, sd: _Side) -> int:
    """Remove adjacent inversions from X2 followed by the rest of X1.

    Survivors from X1 are stacked in a faulty scratch buffer (the stack top is
    re-read from there); X2 is strictly increasing, so its survivors are
    always a prefix whose length ``keep2`` is the only extra safe word.
    """
    m = state.m
    F = state.F
    b2 = sd.buf2
    v2 = b2.v
    n2 = len(v2)
    b1 = sd.buf1
    L = len(b1.v)
    scratch = sd.scratch
    m.truncate(scratch, 0)
    keep2 = n2
    removed = 0
    m.comparisons += max(0, n2 - 1)
    rest = m.read_values(b1, sd.r, L - sd.r)
    for q, x in enumerate(rest):
        if scratch.v:
            top = m.read_values(scratch, len(scratch.v) - 1, 1)[0]
            m.comparisons += 1
            if x <= top:
                m.append_range(scratch, len(scratch.v) - 1, 1, F)
                m.truncate(scratch, len(scratch.v) - 1)
                m.append_key(b1, sd.r + q, F)
                removed += 2
                continue
        elif keep2:
            m.comparisons += 1
            if x <= v2[keep2 - 1]:
                m.append_key(b2, keep2 - 1, F)
                m.append_key(b1, sd.r + q, F)
                keep2 -= 1
                removed += 2
                continue
        m.append_key(b1, sd.r + q, scratch)
    if removed:
        # X2 survivors are its first keep2 entries: snapshot-origin ones first
        snap_keep = min(keep2, sd.n_snap)
        drop = sd.n_snap - snap_keep
        if drop:
            pos = sd.snap_head + snap_keep
            del sd.snap2.v[pos:pos + drop]
            del sd.snap2.t[pos:pos + drop]
            sd.snap2.wv += 1
        sd.n_snap = snap_keep
        from_x1 = keep2 - snap_keep
        sd.w = sd.w - sd.cnt1 + from_x1
        sd.cnt1 = from_x1
        sd.swept = True
    return removed


def _plain_merge(m: Machine, X: Region, xlo: int, xhi: int, Y: Region, ylo: int, yhi: int,
                 out: Region) -> None:
    """Merge for delta = 0, where no word can be corrupted: one pass, no buffers."""
    nx, ny = xhi - xlo, yhi - ylo
    xv = m.read_values(X, xlo, nx)
    yv = m.read_values(Y, ylo, ny)
    if nx and ny:
        if xv[-1] <= yv[-1]:
            m.comparisons += nx + bisect_right(yv, xv[-1])
        else:
            m.comparisons += ny + bisect_left(xv, yv[-1])
    vals = xv + yv
    tags = X.t[xlo:xhi] + Y.t[ylo:yhi]
    order = sorted(range(nx + ny), key=vals.__getitem__)
    out.v.extend([vals[o] for o in order])
    out.t.extend([tags[o] for o in order])
    out.wv += 1
    m.faulty_writes += nx + ny
    m.step += nx + ny


def _purify(m: Machine, ws: Workspace, X: Region, xlo: int, xhi: int,
            Y: Region, ylo: int, yhi: int, force_rounds: bool = False) -> PurifyState:
    params = ws.params
    st = PurifyState(m, params, ws, X, xlo, xhi, Y, ylo, yhi)
    if params.delta == 0 and not force_rounds:
        _plain_merge(m, X, xlo, xhi, Y, ylo, yhi, st.Z)
        st.sx.cur, st.sy.cur = xhi, yhi
        return st
    while True:
        st.start_round()
        m.rounds += 1
        m.checkpoint(Phase.ROUND_START, st)
        while not st.attempt():
            st.restart()
            m.rounds += 1
            m.checkpoint(Phase.ROUND_START, st)
        st.commit()
        if st.sx.exhausted() and st.sy.exhausted():
            break
    return st


def _faithfully_increasing(region: Region, lo: int, hi: int) -> bool:
    prev = None
    for v, t in zip(region.v[lo:hi], region.t[lo:hi]):
        if t & 1:
            continue
        if prev is not None and v <= prev:
            return False
        prev = v
    return True


def _view(region: Region, lo: int | None, hi: int | None) -> tuple[int, int]:
    lo = 0 if lo is None else lo
    hi = len(region.v) if hi is None else hi
    if not 0 <= lo <= hi <= len(region.v):
        raise ContractViolation(f"bad range [{lo}, {hi}) for {region!r}")
    return lo, hi


def purifying_merge(m: Machine, X: Region, Y: Region, params: MergeParams | None = None,
                    *, force_rounds: bool = False) -> tuple[Region, Region]:
    """Returns ``(Z, F)``: Z faithfully ordered, F the keys dropped on the way.

    ``force_rounds`` runs the round machinery even when delta is 0.
    """
    params = params or MergeParams.of(m)
    for R in (X, Y):
        if not _faithfully_increasing(R, 0, len(R.v)):
            raise ContractViolation(f"{R!r} is not faithfully ordered")
    ws = Workspace(m, params)
    try:
        st = _purify(m, ws, X, 0, len(X.v), Y, 0, len(Y.v), force_rounds)
    except BaseException:
        ws.free()
        raise
    ws.free(keep=(st.Z, st.F))
    return st.Z, st.F


# ---------------------------------------------------------------------------
# bucket merge


class BucketState:
    """What adversaries see at the start of a bucket round."""

    __slots__ = ("X", "cursor", "hi", "pv", "round")

    def __init__(self, X: Region, cursor: int, hi: int):
        self.X = X
        self.cursor = cursor
        self.hi = hi
        self.pv: list[int] = []
        self.round = 0


def _bucket_merge(m: Machine, ws: Workspace, X: Region, xlo: int, xhi: int,
                  Y: Region, ylo: int, yhi: int, out: Region, opos: int) -> int:
    """Merge faithfully ordered X[xlo:xhi] with arbitrary Y[ylo:yhi] into
    ``out`` from ``opos`` on.  X is used as scratch.  Returns the end position."""
    S = ws.params.s_eff
    delta = ws.params.delta
    n2 = yhi - ylo
    c = xlo
    if n2:
        g = -(-n2 // S)
        nseg = -(-n2 // g)
        seg_len = [min(g, n2 - j * g) for j in range(nseg)]
        minpos = [0] * nseg
        segkeys = ws.segkeys
        heap: list[tuple[int, int]] = []
        hcost = _clog2(nseg) + 1

        def scan(j: int) -> None:
            start = ylo + j * g
            vals = m.read_values(Y, start, seg_len[j])
            pos = min(range(len(vals)), key=vals.__getitem__)
            m.comparisons += len(vals) - 1 + hcost
            m.copy_key(Y, start + pos, segkeys, j)
            minpos[j] = pos
            heapq.heappush(heap, (segkeys.v[j], j))

        for j in range(nseg):
            scan(j)
        m.count_safe(reads=2 * nseg, writes=2 * nseg)
        P = ws.P
        buckets = ws.buckets
        bstate = BucketState(X, c, xhi)
        nlog = max(1, _clog2(S))
        remaining = n2
        rnd = 0
        while remaining:
            # extract the next smallest keys of Y into P
            m.truncate(P, 0)
            mm = min(S, remaining)
            for _ in range(mm):
                _, j = heapq.heappop(heap)
                m.comparisons += hcost
                m.append_key(segkeys, j, P)
                start = ylo + j * g
                pos = minpos[j]
                tail = seg_len[j] - pos - 1
                if tail:
                    m.copy_range(Y, start + pos + 1, Y, start + pos, tail)
                seg_len[j] -= 1
                if seg_len[j]:
                    scan(j)
            remaining -= mm
            pv = P.v
            if any(pv[q] > pv[q + 1] for q in range(mm - 1)):
                order = sorted(range(mm), key=pv.__getitem__)
                P.v = [pv[q] for q in order]
                P.t = [P.t[q] for q in order]
                pv = P.v
                m.comparisons += mm * max(1, _clog2(mm))
                m.count_safe(reads=mm, writes=mm)
            else:
                m.comparisons += mm - 1
            bstate.cursor = c
            bstate.pv = pv
            bstate.round = rnd
            m.checkpoint(Phase.BUCKET_ROUND_START, bstate)
            rnd += 1
            for b in range(mm + 1):
                m.truncate(buckets[b], 0)
            last = 0
            n_top = 0
            stop = False
            cmp = 0
            bsearch = 0
            while c < xhi and not stop:
                q = min(_SCAN_CHUNK, xhi - c)
                vals = m.read_values(X, c, q)
                # in a sorted chunk every key after the first of a bucket stays in it
                ordered = SHORTCUTS and all(map(le, vals, islice(vals, 1, None)))
                run_start = c
                run_b = -1
                used = q
                e = 0
                while e < q:
                    x = vals[e]
                    k = last
                    # current bucket k covers [pv[k-1], pv[k])
                    if k < mm and x >= pv[k]:
                        cmp += 1 + (k > 0)
                        b = -1
                        for k2 in range(k + 1, min(mm, k + nlog) + 1):
                            if k2 == mm:
                                b = mm
                                break
                            cmp += 1
                            if x < pv[k2]:
                                b = k2
                                break
                    elif k > 0 and x < pv[k - 1]:
                        cmp += 1 + (k < mm)
                        b = -1
                        for k2 in range(k - 1, max(0, k - nlog) - 1, -1):
                            if k2 == 0:
                                b = 0
                                break
                            cmp += 1
                            if x >= pv[k2 - 1]:
                                b = k2
                                break
                    else:
                        cmp += (k > 0) + (k < mm)
                        b = k
                    if b < 0:
                        b = bisect_right(pv, x)
                        bsearch += 1
                        cmp += _clog2(mm + 1)
                    last = b
                    if ordered:
                        f = bisect_left(vals, pv[b], e + 1, q) if b < mm else q
                    else:
                        f = e + 1
                    if b == mm:
                        room = delta + 1 - n_top
                        if f - e >= room:
                            f = e + room
                            stop = True
                        n_top += f - e
                    cmp += (f - e - 1) * ((b > 0) + (b < mm))
                    if b != run_b:
                        if run_b >= 0:
                            m.append_range(X, run_start, c + e - run_start, buckets[run_b])
                        run_start = c + e
                        run_b = b
                    e = f
                    if stop:
                        used = f
                        break
                if run_b >= 0:
                    m.append_range(X, run_start, c + used - run_start, buckets[run_b])
                c += used
            m.comparisons += cmp
            m.binary_searches += bsearch
            if n_top > ws.max_overflow:
                ws.max_overflow = n_top
            for b in range(mm):
                bk = buckets[b]
                if bk.v:
                    m.copy_range(bk, 0, out, opos, len(bk.v))
                    opos += len(bk.v)
                m.copy_key(P, b, out, opos)
                opos += 1
            top = buckets[mm]
            if top.v:
                c -= len(top.v)
                m.copy_range(top, 0, X, c, len(top.v))
            m.truncate(P, 0)
    if xhi > c:
        m.copy_range(X, c, out, opos, xhi - c)
        opos += xhi - c
    return opos


def bucket_merge(m: Machine, X: Region, Y: Region, s_eff: int | None = None,
                 delta: int | None = None) -> Region:
    """Merge faithfully ordered X with arbitrary Y; X is overwritten as scratch."""
    params = MergeParams(s_eff or m.s_eff, m.delta if delta is None else delta)
    if not _faithfully_increasing(X, 0, len(X.v)):
        raise ContractViolation(f"{X!r} is not faithfully ordered")
    ws = Workspace(m, params)
    Z = m.alloc(FAULTY, len(X.v) + len(Y.v), "Z")
    try:
        _bucket_merge(m, ws, X, 0, len(X.v), Y, 0, len(Y.v), Z, 0)
    finally:
        ws.free()
    return Z


# ---------------------------------------------------------------------------
# merge and sort


def _quiet_merge(m: Machine, ws: Workspace, X: Region, xlo: int, xhi: int,
                 Y: Region, ylo: int, yhi: int, out: Region, opos: int,
                 probe: MergeProbe | None) -> int | None:
    """Whole s_merge in one go when no adversary hook can fire during it and
    the merged input is strictly increasing.

    Then no round fails, F stays empty and every round runs the steady
    pattern, so the result is the plain merge and the counters follow from
    sizes alone.  Returns None, touching nothing, if that does not apply.
    """
    if not SHORTCUTS or not m._cp_phases.isdisjoint(_MERGE_PHASES):
        return None
    nx, ny = xhi - xlo, yhi - ylo
    N = nx + ny
    room = m._next - m.step
    if room <= 2 * N + 4:
        return None
    xv = X.v[xlo:xhi]
    yv = Y.v[ylo:yhi]
    if not (all(map(lt, xv, islice(xv, 1, None))) and all(map(lt, yv, islice(yv, 1, None)))):
        return None
    vals = xv + yv
    order = sorted(range(N), key=vals.__getitem__)
    merged = list(map(vals.__getitem__, order))
    cx = list(accumulate(map(nx.__gt__, order), initial=0))
    cy = list(map(sub, range(N + 1), cx))
    params = ws.params
    S = params.s_eff
    x1_cap = params.x1_cap
    target = max(params.delta, 1)
    # per side: [X2 size, X1 length, X1 read pointer, keys taken from the input]
    sides = [[0, 0, 0, 0, nx], [0, 0, 0, 0, ny]]
    fr = fw = sr = sw = cmp = hooks = rounds = 0
    G = 0
    while True:
        for sd in sides:
            n2, b1, r, used, tot = sd
            if r:
                live = b1 - r
                fr += live
                fw += live
                hooks += 2 * live
                b1 = live
            k = min(x1_cap - b1, tot - used)
            if k > 0:
                fr += k
                fw += k
                hooks += 2 * k
                b1 += k
                used += k
            fr += b1
            fw += b1
            hooks += 2 * b1
            sr += n2
            sw += n2
            sd[:4] = n2, b1, 0, used
        rounds += 1
        hooks += 1
        (n2x, b1x, _, usedx, _), (n2y, b1y, _, usedy, _) = sides
        lx0, ly0 = cx[G] + n2x, cy[G] + n2y
        k, finished, done, lx, ly, c, hk = _iterate(
            cx, cy, G, lx0, ly0, lx0 + b1x, ly0 + b1y, nx, ny,
            usedx >= nx, usedy >= ny, S, target, False, False, room - hooks)
        if not finished:
            return None
        T = done - G
        loads = (lx - lx0) + (ly - ly0)
        cmp += c
        hooks += hk + 1
        fr += loads
        fw += T
        sw += loads + T
        sr += loads + 3 * T
        sides[0][:3] = lx - cx[done], b1x, lx - lx0
        sides[1][:3] = ly - cy[done], b1y, ly - ly0
        G = done
        both_done = all(sd[0] == 0 and sd[2] >= sd[1] and sd[3] >= sd[4] for sd in sides)
        if not both_done and G > 0:
            # only keys equal to z can still be <= z; fewer than S/2 of them pass the check
            if 2 * (bisect_right(merged, merged[G - 1], G) - G) >= S:
                return None
            for n2, b1, r, _, _ in sides:
                cmp += n2 + b1 - r
                sr += n2
                fr += b1 - r
                hooks += b1 - r
        fr += T
        fw += T
        hooks += 2 * T
        if both_done:
            break
    fr += N
    fw += N
    hooks += 2 * N
    if hooks >= room:
        return None
    tags = X.t[xlo:xhi] + Y.t[ylo:yhi]
    mtags = list(map(tags.__getitem__, order))
    out.v[opos:opos + N] = merged
    out.t[opos:opos + N] = mtags
    out.wv += 1
    m.comparisons += cmp
    m.faulty_reads += fr
    m.faulty_writes += fw
    m.safe_reads += sr
    m.safe_writes += sw
    m.rounds += rounds
    m.step += hooks
    if probe is not None:
        Z, F = ws.Z, ws.F
        Z.v[:] = merged
        Z.t[:] = mtags
        Z.wv += 1
        m.truncate(F, 0)
        probe.on_purify(m, [(X, xlo, xhi), (Y, ylo, yhi)], Z, F, 0)
        ws.max_overflow = 0
        probe.on_bucket(m, 0)
    return opos + N


def _s_merge(m: Machine, ws: Workspace, X: Region, xlo: int, xhi: int,
             Y: Region, ylo: int, yhi: int, out: Region, opos: int,
             probe: MergeProbe | None = None) -> int:
    if ws.params.delta == 0:
        # nothing can be corrupted, so the merge is exact and F stays empty
        Z = ws.Z
        m.truncate(Z, 0)
        _plain_merge(m, X, xlo, xhi, Y, ylo, yhi, Z)
        if probe is not None:
            m.truncate(ws.F, 0)
            probe.on_purify(m, [(X, xlo, xhi), (Y, ylo, yhi)], Z, ws.F, 0)
        m.copy_range(Z, 0, out, opos, len(Z.v))
        return opos + len(Z.v)
    end = _quiet_merge(m, ws, X, xlo, xhi, Y, ylo, yhi, out, opos, probe)
    if end is None:
        st = _purify(m, ws, X, xlo, xhi, Y, ylo, yhi)
        if probe is not None:
            probe.on_purify(m, [(X, xlo, xhi), (Y, ylo, yhi)], st.Z, st.F, st.restarts)
        ws.max_overflow = 0
        end = _bucket_merge(m, ws, st.Z, 0, len(st.Z.v), st.F, 0, len(st.F.v), out, opos)
        if probe is not None:
            probe.on_bucket(m, ws.max_overflow)
    ws.clear()
    return end


def s_merge(m: Machine, X: Region, Y: Region, s_eff: int | None = None,
            delta: int | None = None, probe: MergeProbe | None = None) -> Region:
    params = MergeParams(s_eff or m.s_eff, m.delta if delta is None else delta)
    for R in (X, Y):
        if not _faithfully_increasing(R, 0, len(R.v)):
            raise ContractViolation(f"{R!r} is not faithfully ordered")
    ws = Workspace(m, params)
    Z = m.alloc(FAULTY, len(X.v) + len(Y.v), "merged")
    try:
        _s_merge(m, ws, X, 0, len(X.v), Y, 0, len(Y.v), Z, 0, probe)
    finally:
        ws.free()
    return Z


def merge_ranges(m: Machine, ws: Workspace, X: Region, xlo: int, xhi: int,
                 Y: Region, ylo: int, yhi: int, probe: MergeProbe | None = None) -> Region:
    """s_merge of two ranges into a fresh region, reusing ``ws``."""
    Z = m.alloc(FAULTY, (xhi - xlo) + (yhi - ylo), "merged")
    _s_merge(m, ws, X, xlo, xhi, Y, ylo, yhi, Z, 0, probe)
    return Z


def _sort_blocks(m: Machine, ws: Workspace, A: Region) -> int:
    """Sort each run of S_eff keys inside safe memory; returns the run length."""
    b = ws.params.s_eff
    n = len(A.v)
    blk = ws.block
    for lo in range(0, n, b):
        k = min(b, n - lo)
        m.truncate(blk, 0)
        m.append_range(A, lo, k, blk)
        # binary insertion sort within the safe block
        vals = blk.v
        order = sorted(range(k), key=vals.__getitem__)
        m.comparisons += sum(i.bit_length() for i in range(1, k))
        m.count_safe(reads=k * max(1, _clog2(k)), writes=k)
        blk.v = [vals[o] for o in order]
        blk.t = [blk.t[o] for o in order]
        blk.wv += 1
        m.copy_range(blk, 0, A, lo, k)
    m.truncate(blk, 0)
    return b


def sort_into(m: Machine, ws: Workspace, X: Region, probe: MergeProbe | None = None) -> Region:
    """Bottom-up mergesort of all of X; X itself serves as one of the two arrays."""
    n = len(X.v)
    if n <= 1:
        return X
    A = X
    width = _sort_blocks(m, ws, A)
    if width >= n:
        return A
    B = m.alloc(FAULTY, n, "sort-buffer")
    while width < n:
        m.checkpoint(Phase.SORT_PASS_START)
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            if mid >= hi:
                m.copy_range(A, lo, B, lo, hi - lo)
            else:
                _s_merge(m, ws, A, lo, mid, A, mid, hi, B, lo, probe)
        A, B = B, A
        width *= 2
    m.free(B)
    return A


def s_sort(m: Machine, X: Region, s_eff: int | None = None, delta: int | None = None,
           probe: MergeProbe | None = None) -> Region:
    """Faithfully sort X; X is overwritten and may be the returned region."""
    params = MergeParams(s_eff or m.s_eff, m.delta if delta is None else delta)
    ws = Workspace(m, params)
    try:
        return sort_into(m, ws, X, probe)
    finally:
        ws.free()


def sort_values(m: Machine, values: list[int], probe: MergeProbe | None = None) -> Region:
    """Load ``values`` as fresh keys and sort them."""
    return s_sort(m, m.load_keys(values), probe=probe)


__all__ = [
    "OK", "REMOVED_OK", "ROUND_FAIL", "ContractViolation", "MergeParams", "PurifyState",
    "Workspace", "BucketState", "purifying_merge", "bucket_merge", "s_merge", "s_sort",
    "sort_into", "merge_ranges", "inversion_check", "safety_check", "sort_values",
]

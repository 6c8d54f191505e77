"""Replicated structural words that survive up to delta corruptions."""

from __future__ import annotations

from .fram import FAULTY, SAFE, FramError, Machine, Region


class ReliabilityError(FramError):
    """No strict majority among the replicas: more than delta of them were hit."""


class ReliableCell:
    """A value stored as ``2*delta + 1`` META replicas in faulty memory."""

    __slots__ = ("machine", "delta", "region")

    def __init__(self, machine: Machine, value: int = 0, label: str = "reliable"):
        self.machine = machine
        self.delta = machine.delta
        self.region: Region = machine.alloc(FAULTY, 2 * self.delta + 1, label)
        if value:
            write_reliable(self, value)

    def free(self) -> None:
        self.machine.free(self.region)


def write_reliable(cell: ReliableCell, value: int) -> None:
    cell.machine.fill_meta(cell.region, value)


def majority(values: list[int]) -> int:
    """Boyer-Moore vote plus a confirming count; raises if no strict majority exists."""
    cand = None
    count = 0
    for x in values:
        if count == 0:
            cand = x
            count = 1
        elif x == cand:
            count += 1
        else:
            count -= 1
    if cand is None or 2 * values.count(cand) <= len(values):
        raise ReliabilityError("replicas hold no strict majority")
    return cand


def read_reliable(cell: ReliableCell) -> int:
    m = cell.machine
    # candidate and counter live in two safe words for the duration of the scan
    regs = m.alloc(SAFE, 2, "vote")
    try:
        values = m.read_values(cell.region, 0, len(cell.region.v))
        m.count_safe(reads=2 * len(values), writes=2 * len(values))
        return majority(values)
    finally:
        m.free(regs)

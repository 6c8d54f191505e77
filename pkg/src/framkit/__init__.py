"""Resilient sorting and priority queues on a simulated faulty RAM."""

from .fram import Machine, Phase, Region, RunMetrics, effective_safe_size
from .resilient_pq import EmptyQueue, PQParams, ResilientPQ, pq_from_keys, pq_new
from .resilient_sort import bucket_merge, purifying_merge, s_merge, s_sort, sort_values
from .reliable import ReliableCell, read_reliable, write_reliable

__version__ = "0.1.0"

__all__ = [
    "Machine", "Phase", "Region", "RunMetrics", "effective_safe_size",
    "EmptyQueue", "PQParams", "ResilientPQ", "pq_from_keys", "pq_new",
    "bucket_merge", "purifying_merge", "s_merge", "s_sort", "sort_values",
    "ReliableCell", "read_reliable", "write_reliable",
]

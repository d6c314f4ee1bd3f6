"""Desk-scale models of KV-cache memory management for LLM serving.

Three allocation strategies over a mock GPU virtual-memory layer, driven by
a deterministic trace simulator: contiguous virtual reservation with
on-demand physical page-group mapping, a paged block-table allocator, and
static max-length reservation.
"""

from .geometry import (
    ModelGeometry,
    PageGroupSize,
    allocation_bandwidth,
    block_size_tokens,
    per_request_buffer_bytes,
    per_token_kv_bytes,
    prefill_page_groups,
    reservation_plan,
    sliced_block_size_tokens,
)
from .manager import KVCacheManager, ManagerConfig
from .simulator import IterationModel, SimMetrics, max_batch_sweep, measure_alloc_rate, run
from .trace import SimTrace, TraceRecord, generate_trace
from .vmm import LatencyModel, VmmDevice

__all__ = [
    "ModelGeometry",
    "PageGroupSize",
    "allocation_bandwidth",
    "block_size_tokens",
    "per_request_buffer_bytes",
    "per_token_kv_bytes",
    "prefill_page_groups",
    "reservation_plan",
    "sliced_block_size_tokens",
    "KVCacheManager",
    "ManagerConfig",
    "IterationModel",
    "SimMetrics",
    "max_batch_sweep",
    "measure_alloc_rate",
    "run",
    "SimTrace",
    "TraceRecord",
    "generate_trace",
    "LatencyModel",
    "VmmDevice",
]

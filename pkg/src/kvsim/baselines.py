"""Comparison allocators: static max-length reservation and a block-table
based paged allocator with its CPU-side table-preparation cost.

Both are modeled logically (counts and free lists, no tensors). The paged
allocator's per-iteration CPU cost captures that its lookup table is a dense
2D array padded to the longest request, so preparation work grows with
max_num_blocks x batch_size regardless of how short the other requests are.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

from .geometry import ModelGeometry, per_request_buffer_bytes, per_token_kv_bytes


class AllocationFailure(RuntimeError):
    """The allocator cannot satisfy the request; caller may preempt."""


# Default per-cell cost (us) of preparing one block-table entry, calibrated so
# that table preparation is ~10% of a reference decode iteration: with the
# default iteration model (10 ms + 0.5 us/token) a saturated batch of 256
# requests at 1K context runs ~11.3 ms, and its table at 16-token blocks has
# 64 x 256 cells, giving 0.10 * 11280 / 16384 ~= 0.069 us per cell.
DEFAULT_BLOCK_TABLE_CELL_US = 0.069


def block_table_prep_cost(
    block_counts: list[int], cell_cost_us: float = DEFAULT_BLOCK_TABLE_CELL_US
) -> float:
    """CPU microseconds to prepare a padded block table for one iteration."""
    if not block_counts:
        raise ValueError("block_counts must be nonempty")
    return cell_cost_us * max(block_counts) * len(block_counts)


@dataclass
class BlockPool:
    """Fixed population of KV-cache blocks with free-list allocation."""

    total_blocks: int
    block_size_tokens: int
    free: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if not self.free:
            # ids start at 1 so 0 can pad unoccupied table slots
            self.free = deque(range(1, self.total_blocks + 1))

    @property
    def allocated(self) -> int:
        return self.total_blocks - len(self.free)


class PagedBlockAllocator:
    """Per-request block lists over a shared pool, one block appended at a
    time as the previous one fills."""

    def __init__(self, total_blocks: int, block_size_tokens: int):
        self.pool = BlockPool(total_blocks, block_size_tokens)
        self.request_blocks: dict[int, list[int]] = {}

    def blocks_needed(self, seq_len: int) -> int:
        return -(-seq_len // self.pool.block_size_tokens)

    def grow(self, req_id: int, seq_len: int) -> int:
        """Extend req_id's block list to cover seq_len tokens; returns the
        number of blocks appended. Raises AllocationFailure when the free
        list runs dry, leaving prior allocations intact."""
        blocks = self.request_blocks.setdefault(req_id, [])
        need = self.blocks_needed(seq_len) - len(blocks)
        if need > len(self.pool.free):
            raise AllocationFailure(
                f"need {need} blocks for request {req_id}, only "
                f"{len(self.pool.free)} free"
            )
        for _ in range(max(0, need)):
            blocks.append(self.pool.free.popleft())
        return max(0, need)

    def free_request(self, req_id: int) -> int:
        blocks = self.request_blocks.pop(req_id, [])
        self.pool.free.extend(blocks)
        return len(blocks)

    def block_table(self, req_ids: list[int]) -> list[list[int]]:
        """Dense table, one row per request, zero-padded to the longest row."""
        rows = [self.request_blocks.get(rid, []) for rid in req_ids]
        width = max((len(r) for r in rows), default=0)
        return [row + [0] * (width - len(row)) for row in rows]

    def prep_cost_us(self, req_ids: list[int], cell_cost_us: float = DEFAULT_BLOCK_TABLE_CELL_US) -> float:
        if not req_ids:
            return 0.0
        counts = [len(self.request_blocks.get(rid, [])) for rid in req_ids]
        return block_table_prep_cost(counts, cell_cost_us)


class StaticReserveAllocator:
    """Reserves each request's KV cache at the model's maximum context length
    up front, the pre-paging strategy this package exists to compare against."""

    def __init__(self, geometry: ModelGeometry, capacity: int):
        self.geometry = geometry
        self.capacity = capacity
        self.per_request_bytes = 2 * geometry.n_layers * per_request_buffer_bytes(geometry)
        self.admitted: dict[int, int] = {}  # req_id -> committed bytes

    @property
    def committed_bytes(self) -> int:
        return sum(self.admitted.values())

    def can_admit(self) -> bool:
        return self.committed_bytes + self.per_request_bytes <= self.capacity

    def admit(self, req_id: int) -> int:
        """Commit a full max-length reservation; returns bytes committed."""
        if not self.can_admit():
            raise AllocationFailure(
                f"static reservation of {self.per_request_bytes} B exceeds "
                f"remaining capacity {self.capacity - self.committed_bytes} B"
            )
        self.admitted[req_id] = self.per_request_bytes
        return self.per_request_bytes

    def free_request(self, req_id: int) -> None:
        self.admitted.pop(req_id, None)

    def waste_bytes(self, req_id: int, actual_tokens: int) -> int:
        token_bytes = per_token_kv_bytes(self.geometry)
        return self.admitted.get(req_id, 0) - actual_tokens * token_bytes


def static_waste_fraction(actual_tokens: int, max_context: int) -> float:
    """Fraction of a static max-length reservation left unused."""
    if max_context < 1:
        raise ValueError("max_context must be >= 1")
    return (max_context - actual_tokens) / max_context

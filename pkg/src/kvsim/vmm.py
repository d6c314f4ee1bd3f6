"""Software stand-in for driver-level GPU virtual memory management.

Models the split between virtual reservation and physical backing: virtual
buffers are unbounded, physical page-group handles are carved from a bounded
pool, and handles are mapped into buffers at aligned offsets. Every call
charges a configurable latency into a per-API ledger; no real memory is
touched and addresses are just (buffer_id, offset) pairs.

A device and its buffers form one ownership domain: they may be handed off
between a control context and a background worker, but must never be mutated
concurrently. All error paths leave device state unchanged.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import KIB, PageGroupSize

DEFAULT_POOL_BYTES = 80 * KIB**3  # one 80 GiB device


class VmmError(Exception):
    """Base class for virtual-memory management failures."""


class AlignmentError(VmmError):
    """Size or offset is not a multiple of the page-group size."""


class PoolExhaustedError(VmmError):
    """No uncommitted physical capacity remains; caller decides what to evict."""


class MappingError(VmmError):
    """Illegal map request: double-map, offset collision, or out of range."""


class InvalidFreeError(VmmError):
    """Unmap requested at an offset with no mapping."""


class LatencyConfigError(VmmError):
    """No latency configured for an (api, page-group size) pair."""


# Measured per-call driver latencies in microseconds, by page-group size.
# cu-prefixed calls operate on standard 2 MiB pages only; v-prefixed calls
# are the fine-grained extensions covering 64-256 KiB. vMemMap folds the
# map and access-enable steps into one call, and vMemRelease folds unmap and
# release, which is why cuMemSetAccess/cuMemUnmap have no small-size rows.
DEFAULT_API_LATENCY_US: dict[str, dict[int, float]] = {
    "vMemReserve": {65536: 18, 131072: 17, 262144: 16},
    "cuMemAddressReserve": {2097152: 2},
    "vMemCreate": {65536: 1.7, 131072: 2, 262144: 2.1},
    "cuMemCreate": {2097152: 29},
    "vMemMap": {65536: 8, 131072: 8.5, 262144: 9},
    "cuMemMap": {2097152: 2},
    "cuMemSetAccess": {2097152: 38},
    "cuMemUnmap": {2097152: 34},
    "vMemRelease": {65536: 2, 131072: 3, 262144: 4},
    "cuMemRelease": {2097152: 23},
    "vMemFree": {65536: 35, 131072: 35, 262144: 35},
    "cuMemAddressFree": {2097152: 1},
}


class LatencyModel:
    """Per-call cost table keyed by API name and page-group size."""

    def __init__(self, costs_us: dict[str, dict[int, float]]):
        self.costs_us = {
            api: {int(size): float(us) for size, us in table.items()}
            for api, table in costs_us.items()
        }
        for api, table in self.costs_us.items():
            for size, us in table.items():
                if us < 0:
                    raise ValueError(f"negative latency for ({api}, {size}): {us}")

    @classmethod
    def default(cls) -> "LatencyModel":
        return cls(DEFAULT_API_LATENCY_US)

    @classmethod
    def from_json(cls, path: str | Path) -> "LatencyModel":
        with open(path) as fh:
            return cls(json.load(fh))

    def cost_us(self, api: str, page_group_bytes: int) -> float:
        try:
            return self.costs_us[api][int(page_group_bytes)]
        except KeyError:
            raise LatencyConfigError(
                f"no latency configured for ({api}, {int(page_group_bytes)})"
            ) from None


@dataclass
class PhysicalPool:
    """Bounded physical memory from which fixed-size page-groups are carved."""

    capacity: int
    page_group_size: int
    created: int = 0  # page-groups holding physical memory (mapped or not)
    mapped: int = 0

    @property
    def created_bytes(self) -> int:
        return self.created * self.page_group_size

    @property
    def mapped_bytes(self) -> int:
        return self.mapped * self.page_group_size

    @property
    def free_bytes(self) -> int:
        """Physical capacity not yet committed to any handle."""
        return self.capacity - self.created_bytes

    @property
    def available_bytes(self) -> int:
        """Capacity not pinned by live mappings (free plus created-unmapped)."""
        return self.capacity - self.mapped_bytes


@dataclass
class PageGroupHandle:
    """One allocatable unit of physical memory and its lifecycle state."""

    handle_id: int
    size: int
    state: str = "created"  # created | mapped | released
    buffer_id: int | None = None
    offset: int | None = None


@dataclass
class VirtualKVBuffer:
    """A contiguous virtual range with sparse physical backing."""

    buffer_id: int
    size: int
    mappings: dict[int, int] = field(default_factory=dict)  # offset -> handle_id


class VmmDevice:
    """One worker's virtual-memory view: a physical pool plus its buffers.

    With a 2 MiB page-group size the device charges the standard large-page
    call sequence (map + access-enable, unmap + release as separate costs);
    smaller sizes use the combined fine-grained calls.
    """

    def __init__(
        self,
        capacity: int,
        page_group_size: int,
        latency_model: LatencyModel | None = None,
    ):
        if page_group_size < 1:
            raise ValueError(f"page_group_size must be >= 1, got {page_group_size}")
        if capacity < 0:
            raise ValueError(f"capacity must be >= 0, got {capacity}")
        self.pool = PhysicalPool(capacity=capacity, page_group_size=int(page_group_size))
        self.latency = latency_model or LatencyModel.default()
        self.buffers: dict[int, VirtualKVBuffer] = {}
        self.handles: dict[int, PageGroupHandle] = {}
        self.ledger_us: dict[str, float] = {}
        self.calls: dict[str, int] = {}
        self.total_mapped_bytes: int = 0  # cumulative, never decremented
        self._precreated = 0  # created handles not yet materialized as objects
        self._next_buffer_id = 0
        self._next_handle_id = 0
        large = self.pool.page_group_size == int(PageGroupSize.MB_2)
        self._api_reserve = ["cuMemAddressReserve"] if large else ["vMemReserve"]
        self._api_create = ["cuMemCreate"] if large else ["vMemCreate"]
        self._api_map = ["cuMemMap", "cuMemSetAccess"] if large else ["vMemMap"]
        self._api_release = ["cuMemUnmap", "cuMemRelease"] if large else ["vMemRelease"]

    # -- latency accounting ------------------------------------------------

    def charge(self, api: str, page_group_bytes: int | None = None, count: int = 1) -> float:
        """Charge `count` calls of `api` to the ledger; returns total microseconds."""
        size = self.pool.page_group_size if page_group_bytes is None else page_group_bytes
        us = self.latency.cost_us(api, size) * count
        self.ledger_us[api] = self.ledger_us.get(api, 0.0) + us
        self.calls[api] = self.calls.get(api, 0) + count
        return us

    def _charge_group(self, apis: list[str], count: int = 1) -> float:
        return sum(self.charge(api, count=count) for api in apis)

    # -- operations ----------------------------------------------------------

    def reserve(self, size: int) -> VirtualKVBuffer:
        """Reserve a virtual buffer. Virtual space is unbounded; only alignment
        is enforced and no physical capacity is consumed."""
        if size % self.pool.page_group_size != 0:
            raise AlignmentError(
                f"buffer size {size} is not a multiple of page-group size "
                f"{self.pool.page_group_size}"
            )
        buf = VirtualKVBuffer(buffer_id=self._next_buffer_id, size=size)
        self._next_buffer_id += 1
        self.buffers[buf.buffer_id] = buf
        self._charge_group(self._api_reserve)
        return buf

    def create_handle(self) -> PageGroupHandle:
        """Commit one page-group of physical memory and return its handle."""
        if self.pool.free_bytes < self.pool.page_group_size:
            raise PoolExhaustedError(
                f"pool exhausted: {self.pool.free_bytes} B free, "
                f"{self.pool.page_group_size} B needed"
            )
        handle = PageGroupHandle(self._next_handle_id, self.pool.page_group_size)
        self._next_handle_id += 1
        self.handles[handle.handle_id] = handle
        self.pool.created += 1
        self._charge_group(self._api_create)
        return handle

    def precreate_handles(self, count: int) -> float:
        """Bulk-commit physical page-groups to be handed out later without a
        per-call charge. Used to front-load handle creation at startup."""
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        if self.pool.free_bytes < count * self.pool.page_group_size:
            raise PoolExhaustedError(
                f"cannot pre-create {count} page-groups: only "
                f"{self.pool.free_bytes} B free"
            )
        self.pool.created += count
        self._precreated += count
        return self._charge_group(self._api_create, count=count) if count else 0.0

    @property
    def precreated_available(self) -> int:
        return self._precreated

    def take_precreated(self) -> PageGroupHandle:
        """Materialize one handle from the pre-created reserve (no charge)."""
        if self._precreated < 1:
            raise PoolExhaustedError("no pre-created handles available")
        self._precreated -= 1
        handle = PageGroupHandle(self._next_handle_id, self.pool.page_group_size)
        self._next_handle_id += 1
        self.handles[handle.handle_id] = handle
        return handle

    def map(self, buffer: VirtualKVBuffer, offset: int, handle: PageGroupHandle) -> float:
        """Map a created handle into a buffer at an aligned, unoccupied offset."""
        size = self.pool.page_group_size
        if handle.state == "mapped":
            raise MappingError(
                f"handle {handle.handle_id} already mapped at "
                f"({handle.buffer_id}, {handle.offset})"
            )
        if handle.state != "created":
            raise MappingError(f"handle {handle.handle_id} is {handle.state}")
        if offset % size != 0:
            raise AlignmentError(f"offset {offset} not aligned to {size}")
        if offset < 0 or offset + size > buffer.size:
            raise MappingError(
                f"offset {offset} out of range for buffer {buffer.buffer_id} "
                f"of size {buffer.size}"
            )
        if offset in buffer.mappings:
            raise MappingError(
                f"offset {offset} in buffer {buffer.buffer_id} already backed "
                f"by handle {buffer.mappings[offset]}"
            )
        handle.state = "mapped"
        handle.buffer_id = buffer.buffer_id
        handle.offset = offset
        buffer.mappings[offset] = handle.handle_id
        self.pool.mapped += 1
        self.total_mapped_bytes += size
        return self._charge_group(self._api_map)

    def unmap_release(self, buffer: VirtualKVBuffer, offset: int) -> float:
        """Unmap the page-group at `offset` and return its capacity to the pool."""
        if offset not in buffer.mappings:
            raise InvalidFreeError(
                f"no mapping at offset {offset} in buffer {buffer.buffer_id}"
            )
        handle = self.handles.pop(buffer.mappings.pop(offset))
        handle.state = "released"
        handle.buffer_id = None
        handle.offset = None
        self.pool.mapped -= 1
        self.pool.created -= 1
        return self._charge_group(self._api_release)

    # -- introspection -------------------------------------------------------

    def total_charged_us(self) -> float:
        return sum(self.ledger_us.values())

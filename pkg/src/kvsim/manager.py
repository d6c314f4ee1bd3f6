"""Demand-paged KV-cache allocator over contiguous virtual buffers.

One manager owns a worker's KV cache: it reserves one virtual buffer per K
and per V tensor per layer (2N total, or 2 in the layer-sliced layout),
assigns each request a fixed slot whose sub-tensor sits at a fixed offset in
every buffer, and maps physical page-groups on demand as context lengths
grow. Completed requests keep their page-groups mapped (deferred
reclamation) so successors can reuse them without new driver calls;
reclamation runs only under memory pressure.

Call pattern: a control context drives alloc_reqid / free_reqid / step once
per serving iteration; a background worker may run plan_overlap /
execute_plan / eager_prepare / reclaim between steps. Calls must not be
issued concurrently; the latency each call returns is simulated time, and
the caller decides whether it lands on the critical path.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from .geometry import ModelGeometry, prefill_page_groups
from .vmm import DEFAULT_POOL_BYTES, LatencyModel, PoolExhaustedError, VmmDevice


class BatchFullError(RuntimeError):
    """All request slots are active."""


class DoubleFreeError(RuntimeError):
    """free_reqid called on a slot that is not active."""


class Phase(enum.Enum):
    INACTIVE = "inactive"
    PREFILL = "prefill"
    DECODE = "decode"


@dataclass
class ManagerConfig:
    """Allocator knobs. pre_create_fraction controls how much of the pool is
    committed to handles at startup so runtime growth only pays mapping costs;
    reclaim_threshold is the fraction of pool capacity that must stay
    available before deferred page-groups are harvested."""

    page_group_size: int
    pool_bytes: int = DEFAULT_POOL_BYTES
    reclaim_threshold: float = 0.10
    eager_groups: int = 0
    sliced: bool = False
    pre_create_fraction: float = 1.0
    latency_model: LatencyModel | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.reclaim_threshold <= 1.0:
            raise ValueError("reclaim_threshold must be in [0, 1]")
        if not 0.0 <= self.pre_create_fraction <= 1.0:
            raise ValueError("pre_create_fraction must be in [0, 1]")
        if self.eager_groups < 0:
            raise ValueError("eager_groups must be >= 0")


@dataclass
class RequestSlot:
    """Per-slot state; slot i's sub-tensor starts at i * stride in every buffer."""

    req_id: int
    active: bool = False
    context_len: int = 0
    mapped_groups: int = 0  # per buffer, uniform across all buffers
    phase: Phase = Phase.INACTIVE
    freed_seq: int = 0  # stamp for oldest-freed-first reclamation


@dataclass
class StepResult:
    ok: bool
    sync_us: float = 0.0


class KVCacheManager:
    def __init__(self, geometry: ModelGeometry, config: ManagerConfig):
        if geometry.max_batch < 1:
            raise ValueError("geometry.max_batch must be >= 1 to serve requests")
        self.geometry = geometry
        self.config = config
        t = int(config.page_group_size)
        self.page_group_size = t

        if config.sliced:
            # Two buffers (K, V); one page-group spans all layers of its tokens.
            self.buffer_count = 2
            self.per_buffer_token_bytes = geometry.n_layers * geometry.per_token_layer_bytes
        else:
            self.buffer_count = 2 * geometry.n_layers
            self.per_buffer_token_bytes = geometry.per_token_layer_bytes
        if t < self.per_buffer_token_bytes:
            raise ValueError(
                f"page-group size {t} smaller than one token's cache "
                f"({self.per_buffer_token_bytes} B) in this layout"
            )
        if config.pool_bytes < self.buffer_count * t:
            raise ValueError(
                f"pool of {config.pool_bytes} B cannot back one page-group in "
                f"each of {self.buffer_count} buffers"
            )

        # Per-request span, rounded up so every slot starts on a page-group
        # boundary (mapping offsets must be page-group aligned).
        span = geometry.max_context * self.per_buffer_token_bytes
        self.groups_per_slot = prefill_page_groups(span, t)
        self.slot_stride = self.groups_per_slot * t

        self.vmm = VmmDevice(config.pool_bytes, t, config.latency_model)
        self.init_us = 0.0
        self.buffers = [
            self.vmm.reserve(geometry.max_batch * self.slot_stride)
            for _ in range(self.buffer_count)
        ]
        self.init_us += self.vmm.total_charged_us()
        precreate = int(config.pre_create_fraction * config.pool_bytes) // t
        self.init_us += self.vmm.precreate_handles(precreate)

        self.slots = [RequestSlot(req_id=i) for i in range(geometry.max_batch)]
        self.eager_slot: int | None = None
        self._freed_counter = 0
        self._handle_cache: deque = deque()  # rollback leftovers, reused first

    # -- sizing helpers ------------------------------------------------------

    def groups_required(self, seq_len: int) -> int:
        return prefill_page_groups(seq_len * self.per_buffer_token_bytes, self.page_group_size)

    def slot_offset(self, req_id: int, group_index: int) -> int:
        return req_id * self.slot_stride + group_index * self.page_group_size

    def slot_committed_bytes(self, req_id: int) -> int:
        return self.slots[req_id].mapped_groups * self.buffer_count * self.page_group_size

    def slot_used_bytes(self, req_id: int) -> int:
        return self.slots[req_id].context_len * self.per_buffer_token_bytes * self.buffer_count

    def committed_bytes(self) -> int:
        return self.vmm.pool.mapped_bytes

    def deferred_groups(self) -> int:
        return sum(s.mapped_groups for s in self.slots if not s.active)

    def _available_bytes(self) -> int:
        return self.vmm.pool.available_bytes

    def _reclaim_floor(self) -> int:
        return int(self.config.reclaim_threshold * self.config.pool_bytes)

    # -- request lifecycle -----------------------------------------------------

    def free_slot_available(self) -> bool:
        return any(not s.active for s in self.slots)

    def alloc_reqid(self) -> int:
        """Activate and return a slot, preferring the eagerly prepared one,
        then the inactive slot with the most reusable page-groups."""
        slot = None
        if self.eager_slot is not None and not self.slots[self.eager_slot].active:
            slot = self.slots[self.eager_slot]
            self.eager_slot = None
        else:
            candidates = [s for s in self.slots if not s.active]
            if not candidates:
                raise BatchFullError(f"all {len(self.slots)} request slots active")
            slot = max(candidates, key=lambda s: (s.mapped_groups, -s.req_id))
        slot.active = True
        slot.context_len = 0
        slot.phase = Phase.PREFILL
        return slot.req_id

    def free_reqid(self, req_id: int) -> None:
        """Deactivate a slot. Its page-groups stay mapped for reuse; no
        driver calls happen here."""
        slot = self.slots[req_id]
        if not slot.active:
            raise DoubleFreeError(f"slot {req_id} is not active")
        slot.active = False
        slot.context_len = 0
        slot.phase = Phase.INACTIVE
        self._freed_counter += 1
        slot.freed_seq = self._freed_counter

    # -- mapping machinery ------------------------------------------------------

    def _acquire_handle(self) -> tuple[object, float]:
        if self._handle_cache:
            return self._handle_cache.popleft(), 0.0
        if self.vmm.precreated_available:
            return self.vmm.take_precreated(), 0.0
        handle = self.vmm.create_handle()  # raises PoolExhaustedError
        cost = sum(
            self.vmm.latency.cost_us(api, self.page_group_size)
            for api in self.vmm._api_create
        )
        return handle, cost

    def _map_group(self, req_id: int, group_index: int) -> float:
        """Map one page-group index across every buffer, all-or-nothing."""
        acquired = []
        us = 0.0
        try:
            for _ in range(self.buffer_count):
                handle, cost = self._acquire_handle()
                acquired.append(handle)
                us += cost
        except PoolExhaustedError:
            self._handle_cache.extend(acquired)
            raise
        for buf, handle in zip(self.buffers, acquired):
            us += self.vmm.map(buf, self.slot_offset(req_id, group_index), handle)
        return us

    def _release_top_group(self, slot: RequestSlot) -> float:
        """Unmap a slot's highest-index page-group so the remaining ones
        still cover a contiguous prefix of its sub-tensor."""
        group_index = slot.mapped_groups - 1
        us = 0.0
        for buf in self.buffers:
            us += self.vmm.unmap_release(buf, self.slot_offset(slot.req_id, group_index))
        slot.mapped_groups = group_index
        return us

    def _reclaim_victims(self) -> list[RequestSlot]:
        victims = [s for s in self.slots if not s.active and s.mapped_groups > 0]
        # Oldest-freed first; an eagerly prepared slot is harvested last.
        victims.sort(key=lambda s: (s.req_id == self.eager_slot, s.freed_seq, s.req_id))
        return victims

    def _reclaim_until(self, target_available_bytes: int) -> tuple[int, float]:
        """Release deferred page-groups until target_available_bytes of pool
        capacity are no longer pinned by mappings, or nothing deferred remains."""
        freed = 0
        us = 0.0
        for slot in self._reclaim_victims():
            while slot.mapped_groups > 0 and self._available_bytes() < target_available_bytes:
                us += self._release_top_group(slot)
                freed += 1
            if slot.mapped_groups == 0 and self.eager_slot == slot.req_id:
                self.eager_slot = None
            if self._available_bytes() >= target_available_bytes:
                break
        return freed, us

    # -- serving-iteration entry points ----------------------------------------

    def step(self, seq_lens: list[int]) -> StepResult:
        """Back every active slot's sub-tensors up to its context length.

        Maps only the shortfall beyond what the overlap and eager paths have
        already mapped. On its first step a slot inheriting more page-groups
        than its prompt needs releases the excess, so an active slot is
        always backed by exactly ceil(context bytes / page-group) groups.
        Returns ok=False when demand cannot be met even after harvesting all
        deferred page-groups; the serving layer is expected to preempt.
        """
        if len(seq_lens) != len(self.slots):
            raise ValueError(f"expected {len(self.slots)} sequence lengths, got {len(seq_lens)}")
        for slot in self.slots:
            s = seq_lens[slot.req_id]
            if not slot.active and s != 0:
                raise ValueError(f"inactive slot {slot.req_id} has nonzero length {s}")
            if s < 0 or s > self.geometry.max_context:
                raise ValueError(f"slot {slot.req_id} length {s} outside [0, max_context]")

        sync_us = 0.0
        for slot in self.slots:
            if not slot.active:
                continue
            s = seq_lens[slot.req_id]
            required = self.groups_required(s)
            if slot.phase is Phase.PREFILL:
                while slot.mapped_groups > required:
                    sync_us += self._release_top_group(slot)
            while slot.mapped_groups < required:
                try:
                    sync_us += self._map_group(slot.req_id, slot.mapped_groups)
                except PoolExhaustedError:
                    needed = self.buffer_count * self.page_group_size
                    freed, reclaim_us = self._reclaim_until(needed)
                    sync_us += reclaim_us
                    if freed == 0:
                        return StepResult(ok=False, sync_us=sync_us)
                    continue
                slot.mapped_groups += 1
            slot.context_len = s
            slot.phase = Phase.DECODE
        return StepResult(ok=True, sync_us=sync_us)

    def plan_overlap(self, next_seq_lens: list[int]) -> list[tuple[int, int, int]]:
        """Mappings the next iteration will need, as (req_id, buffer_id,
        offset) triples. Decode growth is one token per iteration, so the
        caller passes current length + 1 for each active slot; executing the
        plan off the critical path makes the next step charge nothing."""
        plan = []
        for slot in self.slots:
            if not slot.active:
                continue
            required = min(self.groups_required(next_seq_lens[slot.req_id]), self.groups_per_slot)
            for group_index in range(slot.mapped_groups, required):
                for buf in self.buffers:
                    plan.append((slot.req_id, buf.buffer_id, self.slot_offset(slot.req_id, group_index)))
        return plan

    def execute_plan(self, plan: list[tuple[int, int, int]]) -> float:
        """Apply a previously computed plan; best-effort on memory pressure
        (whatever is left over simply falls to the next step)."""
        us = 0.0
        done = set()
        for req_id, _, offset in plan:
            slot = self.slots[req_id]
            group_index = (offset - req_id * self.slot_stride) // self.page_group_size
            if (req_id, group_index) in done or group_index < slot.mapped_groups:
                continue
            if group_index >= self.groups_per_slot:
                continue
            # Grow strictly in order so the mapped prefix stays contiguous.
            while slot.mapped_groups <= group_index:
                try:
                    us += self._map_group(req_id, slot.mapped_groups)
                except PoolExhaustedError:
                    return us
                slot.mapped_groups += 1
            done.add((req_id, group_index))
        return us

    def eager_prepare(self, k_groups: int | None = None) -> float:
        """Pre-map page-groups for the slot the next request will receive.

        Best effort: skips silently when no slot is inactive or when mapping
        would push available capacity below the reclamation threshold."""
        k = self.config.eager_groups if k_groups is None else k_groups
        if k <= 0:
            return 0.0
        k = min(k, self.groups_per_slot)
        if self.eager_slot is not None and self.slots[self.eager_slot].mapped_groups >= k:
            return 0.0
        candidates = [s for s in self.slots if not s.active]
        if not candidates:
            return 0.0
        slot = max(candidates, key=lambda s: (s.mapped_groups, -s.req_id))
        self.eager_slot = slot.req_id
        us = 0.0
        group_bytes = self.buffer_count * self.page_group_size
        while slot.mapped_groups < k:
            if self._available_bytes() - group_bytes < self._reclaim_floor():
                break
            try:
                us += self._map_group(slot.req_id, slot.mapped_groups)
            except PoolExhaustedError:
                break
            slot.mapped_groups += 1
        return us

    def reclaim(self) -> tuple[int, float]:
        """Release deferred page-groups when available capacity has dropped
        below the configured threshold. Never touches active slots. Returns
        (groups freed, microseconds charged)."""
        floor = self._reclaim_floor()
        if self._available_bytes() >= floor:
            return 0, 0.0
        # Deferred groups are mapped, so releasing them raises availability;
        # aim free (uncommitted) bytes at the same floor.
        return self._reclaim_until(floor)

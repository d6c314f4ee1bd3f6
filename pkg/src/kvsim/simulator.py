"""Deterministic trace replay through a continuous-batching serving loop.

Each iteration runs a fixed event order: admit eligible arrivals, apply the
background allocation work planned during the previous iteration (overlapped
mode only), ensure memory for current context lengths, compute, then retire
finished requests. Time is an integer-microsecond clock; background work
that fits inside the previous iteration's compute time is free, and any
remainder lands on the critical path of the current iteration.

Memory-pressure failures preempt the most recently admitted request, which
restarts from scratch later (its partially built cache is surrendered).
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .baselines import (
    DEFAULT_BLOCK_TABLE_CELL_US,
    AllocationFailure,
    PagedBlockAllocator,
    StaticReserveAllocator,
)
from .geometry import (
    ModelGeometry,
    PageGroupSize,
    block_size_tokens,
    per_token_kv_bytes,
)
from .manager import BatchFullError, KVCacheManager, ManagerConfig
from .trace import SimTrace
from .vmm import DEFAULT_POOL_BYTES, LatencyModel

ALLOCATORS = ("vattention", "paged", "static")
MODES = ("sync", "overlapped")


class SimulationAborted(RuntimeError):
    """The run could not make forward progress within the preemption cap."""


@dataclass(frozen=True)
class IterationModel:
    """Linear proxy for forward-pass time: compute_ms = c0 + c1 * tokens.

    Defaults put a 16K-token prefill and saturated decode batches in the
    tens-to-hundreds of milliseconds range; both constants are calibration
    inputs, not measurements.
    """

    c0_ms: float = 10.0
    c1_ms_per_token: float = 0.0005

    def __post_init__(self) -> None:
        if self.c0_ms < 0 or self.c1_ms_per_token < 0:
            raise ValueError("iteration model constants must be >= 0")

    def compute_ms(self, batch_total_tokens: int) -> float:
        return self.c0_ms + self.c1_ms_per_token * batch_total_tokens


@dataclass
class IterationRecord:
    iteration: int
    end_ms: float
    batch: int
    prefills: int
    tokens: int
    compute_ms: float
    sync_alloc_ms: float
    stall_ms: float
    cpu_ms: float
    committed_bytes: int
    used_bytes: int
    alloc_bytes: int
    preemptions: int

    CSV_FIELDS = (
        "iteration", "end_ms", "batch", "prefills", "tokens", "compute_ms",
        "sync_alloc_ms", "stall_ms", "cpu_ms", "committed_bytes",
        "used_bytes", "alloc_bytes", "preemptions",
    )

    def row(self) -> list:
        return [getattr(self, f) for f in self.CSV_FIELDS]


@dataclass
class SimMetrics:
    iterations: list[IterationRecord] = field(default_factory=list)
    completed_requests: int = 0
    generated_tokens: int = 0
    preemptions: int = 0
    init_alloc_ms: float = 0.0

    @property
    def max_batch(self) -> int:
        return max((r.batch for r in self.iterations), default=0)

    @property
    def sim_time_ms(self) -> float:
        return self.iterations[-1].end_ms if self.iterations else 0.0

    def _latencies_ms(self) -> list[float]:
        return [r.compute_ms + r.stall_ms + r.cpu_ms for r in self.iterations]

    @staticmethod
    def _percentile(values: list[float], q: float) -> float:
        if not values:
            return 0.0
        ordered = sorted(values)
        rank = -(-q * len(ordered) // 1)  # nearest-rank: ceil(q * n)
        return ordered[min(len(ordered), max(1, int(rank))) - 1]

    def summary(self) -> dict:
        lat = self._latencies_ms()
        total_s = self.sim_time_ms / 1000.0
        n = len(self.iterations)
        return {
            "iterations": n,
            "max_batch": self.max_batch,
            "completed_requests": self.completed_requests,
            "generated_tokens": self.generated_tokens,
            "tokens_per_s": self.generated_tokens / total_s if total_s > 0 else 0.0,
            "sim_time_ms": self.sim_time_ms,
            "p50_iteration_ms": self._percentile(lat, 0.50),
            "p99_iteration_ms": self._percentile(lat, 0.99),
            "stall_ms_total": sum(r.stall_ms for r in self.iterations),
            "sync_alloc_ms_total": sum(r.sync_alloc_ms for r in self.iterations),
            "cpu_ms_total": sum(r.cpu_ms for r in self.iterations),
            "preemptions": self.preemptions,
            "peak_committed_bytes": max((r.committed_bytes for r in self.iterations), default=0),
            "peak_used_bytes": max((r.used_bytes for r in self.iterations), default=0),
            "mean_waste_bytes": (
                sum(r.committed_bytes - r.used_bytes for r in self.iterations) / n if n else 0.0
            ),
            "init_alloc_ms": self.init_alloc_ms,
        }

    def write_iterations_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(IterationRecord.CSV_FIELDS)
            for rec in self.iterations:
                writer.writerow(rec.row())

    def write_summary_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- allocator runtimes --------------------------------------------------------


class _VattentionRuntime:
    kind = "vattention"

    def __init__(self, geometry, page_group_size, pool_bytes, *, reclaim_threshold,
                 eager_groups, sliced, pre_create_fraction, latency_model, **_unused):
        self.manager = KVCacheManager(
            geometry,
            ManagerConfig(
                page_group_size=int(page_group_size),
                pool_bytes=pool_bytes,
                reclaim_threshold=reclaim_threshold,
                eager_groups=eager_groups,
                sliced=sliced,
                pre_create_fraction=pre_create_fraction,
                latency_model=latency_model,
            ),
        )
        self.init_us = self.manager.init_us

    def has_free_slot(self) -> bool:
        return self.manager.free_slot_available()

    def try_admit(self) -> int | None:
        try:
            return self.manager.alloc_reqid()
        except BatchFullError:
            return None

    def release(self, req_id: int) -> None:
        self.manager.free_reqid(req_id)

    def ensure(self, seq_lens) -> tuple[bool, float]:
        res = self.manager.step(seq_lens)
        return res.ok, res.sync_us

    def plan(self, next_seq_lens) -> list:
        return self.manager.plan_overlap(next_seq_lens)

    def background(self, plan) -> float:
        us = self.manager.execute_plan(plan)
        us += self.manager.eager_prepare()
        us += self.manager.reclaim()[1]
        return us

    def cpu_us(self, active_req_ids) -> float:
        return 0.0

    def committed_bytes(self) -> int:
        return self.manager.committed_bytes()

    def alloc_bytes_cumulative(self) -> int:
        return self.manager.vmm.total_mapped_bytes


class _PagedRuntime:
    kind = "paged"

    def __init__(self, geometry, page_group_size, pool_bytes, *, block_tokens=None,
                 block_table_cell_us=DEFAULT_BLOCK_TABLE_CELL_US, **_unused):
        self.geometry = geometry
        self.block_tokens = block_tokens or block_size_tokens(geometry, page_group_size)
        # one logical block holds K and V for all layers of block_tokens tokens
        self.block_phys_bytes = (
            2 * geometry.n_layers * self.block_tokens * geometry.per_token_layer_bytes
        )
        self.allocator = PagedBlockAllocator(
            total_blocks=pool_bytes // self.block_phys_bytes,
            block_size_tokens=self.block_tokens,
        )
        self.cell_us = block_table_cell_us
        self.free_slots = deque(range(geometry.max_batch))
        self.init_us = 0.0
        self._alloc_blocks_cum = 0

    def has_free_slot(self) -> bool:
        return bool(self.free_slots)

    def try_admit(self) -> int | None:
        return self.free_slots.popleft() if self.free_slots else None

    def release(self, req_id: int) -> None:
        self.allocator.free_request(req_id)
        self.free_slots.append(req_id)
        self.free_slots = deque(sorted(self.free_slots))

    def ensure(self, seq_lens) -> tuple[bool, float]:
        # Block bookkeeping is user-space work; no driver latency is charged.
        for req_id, seq in enumerate(seq_lens):
            if seq == 0:
                continue
            try:
                self._alloc_blocks_cum += self.allocator.grow(req_id, seq)
            except AllocationFailure:
                return False, 0.0
        return True, 0.0

    def plan(self, next_seq_lens) -> list:
        return []

    def background(self, plan) -> float:
        return 0.0

    def cpu_us(self, active_req_ids) -> float:
        return self.allocator.prep_cost_us(active_req_ids, self.cell_us)

    def committed_bytes(self) -> int:
        return self.allocator.pool.allocated * self.block_phys_bytes

    def alloc_bytes_cumulative(self) -> int:
        return self._alloc_blocks_cum * self.block_phys_bytes


class _StaticRuntime:
    kind = "static"

    def __init__(self, geometry, page_group_size, pool_bytes, **_unused):
        self.allocator = StaticReserveAllocator(geometry, pool_bytes)
        self.free_slots = deque(range(geometry.max_batch))
        self.init_us = 0.0
        self._admitted_cum = 0

    def has_free_slot(self) -> bool:
        return bool(self.free_slots) and self.allocator.can_admit()

    def try_admit(self) -> int | None:
        if not self.free_slots or not self.allocator.can_admit():
            return None
        req_id = self.free_slots.popleft()
        self._admitted_cum += self.allocator.admit(req_id)
        return req_id

    def release(self, req_id: int) -> None:
        self.allocator.free_request(req_id)
        self.free_slots.append(req_id)
        self.free_slots = deque(sorted(self.free_slots))

    def ensure(self, seq_lens) -> tuple[bool, float]:
        return True, 0.0  # everything was committed at admission

    def plan(self, next_seq_lens) -> list:
        return []

    def background(self, plan) -> float:
        return 0.0

    def cpu_us(self, active_req_ids) -> float:
        return 0.0

    def committed_bytes(self) -> int:
        return self.allocator.committed_bytes

    def alloc_bytes_cumulative(self) -> int:
        return self._admitted_cum


_RUNTIMES = {
    "vattention": _VattentionRuntime,
    "paged": _PagedRuntime,
    "static": _StaticRuntime,
}


@dataclass
class _Running:
    record_index: int
    prompt_tokens: int
    decode_tokens: int
    ctx: int
    produced: int = 0
    admit_order: int = 0


def run(
    trace: SimTrace,
    geometry: ModelGeometry,
    *,
    allocator: str = "vattention",
    page_group_size: int = PageGroupSize.KB_64,
    mode: str = "sync",
    pool_bytes: int = DEFAULT_POOL_BYTES,
    iteration_model: IterationModel | None = None,
    reclaim_threshold: float = 0.10,
    eager_groups: int = 0,
    sliced: bool = False,
    pre_create_fraction: float = 1.0,
    latency_model: LatencyModel | None = None,
    block_tokens: int | None = None,
    block_table_cell_us: float = DEFAULT_BLOCK_TABLE_CELL_US,
    preemption_cap: int = 1000,
    observer: Callable | None = None,
) -> SimMetrics:
    """Replay a trace and return per-iteration and aggregate metrics.

    Deterministic: identical inputs produce identical metrics. The observer,
    when given, is called as observer(runtime, seq_lens, iteration) at each
    quiescent point (after the iteration's memory demands are satisfied).
    """
    if allocator not in _RUNTIMES:
        raise ValueError(f"allocator must be one of {ALLOCATORS}, got {allocator!r}")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    for i, rec in enumerate(trace):
        if rec.prompt_tokens + rec.decode_tokens > geometry.max_context:
            raise ValueError(
                f"trace record {i}: prompt+decode "
                f"({rec.prompt_tokens}+{rec.decode_tokens}) exceeds max_context "
                f"{geometry.max_context}"
            )

    model = iteration_model or IterationModel()
    runtime = _RUNTIMES[allocator](
        geometry, page_group_size, pool_bytes,
        reclaim_threshold=reclaim_threshold, eager_groups=eager_groups,
        sliced=sliced, pre_create_fraction=pre_create_fraction,
        latency_model=latency_model, block_tokens=block_tokens,
        block_table_cell_us=block_table_cell_us,
    )

    metrics = SimMetrics(init_alloc_ms=runtime.init_us / 1000.0)
    token_bytes = per_token_kv_bytes(geometry)
    pending: deque[tuple[int, object]] = deque(enumerate(trace))
    running: dict[int, _Running] = {}
    seq_lens = [0] * geometry.max_batch
    clock_us = 0
    iteration = 0
    admit_counter = 0
    prev_compute_budget_us = 0.0
    pending_plan: list = []
    prev_alloc_cum = runtime.alloc_bytes_cumulative()

    while pending or running:
        if not running and pending:
            clock_us = max(clock_us, pending[0][1].arrival_ms * 1000)

        # admit eligible arrivals in order
        while pending and pending[0][1].arrival_ms * 1000 <= clock_us:
            rid = runtime.try_admit()
            if rid is None:
                break
            index, rec = pending.popleft()
            running[rid] = _Running(
                index, rec.prompt_tokens, rec.decode_tokens,
                ctx=rec.prompt_tokens, admit_order=admit_counter,
            )
            admit_counter += 1
            seq_lens[rid] = rec.prompt_tokens

        if not running and pending:
            raise SimulationAborted(
                "no request can be admitted into an empty batch; a single "
                "request's reservation exceeds pool capacity"
            )

        # background allocation work prepared during the previous compute
        bg_us = 0.0
        if mode == "overlapped":
            bg_us = runtime.background(pending_plan)
            pending_plan = []
        overflow_us = max(0.0, bg_us - prev_compute_budget_us)

        # satisfy memory demand, preempting newest-first on failure
        sync_us = 0.0
        preempted_here = 0
        while True:
            ok, us = runtime.ensure(seq_lens)
            sync_us += us
            if ok:
                break
            if not running:
                raise SimulationAborted(
                    "memory demand cannot be met with an empty batch; "
                    "a single request exceeds pool capacity"
                )
            victim = max(running, key=lambda r: running[r].admit_order)
            state = running.pop(victim)
            runtime.release(victim)
            seq_lens[victim] = 0
            rec = trace.records[state.record_index]
            pending.appendleft((state.record_index, rec))
            preempted_here += 1
            metrics.preemptions += 1
            if metrics.preemptions > preemption_cap:
                raise SimulationAborted(
                    f"aborted after {metrics.preemptions} preemptions; the "
                    f"workload cannot make forward progress at this capacity"
                )

        if observer is not None:
            observer(runtime, list(seq_lens), iteration)

        batch = len(running)
        tokens = sum(seq_lens[rid] for rid in running)
        prefills = sum(1 for r in running.values() if r.produced == 0)
        compute_ms = model.compute_ms(tokens) if batch else 0.0
        stall_us = sync_us + overflow_us
        cpu_us = runtime.cpu_us(sorted(running))
        clock_us += round(compute_ms * 1000) + round(stall_us) + round(cpu_us)

        alloc_cum = runtime.alloc_bytes_cumulative()
        committed = runtime.committed_bytes()
        assert committed <= pool_bytes, "committed physical memory exceeded capacity"
        metrics.iterations.append(
            IterationRecord(
                iteration=iteration,
                end_ms=clock_us / 1000.0,
                batch=batch,
                prefills=prefills,
                tokens=tokens,
                compute_ms=compute_ms,
                sync_alloc_ms=sync_us / 1000.0,
                stall_ms=stall_us / 1000.0,
                cpu_ms=cpu_us / 1000.0,
                committed_bytes=committed,
                used_bytes=sum(seq_lens[rid] for rid in running) * token_bytes,
                alloc_bytes=alloc_cum - prev_alloc_cum,
                preemptions=preempted_here,
            )
        )
        prev_alloc_cum = alloc_cum

        # plan next iteration's decode growth while this compute "runs"
        if mode == "overlapped":
            next_seq = list(seq_lens)
            for rid in running:
                next_seq[rid] = min(seq_lens[rid] + 1, geometry.max_context)
            pending_plan = runtime.plan(next_seq)
        prev_compute_budget_us = compute_ms * 1000.0

        # retire: one token produced per running request this iteration
        for rid in list(running):
            state = running[rid]
            state.produced += 1
            if state.produced >= state.decode_tokens:
                metrics.completed_requests += 1
                metrics.generated_tokens += state.decode_tokens
                runtime.release(rid)
                seq_lens[rid] = 0
                del running[rid]
            else:
                state.ctx += 1
                seq_lens[rid] = state.ctx
        iteration += 1

    return metrics


def median_prompt_groups(
    trace: SimTrace,
    geometry: ModelGeometry,
    page_group_size: int,
    sliced: bool = False,
) -> int:
    """Page-groups covering the trace's median prompt: the default count for
    eager preparation, sized so a typical prefill needs no synchronous maps."""
    if not trace.records:
        return 0
    prompts = sorted(r.prompt_tokens for r in trace.records)
    median = prompts[(len(prompts) - 1) // 2]
    token_bytes = geometry.per_token_layer_bytes * (geometry.n_layers if sliced else 1)
    return -(-median * token_bytes // int(page_group_size))


def measure_alloc_rate(metrics: SimMetrics, window_ms: float = 1000.0) -> list[tuple[float, float]]:
    """Windowed physical-allocation rate over the run.

    Returns (window_start_ms, bytes_per_second) pairs covering the simulated
    timeline; windows with no allocation report 0.
    """
    if window_ms <= 0:
        raise ValueError("window_ms must be > 0")
    if not metrics.iterations:
        return []
    end = metrics.iterations[-1].end_ms
    n_windows = int(end // window_ms) + 1
    buckets = [0] * n_windows
    for rec in metrics.iterations:
        buckets[min(n_windows - 1, int(rec.end_ms // window_ms))] += rec.alloc_bytes
    return [(i * window_ms, b / (window_ms / 1000.0)) for i, b in enumerate(buckets)]


def max_batch_sweep(
    trace: SimTrace,
    geometry: ModelGeometry,
    page_group_sizes: list[int],
    **run_kwargs,
) -> dict[int, int]:
    """Peak concurrent batch reached per page-group size, capacity held fixed."""
    results = {}
    for size in page_group_sizes:
        metrics = run(trace, geometry, page_group_size=size, **run_kwargs)
        results[int(size)] = metrics.max_batch
    return results

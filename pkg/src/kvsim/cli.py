"""Command-line front-end: sizing analysis, trace generation, simulation
runs, and side-by-side allocator comparisons.

Exit codes: 0 on success, 1 on usage or configuration errors, 2 when a
simulation aborts (preemption-loop cap or an unservable workload).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass
from pathlib import Path

from .baselines import DEFAULT_BLOCK_TABLE_CELL_US
from .geometry import (
    DEFAULT_MAP_LATENCY_US,
    PAGE_GROUP_SIZES,
    PRESETS,
    ModelGeometry,
    PageGroupSize,
    allocation_bandwidth,
    block_size_tokens,
    human_bytes,
    load_geometry,
    page_group_label,
    parse_page_group_size,
    per_token_kv_bytes,
    reservation_plan,
    sliced_block_size_tokens,
)
from .simulator import (
    ALLOCATORS,
    MODES,
    IterationModel,
    SimulationAborted,
    median_prompt_groups,
    run,
)
from .trace import SimTrace, TraceFormatError, generate_trace
from .vmm import LatencyModel

GIB = 1024**3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); usage errors are 1
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    """One simulation run, fully determined by CLI flags plus the trace."""

    geometry: ModelGeometry
    allocator: str = "vattention"
    page_group_size: int = int(PageGroupSize.KB_64)
    mode: str = "sync"
    pool_bytes: int = 80 * GIB
    sliced: bool = False
    reclaim_threshold: float = 0.10
    eager_groups: int = 0
    c0_ms: float = 10.0
    c1_ms_per_token: float = 0.0005
    block_table_cell_us: float = DEFAULT_BLOCK_TABLE_CELL_US
    preemption_cap: int = 1000
    latency_model: LatencyModel | None = None

    def execute(self, trace: SimTrace, observer=None):
        return run(
            trace,
            self.geometry,
            allocator=self.allocator,
            page_group_size=self.page_group_size,
            mode=self.mode,
            pool_bytes=self.pool_bytes,
            iteration_model=IterationModel(self.c0_ms, self.c1_ms_per_token),
            reclaim_threshold=self.reclaim_threshold,
            eager_groups=self.eager_groups,
            sliced=self.sliced,
            latency_model=self.latency_model,
            block_table_cell_us=self.block_table_cell_us,
            preemption_cap=self.preemption_cap,
            observer=observer,
        )

    def echo(self) -> dict:
        return {
            "model": self.geometry.to_dict(),
            "allocator": self.allocator,
            "page_group": page_group_label(self.page_group_size),
            "mode": self.mode,
            "pool_bytes": self.pool_bytes,
            "sliced": self.sliced,
            "reclaim_threshold": self.reclaim_threshold,
            "eager_groups": self.eager_groups,
            "c0_ms": self.c0_ms,
            "c1_ms_per_token": self.c1_ms_per_token,
        }


def _add_model_args(p):
    p.add_argument("--model", required=True,
                   help=f"geometry preset ({', '.join(sorted(PRESETS))}) or JSON file")
    p.add_argument("--tp", type=int, default=1, help="tensor-parallel degree (default 1)")


def _add_run_args(p):
    # defaults of None defer to the model JSON file (when one is supplied)
    # and then to the documented fallbacks in _build_config
    p.add_argument("--allocator", default=None, choices=ALLOCATORS)
    p.add_argument("--page-group", default=None, help="64K|128K|256K|2M (default 64K)")
    p.add_argument("--mode", default=None, choices=MODES)
    p.add_argument("--pool-gb", type=float, default=None, help="physical pool size in GiB (default 80)")
    p.add_argument("--max-batch", type=int, default=None,
                   help="override the geometry's request-slot count")
    p.add_argument("--sliced", action=argparse.BooleanOptionalAction, default=None,
                   help="layer-sliced layout: 2 buffers holding all layers")
    p.add_argument("--reclaim-threshold", type=float, default=None)
    p.add_argument("--eager-groups", default=None,
                   help="page-groups to pre-map for the next expected request; "
                        "'auto' sizes them for the trace's median prompt (default 0)")
    p.add_argument("--c0-ms", type=float, default=None, help="iteration base time (default 10)")
    p.add_argument("--c1-ms", type=float, default=None,
                   help="iteration time per token (default 0.0005)")
    p.add_argument("--latency-json", default=None,
                   help="JSON file overriding the per-call latency table")
    p.add_argument("--preemption-cap", type=int, default=1000)


def _load_model_doc(source: str) -> dict:
    path = Path(source)
    if source not in PRESETS and path.is_file():
        with open(path) as fh:
            return json.load(fh)
    return {}


def _build_config(args, trace: SimTrace | None = None,
                  allocator=None, page_group=None) -> RunConfig:
    """Resolve each knob as: explicit flag, then model-file key, then default."""
    geometry = load_geometry(args.model, tp_degree=args.tp)
    doc = _load_model_doc(args.model)

    def pick(flag_value, key, default):
        if flag_value is not None:
            return flag_value
        return doc.get(key, default)

    if args.max_batch is not None:
        geometry = ModelGeometry(**{**geometry.to_dict(), "max_batch": args.max_batch})
    page_group = pick(page_group or args.page_group, "page_group", "64K")
    sliced = bool(pick(args.sliced, "sliced", False))
    page_group_size = int(parse_page_group_size(str(page_group)))
    eager = pick(args.eager_groups, "eager_groups", 0)
    if isinstance(eager, str) and eager.strip().lower() == "auto":
        if trace is None:
            raise UsageError("--eager-groups auto requires a trace")
        eager = median_prompt_groups(trace, geometry, page_group_size, sliced)
    try:
        eager = int(eager)
    except (TypeError, ValueError):
        raise UsageError(f"--eager-groups must be an integer or 'auto', got {eager!r}") from None
    return RunConfig(
        geometry=geometry,
        allocator=allocator or pick(args.allocator, "allocator", "vattention"),
        page_group_size=page_group_size,
        mode=pick(args.mode, "mode", "sync"),
        pool_bytes=int(float(pick(args.pool_gb, "pool_gb", 80.0)) * GIB),
        sliced=sliced,
        reclaim_threshold=float(pick(args.reclaim_threshold, "reclaim_threshold", 0.10)),
        eager_groups=eager,
        c0_ms=float(pick(args.c0_ms, "c0_ms", 10.0)),
        c1_ms_per_token=float(pick(args.c1_ms, "c1_ms_per_token", 0.0005)),
        block_table_cell_us=DEFAULT_BLOCK_TABLE_CELL_US,
        preemption_cap=args.preemption_cap,
        latency_model=LatencyModel.from_json(args.latency_json) if args.latency_json else None,
    )


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


# -- analyze -------------------------------------------------------------------


def cmd_analyze(args) -> int:
    geometry = load_geometry(args.model)
    out_dir = Path(args.out) if args.out else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    block_rows, bw_rows, resv_rows = [], [], []
    for tp in (1, 2):
        g = geometry.with_tp(tp)
        for size in PAGE_GROUP_SIZES:
            tokens = block_size_tokens(g, size)
            all_layer_bytes = g.n_layers * g.per_token_layer_bytes
            sliced = sliced_block_size_tokens(g, size) if size >= all_layer_bytes else ""
            block_rows.append([tp, int(size), tokens, sliced])
            latency = DEFAULT_MAP_LATENCY_US[size]
            bw_rows.append([tp, int(size), repr(latency),
                            f"{allocation_bandwidth(size, tp, latency):.0f}"])
        plan = reservation_plan(g)
        resv_rows.append([
            tp, plan.buffer_count, plan.buffer_bytes, plan.total_bytes,
            plan.buffer_bytes // g.max_batch if g.max_batch else 0,
            per_token_kv_bytes(g),
        ])

    print(f"model: {args.model}  layers={geometry.n_layers} kv_heads={geometry.kv_heads_total} "
          f"head_dim={geometry.head_dim} bytes/elem={geometry.bytes_per_elem} "
          f"max_context={geometry.max_context} max_batch={geometry.max_batch}")
    print("\nblock size (tokens per page-group):")
    print(f"  {'tp':>3} " + "".join(f"{page_group_label(s):>8}" for s in PAGE_GROUP_SIZES))
    for tp in (1, 2):
        cells = [r[2] for r in block_rows if r[0] == tp]
        print(f"  {tp:>3} " + "".join(f"{c:>8}" for c in cells))
    print("\nsliced block size (tokens per page-group, all layers in one group):")
    for tp in (1, 2):
        cells = [r[3] if r[3] != "" else "-" for r in block_rows if r[0] == tp]
        print(f"  {tp:>3} " + "".join(f"{c:>8}" for c in cells))
    print("\nreservation plan (virtual):")
    for row in resv_rows:
        print(f"  tp={row[0]}: {row[1]} buffers x {human_bytes(row[2])} = {human_bytes(row[3])} "
              f"(per-request sub-tensor {human_bytes(row[4])}, per-token KV {row[5]} B)")
    print("\nallocation bandwidth (calibrated):")
    for row in bw_rows:
        print(f"  tp={row[0]} {page_group_label(row[1]):>4}: {float(row[3]) / 1e9:.2f} GB/s "
              f"(map {float(row[2]):.2f} us)")

    if out_dir:
        _write_csv(out_dir / "block_size.csv",
                   ["tp", "page_group_bytes", "block_tokens", "sliced_block_tokens"], block_rows)
        _write_csv(out_dir / "reservation.csv",
                   ["tp", "buffer_count", "buffer_bytes", "total_bytes",
                    "per_request_buffer_bytes", "per_token_kv_bytes"], resv_rows)
        _write_csv(out_dir / "bandwidth.csv",
                   ["tp", "page_group_bytes", "map_latency_us", "bandwidth_bytes_per_s"], bw_rows)
        print(f"\nwrote block_size.csv, reservation.csv, bandwidth.csv to {out_dir}")
    return 0


# -- simulate --------------------------------------------------------------------


def cmd_simulate(args) -> int:
    trace = SimTrace.from_csv(args.trace)
    config = _build_config(args, trace=trace)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics = config.execute(trace)
    metrics.write_iterations_csv(out_dir / "iterations.csv")
    summary = metrics.summary()
    summary["config"] = config.echo()
    with open(out_dir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{metrics.completed_requests} requests, max batch {metrics.max_batch}, "
          f"{summary['tokens_per_s']:.1f} tokens/s, "
          f"stall total {summary['stall_ms_total']:.1f} ms, "
          f"{metrics.preemptions} preemptions")
    print(f"wrote iterations.csv and summary.json to {out_dir}")
    return 0


# -- compare ---------------------------------------------------------------------

COMPARE_FIELDS = [
    "allocator", "page_group", "mode", "max_batch", "completed_requests",
    "tokens_per_s", "stall_ms_total", "sync_alloc_ms_total", "cpu_ms_total",
    "peak_committed_bytes", "peak_used_bytes", "mean_waste_bytes", "preemptions",
]


def cmd_compare(args) -> int:
    allocators = [a.strip() for a in args.allocators.split(",") if a.strip()]
    page_groups = [p.strip() for p in args.page_groups.split(",") if p.strip()]
    for a in allocators:
        if a not in ALLOCATORS:
            raise UsageError(f"unknown allocator {a!r}")
    variants = [(a, p) for a in allocators for p in page_groups]
    if len(variants) < 2:
        raise UsageError("compare needs at least two allocator x page-group variants")

    trace = SimTrace.from_csv(args.trace)
    rows = []
    for alloc, pg in variants:
        config = _build_config(args, trace=trace, allocator=alloc, page_group=pg)
        summary = config.execute(trace).summary()
        rows.append([
            alloc, page_group_label(parse_page_group_size(pg)), config.mode,
            summary["max_batch"], summary["completed_requests"],
            f"{summary['tokens_per_s']:.3f}", f"{summary['stall_ms_total']:.3f}",
            f"{summary['sync_alloc_ms_total']:.3f}", f"{summary['cpu_ms_total']:.3f}",
            summary["peak_committed_bytes"], summary["peak_used_bytes"],
            f"{summary['mean_waste_bytes']:.0f}", summary["preemptions"],
        ])

    widths = [max(len(str(r[i])) for r in rows + [COMPARE_FIELDS]) for i in range(len(COMPARE_FIELDS))]
    print("  ".join(f"{h:>{w}}" for h, w in zip(COMPARE_FIELDS, widths)))
    for row in rows:
        print("  ".join(f"{str(c):>{w}}" for c, w in zip(row, widths)))

    # smaller page-groups must never admit a smaller peak batch
    violations = []
    for alloc in allocators:
        by_size = {parse_page_group_size(r[1]): int(r[3]) for r in rows if r[0] == alloc}
        sizes = sorted(by_size)
        for small, large in zip(sizes, sizes[1:]):
            if by_size[small] < by_size[large]:
                violations.append(
                    f"{alloc}: max_batch({page_group_label(small)})="
                    f"{by_size[small]} < max_batch({page_group_label(large)})={by_size[large]}"
                )
    for v in violations:
        print(f"WARNING: batch-size monotonicity violated: {v}")

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(out_dir / "compare.csv", COMPARE_FIELDS, rows)
        print(f"wrote compare.csv to {out_dir}")
    return 0


# -- trace-gen --------------------------------------------------------------------


def cmd_trace_gen(args) -> int:
    try:
        trace = generate_trace(
            count=args.count, qps=args.qps, prompt_dist=args.prompt_dist,
            decode_dist=args.decode_dist, seed=args.seed,
            max_total_tokens=args.max_total_tokens,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    if out.parent != Path("."):
        out.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out)
    print(f"wrote {len(trace)} requests to {out}")
    return 0


# -- entry point ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="kvsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="sizing report: block sizes, reservation, bandwidth")
    _add_model_args(p)
    p.add_argument("--out", default=None, help="directory for CSV tables")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="replay a trace with one allocator configuration")
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True, help="directory for iterations.csv + summary.json")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="run allocator x page-group variants over one trace")
    _add_model_args(p)
    _add_run_args(p)
    p.add_argument("--allocators", default="vattention",
                   help="comma-separated subset of vattention,paged,static")
    p.add_argument("--page-groups", default="64K,2M", help="comma-separated sizes")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("trace-gen", help="generate a Poisson-arrival request trace")
    p.add_argument("--qps", type=float, required=True, help="mean queries per second")
    p.add_argument("--count", type=int, required=True, help="number of requests")
    p.add_argument("--prompt-dist", default="fixed:512",
                   help="fixed:N | uniform:LO:HI | lognormal:MU:SIGMA")
    p.add_argument("--decode-dist", default="fixed:128")
    p.add_argument("--max-total-tokens", type=int, default=None,
                   help="clamp prompt so prompt+decode stays within this bound")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output trace CSV path")
    p.set_defaults(func=cmd_trace_gen)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TraceFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SimulationAborted as exc:
        print(f"simulation aborted: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

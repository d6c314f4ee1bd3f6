"""Request traces: CSV input format and a seeded synthetic generator.

A trace row is (arrival_ms, prompt_tokens, decode_tokens). Arrivals are
non-decreasing integers; token counts are at least 1. Generation uses
Poisson arrivals (exponential inter-arrival times at a configured query
rate) with pluggable prompt/decode length distributions, fully determined
by the seed.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

TRACE_HEADER = ("arrival_ms", "prompt_tokens", "decode_tokens")


class TraceFormatError(ValueError):
    """A trace file row could not be parsed; message names the line."""


@dataclass(frozen=True)
class TraceRecord:
    arrival_ms: int
    prompt_tokens: int
    decode_tokens: int


@dataclass
class SimTrace:
    records: list[TraceRecord]

    def __post_init__(self) -> None:
        last = 0
        for i, rec in enumerate(self.records):
            if rec.arrival_ms < last:
                raise TraceFormatError(
                    f"record {i}: arrival {rec.arrival_ms} ms precedes {last} ms"
                )
            last = rec.arrival_ms
            if rec.prompt_tokens < 1 or rec.decode_tokens < 1:
                raise TraceFormatError(
                    f"record {i}: token counts must be >= 1, got "
                    f"({rec.prompt_tokens}, {rec.decode_tokens})"
                )

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def max_total_tokens(self) -> int:
        return max((r.prompt_tokens + r.decode_tokens for r in self.records), default=0)

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[int, int, int]]) -> "SimTrace":
        return cls([TraceRecord(int(a), int(p), int(d)) for a, p, d in rows])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SimTrace":
        records = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != TRACE_HEADER:
                raise TraceFormatError(
                    f"line 1: expected header {','.join(TRACE_HEADER)}"
                )
            for lineno, row in enumerate(reader, start=2):
                if not row or (len(row) == 1 and not row[0].strip()):
                    continue
                if len(row) != 3:
                    raise TraceFormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
                try:
                    records.append(TraceRecord(int(row[0]), int(row[1]), int(row[2])))
                except ValueError:
                    raise TraceFormatError(
                        f"line {lineno}: non-integer field in {row!r}"
                    ) from None
        try:
            return cls(records)
        except TraceFormatError as exc:
            raise TraceFormatError(f"{path}: {exc}") from None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRACE_HEADER)
            for rec in self.records:
                writer.writerow([rec.arrival_ms, rec.prompt_tokens, rec.decode_tokens])


LengthSampler = Callable[[random.Random], int]


def parse_length_dist(spec: str) -> LengthSampler:
    """Parse a length distribution spec.

    Supported forms: 'fixed:N', 'uniform:LO:HI' (inclusive), and
    'lognormal:MU:SIGMA' (of the underlying normal, rounded, floored at 1).
    """
    parts = spec.split(":")
    kind = parts[0].lower()
    try:
        if kind == "fixed" and len(parts) == 2:
            n = int(parts[1])
            if n < 1:
                raise ValueError
            return lambda rng: n
        if kind == "uniform" and len(parts) == 3:
            lo, hi = int(parts[1]), int(parts[2])
            if not 1 <= lo <= hi:
                raise ValueError
            return lambda rng: rng.randint(lo, hi)
        if kind == "lognormal" and len(parts) == 3:
            mu, sigma = float(parts[1]), float(parts[2])
            if sigma < 0 or not math.isfinite(mu) or not math.isfinite(sigma):
                raise ValueError
            return lambda rng: max(1, round(rng.lognormvariate(mu, sigma)))
    except ValueError:
        pass
    raise ValueError(
        f"invalid length distribution {spec!r}; expected fixed:N, "
        f"uniform:LO:HI or lognormal:MU:SIGMA"
    )


def generate_trace(
    count: int,
    qps: float,
    prompt_dist: str | LengthSampler = "fixed:512",
    decode_dist: str | LengthSampler = "fixed:128",
    seed: int = 0,
    max_total_tokens: int | None = None,
) -> SimTrace:
    """Deterministic Poisson-arrival trace with configured length mixes."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    if qps <= 0:
        raise ValueError(f"qps must be > 0, got {qps}")
    prompt = parse_length_dist(prompt_dist) if isinstance(prompt_dist, str) else prompt_dist
    decode = parse_length_dist(decode_dist) if isinstance(decode_dist, str) else decode_dist
    rng = random.Random(seed)
    records = []
    clock_ms = 0.0
    for _ in range(count):
        clock_ms += rng.expovariate(qps) * 1000.0
        p, d = prompt(rng), decode(rng)
        if max_total_tokens is not None and p + d > max_total_tokens:
            p = max(1, max_total_tokens - d)
        records.append(TraceRecord(int(round(clock_ms)), p, d))
    return SimTrace(records)

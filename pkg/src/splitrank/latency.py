"""Nearest-rank percentiles and a thread-safe trace accumulator."""
from __future__ import annotations

import math
import threading
from collections import defaultdict

PERCENTILES = (50, 90, 99)


def nearest_rank(values, p: float) -> float:
    """Smallest value with at least ``p`` percent of samples at or below it."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("no samples")
    rank = max(1, math.ceil(p / 100 * len(ordered)))
    return ordered[rank - 1]


def summarize(values, percentiles=PERCENTILES) -> dict[str, float]:
    return {f"p{p}": nearest_rank(values, p) for p in percentiles}


def record_latency(traces) -> dict[str, dict[str, float]]:
    """Per-phase p50/p90/p99 over a list of ``{phase: value}`` traces."""
    phases = defaultdict(list)
    count = 0
    for t in traces:
        count += 1
        for phase, v in t.items():
            if isinstance(v, (int, float)):
                phases[phase].append(v)
    if not count:
        raise ValueError("record_latency needs at least one trace")
    return {phase: summarize(vs) for phase, vs in phases.items()}


class LatencyRecorder:
    def __init__(self, window: int | None = None):
        self.window = window
        self._traces: list[dict] = []
        self._lock = threading.Lock()

    def add(self, trace: dict):
        with self._lock:
            self._traces.append(dict(trace))
            if self.window and len(self._traces) > self.window:
                del self._traces[: len(self._traces) - self.window]

    def traces(self) -> list[dict]:
        with self._lock:
            return list(self._traces)

    def report(self) -> dict[str, dict[str, float]]:
        return record_latency(self.traces())

    def __len__(self):
        return len(self._traces)

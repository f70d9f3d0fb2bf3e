"""Process-level wall time and allocator high-water measurement.

Only one measurement may be active per process at a time: tracemalloc keeps a
single global peak counter.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass
from typing import Any, Callable

MIB = float(2**20)
PHASES = ("training", "application")
_active = False


@dataclass(frozen=True)
class ResourceRecord:
    phase: str
    peak_memory_mib: float
    wall_time_seconds: float
    architecture: str = ""
    organ: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.peak_memory_mib < 0 or self.wall_time_seconds < 0:
            raise ValueError("resource values must be non-negative")


def measure_resources(
    task: Callable[[], Any], phase: str = "training", architecture: str = "", organ: str = ""
) -> tuple[ResourceRecord, Any]:
    """Run ``task()``; return its record (peak bytes above the starting level) and result."""
    global _active
    if _active:
        raise RuntimeError("nested resource measurement is not supported")
    _active = True
    started_here = not tracemalloc.is_tracing()
    if started_here:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        t0 = time.perf_counter()
        result = task()
        elapsed = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
    finally:
        if started_here:
            tracemalloc.stop()
        _active = False
    record = ResourceRecord(phase, max(0, peak - base) / MIB, elapsed, architecture, organ)
    return record, result

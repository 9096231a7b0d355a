"""Wall-clock timing of named simulator stages."""

from __future__ import annotations

import logging
import threading
import time
from collections import defaultdict
from collections.abc import Iterator
from contextlib import AbstractContextManager, contextmanager, nullcontext

import numpy as np

logger = logging.getLogger(__name__)


class StageProfiler:
    """Collect durations per stage name; a disabled profiler records nothing."""

    def __init__(self, enabled: bool = False) -> None:
        self.enabled = enabled
        self._lock = threading.Lock()
        self._durations: dict[str, list[float]] = defaultdict(list)

    def record(self, name: str, duration: float) -> None:
        if not self.enabled:
            return
        if duration < 0:
            logger.debug("ignore_negative_duration stage=%s duration=%s", name, duration)
            return
        with self._lock:
            self._durations[name].append(duration)

    @contextmanager
    def track(self, name: str) -> Iterator[None]:
        if not self.enabled:
            yield
            return
        start = time.perf_counter()
        try:
            yield
        finally:
            self.record(name, time.perf_counter() - start)

    def summary(self) -> dict[str, dict[str, float]]:
        with self._lock:
            snapshot = {name: list(values) for name, values in self._durations.items()}
        stats: dict[str, dict[str, float]] = {}
        for name, values in snapshot.items():
            arr = np.asarray(values, dtype=np.float64)
            stats[name] = {
                "count": float(arr.size),
                "total": float(arr.sum()),
                "mean": float(arr.mean()),
                "p50": float(np.percentile(arr, 50)),
                "p95": float(np.percentile(arr, 95)),
                "max": float(arr.max()),
            }
        return stats

    def report_lines(self) -> list[str]:
        return [
            "%s count=%d mean=%.3fs p50=%.3fs p95=%.3fs max=%.3fs total=%.3fs"
            % (
                name,
                int(s["count"]),
                s["mean"],
                s["p50"],
                s["p95"],
                s["max"],
                s["total"],
            )
            for name, s in sorted(self.summary().items())
        ]


def track(profiler: StageProfiler | None, name: str) -> AbstractContextManager[None]:
    """``profiler.track(name)``, or a no-op when no profiler is wired in."""
    if profiler is None:
        return nullcontext()
    return profiler.track(name)

from __future__ import annotations

import logging
import os
from collections.abc import Callable, Iterable, Iterator, Mapping
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

logger = logging.getLogger(__name__)

THREADS_ENV = "LOOPSIM_THREADS"
MIN_THREADS = 1
MAX_THREADS = 256

T = TypeVar("T")
R = TypeVar("R")


def clamp(value: int, minimum: int, maximum: int) -> int:
    """Bound value between minimum and maximum inclusive."""
    return max(minimum, min(value, maximum))


def default_threads() -> int:
    return clamp(os.cpu_count() or MIN_THREADS, MIN_THREADS, MAX_THREADS)


def parse_threads(raw: str | int | None, source: str = THREADS_ENV) -> int | None:
    """Parse a worker count; blank, invalid or non-positive values yield None."""
    if raw is None:
        return None
    if isinstance(raw, int):
        return clamp(raw, MIN_THREADS, MAX_THREADS) if raw > 0 else None
    cleaned = raw.strip()
    if not cleaned:
        return None
    try:
        parsed = int(cleaned)
    except ValueError:
        logger.warning("ignore invalid %s '%s'", source, cleaned)
        return None
    if parsed <= 0:
        logger.warning("ignore non-positive %s '%s'", source, cleaned)
        return None
    return clamp(parsed, MIN_THREADS, MAX_THREADS)


def resolve_threads(
    flag: int | None,
    environ: Mapping[str, str] | None = None,
    configured: int | None = None,
) -> int:
    """Pick the worker count: flag, then LOOPSIM_THREADS, then config, then cores."""
    env = os.environ if environ is None else environ
    for raw, source in (
        (flag, "--threads"),
        (env.get(THREADS_ENV), THREADS_ENV),
        (configured, "threads"),
    ):
        parsed = parse_threads(raw, source)
        if parsed is not None:
            logger.debug("resolved threads=%d source=%s", parsed, source)
            return parsed
    threads = default_threads()
    logger.debug("resolved threads=%d source=cpu_count", threads)
    return threads


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: int) -> Iterator[R]:
    """Lazily yield ``fn(item)`` in input order, whatever order the pool finishes in."""
    work = list(items)
    if threads <= 1 or len(work) <= 1:
        for item in work:
            yield fn(item)
        return
    with ThreadPoolExecutor(
        max_workers=min(threads, len(work)), thread_name_prefix="loopsim"
    ) as pool:
        yield from pool.map(fn, work)

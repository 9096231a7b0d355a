"""Slate quality: expected novelty (EPC), expected profile distance (EPD) and hit rate.

Rank ``k`` (1-based) is discounted by ``discount_base ** (k - 1)`` and both
expectation metrics are normalized so that their maximum is 1. Relevance is
binary: a complete-matrix rating at or above the threshold.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .dataset import CompleteMatrix
from .exposure import ExposureMatrix
from .policy import RecommendationSlate

logger = logging.getLogger(__name__)

DEFAULT_DISCOUNT_BASE = 0.85


class MetricError(ValueError):
    """Raised when a metric is evaluated on an invalid slate or context."""


@dataclass(frozen=True, eq=False)
class MetricContext:
    complete: CompleteMatrix
    exposure: ExposureMatrix
    item_factors: NDArray[np.float64]
    discount_base: float = DEFAULT_DISCOUNT_BASE

    def __post_init__(self) -> None:
        if not 0.0 < self.discount_base < 1.0:
            raise MetricError(f"discount_base must be in (0, 1), got {self.discount_base}")
        if self.exposure.shape != self.complete.values.shape:
            raise MetricError("exposure and complete matrices disagree on shape")
        if self.item_factors.shape[0] != self.complete.n_items:
            raise MetricError("item factors do not cover every item")

    def discounts(self, length: int) -> NDArray[np.float64]:
        return self.discount_base ** np.arange(length, dtype=np.float64)

    def relevance(self, u: int, items: NDArray[np.int64]) -> NDArray[np.float64]:
        threshold = self.complete.relevance_threshold
        return (self.complete.values[u, items] >= threshold).astype(np.float64)


def _items(slate: RecommendationSlate) -> NDArray[np.int64]:
    if len(slate) == 0:
        raise MetricError(f"empty slate for user {slate.user}")
    return slate.items


def epc(slate: RecommendationSlate, ctx: MetricContext, u: int) -> float:
    """Discounted share of relevant items the user has probably not seen."""
    items = _items(slate)
    disc = ctx.discounts(items.size)
    unseen = 1.0 - ctx.exposure.values[u, items]
    return float(np.sum(disc * ctx.relevance(u, items) * unseen) / disc.sum())


def cosine_distance(
    left: NDArray[np.float64], right: NDArray[np.float64]
) -> tuple[NDArray[np.float64], int]:
    """Pairwise ``(1 - cos) / 2`` between rows; pairs with a zero vector get 0.5.

    Returns the distance matrix and the number of zero-norm pairs.
    """
    left_norm = np.linalg.norm(left, axis=1)
    right_norm = np.linalg.norm(right, axis=1)
    denom = np.outer(left_norm, right_norm)
    degenerate = denom == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = np.where(degenerate, 0.0, (left @ right.T) / np.where(degenerate, 1.0, denom))
    distance = 0.5 * (1.0 - np.clip(cos, -1.0, 1.0))
    return distance, int(degenerate.sum())


def epd(
    slate: RecommendationSlate,
    ctx: MetricContext,
    u: int,
    history: Sequence[int] | NDArray[np.integer],
) -> float:
    """Discounted relevance-weighted distance between the slate and the user's history.

    An empty history yields 0.
    """
    items = _items(slate)
    past = np.asarray(history, dtype=np.int64)
    if past.size == 0:
        return 0.0
    disc = ctx.discounts(items.size)
    distance, degenerate = cosine_distance(ctx.item_factors[items], ctx.item_factors[past])
    if degenerate:
        logger.debug("zero_norm_factor_pairs user=%d pairs=%d", u, degenerate)
    weights = (disc * ctx.relevance(u, items))[:, None] * ctx.relevance(u, past)[None, :]
    return float(np.sum(weights * distance) / (disc.sum() * past.size))


def hit_rate(slate: RecommendationSlate, ctx: MetricContext, u: int) -> float:
    """Fraction of the slate the user finds relevant."""
    items = _items(slate)
    return float(ctx.relevance(u, items).mean())

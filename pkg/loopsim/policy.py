"""Slate construction: top-N ranking and per-slot epsilon-greedy exploration."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .dataset import RatingMatrix
from .recommender import FactorModel

logger = logging.getLogger(__name__)

DEFAULT_SLATE_SIZE = 10
DEFAULT_EPSILON = 0.1


class PolicyError(ValueError):
    """Raised for invalid slate requests."""


@dataclass(frozen=True, eq=False)
class RecommendationSlate:
    """Ranked items shown to one user.

    ``explored[k]`` marks slots filled by random exploration; their score is NaN.
    """

    user: int
    items: NDArray[np.int64]
    scores: NDArray[np.float64]
    truncated: bool = False
    explored: NDArray[np.bool_] = field(default_factory=lambda: np.zeros(0, dtype=bool))

    def __post_init__(self) -> None:
        if self.items.shape != self.scores.shape:
            raise PolicyError("items and scores must be parallel")
        if np.unique(self.items).size != self.items.size:
            raise PolicyError(f"slate for user {self.user} repeats an item")
        if self.explored.size == 0 and self.items.size:
            object.__setattr__(self, "explored", np.zeros(self.items.size, dtype=bool))
        if self.explored.shape != self.items.shape:
            raise PolicyError("explored flags must be parallel to items")

    def __len__(self) -> int:
        return int(self.items.size)


def _check_size(n: int) -> None:
    if n < 1:
        raise PolicyError(f"slate size must be >= 1, got {n}")


def top_n_batch(
    model: FactorModel,
    history: RatingMatrix,
    n: int,
    users: Sequence[int] | NDArray[np.integer] | None = None,
) -> list[RecommendationSlate]:
    """Top-``n`` unrated items for each of ``users`` (all users by default).

    Scores are sorted descending; equal scores keep ascending item order.
    Cold items (all-zero factors) are never ranked.
    """
    _check_size(n)
    if history.shape != (model.n_users, model.n_items):
        raise PolicyError(
            f"history shape {history.shape} does not match model "
            f"({model.n_users}, {model.n_items})"
        )
    selected = (
        np.arange(model.n_users, dtype=np.int64)
        if users is None
        else np.asarray(users, dtype=np.int64)
    )
    blocked = history.observed_mask()[selected] | model.cold_items()[None, :]
    scores = model.P[selected] @ model.Q.T
    scores[blocked] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")[:, :n]
    available = model.n_items - blocked.sum(axis=1)

    slates: list[RecommendationSlate] = []
    for row, user in enumerate(selected):
        length = int(min(n, available[row]))
        items = order[row, :length].astype(np.int64)
        slate = RecommendationSlate(
            user=int(user),
            items=items,
            scores=scores[row, items],
            truncated=length < n,
        )
        slates.append(slate)
    truncated = sum(1 for s in slates if s.truncated)
    if truncated:
        logger.warning("slates_truncated users=%d requested=%d", truncated, n)
    return slates


def top_n(model: FactorModel, m: RatingMatrix, u: int, n: int) -> RecommendationSlate:
    if not 0 <= u < model.n_users:
        raise PolicyError(f"user {u} out of range")
    return top_n_batch(model, m, n, [u])[0]


def mab_mix(
    base: RecommendationSlate,
    candidates: Sequence[int] | NDArray[np.integer],
    epsilon: float,
    rng: int | np.random.Generator,
) -> RecommendationSlate:
    """Replace each slot with probability ``epsilon`` by a random candidate.

    Replacements are drawn uniformly from ``candidates`` not already on the
    slate; a slot keeps its item when no such candidate is left.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise PolicyError(f"epsilon must be in [0, 1], got {epsilon}")
    generator = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    if epsilon == 0.0 or len(base) == 0:
        return base
    pool = np.unique(np.asarray(candidates, dtype=np.int64))
    items = base.items.copy()
    scores = base.scores.copy()
    explored = base.explored.copy()
    flips = generator.random(items.size) < epsilon
    for slot in np.flatnonzero(flips):
        free = np.setdiff1d(pool, items, assume_unique=True)
        if free.size == 0:
            logger.debug("exploration_exhausted user=%d slot=%d", base.user, slot)
            continue
        items[slot] = free[generator.integers(free.size)]
        scores[slot] = np.nan
        explored[slot] = True
    return RecommendationSlate(
        user=base.user,
        items=items,
        scores=scores,
        truncated=base.truncated,
        explored=explored,
    )

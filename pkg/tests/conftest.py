from __future__ import annotations

import os
from collections.abc import Callable
from pathlib import Path

import numpy as np
import pytest

from loopsim.dataset import CompleteMatrix, RatingMatrix
from loopsim.exposure import PoissonConfig
from loopsim.recommender import TrainingConfig

ML100K_ENV = "LOOPSIM_ML100K"


def synthetic_lines(
    n_users: int = 12,
    n_items: int = 15,
    density: float = 0.35,
    seed: int = 0,
) -> list[tuple[int, int, int, int]]:
    """(user_id, item_id, rating, timestamp) rows covering every user and item.

    Identifiers are offset so that re-indexing is visible.
    """
    rng = np.random.default_rng(seed)
    cells = {(u, u % n_items) for u in range(n_users)}
    cells |= {(i % n_users, i) for i in range(n_items)}
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                cells.add((u, i))
    rows = []
    for u, i in sorted(cells):
        rating = int(rng.integers(1, 6))
        rows.append((u + 1, 10 * (i + 1), rating, 880_000_000 + int(rng.integers(0, 10_000))))
    return rows


def write_movielens(path: Path, rows: list[tuple[int, int, int, int]], delimiter: str = "\t") -> Path:
    path.write_text(
        "".join(delimiter.join(str(v) for v in row) + "\n" for row in rows),
        encoding="utf-8",
    )
    return path


@pytest.fixture
def movielens_file(tmp_path: Path) -> Path:
    return write_movielens(tmp_path / "u.data", synthetic_lines())


@pytest.fixture
def toy_ratings() -> RatingMatrix:
    rows = synthetic_lines(n_users=6, n_items=8, density=0.4, seed=3)
    users = np.array([r[0] - 1 for r in rows])
    items = np.array([r[1] // 10 - 1 for r in rows])
    return RatingMatrix.from_arrays(
        6,
        8,
        users,
        items,
        [float(r[2]) for r in rows],
        [r[3] for r in rows],
    )


@pytest.fixture
def random_complete() -> Callable[[int, int, int], CompleteMatrix]:
    def make(n_users: int, n_items: int, seed: int = 0) -> CompleteMatrix:
        rng = np.random.default_rng(seed)
        return CompleteMatrix(values=rng.uniform(1.0, 5.0, size=(n_users, n_items)))

    return make


@pytest.fixture
def fast_training() -> TrainingConfig:
    return TrainingConfig(alpha=0.01, k=3, epochs=5, seed=1)


@pytest.fixture
def fast_poisson() -> PoissonConfig:
    return PoissonConfig(k=3, iters=10)


@pytest.fixture
def ml100k_path() -> Path:
    raw = os.environ.get(ML100K_ENV)
    if not raw or not Path(raw).is_file():
        pytest.skip(f"{ML100K_ENV} does not point to the MovieLens 100K u.data file")
    return Path(raw)

"""Rating matrices, MovieLens ingestion, temporal batches and semi-synthetic completion."""

from __future__ import annotations

import io
import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy import sparse

from .recommender import TrainingConfig, train

logger = logging.getLogger(__name__)

MovieLensFormat = Literal["tab_100k", "coloncolon_1m"]
MOVIELENS_DELIMITERS: dict[str, str] = {"tab_100k": "\t", "coloncolon_1m": "::"}

RATING_MIN = 1.0
RATING_MAX = 5.0
DEFAULT_RELEVANCE_THRESHOLD = 4.0

DENSE_MAGIC = b"LSIM"
DENSE_VERSION = 1
_DENSE_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("rows", "<u4"), ("cols", "<u4")])


class DatasetError(ValueError):
    """Raised for unreadable, malformed or inconsistent rating data."""


@dataclass(frozen=True, eq=False)
class RatingMatrix:
    """Sparse user x item ratings stored as parallel COO arrays.

    Indices are dense and 0-based; a missing entry means ``R_ui = 0``.
    ``user_ids`` / ``item_ids`` map indices back to the identifiers of the
    source file when the matrix was ingested from disk.
    """

    n_users: int
    n_items: int
    users: NDArray[np.int64]
    items: NDArray[np.int64]
    ratings: NDArray[np.float64]
    timestamps: NDArray[np.int64] | None = None
    user_ids: NDArray[np.int64] | None = None
    item_ids: NDArray[np.int64] | None = None

    def __post_init__(self) -> None:
        size = len(self.users)
        if len(self.items) != size or len(self.ratings) != size:
            raise DatasetError("users, items and ratings must have equal length")
        if self.timestamps is not None and len(self.timestamps) != size:
            raise DatasetError("timestamps must align with ratings")
        if size:
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise DatasetError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise DatasetError("item index out of range")
            if np.any(self.ratings < RATING_MIN) or np.any(self.ratings > RATING_MAX):
                raise DatasetError("ratings must lie in [1, 5]")

    @classmethod
    def from_arrays(
        cls,
        n_users: int,
        n_items: int,
        users: Sequence[int] | NDArray[np.integer],
        items: Sequence[int] | NDArray[np.integer],
        ratings: Sequence[float] | NDArray[np.floating],
        timestamps: Sequence[int] | NDArray[np.integer] | None = None,
    ) -> RatingMatrix:
        return cls(
            n_users=int(n_users),
            n_items=int(n_items),
            users=np.asarray(users, dtype=np.int64),
            items=np.asarray(items, dtype=np.int64),
            ratings=np.asarray(ratings, dtype=np.float64),
            timestamps=(
                None if timestamps is None else np.asarray(timestamps, dtype=np.int64)
            ),
        )

    @property
    def nnz(self) -> int:
        return int(len(self.ratings))

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_users, self.n_items

    def keys(self) -> NDArray[np.int64]:
        """Flat ``user * n_items + item`` keys, one per stored entry."""
        return self.users * self.n_items + self.items

    def to_csr(self) -> sparse.csr_matrix:
        return sparse.csr_matrix(
            (self.ratings, (self.users, self.items)), shape=self.shape
        )

    def to_dense(self) -> NDArray[np.float64]:
        dense = np.zeros(self.shape, dtype=np.float64)
        dense[self.users, self.items] = self.ratings
        return dense

    def observed_mask(self) -> NDArray[np.bool_]:
        mask = np.zeros(self.shape, dtype=bool)
        mask[self.users, self.items] = True
        return mask

    def item_counts(self) -> NDArray[np.float64]:
        return np.bincount(self.items, minlength=self.n_items).astype(np.float64)

    def user_counts(self) -> NDArray[np.int64]:
        return np.bincount(self.users, minlength=self.n_users)

    def history(self, user: int) -> NDArray[np.int64]:
        return np.sort(self.items[self.users == user])

    def take(self, index: NDArray[np.integer]) -> RatingMatrix:
        """Return the entries at ``index`` as a view over the same global index."""
        return RatingMatrix(
            n_users=self.n_users,
            n_items=self.n_items,
            users=self.users[index],
            items=self.items[index],
            ratings=self.ratings[index],
            timestamps=None if self.timestamps is None else self.timestamps[index],
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def append(
        self,
        users: NDArray[np.integer],
        items: NDArray[np.integer],
        ratings: NDArray[np.floating],
    ) -> RatingMatrix:
        """Return a new matrix with extra entries; appended entries carry no timestamp."""
        timestamps = None
        if self.timestamps is not None:
            fill = self.timestamps.max(initial=0)
            timestamps = np.concatenate(
                [self.timestamps, np.full(len(users), fill, dtype=np.int64)]
            )
        return RatingMatrix(
            n_users=self.n_users,
            n_items=self.n_items,
            users=np.concatenate([self.users, np.asarray(users, dtype=np.int64)]),
            items=np.concatenate([self.items, np.asarray(items, dtype=np.int64)]),
            ratings=np.concatenate(
                [self.ratings, np.asarray(ratings, dtype=np.float64)]
            ),
            timestamps=timestamps,
            user_ids=self.user_ids,
            item_ids=self.item_ids,
        )

    def triples(self) -> list[tuple[int, int, float]]:
        return [
            (int(u), int(i), float(r))
            for u, i, r in zip(self.users, self.items, self.ratings)
        ]


@dataclass(frozen=True, eq=False)
class CompleteMatrix:
    """Dense ground-truth ratings with no missing cells."""

    values: NDArray[np.float64]
    relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise DatasetError("complete matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise DatasetError("complete matrix has non-finite cells")
        if np.any(self.values < RATING_MIN) or np.any(self.values > RATING_MAX):
            raise DatasetError("complete matrix cells must lie in [1, 5]")

    @property
    def n_users(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.values.shape[1])

    def relevant(self) -> NDArray[np.bool_]:
        return self.values >= self.relevance_threshold

    def save(self, path: Path) -> None:
        write_dense(path, self.values)

    @classmethod
    def load(
        cls, path: Path, relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD
    ) -> CompleteMatrix:
        return cls(read_dense(path), relevance_threshold=relevance_threshold)


@dataclass(frozen=True)
class TemporalSplit:
    """Timestamp-ordered batches that partition a rating matrix."""

    batches: tuple[RatingMatrix, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.batches)

    def prefix(self, k: int) -> RatingMatrix:
        """Union of batches ``0..k`` (the training window ending at batch ``k``)."""
        if not 0 <= k < len(self.batches):
            raise DatasetError(f"batch index {k} out of range")
        return concat(self.batches[: k + 1])


def concat(parts: Sequence[RatingMatrix]) -> RatingMatrix:
    if not parts:
        raise DatasetError("nothing to concatenate")
    first = parts[0]
    has_time = all(p.timestamps is not None for p in parts)
    return RatingMatrix(
        n_users=first.n_users,
        n_items=first.n_items,
        users=np.concatenate([p.users for p in parts]),
        items=np.concatenate([p.items for p in parts]),
        ratings=np.concatenate([p.ratings for p in parts]),
        timestamps=(
            np.concatenate([p.timestamps for p in parts if p.timestamps is not None])
            if has_time
            else None
        ),
        user_ids=first.user_ids,
        item_ids=first.item_ids,
    )


_FIELDS = ["user", "item", "rating", "timestamp"]
_OVERFLOW = "overflow"


def _strip(value: object) -> object:
    return value.strip() if isinstance(value, str) else value


def _read_frame(path: Path, fmt: str) -> pd.DataFrame:
    if fmt not in MOVIELENS_DELIMITERS:
        raise DatasetError(f"unknown format {fmt!r}; expected one of {sorted(MOVIELENS_DELIMITERS)}")
    delimiter = MOVIELENS_DELIMITERS[fmt]
    try:
        raw = pd.read_csv(
            path,
            sep=delimiter,
            header=None,
            names=[*_FIELDS, _OVERFLOW],
            index_col=False,
            dtype=str,
            engine="python",
            skip_blank_lines=False,
            encoding="latin-1",
        )
    except pd.errors.EmptyDataError:
        raise DatasetError(f"no entries in {path}") from None
    except pd.errors.ParserError as exc:
        found = re.search(r"line (\d+), saw (\d+)", str(exc))
        if found is None:
            raise DatasetError(f"{path}: {exc}") from exc
        raise DatasetError(
            f"{path}:{found.group(1)}: expected 4 fields separated by {delimiter!r}, "
            f"got {found.group(2)}"
        ) from exc
    raw["line"] = raw.index + 1
    columns = [*_FIELDS, _OVERFLOW]
    raw[columns] = raw[columns].apply(lambda col: col.map(_strip))
    present = raw[columns].notna() & raw[columns].ne("")
    raw = raw[present.any(axis=1)]
    if raw.empty:
        raise DatasetError(f"no entries in {path}")
    counts = present.loc[raw.index].sum(axis=1)
    malformed = counts != len(_FIELDS)
    if malformed.any():
        line_no = int(raw.loc[malformed, "line"].iloc[0])
        got = int(counts[malformed].iloc[0])
        raise DatasetError(
            f"{path}:{line_no}: expected 4 fields separated by {delimiter!r}, got {got}"
        )
    numeric = raw[_FIELDS].apply(pd.to_numeric, errors="coerce")
    bad = numeric.isna().any(axis=1)
    if bad.any():
        line_no = int(raw.loc[bad, "line"].iloc[0])
        raise DatasetError(f"{path}:{line_no}: unparsable field")
    numeric["line"] = raw["line"].astype(np.int64)
    return numeric.reset_index(drop=True)


def load_movielens(path: Path | str, fmt: MovieLensFormat = "tab_100k") -> RatingMatrix:
    """Load a MovieLens ratings file and re-index users and items densely.

    Indices follow ascending original identifiers; the originals are kept on
    the returned matrix for reporting.
    """
    path = Path(path)
    frame = _read_frame(path, fmt)
    out_of_range = (frame["rating"] < RATING_MIN) | (frame["rating"] > RATING_MAX)
    if out_of_range.any():
        row = frame.loc[out_of_range].iloc[0]
        raise DatasetError(
            f"{path}:{int(row['line'])}: rating {row['rating']} outside [1, 5]"
        )
    duplicated = frame.duplicated(subset=["user", "item"])
    if duplicated.any():
        row = frame.loc[duplicated].iloc[0]
        raise DatasetError(
            f"{path}:{int(row['line'])}: duplicate rating for user {int(row['user'])} item {int(row['item'])}"
        )
    user_codes, user_ids = pd.factorize(frame["user"].astype(np.int64), sort=True)
    item_codes, item_ids = pd.factorize(frame["item"].astype(np.int64), sort=True)
    matrix = RatingMatrix(
        n_users=len(user_ids),
        n_items=len(item_ids),
        users=np.asarray(user_codes, dtype=np.int64),
        items=np.asarray(item_codes, dtype=np.int64),
        ratings=frame["rating"].to_numpy(dtype=np.float64),
        timestamps=frame["timestamp"].to_numpy(dtype=np.int64),
        user_ids=np.asarray(user_ids, dtype=np.int64),
        item_ids=np.asarray(item_ids, dtype=np.int64),
    )
    logger.info(
        "dataset_loaded path=%s format=%s users=%d items=%d entries=%d",
        path.name,
        fmt,
        matrix.n_users,
        matrix.n_items,
        matrix.nnz,
    )
    return matrix


def save_movielens(m: RatingMatrix, path: Path | str, fmt: MovieLensFormat = "tab_100k") -> None:
    """Write ``m`` back out in MovieLens layout using the original identifiers."""
    delimiter = MOVIELENS_DELIMITERS[fmt]
    user_ids = m.user_ids if m.user_ids is not None else np.arange(m.n_users)
    item_ids = m.item_ids if m.item_ids is not None else np.arange(m.n_items)
    timestamps = m.timestamps if m.timestamps is not None else np.zeros(m.nnz, dtype=np.int64)
    buffer = io.StringIO()
    for u, i, r, t in zip(m.users, m.items, m.ratings, timestamps):
        rating = int(r) if float(r).is_integer() else float(r)
        buffer.write(delimiter.join(str(v) for v in (user_ids[u], item_ids[i], rating, t)))
        buffer.write("\n")
    Path(path).write_text(buffer.getvalue(), encoding="utf-8")


def temporal_split(m: RatingMatrix, n_batches: int = 4) -> TemporalSplit:
    """Partition ``m`` into ``n_batches`` near-equal batches ordered by timestamp.

    Ties in time keep the input order.
    """
    if n_batches < 2:
        raise DatasetError("temporal_split needs at least 2 batches")
    if m.timestamps is None:
        raise DatasetError("temporal_split needs timestamps")
    if m.nnz < n_batches:
        raise DatasetError(f"cannot split {m.nnz} entries into {n_batches} batches")
    order = np.argsort(m.timestamps, kind="stable")
    batches = tuple(m.take(chunk) for chunk in np.array_split(order, n_batches))
    logger.info(
        "temporal_split batches=%d sizes=%s",
        n_batches,
        [b.nnz for b in batches],
    )
    return TemporalSplit(batches=batches)


def complete_semisynthetic(
    m: RatingMatrix,
    trainer: TrainingConfig,
    seed: int,
    relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD,
) -> CompleteMatrix:
    """Fill every missing cell with a clamped vanilla-MF prediction.

    Observed cells are copied verbatim; the result is deterministic per seed.
    """
    if m.nnz == 0:
        raise DatasetError("cannot complete an empty rating matrix")
    cfg = replace(trainer, seed=int(seed))
    model = train(m, None, "mf", cfg)
    values = np.clip(model.P @ model.Q.T, RATING_MIN, RATING_MAX)
    values[m.users, m.items] = m.ratings
    logger.info(
        "completion_done users=%d items=%d observed=%d mean=%.4f relevant_share=%.4f",
        m.n_users,
        m.n_items,
        m.nnz,
        float(values.mean()),
        float((values >= relevance_threshold).mean()),
    )
    return CompleteMatrix(values=values, relevance_threshold=relevance_threshold)


def write_dense(path: Path | str, values: NDArray[np.floating]) -> None:
    """Write a dense matrix in the LSIM layout (little-endian header + ``<f4`` rows)."""
    matrix = np.asarray(values)
    if matrix.ndim != 2:
        raise DatasetError("dense export needs a 2-D matrix")
    header = np.array(
        [(DENSE_MAGIC, DENSE_VERSION, matrix.shape[0], matrix.shape[1])],
        dtype=_DENSE_HEADER,
    )
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())
    logger.info("dense_written path=%s shape=%s", path.name, matrix.shape)


def read_dense(path: Path | str) -> NDArray[np.float64]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _DENSE_HEADER.itemsize:
        raise DatasetError(f"{path}: truncated header")
    header = np.frombuffer(raw[: _DENSE_HEADER.itemsize], dtype=_DENSE_HEADER)[0]
    if bytes(header["magic"]) != DENSE_MAGIC:
        raise DatasetError(f"{path}: bad magic {bytes(header['magic'])!r}")
    if int(header["version"]) != DENSE_VERSION:
        raise DatasetError(f"{path}: unsupported version {int(header['version'])}")
    rows, cols = int(header["rows"]), int(header["cols"])
    payload = raw[_DENSE_HEADER.itemsize :]
    if len(payload) != rows * cols * 4:
        raise DatasetError(
            f"{path}: payload has {len(payload)} bytes, expected {rows * cols * 4}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, cols).astype(np.float64)


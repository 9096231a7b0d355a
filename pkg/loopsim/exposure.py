"""Exposure estimation: who has probably seen what.

Three estimators produce an exposure matrix ``E`` with ``E_ui`` the
probability that user ``u`` has seen item ``i``: a uniform (fair) baseline,
an item-popularity model and a Gamma-Poisson factorization fitted by
coordinate-ascent variational inference on the binarized interactions.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from scipy import sparse, special

from . import stats
from .dataset import RatingMatrix, TemporalSplit, write_dense
from .profiling import StageProfiler, track

logger = logging.getLogger(__name__)

ELBO_SLACK = 1e-6
AUC_TTEST_COLUMNS: tuple[str, ...] = (
    "model_a",
    "model_b",
    "auc_mean_a",
    "auc_mean_b",
    "t_statistic",
    "p_value",
)
EXPOSURE_MODELS: tuple[str, ...] = ("uniform", "popularity", "poisson", "random")


class ExposureError(RuntimeError):
    """Raised when an exposure model cannot be built, fitted or evaluated."""


@dataclass(frozen=True, eq=False)
class ExposureMatrix:
    """Dense user x item probabilities of having seen an item."""

    values: NDArray[np.float64]

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise ExposureError("exposure matrix must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ExposureError("exposure matrix has non-finite cells")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ExposureError("exposure cells must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return int(self.values.shape[0]), int(self.values.shape[1])

    def user_jsd(self) -> NDArray[np.float64]:
        """JSD of every L1-normalized row against the uniform distribution.

        Rows without mass count as uniform and get 0.
        """
        n_users, n_items = self.shape
        out = np.zeros(n_users, dtype=np.float64)
        has_mass = self.values.sum(axis=1) > 0
        if np.any(has_mass):
            uniform = np.full((int(has_mass.sum()), n_items), 1.0 / n_items)
            out[has_mass] = stats.jsd(self.values[has_mass], uniform)
        return out

    def save(self, path: Path | str) -> None:
        write_dense(path, self.values)


@dataclass(frozen=True)
class PoissonConfig:
    """Gamma-Poisson factorization settings.

    Attributes:
        k: Latent dimension.
        a: Shape of the Gamma prior on both factor matrices.
        b: Rate of the Gamma prior on both factor matrices.
        iters: Number of coordinate-ascent sweeps.
    """

    k: int = 10
    a: float = 0.3
    b: float = 0.3
    iters: int = 100

    def __post_init__(self) -> None:
        if self.k < 1 or self.iters < 1:
            raise ExposureError(f"k and iters must be >= 1, got {self.k}, {self.iters}")
        if self.a <= 0 or self.b <= 0:
            raise ExposureError(f"Gamma priors must be positive, got a={self.a} b={self.b}")


@dataclass(frozen=True, eq=False)
class PoissonFactors:
    """Posterior-mean factors of a fitted Gamma-Poisson model."""

    user_activity: NDArray[np.float64]
    item_popularity: NDArray[np.float64]
    priors: tuple[float, float]
    elbo: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        if self.user_activity.shape[1] != self.item_popularity.shape[1]:
            raise ExposureError("user and item factors disagree on the latent dimension")
        if np.any(self.user_activity < 0) or np.any(self.item_popularity < 0):
            raise ExposureError("Poisson factors must be non-negative")

    @property
    def k(self) -> int:
        return int(self.user_activity.shape[1])

    def rates(self) -> NDArray[np.float64]:
        """Expected Poisson rate for every (user, item) cell."""
        return self.user_activity @ self.item_popularity.T

    def exposure(self) -> ExposureMatrix:
        return ExposureMatrix(values=rate_to_probability(self.rates()))


def rate_to_probability(rate: NDArray[np.float64] | float) -> NDArray[np.float64]:
    """``P(Poisson(rate) >= 1) = 1 - exp(-rate)``."""
    return np.clip(-np.expm1(-np.asarray(rate, dtype=np.float64)), 0.0, 1.0)


def poisson_exposure_prob(f: PoissonFactors, u: int, i: int) -> float:
    rate = float(f.user_activity[u] @ f.item_popularity[i])
    return float(rate_to_probability(rate))


def uniform_exposure(n_users: int, n_items: int) -> ExposureMatrix:
    if n_items < 1:
        raise ExposureError("uniform exposure needs at least one item")
    if n_users < 0:
        raise ExposureError(f"negative user count {n_users}")
    return ExposureMatrix(values=np.full((n_users, n_items), 1.0 / n_items))


def popularity_exposure(m: RatingMatrix) -> ExposureMatrix:
    """Share of users who rated each item, repeated for every user."""
    if m.n_users < 1 or m.n_items < 1:
        raise ExposureError("popularity exposure needs a non-empty matrix")
    seen = np.unique(m.keys())
    counts = np.bincount(seen % m.n_items, minlength=m.n_items).astype(np.float64)
    column = counts / m.n_users
    return ExposureMatrix(values=np.broadcast_to(column, m.shape).copy())


def _expectations(
    shape: NDArray[np.float64], rate: NDArray[np.float64]
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    return shape / rate, special.digamma(shape) - np.log(rate)


def _gamma_bound(
    shape: NDArray[np.float64], rate: NDArray[np.float64], a: float, b: float
) -> float:
    """``E_q[log p] - E_q[log q]`` summed over Gamma-distributed factors."""
    mean, log_mean = _expectations(shape, rate)
    prior = a * math.log(b) - special.gammaln(a) + (a - 1.0) * log_mean - b * mean
    posterior = (
        shape * np.log(rate) - special.gammaln(shape) + (shape - 1.0) * log_mean - rate * mean
    )
    return float(np.sum(prior - posterior))


def _responsibilities(
    log_user: NDArray[np.float64],
    log_item: NDArray[np.float64],
    users: NDArray[np.int64],
    items: NDArray[np.int64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    logits = log_user[users] + log_item[items]
    norm = special.logsumexp(logits, axis=1, keepdims=True)
    return np.exp(logits - norm), norm[:, 0]


def fit_poisson_exposure(
    m: RatingMatrix,
    k: int = 10,
    priors: tuple[float, float] = (0.3, 0.3),
    iters: int = 100,
    seed: int = 0,
    *,
    profiler: StageProfiler | None = None,
) -> PoissonFactors:
    """Fit ``Y_ui ~ Poisson(theta_u . beta_i)`` with Gamma priors on both factors.

    ``Y`` is the binarized interaction matrix. Each sweep refreshes the
    multinomial responsibilities before the user block and again before the
    item block, so the bound never decreases.
    """
    a, b = float(priors[0]), float(priors[1])
    cfg = PoissonConfig(k=k, a=a, b=b, iters=iters)
    keys = np.unique(m.keys())
    users = keys // m.n_items
    items = keys % m.n_items
    nnz = keys.size
    if nnz == 0:
        raise ExposureError("cannot fit Poisson exposure on an empty matrix")
    # nnz x owner incidence; sparse products keep the reductions order-independent
    by_user = sparse.csr_matrix(
        (np.ones(nnz), (users, np.arange(nnz))), shape=(m.n_users, nnz)
    )
    by_item = sparse.csr_matrix(
        (np.ones(nnz), (items, np.arange(nnz))), shape=(m.n_items, nnz)
    )

    rng = np.random.default_rng(seed)
    user_shape = a + rng.uniform(0.0, 0.01, size=(m.n_users, cfg.k))
    user_rate = b + rng.uniform(0.0, 0.01, size=(m.n_users, cfg.k))
    item_shape = a + rng.uniform(0.0, 0.01, size=(m.n_items, cfg.k))
    item_rate = b + rng.uniform(0.0, 0.01, size=(m.n_items, cfg.k))

    trace: list[float] = []
    with track(profiler, "exposure.fit"):
        for sweep in range(1, cfg.iters + 1):
            theta, log_theta = _expectations(user_shape, user_rate)
            beta, log_beta = _expectations(item_shape, item_rate)
            phi, _ = _responsibilities(log_theta, log_beta, users, items)
            user_shape = a + by_user @ phi
            user_rate = b + np.broadcast_to(beta.sum(axis=0), user_rate.shape)

            theta, log_theta = _expectations(user_shape, user_rate)
            phi, _ = _responsibilities(log_theta, log_beta, users, items)
            item_shape = a + by_item @ phi
            item_rate = b + np.broadcast_to(theta.sum(axis=0), item_rate.shape)

            beta, log_beta = _expectations(item_shape, item_rate)
            _, log_norm = _responsibilities(log_theta, log_beta, users, items)
            value = (
                float(log_norm.sum())
                - float(theta.sum(axis=0) @ beta.sum(axis=0))
                + _gamma_bound(user_shape, user_rate, a, b)
                + _gamma_bound(item_shape, item_rate, a, b)
            )
            if not math.isfinite(value):
                logger.error("poisson_diverged sweep=%d k=%d seed=%d", sweep, cfg.k, seed)
                raise ExposureError(f"non-finite ELBO at sweep {sweep}")
            if trace and value < trace[-1] - ELBO_SLACK * max(1.0, abs(trace[-1])):
                logger.warning(
                    "elbo_decreased sweep=%d previous=%.6f current=%.6f",
                    sweep,
                    trace[-1],
                    value,
                )
            trace.append(value)
            logger.debug("poisson_sweep sweep=%d elbo=%.6f", sweep, value)

    theta, _ = _expectations(user_shape, user_rate)
    beta, _ = _expectations(item_shape, item_rate)
    logger.debug(
        "poisson_fitted users=%d items=%d interactions=%d k=%d elbo=%.4f",
        m.n_users,
        m.n_items,
        nnz,
        cfg.k,
        trace[-1],
    )
    return PoissonFactors(
        user_activity=np.asarray(theta),
        item_popularity=np.asarray(beta),
        priors=(a, b),
        elbo=tuple(trace),
    )


class ExposureModel(Protocol):
    name: str

    def fit(self, m: RatingMatrix, seed: int) -> ExposureMatrix: ...


@dataclass(frozen=True)
class UniformExposure:
    name: str = "uniform"

    def fit(self, m: RatingMatrix, seed: int) -> ExposureMatrix:
        return uniform_exposure(m.n_users, m.n_items)


@dataclass(frozen=True)
class PopularityExposure:
    name: str = "popularity"

    def fit(self, m: RatingMatrix, seed: int) -> ExposureMatrix:
        return popularity_exposure(m)


@dataclass(frozen=True)
class PoissonExposure:
    config: PoissonConfig = field(default_factory=PoissonConfig)
    profiler: StageProfiler | None = None
    name: str = "poisson"

    def fit(self, m: RatingMatrix, seed: int) -> ExposureMatrix:
        factors = fit_poisson_exposure(
            m,
            k=self.config.k,
            priors=(self.config.a, self.config.b),
            iters=self.config.iters,
            seed=seed,
            profiler=self.profiler,
        )
        return factors.exposure()


@dataclass(frozen=True)
class RandomExposure:
    """Chance-level control: independent uniform scores per cell."""

    name: str = "random"

    def fit(self, m: RatingMatrix, seed: int) -> ExposureMatrix:
        rng = np.random.default_rng(seed)
        return ExposureMatrix(values=rng.uniform(0.0, 1.0, size=m.shape))


def build_exposure_model(
    name: str,
    config: PoissonConfig | None = None,
    profiler: StageProfiler | None = None,
) -> ExposureModel:
    if name == "uniform":
        return UniformExposure()
    if name == "popularity":
        return PopularityExposure()
    if name == "poisson":
        return PoissonExposure(config=config or PoissonConfig(), profiler=profiler)
    if name == "random":
        return RandomExposure()
    raise ExposureError(f"unknown exposure model {name!r}; expected one of {EXPOSURE_MODELS}")


@dataclass(frozen=True)
class WindowAUC:
    repeat: int
    window: int
    auc: float
    positives: int
    negatives: int


@dataclass(frozen=True)
class ExposureAUC:
    """Per-window AUCs of one model plus their mean and 95% half-width."""

    model: str
    windows: tuple[WindowAUC, ...]
    auc_mean: float
    auc_ci: float


def _sample_negatives(
    n_cells: int,
    excluded: NDArray[np.int64],
    size: int,
    rng: np.random.Generator,
) -> NDArray[np.int64]:
    candidates = np.setdiff1d(np.arange(n_cells, dtype=np.int64), excluded, assume_unique=True)
    if candidates.size == 0:
        raise ExposureError("no unobserved (user, item) pairs left to sample negatives from")
    if candidates.size < size:
        logger.warning(
            "negatives_exhausted requested=%d available=%d", size, candidates.size
        )
        size = int(candidates.size)
    return np.sort(rng.choice(candidates, size=size, replace=False))


def evaluate_exposure_auc(
    model: ExposureModel,
    split: TemporalSplit,
    neg_ratio: int = 1,
    seed: int = 0,
    *,
    repeats: int = 1,
    profiler: StageProfiler | None = None,
) -> ExposureAUC:
    """Sliding-window AUC: fit on batches ``0..k``, score batch ``k + 1``.

    Positives are the pairs of the next batch; negatives are drawn uniformly
    from pairs absent from both the training prefix and that batch. AUC is
    global over all scored pairs of a window.
    """
    if len(split) < 2:
        raise ExposureError("exposure evaluation needs at least 2 temporal batches")
    if neg_ratio < 1 or repeats < 1:
        raise ExposureError(f"neg_ratio and repeats must be >= 1, got {neg_ratio}, {repeats}")

    windows: list[WindowAUC] = []
    for repeat in range(repeats):
        for window in range(len(split) - 1):
            with track(profiler, "exposure.window"):
                train = split.prefix(window)
                test = split.batches[window + 1]
                n_users, n_items = train.shape
                seq = np.random.SeedSequence(seed, spawn_key=(repeat, window))
                rng = np.random.default_rng(seq)
                fit_seed = int(seq.generate_state(1)[0])

                train_keys = np.unique(train.keys())
                positives = np.setdiff1d(np.unique(test.keys()), train_keys)
                if positives.size == 0:
                    raise ExposureError(f"window {window} has no unseen test pairs")
                excluded = np.union1d(train_keys, positives)
                negatives = _sample_negatives(
                    n_users * n_items, excluded, neg_ratio * positives.size, rng
                )
                exposure = model.fit(train, fit_seed)
                keys = np.concatenate([positives, negatives])
                scores = exposure.values[keys // n_items, keys % n_items]
                labels = np.concatenate(
                    [np.ones(positives.size, dtype=bool), np.zeros(negatives.size, dtype=bool)]
                )
                value = stats.auc(scores, labels)
            windows.append(
                WindowAUC(
                    repeat=repeat,
                    window=window,
                    auc=value,
                    positives=int(positives.size),
                    negatives=int(negatives.size),
                )
            )
            logger.info(
                "exposure_window model=%s repeat=%d window=%d auc=%.4f positives=%d negatives=%d",
                model.name,
                repeat,
                window,
                value,
                positives.size,
                negatives.size,
            )

    aucs = [w.auc for w in windows]
    if len(aucs) < 2:
        logger.warning("auc_ci_undefined model=%s windows=%d", model.name, len(aucs))
        mean, half_width = float(aucs[0]), math.nan
    else:
        mean, half_width = stats.mean_ci95(aucs)
    logger.info(
        "exposure_evaluated model=%s windows=%d auc_mean=%.4f auc_ci=%.4f",
        model.name,
        len(windows),
        mean,
        half_width,
    )
    return ExposureAUC(model=model.name, windows=tuple(windows), auc_mean=mean, auc_ci=half_width)


def compare_exposure_auc(results: Sequence[ExposureAUC]) -> pd.DataFrame:
    """Welch t-test on the window AUCs of every pair of evaluated models."""
    rows: list[tuple[str, str, float, float, float, float]] = []
    for left, right in itertools.combinations(results, 2):
        t_stat, p_value = stats.welch_t(
            [w.auc for w in left.windows], [w.auc for w in right.windows]
        )
        rows.append((left.model, right.model, left.auc_mean, right.auc_mean, t_stat, p_value))
        logger.info(
            "exposure_compared model_a=%s model_b=%s t=%.3f p=%.3g",
            left.model,
            right.model,
            t_stat,
            p_value,
        )
    return pd.DataFrame(rows, columns=list(AUC_TTEST_COLUMNS))

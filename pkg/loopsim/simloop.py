"""Closed feedback loop: train, recommend, measure, accept relevant items, repeat.

Each replica starts from a random sample of the observed ratings and treats
the complete matrix as the only ground truth afterwards. Replicas are
independent and seeded from the master seed and their index, so the same
replica index sees the same initial sample under every variant.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from numpy.typing import NDArray

from . import metrics, stats
from .concurrency import ordered_map
from .dataset import DEFAULT_RELEVANCE_THRESHOLD, CompleteMatrix, RatingMatrix
from .exposure import EXPOSURE_MODELS, ExposureError, PoissonConfig, build_exposure_model
from .policy import DEFAULT_EPSILON, DEFAULT_SLATE_SIZE, RecommendationSlate, mab_mix, top_n_batch
from .profiling import StageProfiler, track
from .recommender import TrainingConfig, TrainingError, train

logger = logging.getLogger(__name__)

BASE_VARIANTS: dict[str, str] = {
    "mf": "mf",
    "pear_mf": "pear_mf",
    "propensity_mf": "propensity_mf",
    "mab_mf": "mf",
    "mab_pear_mf": "pear_mf",
}
SIM_VARIANTS: tuple[str, ...] = tuple(BASE_VARIANTS)
ACCEPTANCE_RULES: tuple[str, ...] = ("threshold",)
METRICS: tuple[str, ...] = ("epc", "epd", "gini", "hit_rate")
TRACE_COLUMNS: tuple[str, ...] = (
    "variant",
    "replica",
    "iteration",
    "epc",
    "epd",
    "gini",
    "hit_rate",
    "train_size",
)
AGGREGATE_COLUMNS: tuple[str, ...] = ("variant", "iteration", "metric", "mean", "ci95_halfwidth")
TTEST_COLUMNS: tuple[str, ...] = (
    "variant_a",
    "variant_b",
    "iteration",
    "metric",
    "t_statistic",
    "p_value",
)

# spawn-key slots below the iteration index
_EXPOSURE_STREAM = 0
_TRAIN_STREAM = 1
_EXPLORE_STREAM = 2


class ExperimentError(RuntimeError):
    """Raised when an experiment is misconfigured or no replica of a variant survives."""


@dataclass(frozen=True)
class SimulationConfig:
    variant: str
    iterations: int = 10
    slate_size: int = DEFAULT_SLATE_SIZE
    replicas: int = 10
    acceptance: str = "threshold"
    training_cfg: TrainingConfig = field(default_factory=TrainingConfig)
    epsilon: float = DEFAULT_EPSILON
    master_seed: int = 42
    train_fraction: float = 0.2
    exposure_model: str = "poisson"
    poisson: PoissonConfig = field(default_factory=PoissonConfig)
    discount_base: float = metrics.DEFAULT_DISCOUNT_BASE
    relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD

    def __post_init__(self) -> None:
        if self.variant not in BASE_VARIANTS:
            raise ExperimentError(
                f"unknown variant {self.variant!r}; expected one of {', '.join(SIM_VARIANTS)}"
            )
        if self.iterations < 1 or self.replicas < 1 or self.slate_size < 1:
            raise ExperimentError("iterations, replicas and slate_size must be >= 1")
        if self.acceptance not in ACCEPTANCE_RULES:
            raise ExperimentError(f"unknown acceptance rule {self.acceptance!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ExperimentError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ExperimentError(f"train_fraction must be in (0, 1], got {self.train_fraction}")
        if self.exposure_model not in EXPOSURE_MODELS:
            raise ExperimentError(f"unknown exposure model {self.exposure_model!r}")

    @property
    def base_variant(self) -> str:
        return BASE_VARIANTS[self.variant]

    @property
    def explores(self) -> bool:
        return self.variant.startswith("mab_")


@dataclass(frozen=True)
class TraceRow:
    replica: int
    iteration: int
    variant: str
    epc: float
    epd: float
    gini: float
    hit_rate: float
    train_size: int


@dataclass(frozen=True)
class SimulationTrace:
    rows: tuple[TraceRow, ...] = ()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows], columns=list(TRACE_COLUMNS))


@dataclass(frozen=True, eq=False)
class IterationRecord:
    """What one iteration saw and did, before accepted items were appended."""

    replica: int
    iteration: int
    train: RatingMatrix
    slates: tuple[RecommendationSlate, ...]
    accepted_users: NDArray[np.int64]
    accepted_items: NDArray[np.int64]
    accepted_ratings: NDArray[np.float64]


@dataclass(frozen=True)
class ReplicaFailure:
    variant: str
    replica: int
    reason: str


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    trace: SimulationTrace
    aggregates: pd.DataFrame
    t_tests: pd.DataFrame
    failures: tuple[ReplicaFailure, ...] = ()


def derive_seed(master_seed: int, *keys: int) -> int:
    """Independent 32-bit seed for the stream identified by ``keys``."""
    seq = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(seq.generate_state(1)[0])


def sample_initial(observed: RatingMatrix, fraction: float, seed: int) -> RatingMatrix:
    """Uniformly sample ``fraction`` of the observed ratings, keeping input order."""
    if not 0.0 < fraction <= 1.0:
        raise ExperimentError(f"fraction must be in (0, 1], got {fraction}")
    if observed.nnz == 0:
        raise ExperimentError("cannot sample from an empty rating matrix")
    size = max(1, int(round(fraction * observed.nnz)))
    rng = np.random.default_rng(seed)
    index = np.sort(rng.choice(observed.nnz, size=size, replace=False))
    return observed.take(index)


def accept(
    slate: RecommendationSlate, complete: CompleteMatrix, u: int
) -> list[tuple[int, float]]:
    """Slate items whose complete rating reaches the relevance threshold."""
    ratings = complete.values[u, slate.items]
    keep = ratings >= complete.relevance_threshold
    return [(int(i), float(r)) for i, r in zip(slate.items[keep], ratings[keep])]


def _histories(m: RatingMatrix) -> list[NDArray[np.int64]]:
    csr = m.to_csr()
    csr.sort_indices()
    return [
        csr.indices[csr.indptr[u] : csr.indptr[u + 1]].astype(np.int64)
        for u in range(m.n_users)
    ]


def run_replica(
    initial: RatingMatrix,
    complete: CompleteMatrix,
    cfg: SimulationConfig,
    replica_seed: int,
    *,
    replica: int = 0,
    profiler: StageProfiler | None = None,
    on_iteration: Callable[[IterationRecord], None] | None = None,
) -> list[TraceRow]:
    """Run ``cfg.iterations`` rounds of the loop and return one row per round.

    Metrics are measured on slates before acceptance; Gini covers the
    training interactions plus everything accepted up to this round, and
    ``train_size`` is the size after acceptance.
    """
    if initial.shape != (complete.n_users, complete.n_items):
        raise ExperimentError(
            f"initial ratings {initial.shape} do not match complete matrix "
            f"{(complete.n_users, complete.n_items)}"
        )
    complete = CompleteMatrix(complete.values, relevance_threshold=cfg.relevance_threshold)
    exposure_model = build_exposure_model(cfg.exposure_model, cfg.poisson, profiler)
    current = initial
    counts = initial.item_counts()
    rows: list[TraceRow] = []

    for iteration in range(1, cfg.iterations + 1):
        with track(profiler, "simloop.iteration"):
            exposure = exposure_model.fit(
                current, derive_seed(replica_seed, iteration, _EXPOSURE_STREAM)
            )
            train_cfg = replace(
                cfg.training_cfg, seed=derive_seed(replica_seed, iteration, _TRAIN_STREAM)
            )
            model = train(current, exposure, cfg.base_variant, train_cfg, profiler=profiler)

            slates = top_n_batch(model, current, cfg.slate_size)
            histories = _histories(current)
            if cfg.explores:
                rng = np.random.default_rng(
                    derive_seed(replica_seed, iteration, _EXPLORE_STREAM)
                )
                all_items = np.arange(complete.n_items, dtype=np.int64)
                slates = [
                    mab_mix(
                        s,
                        np.setdiff1d(all_items, histories[s.user], assume_unique=True),
                        cfg.epsilon,
                        rng,
                    )
                    for s in slates
                ]

            ctx = metrics.MetricContext(
                complete=complete,
                exposure=exposure,
                item_factors=model.Q,
                discount_base=cfg.discount_base,
            )
            scored = [s for s in slates if len(s)]
            if not scored:
                raise ExperimentError(f"no user received a slate at iteration {iteration}")
            epc = float(np.mean([metrics.epc(s, ctx, s.user) for s in scored]))
            epd = float(
                np.mean([metrics.epd(s, ctx, s.user, histories[s.user]) for s in scored])
            )
            hit = float(np.mean([metrics.hit_rate(s, ctx, s.user) for s in scored]))

            accepted = [
                (s.user, item, rating)
                for s in scored
                for item, rating in accept(s, complete, s.user)
            ]
            users = np.fromiter((a[0] for a in accepted), dtype=np.int64, count=len(accepted))
            items = np.fromiter((a[1] for a in accepted), dtype=np.int64, count=len(accepted))
            ratings = np.fromiter((a[2] for a in accepted), dtype=np.float64, count=len(accepted))
            counts = counts + np.bincount(items, minlength=complete.n_items)
            gini = stats.gini(counts)

            if on_iteration is not None:
                on_iteration(
                    IterationRecord(
                        replica=replica,
                        iteration=iteration,
                        train=current,
                        slates=tuple(slates),
                        accepted_users=users,
                        accepted_items=items,
                        accepted_ratings=ratings,
                    )
                )
            current = current.append(users, items, ratings)

        rows.append(
            TraceRow(
                replica=replica,
                iteration=iteration,
                variant=cfg.variant,
                epc=epc,
                epd=epd,
                gini=gini,
                hit_rate=hit,
                train_size=current.nnz,
            )
        )
        logger.debug(
            "iteration_done variant=%s replica=%d iteration=%d epc=%.4f epd=%.4f "
            "gini=%.4f hit_rate=%.4f accepted=%d train_size=%d",
            cfg.variant,
            replica,
            iteration,
            epc,
            epd,
            gini,
            hit,
            len(accepted),
            current.nnz,
        )
    return rows


@dataclass(frozen=True)
class _Job:
    cfg: SimulationConfig
    replica: int


def _summarize(values: NDArray[np.float64]) -> tuple[float, float]:
    if values.size < 2:
        return float(values.mean()), math.nan
    return stats.mean_ci95(values)


def aggregate(frame: pd.DataFrame, variants: Sequence[str]) -> pd.DataFrame:
    """Mean and 95% half-width per (variant, iteration, metric)."""
    rows: list[tuple[str, int, str, float, float]] = []
    for variant in variants:
        subset = frame[frame["variant"] == variant]
        for iteration, group in subset.groupby("iteration", sort=True):
            for metric in METRICS:
                mean, half_width = _summarize(group[metric].to_numpy(dtype=np.float64))
                rows.append((variant, int(iteration), metric, mean, half_width))
    return pd.DataFrame(rows, columns=list(AGGREGATE_COLUMNS))


def compare(frame: pd.DataFrame, variants: Sequence[str]) -> pd.DataFrame:
    """Welch t-test per variant pair, iteration and metric."""
    rows: list[tuple[str, str, int, str, float, float]] = []
    iterations = sorted(int(i) for i in frame["iteration"].unique())
    for left, right in itertools.combinations(variants, 2):
        a = frame[frame["variant"] == left]
        b = frame[frame["variant"] == right]
        for iteration in iterations:
            a_it = a[a["iteration"] == iteration]
            b_it = b[b["iteration"] == iteration]
            for metric in METRICS:
                t_stat, p_value = stats.welch_t(
                    a_it[metric].to_numpy(dtype=np.float64),
                    b_it[metric].to_numpy(dtype=np.float64),
                )
                rows.append((left, right, iteration, metric, t_stat, p_value))
    return pd.DataFrame(rows, columns=list(TTEST_COLUMNS))


def run_experiment(
    configs: Sequence[SimulationConfig],
    observed: RatingMatrix,
    complete: CompleteMatrix,
    *,
    threads: int = 1,
    profiler: StageProfiler | None = None,
    on_rows: Callable[[list[TraceRow]], None] | None = None,
) -> ExperimentResult:
    """Run every replica of every config and summarize across replicas.

    ``on_rows`` receives each replica's rows in (config, replica) order as
    soon as that replica and all before it have finished.
    """
    if not configs:
        raise ExperimentError("no simulation configs given")
    variants = [c.variant for c in configs]
    if len(set(variants)) != len(variants):
        raise ExperimentError(f"duplicate variants in {variants}")

    jobs = [_Job(cfg=c, replica=r) for c in configs for r in range(c.replicas)]

    def run(job: _Job) -> list[TraceRow] | ReplicaFailure:
        seed = derive_seed(job.cfg.master_seed, job.replica)
        try:
            initial = sample_initial(observed, job.cfg.train_fraction, seed)
            rows = run_replica(
                initial,
                complete,
                job.cfg,
                seed,
                replica=job.replica,
                profiler=profiler,
            )
        except (TrainingError, ExposureError, ExperimentError) as exc:
            logger.error(
                "replica_failed variant=%s replica=%d error=%s",
                job.cfg.variant,
                job.replica,
                exc,
            )
            return ReplicaFailure(variant=job.cfg.variant, replica=job.replica, reason=str(exc))
        logger.info(
            "replica_finished variant=%s replica=%d iterations=%d final_gini=%.4f",
            job.cfg.variant,
            job.replica,
            len(rows),
            rows[-1].gini,
        )
        return rows

    all_rows: list[TraceRow] = []
    failures: list[ReplicaFailure] = []
    for outcome in ordered_map(run, jobs, threads):
        if isinstance(outcome, ReplicaFailure):
            failures.append(outcome)
            continue
        all_rows.extend(outcome)
        if on_rows is not None:
            on_rows(outcome)

    for cfg in configs:
        lost = sum(1 for f in failures if f.variant == cfg.variant)
        if lost == cfg.replicas:
            raise ExperimentError(f"all {lost} replicas of {cfg.variant} failed")

    trace = SimulationTrace(rows=tuple(all_rows))
    frame = trace.to_frame()
    result = ExperimentResult(
        trace=trace,
        aggregates=aggregate(frame, variants),
        t_tests=compare(frame, variants),
        failures=tuple(failures),
    )
    logger.info(
        "experiment_done variants=%s replicas=%d rows=%d failures=%d",
        ",".join(variants),
        len(jobs),
        len(all_rows),
        len(failures),
    )
    return result

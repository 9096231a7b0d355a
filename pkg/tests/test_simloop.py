from __future__ import annotations

import logging
import math
from collections.abc import Callable
from typing import TYPE_CHECKING, Any

import numpy as np
import pandas as pd
import pytest

from loopsim.dataset import CompleteMatrix, RatingMatrix
from loopsim.policy import RecommendationSlate
from loopsim.profiling import StageProfiler
from loopsim.recommender import TrainingConfig, TrainingError
from loopsim.simloop import (
    AGGREGATE_COLUMNS,
    TRACE_COLUMNS,
    ExperimentError,
    IterationRecord,
    SimulationConfig,
    TraceRow,
    accept,
    aggregate,
    compare,
    derive_seed,
    run_experiment,
    run_replica,
    sample_initial,
)

if TYPE_CHECKING:
    from pytest import LogCaptureFixture, MonkeyPatch

MakeComplete = Callable[[int, int, int], CompleteMatrix]


def _config(variant: str = "mf", **overrides: Any) -> SimulationConfig:
    values: dict[str, Any] = {
        "iterations": 3,
        "slate_size": 3,
        "replicas": 2,
        "training_cfg": TrainingConfig(alpha=0.01, k=3, epochs=5),
        "exposure_model": "popularity",
        "train_fraction": 0.5,
    }
    values.update(overrides)
    return SimulationConfig(variant=variant, **values)


def _slate(items: list[int]) -> RecommendationSlate:
    return RecommendationSlate(
        user=0, items=np.array(items, dtype=np.int64), scores=np.zeros(len(items))
    )


def test_accept_filters_on_threshold() -> None:
    complete = CompleteMatrix(values=np.array([[5.0, 3.0, 4.0]]))
    assert accept(_slate([0, 1, 2]), complete, 0) == [(0, 5.0), (2, 4.0)]
    assert accept(_slate([1]), complete, 0) == []
    fives = CompleteMatrix(values=np.full((1, 3), 5.0))
    assert accept(_slate([2, 0]), fives, 0) == [(2, 5.0), (0, 5.0)]


def test_derive_seed_is_stable_and_distinct() -> None:
    assert derive_seed(42, 0) == derive_seed(42, 0)
    seeds = {derive_seed(42, r) for r in range(50)}
    assert len(seeds) == 50
    assert derive_seed(42, 1, 0) != derive_seed(42, 1, 1)


def test_sample_initial(toy_ratings: RatingMatrix) -> None:
    sample = sample_initial(toy_ratings, 0.5, seed=3)
    assert sample.nnz == round(0.5 * toy_ratings.nnz)
    assert set(sample.triples()) <= set(toy_ratings.triples())
    again = sample_initial(toy_ratings, 0.5, seed=3)
    assert sample.triples() == again.triples()
    with pytest.raises(ExperimentError):
        sample_initial(toy_ratings, 0.0, seed=3)
    with pytest.raises(ExperimentError):
        sample_initial(RatingMatrix.from_arrays(2, 2, [], [], []), 0.5, seed=3)


def test_config_validation() -> None:
    with pytest.raises(ExperimentError, match="mab_pear_mf"):
        _config("svd")
    with pytest.raises(ExperimentError):
        _config(iterations=0)
    with pytest.raises(ExperimentError):
        _config(acceptance="bernoulli")
    with pytest.raises(ExperimentError):
        _config(exposure_model="oracle")
    assert _config("mab_pear_mf").base_variant == "pear_mf"
    assert _config("mab_mf").explores and not _config("mf").explores


def test_single_iteration_gives_one_row(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    complete = random_complete(6, 8, 0)
    rows = run_replica(toy_ratings, complete, _config(iterations=1), replica_seed=1)
    assert len(rows) == 1
    assert rows[0].iteration == 1
    for metric in ("epc", "epd", "gini", "hit_rate"):
        assert 0.0 <= getattr(rows[0], metric) <= 1.0


def test_replica_grows_training_set_and_never_repeats(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    complete = random_complete(6, 8, 2)
    initial = sample_initial(toy_ratings, 0.5, seed=0)
    records: list[IterationRecord] = []
    rows = run_replica(
        initial, complete, _config(iterations=4), replica_seed=7, on_iteration=records.append
    )
    assert [r.iteration for r in rows] == [1, 2, 3, 4]
    sizes = [initial.nnz] + [r.train_size for r in rows]
    assert all(b >= a for a, b in zip(sizes, sizes[1:]))

    accepted_so_far: set[tuple[int, int]] = set()
    for record, row in zip(records, rows):
        assert row.train_size == record.train.nnz + record.accepted_items.size
        if record.accepted_items.size:
            assert row.train_size > record.train.nnz
        for slate in record.slates:
            shown = set(slate.items.tolist())
            assert not shown & set(record.train.history(slate.user).tolist())
            assert not {(slate.user, i) for i in shown} & accepted_so_far
        accepted_so_far |= set(
            zip(record.accepted_users.tolist(), record.accepted_items.tolist())
        )
        assert np.all(complete.values[record.accepted_users, record.accepted_items] >= 4.0)


def test_exploring_variant_marks_random_slots(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    records: list[IterationRecord] = []
    run_replica(
        toy_ratings,
        random_complete(6, 8, 1),
        _config("mab_mf", iterations=1, epsilon=1.0),
        replica_seed=3,
        on_iteration=records.append,
    )
    explored = [s for s in records[0].slates if s.explored.any()]
    assert explored
    for slate in explored:
        assert not set(slate.items.tolist()) & set(toy_ratings.history(slate.user).tolist())


def test_replica_is_deterministic(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    complete = random_complete(6, 8, 4)
    cfg = _config("mab_pear_mf")
    first = run_replica(toy_ratings, complete, cfg, replica_seed=11)
    second = run_replica(toy_ratings, complete, cfg, replica_seed=11)
    assert first == second


def test_replica_rejects_mismatched_shapes(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    with pytest.raises(ExperimentError):
        run_replica(toy_ratings, random_complete(5, 8, 0), _config(), replica_seed=0)


def test_replica_is_profiled(toy_ratings: RatingMatrix, random_complete: MakeComplete) -> None:
    profiler = StageProfiler(enabled=True)
    run_replica(toy_ratings, random_complete(6, 8, 0), _config(), replica_seed=0, profiler=profiler)
    summary = profiler.summary()
    assert summary["simloop.iteration"]["count"] == 3
    assert summary["recommender.train"]["count"] == 3


def test_experiment_row_counts(toy_ratings: RatingMatrix, random_complete: MakeComplete) -> None:
    configs = [_config("mf", iterations=5), _config("pear_mf", iterations=5)]
    result = run_experiment(configs, toy_ratings, random_complete(6, 8, 0))
    frame = result.trace.to_frame()
    assert list(frame.columns) == list(TRACE_COLUMNS)
    assert len(frame) == 2 * 2 * 5
    assert len(result.aggregates) == 2 * 5 * 4
    assert list(result.aggregates.columns) == list(AGGREGATE_COLUMNS)
    assert len(result.t_tests) == 1 * 5 * 4
    assert not result.failures


def test_experiment_is_deterministic_across_thread_counts(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    complete = random_complete(6, 8, 5)
    configs = [_config("mf", replicas=3), _config("mab_mf", replicas=3)]
    single = run_experiment(configs, toy_ratings, complete, threads=1)
    pooled = run_experiment(configs, toy_ratings, complete, threads=4)
    again = run_experiment(configs, toy_ratings, complete, threads=1)
    assert single.trace == pooled.trace == again.trace


def test_variants_share_initial_samples(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    configs = [_config("mf", iterations=1), _config("mab_mf", iterations=1, epsilon=0.0)]
    result = run_experiment(configs, toy_ratings, random_complete(6, 8, 0))
    by_variant = {
        v: [r for r in result.trace.rows if r.variant == v] for v in ("mf", "mab_mf")
    }
    for a, b in zip(by_variant["mf"], by_variant["mab_mf"]):
        assert (a.epc, a.epd, a.gini, a.hit_rate, a.train_size) == (
            b.epc,
            b.epd,
            b.gini,
            b.hit_rate,
            b.train_size,
        )


def test_identical_replicas_have_zero_ci(
    toy_ratings: RatingMatrix, random_complete: MakeComplete, monkeypatch: MonkeyPatch
) -> None:
    monkeypatch.setattr("loopsim.simloop.derive_seed", lambda master, *keys: int(master))
    result = run_experiment([_config(replicas=3)], toy_ratings, random_complete(6, 8, 0))
    assert (result.aggregates["ci95_halfwidth"] == 0.0).all()


def test_experiment_streams_rows_in_order(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    batches: list[list[TraceRow]] = []
    run_experiment(
        [_config("mf"), _config("pear_mf")],
        toy_ratings,
        random_complete(6, 8, 0),
        threads=2,
        on_rows=batches.append,
    )
    assert [(b[0].variant, b[0].replica) for b in batches] == [
        ("mf", 0),
        ("mf", 1),
        ("pear_mf", 0),
        ("pear_mf", 1),
    ]


def test_failed_replica_is_skipped(
    toy_ratings: RatingMatrix,
    random_complete: MakeComplete,
    monkeypatch: MonkeyPatch,
    caplog: LogCaptureFixture,
) -> None:
    from loopsim import simloop

    real_train = simloop.train
    calls = {"n": 0}

    def flaky(*args: Any, **kwargs: Any) -> Any:
        calls["n"] += 1
        if calls["n"] == 1:
            raise TrainingError("non-finite loss at epoch 1")
        return real_train(*args, **kwargs)

    monkeypatch.setattr(simloop, "train", flaky)
    with caplog.at_level(logging.ERROR, logger="loopsim"):
        result = run_experiment([_config()], toy_ratings, random_complete(6, 8, 0))
    assert [f.replica for f in result.failures] == [0]
    assert {r.replica for r in result.trace.rows} == {1}
    assert "replica_failed" in caplog.text


def test_all_replicas_failing_raises(
    toy_ratings: RatingMatrix, random_complete: MakeComplete, monkeypatch: MonkeyPatch
) -> None:
    def broken(*args: Any, **kwargs: Any) -> Any:
        raise TrainingError("diverged")

    monkeypatch.setattr("loopsim.simloop.train", broken)
    with pytest.raises(ExperimentError, match="all 2 replicas of mf failed"):
        run_experiment([_config()], toy_ratings, random_complete(6, 8, 0))


def test_experiment_rejects_bad_config_sets(
    toy_ratings: RatingMatrix, random_complete: MakeComplete
) -> None:
    complete = random_complete(6, 8, 0)
    with pytest.raises(ExperimentError):
        run_experiment([], toy_ratings, complete)
    with pytest.raises(ExperimentError, match="duplicate"):
        run_experiment([_config(), _config()], toy_ratings, complete)


def _frame(values: dict[str, list[float]]) -> pd.DataFrame:
    rows = []
    for variant, series in values.items():
        for replica, value in enumerate(series):
            rows.append(
                {
                    "variant": variant,
                    "replica": replica,
                    "iteration": 1,
                    "epc": value,
                    "epd": value,
                    "gini": value,
                    "hit_rate": value,
                    "train_size": 10,
                }
            )
    return pd.DataFrame(rows, columns=list(TRACE_COLUMNS))


def test_aggregate_and_compare_by_hand() -> None:
    frame = _frame({"a": [0.0, 2.0], "b": [5.0]})
    agg = aggregate(frame, ["a", "b"])
    a_rows = agg[agg["variant"] == "a"]
    assert (a_rows["mean"] == 1.0).all()
    assert np.allclose(a_rows["ci95_halfwidth"], 1.96)
    b_rows = agg[agg["variant"] == "b"]
    assert b_rows["ci95_halfwidth"].map(math.isnan).all()

    tests = compare(frame, ["a", "b"])
    assert len(tests) == 4
    assert tests["t_statistic"].map(math.isnan).all()


def test_gini_ignores_user_relabeling(toy_ratings: RatingMatrix) -> None:
    from loopsim.stats import gini

    perm = np.random.default_rng(4).permutation(toy_ratings.n_users)
    relabeled = RatingMatrix.from_arrays(
        toy_ratings.n_users,
        toy_ratings.n_items,
        perm[toy_ratings.users],
        toy_ratings.items,
        toy_ratings.ratings,
    )
    assert np.array_equal(relabeled.item_counts(), toy_ratings.item_counts())
    assert gini(relabeled.item_counts()) == gini(toy_ratings.item_counts())


def test_replica_without_slates_is_skipped(
    toy_ratings: RatingMatrix, random_complete: MakeComplete, monkeypatch: MonkeyPatch
) -> None:
    from loopsim import simloop

    real_top_n = simloop.top_n_batch
    calls = {"n": 0}

    def exhausted(*args: Any, **kwargs: Any) -> Any:
        calls["n"] += 1
        if calls["n"] == 1:
            return []
        return real_top_n(*args, **kwargs)

    monkeypatch.setattr(simloop, "top_n_batch", exhausted)
    result = run_experiment([_config()], toy_ratings, random_complete(6, 8, 0))
    assert [f.replica for f in result.failures] == [0]
    assert "no user received a slate" in result.failures[0].reason
    assert {r.replica for r in result.trace.rows} == {1}

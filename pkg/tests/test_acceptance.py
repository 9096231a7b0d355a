"""Directional checks on MovieLens 100K; set LOOPSIM_ML100K to the u.data path."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from loopsim.concurrency import default_threads
from loopsim.dataset import complete_semisynthetic, load_movielens, temporal_split
from loopsim.exposure import PoissonExposure, PopularityExposure, evaluate_exposure_auc
from loopsim.recommender import TrainingConfig
from loopsim.simloop import SimulationConfig, run_experiment
from loopsim.stats import spearman_trend, welch_t

pytestmark = pytest.mark.integration


def test_poisson_exposure_beats_popularity(ml100k_path: Path) -> None:
    split = temporal_split(load_movielens(ml100k_path), 4)
    poisson = evaluate_exposure_auc(PoissonExposure(), split, neg_ratio=1, seed=0)
    popularity = evaluate_exposure_auc(PopularityExposure(), split, neg_ratio=1, seed=0)
    assert popularity.auc_mean > 0.6
    assert poisson.auc_mean >= popularity.auc_mean + 0.02


def test_pear_balances_and_keeps_novelty(ml100k_path: Path) -> None:
    observed = load_movielens(ml100k_path)
    complete = complete_semisynthetic(observed, TrainingConfig(), seed=42)
    configs = [
        SimulationConfig(variant="mf", training_cfg=TrainingConfig(lam=1.0)),
        SimulationConfig(variant="pear_mf", training_cfg=TrainingConfig(lam=1.0)),
    ]
    result = run_experiment(configs, observed, complete, threads=default_threads())
    frame = result.trace.to_frame()
    mf = frame[frame["variant"] == "mf"]
    pear = frame[frame["variant"] == "pear_mf"]
    last = int(frame["iteration"].max())

    final_mf = mf[mf["iteration"] == last]
    final_pear = pear[pear["iteration"] == last]
    t_stat, _ = welch_t(final_pear["gini"], final_mf["gini"])
    assert final_pear["gini"].mean() < final_mf["gini"].mean()
    assert abs(t_stat) > 2

    epc_mf = mf.groupby("iteration")["epc"].mean()
    epc_pear = pear.groupby("iteration")["epc"].mean()
    for iteration in range(3, last + 1):
        assert epc_pear[iteration] >= epc_mf[iteration]
    assert spearman_trend(epc_mf.to_numpy(dtype=np.float64)) <= 0

    assert final_pear["hit_rate"].mean() >= final_mf["hit_rate"].mean()

"""Divergences, concentration and aggregation helpers shared across the simulator."""

from __future__ import annotations

import logging
import math
import warnings
from collections.abc import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special
from scipy import stats as sp_stats

logger = logging.getLogger(__name__)

LN2 = math.log(2.0)
CI95_Z = 1.96


class StatsError(ValueError):
    """Raised when a statistic is requested on invalid input."""


def as_distribution(mass: ArrayLike) -> NDArray[np.float64]:
    """Return ``mass`` L1-normalized along its last axis.

    Accepts a vector or a 2-D array of row vectors. Negative entries and
    rows without mass are rejected.
    """
    values = np.asarray(mass, dtype=np.float64)
    if values.ndim not in (1, 2):
        raise StatsError(f"distribution must be 1-D or 2-D, got ndim={values.ndim}")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise StatsError("distribution entries must be finite and non-negative")
    totals = values.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise StatsError("distribution has no mass")
    return values / totals


def _check_shapes(d1: NDArray[np.float64], d2: NDArray[np.float64]) -> None:
    if d1.shape[-1] != d2.shape[-1]:
        raise StatsError(
            f"length mismatch: {d1.shape[-1]} != {d2.shape[-1]}",
        )


def kl_divergence(d1: ArrayLike, d2: ArrayLike) -> float | NDArray[np.float64]:
    """Kullback-Leibler divergence KL(d1 || d2) in bits.

    Terms with ``d1(x) = 0`` contribute 0; ``d1(x) > 0`` with ``d2(x) = 0``
    yields ``inf``. 2-D inputs are evaluated row-wise.
    """
    p = as_distribution(d1)
    q = as_distribution(d2)
    _check_shapes(p, q)
    value = special.rel_entr(p, q).sum(axis=-1) / LN2
    value = np.maximum(value, 0.0)
    if np.ndim(value) == 0:
        return float(value)
    return value


def jsd(d1: ArrayLike, d2: ArrayLike) -> float | NDArray[np.float64]:
    """Jensen-Shannon divergence in bits, bounded in [0, 1]."""
    p = as_distribution(d1)
    q = as_distribution(d2)
    _check_shapes(p, q)
    m = 0.5 * p + 0.5 * q
    value = 0.5 * special.rel_entr(p, m).sum(axis=-1) + 0.5 * special.rel_entr(
        q, m
    ).sum(axis=-1)
    value = np.clip(value / LN2, 0.0, 1.0)
    if np.ndim(value) == 0:
        return float(value)
    return value


def gini(counts: ArrayLike) -> float:
    """Gini coefficient of non-negative counts (mean-absolute-difference form).

    Evaluated through the sorted-rank identity
    ``sum_i (2i - n - 1) x_(i) / (n * sum x)``, which equals
    ``sum_ij |x_i - x_j| / (2 n sum x)``.
    """
    values = np.asarray(counts, dtype=np.float64).ravel()
    if values.size == 0 or np.any(values < 0):
        raise StatsError("gini requires a non-empty vector of non-negative counts")
    total = values.sum()
    if total <= 0:
        raise StatsError("gini requires at least one positive count")
    n = values.size
    ordered = np.sort(values)
    ranks = np.arange(1, n + 1, dtype=np.float64)
    return float(np.sum((2.0 * ranks - n - 1.0) * ordered) / (n * total))


def auc(scores: ArrayLike, labels: ArrayLike) -> float:
    """Mann-Whitney AUC: P(random positive outranks random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise StatsError(f"length mismatch: {s.size} scores, {y.size} labels")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise StatsError("auc requires both positive and negative labels")
    ranks = sp_stats.rankdata(s, method="average")
    u_statistic = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_statistic / (n_pos * n_neg))


def mean_ci95(samples: Sequence[float] | ArrayLike) -> tuple[float, float]:
    """Sample mean and normal-approximation 95% half-width ``1.96 * s / sqrt(n)``."""
    values = np.asarray(samples, dtype=np.float64).ravel()
    if values.size < 2:
        raise StatsError("mean_ci95 requires at least 2 samples")
    if np.ptp(values) == 0:
        return float(values[0]), 0.0
    mean = float(values.mean())
    half_width = CI95_Z * float(values.std(ddof=1)) / math.sqrt(values.size)
    return mean, half_width


def welch_t(a: ArrayLike, b: ArrayLike) -> tuple[float, float]:
    """Welch's unequal-variance t statistic and two-sided p-value.

    Returns ``(nan, nan)`` when either sample has fewer than two values or
    both samples are the same constant; two constant samples with different
    means give a signed infinite statistic and p-value 0.
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        return math.nan, math.nan
    if np.ptp(x) == 0 and np.ptp(y) == 0:
        if x[0] == y[0]:
            return math.nan, math.nan
        return math.copysign(math.inf, float(x[0] - y[0])), 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = sp_stats.ttest_ind(x, y, equal_var=False)
    return float(result.statistic), float(result.pvalue)


def spearman_trend(values: ArrayLike) -> float:
    """Spearman correlation between a sequence and its position (trend sign)."""
    seq = np.asarray(values, dtype=np.float64).ravel()
    if seq.size < 2:
        raise StatsError("spearman_trend requires at least 2 values")
    if np.ptp(seq) == 0:
        return 0.0
    rho = sp_stats.spearmanr(np.arange(seq.size), seq)[0]
    return float(rho)

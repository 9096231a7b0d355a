"""Matrix-factorization rating predictors: vanilla MF, PEAR-MF and inverse-propensity MF.

All variants share one objective over the observed ratings::

    J = sum_(u,i) w_ui (R_ui - P_u Q_i^T)^2 + (beta + lam * JSD_u) (|P_u|^2 + |Q_i|^2)

``mf`` uses ``w = 1`` and ``JSD = 0``; ``pear_mf`` takes ``JSD_u`` from the
exposure matrix; ``propensity_mf`` uses ``w_ui = 1 / max(E_ui, floor)``.
Training alternates a sweep over P (Q fixed) and a sweep over Q (P fixed),
each a per-rating gradient step in a seeded shuffled order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Literal

import numpy as np
from numpy.typing import NDArray

from .profiling import StageProfiler, track

if TYPE_CHECKING:
    from .dataset import RatingMatrix
    from .exposure import ExposureMatrix

logger = logging.getLogger(__name__)

Variant = Literal["mf", "pear_mf", "propensity_mf"]
VARIANTS: tuple[str, ...] = ("mf", "pear_mf", "propensity_mf")

CHECKPOINT_MAGIC = b"PEAR"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = np.dtype(
    [("magic", "S4"), ("version", "<u4"), ("users", "<u4"), ("items", "<u4"), ("k", "<u4")]
)


class TrainingError(RuntimeError):
    """Raised when training diverges or is configured inconsistently."""


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters for every factorization variant.

    Attributes:
        alpha: Learning rate.
        beta: L2 weight.
        lam: Weight of the exposure-aware (JSD-scaled) penalty.
        k: Latent dimension.
        epochs: Maximum number of alternating P/Q sweeps.
        seed: Seed for initialization and visit order.
        init_scale: Factors start uniform in ``[-init_scale, init_scale]``.
        propensity_floor: Lower clip for propensities in ``propensity_mf``.
        tol: Stop early once the objective moves by less than this between epochs.
    """

    alpha: float = 0.001
    beta: float = 0.01
    lam: float = 1.0
    k: int = 10
    epochs: int = 50
    seed: int = 0
    init_scale: float = 0.1
    propensity_floor: float = 0.05
    tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.alpha <= 0:
            raise TrainingError(f"alpha must be > 0, got {self.alpha}")
        if self.beta < 0 or self.lam < 0:
            raise TrainingError(f"beta and lam must be >= 0, got {self.beta}, {self.lam}")
        if self.k < 1 or self.epochs < 1:
            raise TrainingError(f"k and epochs must be >= 1, got {self.k}, {self.epochs}")
        if self.init_scale <= 0:
            raise TrainingError(f"init_scale must be > 0, got {self.init_scale}")
        if not 0 < self.propensity_floor <= 1:
            raise TrainingError(
                f"propensity_floor must be in (0, 1], got {self.propensity_floor}"
            )

    def describe(self) -> str:
        return (
            f"alpha={self.alpha} beta={self.beta} lam={self.lam} k={self.k} "
            f"epochs={self.epochs} seed={self.seed}"
        )


@dataclass(frozen=True, eq=False)
class FactorModel:
    """Trained user/item factors plus the per-user JSD used by the PEAR penalty."""

    P: NDArray[np.float64]
    Q: NDArray[np.float64]
    user_jsd: NDArray[np.float64]
    objective_trace: tuple[float, ...] = field(default_factory=tuple)

    @property
    def n_users(self) -> int:
        return int(self.P.shape[0])

    @property
    def n_items(self) -> int:
        return int(self.Q.shape[0])

    @property
    def k(self) -> int:
        return int(self.P.shape[1])

    def cold_users(self) -> NDArray[np.bool_]:
        return ~np.any(self.P != 0, axis=1)

    def cold_items(self) -> NDArray[np.bool_]:
        return ~np.any(self.Q != 0, axis=1)

    def scores(self, user: int | None = None) -> NDArray[np.float64]:
        """Predicted scores for one user (vector) or for all users (matrix)."""
        if user is None:
            return self.P @ self.Q.T
        return self.Q @ self.P[user]


def predict(model: FactorModel, u: int, i: int) -> float:
    """Unclamped dot product ``P_u . Q_i``."""
    return float(model.P[u] @ model.Q[i])


def _loss_inputs(
    variant: str,
    m: RatingMatrix,
    exposure: ExposureMatrix | None,
    cfg: TrainingConfig,
    user_jsd: NDArray[np.float64] | None = None,
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Per-user JSD and per-rating error weights for ``variant``."""
    if variant not in VARIANTS:
        raise TrainingError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    jsd_u = np.zeros(m.n_users, dtype=np.float64)
    weights = np.ones(m.nnz, dtype=np.float64)
    if variant == "mf":
        return jsd_u, weights
    if variant == "pear_mf":
        if user_jsd is None:
            if exposure is None:
                raise TrainingError("variant pear_mf requires an exposure matrix")
            user_jsd = exposure.user_jsd()
        jsd_u = np.asarray(user_jsd, dtype=np.float64)
        if jsd_u.shape != (m.n_users,):
            raise TrainingError(f"user_jsd has shape {jsd_u.shape}, expected ({m.n_users},)")
        return jsd_u, weights
    if exposure is None:
        raise TrainingError("variant propensity_mf requires an exposure matrix")
    propensity = exposure.values[m.users, m.items]
    weights = 1.0 / np.maximum(propensity, cfg.propensity_floor)
    return jsd_u, weights


def _regularizer(cfg: TrainingConfig, user_jsd: NDArray[np.float64]) -> NDArray[np.float64]:
    return cfg.beta + cfg.lam * user_jsd


def objective(
    m: RatingMatrix,
    P: NDArray[np.float64],
    Q: NDArray[np.float64],
    reg_u: NDArray[np.float64],
    weights: NDArray[np.float64],
) -> float:
    """Weighted squared error plus per-user scaled L2 over observed ratings."""
    pu = P[m.users]
    qi = Q[m.items]
    err = m.ratings - np.einsum("ij,ij->i", pu, qi)
    norms = np.einsum("ij,ij->i", pu, pu) + np.einsum("ij,ij->i", qi, qi)
    return float(np.sum(weights * err * err) + np.sum(reg_u[m.users] * norms))


def objective_gradient(
    m: RatingMatrix,
    P: NDArray[np.float64],
    Q: NDArray[np.float64],
    reg_u: NDArray[np.float64],
    weights: NDArray[np.float64],
) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Analytic gradient of :func:`objective` with respect to P and Q."""
    pu = P[m.users]
    qi = Q[m.items]
    err = m.ratings - np.einsum("ij,ij->i", pu, qi)
    werr = (weights * err)[:, None]
    reg = reg_u[m.users][:, None]
    grad_p = np.zeros_like(P)
    grad_q = np.zeros_like(Q)
    np.add.at(grad_p, m.users, -2.0 * werr * qi + 2.0 * reg * pu)
    np.add.at(grad_q, m.items, -2.0 * werr * pu + 2.0 * reg * qi)
    return grad_p, grad_q


def pear_objective(m: RatingMatrix, model: FactorModel, cfg: TrainingConfig) -> float:
    """PEAR-MF objective of ``model`` on the observed entries of ``m``."""
    value = objective(
        m,
        model.P,
        model.Q,
        _regularizer(cfg, model.user_jsd),
        np.ones(m.nnz, dtype=np.float64),
    )
    if not np.isfinite(value):
        raise TrainingError(f"non-finite PEAR objective ({cfg.describe()})")
    return value


def _visit_rounds(
    owner: NDArray[np.int64], n_owners: int, rng: np.random.Generator
) -> list[NDArray[np.int64]]:
    """Split a shuffled visit order into rounds with at most one entry per owner.

    Within each owner the entries keep the shuffled order, so applying the
    rounds in sequence replays that owner's ratings one after another. Owners
    do not interact while the other factor matrix is held fixed, which lets a
    round update all of them at once.
    """
    if owner.size == 0:
        return []
    perm = rng.permutation(owner.size)
    by_owner = perm[np.argsort(owner[perm], kind="stable")]
    counts = np.bincount(owner, minlength=n_owners)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    position = np.arange(owner.size) - starts
    order = np.argsort(position, kind="stable")
    bounds = np.cumsum(np.bincount(position))[:-1]
    return np.split(by_owner[order], bounds)


def _sweep_users(
    m: RatingMatrix,
    P: NDArray[np.float64],
    Q: NDArray[np.float64],
    reg_u: NDArray[np.float64],
    weights: NDArray[np.float64],
    alpha: float,
    rng: np.random.Generator,
) -> None:
    for idx in _visit_rounds(m.users, m.n_users, rng):
        uu = m.users[idx]
        pu = P[uu]
        qi = Q[m.items[idx]]
        err = m.ratings[idx] - np.einsum("ij,ij->i", pu, qi)
        P[uu] = pu + 2.0 * alpha * (
            (weights[idx] * err)[:, None] * qi - reg_u[uu][:, None] * pu
        )


def _sweep_items(
    m: RatingMatrix,
    P: NDArray[np.float64],
    Q: NDArray[np.float64],
    reg_u: NDArray[np.float64],
    weights: NDArray[np.float64],
    alpha: float,
    rng: np.random.Generator,
) -> None:
    for idx in _visit_rounds(m.items, m.n_items, rng):
        ii = m.items[idx]
        uu = m.users[idx]
        pu = P[uu]
        qi = Q[ii]
        err = m.ratings[idx] - np.einsum("ij,ij->i", pu, qi)
        Q[ii] = qi + 2.0 * alpha * (
            (weights[idx] * err)[:, None] * pu - reg_u[uu][:, None] * qi
        )


def train(
    m: RatingMatrix,
    exposure: ExposureMatrix | None,
    variant: str,
    cfg: TrainingConfig,
    *,
    user_jsd: NDArray[np.float64] | None = None,
    profiler: StageProfiler | None = None,
) -> FactorModel:
    """Fit ``variant`` on the observed ratings of ``m``.

    Users and items without training ratings keep zero factors.
    """
    jsd_u, weights = _loss_inputs(variant, m, exposure, cfg, user_jsd)
    reg_u = _regularizer(cfg, jsd_u)
    rng = np.random.default_rng(cfg.seed)
    P = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(m.n_users, cfg.k))
    Q = rng.uniform(-cfg.init_scale, cfg.init_scale, size=(m.n_items, cfg.k))
    P[m.user_counts() == 0] = 0.0
    Q[m.item_counts() == 0] = 0.0

    trace: list[float] = []
    previous = objective(m, P, Q, reg_u, weights)
    with track(profiler, "recommender.train"):
        for epoch in range(1, cfg.epochs + 1):
            with np.errstate(over="ignore", invalid="ignore"):
                _sweep_users(m, P, Q, reg_u, weights, cfg.alpha, rng)
                _sweep_items(m, P, Q, reg_u, weights, cfg.alpha, rng)
                current = objective(m, P, Q, reg_u, weights)
            if not np.isfinite(current):
                logger.error(
                    "train_diverged variant=%s epoch=%d %s",
                    variant,
                    epoch,
                    cfg.describe(),
                )
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} for {variant} ({cfg.describe()})"
                )
            trace.append(current)
            logger.debug(
                "train_epoch variant=%s epoch=%d objective=%.6f", variant, epoch, current
            )
            if abs(previous - current) < cfg.tol:
                logger.debug(
                    "train_converged variant=%s epoch=%d objective=%.6f",
                    variant,
                    epoch,
                    current,
                )
                break
            previous = current
    logger.debug(
        "train_done variant=%s ratings=%d epochs=%d objective=%.6f",
        variant,
        m.nnz,
        len(trace),
        trace[-1] if trace else previous,
    )
    return FactorModel(P=P, Q=Q, user_jsd=jsd_u, objective_trace=tuple(trace))


def gradient_check(
    variant: str,
    m: RatingMatrix,
    cfg: TrainingConfig,
    *,
    exposure: ExposureMatrix | None = None,
    user_jsd: NDArray[np.float64] | None = None,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Factors are drawn from ``cfg.seed``. The error of each entry is
    ``|a - n| / max(|a|, |n|, 1)``: relative for entries of magnitude at
    least 1, absolute below that.
    """
    if m.n_users > 5 or m.n_items > 5:
        raise TrainingError("gradient_check expects at most 5 users and 5 items")
    jsd_u, weights = _loss_inputs(variant, m, exposure, cfg, user_jsd)
    reg_u = _regularizer(cfg, jsd_u)
    rng = np.random.default_rng(cfg.seed)
    P = rng.normal(size=(m.n_users, cfg.k))
    Q = rng.normal(size=(m.n_items, cfg.k))
    grad_p, grad_q = objective_gradient(m, P, Q, reg_u, weights)

    worst = 0.0
    for params, grad in ((P, grad_p), (Q, grad_q)):
        for index in np.ndindex(params.shape):
            original = params[index]
            params[index] = original + h
            plus = objective(m, P, Q, reg_u, weights)
            params[index] = original - h
            minus = objective(m, P, Q, reg_u, weights)
            params[index] = original
            numeric = (plus - minus) / (2.0 * h)
            analytic = grad[index]
            scale = max(abs(analytic), abs(numeric), 1.0)
            worst = max(worst, abs(analytic - numeric) / scale)
    logger.debug("gradient_check variant=%s max_rel_error=%.3e", variant, worst)
    return worst


def save_checkpoint(model: FactorModel, path: Path | str) -> None:
    """Write ``model`` in the PEAR layout (header, P, Q, user_jsd as ``<f4``)."""
    header = np.array(
        [(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.n_users, model.n_items, model.k)],
        dtype=_CHECKPOINT_HEADER,
    )
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(header.tobytes())
        for block in (model.P, model.Q, model.user_jsd):
            fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
    logger.info(
        "checkpoint_written path=%s users=%d items=%d k=%d",
        path.name,
        model.n_users,
        model.n_items,
        model.k,
    )


def load_checkpoint(path: Path | str) -> FactorModel:
    path = Path(path)
    raw = path.read_bytes()
    size = _CHECKPOINT_HEADER.itemsize
    if len(raw) < size:
        raise TrainingError(f"{path}: truncated checkpoint header")
    header = np.frombuffer(raw[:size], dtype=_CHECKPOINT_HEADER)[0]
    if bytes(header["magic"]) != CHECKPOINT_MAGIC:
        raise TrainingError(f"{path}: bad checkpoint magic")
    if int(header["version"]) != CHECKPOINT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {int(header['version'])}")
    users, items, k = int(header["users"]), int(header["items"]), int(header["k"])
    if (len(raw) - size) % 4:
        raise TrainingError(f"{path}: checkpoint payload is not a whole number of floats")
    payload = np.frombuffer(raw[size:], dtype="<f4").astype(np.float64)
    expected = users * k + items * k + users
    if payload.size != expected:
        raise TrainingError(
            f"{path}: checkpoint payload has {payload.size} floats, expected {expected}"
        )
    P = payload[: users * k].reshape(users, k)
    Q = payload[users * k : users * k + items * k].reshape(items, k)
    user_jsd = payload[users * k + items * k :]
    return FactorModel(P=P.copy(), Q=Q.copy(), user_jsd=user_jsd.copy())

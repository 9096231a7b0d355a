import logging
from collections.abc import Callable, Mapping
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any

from .dataset import DEFAULT_RELEVANCE_THRESHOLD
from .exposure import EXPOSURE_MODELS, ExposureError, PoissonConfig
from .metrics import DEFAULT_DISCOUNT_BASE
from .recommender import TrainingConfig, TrainingError
from .simloop import ExperimentError, SimulationConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Raised for unreadable config files or values the simulator cannot run with."""


@dataclass
class Config:
    """Run configuration.

    Attributes:
        alpha: SGD learning rate.
        beta: Base L2 weight.
        lam: Weight of the exposure-divergence penalty.
        k: Latent dimension of the rating model.
        epochs: Maximum alternating sweeps per training.
        tol: Early-stop threshold on the objective change.
        init_scale: Half-width of the uniform factor initialization.
        propensity_floor: Lower clip for inverse-propensity weights.
        seed: Master seed for every derived stream.
        iterations: Feedback-loop rounds per replica.
        slate_size: Items recommended per user and round.
        replicas: Independent repetitions per variant.
        epsilon: Per-slot exploration probability of the bandit variants.
        train_fraction: Share of observed ratings in the initial training set.
        relevance_threshold: Ratings at or above this are relevant.
        discount_base: Rank discount of the expectation metrics.
        exposure_model: Exposure estimator used inside the loop.
        poisson_k: Latent dimension of the Poisson exposure model.
        poisson_a: Gamma prior shape.
        poisson_b: Gamma prior rate.
        poisson_iters: Variational sweeps.
        neg_ratio: Negatives per positive in exposure AUC evaluation.
        batches: Temporal batches for exposure evaluation.
        repeats: Repetitions of the exposure evaluation.
        threads: Worker threads; None defers to LOOPSIM_THREADS or the core count.
        profiling_enabled: Record stage timings.
    """

    alpha: float = 0.001
    beta: float = 0.01
    lam: float = 1.0
    k: int = 10
    epochs: int = 50
    tol: float = 1e-6
    init_scale: float = 0.1
    propensity_floor: float = 0.05
    seed: int = 42
    iterations: int = 10
    slate_size: int = 10
    replicas: int = 10
    epsilon: float = 0.1
    train_fraction: float = 0.2
    relevance_threshold: float = DEFAULT_RELEVANCE_THRESHOLD
    discount_base: float = DEFAULT_DISCOUNT_BASE
    exposure_model: str = "poisson"
    poisson_k: int = 10
    poisson_a: float = 0.3
    poisson_b: float = 0.3
    poisson_iters: int = 100
    neg_ratio: int = 1
    batches: int = 4
    repeats: int = 1
    threads: int | None = None
    profiling_enabled: bool = False

    @staticmethod
    def _parse_int(name: str, raw: str | None, default: int) -> int:
        raw_val = raw or str(default)
        try:
            return int(raw_val)
        except ValueError:
            logger.warning(
                "use default %s for invalid %s '%s'",
                default,
                name,
                raw_val,
            )
            return default

    @staticmethod
    def _parse_float(name: str, raw: str | None, default: float) -> float:
        raw_val = raw or str(default)
        try:
            return float(raw_val)
        except ValueError:
            logger.warning(
                "use default %s for invalid %s '%s'",
                default,
                name,
                raw_val,
            )
            return default

    @staticmethod
    def _parse_bool(name: str, raw: str | None, default: bool) -> bool:
        raw_val = raw or str(default)
        lowered = raw_val.lower()
        if lowered in {"1", "true", "yes", "on"}:
            return True
        if lowered in {"0", "false", "no", "off"}:
            return False
        logger.warning(
            "use default %s for invalid %s '%s'",
            default,
            name,
            raw_val,
        )
        return default

    @staticmethod
    def _parse_threads(name: str, raw: str | None, default: int | None) -> int | None:
        if raw is None or not raw.strip():
            return default
        try:
            parsed = int(raw.strip())
        except ValueError:
            logger.warning(
                "use default %s for invalid %s '%s'",
                default,
                name,
                raw,
            )
            return default
        return parsed if parsed > 0 else None

    @staticmethod
    def _parse_exposure_model(name: str, raw: str | None, default: str) -> str:
        cleaned = (raw or default).strip().lower()
        if cleaned not in EXPOSURE_MODELS:
            logger.warning(
                "use default %s for invalid %s '%s'",
                default,
                name,
                raw,
            )
            return default
        return cleaned

    @staticmethod
    def read_file(path: Path) -> dict[str, str]:
        """Read ``key=value`` lines; ``#`` starts a comment."""
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        values: dict[str, str] = {}
        for line_no, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                logger.warning("ignore malformed config line %s:%d '%s'", path, line_no, stripped)
                continue
            key, value = stripped.split("=", 1)
            values[key.strip().lower()] = value.strip()
        return values

    @classmethod
    def from_sources(
        cls,
        path: Path | None = None,
        overrides: Mapping[str, Any] | None = None,
    ) -> "Config":
        """Defaults, then the config file, then non-None ``overrides``."""
        defaults = cls()
        raw = cls.read_file(path) if path is not None else {}

        parsers: dict[str, Callable[[str, str | None, Any], Any]] = {}
        for f in fields(cls):
            if f.name == "threads":
                parsers[f.name] = cls._parse_threads
            elif f.name == "exposure_model":
                parsers[f.name] = cls._parse_exposure_model
            elif f.type in ("bool", bool):
                parsers[f.name] = cls._parse_bool
            elif f.type in ("int", int):
                parsers[f.name] = cls._parse_int
            else:
                parsers[f.name] = cls._parse_float

        for key in sorted(set(raw) - set(parsers)):
            logger.warning("ignore unknown config key '%s'", key)

        parsed = {
            name: parser(name, raw.get(name), getattr(defaults, name))
            for name, parser in parsers.items()
        }
        for name, value in (overrides or {}).items():
            if name not in parsers:
                raise ConfigError(f"unknown setting {name!r}")
            if value is not None:
                parsed[name] = value

        config = cls(**parsed)
        logger.info(
            "loaded config source=%s %s",
            path if path is not None else "defaults",
            " ".join(f"{k}={v}" for k, v in config.snapshot().items()),
        )
        return config

    def snapshot(self) -> dict[str, Any]:
        return asdict(self)

    def training(self) -> TrainingConfig:
        try:
            return TrainingConfig(
                alpha=self.alpha,
                beta=self.beta,
                lam=self.lam,
                k=self.k,
                epochs=self.epochs,
                seed=self.seed,
                init_scale=self.init_scale,
                propensity_floor=self.propensity_floor,
                tol=self.tol,
            )
        except TrainingError as exc:
            raise ConfigError(str(exc)) from exc

    def poisson(self) -> PoissonConfig:
        try:
            return PoissonConfig(
                k=self.poisson_k, a=self.poisson_a, b=self.poisson_b, iters=self.poisson_iters
            )
        except ExposureError as exc:
            raise ConfigError(str(exc)) from exc

    def simulation(self, variant: str) -> SimulationConfig:
        try:
            return SimulationConfig(
                variant=variant,
                iterations=self.iterations,
                slate_size=self.slate_size,
                replicas=self.replicas,
                training_cfg=self.training(),
                epsilon=self.epsilon,
                master_seed=self.seed,
                train_fraction=self.train_fraction,
                exposure_model=self.exposure_model,
                poisson=self.poisson(),
                discount_base=self.discount_base,
                relevance_threshold=self.relevance_threshold,
            )
        except ExperimentError as exc:
            raise ConfigError(str(exc)) from exc

import argparse
import csv
import logging
import os
import sys
from collections.abc import Callable
from pathlib import Path

from .concurrency import resolve_threads
from .config import Config, ConfigError
from .dataset import (
    MOVIELENS_DELIMITERS,
    CompleteMatrix,
    DatasetError,
    complete_semisynthetic,
    load_movielens,
    temporal_split,
)
from .exposure import (
    EXPOSURE_MODELS,
    ExposureAUC,
    ExposureError,
    build_exposure_model,
    compare_exposure_auc,
    evaluate_exposure_auc,
)
from .manifest import RunManifest
from .movielens_api import DownloadError, fetch_movielens
from .profiling import StageProfiler
from .recommender import VARIANTS, TrainingError, save_checkpoint, train
from .simloop import (
    SIM_VARIANTS,
    TRACE_COLUMNS,
    ExperimentError,
    TraceRow,
    derive_seed,
    run_experiment,
)
from .stats import StatsError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

EVAL_COLUMNS = ("model", "repeat", "window", "auc", "mean", "ci95")


class UsageError(ValueError):
    """Raised for invalid arguments or unusable inputs."""


def _csv_list(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    return path


def _sibling(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}_{suffix}{path.suffix}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="loopsim",
        description="Simulate recommendation feedback loops under exposure bias",
    )
    parser.add_argument(
        "--log-level",
        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
        help="Set logging level",
    )
    parser.add_argument("--log-file", help="Write logs to a file")
    parser.add_argument("--config", type=Path, help="key=value settings file")
    parser.add_argument("--threads", type=int, help="Worker threads (default: logical cores)")
    parser.add_argument(
        "--profile", action="store_true", default=None, help="Log stage timings at exit"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_dataset(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--dataset", type=Path, required=True, help="MovieLens ratings file")
        sub.add_argument(
            "--format", choices=sorted(MOVIELENS_DELIMITERS), default="tab_100k", dest="fmt"
        )

    fetch = commands.add_parser("fetch", help="Download a MovieLens ratings file")
    fetch.add_argument(
        "--format", choices=sorted(MOVIELENS_DELIMITERS), default="tab_100k", dest="fmt"
    )
    fetch.add_argument("--dest", type=Path, required=True)
    fetch.add_argument("--timeout", type=float, default=60.0)

    complete = commands.add_parser("complete", help="Build the semi-synthetic complete matrix")
    add_dataset(complete)
    complete.add_argument("--seed", type=int)
    complete.add_argument("--out", type=Path, required=True)

    evaluate = commands.add_parser("eval-exposure", help="Sliding-window AUC of exposure models")
    add_dataset(evaluate)
    evaluate.add_argument("--batches", type=int)
    evaluate.add_argument("--models", default="popularity,poisson")
    evaluate.add_argument("--neg-ratio", type=int, dest="neg_ratio")
    evaluate.add_argument("--repeats", type=int)
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--out", type=Path, required=True)

    simulate = commands.add_parser("simulate", help="Run the feedback-loop experiment")
    add_dataset(simulate)
    simulate.add_argument("--complete", type=Path, required=True)
    simulate.add_argument("--variants", default=",".join(SIM_VARIANTS))
    simulate.add_argument("--iterations", type=int)
    simulate.add_argument("--replicas", type=int)
    simulate.add_argument("--seed", type=int)
    simulate.add_argument("--out", type=Path, required=True)

    fit = commands.add_parser("train", help="Train one rating model and write a checkpoint")
    add_dataset(fit)
    fit.add_argument("--variant", choices=VARIANTS, default="pear_mf")
    fit.add_argument("--seed", type=int)
    fit.add_argument("--out", type=Path, required=True)
    return parser


def _load_config(args: argparse.Namespace) -> Config:
    overrides = {
        name: getattr(args, name, None)
        for name in ("seed", "batches", "neg_ratio", "repeats", "iterations", "replicas")
    }
    overrides["profiling_enabled"] = args.profile
    return Config.from_sources(args.config, overrides)


def cmd_fetch(args: argparse.Namespace, config: Config, profiler: StageProfiler) -> None:
    path = fetch_movielens(args.fmt, args.dest, timeout=args.timeout)
    logger.info("fetched path=%s", path)


def cmd_complete(args: argparse.Namespace, config: Config, profiler: StageProfiler) -> None:
    dataset = _require_file(args.dataset)
    observed = load_movielens(dataset, args.fmt)
    complete = complete_semisynthetic(
        observed,
        config.training(),
        seed=config.seed,
        relevance_threshold=config.relevance_threshold,
    )
    complete.save(args.out)
    RunManifest.for_inputs(
        "complete",
        config.snapshot(),
        [dataset],
        seeds={"seed": config.seed},
        notes={"completion_model": "mf", "clip": "[1, 5]"},
    ).write(args.out)


def cmd_eval_exposure(args: argparse.Namespace, config: Config, profiler: StageProfiler) -> None:
    dataset = _require_file(args.dataset)
    if config.batches < 2:
        raise UsageError(f"--batches must be at least 2, got {config.batches}")
    models = _csv_list(args.models)
    unknown = [m for m in models if m not in EXPOSURE_MODELS]
    if not models or unknown:
        raise UsageError(
            f"unknown exposure models {unknown}; valid names: {', '.join(EXPOSURE_MODELS)}"
        )
    observed = load_movielens(dataset, args.fmt)
    split = temporal_split(observed, config.batches)
    poisson = config.poisson()
    results: list[ExposureAUC] = []

    with args.out.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EVAL_COLUMNS)
        for name in models:
            model = build_exposure_model(name, poisson, profiler)
            result = evaluate_exposure_auc(
                model,
                split,
                neg_ratio=config.neg_ratio,
                seed=config.seed,
                repeats=config.repeats,
                profiler=profiler,
            )
            results.append(result)
            for window in result.windows:
                writer.writerow([name, window.repeat, window.window, repr(window.auc), "", ""])
            writer.writerow([name, "", "all", "", repr(result.auc_mean), repr(result.auc_ci)])
            logger.info(
                "exposure_model_done model=%s auc_mean=%.4f auc_ci=%.4f",
                name,
                result.auc_mean,
                result.auc_ci,
            )

    ttest_path = _sibling(args.out, "ttest")
    compare_exposure_auc(results).to_csv(
        ttest_path, index=False, lineterminator="\n", encoding="utf-8"
    )

    notes = {
        "models": ",".join(models),
        "auc_scope": "global per window",
        "negative_sampling": (
            f"uniform over pairs absent from training prefix and test batch, "
            f"neg_ratio={config.neg_ratio}"
        ),
        "model_comparison": "Welch t-test over window AUCs",
    }
    for artifact in (args.out, ttest_path):
        RunManifest.for_inputs(
            "eval-exposure",
            config.snapshot(),
            [dataset],
            seeds={"seed": config.seed},
            notes=notes,
        ).write(artifact)


def cmd_simulate(args: argparse.Namespace, config: Config, profiler: StageProfiler) -> None:
    dataset = _require_file(args.dataset)
    complete_path = _require_file(args.complete)
    variants = _csv_list(args.variants)
    unknown = [v for v in variants if v not in SIM_VARIANTS]
    if not variants or unknown:
        raise UsageError(f"unknown variants {unknown}; valid names: {', '.join(SIM_VARIANTS)}")
    if len(set(variants)) != len(variants):
        raise UsageError(f"duplicate variants in {variants}")

    observed = load_movielens(dataset, args.fmt)
    complete = CompleteMatrix.load(complete_path, config.relevance_threshold)
    if observed.shape != (complete.n_users, complete.n_items):
        raise UsageError(
            f"{dataset} has shape {observed.shape} but {complete_path} has "
            f"{(complete.n_users, complete.n_items)}"
        )
    configs = [config.simulation(v) for v in variants]
    threads = resolve_threads(args.threads, os.environ, config.threads)
    logger.info(
        "simulate_start variants=%s iterations=%d replicas=%d threads=%d",
        ",".join(variants),
        config.iterations,
        config.replicas,
        threads,
    )

    with args.out.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)

        def stream(rows: list[TraceRow]) -> None:
            for r in rows:
                writer.writerow(
                    [
                        r.variant,
                        r.replica,
                        r.iteration,
                        repr(r.epc),
                        repr(r.epd),
                        repr(r.gini),
                        repr(r.hit_rate),
                        r.train_size,
                    ]
                )
            fh.flush()

        result = run_experiment(
            configs,
            observed,
            complete,
            threads=threads,
            profiler=profiler,
            on_rows=stream,
        )

    aggregate_path = _sibling(args.out, "aggregate")
    ttest_path = _sibling(args.out, "ttest")
    result.aggregates.to_csv(aggregate_path, index=False, lineterminator="\n", encoding="utf-8")
    result.t_tests.to_csv(ttest_path, index=False, lineterminator="\n", encoding="utf-8")

    seeds = {
        "master_seed": config.seed,
        "replica_seeds": [derive_seed(config.seed, r) for r in range(config.replicas)],
    }
    notes = {
        "variants": ",".join(variants),
        "exposure_model": config.exposure_model,
        "propensity_estimator": f"{config.exposure_model}, floor={config.propensity_floor}",
        "mab_scheme": f"per-slot epsilon-greedy, epsilon={config.epsilon}",
        "acceptance": f"complete rating >= {config.relevance_threshold}",
        "metric_timing": "before acceptance",
        "failed_replicas": ";".join(f"{f.variant}/{f.replica}" for f in result.failures),
    }
    for artifact in (args.out, aggregate_path, ttest_path):
        RunManifest.for_inputs(
            "simulate",
            config.snapshot(),
            [dataset, complete_path],
            seeds=seeds,
            notes=notes,
        ).write(artifact)


def cmd_train(args: argparse.Namespace, config: Config, profiler: StageProfiler) -> None:
    dataset = _require_file(args.dataset)
    observed = load_movielens(dataset, args.fmt)
    exposure = None
    if args.variant != "mf":
        exposure = build_exposure_model(config.exposure_model, config.poisson(), profiler).fit(
            observed, derive_seed(config.seed, 0)
        )
    model = train(observed, exposure, args.variant, config.training(), profiler=profiler)
    save_checkpoint(model, args.out)
    RunManifest.for_inputs(
        "train",
        config.snapshot(),
        [dataset],
        seeds={"seed": config.seed},
        notes={"variant": args.variant, "exposure_model": config.exposure_model},
    ).write(args.out)


COMMANDS: dict[str, Callable[[argparse.Namespace, Config, StageProfiler], None]] = {
    "fetch": cmd_fetch,
    "complete": cmd_complete,
    "eval-exposure": cmd_eval_exposure,
    "simulate": cmd_simulate,
    "train": cmd_train,
}

USAGE_ERRORS = (UsageError, ConfigError, DatasetError, StatsError)
RUNTIME_ERRORS = (TrainingError, ExposureError, ExperimentError, DownloadError, OSError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE

    log_level = (args.log_level or os.environ.get("LOG_LEVEL", "INFO")).upper()
    log_file = args.log_file or os.environ.get("LOG_FILE")
    logging.basicConfig(
        level=log_level,
        filename=log_file,
        format="%(asctime)s [%(levelname)s] [%(name)s] [%(threadName)s] %(message)s",
    )
    logging.getLogger("urllib3").setLevel(logging.WARNING)
    logger.info("start command=%s log_level=%s log_file=%s", args.command, log_level, log_file)

    profiler = StageProfiler()
    try:
        config = _load_config(args)
        profiler.enabled = config.profiling_enabled
        COMMANDS[args.command](args, config, profiler)
    except USAGE_ERRORS as exc:
        logger.error("usage_error command=%s error=%s", args.command, exc)
        print(f"loopsim: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RUNTIME_ERRORS as exc:
        logger.error("command_failed command=%s error=%s", args.command, exc)
        print(f"loopsim: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    finally:
        if profiler.enabled:
            for line in profiler.report_lines():
                logger.info("profiling_summary %s", line)

    logger.info("done command=%s", args.command)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point: data generation, training, evaluation, sweeps, ablations and dumps."""

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import config as settings
from config import ExperimentConfig, resolve_config
from src.checkpoint import Checkpoint, load_checkpoint
from src.data import SyntheticSpec, generate_synthetic, load_dataset
from src.errors import ConfigError, NumericalError, ReIDError
from src.evaluation import FEATURE_MODES, METRICS, dump_embeddings, dump_rankings, extract_features
from src.logging_config import setup_logging
from src.pipeline import (
    MissingPrerequisiteError,
    Run,
    ablation_grid,
    evaluate_model,
    format_comparison,
    require_prerequisite,
    restore_model,
    run_grid,
    sweep_grid,
    text_cache_from,
    train_chain,
)
from src.training import FreezeViolationError, TrainingError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_MISSING_PREREQUISITE = 2
EXIT_TRAINING_FAILURE = 3

STAGE_CHOICES = ("stage0", "stage1", "stage1-averaged", "stage2", "baseline", "one-stage")


def procedure_name(stage: str) -> str:
    return stage.replace("-", "_")


def _config_from(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.set or [])
    if args.deterministic:
        overrides.append("deterministic=true")
    return resolve_config(args.config, overrides)


def _data_root(args: argparse.Namespace, cfg: ExperimentConfig) -> Path:
    root = args.data or cfg["data.root"]
    if not root:
        raise ConfigError("No dataset given; pass --data or set data.root")
    return Path(root)


def _init_checkpoint(args: argparse.Namespace) -> Checkpoint | None:
    return load_checkpoint(args.init) if args.init else None


def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(
        n_train_ids=args.ids,
        n_test_ids=args.test_ids if args.test_ids is not None else args.ids,
        images_per_id=args.per_id,
        n_cameras=args.cams,
        image_size=(args.size, args.size),
        seed=args.seed,
        kind=args.kind,
    ).scaled(args.nuisance)
    dataset = generate_synthetic(spec, args.out, workers=args.workers)
    print(f"{dataset.root}: {len(dataset.train)} train, {len(dataset.query)} query, "
          f"{len(dataset.gallery)} gallery images")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    dataset = load_dataset(_data_root(args, cfg))
    procedure = procedure_name(args.stage)
    init = _init_checkpoint(args)
    require_prerequisite(procedure, init)
    with Run("train", cfg, args.name or f"{args.stage}-{cfg.config_hash()[:10]}") as run:
        outcome, children = train_chain([procedure], cfg, dataset, run.dir, init, command="train")
        run.manifest.checkpoints.append(str(outcome.checkpoint_dir))
        run.manifest.children.extend(str(c) for c in children)
        run.finish()
    print(outcome.checkpoint_dir)
    return EXIT_OK


def _restore(args: argparse.Namespace):
    checkpoint = load_checkpoint(args.checkpoint)
    cfg_hint = ExperimentConfig.from_strings(checkpoint.manifest.get("config", {}))
    dataset = load_dataset(_data_root(args, cfg_hint))
    model, cfg = restore_model(checkpoint, dataset)
    return checkpoint, dataset, model, cfg


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint, dataset, model, cfg = _restore(args)
    mode = args.mode or cfg["eval.mode"]
    metric = args.metric or cfg["eval.metric"]

    with Run("eval", cfg, args.name or f"eval-{checkpoint.stage}-{cfg.config_hash()[:10]}-{mode}") as run:
        report = evaluate_model(model, dataset, mode, metric, cfg["eval.batch_size"])
        report.checkpoint = str(checkpoint.path)
        report.config = cfg.as_strings()
        run.manifest.checkpoints.append(str(checkpoint.path))
        run.manifest.metrics.append(str(report.write(run.dir / "metrics.json")))
        run.finish()
    print(report.format_table())
    if report.num_invalid:
        print(f"{report.num_invalid} of {report.num_queries} queries had no valid match")
    return EXIT_OK


def _write_summary(run: Run, rows, label: str) -> None:
    summary = run.dir / "summary.json"
    summary.write_text(json.dumps([asdict(row) for row in rows], indent=2) + "\n")
    run.manifest.metrics.extend(row.run_dir + "/metrics.json" for row in rows)
    run.manifest.children.extend(row.run_dir for row in rows)
    run.finish()
    print(format_comparison(rows, label))


def _grid_init(args: argparse.Namespace, cfg: ExperimentConfig, dataset, run: Run,
               command: str) -> Checkpoint:
    """The given stage-0 checkpoint, or one trained into the run directory."""
    init = _init_checkpoint(args)
    if init is not None:
        return init
    outcome, _ = train_chain(["stage0"], cfg, dataset, run.dir, None, command)
    return load_checkpoint(outcome.checkpoint_dir)


def cmd_sweep_m(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    dataset = load_dataset(_data_root(args, cfg))
    grid = sweep_grid(args.m)
    with Run("sweep-m", cfg, args.name or f"sweep-m-{cfg.config_hash()[:10]}") as run:
        init = _grid_init(args, cfg, dataset, run, "sweep-m")
        rows = run_grid(grid, cfg, dataset, run.dir, init, "sweep-m")
        _write_summary(run, rows, "M")
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    dataset = load_dataset(_data_root(args, cfg))
    grid = ablation_grid(args.preset, cfg)
    with Run("ablate", cfg, args.name or f"ablate-{args.preset}-{cfg.config_hash()[:10]}") as run:
        init = _grid_init(args, cfg, dataset, run, "ablate")
        rows = run_grid(grid, cfg, dataset, run.dir, init, "ablate")
        _write_summary(run, rows, args.preset)
    return EXIT_OK


def cmd_dump_embeddings(args: argparse.Namespace) -> int:
    checkpoint, dataset, model, cfg = _restore(args)
    index = extract_features(model, dataset, dataset.split(args.split), args.mode, cfg["eval.batch_size"])
    text_cache = None if args.no_text else text_cache_from(checkpoint)
    print(dump_embeddings(index, text_cache.features if text_cache else None, args.out))
    return EXIT_OK


def cmd_dump_rankings(args: argparse.Namespace) -> int:
    _, dataset, model, cfg = _restore(args)
    mode = args.mode or cfg["eval.mode"]
    metric = args.metric or cfg["eval.metric"]
    batch_size = cfg["eval.batch_size"]
    queries = extract_features(model, dataset, dataset.query, mode, batch_size)
    gallery = extract_features(model, dataset, dataset.gallery, mode, batch_size)
    print(dump_rankings(queries, gallery, args.top_k, args.out, metric))
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="key=value config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override one config key")
    parser.add_argument("--deterministic", action="store_true", help="Deterministic kernels, no workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipreid", description=__doc__)
    parser.add_argument("--log-level", default=None, help=f"Logging level (default {settings.LOG_LEVEL})")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="Render a synthetic multi-camera dataset")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--ids", type=int, default=20, help="Training identities (and test ones by default)")
    gen.add_argument("--test-ids", type=int, default=None)
    gen.add_argument("--cams", type=int, default=4)
    gen.add_argument("--per-id", type=int, default=30)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--kind", choices=("person", "vehicle"), default="person")
    gen.add_argument("--nuisance", type=float, default=1.0, help="Scale of camera and noise nuisances")
    gen.add_argument("--workers", type=int, default=1)
    gen.set_defaults(handler=cmd_gen_data)

    train = commands.add_parser("train", help="Run one training procedure")
    train.add_argument("--stage", choices=STAGE_CHOICES, required=True)
    train.add_argument("--data", type=Path, default=None)
    train.add_argument("--init", type=Path, default=None, help="Prerequisite checkpoint directory")
    train.add_argument("--name", default=None)
    _add_config_flags(train)
    train.set_defaults(handler=cmd_train)

    ev = commands.add_parser("eval", help="Evaluate a checkpoint on query/gallery")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data", type=Path, default=None)
    ev.add_argument("--mode", choices=tuple(FEATURE_MODES), default=None)
    ev.add_argument("--metric", choices=METRICS, default=None)
    ev.add_argument("--name", default=None)
    ev.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser("sweep-m", help="Two-stage training for several prompt lengths")
    sweep.add_argument("--m", type=int, nargs="+", required=True)
    sweep.add_argument("--data", type=Path, default=None)
    sweep.add_argument("--init", type=Path, default=None, help="Stage-0 checkpoint; trained if absent")
    sweep.add_argument("--name", default=None)
    _add_config_flags(sweep)
    sweep.set_defaults(handler=cmd_sweep_m)

    ablate = commands.add_parser("ablate", help="Run an ablation preset")
    ablate.add_argument("preset", choices=("stages", "loss-terms", "sie-olp"))
    ablate.add_argument("--data", type=Path, default=None)
    ablate.add_argument("--init", type=Path, default=None, help="Stage-0 checkpoint; trained if absent")
    ablate.add_argument("--name", default=None)
    _add_config_flags(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    emb = commands.add_parser("dump-embeddings", help="Write image and text embeddings as CSV")
    emb.add_argument("--checkpoint", type=Path, required=True)
    emb.add_argument("--data", type=Path, default=None)
    emb.add_argument("--split", choices=("train", "query", "gallery"), default="train")
    emb.add_argument("--mode", choices=tuple(FEATURE_MODES), default="post")
    emb.add_argument("--no-text", action="store_true", help="Image rows only")
    emb.add_argument("--out", type=Path, required=True)
    emb.set_defaults(handler=cmd_dump_embeddings)

    rank = commands.add_parser("dump-rankings", help="Write top-k gallery rankings per query")
    rank.add_argument("--checkpoint", type=Path, required=True)
    rank.add_argument("--data", type=Path, default=None)
    rank.add_argument("--top-k", type=int, default=10)
    rank.add_argument("--mode", choices=tuple(FEATURE_MODES), default=None)
    rank.add_argument("--metric", choices=METRICS, default=None)
    rank.add_argument("--out", type=Path, required=True)
    rank.set_defaults(handler=cmd_dump_rankings)

    return parser


def exit_code_for(error: Exception) -> int:
    if isinstance(error, MissingPrerequisiteError):
        return EXIT_MISSING_PREREQUISITE
    if isinstance(error, (TrainingError, FreezeViolationError, NumericalError)):
        return EXIT_TRAINING_FAILURE
    return EXIT_USER_ERROR


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level or settings.LOG_LEVEL)
    try:
        return args.handler(args)
    except ReIDError as e:
        logger.debug("Command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())

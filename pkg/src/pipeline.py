"""Builds models and stage settings from an ExperimentConfig, chains procedures, and owns run directories."""

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

import config as settings
from config import ExperimentConfig
from src.checkpoint import Checkpoint, load_checkpoint, load_pretrained, load_strict, save_checkpoint
from src.data import AugmentationConfig, ReIDDataset
from src.encoders import ImageEncoderConfig, SIEConfig, TextEncoderConfig
from src.errors import ConfigError, DatasetIOError, ReIDError, handle_io_errors
from src.evaluation import MetricsReport, evaluate, extract_features
from src.logging_config import JsonLinesLogger, attach_run_log, detach_run_log
from src.losses import LossWeights
from src.text_prompting import PromptTemplate
from src.training import (
    OptimSchedule,
    ReIDModel,
    StageConfig,
    StageResult,
    TextFeatureCache,
    precompute_image_features,
    pretrain_stage0,
    run_baseline,
    run_one_stage,
    run_stage1,
    run_stage1_averaged,
    run_stage2,
    seed_everything,
)

logger = logging.getLogger(__name__)

CODE_VERSION = "clipreid-desk 0.1.0"

# Checkpoint stage each procedure starts from.
PREREQUISITES: dict[str, tuple[str, ...]] = {
    "stage0": (),
    "stage1": ("stage0",),
    "stage1_averaged": ("stage0",),
    "stage2": ("stage1", "stage1_averaged"),
    "baseline": ("stage0",),
    "one_stage": ("stage0",),
}
SCHEDULE_KEY = {
    "stage0": "stage0",
    "stage1": "stage1",
    "stage1_averaged": "stage1",
    "stage2": "stage2",
    "baseline": "stage2",
    "one_stage": "stage2",
}


class MissingPrerequisiteError(ReIDError):
    """Raised when a procedure is started without the checkpoint it depends on."""
    pass


def image_config_from(cfg: ExperimentConfig) -> ImageEncoderConfig:
    return ImageEncoderConfig(
        variant=cfg["model.variant"],
        image_size=tuple(cfg["model.image_size"]),
        patch_size=cfg["model.patch"],
        stride=cfg["model.stride"],
        depth=cfg["model.depth"],
        width=cfg["model.width"],
        heads=cfg["model.heads"],
        mlp_ratio=cfg["model.mlp_ratio"],
        cnn_channels=tuple(cfg["model.cnn_channels"]),
        proj_dim=cfg["model.proj_dim"],
        dropout=cfg["model.dropout"],
    )


def text_config_from(cfg: ExperimentConfig, vocab_size: int) -> TextEncoderConfig:
    return TextEncoderConfig(
        context_length=cfg["text.context_length"],
        vocab_size=vocab_size,
        width=cfg["text.width"],
        depth=cfg["text.depth"],
        heads=cfg["text.heads"],
        proj_dim=cfg["model.proj_dim"],
    )


def sie_config_from(cfg: ExperimentConfig, num_cameras: int) -> SIEConfig | None:
    if not cfg["sie.enabled"]:
        return None
    return SIEConfig(enabled=True, num_cameras=num_cameras, lambda_sie=cfg["sie.lambda"],
                     apply_to=cfg["sie.apply_to"])


def template_from(cfg: ExperimentConfig, kind: str) -> PromptTemplate:
    return PromptTemplate.for_kind(kind, num_slots=cfg["prompt.m"],
                                   context_length=cfg["text.context_length"],
                                   prefix_text=cfg["prompt.prefix"])


def augmentation_from(cfg: ExperimentConfig) -> AugmentationConfig:
    return AugmentationConfig(
        flip_prob=cfg["aug.flip"],
        pad=cfg["aug.pad"],
        erase_prob=cfg["aug.erase"],
        erase_area=(cfg["aug.erase_min"], cfg["aug.erase_max"]),
    )


def schedule_from(cfg: ExperimentConfig, key: str) -> OptimSchedule:
    prefix = f"train.{key}"
    return OptimSchedule(
        base_lr=cfg[f"{prefix}.lr"],
        total_epochs=cfg[f"{prefix}.epochs"],
        warmup_epochs=cfg[f"{prefix}.warmup_epochs"],
        warmup_start_lr=cfg[f"{prefix}.warmup_start_lr"],
        decay=cfg[f"{prefix}.decay"],
        milestones=tuple(cfg[f"{prefix}.milestones"]),
        gamma=cfg[f"{prefix}.gamma"],
    )


def loss_weights_from(cfg: ExperimentConfig) -> LossWeights:
    w_id = cfg["train.stage2.w_id"]
    if w_id == "auto":
        w_id = LossWeights.for_variant(cfg["model.variant"]).id
    return LossWeights(id=float(w_id), triplet=cfg["train.stage2.w_tri"], i2tce=cfg["train.stage2.w_i2tce"])


def stage_config_from(cfg: ExperimentConfig, procedure: str) -> StageConfig:
    key = SCHEDULE_KEY[procedure]
    p, k = cfg["train.stage2.p"], cfg["train.stage2.k"]
    batch_size = p * k if key == "stage2" else cfg[f"train.{key}.batch_size"]
    return StageConfig(
        stage=procedure,
        schedule=schedule_from(cfg, key),
        batch_size=batch_size,
        p=p,
        k=k,
        weights=loss_weights_from(cfg),
        w_i2t=cfg["train.stage2.w_i2t"],
        w_t2i=cfg["train.stage2.w_t2i"],
        margin=cfg["train.stage2.margin"],
        label_smoothing=cfg["train.stage2.label_smoothing"],
        pre_layer_triplet=cfg["train.stage2.pre_layer_triplet"],
        train_visual_projection=cfg["train.stage2.train_visual_projection"],
        train_text_projection=cfg["train.stage2.train_text_projection"],
        weight_decay=cfg["train.weight_decay"],
        bank_lr=cfg["train.stage1.lr"] if procedure == "one_stage" else None,
        augmentation=augmentation_from(cfg) if key == "stage2" else None,
        workers=0 if cfg["deterministic"] else cfg["data.workers"],
        seed=cfg.seed,
        eval_batch_size=cfg["eval.batch_size"],
    )


def build_model(cfg: ExperimentConfig, dataset: ReIDDataset) -> ReIDModel:
    image_config = image_config_from(cfg)
    data_size = tuple(dataset.meta["image_size"])
    if image_config.image_size != data_size:
        raise ConfigError(f"model.image_size {image_config.image_size} != dataset image size {data_size}")
    torch.manual_seed(cfg.seed)
    return ReIDModel(
        image_config=image_config,
        text_config=text_config_from(cfg, dataset.vocab.size),
        template=template_from(cfg, dataset.kind),
        vocab=dataset.vocab,
        num_ids=dataset.num_train_ids,
        sie=sie_config_from(cfg, dataset.num_cameras),
        temperature=cfg["model.temperature"],
        init_std=cfg["prompt.init_std"],
        seed=cfg.seed,
    )


def model_arrays(model: ReIDModel, text_cache: TextFeatureCache | None = None) -> dict[str, torch.Tensor]:
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    if text_cache is not None:
        arrays["text_cache.features"] = text_cache.features
        if text_cache.bank is not None:
            arrays["text_cache.bank"] = text_cache.bank
    return arrays


def text_cache_from(checkpoint: Checkpoint) -> TextFeatureCache | None:
    if "text_cache.features" not in checkpoint.arrays:
        return None
    return TextFeatureCache(features=checkpoint.arrays["text_cache.features"],
                            bank=checkpoint.arrays.get("text_cache.bank"))


def encoder_arrays(checkpoint: Checkpoint) -> dict[str, torch.Tensor]:
    """Encoder weights only; token bank and identity heads start fresh."""
    return {k: v for k, v in checkpoint.subset("model").items()
            if k.startswith(("image_encoder.", "text_encoder."))}


def require_prerequisite(procedure: str, init: Checkpoint | None) -> None:
    needed = PREREQUISITES[procedure]
    if not needed:
        return
    if init is None:
        raise MissingPrerequisiteError(
            f"{procedure} needs a {' or '.join(needed)} checkpoint; pass --init <checkpoint dir>"
        )
    if init.stage not in needed:
        raise MissingPrerequisiteError(
            f"{procedure} needs a {' or '.join(needed)} checkpoint, got a {init.stage} checkpoint"
        )
    if procedure == "stage2" and text_cache_from(init) is None:
        raise MissingPrerequisiteError("stage2 needs the stage-1 text-feature cache in its checkpoint")


@dataclass
class TrainOutcome:
    model: ReIDModel
    result: StageResult
    checkpoint_dir: Path


def train_procedure(procedure: str, cfg: ExperimentConfig, dataset: ReIDDataset, run_dir: Path,
                    init: Checkpoint | None = None) -> TrainOutcome:
    """Run one procedure from its prerequisite checkpoint and save ``run_dir/checkpoint``."""
    if procedure not in PREREQUISITES:
        raise ConfigError(f"Unknown procedure {procedure!r}")
    require_prerequisite(procedure, init)
    seed_everything(cfg.seed, cfg["deterministic"])
    model = build_model(cfg, dataset)
    stage_config = stage_config_from(cfg, procedure)
    json_logger = JsonLinesLogger(run_dir / "logs.jsonl")

    text_cache = None
    if procedure == "stage2":
        load_strict(model, init.subset("model"))
        text_cache = text_cache_from(init)
    elif init is not None:
        skipped = load_pretrained(model, encoder_arrays(init))
        if skipped:
            logger.info(f"Re-initialized {len(skipped)} arrays that changed shape: {', '.join(skipped)}")

    if procedure == "stage0":
        result = pretrain_stage0(model, dataset, stage_config, json_logger)
    elif procedure in ("stage1", "stage1_averaged"):
        image_cache = precompute_image_features(model, dataset, batch_size=stage_config.eval_batch_size)
        fit = run_stage1 if procedure == "stage1" else run_stage1_averaged
        result = fit(model, image_cache, stage_config, json_logger)
    elif procedure == "stage2":
        result = run_stage2(model, dataset, text_cache, stage_config, json_logger)
    elif procedure == "baseline":
        result = run_baseline(model, dataset, stage_config, json_logger)
    else:
        result = run_one_stage(model, dataset, stage_config, json_logger)

    checkpoint_dir = save_checkpoint(
        run_dir / "checkpoint",
        model_arrays(model, result.text_cache),
        stage=procedure,
        step=result.steps,
        seed=cfg.seed,
        config=cfg.as_strings(),
        optimizer_state=result.optimizer_state,
    )
    return TrainOutcome(model=model, result=result, checkpoint_dir=checkpoint_dir)


def restore_model(checkpoint: Checkpoint, dataset: ReIDDataset) -> tuple[ReIDModel, ExperimentConfig]:
    """Rebuild a model with the configuration echoed in its checkpoint."""
    cfg = ExperimentConfig.from_strings(checkpoint.manifest.get("config", {}))
    model = build_model(cfg, dataset)
    load_strict(model, checkpoint.subset("model"))
    model.eval()
    return model, cfg


def evaluate_model(model: ReIDModel, dataset: ReIDDataset, mode: str = "img+post",
                   metric: str = "cosine", batch_size: int = 128) -> MetricsReport:
    query = extract_features(model, dataset, dataset.query, mode, batch_size)
    gallery = extract_features(model, dataset, dataset.gallery, mode, batch_size)
    report = evaluate(query, gallery, metric)
    report.mode = mode
    return report


def code_version_hash() -> str:
    """Content hash of the package sources and version string."""
    digest = hashlib.sha256(CODE_VERSION.encode())
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    checkpoints: list[str] = field(default_factory=list)
    metrics: list[str] = field(default_factory=list)
    wall_clock: float = 0.0
    code_version: str = field(default_factory=code_version_hash)
    children: list[str] = field(default_factory=list)

    @handle_io_errors
    def write(self, run_dir: Path) -> Path:
        path = Path(run_dir) / "run_manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        os.replace(tmp, path)
        return path


@handle_io_errors
def create_run_dir(name: str, parent: Path | None = None) -> Path:
    """Fresh run directory under the output root; an existing one is never reused."""
    run_dir = Path(parent or settings.OUTPUT_ROOT) / name
    if run_dir.exists():
        raise DatasetIOError(f"Run directory {run_dir} already exists")
    run_dir.mkdir(parents=True)
    return run_dir


class Run:
    """
    Context for one command: run directory, resolved config copy, manifest and run.log.

    Use as a context manager so the run's log handler is detached even when
    the command fails.
    """

    def __init__(self, command: str, cfg: ExperimentConfig, name: str, parent: Path | None = None):
        self.cfg = cfg
        self.dir = create_run_dir(name, parent)
        cfg.write(self.dir / "config.resolved")
        self.manifest = RunManifest(command=command, config_hash=cfg.config_hash())
        self._start = time.perf_counter()
        self._log_handler = attach_run_log(self.dir)
        self.events = JsonLinesLogger(self.dir / "logs.jsonl")
        self.events.log(event="start", command=command, config_hash=self.manifest.config_hash)
        logger.info(f"{command}: run directory {self.dir}")

    def __enter__(self) -> "Run":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc is not None:
            self.events.log(event="failed", error=str(exc))
            logger.error(f"Run {self.dir.name} failed: {exc}")
        self.close()
        return False

    def finish(self) -> Path:
        self.manifest.wall_clock = time.perf_counter() - self._start
        self.events.log(event="finish", wall_clock=self.manifest.wall_clock)
        path = self.manifest.write(self.dir)
        self.close()
        return path

    def close(self) -> None:
        detach_run_log(self._log_handler)
        self._log_handler = None


def train_chain(procedures: list[str], cfg: ExperimentConfig, dataset: ReIDDataset, parent: Path,
                init: Checkpoint | None = None, command: str = "train") -> tuple[TrainOutcome, list[Path]]:
    """Run procedures in order, each in its own run directory under ``parent``."""
    outcome = None
    run_dirs = []
    for procedure in procedures:
        with Run(command, cfg, procedure, parent) as run:
            outcome = train_procedure(procedure, cfg, dataset, run.dir, init)
            run.manifest.checkpoints.append(str(outcome.checkpoint_dir))
            run.finish()
        run_dirs.append(run.dir)
        init = load_checkpoint(outcome.checkpoint_dir)
    return outcome, run_dirs


def olp_stride(image_size: tuple[int, int], patch: int) -> int:
    """Largest stride below the patch size that still tiles the image."""
    for stride in range(patch - 1, 0, -1):
        if all((side - patch) % stride == 0 for side in image_size):
            return stride
    raise ConfigError(f"No overlapping stride tiles {image_size} with patch {patch}")


@dataclass(frozen=True)
class GridPoint:
    name: str
    procedures: tuple[str, ...]
    overrides: dict[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class Grid:
    points: tuple[GridPoint, ...]
    shared: tuple[str, ...] = ()


def ablation_grid(preset: str, cfg: ExperimentConfig) -> Grid:
    two_stage = ("stage1", "stage2")
    if preset == "stages":
        return Grid((
            GridPoint("baseline", ("baseline",)),
            GridPoint("one-stage", ("one_stage",)),
            GridPoint("two-stage", two_stage),
        ))
    if preset == "loss-terms":
        rows = [("none", 0, 0, 0), ("i2t+t2i", 0, 1, 1), ("i2t", 0, 1, 0),
                ("i2tce+t2i", 1, 0, 1), ("i2tce", 1, 0, 0)]
        return Grid(tuple(
            GridPoint(name, ("stage2",), {"train.stage2.w_i2tce": float(i2tce),
                                          "train.stage2.w_i2t": float(i2t),
                                          "train.stage2.w_t2i": float(t2i)})
            for name, i2tce, i2t, t2i in rows
        ), shared=("stage1",))
    if preset == "sie-olp":
        stride = olp_stride(tuple(cfg["model.image_size"]), cfg["model.patch"])
        sie_all = {"sie.enabled": True, "sie.apply_to": "all_tokens"}
        sie_cls = {"sie.enabled": True, "sie.apply_to": "cls_only"}
        return Grid((
            GridPoint("none", two_stage),
            GridPoint("SIE-all", two_stage, sie_all),
            GridPoint("SIE-cls", two_stage, sie_cls),
            GridPoint("OLP", two_stage, {"model.stride": stride}),
            GridPoint("SIE-cls+OLP", two_stage, {**sie_cls, "model.stride": stride}),
        ))
    raise ConfigError(f"Unknown ablation preset {preset!r}")


def sweep_grid(values: list[int]) -> Grid:
    if not values:
        raise ConfigError("Give at least one M value")
    return Grid(tuple(GridPoint(f"M={m}", ("stage1", "stage2"), {"prompt.m": m}) for m in values))


@dataclass
class ComparisonRow:
    name: str
    mean_ap: float
    rank1: float
    rank5: float
    run_dir: str
    wall_clock: float = 0.0


def format_comparison(rows: list[ComparisonRow], label: str = "setting") -> str:
    width = max([len(label), *(len(r.name) for r in rows)])
    lines = [f"{label:<{width}} |   mAP |    R1 |    R5"]
    for r in rows:
        lines.append(f"{r.name:<{width}} | {100 * r.mean_ap:5.1f} | {100 * r.rank1:5.1f} | {100 * r.rank5:5.1f}")
    return "\n".join(lines)


def run_grid(grid: Grid, cfg: ExperimentConfig, dataset: ReIDDataset, parent: Path,
             init: Checkpoint | None, command: str) -> list[ComparisonRow]:
    """Train and evaluate every grid point from ``init``, sharing ``grid.shared`` procedures."""
    if grid.shared:
        outcome, _ = train_chain(list(grid.shared), cfg, dataset, parent / "shared", init, command)
        init = load_checkpoint(outcome.checkpoint_dir)

    rows = []
    for point in grid.points:
        point_cfg = cfg.with_overrides(point.overrides)
        with Run(command, point_cfg, point.name, parent) as run:
            outcome, children = train_chain(list(point.procedures), point_cfg, dataset, run.dir, init, command)
            report = evaluate_model(outcome.model, dataset, point_cfg["eval.mode"], point_cfg["eval.metric"],
                                    point_cfg["eval.batch_size"])
            report.checkpoint = str(outcome.checkpoint_dir)
            report.config = point_cfg.as_strings()
            run.manifest.checkpoints.append(str(outcome.checkpoint_dir))
            run.manifest.metrics.append(str(report.write(run.dir / "metrics.json")))
            run.manifest.children.extend(str(c) for c in children)
            run.finish()
        rows.append(ComparisonRow(point.name, report.mean_ap, report.rank(1), report.rank(5),
                                  str(run.dir), run.manifest.wall_clock))
        logger.info(f"{point.name}: mAP {report.mean_ap:.4f}, R1 {report.rank(1):.4f}")
    return rows

"""Training procedures: toy contrastive pretraining, prompt fitting and image-encoder fine-tuning.

Two-stage training runs ``pretrain_stage0`` (stand-in for pretrained weights),
then ``run_stage1`` (only the per-identity token bank learns, against cached
image features) and finally ``run_stage2`` (only the image branch learns,
against the frozen per-identity text features). ``run_baseline`` and
``run_one_stage`` are the comparison procedures.
"""

import logging
import math
import random
import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from src.checkpoint import changed_parameters, parameter_hashes, tensor_hash
from src.data import AugmentationConfig, PKBatchSampler, ReIDDataset, ReIDImageDataset, ReIDRecord
from src.encoders import (
    DEFAULT_TEMPERATURE,
    FeatureBundle,
    ImageEncoderConfig,
    SIEConfig,
    TextEncoder,
    TextEncoderConfig,
    build_image_encoder,
    similarity_matrix,
)
from src.errors import ConfigError, ContractError, ReIDError
from src.logging_config import JsonLinesLogger
from src.losses import (
    LossWeights,
    loss_i2t,
    loss_i2tce,
    loss_id,
    loss_stage1,
    loss_stage2,
    loss_t2i,
    loss_t2i_multipos,
    loss_t2ice_averaged,
    loss_triplet,
)
from src.text_prompting import PromptAssembler, PromptTemplate, Vocabulary, init_token_bank, tokenize

logger = logging.getLogger(__name__)

STAGES = ("stage0", "stage1", "stage1_averaged", "stage2", "baseline", "one_stage")


class TrainingError(ReIDError):
    """Raised when a training loss becomes non-finite."""
    pass


class FreezeViolationError(ReIDError):
    """Raised when a parameter that must stay frozen changed during a stage."""
    pass


@dataclass(frozen=True)
class OptimSchedule:
    base_lr: float
    total_epochs: int
    warmup_epochs: int = 0
    warmup_start_lr: float = 0.0
    decay: str = "cosine"
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1

    def __post_init__(self):
        if self.base_lr < 0 or self.warmup_start_lr < 0:
            raise ConfigError("Learning rates must be non-negative")
        if self.warmup_start_lr > self.base_lr:
            raise ConfigError(
                f"warmup_start_lr ({self.warmup_start_lr}) exceeds base_lr ({self.base_lr})"
            )
        if self.total_epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("Epoch counts must be non-negative")
        if self.decay not in ("cosine", "milestones"):
            raise ConfigError(f"Unknown decay {self.decay!r}")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:], strict=False)):
            raise ConfigError(f"Milestones must be strictly increasing, got {self.milestones}")


def lr_at(schedule: OptimSchedule, epoch: int, step_fraction: float = 0.0) -> float:
    """
    Learning rate at ``epoch + step_fraction``.

    Linear warmup from warmup_start_lr to base_lr, then cosine decay to zero at
    total_epochs, or a factor of gamma for every milestone epoch reached.
    """
    t = epoch + step_fraction
    if t < 0 or t > schedule.total_epochs:
        raise ConfigError(f"Epoch {t} outside the schedule's {schedule.total_epochs} epochs")
    if t < schedule.warmup_epochs:
        span = schedule.base_lr - schedule.warmup_start_lr
        return schedule.warmup_start_lr + span * t / schedule.warmup_epochs
    if schedule.decay == "milestones":
        return schedule.base_lr * schedule.gamma ** sum(epoch >= m for m in schedule.milestones)
    remaining = schedule.total_epochs - schedule.warmup_epochs
    progress = (t - schedule.warmup_epochs) / remaining if remaining > 0 else 0.0
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def build_scheduler(optimizer: torch.optim.Optimizer, schedule: OptimSchedule,
                    steps_per_epoch: int) -> LambdaLR:
    """Per-step LambdaLR following lr_at; every param group is scaled alike."""
    steps_per_epoch = max(steps_per_epoch, 1)

    def scale(step: int) -> float:
        if schedule.base_lr == 0:
            return 0.0
        epoch, within = divmod(step, steps_per_epoch)
        if epoch >= schedule.total_epochs:
            return lr_at(schedule, schedule.total_epochs) / schedule.base_lr
        return lr_at(schedule, epoch, within / steps_per_epoch) / schedule.base_lr

    return LambdaLR(optimizer, scale)


@dataclass(frozen=True)
class StageConfig:
    stage: str
    schedule: OptimSchedule
    batch_size: int = 64
    p: int = 8
    k: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    w_i2t: float = 0.0
    w_t2i: float = 0.0
    margin: float = 0.3
    label_smoothing: float = 0.1
    pre_layer_triplet: bool = True
    train_visual_projection: bool = True
    train_text_projection: bool = False
    weight_decay: float = 0.0
    bank_lr: float | None = None
    augmentation: AugmentationConfig | None = None
    workers: int = 0
    seed: int = 0
    eval_batch_size: int = 128

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"Unknown stage {self.stage!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.w_i2t < 0 or self.w_t2i < 0:
            raise ConfigError("Loss weights must be non-negative")

    @property
    def epochs(self) -> int:
        return self.schedule.total_epochs


@dataclass
class ImageFeatureCache:
    paths: list[str]
    pids: torch.Tensor
    camids: torch.Tensor
    features: torch.Tensor
    means: torch.Tensor

    def __len__(self) -> int:
        return len(self.paths)

    def feature_of(self, path: str) -> torch.Tensor:
        return self.features[self.paths.index(path)]


@dataclass
class TextFeatureCache:
    features: torch.Tensor
    bank: torch.Tensor | None = None

    @property
    def num_ids(self) -> int:
        return self.features.shape[0]

    def digest(self) -> str:
        parts = [tensor_hash(self.features)]
        if self.bank is not None:
            parts.append(tensor_hash(self.bank))
        return ":".join(parts)


@dataclass
class StageResult:
    stage: str
    steps: int
    losses: list[float]
    wall_clock: float
    text_cache: TextFeatureCache | None = None
    optimizer_state: dict | None = field(default=None, repr=False)


class ReIDModel(nn.Module):
    """Image encoder, text encoder, per-identity token bank and the two identity heads."""

    def __init__(
        self,
        image_config: ImageEncoderConfig,
        text_config: TextEncoderConfig,
        template: PromptTemplate,
        vocab: Vocabulary,
        num_ids: int,
        sie: SIEConfig | None = None,
        temperature: float = DEFAULT_TEMPERATURE,
        init_std: float = 0.02,
        seed: int = 0,
    ):
        super().__init__()
        if image_config.proj_dim != text_config.proj_dim:
            raise ConfigError(
                f"Image projection ({image_config.proj_dim}) and text projection "
                f"({text_config.proj_dim}) must share the joint dimension"
            )
        if text_config.vocab_size < vocab.size:
            raise ConfigError(f"Text encoder vocab {text_config.vocab_size} < vocabulary {vocab.size}")
        if template.context_length != text_config.context_length:
            raise ConfigError("Prompt template and text encoder disagree on context length")

        self.image_config = image_config
        self.vocab = vocab
        self.template = template
        self.num_ids = num_ids
        self.temperature = temperature
        self.uses_cameras = sie is not None and sie.enabled

        self.image_encoder = build_image_encoder(image_config, sie)
        self.text_encoder = TextEncoder(text_config)
        self.token_bank = (
            init_token_bank(num_ids, template.num_slots, text_config.width, seed, init_std)
            if template.num_slots > 0 else None
        )
        self.id_head_img = nn.Linear(image_config.backbone_dim, num_ids, bias=False)
        self.id_head_post = nn.Linear(image_config.proj_dim, num_ids, bias=False)
        nn.init.normal_(self.id_head_img.weight, std=0.001)
        nn.init.normal_(self.id_head_post.weight, std=0.001)
        self.assembler = PromptAssembler(template, vocab)

    def encode_image(self, images: torch.Tensor, camera_ids: torch.Tensor | None = None) -> FeatureBundle:
        return self.image_encoder(images, camera_ids if self.uses_cameras else None)

    def encode_prompts(self, identities: torch.Tensor) -> torch.Tensor:
        prompts, eos = self.assembler.assemble(identities, self.token_bank, self.text_encoder.token_embedding)
        return self.text_encoder(prompts, eos)

    def encode_captions(self, token_ids: torch.Tensor, eos_positions: torch.Tensor) -> torch.Tensor:
        return self.text_encoder.encode_tokens(token_ids, eos_positions)

    def projection_parameters(self) -> list[nn.Parameter]:
        """The image-side joint-space projection (linear layer or attention-pool output)."""
        if self.image_config.variant == "vit":
            return list(self.image_encoder.proj.parameters())
        return list(self.image_encoder.attnpool.c_proj.parameters())

    def image_parameters(self, include_projection: bool = True) -> list[nn.Parameter]:
        excluded = set() if include_projection else {id(p) for p in self.projection_parameters()}
        params = [*self.image_encoder.parameters(), *self.id_head_img.parameters(),
                  *self.id_head_post.parameters()]
        return [p for p in params if id(p) not in excluded]

    def text_hashes(self, include_bank: bool = True, include_projection: bool = True) -> dict[str, str]:
        hashes = {
            f"text_encoder.{k}": v for k, v in parameter_hashes(self.text_encoder).items()
            if include_projection or not k.startswith("text_projection.")
        }
        if include_bank and self.token_bank is not None:
            hashes.update({f"token_bank.{k}": v for k, v in parameter_hashes(self.token_bank).items()})
        return hashes


def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def _set_trainable(model: nn.Module, params: list[nn.Parameter]) -> None:
    for p in model.parameters():
        p.requires_grad_(False)
    for p in params:
        p.requires_grad_(True)


def _audit(before: dict[str, str], after: dict[str, str], stage: str, what: str) -> None:
    changed = changed_parameters(before, after)
    if changed:
        raise FreezeViolationError(f"{stage} changed frozen {what}: {', '.join(changed[:5])}")


def _apply_step(optimizer: torch.optim.Optimizer, scheduler: LambdaLR, loss: torch.Tensor,
                step: int, stage: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{stage} loss became {loss.item()} at step {step}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    scheduler.step()


def _camera_tensor(records: list[ReIDRecord]) -> torch.Tensor:
    return torch.tensor([r.camid for r in records], dtype=torch.long)


def pretrain_stage0(model: ReIDModel, dataset: ReIDDataset, config: StageConfig,
                    json_logger: JsonLinesLogger | None = None) -> StageResult:
    """
    Jointly train both encoders and both projections with loss_i2t + loss_t2i on captions.

    Batches hold one image per distinct identity, so every caption in a batch
    is unique and the diagonal pairing is unambiguous.
    """
    json_logger = json_logger or JsonLinesLogger()
    records = dataset.train
    captions = {pair.path: pair.caption for pair in dataset.captions}
    if not records or not captions:
        raise ContractError("Stage-0 pretraining needs caption pairs")

    context_length = model.text_encoder.config.context_length
    tokens: dict[str, tuple[torch.Tensor, int]] = {}

    def tokens_for(record: ReIDRecord) -> tuple[torch.Tensor, int]:
        if record.path not in captions:
            raise ContractError(f"No caption for {record.path}")
        caption = captions[record.path]
        if caption not in tokens:
            tokens[caption] = tokenize(caption, model.vocab, context_length)
        return tokens[caption]

    labels = [r.pid for r in records]
    ids_per_batch = min(config.batch_size, len(set(labels)))
    sampler = PKBatchSampler(labels, ids_per_batch, 1, config.seed)
    params = [*model.image_encoder.parameters(), *model.text_encoder.parameters()]
    _set_trainable(model, params)
    optimizer = torch.optim.Adam(params, lr=config.schedule.base_lr, weight_decay=config.weight_decay)
    scheduler = build_scheduler(optimizer, config.schedule, len(sampler))

    model.train()
    losses, step = [], 0
    start = time.perf_counter()
    for epoch in tqdm(range(config.epochs), desc=config.stage, disable=None):
        sampler.set_epoch(epoch)
        json_logger.log(epoch=epoch, stage=config.stage, lr=scheduler.get_last_lr()[0])
        for batch in sampler:
            batch_records = [records[i] for i in batch]
            images = dataset.load_images(batch_records)
            token_ids, eos = zip(*(tokens_for(r) for r in batch_records), strict=True)
            image_features = model.encode_image(images, _camera_tensor(batch_records)).post_img_feature
            text_features = model.encode_captions(torch.stack(token_ids), torch.tensor(eos))
            similarities = similarity_matrix(image_features, text_features, model.temperature)
            i2t, t2i = loss_i2t(similarities), loss_t2i(similarities)
            loss = i2t + t2i
            _apply_step(optimizer, scheduler, loss, step, config.stage)
            json_logger.log_losses(step, config.stage, {"i2t": i2t.item(), "t2i": t2i.item(),
                                                        "total": loss.item()})
            losses.append(loss.item())
            step += 1

    model.eval()
    elapsed = time.perf_counter() - start
    logger.info(f"{config.stage}: {step} steps in {elapsed:.1f}s")
    return StageResult(config.stage, step, losses, elapsed, optimizer_state=optimizer.state_dict())


@torch.no_grad()
def precompute_image_features(model: ReIDModel, dataset: ReIDDataset,
                              records: list[ReIDRecord] | None = None,
                              batch_size: int = 128) -> ImageFeatureCache:
    """One eval-mode forward pass per train image, plus the per-identity mean features."""
    records = dataset.train if records is None else records
    if not records:
        raise ContractError("No images to encode")
    model.eval()
    chunks = []
    for begin in range(0, len(records), batch_size):
        chunk = records[begin:begin + batch_size]
        images = dataset.load_images(chunk)
        chunks.append(model.encode_image(images, _camera_tensor(chunk)).post_img_feature)
    features = torch.cat(chunks)
    pids = torch.tensor([r.pid for r in records], dtype=torch.long)

    means = []
    for identity in range(model.num_ids):
        rows = features[pids == identity]
        if rows.shape[0] == 0:
            raise ContractError(f"Identity {identity} has no training image")
        means.append(rows.mean(dim=0))
    logger.info(f"Cached {len(records)} image features for {model.num_ids} identities")
    return ImageFeatureCache(
        paths=[r.path for r in records],
        pids=pids,
        camids=_camera_tensor(records),
        features=features,
        means=torch.stack(means),
    )


@torch.no_grad()
def compute_text_features(model: ReIDModel, batch_size: int = 256) -> torch.Tensor:
    """g_T(T(prompt_y)) for every identity y."""
    model.eval()
    rows = [
        model.encode_prompts(torch.arange(begin, min(begin + batch_size, model.num_ids)))
        for begin in range(0, model.num_ids, batch_size)
    ]
    return torch.cat(rows)


def _snapshot_cache(model: ReIDModel) -> TextFeatureCache:
    bank = model.token_bank.embeddings.detach().clone() if model.token_bank is not None else None
    return TextFeatureCache(features=compute_text_features(model), bank=bank)


def _fit_prompts(model: ReIDModel, config: StageConfig, json_logger: JsonLinesLogger | None,
                 num_items: int, batch_loss) -> StageResult:
    """Shared stage-1 loop: Adam on the token bank only, everything else hash-audited."""
    json_logger = json_logger or JsonLinesLogger()
    if model.token_bank is None:
        logger.warning(f"{config.stage}: template has no learnable slots; only caching text features")
        return StageResult(config.stage, 0, [], 0.0, text_cache=_snapshot_cache(model))

    bank = model.token_bank.embeddings
    _set_trainable(model, [bank])
    frozen_before = {k: v for k, v in parameter_hashes(model).items() if not k.startswith("token_bank.")}
    optimizer = torch.optim.Adam([bank], lr=config.schedule.base_lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(num_items / config.batch_size)
    scheduler = build_scheduler(optimizer, config.schedule, steps_per_epoch)
    generator = torch.Generator().manual_seed(config.seed)

    model.eval()
    losses, step = [], 0
    start = time.perf_counter()
    for epoch in tqdm(range(config.epochs), desc=config.stage, disable=None):
        json_logger.log(epoch=epoch, stage=config.stage, lr=scheduler.get_last_lr()[0])
        order = torch.randperm(num_items, generator=generator)
        for begin in range(0, num_items, config.batch_size):
            loss = batch_loss(order[begin:begin + config.batch_size])
            _apply_step(optimizer, scheduler, loss, step, config.stage)
            json_logger.log_losses(step, config.stage, {"total": loss.item()})
            losses.append(loss.item())
            step += 1
    elapsed = time.perf_counter() - start

    frozen_after = {k: v for k, v in parameter_hashes(model).items() if not k.startswith("token_bank.")}
    _audit(frozen_before, frozen_after, config.stage, "encoder parameters")
    bank.requires_grad_(False)
    logger.info(f"{config.stage}: {step} steps in {elapsed:.1f}s")
    return StageResult(config.stage, step, losses, elapsed, text_cache=_snapshot_cache(model),
                       optimizer_state=optimizer.state_dict())


def run_stage1(model: ReIDModel, image_cache: ImageFeatureCache, config: StageConfig,
               json_logger: JsonLinesLogger | None = None) -> StageResult:
    """
    Fit the token bank against cached image features with loss_i2t + multi-positive loss_t2i.

    Each batch samples cached images uniformly; prompts are encoded once per
    distinct identity in the batch and expanded back to one row per image.
    """
    def batch_loss(indices: torch.Tensor) -> torch.Tensor:
        features = image_cache.features[indices]
        labels = image_cache.pids[indices]
        identities, inverse = torch.unique(labels, return_inverse=True)
        text = model.encode_prompts(identities)[inverse]
        return loss_stage1(features, text, labels, model.temperature)

    return _fit_prompts(model, config, json_logger, len(image_cache), batch_loss)


def run_stage1_averaged(model: ReIDModel, image_cache: ImageFeatureCache, config: StageConfig,
                        json_logger: JsonLinesLogger | None = None) -> StageResult:
    """
    Fit the token bank against the per-identity mean image features.

    Each step classifies a batch of identity prompts over all N mean features
    with loss_t2ice_averaged.
    """
    means = image_cache.means
    if means.shape[0] != model.num_ids:
        raise ContractError(f"{means.shape[0]} mean features for {model.num_ids} identities")

    def batch_loss(identities: torch.Tensor) -> torch.Tensor:
        text = model.encode_prompts(identities)
        return loss_t2ice_averaged(similarity_matrix(means, text, model.temperature), identities)

    return _fit_prompts(model, config, json_logger, model.num_ids, batch_loss)


def _fine_tune(model: ReIDModel, dataset: ReIDDataset, text_cache: TextFeatureCache | None,
               config: StageConfig, json_logger: JsonLinesLogger | None,
               joint: bool = False) -> StageResult:
    json_logger = json_logger or JsonLinesLogger()
    num_ids = model.num_ids
    if text_cache is not None and text_cache.num_ids != num_ids:
        raise ContractError(f"Text cache has {text_cache.num_ids} identities, model has {num_ids}")
    if joint and model.token_bank is None:
        raise ContractError("Joint training needs learnable prompt slots")

    # g_T can only learn when text anchors are re-encoded each step
    tune_text_projection = config.train_text_projection and text_cache is not None and not joint
    image_params = model.image_parameters(config.train_visual_projection)
    groups = [{"params": image_params, "lr": config.schedule.base_lr}]
    if joint:
        bank_lr = config.bank_lr if config.bank_lr is not None else config.schedule.base_lr
        groups.append({"params": [model.token_bank.embeddings], "lr": bank_lr})
    if tune_text_projection:
        groups.append({"params": list(model.text_encoder.text_projection.parameters()),
                       "lr": config.schedule.base_lr})
    _set_trainable(model, [p for group in groups for p in group["params"]])
    text_before = model.text_hashes(include_bank=not joint, include_projection=not tune_text_projection)
    cache_before = text_cache.digest() if text_cache is not None else None

    records = dataset.train
    sampler = PKBatchSampler([r.pid for r in records], config.p, config.k, config.seed)
    images_view = ReIDImageDataset(dataset, records, config.augmentation, config.seed)
    loader = DataLoader(
        images_view,
        batch_sampler=sampler,
        num_workers=config.workers,
    )
    optimizer = torch.optim.Adam(groups, weight_decay=config.weight_decay)
    scheduler = build_scheduler(optimizer, config.schedule, len(sampler))
    weights, eps = config.weights, config.label_smoothing

    model.train()
    losses, step = [], 0
    start = time.perf_counter()
    for epoch in tqdm(range(config.epochs), desc=config.stage, disable=None):
        sampler.set_epoch(epoch)
        images_view.set_epoch(epoch)
        json_logger.log(epoch=epoch, stage=config.stage, lr=scheduler.get_last_lr()[0])
        for images, pids, camids in loader:
            bundle = model.encode_image(images, camids)
            post = bundle.post_img_feature
            terms = {
                "id": loss_id(model.id_head_img(bundle.img_feature), pids, eps)
                + loss_id(model.id_head_post(post), pids, eps),
            }
            triplet = loss_triplet(bundle.img_feature, pids, config.margin) + loss_triplet(post, pids, config.margin)
            if config.pre_layer_triplet:
                triplet = triplet + loss_triplet(bundle.pre_img_feature, pids, config.margin)
            terms["tri"] = triplet

            anchors = None
            if joint:
                anchors = model.encode_prompts(torch.arange(num_ids))
                terms["stage1"] = loss_stage1(post, anchors[pids], pids, model.temperature)
            elif tune_text_projection:
                anchors = model.encode_prompts(torch.arange(num_ids))
            elif text_cache is not None:
                anchors = text_cache.features
            if anchors is not None and weights.i2tce > 0:
                similarities = similarity_matrix(post, anchors, model.temperature)
                terms["i2tce"] = loss_i2tce(similarities, pids, num_ids, eps)
            if anchors is not None and (config.w_i2t > 0 or config.w_t2i > 0):
                batch_similarities = similarity_matrix(post, anchors[pids], model.temperature)
                terms["i2t"] = loss_i2t(batch_similarities)
                terms["t2i"] = loss_t2i_multipos(batch_similarities, pids)

            zero = post.new_zeros(())
            loss = loss_stage2(terms["id"], terms["tri"], terms.get("i2tce", zero), weights)
            loss = loss + config.w_i2t * terms.get("i2t", zero) + config.w_t2i * terms.get("t2i", zero)
            loss = loss + terms.get("stage1", zero)
            _apply_step(optimizer, scheduler, loss, step, config.stage)
            json_logger.log_losses(step, config.stage, {**{k: v.item() for k, v in terms.items()},
                                                        "total": loss.item()})
            losses.append(loss.item())
            step += 1

    model.eval()
    elapsed = time.perf_counter() - start
    text_after = model.text_hashes(include_bank=not joint, include_projection=not tune_text_projection)
    _audit(text_before, text_after, config.stage, "text parameters")
    if text_cache is not None and text_cache.digest() != cache_before:
        raise FreezeViolationError(f"{config.stage} modified the text-feature cache")
    logger.info(f"{config.stage}: {step} steps in {elapsed:.1f}s")
    return StageResult(
        config.stage, step, losses, elapsed,
        text_cache=_snapshot_cache(model) if joint or tune_text_projection else text_cache,
        optimizer_state=optimizer.state_dict(),
    )


def run_stage2(model: ReIDModel, dataset: ReIDDataset, text_cache: TextFeatureCache,
               config: StageConfig, json_logger: JsonLinesLogger | None = None) -> StageResult:
    """
    Fine-tune the image branch with L_id + L_tri + L_i2tce against the frozen text cache.

    Identity and triplet losses apply to both img_feature and post_img_feature
    (one classifier head each); the optional pre-layer triplet adds a third
    triplet term on pre_img_feature.
    """
    if text_cache is None:
        raise ContractError("Stage 2 needs the text-feature cache produced by stage 1")
    return _fine_tune(model, dataset, text_cache, config, json_logger)


def run_baseline(model: ReIDModel, dataset: ReIDDataset, config: StageConfig,
                 json_logger: JsonLinesLogger | None = None) -> StageResult:
    """Plain image-encoder fine-tuning: stage 2 without any text-encoder loss."""
    config = replace(config, weights=replace(config.weights, i2tce=0.0), w_i2t=0.0, w_t2i=0.0)
    return _fine_tune(model, dataset, None, config, json_logger)


def run_one_stage(model: ReIDModel, dataset: ReIDDataset, config: StageConfig,
                  json_logger: JsonLinesLogger | None = None) -> StageResult:
    """Train the image branch and the token bank together; text anchors are re-encoded every step."""
    return _fine_tune(model, dataset, None, config, json_logger, joint=True)

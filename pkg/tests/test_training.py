"""Tests for the training module."""

import math

import pytest
import torch

from src.checkpoint import load_checkpoint, parameter_hashes
from src.encoders import similarity_matrix
from src.errors import ConfigError, ContractError
from src.logging_config import JsonLinesLogger
from src.pipeline import build_model, restore_model, stage_config_from, text_cache_from, train_chain
from src.text_prompting import tokenize
from src.training import (
    FreezeViolationError,
    OptimSchedule,
    TextFeatureCache,
    TrainingError,
    _apply_step,
    _audit,
    build_scheduler,
    compute_text_features,
    lr_at,
    precompute_image_features,
    pretrain_stage0,
    run_baseline,
    run_one_stage,
    run_stage1,
    run_stage1_averaged,
    run_stage2,
)


def _hashes(module):
    return parameter_hashes(module)


def _matched_similarity(model, image_cache):
    """Mean cosine between each cached image and the prompt of its own identity."""
    text = compute_text_features(model)[image_cache.pids]
    return similarity_matrix(image_cache.features, text, 1.0).diagonal().mean().item()


@pytest.fixture
def model(tiny_config, tiny_dataset):
    return build_model(tiny_config, tiny_dataset)


@pytest.fixture
def fitted(model, tiny_config, tiny_dataset):
    """Model after stage 1 plus the resulting text cache."""
    cache = precompute_image_features(model, tiny_dataset)
    result = run_stage1(model, cache, stage_config_from(tiny_config, "stage1"))
    return model, result.text_cache


class TestSchedule:
    """Test cases for the learning-rate schedule."""

    def test_warmup_is_linear(self):
        """Test the warmup endpoints and midpoint."""
        schedule = OptimSchedule(base_lr=1.0, total_epochs=10, warmup_epochs=4, warmup_start_lr=0.2)

        assert lr_at(schedule, 0) == pytest.approx(0.2)
        assert lr_at(schedule, 2) == pytest.approx(0.6)
        assert lr_at(schedule, 4) == pytest.approx(1.0)

    def test_cosine_decay(self):
        """Test the cosine midpoint and end."""
        schedule = OptimSchedule(base_lr=2.0, total_epochs=10)

        assert lr_at(schedule, 5) == pytest.approx(1.0)
        assert lr_at(schedule, 10) == pytest.approx(0.0, abs=1e-12)

    def test_milestones(self):
        """Test that each milestone multiplies by gamma."""
        schedule = OptimSchedule(base_lr=1.0, total_epochs=30, decay="milestones", milestones=(10, 20), gamma=0.1)

        assert lr_at(schedule, 9) == pytest.approx(1.0)
        assert lr_at(schedule, 10) == pytest.approx(0.1)
        assert lr_at(schedule, 25) == pytest.approx(0.01)

    def test_outside_schedule(self):
        """Test that epochs past the end are rejected."""
        with pytest.raises(ConfigError):
            lr_at(OptimSchedule(base_lr=1.0, total_epochs=3), 4)

    def test_warmup_start_above_base(self):
        """Test that warmup cannot start above the base rate."""
        with pytest.raises(ConfigError):
            OptimSchedule(base_lr=0.1, total_epochs=3, warmup_start_lr=0.2)

    def test_scheduler_follows_lr_at(self):
        """Test that the per-step scheduler tracks lr_at at epoch boundaries."""
        schedule = OptimSchedule(base_lr=0.5, total_epochs=4, warmup_epochs=1, warmup_start_lr=0.05)
        optimizer = torch.optim.SGD([torch.nn.Parameter(torch.zeros(1))], lr=schedule.base_lr)
        scheduler = build_scheduler(optimizer, schedule, steps_per_epoch=3)

        seen = []
        for _ in range(12):
            seen.append(scheduler.get_last_lr()[0])
            optimizer.step()
            scheduler.step()

        for epoch in range(4):
            assert seen[3 * epoch] == pytest.approx(lr_at(schedule, epoch))


class TestStage0:
    """Test cases for toy contrastive pretraining."""

    def test_trains_both_encoders(self, model, tiny_config, tiny_dataset):
        """Test that both encoders change and losses are logged."""
        image_before = _hashes(model.image_encoder)
        text_before = _hashes(model.text_encoder)
        json_logger = JsonLinesLogger()

        result = pretrain_stage0(model, tiny_dataset, stage_config_from(tiny_config, "stage0"), json_logger)

        assert result.steps > 0
        assert _hashes(model.image_encoder) != image_before
        assert _hashes(model.text_encoder) != text_before
        assert len(json_logger.values("i2t")) == result.steps

    def test_matched_pairs_score_higher(self, model, tiny_config, tiny_dataset):
        """Test that after pretraining an image is closer to its own caption than to others."""
        cfg = tiny_config.with_overrides({"train.stage0.epochs": 20})
        pretrain_stage0(model, tiny_dataset, stage_config_from(cfg, "stage0"))
        firsts = {}
        for record in tiny_dataset.train:
            firsts.setdefault(record.pid, record)
        records = [firsts[pid] for pid in sorted(firsts)]
        tokens, eos = zip(*(tokenize(tiny_dataset.caption_of(r), model.vocab, model.text_encoder.config.context_length)
                            for r in records), strict=True)

        with torch.no_grad():
            images = model.encode_image(tiny_dataset.load_images(records)).post_img_feature
            captions = model.encode_captions(torch.stack(tokens), torch.tensor(eos))
        similarities = similarity_matrix(images, captions, 1.0)

        off_diagonal = ~torch.eye(len(records), dtype=torch.bool)
        assert similarities.diagonal().mean() > similarities[off_diagonal].mean()


class TestStage1:
    """Test cases for prompt fitting."""

    def test_only_token_bank_changes(self, model, tiny_config, tiny_dataset):
        """Test that every encoder hash is unchanged and the bank moved."""
        cache = precompute_image_features(model, tiny_dataset)
        before = _hashes(model)

        result = run_stage1(model, cache, stage_config_from(tiny_config, "stage1"))

        after = _hashes(model)
        changed = {k for k in before if before[k] != after[k]}
        assert changed == {"token_bank.embeddings"}
        assert result.text_cache.features.shape == (4, 8)

    def test_loss_decreases(self, model, tiny_config, tiny_dataset):
        """Test that the prompt objective goes down over training."""
        config = stage_config_from(tiny_config.with_overrides({"train.stage1.epochs": 30}), "stage1")
        cache = precompute_image_features(model, tiny_dataset)

        result = run_stage1(model, cache, config)

        steps_per_epoch = math.ceil(len(cache) / config.batch_size)
        first = sum(result.losses[:steps_per_epoch]) / steps_per_epoch
        last = sum(result.losses[-steps_per_epoch:]) / steps_per_epoch
        assert last < first

    def test_matched_similarity_increases(self, model, tiny_config, tiny_dataset):
        """Test that prompt fitting pulls each identity's prompt towards its images."""
        config = stage_config_from(tiny_config.with_overrides({"train.stage1.epochs": 30}), "stage1")
        cache = precompute_image_features(model, tiny_dataset)
        before = _matched_similarity(model, cache)

        run_stage1(model, cache, config)

        assert _matched_similarity(model, cache) > before

    def test_saved_cache_matches_saved_bank(self, tiny_config, tiny_dataset, tmp_path):
        """Test that every cached row equals the prompt feature re-encoded from the saved bank."""
        outcome, _ = train_chain(["stage0", "stage1"], tiny_config, tiny_dataset, tmp_path / "runs")
        checkpoint = load_checkpoint(outcome.checkpoint_dir)
        cache = text_cache_from(checkpoint)

        restored, _ = restore_model(checkpoint, tiny_dataset)
        recomputed = compute_text_features(restored)

        assert torch.equal(restored.token_bank.embeddings, cache.bank)
        assert recomputed.shape == cache.features.shape
        for identity in range(cache.num_ids):
            assert torch.allclose(recomputed[identity], cache.features[identity], atol=1e-6)

    def test_averaged_mode(self, model, tiny_config, tiny_dataset):
        """Test that averaged fitting also changes only the bank."""
        cache = precompute_image_features(model, tiny_dataset)
        encoder_before = _hashes(model.image_encoder)

        result = run_stage1_averaged(model, cache, stage_config_from(tiny_config, "stage1_averaged"))

        assert _hashes(model.image_encoder) == encoder_before
        assert result.steps == 2  # one batch of 4 ids per epoch
        assert result.text_cache.num_ids == 4

    def test_zero_slots_only_caches(self, tiny_config, tiny_dataset):
        """Test that M=0 skips optimization but still caches text features."""
        model = build_model(tiny_config.with_overrides({"M": 0}), tiny_dataset)
        cache = precompute_image_features(model, tiny_dataset)

        result = run_stage1(model, cache, stage_config_from(tiny_config, "stage1"))

        assert result.steps == 0
        assert result.text_cache.bank is None
        assert torch.allclose(result.text_cache.features[0], result.text_cache.features[1])

    def test_identity_means(self, model, tiny_dataset):
        """Test that cached means average each identity's features."""
        cache = precompute_image_features(model, tiny_dataset)

        expected = cache.features[cache.pids == 2].mean(dim=0)

        assert torch.allclose(cache.means[2], expected)


class TestStage2:
    """Test cases for image-encoder fine-tuning."""

    def test_text_side_frozen(self, fitted, tiny_config, tiny_dataset):
        """Test that text encoder, bank and cache are unchanged while the image encoder learns."""
        model, text_cache = fitted
        text_before = model.text_hashes()
        image_before = _hashes(model.image_encoder)
        digest = text_cache.digest()

        result = run_stage2(model, tiny_dataset, text_cache, stage_config_from(tiny_config, "stage2"))

        assert model.text_hashes() == text_before
        assert text_cache.digest() == digest
        assert _hashes(model.image_encoder) != image_before
        assert result.text_cache is text_cache

    def test_frozen_visual_projection(self, fitted, tiny_config, tiny_dataset):
        """Test that the image projection can be kept fixed."""
        model, text_cache = fitted
        cfg = tiny_config.with_overrides({"train.stage2.train_visual_projection": False})
        proj_before = [p.detach().clone() for p in model.projection_parameters()]

        run_stage2(model, tiny_dataset, text_cache, stage_config_from(cfg, "stage2"))

        for before, after in zip(proj_before, model.projection_parameters(), strict=True):
            assert torch.equal(before, after)

    def test_trainable_text_projection(self, fitted, tiny_config, tiny_dataset):
        """Test that only the text projection moves on the text side and the cache is refreshed."""
        model, text_cache = fitted
        cfg = tiny_config.with_overrides({"train.stage2.train_text_projection": True})
        before = model.text_hashes(include_projection=False)
        proj_before = model.text_encoder.text_projection.weight.detach().clone()

        result = run_stage2(model, tiny_dataset, text_cache, stage_config_from(cfg, "stage2"))

        assert model.text_hashes(include_projection=False) == before
        assert not torch.equal(model.text_encoder.text_projection.weight, proj_before)
        assert result.text_cache is not text_cache

    def test_batch_level_text_losses(self, fitted, tiny_config, tiny_dataset):
        """Test that i2t and t2i terms are logged when weighted in."""
        model, text_cache = fitted
        cfg = tiny_config.with_overrides({"train.stage2.w_i2t": 1.0, "train.stage2.w_t2i": 1.0,
                                          "train.stage2.w_i2tce": 0.0})
        json_logger = JsonLinesLogger()

        run_stage2(model, tiny_dataset, text_cache, stage_config_from(cfg, "stage2"), json_logger)

        assert json_logger.values("i2t")
        assert json_logger.values("t2i")
        assert not json_logger.values("i2tce")

    def test_zero_weights_leave_encoder_unchanged(self, fitted, tiny_config, tiny_dataset):
        """Test that with every loss weight at zero no image parameter moves."""
        model, text_cache = fitted
        cfg = tiny_config.with_overrides({"train.stage2.w_id": 0, "train.stage2.w_tri": 0,
                                          "train.stage2.w_i2tce": 0, "train.weight_decay": 0})
        before = _hashes(model.image_encoder)

        result = run_stage2(model, tiny_dataset, text_cache, stage_config_from(cfg, "stage2"))

        assert result.steps > 0
        assert _hashes(model.image_encoder) == before

    def test_needs_cache(self, model, tiny_config, tiny_dataset):
        """Test that stage 2 without a text cache is a contract error."""
        with pytest.raises(ContractError):
            run_stage2(model, tiny_dataset, None, stage_config_from(tiny_config, "stage2"))


class TestComparisonProcedures:
    """Test cases for the baseline and one-stage procedures."""

    def test_baseline_logs_no_text_loss(self, model, tiny_config, tiny_dataset):
        """Test that the baseline uses only identity and triplet losses."""
        json_logger = JsonLinesLogger()
        bank_before = model.token_bank.embeddings.detach().clone()

        result = run_baseline(model, tiny_dataset, stage_config_from(tiny_config, "baseline"), json_logger)

        assert result.text_cache is None
        assert json_logger.values("id") and json_logger.values("tri")
        assert not json_logger.values("i2tce")
        assert torch.equal(model.token_bank.embeddings, bank_before)

    def test_baseline_matches_stage2_without_text_loss(self, tiny_config, tiny_dataset):
        """Test that the baseline's loss trace equals stage 2 with w_i2tce=0 from the same weights."""
        cfg = tiny_config.with_overrides({"train.stage2.w_i2tce": 0})
        config = stage_config_from(cfg, "stage2")
        stage2_model = build_model(cfg, tiny_dataset)
        baseline_model = build_model(cfg, tiny_dataset)
        text_cache = TextFeatureCache(features=compute_text_features(stage2_model))

        torch.manual_seed(0)
        stage2 = run_stage2(stage2_model, tiny_dataset, text_cache, config)
        torch.manual_seed(0)
        baseline = run_baseline(baseline_model, tiny_dataset, config)

        assert stage2.steps == baseline.steps > 0
        assert baseline.losses == pytest.approx(stage2.losses, rel=1e-6)

    def test_one_stage_trains_bank(self, model, tiny_config, tiny_dataset):
        """Test that joint training moves the bank and leaves the text encoder frozen."""
        text_before = model.text_hashes(include_bank=False)
        bank_before = model.token_bank.embeddings.detach().clone()

        result = run_one_stage(model, tiny_dataset, stage_config_from(tiny_config, "one_stage"))

        assert model.text_hashes(include_bank=False) == text_before
        assert not torch.equal(model.token_bank.embeddings, bank_before)
        assert result.text_cache.num_ids == 4


class TestGuards:
    """Test cases for non-finite losses and freeze audits."""

    def test_non_finite_loss(self):
        """Test that a NaN loss stops training with the step number."""
        param = torch.nn.Parameter(torch.zeros(1))
        optimizer = torch.optim.SGD([param], lr=0.1)
        scheduler = build_scheduler(optimizer, OptimSchedule(base_lr=0.1, total_epochs=1), 1)

        with pytest.raises(TrainingError, match="step 7"):
            _apply_step(optimizer, scheduler, param.sum() * float("nan"), 7, "stage2")

    def test_audit_reports_changes(self):
        """Test that a changed frozen hash raises."""
        with pytest.raises(FreezeViolationError, match="blocks.0.weight"):
            _audit({"blocks.0.weight": "a"}, {"blocks.0.weight": "b"}, "stage1", "encoder parameters")

    def test_same_seed_same_losses(self, tiny_config, tiny_dataset):
        """Test that two runs from the same seed give identical loss traces."""
        traces = []
        for _ in range(2):
            torch.manual_seed(0)
            model = build_model(tiny_config, tiny_dataset)
            result = run_baseline(model, tiny_dataset, stage_config_from(tiny_config, "baseline"))
            traces.append(result.losses)

        assert traces[0] == traces[1]

"""Tests for the data module."""

import json
from collections import Counter

import pytest
import torch
from torch.utils.data import DataLoader

from src.data import (
    AugmentationConfig,
    PKBatchSampler,
    ReIDImageDataset,
    SyntheticSpec,
    augment,
    camera_profile,
    generate_synthetic,
    image_name,
    load_dataset,
    pk_sample,
    sample_identities,
    split_test_views,
)
from src.errors import ConfigError, DatasetIOError
from src.text_prompting import tokenize


class TestSyntheticSpec:
    """Test cases for generator settings."""

    def test_needs_two_cameras(self):
        """Test that a single camera cannot give cross-camera pairs."""
        with pytest.raises(ConfigError):
            SyntheticSpec(n_cameras=1)

    def test_identity_space_limit(self):
        """Test that more identities than attribute combinations is rejected."""
        with pytest.raises(ConfigError):
            SyntheticSpec(n_train_ids=150, n_test_ids=150)

    def test_unknown_kind(self):
        """Test that the kind must have a prompt suffix."""
        with pytest.raises(ConfigError):
            SyntheticSpec(kind="animal")

    def test_scaled_to_zero(self):
        """Test that scaling by zero removes every nuisance."""
        spec = SyntheticSpec().scaled(0.0)

        assert spec.noise == 0 and spec.blur == 0 and spec.jitter == 0
        assert spec.n_train_ids == 20


class TestIdentities:
    """Test cases for identity and camera sampling."""

    def test_identities_are_distinct(self):
        """Test that every identity has a different attribute tuple."""
        identities = sample_identities(40, seed=0)

        assert len({i.caption for i in identities}) == 40

    def test_identities_reproducible(self):
        """Test that the seed fixes the identities."""
        assert sample_identities(5, seed=2) == sample_identities(5, seed=2)

    def test_camera_profile_scales_with_spec(self):
        """Test that a nuisance-free spec gives a neutral camera."""
        profile = camera_profile(1, SyntheticSpec().scaled(0.0))

        assert profile.brightness == 1.0
        assert profile.blur_radius == 0.0
        assert profile.color_shift == (0.0, 0.0, 0.0)

    def test_image_name(self):
        """Test the PID_CAMID_SEQ file naming."""
        assert image_name(12, 3, 7) == "0012_03_0007.png"


class TestSplitTestViews:
    """Test cases for the query/gallery split of one identity."""

    def test_one_query_per_camera(self):
        """Test that each camera with two views contributes its first view."""
        views = [(0, 0), (1, 1), (0, 2), (1, 3)]

        query, gallery = split_test_views(views)

        assert query == [0, 1]
        assert gallery == [2, 3]

    def test_fallback_query(self):
        """Test that single-view cameras fall back to the first view as query."""
        query, gallery = split_test_views([(0, 0), (1, 1), (2, 2)])

        assert query == [0]
        assert gallery == [1, 2]


class TestGenerateSynthetic:
    """Test cases for dataset generation and loading."""

    def test_layout(self, tiny_dataset_dir):
        """Test that the directory holds the manifest files and split folders."""
        for name in ("manifest.jsonl", "captions.jsonl", "vocab.txt", "meta.json", "train", "query", "gallery"):
            assert (tiny_dataset_dir / name).exists()
        meta = json.loads((tiny_dataset_dir / "meta.json").read_text())
        assert meta["format"] == "synthreid-v1"
        assert meta["num_train_ids"] == 4

    def test_counts(self, tiny_dataset):
        """Test the number of images per split."""
        assert len(tiny_dataset.train) == 24
        assert len(tiny_dataset.query) + len(tiny_dataset.gallery) == 24
        assert tiny_dataset.num_train_ids == 4
        assert tiny_dataset.num_cameras == 2

    def test_train_and_test_ids_disjoint(self, tiny_dataset):
        """Test that no identity appears in both train and test."""
        train_ids = {r.pid for r in tiny_dataset.train}
        test_ids = {r.pid for r in tiny_dataset.query + tiny_dataset.gallery}

        assert train_ids == {0, 1, 2, 3}
        assert not train_ids & test_ids

    def test_every_query_has_cross_camera_match(self, tiny_dataset):
        """Test that each query has a gallery image of its id under another camera."""
        for q in tiny_dataset.query:
            assert any(g.pid == q.pid and g.camid != q.camid for g in tiny_dataset.gallery)

    def test_every_train_id_spans_two_cameras(self, tiny_dataset):
        """Test that each train identity is seen by at least two cameras."""
        cameras = {}
        for r in tiny_dataset.train:
            cameras.setdefault(r.pid, set()).add(r.camid)

        assert all(len(c) >= 2 for c in cameras.values())

    def test_captions_tokenize(self, tiny_dataset):
        """Test that every caption fits the vocabulary."""
        assert len(tiny_dataset.captions) == len(tiny_dataset.train)
        for pair in tiny_dataset.captions:
            tokenize(pair.caption, tiny_dataset.vocab, context_length=16)

    def test_images_load_as_tensors(self, tiny_dataset):
        """Test that images decode to 3×H×W floats in [0, 1]."""
        image = tiny_dataset.load_image(tiny_dataset.train[0])

        assert image.shape == (3, 16, 16)
        assert 0.0 <= image.min() and image.max() <= 1.0

    def test_deterministic_across_workers(self, tmp_path, make_spec):
        """Test that the same seed gives identical bytes with one or two workers."""
        spec = make_spec(n_train_ids=2, n_test_ids=2, images_per_id=4)
        a = generate_synthetic(spec, tmp_path / "a", workers=1)
        generate_synthetic(spec, tmp_path / "b", workers=2)

        for record in a.records:
            assert (tmp_path / "a" / record.path).read_bytes() == (tmp_path / "b" / record.path).read_bytes()
        assert (tmp_path / "a" / "manifest.jsonl").read_text() == (tmp_path / "b" / "manifest.jsonl").read_text()

    def test_existing_dataset_not_overwritten(self, tiny_dataset_dir, make_spec):
        """Test that generating into an existing dataset fails."""
        with pytest.raises(DatasetIOError):
            generate_synthetic(make_spec(), tiny_dataset_dir)

    def test_missing_parent(self, tmp_path, make_spec):
        """Test that a missing parent directory is an IO error."""
        with pytest.raises(DatasetIOError):
            generate_synthetic(make_spec(), tmp_path / "missing" / "data")

    def test_load_missing_files(self, tmp_path):
        """Test that loading an empty directory fails."""
        with pytest.raises(DatasetIOError):
            load_dataset(tmp_path)

    def test_missing_image_file(self, tiny_dataset):
        """Test that a manifest entry without a file is an IO error."""
        record = tiny_dataset.train[0]
        ghost = type(record)(path="train/ghost.png", pid=record.pid, camid=record.camid, split="train")

        with pytest.raises(DatasetIOError):
            tiny_dataset.load_image(ghost)


class TestPKSampler:
    """Test cases for the P×K batch sampler."""

    def test_batches_are_p_by_k(self):
        """Test that each batch holds P distinct ids with K images each."""
        labels = [i // 5 for i in range(30)]

        for batch in pk_sample(labels, p=3, k=4, seed=0):
            counts = Counter(labels[i] for i in batch)
            assert len(counts) == 3
            assert set(counts.values()) == {4}

    def test_every_id_each_epoch(self):
        """Test that an epoch visits every identity."""
        labels = [i // 3 for i in range(21)]

        seen = {labels[i] for batch in pk_sample(labels, p=2, k=2, seed=1) for i in batch}

        assert seen == set(range(7))

    def test_replacement_for_small_ids(self):
        """Test that ids with fewer than K images are sampled with replacement."""
        labels = [0, 1, 1, 1, 1]

        for batch in pk_sample(labels, p=2, k=3, seed=0):
            assert Counter(labels[i] for i in batch) == {0: 3, 1: 3}

    def test_seed_and_epoch(self):
        """Test that the schedule depends only on seed and epoch."""
        labels = [i // 4 for i in range(40)]

        assert pk_sample(labels, 2, 2, seed=5, epoch=1) == pk_sample(labels, 2, 2, seed=5, epoch=1)
        assert pk_sample(labels, 2, 2, seed=5, epoch=1) != pk_sample(labels, 2, 2, seed=5, epoch=2)

    def test_too_few_ids(self):
        """Test that P larger than the id count is rejected."""
        with pytest.raises(ConfigError):
            PKBatchSampler([0, 0, 1], p=3, k=1)

    def test_length(self):
        """Test the number of batches per epoch."""
        sampler = PKBatchSampler([i // 4 for i in range(40)], p=2, k=2)

        assert len(sampler) == 10
        assert len(list(sampler)) == 10


class TestAugment:
    """Test cases for training augmentation."""

    def test_disabled_is_identity(self):
        """Test that disabled augmentation returns the image unchanged."""
        image = torch.rand(3, 8, 8)

        out = augment(image, AugmentationConfig.disabled(), torch.Generator().manual_seed(0))

        assert torch.equal(out, image)

    def test_shape_preserved(self):
        """Test that pad-and-crop keeps the input size."""
        out = augment(torch.rand(3, 16, 12), AugmentationConfig(), torch.Generator().manual_seed(0))

        assert out.shape == (3, 16, 12)

    def test_flip(self):
        """Test that flip probability 1 mirrors the image."""
        image = torch.rand(3, 4, 4)
        config = AugmentationConfig(flip_prob=1.0, pad=0, erase_prob=0.0)

        out = augment(image, config, torch.Generator().manual_seed(0))

        assert torch.equal(out, image.flip(-1))

    def test_erase_area_in_range(self):
        """Test that erasing fills one rectangle within the configured area range."""
        config = AugmentationConfig(flip_prob=0.0, pad=0, erase_prob=1.0, erase_area=(0.1, 0.3))
        generator = torch.Generator().manual_seed(4)
        for _ in range(20):
            out = augment(torch.ones(3, 20, 20), config, generator, fill=(0.5, 0.5, 0.5))
            erased = int((out[0] == 0.5).sum())
            assert 0.1 * 400 <= erased <= 0.3 * 400

    def test_invalid_area(self):
        """Test that an empty erase range is rejected."""
        with pytest.raises(ConfigError):
            AugmentationConfig(erase_area=(0.5, 0.2))

    def test_image_dataset_items(self, tiny_dataset):
        """Test that items are (image, pid, camid) and augmentation is reproducible."""
        records = tiny_dataset.train[:3]
        a = ReIDImageDataset(tiny_dataset, records, AugmentationConfig(), seed=9)
        b = ReIDImageDataset(tiny_dataset, records, AugmentationConfig(), seed=9)

        image, pid, camid = a[1]

        assert (pid, camid) == (records[1].pid, records[1].camid)
        assert torch.equal(image, b[1][0])


class TestAugmentationStreams:
    """Test cases for per-epoch and per-worker augmentation draws."""

    @pytest.fixture
    def repeated(self, tiny_dataset):
        return ReIDImageDataset(tiny_dataset, [tiny_dataset.train[0]] * 8, AugmentationConfig(), seed=0)

    def test_epochs_differ_with_workers(self, repeated):
        """Test that a worker-backed loader draws new augmentations each epoch."""
        loader = DataLoader(repeated, batch_size=8, num_workers=1)
        first = next(iter(loader))[0]
        repeated.set_epoch(1)
        second = next(iter(loader))[0]

        assert not torch.equal(first, second)

    def test_epoch_replays_with_workers(self, repeated):
        """Test that the same epoch gives the same draws in a fresh worker."""
        loader = DataLoader(repeated, batch_size=8, num_workers=1)
        first = next(iter(loader))[0]

        assert torch.equal(first, next(iter(loader))[0])

    def test_items_differ_within_epoch(self, repeated):
        """Test that one image repeated in a batch is not augmented identically."""
        batch = next(iter(DataLoader(repeated, batch_size=8, num_workers=1)))[0]

        assert any(not torch.equal(batch[0], other) for other in batch[1:])

    def test_epochs_differ_in_process(self, repeated):
        """Test that in-process loading also moves to a new stream per epoch."""
        first = torch.stack([repeated[i][0] for i in range(8)])
        repeated.set_epoch(1)
        second = torch.stack([repeated[i][0] for i in range(8)])

        assert not torch.equal(first, second)

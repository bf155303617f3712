"""Shared pytest fixtures for clipreid-desk tests."""

import sys
from pathlib import Path

import pytest

# Add project root to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

# Small enough that a full stage0 → stage1 → stage2 chain runs in seconds.
TINY_OVERRIDES = [
    "model.image_size=16,16",
    "model.patch=8",
    "model.stride=8",
    "model.depth=1",
    "model.width=16",
    "model.heads=2",
    "model.mlp_ratio=2",
    "model.cnn_channels=8,8,8,8",
    "model.proj_dim=8",
    "text.context_length=16",
    "text.width=16",
    "text.depth=1",
    "text.heads=2",
    "prompt.m=2",
    "train.stage0.epochs=2",
    "train.stage0.lr=0.001",
    "train.stage0.batch_size=4",
    "train.stage0.warmup_epochs=0",
    "train.stage1.epochs=2",
    "train.stage1.lr=0.01",
    "train.stage1.batch_size=8",
    "train.stage1.warmup_epochs=0",
    "train.stage2.epochs=2",
    "train.stage2.lr=0.001",
    "train.stage2.warmup_epochs=0",
    "train.stage2.milestones=1",
    "train.stage2.p=2",
    "train.stage2.k=2",
    "eval.batch_size=32",
]


def tiny_spec(**changes):
    from src.data import SyntheticSpec

    settings = {
        "n_train_ids": 4,
        "n_test_ids": 4,
        "images_per_id": 6,
        "n_cameras": 2,
        "image_size": (16, 16),
        "seed": 3,
    }
    settings.update(changes)
    return SyntheticSpec(**settings)


@pytest.fixture
def tiny_config():
    """Resolved config for the tiny model."""
    from config import resolve_config

    return resolve_config(None, TINY_OVERRIDES)


@pytest.fixture
def tiny_config_file(tmp_path):
    """The tiny overrides written as a key=value config file."""
    path = tmp_path / "tiny.env"
    path.write_text("\n".join(TINY_OVERRIDES) + "\n")
    return path


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    """A generated 4+4 identity, 2 camera dataset shared by the whole session."""
    from src.data import generate_synthetic

    root = tmp_path_factory.mktemp("data") / "tiny"
    generate_synthetic(tiny_spec(), root)
    return root


@pytest.fixture
def tiny_dataset(tiny_dataset_dir):
    """A freshly loaded view of the shared dataset."""
    from src.data import load_dataset

    return load_dataset(tiny_dataset_dir)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    """Redirect run directories into the test's tmp_path."""
    import config

    root = tmp_path / "runs"
    monkeypatch.setattr(config, "OUTPUT_ROOT", root)
    return root


@pytest.fixture
def make_spec():
    """Factory for tiny generator settings with optional changes."""
    return tiny_spec

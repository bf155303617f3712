"""Tests for config.py."""

import pytest

import config
from config import (
    DEFAULTS,
    ExperimentConfig,
    coerce_value,
    load_config_file,
    parse_overrides,
    resolve_config,
)
from src.errors import ConfigError


class TestCoercion:
    """Test cases for typing raw key=value strings."""

    @pytest.mark.parametrize("key,raw,expected", [
        ("seed", "7", 7),
        ("model.temperature", "10", 10.0),
        ("sie.enabled", "yes", True),
        ("sie.enabled", "OFF", False),
        ("model.image_size", "16, 24", (16, 24)),
        ("train.stage2.milestones", "", ()),
        ("train.stage2.w_id", "auto", "auto"),
        ("train.stage2.w_id", "0.5", 0.5),
        ("eval.mode", " post ", "post"),
    ])
    def test_types_follow_defaults(self, key, raw, expected):
        """Test that each value takes the type of its default."""
        assert coerce_value(key, raw) == expected

    def test_bad_boolean(self):
        """Test that a non-boolean word is rejected."""
        with pytest.raises(ConfigError, match="sie.enabled"):
            coerce_value("sie.enabled", "maybe")

    def test_bad_number(self):
        """Test that a non-numeric value is rejected."""
        with pytest.raises(ConfigError):
            coerce_value("model.depth", "two")

    def test_unknown_key(self):
        """Test that typos are reported rather than ignored."""
        with pytest.raises(ConfigError, match="Unknown config key"):
            coerce_value("model.dpeth", "2")

    def test_m_alias(self):
        """Test that M is shorthand for prompt.m."""
        assert parse_overrides(["M=8"]) == {"prompt.m": 8}

    def test_override_needs_equals(self):
        """Test that an override without '=' is rejected."""
        with pytest.raises(ConfigError):
            parse_overrides(["seed"])


class TestResolveConfig:
    """Test cases for merging defaults, files and overrides."""

    def test_defaults(self):
        """Test that nothing given yields the defaults."""
        cfg = resolve_config()

        assert cfg.values == DEFAULTS
        assert cfg.seed == 0

    def test_file_then_overrides(self, tmp_path):
        """Test that overrides win over the config file."""
        path = tmp_path / "exp.env"
        path.write_text("# experiment\nseed=4\nM=6\n")

        cfg = resolve_config(path, ["seed=9"])

        assert cfg.seed == 9
        assert cfg["prompt.m"] == 6

    def test_missing_file(self, tmp_path):
        """Test that a missing config file is an error."""
        with pytest.raises(ConfigError):
            load_config_file(tmp_path / "absent.env")

    def test_deterministic_from_environment(self, monkeypatch):
        """Test that REID_DETERMINISTIC forces deterministic runs."""
        monkeypatch.setattr(config, "DETERMINISTIC", True)

        assert resolve_config()["deterministic"] is True

    def test_unknown_lookup(self):
        """Test that reading an unknown key raises."""
        with pytest.raises(ConfigError):
            resolve_config()["nope"]


class TestValidation:
    """Test cases for cross-key checks."""

    def test_stride_must_tile(self):
        """Test that a stride leaving a remainder is rejected."""
        with pytest.raises(ConfigError, match="does not tile"):
            resolve_config(None, ["model.stride=5"])

    def test_overlapping_stride_accepted(self):
        """Test that stride 6 tiles a 32 pixel side with patch 8."""
        assert resolve_config(None, ["model.stride=6"])["model.stride"] == 6

    def test_sie_requires_vit(self):
        """Test that side information needs the transformer backbone."""
        with pytest.raises(ConfigError):
            resolve_config(None, ["model.variant=cnn", "sie.enabled=true"])

    def test_heads_divide_width(self):
        """Test that the head count must divide the width."""
        with pytest.raises(ConfigError):
            resolve_config(None, ["model.heads=5"])

    def test_warmup_start_above_lr(self):
        """Test that warmup cannot start above the base learning rate."""
        with pytest.raises(ConfigError):
            resolve_config(None, ["train.stage1.warmup_start_lr=1"])

    def test_milestones_increasing(self):
        """Test that milestones must be strictly increasing."""
        with pytest.raises(ConfigError):
            resolve_config(None, ["train.stage2.milestones=20,10"])

    def test_negative_weight(self):
        """Test that loss weights cannot be negative."""
        with pytest.raises(ConfigError):
            resolve_config(None, ["train.stage2.w_i2tce=-1"])


class TestExperimentConfig:
    """Test cases for copies, echoes and hashes."""

    def test_with_overrides_is_a_copy(self):
        """Test that overriding leaves the original untouched."""
        cfg = resolve_config()

        changed = cfg.with_overrides({"M": 0})

        assert changed["prompt.m"] == 0
        assert cfg["prompt.m"] == 4

    def test_string_echo_round_trip(self):
        """Test that the echoed strings rebuild an equal config with the same hash."""
        cfg = resolve_config(None, ["model.image_size=16,16", "sie.enabled=true", "train.stage2.w_id=0.5"])

        restored = ExperimentConfig.from_strings(cfg.as_strings())

        assert restored.values == cfg.values
        assert restored.config_hash() == cfg.config_hash()

    def test_hash_changes_with_values(self):
        """Test that a different seed gives a different hash."""
        assert resolve_config().config_hash() != resolve_config(None, ["seed=1"]).config_hash()

    def test_write(self, tmp_path):
        """Test that the resolved file is sorted key=value lines readable as a config file."""
        cfg = resolve_config(None, ["seed=5"])
        path = tmp_path / "config.resolved"

        cfg.write(path)

        lines = path.read_text().splitlines()
        assert lines == sorted(lines)
        assert resolve_config(path).values == cfg.values

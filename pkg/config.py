import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

from dotenv import dotenv_values, load_dotenv

from src.errors import ConfigError

load_dotenv()

BASE_DIR = Path(__file__).parent
OUTPUT_ROOT = Path(os.getenv("REID_OUTPUT_ROOT", str(BASE_DIR / "runs")))

LOG_LEVEL = os.getenv("REID_LOG_LEVEL", "INFO")
DETERMINISTIC = os.getenv("REID_DETERMINISTIC", "false").lower() == "true"

# Accepted keys and their defaults. The default's type drives coercion of
# values read from config files and --set overrides.
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "deterministic": False,
    "data.root": "",
    "data.workers": 0,
    # image encoder
    "model.variant": "vit",
    "model.image_size": (32, 32),
    "model.patch": 8,
    "model.stride": 8,
    "model.depth": 2,
    "model.width": 64,
    "model.heads": 4,
    "model.mlp_ratio": 4,
    "model.cnn_channels": (16, 32, 64, 64),
    "model.proj_dim": 32,
    "model.dropout": 0.0,
    "model.temperature": 1.0 / 0.07,
    # text encoder and prompt
    "text.context_length": 77,
    "text.width": 64,
    "text.depth": 2,
    "text.heads": 4,
    "prompt.m": 4,
    "prompt.prefix": "a photo of a",
    "prompt.init_std": 0.02,
    # side information embedding
    "sie.enabled": False,
    "sie.lambda": 1.0,
    "sie.apply_to": "cls_only",
    # stage 0: toy contrastive pretraining
    "train.stage0.epochs": 20,
    "train.stage0.lr": 1e-3,
    "train.stage0.batch_size": 32,
    "train.stage0.warmup_epochs": 2,
    "train.stage0.warmup_start_lr": 1e-5,
    "train.stage0.decay": "cosine",
    "train.stage0.milestones": (10, 15),
    "train.stage0.gamma": 0.1,
    # stage 1: prompt fitting
    "train.stage1.epochs": 30,
    "train.stage1.lr": 3.5e-4,
    "train.stage1.batch_size": 64,
    "train.stage1.warmup_epochs": 5,
    "train.stage1.warmup_start_lr": 3.5e-6,
    "train.stage1.decay": "cosine",
    "train.stage1.milestones": (15, 25),
    "train.stage1.gamma": 0.1,
    # stage 2: image encoder fine-tuning
    "train.stage2.epochs": 30,
    "train.stage2.lr": 3.5e-4,
    "train.stage2.warmup_epochs": 5,
    "train.stage2.warmup_start_lr": 3.5e-6,
    "train.stage2.decay": "milestones",
    "train.stage2.milestones": (15, 25),
    "train.stage2.gamma": 0.1,
    "train.stage2.p": 8,
    "train.stage2.k": 4,
    "train.stage2.w_id": "auto",
    "train.stage2.w_tri": 1.0,
    "train.stage2.w_i2tce": 1.0,
    "train.stage2.w_i2t": 0.0,
    "train.stage2.w_t2i": 0.0,
    "train.stage2.margin": 0.3,
    "train.stage2.label_smoothing": 0.1,
    "train.stage2.pre_layer_triplet": True,
    "train.stage2.train_visual_projection": True,
    "train.stage2.train_text_projection": False,
    "train.weight_decay": 0.0,
    # augmentation
    "aug.flip": 0.5,
    "aug.pad": 2,
    "aug.erase": 0.5,
    "aug.erase_min": 0.02,
    "aug.erase_max": 0.4,
    # evaluation
    "eval.mode": "img+post",
    "eval.metric": "cosine",
    "eval.batch_size": 128,
}

# Keys whose value may be the literal "auto" instead of a number.
AUTO_KEYS = {"train.stage2.w_id"}

# Short names accepted in config files and --set overrides.
KEY_ALIASES = {"M": "prompt.m"}

TRUE_VALUES = {"true", "1", "yes", "on"}
FALSE_VALUES = {"false", "0", "no", "off"}


@dataclass
class ExperimentConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    def __getitem__(self, key: str) -> object:
        if key not in self.values:
            raise ConfigError(f"Unknown config key: {key}")
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    def with_overrides(self, overrides: dict[str, str | object]) -> "ExperimentConfig":
        """Return a copy with overrides coerced and applied."""
        values = dict(self.values)
        for key, raw in overrides.items():
            values[canonical_key(key)] = coerce_value(key, raw)
        validate_config(values)
        return ExperimentConfig(values=values)

    def to_lines(self) -> list[str]:
        return [f"{key}={format_value(self.values[key])}" for key in sorted(self.values)]

    def config_hash(self) -> str:
        return hashlib.sha256("\n".join(self.to_lines()).encode()).hexdigest()

    def as_strings(self) -> dict[str, str]:
        return {key: format_value(value) for key, value in sorted(self.values.items())}

    @classmethod
    def from_strings(cls, values: dict[str, str]) -> "ExperimentConfig":
        """Rebuild a config echoed into a checkpoint or run manifest."""
        merged = dict(DEFAULTS)
        merged.update({key: coerce_value(key, raw) for key, raw in values.items()})
        validate_config(merged)
        return cls(values=merged)

    def write(self, path: Path) -> None:
        path.write_text("\n".join(self.to_lines()) + "\n")


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def canonical_key(key: str) -> str:
    key = key.strip()
    return KEY_ALIASES.get(key, key)


def coerce_value(key: str, raw: object) -> object:
    """Coerce a raw value to the type of the key's default."""
    key = canonical_key(key)
    if key not in DEFAULTS:
        raise ConfigError(f"Unknown config key: {key}")
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()

    try:
        if key in AUTO_KEYS:
            return "auto" if text.lower() == "auto" else float(text)
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered in TRUE_VALUES:
                return True
            if lowered in FALSE_VALUES:
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            if not text:
                return ()
            element = type(default[0]) if default else float
            return tuple(element(part.strip()) for part in text.split(","))
    except ValueError as e:
        raise ConfigError(f"Invalid value for {key}: {e}") from e
    return text


def load_config_file(path: Path) -> dict[str, object]:
    """Read a flat key=value config file (same syntax as .env files)."""
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    raw = dotenv_values(path)
    return {canonical_key(key): coerce_value(key, value or "") for key, value in raw.items()}


def parse_overrides(pairs: list[str]) -> dict[str, object]:
    """Parse CLI overrides of the form key=value."""
    overrides = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"Override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[canonical_key(key)] = coerce_value(key, value)
    return overrides


def resolve_config(
    config_file: Path | None = None,
    overrides: list[str] | None = None,
) -> ExperimentConfig:
    """Merge defaults, an optional config file and CLI overrides."""
    values = dict(DEFAULTS)
    if config_file is not None:
        values.update(load_config_file(config_file))
    values.update(parse_overrides(overrides or []))
    if DETERMINISTIC:
        values["deterministic"] = True
    validate_config(values)
    return ExperimentConfig(values=values)


def validate_config(values: dict[str, object]) -> None:
    unknown = set(values) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(sorted(unknown))}")

    if values["model.variant"] not in ("vit", "cnn"):
        raise ConfigError(f"model.variant must be vit or cnn, got {values['model.variant']}")
    if values["sie.apply_to"] not in ("cls_only", "all_tokens"):
        raise ConfigError(f"sie.apply_to must be cls_only or all_tokens, got {values['sie.apply_to']}")
    if values["eval.metric"] not in ("cosine", "euclidean"):
        raise ConfigError(f"eval.metric must be cosine or euclidean, got {values['eval.metric']}")
    if values["model.width"] % values["model.heads"] != 0:
        raise ConfigError("model.heads must divide model.width")
    if values["text.width"] % values["text.heads"] != 0:
        raise ConfigError("text.heads must divide text.width")
    if values["prompt.m"] < 0:
        raise ConfigError("prompt.m must be non-negative")
    if values["model.variant"] == "vit":
        patch, stride = values["model.patch"], values["model.stride"]
        if patch <= 0 or stride <= 0:
            raise ConfigError("model.patch and model.stride must be positive")
        if any((side - patch) % stride for side in values["model.image_size"]):
            raise ConfigError(
                f"model.stride={stride} with model.patch={patch} does not tile {values['model.image_size']}"
            )
    if values["sie.enabled"] and values["model.variant"] != "vit":
        raise ConfigError("sie.enabled requires model.variant=vit")

    for stage in ("stage0", "stage1", "stage2"):
        prefix = f"train.{stage}"
        if values[f"{prefix}.warmup_start_lr"] > values[f"{prefix}.lr"]:
            raise ConfigError(f"{prefix}.warmup_start_lr must not exceed {prefix}.lr")
        if values[f"{prefix}.decay"] not in ("cosine", "milestones"):
            raise ConfigError(f"{prefix}.decay must be cosine or milestones")
        milestones = values[f"{prefix}.milestones"]
        if any(b <= a for a, b in zip(milestones, milestones[1:], strict=False)):
            raise ConfigError(f"{prefix}.milestones must be strictly increasing")

    for name in ("w_tri", "w_i2tce", "w_i2t", "w_t2i"):
        if values[f"train.stage2.{name}"] < 0:
            raise ConfigError(f"train.stage2.{name} must be non-negative")
    w_id = values["train.stage2.w_id"]
    if w_id != "auto" and w_id < 0:
        raise ConfigError("train.stage2.w_id must be non-negative")

"""Checkpoint directories: a torch archive of named arrays plus a JSON manifest."""

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from src.errors import DatasetIOError, handle_io_errors

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "clipreid-ckpt-v1"
ARRAYS_FILE = "arrays.pt"
MANIFEST_FILE = "manifest.json"


class CheckpointError(DatasetIOError):
    """Raised when a checkpoint is missing, malformed or does not fit the model."""
    pass


@dataclass
class Checkpoint:
    arrays: dict[str, torch.Tensor]
    manifest: dict
    optimizer_state: dict | None = None
    path: Path | None = field(default=None, compare=False)

    @property
    def stage(self) -> str:
        return self.manifest["stage"]

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        """Arrays under ``prefix.`` with the prefix stripped."""
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.arrays.items() if k.startswith(prefix + ".")}


def tensor_hash(tensor: torch.Tensor) -> str:
    data = tensor.detach().cpu().contiguous()
    digest = hashlib.sha256(str(tuple(data.shape)).encode())
    digest.update(data.numpy().tobytes())
    return digest.hexdigest()


def parameter_hashes(module: nn.Module) -> dict[str, str]:
    """SHA-256 of every named parameter."""
    return {name: tensor_hash(p) for name, p in module.named_parameters()}


def changed_parameters(before: dict[str, str], after: dict[str, str]) -> list[str]:
    return sorted(name for name in before if after.get(name) != before[name])


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@handle_io_errors
def save_checkpoint(
    directory: Path,
    arrays: dict[str, torch.Tensor],
    stage: str,
    step: int,
    seed: int,
    config: dict[str, str] | None = None,
    optimizer_state: dict | None = None,
) -> Path:
    """
    Write ``arrays.pt`` and ``manifest.json`` into ``directory``.

    The manifest records every array's shape so that loading can validate the
    archive without a model at hand.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().clone() for name, t in sorted(arrays.items())}
    torch.save({"arrays": arrays, "optimizer": optimizer_state}, directory / ARRAYS_FILE)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "stage": stage,
        "step": step,
        "seed": seed,
        "config": config or {},
        "shapes": {name: list(t.shape) for name, t in arrays.items()},
    }
    _atomic_write_text(directory / MANIFEST_FILE, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info(f"Saved {stage} checkpoint ({len(arrays)} arrays) to {directory}")
    return directory


@handle_io_errors
def load_checkpoint(directory: Path) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_FILE
    arrays_path = directory / ARRAYS_FILE
    if not manifest_path.exists() or not arrays_path.exists():
        raise CheckpointError(f"No checkpoint at {directory}")

    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unsupported checkpoint format {manifest.get('format')!r}")
    payload = torch.load(arrays_path, map_location="cpu", weights_only=True)
    arrays = payload["arrays"]

    expected = manifest["shapes"]
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise CheckpointError(f"Archive and manifest disagree on arrays: {', '.join(missing[:5])}")
    for name, shape in expected.items():
        if list(arrays[name].shape) != shape:
            raise CheckpointError(
                f"Array {name} has shape {list(arrays[name].shape)}, manifest says {shape}"
            )
    return Checkpoint(arrays=arrays, manifest=manifest, optimizer_state=payload.get("optimizer"),
                      path=directory)


def load_pretrained(module: nn.Module, arrays: dict[str, torch.Tensor]) -> list[str]:
    """
    Copy matching arrays into ``module``; shape-mismatched ones keep their init.

    Changing the patch stride or the camera count changes the positional
    embedding and SIE table shapes; those arrays are skipped.

    Returns:
        Names that were skipped because of a shape mismatch.
    """
    state = module.state_dict()
    skipped = []
    compatible = {}
    for name, value in arrays.items():
        if name not in state:
            continue
        if state[name].shape != value.shape:
            skipped.append(name)
            logger.warning(
                f"Re-initializing {name}: checkpoint shape {tuple(value.shape)} "
                f"!= model shape {tuple(state[name].shape)}"
            )
            continue
        compatible[name] = value
    missing = sorted(set(state) - set(compatible) - set(skipped))
    if missing:
        logger.info(f"{len(missing)} arrays not in checkpoint keep their initialization")
    module.load_state_dict(compatible, strict=False)
    return skipped


def load_strict(module: nn.Module, arrays: dict[str, torch.Tensor]) -> None:
    """Load every array of ``module``; any mismatch is a CheckpointError."""
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    if missing:
        raise CheckpointError(f"Checkpoint lacks arrays: {', '.join(missing[:5])}")
    for name, value in state.items():
        if arrays[name].shape != value.shape:
            raise CheckpointError(
                f"Array {name} has shape {tuple(arrays[name].shape)}, model expects {tuple(value.shape)}"
            )
    module.load_state_dict({name: arrays[name] for name in state})

"""Synthetic multi-camera ReID benchmark, on-disk dataset format, P×K sampler and augmentation.

Dataset directory layout (format tag ``synthreid-v1``)::

    root/
      train/ query/ gallery/     PID_CAMID_SEQ.png, 8-bit RGB
      manifest.jsonl             {"camid", "path", "pid", "split"} per image
      captions.jsonl             {"caption", "path"} per train image
      vocab.txt                  one token per line, line number = id
      meta.json                  format tag, kind, counts, pixel mean, generator settings
"""

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image, ImageDraw, ImageFilter
from torch.utils.data import Dataset, Sampler, get_worker_info

from src.errors import ConfigError, DatasetIOError, handle_io_errors
from src.text_prompting import SUFFIX_BY_KIND, Vocabulary, split_words

logger = logging.getLogger(__name__)

FORMAT_TAG = "synthreid-v1"
SPLITS = ("train", "query", "gallery")

SHAPES = ("circle", "square", "triangle", "diamond")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "orange": (0.95, 0.55, 0.10),
    "yellow": (0.90, 0.85, 0.15),
    "green": (0.20, 0.70, 0.25),
    "cyan": (0.15, 0.75, 0.80),
    "blue": (0.15, 0.30, 0.85),
    "purple": (0.55, 0.20, 0.75),
    "pink": (0.95, 0.50, 0.70),
}
SIZES = {"small": 0.28, "large": 0.42}  # half-extent as a fraction of the short side
TEXTURES = ("plain", "striped", "dotted")
BACKGROUND = 0.45
TEXTURE_DARKEN = 0.55


@dataclass(frozen=True)
class SyntheticSpec:
    n_train_ids: int = 20
    n_test_ids: int = 20
    images_per_id: int = 30
    n_cameras: int = 4
    image_size: tuple[int, int] = (32, 32)
    seed: int = 0
    kind: str = "person"
    color_shift: float = 0.2
    brightness: float = 0.3
    blur: float = 1.0
    jitter: float = 3.0
    noise: float = 0.05

    def __post_init__(self):
        if self.n_train_ids < 1 or self.n_test_ids < 1:
            raise ConfigError("Need at least one train and one test identity")
        if self.n_cameras < 2:
            raise ConfigError("Every identity must appear under at least two cameras")
        if self.images_per_id < 2:
            raise ConfigError("images_per_id must be at least 2 to span two cameras")
        if self.n_train_ids + self.n_test_ids > len(identity_space()):
            raise ConfigError(f"At most {len(identity_space())} distinct identities can be rendered")
        if self.kind not in SUFFIX_BY_KIND:
            raise ConfigError(f"Unknown dataset kind {self.kind!r}")
        if min(self.color_shift, self.brightness, self.blur, self.jitter, self.noise) < 0:
            raise ConfigError("Nuisance strengths must be non-negative")

    def scaled(self, factor: float) -> "SyntheticSpec":
        """Copy with every nuisance strength multiplied by ``factor``."""
        return SyntheticSpec(**{
            **asdict(self),
            "color_shift": self.color_shift * factor,
            "brightness": self.brightness * factor,
            "blur": self.blur * factor,
            "jitter": self.jitter * factor,
            "noise": self.noise * factor,
        })


@dataclass(frozen=True)
class Identity:
    shape: str
    color: str
    size: str
    texture: str
    phase: float

    @property
    def caption(self) -> str:
        return f"a {self.color} {self.size} {self.texture} {self.shape}"


@dataclass(frozen=True)
class CameraProfile:
    color_shift: tuple[float, float, float]
    brightness: float
    blur_radius: float


@dataclass(frozen=True)
class ReIDRecord:
    path: str
    pid: int
    camid: int
    split: str


@dataclass(frozen=True)
class CaptionPair:
    path: str
    caption: str


def identity_space() -> list[tuple[str, str, str, str]]:
    return list(itertools.product(SHAPES, COLORS, SIZES, TEXTURES))


def caption_words() -> list[str]:
    return ["a", *SHAPES, *COLORS, *SIZES, *TEXTURES]


def sample_identities(count: int, seed: int) -> list[Identity]:
    rng = np.random.default_rng([seed, 0])
    space = identity_space()
    order = rng.permutation(len(space))[:count]
    return [Identity(*space[i], phase=float(rng.uniform())) for i in order]


def camera_profile(camid: int, spec: SyntheticSpec) -> CameraProfile:
    rng = np.random.default_rng([spec.seed, 1, camid])
    shift = rng.uniform(-1.0, 1.0, 3) * spec.color_shift
    return CameraProfile(
        color_shift=tuple(float(s) for s in shift),
        brightness=1.0 + spec.brightness * float(rng.uniform(-1.0, 1.0)),
        blur_radius=spec.blur * float(rng.uniform(0.0, 1.0)),
    )


def _shape_mask(identity: Identity, height: int, width: int, offset: tuple[float, float]) -> np.ndarray:
    r = SIZES[identity.size] * min(height, width)
    cx, cy = width / 2 + offset[0], height / 2 + offset[1]
    mask = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(mask)
    if identity.shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif identity.shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=255)
    elif identity.shape == "triangle":
        draw.polygon([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], fill=255)
    else:
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=255)
    return np.asarray(mask, dtype=np.float64) / 255.0


def _texture(identity: Identity, height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    if identity.texture == "striped":
        period = 6
        dark = ((xx + yy + identity.phase * period) // (period / 2)) % 2 == 1
    elif identity.texture == "dotted":
        period = 5
        shift = identity.phase * period
        dark = ((xx + shift) % period < period / 2) & ((yy + shift) % period < period / 2)
    else:
        return np.ones((height, width))
    return np.where(dark, TEXTURE_DARKEN, 1.0)


def render_image(identity: Identity, camera: CameraProfile, spec: SyntheticSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Render one H×W×3 uint8 view of ``identity`` as seen by ``camera``."""
    height, width = spec.image_size
    offset = tuple(rng.uniform(-spec.jitter, spec.jitter, 2)) if spec.jitter > 0 else (0.0, 0.0)
    mask = _shape_mask(identity, height, width, offset)[..., None]
    foreground = np.asarray(COLORS[identity.color]) * _texture(identity, height, width)[..., None]
    image = BACKGROUND * (1.0 - mask) + foreground * mask
    image = np.clip(image * camera.brightness + np.asarray(camera.color_shift), 0.0, 1.0)

    if camera.blur_radius > 0:
        pil = Image.fromarray(np.round(image * 255).astype(np.uint8))
        pil = pil.filter(ImageFilter.GaussianBlur(radius=camera.blur_radius))
        image = np.asarray(pil, dtype=np.float64) / 255.0
    if spec.noise > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise, image.shape), 0.0, 1.0)
    return np.round(image * 255).astype(np.uint8)


def image_name(pid: int, camid: int, seq: int) -> str:
    return f"{pid:04d}_{camid:02d}_{seq:04d}.png"


def split_test_views(views: list[tuple[int, int]]) -> tuple[list[int], list[int]]:
    """
    Split one test identity's (camid, seq) views into query and gallery indices.

    The first view of every camera holding at least two views becomes a
    query; if no camera qualifies, the very first view does. Everything else
    is gallery, so each query keeps a cross-camera positive.
    """
    by_camera: dict[int, list[int]] = {}
    for i, (camid, _) in enumerate(views):
        by_camera.setdefault(camid, []).append(i)
    query = [indices[0] for indices in by_camera.values() if len(indices) >= 2]
    if not query:
        query = [0]
    query = sorted(query)
    gallery = [i for i in range(len(views)) if i not in query]
    return query, gallery


def _plan_records(spec: SyntheticSpec) -> list[ReIDRecord]:
    records = []
    views = [(j % spec.n_cameras, j) for j in range(spec.images_per_id)]
    for pid in range(spec.n_train_ids):
        for camid, seq in views:
            records.append(ReIDRecord(f"train/{image_name(pid, camid, seq)}", pid, camid, "train"))
    for pid in range(spec.n_train_ids, spec.n_train_ids + spec.n_test_ids):
        query, _ = split_test_views(views)
        for i, (camid, seq) in enumerate(views):
            split = "query" if i in query else "gallery"
            records.append(ReIDRecord(f"{split}/{image_name(pid, camid, seq)}", pid, camid, split))
    return records


@handle_io_errors
def generate_synthetic(spec: SyntheticSpec, out_dir: Path, workers: int = 1) -> "ReIDDataset":
    """
    Render the benchmark into ``out_dir`` and return it loaded.

    Every image uses its own RNG stream derived from (seed, index), so the
    output is identical for any number of workers.
    """
    out_dir = Path(out_dir)
    if (out_dir / "manifest.jsonl").exists():
        raise DatasetIOError(f"A dataset already exists at {out_dir}")
    out_dir.mkdir(exist_ok=True)
    for split in SPLITS:
        (out_dir / split).mkdir(exist_ok=True)

    identities = sample_identities(spec.n_train_ids + spec.n_test_ids, spec.seed)
    cameras = [camera_profile(c, spec) for c in range(spec.n_cameras)]
    records = _plan_records(spec)

    def render(job: tuple[int, ReIDRecord]) -> np.ndarray:
        index, record = job
        rng = np.random.default_rng([spec.seed, 2, index])
        pixels = render_image(identities[record.pid], cameras[record.camid], spec, rng)
        Image.fromarray(pixels).save(out_dir / record.path)
        return pixels

    jobs = list(enumerate(records))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(render, jobs))
    else:
        images = [render(job) for job in jobs]

    train_pixels = np.stack([img for img, r in zip(images, records, strict=True) if r.split == "train"])
    pixel_mean = [round(float(m), 6) for m in train_pixels.reshape(-1, 3).mean(axis=0) / 255.0]

    captions = [
        CaptionPair(r.path, identities[r.pid].caption) for r in records if r.split == "train"
    ]
    template_words = split_words("a photo of a") + split_words(SUFFIX_BY_KIND[spec.kind])
    vocab = Vocabulary.from_words(caption_words() + template_words)
    meta = {
        "format": FORMAT_TAG,
        "kind": spec.kind,
        "num_train_ids": spec.n_train_ids,
        "num_test_ids": spec.n_test_ids,
        "num_cameras": spec.n_cameras,
        "image_size": list(spec.image_size),
        "pixel_mean": pixel_mean,
        "generator": asdict(spec),
    }

    _write_jsonl(out_dir / "manifest.jsonl", [asdict(r) for r in records])
    _write_jsonl(out_dir / "captions.jsonl", [asdict(c) for c in captions])
    vocab.save(out_dir / "vocab.txt")
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    logger.info(f"Generated {len(records)} images ({spec.n_train_ids}+{spec.n_test_ids} ids, "
                f"{spec.n_cameras} cameras) in {out_dir}")
    return load_dataset(out_dir)


def _write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(row, sort_keys=True) + "\n" for row in rows))


def _read_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


@dataclass
class ReIDDataset:
    root: Path
    records: list[ReIDRecord]
    captions: list[CaptionPair]
    vocab: Vocabulary
    meta: dict
    _images: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def split(self, name: str) -> list[ReIDRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def train(self) -> list[ReIDRecord]:
        return self.split("train")

    @property
    def query(self) -> list[ReIDRecord]:
        return self.split("query")

    @property
    def gallery(self) -> list[ReIDRecord]:
        return self.split("gallery")

    @property
    def num_train_ids(self) -> int:
        return int(self.meta["num_train_ids"])

    @property
    def num_cameras(self) -> int:
        return int(self.meta["num_cameras"])

    @property
    def kind(self) -> str:
        return self.meta.get("kind", "person")

    @property
    def pixel_mean(self) -> tuple[float, float, float]:
        return tuple(self.meta["pixel_mean"])

    def caption_of(self, record: ReIDRecord) -> str:
        for pair in self.captions:
            if pair.path == record.path:
                return pair.caption
        raise DatasetIOError(f"No caption for {record.path}")

    @handle_io_errors
    def load_image(self, record: ReIDRecord) -> torch.Tensor:
        """C×H×W float tensor in [0, 1]; decoded once and cached."""
        if record.path not in self._images:
            path = self.root / record.path
            if not path.exists():
                raise DatasetIOError(f"Missing image file {path}")
            with Image.open(path) as img:
                self._images[record.path] = TF.to_tensor(img.convert("RGB"))
        return self._images[record.path]

    def load_images(self, records: list[ReIDRecord]) -> torch.Tensor:
        return torch.stack([self.load_image(r) for r in records])


@handle_io_errors
def load_dataset(root: Path) -> ReIDDataset:
    root = Path(root)
    for name in ("manifest.jsonl", "meta.json", "vocab.txt"):
        if not (root / name).exists():
            raise DatasetIOError(f"Dataset at {root} is missing {name}")
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("format") != FORMAT_TAG:
        raise DatasetIOError(f"Unsupported dataset format {meta.get('format')!r} at {root}")
    records = [ReIDRecord(**row) for row in _read_jsonl(root / "manifest.jsonl")]
    captions_path = root / "captions.jsonl"
    captions = [CaptionPair(**row) for row in _read_jsonl(captions_path)] if captions_path.exists() else []
    return ReIDDataset(
        root=root,
        records=records,
        captions=captions,
        vocab=Vocabulary.load(root / "vocab.txt"),
        meta=meta,
    )


class PKBatchSampler(Sampler):
    """
    Yields batches of P distinct identities × K images each.

    An epoch has max(ceil(N/P), num_images // (P*K)) batches and walks a
    shuffled identity queue, so every identity appears at least once. Ids
    with fewer than K images are sampled with replacement.
    """

    def __init__(self, labels: list[int], p: int, k: int, seed: int = 0):
        if p < 1 or k < 1:
            raise ConfigError(f"P and K must be positive, got P={p}, K={k}")
        self.index_by_id: dict[int, list[int]] = {}
        for index, label in enumerate(labels):
            self.index_by_id.setdefault(int(label), []).append(index)
        self.ids = sorted(self.index_by_id)
        if len(self.ids) < p:
            raise ConfigError(f"P={p} identities per batch but the dataset has {len(self.ids)}")
        self.p = p
        self.k = k
        self.seed = seed
        self.epoch = 0
        self.num_images = len(labels)

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return max(math.ceil(len(self.ids) / self.p), self.num_images // (self.p * self.k))

    def __iter__(self):
        rng = np.random.default_rng([self.seed, self.epoch])
        queue: list[int] = []
        for _ in range(len(self)):
            chosen: list[int] = []
            deferred: list[int] = []
            while len(chosen) < self.p:
                if not queue:
                    queue = [self.ids[i] for i in rng.permutation(len(self.ids))]
                candidate = queue.pop(0)
                if candidate in chosen:
                    deferred.append(candidate)
                else:
                    chosen.append(candidate)
            queue = deferred + queue

            batch = []
            for pid in chosen:
                pool = self.index_by_id[pid]
                picks = rng.choice(pool, size=self.k, replace=len(pool) < self.k)
                batch.extend(int(i) for i in picks)
            yield batch


def pk_sample(labels: list[int], p: int, k: int, seed: int, epoch: int = 0) -> list[list[int]]:
    """One epoch of P×K batches as index lists."""
    sampler = PKBatchSampler(labels, p, k, seed)
    sampler.set_epoch(epoch)
    return list(sampler)


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    pad: int = 2
    crop_size: tuple[int, int] | None = None
    erase_prob: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_ratio: tuple[float, float] = (0.3, 3.3)
    erase_attempts: int = 10

    def __post_init__(self):
        if not (0 <= self.flip_prob <= 1 and 0 <= self.erase_prob <= 1):
            raise ConfigError("Augmentation probabilities must lie in [0, 1]")
        if self.pad < 0:
            raise ConfigError("pad must be non-negative")
        low, high = self.erase_area
        if not 0 < low <= high < 1:
            raise ConfigError(f"Erase area range must satisfy 0 < min <= max < 1, got {self.erase_area}")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(flip_prob=0.0, pad=0, erase_prob=0.0)


def _uniform(generator: torch.Generator, low: float, high: float) -> float:
    return low + (high - low) * float(torch.rand(1, generator=generator))


def _randint(generator: torch.Generator, high: int) -> int:
    """Integer in [0, high]."""
    return int(torch.randint(0, high + 1, (1,), generator=generator))


def augment(image: torch.Tensor, config: AugmentationConfig, generator: torch.Generator,
            fill: tuple[float, ...] | None = None) -> torch.Tensor:
    """Random flip, zero pad, random crop back to size, then random erasing with ``fill``."""
    _, height, width = image.shape
    crop_h, crop_w = config.crop_size or (height, width)
    if crop_h > height + 2 * config.pad or crop_w > width + 2 * config.pad:
        raise ConfigError(f"Crop {crop_h}x{crop_w} exceeds padded size")

    if float(torch.rand(1, generator=generator)) < config.flip_prob:
        image = TF.hflip(image)
    if config.pad:
        image = TF.pad(image, [config.pad] * 4, fill=0.0)
    top = _randint(generator, image.shape[1] - crop_h)
    left = _randint(generator, image.shape[2] - crop_w)
    image = TF.crop(image, top, left, crop_h, crop_w)

    if float(torch.rand(1, generator=generator)) < config.erase_prob:
        image = _erase_once(image, config, generator, fill)
    return image


def _erase_once(image: torch.Tensor, config: AugmentationConfig, generator: torch.Generator,
                fill: tuple[float, ...] | None) -> torch.Tensor:
    channels, height, width = image.shape
    area = height * width
    min_area, max_area = config.erase_area[0] * area, config.erase_area[1] * area
    value = torch.tensor(fill if fill is not None else [0.0] * channels, dtype=image.dtype).view(-1, 1, 1)
    log_low, log_high = math.log(config.erase_ratio[0]), math.log(config.erase_ratio[1])

    for _ in range(config.erase_attempts):
        target = _uniform(generator, min_area, max_area)
        ratio = math.exp(_uniform(generator, log_low, log_high))
        h = int(round(math.sqrt(target * ratio)))
        w = int(round(math.sqrt(target / ratio)))
        if 0 < h < height and 0 < w < width and min_area <= h * w <= max_area:
            top, left = _randint(generator, height - h), _randint(generator, width - w)
            return TF.erase(image, top, left, h, w, value)

    side = min(math.ceil(math.sqrt(min_area)), height, width)
    top, left = _randint(generator, height - side), _randint(generator, width - side)
    return TF.erase(image, top, left, side, side, value)


class ReIDImageDataset(Dataset):
    """
    Map-style view over one split.

    Augmentation draws come from a generator derived from (seed, epoch, worker id),
    so every epoch and every loader worker gets its own stream. Call ``set_epoch``
    alongside the sampler's before iterating a new epoch.
    """

    def __init__(self, dataset: ReIDDataset, records: list[ReIDRecord],
                 augmentation: AugmentationConfig | None = None, seed: int = 0):
        self.dataset = dataset
        self.records = records
        self.augmentation = augmentation
        self.seed = seed
        self.epoch = 0
        self._stream: tuple[int, int] | None = None
        self._generator: torch.Generator | None = None

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def generator(self) -> torch.Generator:
        info = get_worker_info()
        stream = (self.epoch, info.id if info is not None else -1)
        if stream != self._stream or self._generator is None:
            rng = np.random.default_rng([self.seed, 3, self.epoch, stream[1] + 1])
            self._generator = torch.Generator().manual_seed(int(rng.integers(2**62)))
            self._stream = stream
        return self._generator

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, int, int]:
        record = self.records[index]
        image = self.dataset.load_image(record)
        if self.augmentation is not None:
            image = augment(image, self.augmentation, self.generator(), self.dataset.pixel_mean)
        return image, record.pid, record.camid

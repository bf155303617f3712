"""Inference features, query/gallery ranking, CMC and mAP, and embedding/ranking dumps."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from src.data import ReIDDataset, ReIDRecord
from src.encoders import FeatureBundle
from src.errors import ConfigError, ContractError, NumericalError, handle_io_errors

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_MODE = "img+post"
DEFAULT_RANKS = (1, 5, 10)
METRICS = ("cosine", "euclidean")

# Concatenation order of each inference feature mode.
FEATURE_MODES = {
    "post": ("post_img_feature",),
    "pre": ("pre_img_feature",),
    "img": ("img_feature",),
    "img+post": ("img_feature", "post_img_feature"),
    "img+pre": ("img_feature", "pre_img_feature"),
    "pre+img+post": ("pre_img_feature", "img_feature", "post_img_feature"),
}


def select_features(bundle: FeatureBundle, mode: str = DEFAULT_MODE) -> torch.Tensor:
    if mode not in FEATURE_MODES:
        raise ConfigError(f"Unknown feature mode {mode!r}; expected one of {', '.join(FEATURE_MODES)}")
    return torch.cat([getattr(bundle, name) for name in FEATURE_MODES[mode]], dim=-1)


@torch.no_grad()
def extract_inference_feature(image: torch.Tensor, model, mode: str = DEFAULT_MODE,
                              camid: int | None = None) -> torch.Tensor:
    """Feature vector of one C×H×W image in eval mode."""
    model.eval()
    camera = torch.tensor([camid]) if camid is not None else None
    return select_features(model.encode_image(image.unsqueeze(0), camera), mode)[0]


@dataclass
class GalleryIndex:
    features: np.ndarray
    pids: np.ndarray
    camids: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.pids = np.asarray(self.pids)
        self.camids = np.asarray(self.camids)
        if self.features.ndim != 2:
            raise ContractError(f"Features must be 2-D, got shape {self.features.shape}")
        n = self.features.shape[0]
        if len(self.pids) != n or len(self.camids) != n or (self.paths and len(self.paths) != n):
            raise ContractError("Features, pids, camids and paths must have equal length")
        if not np.isfinite(self.features).all():
            raise NumericalError("Non-finite features in index")

    def __len__(self) -> int:
        return self.features.shape[0]


@torch.no_grad()
def extract_features(model, dataset: ReIDDataset, records: list[ReIDRecord],
                     mode: str = DEFAULT_MODE, batch_size: int = 128) -> GalleryIndex:
    model.eval()
    chunks = []
    for begin in range(0, len(records), batch_size):
        chunk = records[begin:begin + batch_size]
        images = dataset.load_images(chunk)
        camids = torch.tensor([r.camid for r in chunk], dtype=torch.long)
        chunks.append(select_features(model.encode_image(images, camids), mode))
    features = torch.cat(chunks) if chunks else torch.zeros(0, 0)
    return GalleryIndex(
        features=features.double().numpy(),
        pids=np.array([r.pid for r in records]),
        camids=np.array([r.camid for r in records]),
        paths=[r.path for r in records],
    )


def distance_matrix(queries: np.ndarray, gallery: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Q×G distances: 1 - cosine similarity (default) or euclidean."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    if queries.shape[1] != gallery.shape[1]:
        raise ContractError(f"Feature dims differ: {queries.shape[1]} vs {gallery.shape[1]}")
    if metric == "cosine":
        q_norm = np.linalg.norm(queries, axis=1, keepdims=True)
        g_norm = np.linalg.norm(gallery, axis=1, keepdims=True)
        if (q_norm == 0).any() or (g_norm == 0).any():
            raise NumericalError("Zero-norm feature cannot be compared by cosine distance")
        return 1.0 - (queries / q_norm) @ (gallery / g_norm).T
    if metric == "euclidean":
        squared = (
            (queries ** 2).sum(axis=1, keepdims=True)
            + (gallery ** 2).sum(axis=1)[None, :]
            - 2.0 * queries @ gallery.T
        )
        return np.sqrt(np.clip(squared, 0.0, None))
    raise ConfigError(f"Unknown metric {metric!r}; expected cosine or euclidean")


@dataclass
class RankingResult:
    """Per query: gallery indices by distance with same-pid-same-camera entries removed."""
    order: list[np.ndarray]
    matches: list[np.ndarray]
    distances: list[np.ndarray]

    def __len__(self) -> int:
        return len(self.order)


def rank_gallery(distmat: np.ndarray, q_pids, q_camids, g_pids, g_camids) -> RankingResult:
    """Stable ascending sort, so equal distances keep gallery index order."""
    q_pids, q_camids = np.asarray(q_pids), np.asarray(q_camids)
    g_pids, g_camids = np.asarray(g_pids), np.asarray(g_camids)
    if distmat.shape != (len(q_pids), len(g_pids)):
        raise ContractError(f"Distance matrix {distmat.shape} does not match {len(q_pids)}×{len(g_pids)}")

    orders, matches, distances = [], [], []
    for q in range(len(q_pids)):
        order = np.argsort(distmat[q], kind="stable")
        keep = ~((g_pids[order] == q_pids[q]) & (g_camids[order] == q_camids[q]))
        order = order[keep]
        orders.append(order)
        matches.append(g_pids[order] == q_pids[q])
        distances.append(distmat[q, order])
    return RankingResult(order=orders, matches=matches, distances=distances)


@dataclass
class MetricsReport:
    mean_ap: float
    cmc: dict[int, float]
    per_query_ap: list[float | None]
    num_queries: int
    num_invalid: int = 0
    mode: str = DEFAULT_MODE
    metric: str = "cosine"
    checkpoint: str = ""
    config: dict[str, str] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def rank(self, k: int) -> float:
        return self.cmc[k]

    def to_dict(self) -> dict:
        data = asdict(self)
        data["mAP"] = data.pop("mean_ap")
        data["cmc"] = {str(k): v for k, v in self.cmc.items()}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        data = dict(data)
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ContractError(f"Unsupported metrics schema {data.get('schema_version')!r}")
        data["mean_ap"] = data.pop("mAP")
        data["cmc"] = {int(k): float(v) for k, v in data["cmc"].items()}
        return cls(**data)

    @handle_io_errors
    def write(self, path: Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    @handle_io_errors
    def load(cls, path: Path) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def format_table(self) -> str:
        ranks = sorted(self.cmc)
        header = " | ".join(["mAP", *(f"R{k}" for k in ranks)])
        values = " | ".join(f"{100 * v:5.1f}" for v in [self.mean_ap, *(self.cmc[k] for k in ranks)])
        return f"{header}\n{values}"


def average_precision(matches: np.ndarray) -> float:
    """Mean of precision@k over the ranks k holding a correct match."""
    hits = np.flatnonzero(matches)
    return float(np.mean((np.arange(len(hits)) + 1) / (hits + 1)))


def compute_metrics(distmat: np.ndarray, q_pids, q_camids, g_pids, g_camids,
                    ranks: tuple[int, ...] = DEFAULT_RANKS) -> MetricsReport:
    """
    CMC@k and mAP under the cross-camera protocol.

    Queries left without any valid match are excluded from the averages and
    counted in ``num_invalid``.
    """
    ranking = rank_gallery(distmat, q_pids, q_camids, g_pids, g_camids)
    per_query: list[float | None] = []
    hits_at = {k: 0 for k in ranks}
    for matches in ranking.matches:
        if not matches.any():
            per_query.append(None)
            continue
        per_query.append(average_precision(matches))
        for k in ranks:
            hits_at[k] += bool(matches[:k].any())

    valid = [ap for ap in per_query if ap is not None]
    num_invalid = len(per_query) - len(valid)
    if not valid:
        raise ContractError("No query has a valid gallery match")
    if num_invalid:
        logger.warning(f"{num_invalid} queries have no valid gallery match and are excluded")
    return MetricsReport(
        mean_ap=float(np.mean(valid)),
        cmc={k: hits_at[k] / len(valid) for k in ranks},
        per_query_ap=per_query,
        num_queries=len(per_query),
        num_invalid=num_invalid,
    )


def evaluate(queries: GalleryIndex, gallery: GalleryIndex, metric: str = "cosine",
             ranks: tuple[int, ...] = DEFAULT_RANKS) -> MetricsReport:
    distmat = distance_matrix(queries.features, gallery.features, metric)
    report = compute_metrics(distmat, queries.pids, queries.camids, gallery.pids, gallery.camids, ranks)
    report.metric = metric
    logger.info(f"mAP {report.mean_ap:.4f}, " + ", ".join(f"R{k} {v:.4f}" for k, v in report.cmc.items()))
    return report


def _format_float(value: float) -> str:
    return repr(float(value))


@handle_io_errors
def dump_embeddings(index: GalleryIndex, text_features: torch.Tensor | None, out_path: Path) -> Path:
    """
    CSV of image rows from ``index`` followed by one text row per identity.

    Columns: path, pid, camid, kind (image or text), then one column per
    feature dimension. Text rows have an empty path and camid -1.
    """
    dim = index.features.shape[1]
    if text_features is not None and text_features.shape[1] != dim:
        raise ContractError(
            f"Image features have {dim} dims but text features have {text_features.shape[1]}; "
            f"use the post feature mode to dump both in the joint space"
        )
    out_path = Path(out_path)
    with out_path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "pid", "camid", "kind", *(f"f{i}" for i in range(dim))])
        for i in range(len(index)):
            path = index.paths[i] if index.paths else ""
            writer.writerow([path, int(index.pids[i]), int(index.camids[i]), "image",
                             *map(_format_float, index.features[i])])
        if text_features is not None:
            for pid, row in enumerate(text_features.double().numpy()):
                writer.writerow(["", pid, -1, "text", *map(_format_float, row)])
    logger.info(f"Wrote embeddings to {out_path}")
    return out_path


@handle_io_errors
def dump_rankings(queries: GalleryIndex, gallery: GalleryIndex, top_k: int, out_path: Path,
                  metric: str = "cosine") -> Path:
    """JSON lines: query path and the top_k valid gallery paths with match flags."""
    if top_k < 1:
        raise ConfigError("top_k must be positive")
    distmat = distance_matrix(queries.features, gallery.features, metric)
    ranking = rank_gallery(distmat, queries.pids, queries.camids, gallery.pids, gallery.camids)
    out_path = Path(out_path)
    with out_path.open("w") as f:
        for q in range(len(queries)):
            order = ranking.order[q][:top_k]
            row = {
                "query": queries.paths[q] if queries.paths else str(q),
                "pid": int(queries.pids[q]),
                "camid": int(queries.camids[q]),
                "gallery": [gallery.paths[g] if gallery.paths else str(g) for g in order],
                "gallery_pids": [int(gallery.pids[g]) for g in order],
                "matches": [bool(m) for m in ranking.matches[q][:top_k]],
            }
            f.write(json.dumps(row, sort_keys=True) + "\n")
    logger.info(f"Wrote rankings for {len(queries)} queries to {out_path}")
    return out_path

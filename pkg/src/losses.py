"""Contrastive, identity, triplet and image-to-text losses for both training stages.

All batch losses reduce by mean. Similarity matrices have rows = images and
columns = text anchors.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from src.encoders import similarity_matrix
from src.errors import ConfigError, ContractError

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 0.1
DEFAULT_MARGIN = 0.3


@dataclass(frozen=True)
class LossWeights:
    id: float = 1.0
    triplet: float = 1.0
    i2tce: float = 1.0

    def __post_init__(self):
        if min(self.id, self.triplet, self.i2tce) < 0:
            raise ConfigError(f"Loss weights must be non-negative, got {self}")

    @classmethod
    def for_variant(cls, variant: str) -> "LossWeights":
        """0.25/1/1 for the transformer backbone, 1/1/1 for the CNN."""
        return cls(id=0.25) if variant == "vit" else cls()


def _require_square(similarities: torch.Tensor) -> None:
    if similarities.dim() != 2 or similarities.shape[0] != similarities.shape[1]:
        raise ContractError(f"Expected a square similarity matrix, got {tuple(similarities.shape)}")


def loss_i2t(similarities: torch.Tensor) -> torch.Tensor:
    """Image-to-text contrastive loss; the diagonal holds matched pairs."""
    _require_square(similarities)
    return -F.log_softmax(similarities, dim=1).diagonal().mean()


def loss_t2i(similarities: torch.Tensor) -> torch.Tensor:
    """Text-to-image contrastive loss (softmax over each column)."""
    _require_square(similarities)
    return -F.log_softmax(similarities, dim=0).diagonal().mean()


def loss_t2i_multipos(
    similarities: torch.Tensor,
    labels: torch.Tensor,
    anchor_labels: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Text-to-image loss where a text anchor has every same-identity image as a positive.

    For each distinct identity y in the batch, with P(y) the images labelled y:
        -(1/|P|) Σ_{p∈P} log( Σ_{p∈P} exp(S[p, y]) / Σ_a exp(S[a, y]) )
    The outer average is over a p-independent summand and is kept as written.
    Results are averaged over the distinct identities.

    Args:
        similarities: (B, C) image-vs-anchor similarities
        labels: (B,) identity of each image row
        anchor_labels: (C,) identity of each column; defaults to ``labels``
    """
    labels = torch.as_tensor(labels, device=similarities.device).reshape(-1)
    anchor_labels = labels if anchor_labels is None else torch.as_tensor(
        anchor_labels, device=similarities.device).reshape(-1)
    if similarities.dim() != 2 or similarities.shape != (labels.numel(), anchor_labels.numel()):
        raise ContractError(
            f"Similarities {tuple(similarities.shape)} do not match "
            f"{labels.numel()} labels × {anchor_labels.numel()} anchors"
        )

    log_probs = F.log_softmax(similarities, dim=0)
    per_id = []
    for identity in torch.unique(labels):
        positives = labels == identity
        columns = (anchor_labels == identity).nonzero()
        if columns.numel() == 0:
            raise ContractError(f"No text anchor for identity {int(identity)}")
        column = log_probs[:, columns[0, 0]]
        term = -torch.logsumexp(column[positives], dim=0)
        count = int(positives.sum())
        per_id.append(torch.stack([term] * count).sum() / count)
    if not per_id:
        raise ContractError("Empty batch")
    return torch.stack(per_id).mean()


def smoothed_targets(labels: torch.Tensor, num_classes: int, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """q_k = (1 - ε) δ_{k,y} + ε / N, one row per label."""
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"Label smoothing epsilon must lie in [0, 1), got {epsilon}")
    labels = torch.as_tensor(labels).reshape(-1)
    one_hot = F.one_hot(labels, num_classes).to(torch.get_default_dtype())
    return (1.0 - epsilon) * one_hot + epsilon / num_classes


def _smoothed_cross_entropy(scores: torch.Tensor, labels: torch.Tensor, epsilon: float) -> torch.Tensor:
    squeeze = scores.dim() == 1
    scores = scores.unsqueeze(0) if squeeze else scores
    labels = torch.as_tensor(labels, device=scores.device).reshape(-1)
    if labels.numel() != scores.shape[0]:
        raise ContractError(f"{labels.numel()} labels for {scores.shape[0]} score rows")
    targets = smoothed_targets(labels, scores.shape[1], epsilon).to(scores)
    return (-targets * F.log_softmax(scores, dim=1)).sum(dim=1).mean()


def loss_id(scores: torch.Tensor, labels: torch.Tensor, epsilon: float = DEFAULT_EPSILON) -> torch.Tensor:
    """Label-smoothed identity cross-entropy on pre-softmax scores (N or B × N)."""
    if scores.shape[-1] < 2:
        raise ContractError("Identity loss needs at least two classes")
    return _smoothed_cross_entropy(scores, labels, epsilon)


def loss_i2tce(
    similarity_rows: torch.Tensor,
    labels: torch.Tensor,
    num_ids: int,
    epsilon: float = DEFAULT_EPSILON,
) -> torch.Tensor:
    """Image-to-text cross-entropy over all N cached identity text features."""
    if similarity_rows.shape[-1] != num_ids:
        raise ContractError(
            f"Similarity rows have {similarity_rows.shape[-1]} entries, expected N={num_ids}"
        )
    return _smoothed_cross_entropy(similarity_rows, labels, epsilon)


def euclidean_dist(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Pairwise euclidean distance; squared distances are clamped before sqrt."""
    xx = x.pow(2).sum(dim=1, keepdim=True)
    yy = y.pow(2).sum(dim=1, keepdim=True).t()
    dist = xx + yy - 2.0 * x @ y.t()
    return dist.clamp(min=1e-12).sqrt()


def hard_example_mining(dist_mat: torch.Tensor, labels: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Hardest positive (max distance, self excluded) and hardest negative per anchor."""
    n = dist_mat.shape[0]
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    is_pos = same & ~torch.eye(n, dtype=torch.bool, device=dist_mat.device)
    is_neg = ~same
    if not is_pos.any(dim=1).all() or not is_neg.any(dim=1).all():
        raise ContractError("Every anchor needs at least one positive and one negative")
    dist_ap = dist_mat.masked_fill(~is_pos, float("-inf")).max(dim=1).values
    dist_an = dist_mat.masked_fill(~is_neg, float("inf")).min(dim=1).values
    return dist_ap, dist_an


def loss_triplet(features: torch.Tensor, labels: torch.Tensor, margin: float = DEFAULT_MARGIN) -> torch.Tensor:
    """Batch-hard triplet loss on unnormalized features."""
    labels = torch.as_tensor(labels, device=features.device).reshape(-1)
    dist_ap, dist_an = hard_example_mining(euclidean_dist(features, features), labels)
    return F.relu(dist_ap - dist_an + margin).mean()


def loss_stage1(
    image_features: torch.Tensor,
    text_features: torch.Tensor,
    labels: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """
    Prompt-fitting objective: loss_i2t + loss_t2i_multipos.

    ``text_features[i]`` is the prompt feature of ``labels[i]`` (rows repeat for
    repeated identities), so the similarity matrix is square with matched
    pairs on the diagonal.
    """
    similarities = similarity_matrix(image_features, text_features, temperature)
    return loss_i2t(similarities) + loss_t2i_multipos(similarities, labels)


def loss_stage2(
    id_term: torch.Tensor,
    tri_term: torch.Tensor,
    i2tce_term: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted sum w_id·L_id + w_tri·L_tri + w_i2tce·L_i2tce."""
    return weights.id * id_term + weights.triplet * tri_term + weights.i2tce * i2tce_term


def loss_t2ice_averaged(similarities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Text-to-image cross-entropy against per-identity mean image features.

    Args:
        similarities: (N, K) where column k holds s(V̄_a, T_{labels[k]}) for all N
            identities a, or an (N,) column for a single label
        labels: (K,) identity of each column
    """
    if similarities.dim() == 1:
        similarities = similarities.unsqueeze(1)
    labels = torch.as_tensor(labels, device=similarities.device).reshape(-1)
    if labels.numel() != similarities.shape[1]:
        raise ContractError(f"{labels.numel()} labels for {similarities.shape[1]} columns")
    if labels.numel() and labels.max() >= similarities.shape[0]:
        raise ContractError(
            f"Label {int(labels.max())} outside the {similarities.shape[0]} averaged features"
        )
    log_probs = F.log_softmax(similarities, dim=0)
    return -log_probs[labels, torch.arange(labels.numel(), device=labels.device)].mean()

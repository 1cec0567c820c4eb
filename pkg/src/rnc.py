"""Rank-n-Contrast loss over two label views: surrogate MOS and per-codec bitrate.

For anchor i and positive j, the denominator runs over every pool item ranked at least
as far from i as j is (by label distance), so the loss pulls embeddings into the order of
the labels. All distances are computed in float64 regardless of the model dtype.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from src.config import LossConfig
from src.corpus import CLEAN
from src.errors import ValidationError
from src.surrogate import SurrogateLabel, label_distance

logger = logging.getLogger(__name__)

VISQOL_VIEW = "visqol"


@dataclass
class TrainBatch:
    waveforms: np.ndarray
    labels: list[SurrogateLabel]
    # Manifest row indices, for diagnostics.
    indices: list[int]

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValidationError("a training batch needs at least 2 items")
        if len(self.waveforms) != len(self.labels):
            raise ValidationError("waveforms and labels differ in length")

    def __len__(self):
        return len(self.labels)


@dataclass(frozen=True)
class LabelView:
    """`visqol` ranks the whole batch by MOS; a codec view ranks clean + that codec by bitrate."""

    name: str

    @property
    def is_codec(self) -> bool:
        return self.name != VISQOL_VIEW

    def values(self, labels: Sequence[SurrogateLabel]) -> np.ndarray:
        if self.is_codec:
            return np.array([l.bitrate for l in labels], dtype=np.float64)
        return np.array([l.visqol_mos for l in labels], dtype=np.float64)

    def pool(self, labels: Sequence[SurrogateLabel], codec_pool: str = "clean_and_codec") -> np.ndarray:
        if not self.is_codec or codec_pool == "whole_batch":
            return np.ones(len(labels), dtype=bool)
        return np.array([l.codec in (CLEAN, self.name) for l in labels], dtype=bool)

    def anchors(self, labels: Sequence[SurrogateLabel]) -> np.ndarray:
        if not self.is_codec:
            return np.ones(len(labels), dtype=bool)
        return np.array([l.codec == self.name for l in labels], dtype=bool)


def candidate_set(i: int, j: int, labels: Sequence[SurrogateLabel], view: LabelView,
                  codec_pool: str = "clean_and_codec") -> set[int]:
    """Pool items k != i whose label distance to i is at least that of j."""
    if i == j:
        raise ValidationError("anchor and positive must differ")
    y = view.values(labels)
    pool = view.pool(labels, codec_pool)
    if not (pool[i] and pool[j]):
        raise ValidationError(f"items {i} and {j} must both lie in the {view.name} pool")
    ref = label_distance(y[i], y[j])
    return {k for k in range(len(labels)) if pool[k] and k != i and label_distance(y[i], y[k]) >= ref}


def as_tensor(embeddings) -> torch.Tensor:
    if isinstance(embeddings, torch.Tensor):
        return embeddings.double()
    return torch.as_tensor(np.stack([np.asarray(getattr(e, "vector", e)) for e in embeddings]), dtype=torch.float64)


def pairwise_distances(z: torch.Tensor) -> torch.Tensor:
    sq = (z[:, None, :] - z[None, :, :]).pow(2).sum(dim=-1)
    # clamp keeps the gradient finite at zero distance (diagonal, duplicate clips)
    return sq.clamp_min(1e-30).sqrt()


def label_distance_matrix(y: torch.Tensor) -> torch.Tensor:
    inf = torch.isinf(y)
    diff = (y[:, None] - y[None, :]).abs()
    return torch.where(inf[:, None] & inf[None, :], torch.zeros_like(diff), diff)


def view_losses(z: torch.Tensor, labels: Sequence[SurrogateLabel], view: LabelView,
                temperature: float = 1.0, sign: int = -1,
                codec_pool: str = "clean_and_codec") -> tuple[torch.Tensor, int]:
    """Per-anchor losses of one view (zero outside the view's anchors) and the degenerate count."""
    n = len(labels)
    pool = torch.as_tensor(view.pool(labels, codec_pool))
    anchors = torch.as_tensor(view.anchors(labels)) & pool
    y = torch.as_tensor(view.values(labels))

    logits = sign * pairwise_distances(z) / temperature        # [i, k]
    ld = label_distance_matrix(y)                               # [i, k]
    eye = torch.eye(n, dtype=torch.bool)

    # in_set[i, j, k]: k is a candidate for anchor i against positive j
    in_set = (ld[:, None, :] >= ld[:, :, None]) & pool[None, None, :] & ~eye[:, None, :]
    in_set = in_set | eye[None, :, :]  # j always in its own set; keeps invalid rows finite
    masked = logits[:, None, :].expand(n, n, n).masked_fill(~in_set, float("-inf"))
    log_terms = logits - torch.logsumexp(masked, dim=-1)       # [i, j]

    valid = pool[None, :] & pool[:, None] & ~eye
    pool_size = int(pool.sum())
    summed = torch.where(valid, log_terms, torch.zeros_like(log_terms)).sum(dim=1)

    degenerate = int(anchors.sum()) if pool_size < 2 else 0
    if pool_size < 2:
        return torch.zeros(n, dtype=torch.float64), degenerate
    losses = torch.where(anchors, -summed / (pool_size - 1), torch.zeros_like(summed))
    return losses, degenerate


def batch_views(labels: Sequence[SurrogateLabel], bitrate_term: bool = True) -> list[LabelView]:
    views = [LabelView(VISQOL_VIEW)]
    if bitrate_term:
        views += [LabelView(c) for c in sorted({l.codec for l in labels} - {CLEAN})]
    return views


def rnc_per_sample(i: int, labels: Sequence[SurrogateLabel], view: LabelView, embeddings,
                   temperature: float = 1.0, sign: int = -1,
                   codec_pool: str = "clean_and_codec") -> torch.Tensor:
    if view.is_codec and labels[i].codec != view.name:
        raise ValidationError(f"item {i} is not an anchor of the {view.name} view")
    losses, _ = view_losses(as_tensor(embeddings), labels, view, temperature, sign, codec_pool)
    return losses[i]


def rnc_batch_with_stats(labels: Sequence[SurrogateLabel], embeddings, temperature: float = 1.0,
                         sign: int = -1, bitrate_term: bool = True,
                         codec_pool: str = "clean_and_codec") -> tuple[torch.Tensor, int]:
    if len(labels) < 2:
        raise ValidationError("rnc_batch needs at least 2 items")
    z = as_tensor(embeddings)
    total = torch.zeros((), dtype=torch.float64)
    degenerate = 0
    for view in batch_views(labels, bitrate_term):
        losses, d = view_losses(z, labels, view, temperature, sign, codec_pool)
        total = total + losses.sum()
        degenerate += d
    return total / len(labels), degenerate


def rnc_batch(labels: Sequence[SurrogateLabel], embeddings, temperature: float = 1.0, sign: int = -1,
              bitrate_term: bool = True, codec_pool: str = "clean_and_codec") -> torch.Tensor:
    """ViSQOL-view losses of every item plus own-codec bitrate losses of coded items, over N."""
    loss, _ = rnc_batch_with_stats(labels, embeddings, temperature, sign, bitrate_term, codec_pool)
    return loss


class RankNContrastLoss(nn.Module):
    def __init__(self, cfg: Optional[LossConfig] = None):
        super().__init__()
        self.cfg = cfg or LossConfig()
        self.degenerate_anchors = 0

    def forward(self, embeddings: torch.Tensor, labels: Sequence[SurrogateLabel]) -> torch.Tensor:
        loss, degenerate = rnc_batch_with_stats(
            labels, embeddings, self.cfg.temperature, self.cfg.sign,
            self.cfg.bitrate_term, self.cfg.codec_pool,
        )
        if degenerate:
            self.degenerate_anchors += degenerate
            logger.warning("%d anchor(s) had a single-item pool and contributed 0", degenerate)
        return loss

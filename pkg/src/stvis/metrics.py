"""Clip-level evaluation metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .decoder import LayerPrediction
from .losses import GroundTruth, MatchAssignment


@dataclass
class ClipMetrics:
    ious: list[float]
    intra: list[float]
    inter: list[float]
    consistent: int
    tracked_frames: int


@dataclass
class MetricsReport:
    mean_iou: float
    intra_similarity: float
    inter_similarity: float
    track_consistency: float
    n_clips: int
    final_loss: float | None = None
    losses: list[float] = field(default_factory=list)

    @property
    def separation(self) -> float:
        return self.intra_similarity - self.inter_similarity

    def as_dict(self) -> dict:
        return {
            "mean_iou": self.mean_iou,
            "intra_similarity": self.intra_similarity,
            "inter_similarity": self.inter_similarity,
            "separation": self.separation,
            "track_consistency": self.track_consistency,
            "n_clips": self.n_clips,
            "final_loss": self.final_loss,
            "losses": self.losses,
        }


def mask_iou(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    union = np.logical_or(pred, target).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, target).sum() / union)


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def clip_metrics(pred: LayerPrediction, gt: GroundTruth, match: MatchAssignment) -> ClipMetrics:
    masks = pred.mask_logits.data > 0
    queries = pred.box_queries.data
    n_frames = masks.shape[0]
    ious, intra, inter = [], [], []
    consistent = tracked = 0
    for i, slot in enumerate(match.slots):
        best = []
        for t in range(n_frames):
            if not gt.present[t, i]:
                continue
            ious.append(mask_iou(masks[t, slot], gt.masks[t, i]))
            per_slot = [mask_iou(masks[t, q], gt.masks[t, i]) for q in range(masks.shape[1])]
            best.append(int(np.argmax(per_slot)))
        if best:
            majority = Counter(best).most_common(1)[0][0]
            consistent += sum(b == majority for b in best)
            tracked += len(best)
        for t in range(n_frames):
            for tp in range(n_frames):
                if t != tp:
                    intra.append(_cos(queries[t, slot], queries[tp, slot]))
        for j, other in enumerate(match.slots):
            if j != i:
                for t in range(n_frames):
                    for tp in range(n_frames):
                        inter.append(_cos(queries[t, slot], queries[tp, other]))
    return ClipMetrics(ious, intra, inter, consistent, tracked)


def summarize(per_clip: list[ClipMetrics], final_loss: float | None = None,
              losses: list[float] | None = None) -> MetricsReport:
    def mean(values):
        return float(np.mean(values)) if values else 0.0

    ious = [v for c in per_clip for v in c.ious]
    intra = [v for c in per_clip for v in c.intra]
    inter = [v for c in per_clip for v in c.inter]
    tracked = sum(c.tracked_frames for c in per_clip)
    consistency = sum(c.consistent for c in per_clip) / tracked if tracked else 0.0
    return MetricsReport(mean(ious), mean(intra), mean(inter), float(consistency), len(per_clip),
                         final_loss, list(losses or []))

"""Set-prediction losses, the cross-frame box-query contrastive loss, and their weighted total."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as tn
from .decoder import LayerPrediction, PredictionSet
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    dice: float = 5.0
    focal: float = 2.0
    contrastive: float = 1.0
    tau: float = 0.07
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    contrastive_aux: bool = True

    def validate(self) -> None:
        for name in ("cls", "l1", "giou", "dice", "focal", "contrastive", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss.{name} must be non-negative, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ValueError(f"loss.tau must be positive, got {self.tau}")
        if not 0.0 <= self.focal_alpha <= 1.0:
            raise ValueError(f"loss.focal_alpha must lie in [0, 1], got {self.focal_alpha}")


@dataclass
class GroundTruth:
    classes: np.ndarray   # [n] int
    boxes: np.ndarray     # [T, n, 4] normalized cx, cy, w, h
    masks: np.ndarray     # [T, n, h, w] binary, prediction resolution
    present: np.ndarray   # [T, n] bool

    @property
    def n_instances(self) -> int:
        return len(self.classes)


@dataclass
class MatchAssignment:
    slots: np.ndarray   # slot assigned to each ground-truth instance
    n_queries: int
    cost: float = 0.0

    def slot_labels(self) -> np.ndarray:
        """Ground-truth index per slot, -1 for no-object."""
        labels = np.full(self.n_queries, -1)
        labels[self.slots] = np.arange(len(self.slots))
        return labels


# matching


def hungarian_match(cost) -> MatchAssignment:
    cost = np.asarray(cost, dtype=np.float64)
    n_gt, n_q = cost.shape
    if n_gt > n_q:
        raise ValueError(f"cannot match {n_gt} ground-truth instances to {n_q} query slots")
    rows, cols = linear_sum_assignment(cost)
    slots = np.empty(n_gt, dtype=np.int64)
    slots[rows] = cols
    return MatchAssignment(slots, n_q, float(cost[rows, cols].sum()))


def _xyxy(box: np.ndarray) -> tuple[np.ndarray, ...]:
    cx, cy, w, h = np.moveaxis(np.asarray(box, dtype=np.float64), -1, 0)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou(a, b) -> np.ndarray:
    """Generalized IoU of (cx, cy, w, h) boxes; broadcasts over leading axes.

    Zero-area cases use the limits: IoU is 0 when the union is empty and the
    hull penalty is 0 when the hull is empty.
    """
    ax0, ay0, ax1, ay1 = _xyxy(a)
    bx0, by0, bx1, by1 = _xyxy(b)
    inter = (np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
             * np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None))
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    hull = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * (np.maximum(ay1, by1) - np.minimum(ay0, by0))
    iou = np.divide(inter, union, out=np.zeros_like(union), where=union > 0)
    penalty = np.divide(hull - union, hull, out=np.zeros_like(hull), where=hull > 0)
    return iou - penalty


def giou_tensor(pred, target) -> Tensor:
    """Differentiable GIoU of predicted boxes against fixed targets (positive areas assumed)."""
    pred = tn.as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    cx, cy, w, h = (pred[..., i] for i in range(4))
    ax0, ay0, ax1, ay1 = cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5
    bx0, by0, bx1, by1 = _xyxy(target)
    iw = tn.relu(tn.minimum(ax1, bx1) - tn.maximum(ax0, bx0))
    ih = tn.relu(tn.minimum(ay1, by1) - tn.maximum(ay0, by0))
    inter = iw * ih
    union = w * h + (bx1 - bx0) * (by1 - by0) - inter
    hull = (tn.maximum(ax1, bx1) - tn.minimum(ax0, bx0)) * (tn.maximum(ay1, by1) - tn.minimum(ay0, by0))
    return inter / union - (hull - union) / hull


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def matching_cost(pred: LayerPrediction, gt: GroundTruth, weights: LossWeights) -> np.ndarray:
    """[n_gt, Q] cost: class, L1 and GIoU terms, frame-averaged over present frames."""
    prob = _sigmoid(pred.class_logits.data)[:, gt.classes].T
    boxes = pred.boxes.data
    l1 = np.abs(boxes[:, None, :, :] - gt.boxes[:, :, None, :]).sum(-1)
    g = giou(boxes[:, None, :, :], gt.boxes[:, :, None, :])
    frame_w = _presence_weights(gt.present)[:, :, None]
    return (weights.cls * -prob
            + weights.l1 * (l1 * frame_w).sum(0)
            + weights.giou * ((1.0 - g) * frame_w).sum(0))


def _presence_weights(present: np.ndarray) -> np.ndarray:
    """[T, n] weights averaging over the frames where each instance is present."""
    present = np.asarray(present, dtype=np.float64)
    counts = present.sum(axis=0, keepdims=True)
    return np.divide(present, counts, out=np.zeros_like(present), where=counts > 0)


# per-term losses


def focal_terms(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise sigmoid focal loss."""
    logits = tn.as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    p = tn.sigmoid(logits)
    ce = tn.softplus(logits) - logits * y
    p_t = p * y + (1.0 - p) * (1.0 - y)
    alpha_t = alpha * y + (1.0 - alpha) * (1.0 - y)
    return alpha_t * ce * (1.0 - p_t) ** gamma


def focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0, normalizer: float = 1.0) -> Tensor:
    return focal_terms(logits, targets, alpha, gamma).sum() * (1.0 / normalizer)


def dice_loss(mask_logits, target, axes=None) -> Tensor:
    """1 - 2 sum(p g) / (sum p + sum g + 1), reduced over ``axes`` (default: all)."""
    p = tn.sigmoid(mask_logits)
    g = np.asarray(target, dtype=np.float64)
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes) + 1.0
    return 1.0 - 2.0 * inter / denom


def infonce_pair(latents_a, latents_b, tau: float) -> Tensor:
    """InfoNCE between two frames' slot embeddings; same slot index is the positive."""
    a = tn.l2_normalize(latents_a, axis=-1)
    b = tn.l2_normalize(latents_b, axis=-1)
    sim = tn.matmul(a, tn.swapaxes(b, -1, -2)) * (1.0 / tau)
    q = sim.shape[0]
    diag = np.arange(q)
    return -tn.log_softmax(sim, axis=-1)[diag, diag].sum() * (1.0 / q)


def contrastive_loss(latents, tau: float) -> Tensor:
    """Sum of InfoNCE over all ordered frame pairs of ``[T, Q, D]``."""
    latents = tn.as_tensor(latents)
    n_frames = latents.shape[0]
    total = tn.Tensor(0.0)
    for t in range(n_frames):
        for tp in range(n_frames):
            if t != tp:
                total = total + infonce_pair(latents[t], latents[tp], tau)
    return total


# total


@dataclass
class LossReport:
    total: float
    layers: list[dict] = field(default_factory=list)
    matches: list[MatchAssignment] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"total": self.total, "layers": self.layers}


def layer_terms(pred: LayerPrediction, gt: GroundTruth, weights: LossWeights, use_contrastive: bool,
                match: MatchAssignment | None = None):
    """Unweighted loss terms of one decoder layer plus its matching."""
    if match is None:
        match = hungarian_match(matching_cost(pred, gt, weights))
    n_gt = gt.n_instances
    norm = float(max(n_gt, 1))
    q, n_cls = pred.class_logits.shape
    targets = np.zeros((q, n_cls))
    targets[:, -1] = 1.0
    if n_gt:
        targets[match.slots, -1] = 0.0
        targets[match.slots, gt.classes] = 1.0
    terms = {"cls": focal_loss(pred.class_logits, targets, weights.focal_alpha, weights.focal_gamma, norm)}

    if n_gt:
        frame_w = _presence_weights(gt.present) / norm
        boxes = pred.boxes[:, match.slots]
        terms["l1"] = (tn.abs_(boxes - gt.boxes).sum(axis=-1) * frame_w).sum()
        terms["giou"] = ((1.0 - giou_tensor(boxes, gt.boxes)) * frame_w).sum()
        masks = pred.mask_logits[:, match.slots]
        terms["dice"] = (dice_loss(masks, gt.masks, axes=(-2, -1)) * frame_w).sum()
        mask_focal = focal_terms(masks, gt.masks, weights.focal_alpha, weights.focal_gamma).mean(axis=(-2, -1))
        terms["focal"] = (mask_focal * frame_w).sum()
    else:
        for name in ("l1", "giou", "dice", "focal"):
            terms[name] = tn.Tensor(0.0)

    if use_contrastive and pred.latents is not None:
        terms["cl"] = contrastive_loss(pred.latents, weights.tau)
    else:
        terms["cl"] = tn.Tensor(0.0)
    return terms, match


_TERM_WEIGHTS = (("cls", "cls"), ("l1", "l1"), ("giou", "giou"), ("dice", "dice"),
                 ("focal", "focal"), ("cl", "contrastive"))


def total_loss(preds: PredictionSet, gt: GroundTruth, weights: LossWeights,
               matches: list[MatchAssignment] | None = None) -> tuple[Tensor, LossReport]:
    """Weighted sum of all terms over every decoder layer (auxiliary layers weighted 1).

    ``matches`` fixes the per-layer assignments instead of re-running the matcher,
    which keeps the loss a smooth function of the parameters for gradient checks.
    """
    total = tn.Tensor(0.0)
    layer_reports = []
    layer_matches = []
    n_layers = len(preds.layers)
    for i, pred in enumerate(preds.layers):
        use_cl = weights.contrastive > 0 and (weights.contrastive_aux or i == n_layers - 1)
        terms, match = layer_terms(pred, gt, weights, use_cl, None if matches is None else matches[i])
        report = {"layer": i, "assignment": match.slots.tolist()}
        layer_matches.append(match)
        for term, wname in _TERM_WEIGHTS:
            weighted = terms[term] * getattr(weights, wname)
            report[term] = float(weighted.data)
            total = total + weighted
        layer_reports.append(report)
    return total, LossReport(float(total.data), layer_reports, layer_matches)

"""Training objectives.

* focal existence loss and L1+GIoU box loss, summed into the anchoring
  term over every stage, frame and clue (box terms masked to frames where
  the clue exists);
* arccos gaze loss on the fused output and on each existent clue's
  per-clue gaze, at every stage (deep supervision);
* an L1 second-difference temporal regularizer on the final stage's fused
  gaze sequence;
* the weighted total with gaze weight 6 and temporal weight 1 by default.

All functions are pure; batch items reduce by mean, within-clip structure
by sum.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegenerateGazeError, InternalConsistencyError, InvalidAnnotationError
from .heads import StagePrediction

COS_CLAMP = 1e-7
SCORE_CLAMP = 1e-7
MIN_NORM = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 6.0        # gaze terms
    lambda2: float = 1.0        # temporal regularizer
    box_l1_weight: float = 5.0
    box_giou_weight: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "box_l1_weight", "box_giou_weight",
                     "focal_alpha", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")


@dataclass(frozen=True)
class LossReport:
    anchor: float
    gaze_fusion: float
    gaze_per_clue: dict[str, float]
    temporal: float
    total: float

    def as_row(self, clue_order: tuple[str, ...]) -> list[float]:
        return [self.anchor, self.gaze_fusion,
                *[self.gaze_per_clue.get(c, 0.0) for c in clue_order],
                self.temporal, self.total]


@dataclass(frozen=True)
class BatchTargets:
    """Ground truth aligned with a batch of predictions.

    Tensors are (B, T, 3) gaze, (B, K, T, 4) boxes and (B, K, T) existence,
    with K following the enabled-clue order of the predictions.
    """

    clues: tuple[str, ...]
    gaze: torch.Tensor
    boxes: torch.Tensor
    existence: torch.Tensor


def focal_loss(score: torch.Tensor, target: torch.Tensor,
               alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise focal loss; ``target`` is 0/1, ``score`` a probability."""
    score = torch.as_tensor(score)
    target = torch.as_tensor(target, dtype=score.dtype, device=score.device)
    p = score.clamp(SCORE_CLAMP, 1.0 - SCORE_CLAMP)
    pos = -alpha * (1 - p) ** gamma * torch.log(p)
    neg = -(1 - alpha) * p ** gamma * torch.log(1 - p)
    return torch.where(target > 0.5, pos, neg)


def giou(boxes_a: torch.Tensor, boxes_b: torch.Tensor) -> torch.Tensor:
    """Generalized IoU of center-form boxes, elementwise over leading dims."""
    ax1 = boxes_a[..., 0] - boxes_a[..., 2] / 2
    ay1 = boxes_a[..., 1] - boxes_a[..., 3] / 2
    ax2 = boxes_a[..., 0] + boxes_a[..., 2] / 2
    ay2 = boxes_a[..., 1] + boxes_a[..., 3] / 2
    bx1 = boxes_b[..., 0] - boxes_b[..., 2] / 2
    by1 = boxes_b[..., 1] - boxes_b[..., 3] / 2
    bx2 = boxes_b[..., 0] + boxes_b[..., 2] / 2
    by2 = boxes_b[..., 1] + boxes_b[..., 3] / 2

    inter_w = (torch.minimum(ax2, bx2) - torch.maximum(ax1, bx1)).clamp(min=0)
    inter_h = (torch.minimum(ay2, by2) - torch.maximum(ay1, by1)).clamp(min=0)
    inter = inter_w * inter_h
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    union = area_a + area_b - inter
    iou = inter / union

    enc_w = torch.maximum(ax2, bx2) - torch.minimum(ax1, bx1)
    enc_h = torch.maximum(ay2, by2) - torch.minimum(ay1, by1)
    enclose = enc_w * enc_h
    return iou - (enclose - union) / enclose


def box_loss(pred: torch.Tensor, gt: torch.Tensor,
             weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Weighted mean-L1 + (1 - GIoU) between center-form boxes, elementwise."""
    pred = torch.as_tensor(pred)
    gt = torch.as_tensor(gt, dtype=pred.dtype, device=pred.device)
    if torch.any(gt[..., 2] <= 0).item() or torch.any(gt[..., 3] <= 0).item():
        raise InvalidAnnotationError("ground-truth box has nonpositive width/height")
    l1 = (pred - gt).abs().mean(dim=-1)
    return weights.box_l1_weight * l1 + weights.box_giou_weight * (1.0 - giou(pred, gt))


def arccos_loss(g: torch.Tensor, g_hat: torch.Tensor) -> torch.Tensor:
    """Angle (radians) between gaze vectors, elementwise over leading dims.

    Scale-invariant in both arguments; the cosine is clamped away from +-1
    for gradient stability.
    """
    g = torch.as_tensor(g)
    g_hat = torch.as_tensor(g_hat, dtype=g.dtype, device=g.device)
    na = torch.linalg.vector_norm(g, dim=-1)
    nb = torch.linalg.vector_norm(g_hat, dim=-1)
    if torch.any(na <= MIN_NORM).item() or torch.any(nb <= MIN_NORM).item():
        raise DegenerateGazeError("cannot compute an angle against a zero-norm gaze vector")
    cos = (g * g_hat).sum(dim=-1) / (na * nb)
    return torch.arccos(cos.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP))


def temporal_reg(g_seq: torch.Tensor) -> torch.Tensor:
    """L1 norm of the discrete second difference, summed over time.

    ``g_seq``: (T, 3) or (B, T, 3); returns a scalar or (B,). Sequences
    shorter than 3 frames contribute 0.
    """
    g_seq = torch.as_tensor(g_seq)
    t = g_seq.shape[-2]
    if t < 3:
        shape = g_seq.shape[:-2]
        return g_seq.new_zeros(shape) if shape else g_seq.new_zeros(())
    second = 2 * g_seq[..., 1:-1, :] - g_seq[..., 2:, :] - g_seq[..., :-2, :]
    return second.abs().sum(dim=(-2, -1))


def anchor_loss(preds: list[StagePrediction], targets: BatchTargets,
                weights: LossWeights = LossWeights()) -> torch.Tensor:
    """Existence + box anchoring term, summed over stages/frames/clues.

    Focal loss applies everywhere; box losses only where the clue exists.
    Mean over the batch.
    """
    total = None
    exist = targets.existence.to(targets.boxes.dtype)
    for sp in preds:
        if sp.existence is None:
            continue
        if sp.existence.shape != targets.existence.shape:
            raise InternalConsistencyError(
                f"existence predictions {tuple(sp.existence.shape)} do not match "
                f"targets {tuple(targets.existence.shape)}")
        cls = focal_loss(sp.existence, exist, weights.focal_alpha, weights.focal_gamma)
        box = box_loss(sp.boxes, _safe_gt_boxes(targets), weights) * exist
        term = (cls + box).sum(dim=(1, 2))  # (B,)
        total = term if total is None else total + term
    if total is None:
        first = preds[0]
        return first.fused.new_zeros(())
    return total.mean()


def _safe_gt_boxes(targets: BatchTargets) -> torch.Tensor:
    """GT boxes with nonexistent entries replaced by a valid placeholder.

    Annotation boxes where existence is false may hold any value; they are
    masked out of the loss but still flow through box_loss, so degenerate
    rows are swapped for a unit box first.
    """
    placeholder = targets.boxes.new_tensor([0.5, 0.5, 1.0, 1.0])
    mask = targets.existence.unsqueeze(-1)
    return torch.where(mask, targets.boxes, placeholder)


def gaze_loss(preds: list[StagePrediction], targets: BatchTargets
              ) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Arccos supervision on fused and per-clue gazes at every stage.

    Per-clue terms are masked to frames where that clue exists; the fused
    term always applies. Returns (fusion term, per-clue terms), each a
    batch-mean scalar.
    """
    clues = preds[0].clues
    exist = targets.existence
    fusion_total = None
    clue_totals: dict[str, torch.Tensor] = {}
    for sp in preds:
        fused_term = arccos_loss(sp.fused, targets.gaze).sum(dim=1)  # (B,)
        fusion_total = fused_term if fusion_total is None else fusion_total + fused_term
        gt = targets.gaze.unsqueeze(1)                               # (B, 1, T, 3)
        per_clue = arccos_loss(sp.gaze, gt) * exist.to(sp.gaze.dtype)
        for i, c in enumerate(clues):
            term = per_clue[:, i].sum(dim=1)
            clue_totals[c] = term if c not in clue_totals else clue_totals[c] + term
    return fusion_total.mean(), {c: v.mean() for c, v in clue_totals.items()}


def combine_loss_terms(anchor, gaze_fusion, gaze_per_clue: dict, temporal,
                       weights: LossWeights = LossWeights()):
    """total = anchor + lambda1 * (fusion + sum per-clue) + lambda2 * temporal."""
    gaze_sum = gaze_fusion + sum(gaze_per_clue.values())
    return anchor + weights.lambda1 * gaze_sum + weights.lambda2 * temporal


def total_loss(preds: list[StagePrediction], targets: BatchTargets,
               weights: LossWeights = LossWeights()
               ) -> tuple[torch.Tensor, LossReport]:
    """Assemble the full objective; returns (scalar tensor, report).

    The temporal term applies to the final stage's fused sequence; all
    other terms are deep-supervised across stages.
    """
    anchor = anchor_loss(preds, targets, weights)
    fusion, per_clue = gaze_loss(preds, targets)
    temporal = temporal_reg(preds[-1].fused).mean()
    total = combine_loss_terms(anchor, fusion, per_clue, temporal, weights)
    report = LossReport(
        anchor=float(anchor.detach()),
        gaze_fusion=float(fusion.detach()),
        gaze_per_clue={c: float(v.detach()) for c, v in per_clue.items()},
        temporal=float(temporal.detach()),
        total=float(total.detach()),
    )
    return total, report


def angular_error_rad(pred, gt) -> float:
    """Convenience scalar wrapper around :func:`arccos_loss`."""
    return float(arccos_loss(torch.as_tensor(pred, dtype=torch.float64),
                             torch.as_tensor(gt, dtype=torch.float64)))

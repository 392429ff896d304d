"""Losses, patch-level ground truth, and evaluation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import NumericsError, Tensor


@dataclass
class PatchLabels:
    """Binary task-relevance label per token, derived from the pixel mask."""

    labels: np.ndarray
    sample_id: int = -1


def derive_gt_patch_labels(gt_mask: np.ndarray, patch_size: int,
                           sample_id: int = -1) -> PatchLabels:
    """Label a patch 1 iff its P x P block contains at least one positive
    pixel. Patches are scanned row-major; labels are zero-based."""
    gt_mask = np.asarray(gt_mask)
    h, w = gt_mask.shape
    p = patch_size
    if h % p or w % p:
        raise NumericsError(f"mask {h}x{w} not divisible by patch size {p}")
    blocks = gt_mask.reshape(h // p, p, w // p, p)
    labels = (blocks.max(axis=(1, 3)) > 0).astype(np.uint8).reshape(-1)
    return PatchLabels(labels=labels, sample_id=sample_id)


def cross_entropy(pred_logits: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy from logits (stable log-sum form)."""
    return ops.bce_with_logits(pred_logits, np.asarray(gt, dtype=np.float64))


def dice_loss(pred_prob: Tensor, gt, eps: float = 1.0) -> Tensor:
    """1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)."""
    g = np.asarray(gt, dtype=np.float64)
    if g.shape != pred_prob.shape:
        raise NumericsError(f"dice: shape mismatch {pred_prob.shape} vs {g.shape}")
    gt_t = Tensor(g, dtype=pred_prob.dtype)
    inter = ops.tsum(ops.mul(pred_prob, gt_t))
    denom = ops.add(ops.add(ops.tsum(pred_prob), float(g.sum())), eps)
    return ops.sub(1.0, ops.div(ops.add(ops.mul(inter, 2.0), eps), denom))


def vltp_loss(mask_logits: Tensor, gt_mask, stage_gates, patch_labels):
    """Pixel-mask loss plus patch-gate loss, both CE + DICE.

    The gate loss is averaged over stages so its magnitude does not depend on
    the schedule; gates are used directly as probabilities. Returns
    (total, l_x, l_p) as taped scalars, with l_p = 0 for an empty schedule.
    """
    gt = np.asarray(gt_mask, dtype=np.float64)
    l_x = ops.add(cross_entropy(mask_logits, gt),
                  dice_loss(ops.sigmoid(mask_logits), gt))
    if not stage_gates:
        return l_x, l_x, None
    if patch_labels is None:
        raise NumericsError("gate loss requires patch-level ground truth")
    p_gt = np.asarray(
        patch_labels.labels if isinstance(patch_labels, PatchLabels) else patch_labels,
        dtype=np.float64)
    terms = []
    for gates in stage_gates:
        terms.append(ops.add(ops.bce_probs(gates, p_gt), dice_loss(gates, p_gt)))
    l_p = terms[0]
    for t in terms[1:]:
        l_p = ops.add(l_p, t)
    l_p = ops.mul(l_p, 1.0 / len(terms))
    return ops.add(l_x, l_p), l_x, l_p


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Foreground intersection-over-union; 1.0 when both masks are empty."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise NumericsError(f"iou: shape mismatch {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def miou(pairs) -> float:
    """Mean per-sample foreground IoU over (pred, gt) pairs."""
    vals = [iou(p, g) for p, g in pairs]
    if not vals:
        raise NumericsError("miou over an empty corpus")
    return float(np.mean(vals))


def prune_recall_precision(mask: np.ndarray, patch_labels) -> tuple:
    """Fraction of relevant tokens retained, and of retained tokens relevant.

    Both default to 1.0 when the respective denominator is empty.
    """
    keep = np.asarray(mask).astype(bool)
    gt = np.asarray(
        patch_labels.labels if isinstance(patch_labels, PatchLabels) else patch_labels
    ).astype(bool)
    pos = gt.sum()
    kept = keep.sum()
    recall = float(np.logical_and(keep, gt).sum() / pos) if pos else 1.0
    precision = float(np.logical_and(keep, gt).sum() / kept) if kept else 1.0
    return recall, precision


def metrics_line(sample_id, iou_val, recall, precision) -> str:
    """One JSON metrics line for a sample."""
    return json.dumps({"sample": sample_id, "iou": iou_val,
                       "prune_recall": recall, "prune_precision": precision})

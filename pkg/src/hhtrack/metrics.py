"""One-pass evaluation: precision and success curves, DP@20px and AUC."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .head import Box, XYWH, iou

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)  # 0..50 px
SUCCESS_THRESHOLDS = np.arange(21, dtype=np.float64) / 20.0  # 0, 0.05, ..., 1
DP_THRESHOLD = 20.0


def center_error(pred: Box, gt: Box) -> float:
    (px, py), (gx, gy) = pred.center, gt.center
    return math.hypot(px - gx, py - gy)


@dataclass(frozen=True)
class OPEResult:
    center_errors: np.ndarray
    overlaps: np.ndarray
    precision_curve: np.ndarray
    success_curve: np.ndarray
    dp: float
    auc: float

    def to_report(self) -> dict:
        return {
            "frames": int(len(self.overlaps)),
            "dp": self.dp,
            "auc": self.auc,
            "mean_iou": float(self.overlaps.mean()),
            "precision_thresholds": PRECISION_THRESHOLDS.tolist(),
            "precision_curve": self.precision_curve.tolist(),
            "success_thresholds": SUCCESS_THRESHOLDS.tolist(),
            "success_curve": self.success_curve.tolist(),
        }


def ope_from_measurements(center_errors, overlaps) -> OPEResult:
    errors = np.asarray(center_errors, dtype=np.float64)
    ious = np.asarray(overlaps, dtype=np.float64)
    if errors.shape != ious.shape or errors.ndim != 1 or errors.size == 0:
        raise ValueError("need equally long, non-empty error and overlap sequences")
    precision = (errors[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    success = (ious[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    dp = float((errors <= DP_THRESHOLD).mean())
    return OPEResult(errors, ious, precision, success, dp, float(success.mean()))


def evaluate_ope(pred_boxes, gt_boxes) -> OPEResult:
    pred_boxes, gt_boxes = list(pred_boxes), list(gt_boxes)
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"{len(pred_boxes)} predictions for {len(gt_boxes)} ground-truth boxes")
    if not gt_boxes:
        raise ValueError("evaluate_ope needs at least one frame")
    if any(b.kind != XYWH for b in pred_boxes + gt_boxes):
        raise ValueError("evaluate_ope expects pixel (x, y, w, h) boxes")
    errors = [center_error(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    overlaps = [iou(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    return ope_from_measurements(errors, overlaps)

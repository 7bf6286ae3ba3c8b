"""Corner-head box decoding, box geometry and the CIoU regression loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    arctan,
    conv2d,
    elementwise_max,
    elementwise_min,
    gelu,
    mean,
    reshape,
    softmax_rows,
    square,
    stack,
    tsum,
)

XYWH = "xywh_pixels"
XYXY = "xyxy_normalized"
SEPARATION = 1e-4


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, either pixel ``(x, y, w, h)`` or normalized ``(x1, y1, x2, y2)``."""

    values: tuple[float, float, float, float]
    kind: str = XYWH

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if len(vals) != 4 or not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box needs four finite values, got {self.values}")
        if self.kind == XYWH:
            if vals[2] <= 0 or vals[3] <= 0:
                raise ValueError(f"pixel box needs positive size, got {vals}")
        elif self.kind == XYXY:
            x1, y1, x2, y2 = vals
            if not (0.0 <= x1 < x2 <= 1.0 and 0.0 <= y1 < y2 <= 1.0):
                raise ValueError(f"normalized box out of order or range: {vals}")
        else:
            raise ValueError(f"unknown box kind {self.kind!r}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def xywh(cls, x, y, w, h) -> "Box":
        return cls((x, y, w, h), XYWH)

    @classmethod
    def xyxy(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1, y1, x2, y2), XYXY)

    @property
    def center(self) -> tuple[float, float]:
        a, b, c, d = self.values
        if self.kind == XYWH:
            return a + c / 2.0, b + d / 2.0
        return (a + c) / 2.0, (b + d) / 2.0

    def corners(self) -> tuple[float, float, float, float]:
        a, b, c, d = self.values
        return (a, b, a + c, b + d) if self.kind == XYWH else (a, b, c, d)

    def to_normalized(self, width: float, height: float) -> "Box":
        if self.kind == XYXY:
            return self
        x1, y1, x2, y2 = self.corners()
        return Box.xyxy(x1 / width, y1 / height, x2 / width, y2 / height)

    def to_pixels(self, width: float, height: float) -> "Box":
        if self.kind == XYWH:
            return self
        x1, y1, x2, y2 = self.values
        return Box.xywh(x1 * width, y1 * height, (x2 - x1) * width, (y2 - y1) * height)


def box_iou(a, b) -> np.ndarray:
    """IoU of xyxy boxes given as ``(..., 4)`` arrays."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    iw = np.maximum(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0)
    ih = np.maximum(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0)
    inter = iw * ih
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    return inter / (area_a + area_b - inter)


def iou(a: Box, b: Box) -> float:
    if a.kind != b.kind:
        raise ValueError(f"iou of mismatched representations {a.kind} and {b.kind}")
    return float(box_iou(a.corners(), b.corners()))


@dataclass
class CornerHeadParams:
    """Two conv stacks (top-left and bottom-right), each d -> d/2 -> 1 with 3x3 kernels."""

    tl_w1: Tensor
    tl_b1: Tensor
    tl_w2: Tensor
    tl_b2: Tensor
    br_w1: Tensor
    br_b1: Tensor
    br_w2: Tensor
    br_b2: Tensor


def init_corner_head(d: int, rng: np.random.Generator) -> CornerHeadParams:
    mid = max(1, d // 2)

    def conv(cin, cout):
        b = 1.0 / math.sqrt(9 * cin)
        return Tensor(rng.uniform(-b, b, size=(3, 3, cin, cout))), Tensor(np.zeros(cout))

    tl_w1, tl_b1 = conv(d, mid)
    tl_w2, tl_b2 = conv(mid, 1)
    br_w1, br_b1 = conv(d, mid)
    br_w2, br_b2 = conv(mid, 1)
    return CornerHeadParams(tl_w1, tl_b1, tl_w2, tl_b2, br_w1, br_b1, br_w2, br_b2)


def corner_maps(feature: Tensor, params: CornerHeadParams, grid: tuple[int, int]):
    """Score maps ``(..., h, w)`` for both corners from ``(..., h*w, d)`` fused tokens."""
    h, w = grid
    *lead, n, d = feature.shape
    if n != h * w:
        raise ValueError(f"{n} tokens cannot form a {h}x{w} grid")
    x = reshape(feature, tuple(lead) + (h, w, d))
    tl = conv2d(gelu(conv2d(x, params.tl_w1, params.tl_b1)), params.tl_w2, params.tl_b2)
    br = conv2d(gelu(conv2d(x, params.br_w1, params.br_b1)), params.br_w2, params.br_b2)
    return reshape(tl, tuple(lead) + (h, w)), reshape(br, tuple(lead) + (h, w))


def _soft_argmax(score: Tensor):
    *lead, h, w = score.shape
    p = softmax_rows(reshape(score, tuple(lead) + (h * w,)))
    gy, gx = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    x = tsum(p * gx.reshape(-1), axis=-1)
    y = tsum(p * gy.reshape(-1), axis=-1)
    return x, y


def _separate(lo: Tensor, hi: Tensor, eps: float):
    degenerate = (hi.data - lo.data) < eps
    if not degenerate.any():
        return lo, hi
    # forward value is the eps-wide box; the gradient passes straight through to
    # each raw corner so the loss can still pull a collapsed box apart
    mid = (lo.data + hi.data) * 0.5
    lo_fix = np.where(degenerate, mid - eps / 2 - lo.data, 0.0)
    hi_fix = np.where(degenerate, mid + eps / 2 - hi.data, 0.0)
    return lo + Tensor(lo_fix), hi + Tensor(hi_fix)


def corner_decode(score_tl, score_br, eps: float = SEPARATION) -> Tensor:
    """Soft-argmax both corner maps into normalized ``(..., 4)`` xyxy boxes.

    Grid cell ``(i, j)`` sits at ``((j + 0.5) / w, (i + 0.5) / h)``. When a
    decoded box is inverted or thinner than ``eps`` it is replaced by an
    ``eps``-wide box around the midpoint of the two corners; gradients reach
    the raw corners unchanged (straight-through).
    """
    tl = score_tl if isinstance(score_tl, Tensor) else Tensor(score_tl)
    br = score_br if isinstance(score_br, Tensor) else Tensor(score_br)
    if tl.shape != br.shape:
        raise ValueError(f"corner maps differ in shape: {tl.shape} vs {br.shape}")
    x1, y1 = _soft_argmax(tl)
    x2, y2 = _soft_argmax(br)
    x1, x2 = _separate(x1, x2, eps)
    y1, y2 = _separate(y1, y2, eps)
    return stack([x1, y1, x2, y2], axis=-1)


def decoded_box(boxes: Tensor) -> Box:
    return Box.xyxy(*np.clip(boxes.data.reshape(4), 0.0, 1.0))


def ciou_loss(pred, gt, detach_alpha: bool = True, alpha: float | np.ndarray | None = None) -> Tensor:
    """Complete-IoU loss between xyxy boxes, averaged over leading axes.

    ``1 - IoU + rho^2 / c^2 + alpha * v`` with ``v`` the arctan aspect-ratio
    discrepancy and ``alpha = v / ((1 - IoU) + v)``. By default ``alpha`` is a
    per-step constant (no gradient through it). Passing ``alpha`` pins it to
    the given value instead.
    """
    p = pred if isinstance(pred, Tensor) else Tensor(pred)
    g = gt if isinstance(gt, Tensor) else Tensor(gt)
    if p.shape[-1] != 4 or g.shape[-1] != 4:
        raise ValueError(f"ciou_loss needs (..., 4) boxes, got {p.shape} and {g.shape}")
    pd, gd = p.data, g.data
    if ((pd[..., 2] <= pd[..., 0]) | (pd[..., 3] <= pd[..., 1])).any():
        raise ValueError("ciou_loss: predicted box has zero or negative area")
    if ((gd[..., 2] <= gd[..., 0]) | (gd[..., 3] <= gd[..., 1])).any():
        raise ValueError("ciou_loss: ground-truth box has zero or negative area")

    px1, py1, px2, py2 = (p[..., i] for i in range(4))
    gx1, gy1, gx2, gy2 = (g[..., i] for i in range(4))
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1

    zero = Tensor(np.zeros(pw.shape))
    iw = elementwise_max(elementwise_min(px2, gx2) - elementwise_max(px1, gx1), zero)
    ih = elementwise_max(elementwise_min(py2, gy2) - elementwise_max(py1, gy1), zero)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    overlap = inter / union

    rho2 = square((px1 + px2 - gx1 - gx2) * 0.5) + square((py1 + py2 - gy1 - gy2) * 0.5)
    cw = elementwise_max(px2, gx2) - elementwise_min(px1, gx1)
    ch = elementwise_max(py2, gy2) - elementwise_min(py1, gy1)
    c2 = square(cw) + square(ch)

    v = square(arctan(gw / gh) - arctan(pw / ph)) * (4.0 / math.pi ** 2)
    if alpha is not None:
        a = Tensor(np.broadcast_to(np.asarray(alpha, dtype=np.float64), v.shape))
    elif detach_alpha:
        denom = 1.0 - overlap.data + v.data
        safe = np.where(denom > 0, denom, 1.0)
        a = Tensor(np.where(denom > 0, v.data / safe, 0.0))
    else:
        a = v / ((1.0 - overlap) + v)
    loss = 1.0 - overlap + rho2 / c2 + a * v
    return mean(loss)


def ciou_alpha(pred, gt) -> np.ndarray:
    """The trade-off weight ``alpha`` that :func:`ciou_loss` would use, as data."""
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    pw, ph = p[..., 2] - p[..., 0], p[..., 3] - p[..., 1]
    gw, gh = g[..., 2] - g[..., 0], g[..., 3] - g[..., 1]
    v = (4.0 / math.pi ** 2) * (np.arctan(gw / gh) - np.arctan(pw / ph)) ** 2
    denom = 1.0 - box_iou(p, g) + v
    return np.where(denom > 0, v / np.where(denom > 0, denom, 1.0), 0.0)

"""Online tracking: crops, inference, box back-mapping and the template update schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .head import Box, XYWH
from .model import HHTrackParams, ModelConfig, forward
from .numerics import precision
from .spectral import HyperCube, sample_false_color


@dataclass(frozen=True)
class CropSpec:
    """Square crop of side ``side`` pixels around ``center``, resampled to ``out_side``."""

    center: tuple[float, float]
    side: float
    out_side: int

    def __post_init__(self):
        if not self.side > 0:
            raise ValueError(f"crop side must be positive, got {self.side}")
        if self.out_side < 1:
            raise ValueError(f"crop output side must be >= 1, got {self.out_side}")

    @property
    def origin(self) -> tuple[float, float]:
        return self.center[0] - self.side / 2.0, self.center[1] - self.side / 2.0

    def to_crop(self, box: Box) -> Box:
        """Pixel box in the frame -> normalized xyxy box in the crop (unclipped values)."""
        x1, y1, x2, y2 = box.corners()
        ox, oy = self.origin
        s = self.side
        return Box.xyxy(*np.clip([(x1 - ox) / s, (y1 - oy) / s, (x2 - ox) / s, (y2 - oy) / s], 0, 1))

    def crop_to_frame(self, xyxy) -> tuple[float, float, float, float]:
        """Normalized crop corners -> frame pixel corners."""
        ox, oy = self.origin
        s = self.side
        x1, y1, x2, y2 = (float(v) for v in xyxy)
        return ox + x1 * s, oy + y1 * s, ox + x2 * s, oy + y2 * s

    def frame_to_crop(self, corners) -> tuple[float, float, float, float]:
        ox, oy = self.origin
        s = self.side
        x1, y1, x2, y2 = (float(v) for v in corners)
        return (x1 - ox) / s, (y1 - oy) / s, (x2 - ox) / s, (y2 - oy) / s


def _axis_taps(origin: float, side: float, out: int, size: int):
    # output pixel u has its center at origin + (u + 0.5) * side / out
    pos = origin + (np.arange(out) + 0.5) * (side / out) - 0.5
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    return i0, i0 + 1, 1.0 - frac, frac


def crop_resize(frame, spec: CropSpec) -> np.ndarray:
    """Bilinear square crop of a ``(C, H, W)`` frame; outside pixels take the band mean."""
    data = frame.data if isinstance(frame, HyperCube) else np.asarray(frame)
    c, h, w = data.shape
    fill = data.reshape(c, -1).mean(axis=1)
    ox, oy = spec.origin
    y0, y1, wy0, wy1 = _axis_taps(oy, spec.side, spec.out_side, h)
    x0, x1, wx0, wx1 = _axis_taps(ox, spec.side, spec.out_side, w)

    def gather(yi, xi):
        valid = ((yi >= 0) & (yi < h))[:, None] & ((xi >= 0) & (xi < w))[None, :]
        vals = data[:, np.clip(yi, 0, h - 1)[:, None], np.clip(xi, 0, w - 1)[None, :]]
        return np.where(valid[None], vals, fill[:, None, None])

    out = (gather(y0, x0) * (wy0[:, None] * wx0[None, :])
           + gather(y0, x1) * (wy0[:, None] * wx1[None, :])
           + gather(y1, x0) * (wy1[:, None] * wx0[None, :])
           + gather(y1, x1) * (wy1[:, None] * wx1[None, :]))
    return out.astype(data.dtype, copy=False)


def crop_around(box: Box, factor: float, out_side: int) -> CropSpec:
    _, _, w, h = box.values
    return CropSpec(box.center, factor * math.sqrt(w * h), out_side)


def clip_box(corners, width: int, height: int, min_size: float = 1.0) -> Box:
    """Clip pixel corners to the frame, keeping at least ``min_size`` pixels per side."""
    x1, y1, x2, y2 = corners

    def fix(lo, hi, limit):
        lo, hi = min(max(lo, 0.0), limit), min(max(hi, 0.0), limit)
        if hi - lo < min_size:
            mid = min(max((lo + hi) / 2.0, min_size / 2.0), limit - min_size / 2.0)
            lo, hi = mid - min_size / 2.0, mid + min_size / 2.0
        return lo, hi

    x1, x2 = fix(x1, x2, float(width))
    y1, y2 = fix(y1, y2, float(height))
    return Box.xywh(x1, y1, x2 - x1, y2 - y1)


@dataclass(frozen=True)
class TrackerConfig:
    search_factor: float = 4.0
    template_factor: float = 2.0
    update_interval: int = 25


@dataclass(frozen=True)
class TrackerState:
    initial_template: np.ndarray
    updated_template: np.ndarray
    prev_box: Box
    frame_idx: int = 1
    update_interval: int = 25
    last_update: int = 1

    @property
    def box(self) -> Box:
        return self.prev_box


class HHTracker:
    """Trained parameters plus the geometry needed to run them on raw frames."""

    def __init__(self, params: HHTrackParams, model_cfg: ModelConfig,
                 tracker_cfg: TrackerConfig | None = None, dtype=np.float32):
        self.params = params
        self.model_cfg = model_cfg
        self.cfg = tracker_cfg or TrackerConfig()
        self.dtype = dtype

    def template_crop(self, frame, box: Box) -> np.ndarray:
        spec = crop_around(box, self.cfg.template_factor, self.model_cfg.template_size)
        return crop_resize(frame, spec)

    def search_crop(self, frame, box: Box) -> tuple[np.ndarray, CropSpec]:
        spec = crop_around(box, self.cfg.search_factor, self.model_cfg.search_size)
        return crop_resize(frame, spec), spec

    def predict(self, initial_template, updated_template, search) -> np.ndarray:
        """Normalized xyxy box for one (unbatched) set of crops."""
        with precision(self.dtype):
            boxes, _, _ = forward(
                self.params, self.model_cfg,
                sample_false_color(initial_template)[None],
                sample_false_color(updated_template)[None],
                sample_false_color(search)[None],
                search[None],
            )
        return np.asarray(boxes.data[0], dtype=np.float64)

    def init(self, frame, gt_box: Box) -> TrackerState:
        return init_track(frame, gt_box, self)

    def step(self, state: TrackerState, frame) -> tuple[Box, TrackerState]:
        return step_track(state, frame, self)


def _frame_array(frame) -> np.ndarray:
    return frame.data if isinstance(frame, HyperCube) else np.asarray(frame)


def init_track(frame, gt_box: Box, model: HHTracker) -> TrackerState:
    data = _frame_array(frame)
    if gt_box.kind != XYWH:
        raise ValueError("init_track expects a pixel (x, y, w, h) box")
    _, h, w = data.shape
    box = gt_box
    x1, y1, x2, y2 = gt_box.corners()
    if x1 < 0 or y1 < 0 or x2 > w or y2 > h:
        box = clip_box((x1, y1, x2, y2), w, h)
    template = model.template_crop(data, box)
    return TrackerState(template, template, gt_box, 1, model.cfg.update_interval, 1)


def step_track(state: TrackerState, frame, model: HHTracker) -> tuple[Box, TrackerState]:
    data = _frame_array(frame)
    if data.shape[0] != model.model_cfg.channels:
        raise ValueError(f"frame has {data.shape[0]} bands, model expects {model.model_cfg.channels}")
    _, h, w = data.shape
    search, spec = model.search_crop(data, state.prev_box)
    norm = model.predict(state.initial_template, state.updated_template, search)
    box = clip_box(spec.crop_to_frame(norm), w, h)
    frame_idx = state.frame_idx + 1
    updated, last = state.updated_template, state.last_update
    if frame_idx % state.update_interval == 0:
        updated, last = model.template_crop(data, box), frame_idx
    return box, replace(state, updated_template=updated, prev_box=box,
                        frame_idx=frame_idx, last_update=last)


def track_sequence(model: HHTracker, frames, init_box: Box) -> list[Box]:
    """One-pass run: the first frame initializes, every later frame is predicted."""
    frames = iter(frames)
    state = model.init(next(frames), init_box)
    boxes = [state.box]
    for frame in frames:
        box, state = model.step(state, frame)
        boxes.append(box)
    return boxes

"""On-disk sequences, ground-truth text and the synthetic sequence generator.

A sequence directory holds::

    meta.json          channels, height, width, frame_count, value_scale, name
    frames/000001.bin  little-endian float32, band-major (C, H, W)
    groundtruth.txt    one "x,y,w,h" line per frame, 0-based pixel origin
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .head import Box

FRAME_DTYPE = np.dtype("<f4")
META_FILE = "meta.json"
GT_FILE = "groundtruth.txt"
FRAME_DIR = "frames"


class SequenceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SequenceMeta:
    channels: int
    height: int
    width: int
    frame_count: int
    value_scale: float = 1.0
    name: str = "sequence"

    def __post_init__(self):
        if self.channels < 3:
            raise SequenceFormatError(f"sequence needs >= 3 channels, got {self.channels}")
        if min(self.height, self.width, self.frame_count) < 1:
            raise SequenceFormatError("height, width and frame_count must be positive")
        if not self.value_scale > 0:
            raise SequenceFormatError("value_scale must be positive")


def frame_name(index: int) -> str:
    return f"{index:06d}.bin"


def format_box(box: Box) -> str:
    return ",".join(_fmt(v) for v in box.values)


def _fmt(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:.4f}"


def parse_box_line(line: str, lineno: int = 1) -> Box:
    parts = [p.strip() for p in line.replace("\t", ",").split(",")]
    if len(parts) != 4:
        raise SequenceFormatError(f"line {lineno}: expected 'x,y,w,h', got {line.strip()!r}")
    try:
        return Box.xywh(*(float(p) for p in parts))
    except ValueError as err:
        raise SequenceFormatError(f"line {lineno}: {err}") from None


def read_boxes(path) -> list[Box]:
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                boxes.append(parse_box_line(line, lineno))
    return boxes


def write_boxes(path, boxes) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for box in boxes:
            fh.write(format_box(box) + "\n")


def write_sequence(directory, meta: SequenceMeta, frames, boxes) -> Path:
    """Write raw frames (already in stored units) and ground truth."""
    out = Path(directory)
    (out / FRAME_DIR).mkdir(parents=True, exist_ok=True)
    boxes = list(boxes)
    n = 0
    for n, frame in enumerate(frames, start=1):
        arr = np.asarray(frame)
        if arr.shape != (meta.channels, meta.height, meta.width):
            raise SequenceFormatError(f"frame {n} has shape {arr.shape}")
        (out / FRAME_DIR / frame_name(n)).write_bytes(arr.astype(FRAME_DTYPE).tobytes())
    if n != meta.frame_count or len(boxes) != meta.frame_count:
        raise SequenceFormatError(f"meta says {meta.frame_count} frames, "
                                  f"got {n} frames and {len(boxes)} boxes")
    (out / META_FILE).write_text(json.dumps(asdict(meta), indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
    write_boxes(out / GT_FILE, boxes)
    return out


def read_meta(directory) -> SequenceMeta:
    path = Path(directory) / META_FILE
    if not path.is_file():
        raise SequenceFormatError(f"missing {path}")
    try:
        return SequenceMeta(**json.loads(path.read_text(encoding="utf-8")))
    except (TypeError, json.JSONDecodeError) as err:
        raise SequenceFormatError(f"bad meta file {path}: {err}") from None


def read_sequence(directory) -> tuple[SequenceMeta, Iterator[np.ndarray], list[Box]]:
    """Meta, a lazy iterator of ``(C, H, W)`` frames scaled into [0, 1], and ground truth."""
    root = Path(directory)
    meta = read_meta(root)
    gt_path = root / GT_FILE
    if not gt_path.is_file():
        raise SequenceFormatError(f"missing {gt_path}")
    boxes = read_boxes(gt_path)
    paths = [root / FRAME_DIR / frame_name(i) for i in range(1, meta.frame_count + 1)]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise SequenceFormatError(f"missing frame files: {', '.join(missing[:5])}")
    if len(boxes) != meta.frame_count:
        raise SequenceFormatError(f"{meta.frame_count} frames but {len(boxes)} ground-truth lines")
    expected = meta.channels * meta.height * meta.width * FRAME_DTYPE.itemsize

    def frames():
        for p in paths:
            raw = p.read_bytes()
            if len(raw) != expected:
                raise SequenceFormatError(f"{p.name}: {len(raw)} bytes, expected {expected}")
            arr = np.frombuffer(raw, dtype=FRAME_DTYPE).reshape(meta.channels, meta.height, meta.width)
            yield arr / np.float32(meta.value_scale) if meta.value_scale != 1.0 else arr.copy()

    return meta, frames(), boxes


def load_sequence(directory) -> tuple[SequenceMeta, list[np.ndarray], list[Box]]:
    meta, frames, boxes = read_sequence(directory)
    return meta, list(frames), boxes


@dataclass
class SynthSpec:
    seed: int = 0
    channels: int = 8
    height: int = 64
    width: int = 64
    frame_count: int = 100
    target_size: tuple[float, float] = (12, 12)
    target_signature: list[float] | None = None
    background_signature: list[float] | None = None
    motion: tuple[float, float] = (0.0, 0.0)
    start: tuple[float, float] | None = None
    noise: float = 0.02
    name: str = "synthetic"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        extra = {k: v for k, v in d.items() if k not in cls.__dataclass_fields__}
        spec = cls(**known)
        spec.extra.update(extra)
        return spec

    def signatures(self) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.seed)
        bg = self.background_signature
        tg = self.target_signature
        if bg is None:
            bg = rng.uniform(0.2, 0.4, size=self.channels)
        if tg is None:
            tg = np.clip(np.asarray(bg) + rng.choice([-1.0, 1.0], self.channels)
                         * rng.uniform(0.25, 0.45, size=self.channels), 0.0, 1.0)
        return np.asarray(tg, dtype=np.float64), np.asarray(bg, dtype=np.float64)

    def validate(self) -> None:
        if self.channels < 3 or self.height < 1 or self.width < 1 or self.frame_count < 1:
            raise ValueError("synth spec needs channels >= 3 and positive sizes")
        tw, th = self.target_size
        if not (0 < tw <= self.width and 0 < th <= self.height):
            raise ValueError(f"target size {self.target_size} does not fit the canvas")
        if self.noise < 0:
            raise ValueError("noise stddev must be non-negative")
        tg, bg = self.signatures()
        if tg.shape != (self.channels,) or bg.shape != (self.channels,):
            raise ValueError("signatures must have one value per channel")
        need = math.ceil(self.channels / 2)
        separated = int((np.abs(tg - bg) >= 3 * self.noise).sum())
        if separated < need:
            raise ValueError(f"target and background differ by >= 3 sigma in only {separated} "
                             f"bands, need {need}")


def synth_positions(spec: SynthSpec) -> list[tuple[int, int]]:
    """Integer top-left corners per frame; motion stops at the canvas border."""
    tw, th = spec.target_size
    if spec.start is None:
        x0, y0 = (spec.width - tw) / 2.0, (spec.height - th) / 2.0
    else:
        x0, y0 = spec.start
    dx, dy = spec.motion
    out = []
    for k in range(spec.frame_count):
        x = min(max(x0 + k * dx, 0.0), spec.width - tw)
        y = min(max(y0 + k * dy, 0.0), spec.height - th)
        out.append((int(math.floor(x + 0.5)), int(math.floor(y + 0.5))))
    return out


def synthesize_frames(spec: SynthSpec):
    spec.validate()
    tg, bg = spec.signatures()
    rng = np.random.default_rng(spec.seed + 1)
    tw, th = (int(round(v)) for v in spec.target_size)
    frames, boxes = [], []
    for x, y in synth_positions(spec):
        frame = np.broadcast_to(bg[:, None, None], (spec.channels, spec.height, spec.width)).copy()
        frame[:, y:y + th, x:x + tw] = tg[:, None, None]
        if spec.noise > 0:
            frame += rng.normal(0.0, spec.noise, size=frame.shape)
            frame = np.clip(frame, 0.0, 1.0)
        frames.append(frame.astype(FRAME_DTYPE))
        boxes.append(Box.xywh(x, y, tw, th))
    return frames, boxes


def synthesize(spec: SynthSpec, out_dir) -> Path:
    """Render ``spec`` to a sequence directory (deterministic in ``spec.seed``)."""
    frames, boxes = synthesize_frames(spec)
    meta = SequenceMeta(spec.channels, spec.height, spec.width, spec.frame_count, 1.0, spec.name)
    return write_sequence(out_dir, meta, frames, boxes)


def seed_from_env(default: int) -> int:
    value = os.environ.get("SEED")
    return int(value) if value not in (None, "") else default


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")

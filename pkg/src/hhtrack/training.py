"""Training pairs, staged AdamW training with parameter freezing, and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .head import ciou_loss
from .model import HHTrackParams, ModelConfig, flatten_params, forward, init_model, rebuild_params
from .numerics import AdamWState, NonFiniteError, Tape, Tensor, adamw_step, precision
from .spectral import sample_false_color
from .tracker import CropSpec, TrackerConfig, crop_around, crop_resize

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# parameter groups addressed by stage configs
GROUP_PREFIXES = {
    "hbf": ("hbf.",),
    "embed": ("embed.",),
    "blocks": ("blocks.",),
    "backbone": ("embed.", "blocks."),
    "head": ("head.",),
    "all": ("",),
}


@dataclass(frozen=True)
class StageConfig:
    name: str
    epochs: int
    lr: float
    trainable: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "trainable", tuple(self.trainable))
        unknown = set(self.trainable) - set(GROUP_PREFIXES)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        if self.epochs < 0 or not self.lr > 0:
            raise ValueError("stage needs epochs >= 0 and lr > 0")

    def is_trainable(self, name: str) -> bool:
        return any(name.startswith(p) for g in self.trainable for p in GROUP_PREFIXES[g])


def default_stages() -> tuple[StageConfig, ...]:
    return (
        # stand-in for the pretrained backbone and head the schedule below assumes
        StageConfig("init", 15, 1e-3, ("all",)),
        StageConfig("stage1", 20, 4e-4, ("hbf",)),
        StageConfig("stage2", 5, 1e-4, ("hbf", "backbone")),
    )


@dataclass(frozen=True)
class TrainConfig:
    stages: tuple[StageConfig, ...] = field(default_factory=default_stages)
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    dtype: str = "float32"

    def stage(self, name: str) -> StageConfig:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def stage1(self) -> StageConfig:
        return self.stage("stage1")

    @property
    def stage2(self) -> StageConfig:
        return self.stage("stage2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "stages" in d:
            d["stages"] = tuple(StageConfig(**s) for s in d["stages"])
        return cls(**d)


@dataclass(frozen=True)
class PairConfig:
    max_gap: int = 50
    center_jitter: float = 0.5  # max shift of the search center, in units of sqrt(w*h)
    scale_jitter: float = 0.25  # log-uniform half-range of the search side


@dataclass
class TrainingPair:
    template: np.ndarray
    update: np.ndarray
    search: np.ndarray
    gt: np.ndarray  # normalized xyxy in search-crop coordinates
    frames: tuple[int, int, int]


def make_training_pair(frames, boxes, rng: np.random.Generator, model_cfg: ModelConfig,
                       tracker_cfg: TrackerConfig | None = None,
                       pair_cfg: PairConfig | None = None) -> TrainingPair:
    """Sample template <= update <= search frames within ``max_gap`` and crop them.

    The search crop center is jittered but clamped so the target box stays
    inside the crop.
    """
    tracker_cfg = tracker_cfg or TrackerConfig()
    pair_cfg = pair_cfg or PairConfig()
    n = len(frames)
    if n < 3:
        raise ValueError(f"sequence too short for training pairs: {n} frames")
    if len(boxes) != n:
        raise ValueError("frames and boxes differ in length")
    t = int(rng.integers(0, n))
    s = int(rng.integers(t, min(n - 1, t + pair_cfg.max_gap) + 1))
    u = int(rng.integers(t, s + 1))

    def template(i):
        spec = crop_around(boxes[i], tracker_cfg.template_factor, model_cfg.template_size)
        return crop_resize(frames[i], spec)

    box = boxes[s]
    _, _, w, h = box.values
    base = math.sqrt(w * h)
    jx, jy = rng.uniform(-1.0, 1.0, size=2) * pair_cfg.center_jitter * base
    scale = math.exp(rng.uniform(-pair_cfg.scale_jitter, pair_cfg.scale_jitter))
    side = tracker_cfg.search_factor * base * scale
    # keep the whole target inside the crop
    jx = float(np.clip(jx, -max(side / 2 - w / 2, 0.0), max(side / 2 - w / 2, 0.0)))
    jy = float(np.clip(jy, -max(side / 2 - h / 2, 0.0), max(side / 2 - h / 2, 0.0)))
    cx, cy = box.center
    spec = CropSpec((cx + jx, cy + jy), side, model_cfg.search_size)
    gt = np.array(spec.frame_to_crop(box.corners()))
    return TrainingPair(template(t), template(u), crop_resize(frames[s], spec), gt, (t, u, s))


def make_pairs(frames, boxes, count: int, seed: int, model_cfg: ModelConfig,
               tracker_cfg: TrackerConfig | None = None,
               pair_cfg: PairConfig | None = None) -> list[TrainingPair]:
    rng = np.random.default_rng(seed)
    return [make_training_pair(frames, boxes, rng, model_cfg, tracker_cfg, pair_cfg)
            for _ in range(count)]


@dataclass
class Batch:
    template_fc: np.ndarray
    update_fc: np.ndarray
    search_fc: np.ndarray
    search: np.ndarray
    gt: np.ndarray

    def take(self, idx) -> "Batch":
        return Batch(self.template_fc[idx], self.update_fc[idx], self.search_fc[idx],
                     self.search[idx], self.gt[idx])

    def __len__(self):
        return len(self.gt)


def stack_pairs(pairs: list[TrainingPair]) -> Batch:
    if not pairs:
        raise ValueError("training needs at least one pair")
    search = np.stack([p.search for p in pairs])
    return Batch(
        template_fc=sample_false_color(np.stack([p.template for p in pairs])),
        update_fc=sample_false_color(np.stack([p.update for p in pairs])),
        search_fc=sample_false_color(search),
        search=search,
        gt=np.clip(np.stack([p.gt for p in pairs]), 0.0, 1.0),
    )


class TrainingDiverged(RuntimeError):
    """A non-finite value appeared; ``last_good`` holds the parameters from the last clean epoch."""

    def __init__(self, message, last_good: HHTrackParams, trace: list[dict]):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


def batch_loss(params: HHTrackParams, model_cfg: ModelConfig, batch: Batch) -> Tensor:
    boxes, _, _ = forward(params, model_cfg, batch.template_fc, batch.update_fc,
                          batch.search_fc, batch.search)
    return ciou_loss(boxes, batch.gt)


def train(params: HHTrackParams, pairs, config: TrainConfig, model_cfg: ModelConfig,
          on_epoch: Callable | None = None) -> tuple[HHTrackParams, list[dict]]:
    """Run every configured stage in order with AdamW and the CIoU loss.

    Parameters outside a stage's trainable groups are never marked for
    gradients, so they cannot change during that stage. Each stage starts
    with fresh optimizer moments. Returns the final parameters and one trace
    entry per epoch.
    """
    data = pairs if isinstance(pairs, Batch) else stack_pairs(list(pairs))
    dtype = np.dtype(config.dtype).type
    rng = np.random.default_rng(config.seed)
    trace: list[dict] = []
    with precision(dtype):
        flat = {k: Tensor(v.data) for k, v in flatten_params(params).items()}
        template = params
        for stage in config.stages:
            names = [k for k in flat if stage.is_trainable(k)]
            states = {k: AdamWState.zeros_like(flat[k], lr=stage.lr, beta1=config.beta1,
                                               beta2=config.beta2, eps=config.adam_eps,
                                               weight_decay=config.weight_decay)
                      for k in names}
            for epoch in range(1, stage.epochs + 1):
                last_good = rebuild_params(template, dict(flat))
                order = rng.permutation(len(data))
                losses = []
                for start in range(0, len(data), config.batch_size):
                    batch = data.take(order[start:start + config.batch_size])
                    try:
                        step_flat = dict(flat)
                        for k in names:
                            step_flat[k] = Tensor._wrap(flat[k].data, requires_grad=True)
                        with Tape() as tape:
                            loss = batch_loss(rebuild_params(template, step_flat), model_cfg, batch)
                        tape.backward(loss)
                        for k in names:
                            flat[k], states[k] = adamw_step(step_flat[k], step_flat[k].grad, states[k])
                            flat[k].requires_grad = False
                    except NonFiniteError as err:
                        raise TrainingDiverged(
                            f"non-finite value in {stage.name} epoch {epoch}: {err}",
                            last_good, trace) from err
                    losses.append(loss.item() * len(batch))
                mean_loss = float(sum(losses) / len(data))
                trace.append({"stage": stage.name, "epoch": epoch, "lr": stage.lr, "loss": mean_loss})
                log.info("%s epoch %d/%d loss %.5f", stage.name, epoch, stage.epochs, mean_loss)
                if on_epoch is not None:
                    on_epoch(stage, epoch, rebuild_params(template, dict(flat)), mean_loss)
        return rebuild_params(template, flat), trace


# checkpoints


def params_digest(params, prefixes: tuple[str, ...] = ("",)) -> str:
    """SHA-256 over names, shapes and raw bytes of the selected parameters."""
    h = hashlib.sha256()
    for name, t in flatten_params(params).items():
        if any(name.startswith(p) for p in prefixes):
            h.update(name.encode())
            h.update(str(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def _zip_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def save_checkpoint(path, params: HHTrackParams, model_cfg: ModelConfig, extra: dict | None = None) -> dict:
    """Write a zip archive of ``.npy`` tensors plus ``manifest.json`` (shapes, digests)."""
    flat = flatten_params(params)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "model": model_cfg.to_dict(),
        "dtype": str(next(iter(flat.values())).data.dtype),
        "tensors": {k: {"shape": list(v.shape),
                        "sha256": hashlib.sha256(np.ascontiguousarray(v.data).tobytes()).hexdigest()}
                    for k, v in flat.items()},
        "digest": params_digest(params),
    }
    if extra:
        manifest.update(extra)
    with zipfile.ZipFile(path, "w") as zf:
        _zip_entry(zf, "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
        for name, t in flat.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(t.data), allow_pickle=False)
            _zip_entry(zf, f"tensors/{name}.npy", buf.getvalue())
    return manifest


def load_checkpoint(path) -> tuple[HHTrackParams, ModelConfig, dict]:
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')}")
        model_cfg = ModelConfig.from_dict(manifest["model"])
        dtype = np.dtype(manifest["dtype"]).type
        skeleton = init_model(model_cfg)
        flat = {}
        with precision(dtype):
            for name, info in manifest["tensors"].items():
                arr = np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")))
                if list(arr.shape) != info["shape"]:
                    raise ValueError(f"checkpoint tensor {name} has shape {arr.shape}")
                flat[name] = Tensor(arr)
    params = rebuild_params(skeleton, flat)
    if params_digest(params) != manifest["digest"]:
        raise ValueError("checkpoint digest mismatch")
    return params, model_cfg, manifest

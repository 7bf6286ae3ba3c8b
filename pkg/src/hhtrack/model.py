"""Full network: band fusion + shared patch embedding + hybrid attention + corner head."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    BlockParams,
    HHAConfig,
    PatchEmbedParams,
    TokenSet,
    hha_forward,
    init_block,
    init_patch_embed,
    patch_embed,
)
from .head import CornerHeadParams, corner_decode, corner_maps, init_corner_head
from .numerics import Tensor, concat, precision
from .spectral import HBFParams, hbf_forward, init_hbf

GROUPS = ("hbf", "embed", "blocks", "head")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    template_size: int = 32
    search_size: int = 64
    hha: HHAConfig = field(default_factory=HHAConfig)

    def __post_init__(self):
        p = self.hha.patch_size
        if self.channels < 3:
            raise ValueError("model needs at least 3 input bands")
        if self.template_size % p or self.search_size % p:
            raise ValueError(f"patch size {p} must divide crop sides "
                             f"{self.template_size} and {self.search_size}")

    @property
    def search_grid(self) -> tuple[int, int]:
        n = self.search_size // self.hha.patch_size
        return n, n

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        hha = HHAConfig(**d.pop("hha", {}))
        return cls(hha=hha, **d)


@dataclass
class HHTrackParams:
    hbf: HBFParams
    embed: PatchEmbedParams
    blocks: list[BlockParams]
    head: CornerHeadParams


def init_model(cfg: ModelConfig, seed: int = 0) -> HHTrackParams:
    rng = np.random.default_rng(seed)
    return HHTrackParams(
        hbf=init_hbf(cfg.channels, rng),
        embed=init_patch_embed(cfg.hha, cfg.template_size, cfg.search_size, rng),
        blocks=[init_block(cfg.hha, rng) for _ in range(cfg.hha.depth)],
        head=init_corner_head(cfg.hha.d, rng),
    )


def flatten_params(tree, prefix: str = "") -> dict[str, Tensor]:
    """Dotted-name view of every tensor in a parameter tree, in a fixed order."""
    out: dict[str, Tensor] = {}
    if isinstance(tree, Tensor):
        out[prefix] = tree
    elif dataclasses.is_dataclass(tree):
        for f in dataclasses.fields(tree):
            out.update(flatten_params(getattr(tree, f.name), f"{prefix}{f.name}."))
    elif isinstance(tree, (list, tuple)):
        for i, item in enumerate(tree):
            out.update(flatten_params(item, f"{prefix}{i}."))
    else:
        raise TypeError(f"unexpected node {type(tree).__name__} in parameter tree")
    return {k.rstrip("."): v for k, v in out.items()}


def rebuild_params(tree, flat: dict[str, Tensor], prefix: str = ""):
    """Copy of ``tree`` whose tensors are taken from ``flat`` by dotted name."""
    if isinstance(tree, Tensor):
        return flat[prefix.rstrip(".")]
    if dataclasses.is_dataclass(tree):
        return dataclasses.replace(tree, **{
            f.name: rebuild_params(getattr(tree, f.name), flat, f"{prefix}{f.name}.")
            for f in dataclasses.fields(tree)
        })
    if isinstance(tree, (list, tuple)):
        return type(tree)(rebuild_params(x, flat, f"{prefix}{i}.") for i, x in enumerate(tree))
    raise TypeError(f"unexpected node {type(tree).__name__} in parameter tree")


def cast_params(params: HHTrackParams, dtype) -> HHTrackParams:
    with precision(dtype):
        flat = {k: Tensor(v.data) for k, v in flatten_params(params).items()}
    return rebuild_params(params, flat)


def forward(params: HHTrackParams, cfg: ModelConfig, template_fc, update_fc, search_fc, search_cube):
    """Predict normalized xyxy boxes in search-crop coordinates.

    Inputs are batched ``(B, 3, Ht, Wt)`` false-color templates, a
    ``(B, 3, Hs, Ws)`` false-color search crop and the full ``(B, C, Hs, Ws)``
    search cube. Returns ``(boxes (B, 4), score_tl, score_br)``.
    """
    e = params.embed
    p = cfg.hha.patch_size
    fused_cube = hbf_forward(search_cube, params.hbf)
    t = concat([patch_embed(template_fc, e.weight, e.bias, p) + e.pos_t,
                patch_embed(update_fc, e.weight, e.bias, p) + e.pos_t], axis=-2)
    s = patch_embed(search_fc, e.weight, e.bias, p) + e.pos_s
    f = patch_embed(fused_cube, e.weight, e.bias, p) + e.pos_f
    fused = hha_forward(TokenSet(t, s, f), cfg.hha, params.blocks)
    tl, br = corner_maps(fused, params.head, cfg.search_grid)
    return corner_decode(tl, br), tl, br

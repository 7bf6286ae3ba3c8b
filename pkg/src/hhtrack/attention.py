"""Shared patch embedding and the three-branch hybrid attention stack.

Three token streams flow through every block: the template stream ``t``
(initial and updated template tokens, concatenated), the false-color search
stream ``s`` and the fused-spectrum search stream ``f``. Template queries see
only template keys; each search stream sees its own keys followed by the
template keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    Tensor,
    concat,
    elementwise_max,
    gelu,
    layer_norm,
    matmul,
    reshape,
    softmax_rows,
    transpose,
)


@dataclass(frozen=True)
class HHAConfig:
    depth: int = 4
    heads: int = 4
    d: int = 64
    ffn_ratio: int = 4
    patch_size: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


@dataclass
class TokenSet:
    t: Tensor
    s: Tensor
    f: Tensor

    def __post_init__(self):
        if self.s.shape != self.f.shape:
            raise ValueError(f"search streams differ: {self.s.shape} vs {self.f.shape}")
        if self.t.shape[-1] != self.s.shape[-1]:
            raise ValueError(f"embedding width mismatch: {self.t.shape} vs {self.s.shape}")

    @property
    def d(self) -> int:
        return self.s.shape[-1]


@dataclass
class PatchEmbedParams:
    weight: Tensor  # (3 * P * P, d), rows ordered (py, px, channel)
    bias: Tensor
    pos_t: Tensor  # (tokens per template, d), shared by both templates
    pos_s: Tensor
    pos_f: Tensor


@dataclass
class BlockParams:
    norm1_g: Tensor
    norm1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    norm2_g: Tensor
    norm2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def _uniform(rng, fan_in, shape):
    b = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-b, b, size=shape))


def init_block(cfg: HHAConfig, rng: np.random.Generator) -> BlockParams:
    d, hidden = cfg.d, cfg.d * cfg.ffn_ratio
    z = lambda n: Tensor(np.zeros(n))  # noqa: E731
    return BlockParams(
        norm1_g=Tensor(np.ones(d)), norm1_b=z(d),
        wq=_uniform(rng, d, (d, d)), bq=z(d),
        wk=_uniform(rng, d, (d, d)), bk=z(d),
        wv=_uniform(rng, d, (d, d)), bv=z(d),
        wo=_uniform(rng, d, (d, d)), bo=z(d),
        norm2_g=Tensor(np.ones(d)), norm2_b=z(d),
        w1=_uniform(rng, d, (d, hidden)), b1=z(hidden),
        w2=_uniform(rng, hidden, (hidden, d)), b2=z(d),
    )


def init_patch_embed(cfg: HHAConfig, template_size: int, search_size: int,
                     rng: np.random.Generator) -> PatchEmbedParams:
    p = cfg.patch_size
    fan_in = 3 * p * p
    n_t = (template_size // p) ** 2
    n_s = (search_size // p) ** 2
    return PatchEmbedParams(
        weight=_uniform(rng, fan_in, (fan_in, cfg.d)),
        bias=Tensor(np.zeros(cfg.d)),
        pos_t=Tensor(0.02 * rng.standard_normal((n_t, cfg.d))),
        pos_s=Tensor(0.02 * rng.standard_normal((n_s, cfg.d))),
        pos_f=Tensor(0.02 * rng.standard_normal((n_s, cfg.d))),
    )


def patch_embed(img, weight, bias, patch_size: int) -> Tensor:
    """Project non-overlapping P x P patches of a ``(..., 3, H, W)`` image to tokens.

    Tokens come out row-major over the patch grid: ``(..., (H/P)*(W/P), d)``.
    """
    x = img if isinstance(img, Tensor) else Tensor(img)
    *lead, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide image {h}x{w}")
    if weight.shape[0] != c * p * p:
        raise ValueError(f"patch weight expects {weight.shape[0] // (p * p)} channels, got {c}")
    n = len(lead)
    x = reshape(x, tuple(lead) + (c, h // p, p, w // p, p))
    # -> (..., gy, gx, py, px, c)
    x = transpose(x, tuple(range(n)) + (n + 1, n + 3, n + 2, n + 4, n))
    x = reshape(x, tuple(lead) + ((h // p) * (w // p), p * p * c))
    return matmul(x, weight) + bias


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, tuple(lead) + (n, heads, d // heads))
    k = len(lead)
    return transpose(x, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    k = len(lead)
    x = transpose(x, tuple(range(k)) + (k + 1, k, k + 2))
    return reshape(x, tuple(lead) + (n, h * dh))


def _attend(q, k, v, scale):
    w = softmax_rows(matmul(q, transpose(k, _last_two_swapped(k.ndim))) * scale)
    return matmul(w, v), w


def _last_two_swapped(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def hha_attention(tokens: TokenSet, params: BlockParams, heads: int, return_weights: bool = False):
    """Three parallel attention branches sharing one q/k/v projection set.

    Returns ``(att_t, att_s, att_f)`` after head merge and output projection;
    with ``return_weights`` a dict of the per-branch softmax weights follows.
    """
    d = tokens.d
    if params.wq.shape != (d, d):
        raise ValueError(f"projection shape {params.wq.shape} does not match d={d}")
    if d % heads:
        raise ValueError(f"d={d} is not divisible by heads={heads}")
    scale = 1.0 / math.sqrt(d // heads)

    def project(x):
        q = _split_heads(matmul(x, params.wq) + params.bq, heads)
        k = _split_heads(matmul(x, params.wk) + params.bk, heads)
        v = _split_heads(matmul(x, params.wv) + params.bv, heads)
        return q, k, v

    qt, kt, vt = project(tokens.t)
    qs, ks, vs = project(tokens.s)
    qf, kf, vf = project(tokens.f)
    ka, va = concat([ks, kt], axis=-2), concat([vs, vt], axis=-2)
    kb, vb = concat([kf, kt], axis=-2), concat([vf, vt], axis=-2)

    out_t, w_t = _attend(qt, kt, vt, scale)
    out_s, w_s = _attend(qs, ka, va, scale)
    out_f, w_f = _attend(qf, kb, vb, scale)
    outs = tuple(matmul(_merge_heads(o), params.wo) + params.bo for o in (out_t, out_s, out_f))
    if return_weights:
        return outs + ({"t": w_t, "s": w_s, "f": w_f},)
    return outs


def hha_block(tokens: TokenSet, params: BlockParams, heads: int, eps: float = 1e-5) -> TokenSet:
    """Pre-norm attention with per-stream residuals, then a pre-norm two-layer FFN."""
    normed = TokenSet(*(layer_norm(x, params.norm1_g, params.norm1_b, eps)
                        for x in (tokens.t, tokens.s, tokens.f)))
    att_t, att_s, att_f = hha_attention(normed, params, heads)
    streams = [tokens.t + att_t, tokens.s + att_s, tokens.f + att_f]
    out = []
    for x in streams:
        hidden = gelu(matmul(layer_norm(x, params.norm2_g, params.norm2_b, eps), params.w1) + params.b1)
        out.append(x + matmul(hidden, params.w2) + params.b2)
    return TokenSet(*out)


def hha_forward(tokens: TokenSet, config: HHAConfig, blocks: list[BlockParams]) -> Tensor:
    """Run the block stack and max-fuse the two search streams."""
    if len(blocks) != config.depth:
        raise ValueError(f"expected {config.depth} blocks, got {len(blocks)}")
    for params in blocks:
        tokens = hha_block(tokens, params, config.heads)
    return elementwise_max(tokens.s, tokens.f)

"""Hyperspectral inputs: equal-interval false-color sampling and band fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, depthwise_conv2d, gelu, layer_norm, matmul, transpose


@dataclass(frozen=True)
class HyperCube:
    """One hyperspectral frame, band-major ``(C, H, W)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"HyperCube needs (C, H, W) data, got shape {arr.shape}")
        if arr.shape[0] < 3:
            raise ValueError(f"HyperCube needs at least 3 bands, got {arr.shape[0]}")
        if not np.isfinite(arr).all():
            raise ValueError("HyperCube holds non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def false_color_indices(channels: int) -> tuple[int, int, int]:
    if channels < 3:
        raise ValueError(f"false-color sampling needs >= 3 bands, got {channels}")
    # round half up: k*(C-1)/2 has at most a .5 fraction
    return tuple(int(math.floor(k * (channels - 1) / 2 + 0.5)) for k in range(3))


def sample_false_color(cube) -> np.ndarray:
    """Pick three equally spaced bands (first, middle, last) from a ``(..., C, H, W)`` cube."""
    data = cube.data if isinstance(cube, (HyperCube, Tensor)) else np.asarray(cube)
    idx = list(false_color_indices(data.shape[-3]))
    return data[..., idx, :, :]


@dataclass
class HBFParams:
    """Depthwise 3x3 stage followed by three pointwise stages, each with its own norm.

    ``pw_weights[i]`` has shape ``(C_in, C_out)``; ``norm_gammas``/``norm_betas``
    hold one pair per stage (four in total).
    """

    dw_weight: Tensor
    dw_bias: Tensor
    pw_weights: list[Tensor]
    pw_biases: list[Tensor]
    norm_gammas: list[Tensor]
    norm_betas: list[Tensor]

    @property
    def channels(self) -> int:
        return self.dw_weight.shape[0]

    @property
    def plan(self) -> tuple[int, ...]:
        return (self.channels,) + tuple(w.shape[1] for w in self.pw_weights)


def channel_plan(channels: int) -> tuple[int, int, int, int]:
    return channels, channels, max(3, math.ceil(channels / 2)), 3


def init_hbf(channels: int, rng: np.random.Generator) -> HBFParams:
    plan = channel_plan(channels)
    bound = 1.0 / math.sqrt(9)
    dw_w = Tensor(rng.uniform(-bound, bound, size=(channels, 3, 3)))
    pw_w, pw_b = [], []
    for cin, cout in zip(plan[:-1], plan[1:]):
        b = 1.0 / math.sqrt(cin)
        pw_w.append(Tensor(rng.uniform(-b, b, size=(cin, cout))))
        pw_b.append(Tensor(np.zeros(cout)))
    widths = (channels,) + plan[1:]
    return HBFParams(
        dw_weight=dw_w,
        dw_bias=Tensor(np.zeros(channels)),
        pw_weights=pw_w,
        pw_biases=pw_b,
        norm_gammas=[Tensor(np.ones(c)) for c in widths],
        norm_betas=[Tensor(np.zeros(c)) for c in widths],
    )


def hbf_forward(cube, params: HBFParams, eps: float = 1e-5) -> Tensor:
    """Fuse a ``(..., C, H, W)`` cube into a ``(..., 3, H, W)`` feature.

    Every stage is conv -> layer norm over channels at each pixel -> GELU.
    """
    x = cube if isinstance(cube, Tensor) else Tensor(cube.data if isinstance(cube, HyperCube) else cube)
    if x.ndim < 3:
        raise ValueError(f"hbf_forward needs (..., C, H, W), got {x.shape}")
    if x.shape[-3] != params.channels:
        raise ValueError(f"cube has {x.shape[-3]} bands, HBF expects {params.channels}")
    lead = tuple(range(x.ndim - 3))
    n = len(lead)
    x = transpose(x, lead + (n + 1, n + 2, n))  # channels last
    x = depthwise_conv2d(x, params.dw_weight, params.dw_bias)
    x = gelu(layer_norm(x, params.norm_gammas[0], params.norm_betas[0], eps))
    for i, (w, b) in enumerate(zip(params.pw_weights, params.pw_biases)):
        x = matmul(x, w) + b
        x = gelu(layer_norm(x, params.norm_gammas[i + 1], params.norm_betas[i + 1], eps))
    return transpose(x, lead + (n + 2, n, n + 1))

"""Modified U-net assembled from right / down / up / last arrow blocks.

Every convolution is zero-padded so that spatial size is preserved, and is
followed by batch normalization split into two layers: a normalizing layer
(conv + bias, then BN statistics) and a scaling layer (diagonal gamma, bias
beta, ReLU). That split keeps gamma as a layer weight, so the nonnegativity
constraints that make the network convex are plain weight constraints.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .core import PadSpec
from .network import (
    ConstraintPlan,
    LayerSpec,
    NetworkSpec,
    NotFinalizedError,
    ParamSet,
    Regularizer,
    convexity_plan,
    init_params,
    make_uniformly_convex,
    project_convex,
)

UP_PAD = PadSpec(0, 1, 0, 1)


@dataclass(frozen=True)
class UnetConfig:
    height: int = 64
    width: int = 64
    levels: int = 2
    channels: int = 8
    multiplier: int = 2
    bn_eps: float = 1e-5
    a: float = 1e-3
    p: float = 2.0
    q: float = 2.0

    def __post_init__(self):
        if self.levels < 1 or self.channels < 1 or self.multiplier < 1:
            raise ValueError("levels, channels and multiplier must be >= 1")
        step = 2**self.levels
        if self.height % step or self.width % step:
            raise ValueError(f"image size {self.height}x{self.width} is not divisible by 2^{self.levels}")

    def width_at(self, level: int) -> int:
        return self.channels * self.multiplier**level


def right_arrow(name: str, in_ch: int, out_ch: int, concat_from: Optional[int] = None, eps: float = 1e-5) -> List[LayerSpec]:
    """3x3 same-size convolution, batch normalization, ReLU (two layers)."""
    return [
        LayerSpec(f"{name}_conv", "conv", "batchnorm", (3, 3, in_ch, out_ch), PadSpec.same(1),
                  bias="channel", concat_from=concat_from, bn_eps=eps),
        LayerSpec(f"{name}_bn", "diagonal", "relu", (out_ch,), bias="channel"),
    ]


def down_arrow(name: str) -> LayerSpec:
    return LayerSpec(name, "identity", "maxpool")


def up_arrow(name: str, in_ch: int, out_ch: int, eps: float = 1e-5) -> List[LayerSpec]:
    """Nearest-neighbour 2x enlargement, 2x2 convolution padded back to size, BN, ReLU."""
    return [
        LayerSpec(f"{name}_conv", "conv", "batchnorm", (2, 2, in_ch, out_ch), UP_PAD,
                  upsample=True, bias="channel", bn_eps=eps),
        LayerSpec(f"{name}_bn", "diagonal", "relu", (out_ch,), bias="channel"),
    ]


def last_arrow(name: str, in_ch: int) -> LayerSpec:
    """1x1 convolution to a single channel with one scalar bias."""
    return LayerSpec(name, "conv", "identity", (1, 1, in_ch, 1), bias="scalar")


def unet_spec(cfg: UnetConfig) -> NetworkSpec:
    layers: List[LayerSpec] = []
    skips: List[Tuple[int, int]] = []  # (z index, channels) per contracting level
    ch = 1
    for lvl in range(cfg.levels):
        out = cfg.width_at(lvl)
        layers += right_arrow(f"enc{lvl}a", ch, out, eps=cfg.bn_eps)
        layers += right_arrow(f"enc{lvl}b", out, out, eps=cfg.bn_eps)
        skips.append((len(layers) + 1, out))
        layers.append(down_arrow(f"down{lvl}"))
        ch = out
    bottom = cfg.width_at(cfg.levels)
    layers += right_arrow("mid_a", ch, bottom, eps=cfg.bn_eps)
    layers += right_arrow("mid_b", bottom, bottom, eps=cfg.bn_eps)
    ch = bottom
    for lvl in reversed(range(cfg.levels)):
        out = cfg.width_at(lvl)
        layers += up_arrow(f"up{lvl}", ch, out, eps=cfg.bn_eps)
        skip_z, skip_ch = skips[lvl]
        layers += right_arrow(f"dec{lvl}a", skip_ch + out, out, concat_from=skip_z, eps=cfg.bn_eps)
        layers += right_arrow(f"dec{lvl}b", out, out, eps=cfg.bn_eps)
        ch = out
    layers.append(last_arrow("last", ch))
    return NetworkSpec(tuple(layers), (cfg.height, cfg.width, 1))


def build_unet(cfg: UnetConfig, seed: int = 0) -> Tuple[NetworkSpec, ParamSet]:
    net = unet_spec(cfg)
    return net, init_params(net, np.random.default_rng(seed))


def convex_plan(net: NetworkSpec) -> ConstraintPlan:
    """Every kernel but the first, every gamma, and the last (scalar) bias."""
    return convexity_plan(net, extras=[f"{net.layers[-1].name}.b"])


def build_convex_unet(cfg: UnetConfig, seed: int = 0) -> Tuple[NetworkSpec, ParamSet, ConstraintPlan]:
    net, params = build_unet(cfg, seed)
    plan = convex_plan(net)
    return net, project_convex(params, plan), plan


def block_counts(cfg: UnetConfig) -> dict:
    """Arrow and layer counts: 6d + 3 blocks, 11d + 5 layers for d levels."""
    d = cfg.levels
    return {
        "right": 4 * d + 2,
        "down": d,
        "up": d,
        "last": 1,
        "blocks": 6 * d + 3,
        "depth": 11 * d + 5,
    }


def build_regularizer(net: NetworkSpec, params: ParamSet, a: float = 1e-3, p: float = 2.0, q: float = 2.0) -> Regularizer:
    missing = [layer.name for layer in net.batchnorm_layers() if f"{layer.name}.mean" not in params]
    if missing:
        raise NotFinalizedError(f"batch-norm statistics not finalized for {missing}")
    return make_uniformly_convex(net, params, a, p, q)

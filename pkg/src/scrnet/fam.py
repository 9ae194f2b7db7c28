"""Feature Aggregation Module: two mirrored conv/cross-attention branches and their fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_ops import Conv2d, ConvMixer, ConvSpec, CrossAttention, Linear, global_avg_pool, shift
from .tensor import Parameter, ShapeError, Tensor, concat, softmax, split


@dataclass
class FeatureInitialize:
    conv: Conv2d
    mixer: ConvMixer

    @classmethod
    def build(cls, store, name, channels, rng):
        conv = Conv2d.build(store, f"{name}.conv", ConvSpec(channels, channels), rng)
        return cls(conv, ConvMixer.build(store, f"{name}.mixer", channels, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return feature_initialize(x, self)


def feature_initialize(x: Tensor, fi: FeatureInitialize) -> Tensor:
    return fi.mixer(fi.conv(x))


@dataclass
class CCAPM:
    fi1: FeatureInitialize
    fi2: FeatureInitialize
    fi3: FeatureInitialize
    fc: Linear
    attn: CrossAttention
    w_conv: Parameter
    w_cross: Parameter

    @classmethod
    def build(cls, store, name, channels, rng):
        return cls(
            FeatureInitialize.build(store, f"{name}.fi1", channels, rng),
            FeatureInitialize.build(store, f"{name}.fi2", channels, rng),
            FeatureInitialize.build(store, f"{name}.fi3", channels, rng),
            Linear.build(store, f"{name}.fc", 3 * channels, channels, rng),
            CrossAttention.build(store, f"{name}.attn", channels, rng),
            store.add(f"{name}.w_conv", np.ones(1)),
            store.add(f"{name}.w_cross", np.ones(1)),
        )

    def __call__(self, feature1, feature2):
        return ccapm_forward(feature1, feature2, self)


def ccapm_forward(feature1: Tensor, feature2: Tensor, p: CCAPM, return_paths: bool = False):
    """Blend a concat->FC->shift path with a cross-attention path.

    ``feature1`` supplies the queries; ``feature2`` is initialized twice to
    supply keys and values.  With ``return_paths`` the unweighted
    ``(y_conv, y_cross)`` pair is returned as well.
    """
    if feature1.shape != feature2.shape:
        raise ShapeError(f"ccapm inputs disagree: {feature1.shape} vs {feature2.shape}")
    a = p.fi1(feature1)
    b = p.fi2(feature2)
    d = p.fi3(feature2)
    y = concat([a, b, d], axis=1)
    y_conv = shift(p.fc(y.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2))
    y_cross = p.attn(a, b, d)
    out = p.w_conv * y_conv + p.w_cross * y_cross
    if return_paths:
        return out, y_conv, y_cross
    return out


def fusion_block(y1: Tensor, y2: Tensor, return_weights: bool = False):
    """Blend two maps with per-channel weights from a softmax over their global means."""
    if y1.shape != y2.shape:
        raise ShapeError(f"fusion_block inputs disagree: {y1.shape} vs {y2.shape}")
    n, c = y1.shape[:2]
    g1 = global_avg_pool(y1).reshape(n, 1, c)
    g2 = global_avg_pool(y2).reshape(n, 1, c)
    weights = softmax(concat([g1, g2], axis=1), axis=1)
    wg1, wg2 = split(weights, 1, [1, 1])
    out = wg1.reshape(n, c, 1, 1) * y1 + wg2.reshape(n, c, 1, 1) * y2
    if return_weights:
        return out, wg1.data.reshape(n, c), wg2.data.reshape(n, c)
    return out


@dataclass
class FAM:
    top: CCAPM
    bottom: CCAPM

    @classmethod
    def build(cls, store, name, channels, rng):
        return cls(CCAPM.build(store, f"{name}.top", channels, rng), CCAPM.build(store, f"{name}.bottom", channels, rng))

    def __call__(self, x_h, x_l):
        return fam_forward(x_h, x_l, self)


def fam_forward(x_h: Tensor, x_l: Tensor, params: FAM) -> Tensor:
    if x_h.shape != x_l.shape:
        raise ShapeError(f"fam inputs disagree: {x_h.shape} vs {x_l.shape}")
    y1 = ccapm_forward(x_h, x_l, params.top)
    y2 = ccapm_forward(x_l, x_h, params.bottom)
    return fusion_block(y1, y2)

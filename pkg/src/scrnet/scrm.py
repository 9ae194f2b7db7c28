"""Spatial-Channel Regulation Module: spatial gate, channel refinement, aggregation."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .fam import FAM, fam_forward
from .nn_ops import Conv2d, ConvSpec, GroupNorm
from .tensor import ShapeError, Tensor, concat, note_branch, sigmoid, softmax, split

GATE_THRESHOLD = 0.5


@dataclass
class SpatialGate:
    gn: GroupNorm
    threshold: float = GATE_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"gate threshold must lie in (0, 1), got {self.threshold}")

    @classmethod
    def build(cls, store, name, channels: int, gn_groups: int | None = None):
        groups = gn_groups if gn_groups is not None else min(16, channels)
        return cls(GroupNorm.build(store, f"{name}.gn", channels, groups))

    def __call__(self, x: Tensor) -> Tensor:
        return spatial_gate(x, self)


def spatial_gate(x: Tensor, p: SpatialGate, return_masks: bool = False):
    """Split ``x`` into informative / non-informative parts and cross-recombine them.

    The group-normed map weighted by its own channel softmax is squashed by a
    sigmoid.  Positions at or above the threshold get a hard weight of 1,
    the rest keep their sigmoid value.  The hard mask is a constant for
    differentiation.  With ``return_masks`` the two weight arrays come back
    alongside the output.
    """
    n, c, h, w = x.shape
    if c % 2:
        raise ShapeError(f"spatial_gate needs an even channel count, got {c}")
    g = p.gn(x)
    w_info = g * softmax(g, axis=1)
    s = sigmoid(w_info)
    keep = s.data >= p.threshold
    note_branch(keep)
    w1 = keep.astype(np.float64)
    x_w1 = x * Tensor(w1)
    w2 = s * Tensor(1.0 - w1)
    x_w2 = x * w2
    out = reconstruct(x_w1, x_w2)
    if return_masks:
        return out, w1, w2.data
    return out


def reconstruct(x_w1: Tensor, x_w2: Tensor) -> Tensor:
    """Cross-recombine channel halves: [w1_a + w2_b, w1_b + w2_a]."""
    c = x_w1.shape[1]
    a1, a2 = split(x_w1, 1, [c // 2, c // 2])
    b1, b2 = split(x_w2, 1, [c // 2, c // 2])
    return concat([a1 + b2, a2 + b1], axis=1)


@dataclass(frozen=True)
class CRChannels:
    upper: int
    lower: int
    squeezed_upper: int
    squeezed_lower: int
    low_extra: int


def cr_channels(channels: int, split_ratio: float = 0.5, squeeze_ratio: int = 2, groups: int = 2) -> CRChannels:
    """Channel bookkeeping for channel refinement; raises on indivisible configurations."""
    ratio = Fraction(split_ratio).limit_denominator(1 << 16)
    upper = channels * ratio
    if upper.denominator != 1 or not 0 < upper < channels:
        raise ValueError(f"split ratio {split_ratio} gives a non-integer or empty part of {channels} channels")
    upper = int(upper)
    lower = channels - upper
    if upper % squeeze_ratio or lower % squeeze_ratio:
        raise ValueError(f"squeeze ratio {squeeze_ratio} must divide both parts ({upper}, {lower})")
    c1, c2 = upper // squeeze_ratio, lower // squeeze_ratio
    if c1 % groups or channels % groups:
        raise ValueError(f"GWC groups {groups} must divide {c1} squeezed and {channels} output channels")
    if channels - c2 <= 0:
        raise ValueError(f"no channels left for the low-path PWC ({channels} - {c2})")
    return CRChannels(upper, lower, c1, c2, channels - c2)


@dataclass
class ChannelRefinement:
    channels: int
    split_ratio: float
    squeeze_ratio: int
    squeeze1: Conv2d
    squeeze2: Conv2d
    gwc: Conv2d
    pwc_high: Conv2d
    pwc_low: Conv2d

    @classmethod
    def build(cls, store, name, channels, rng, split_ratio=0.5, squeeze_ratio=2, groups=2):
        cc = cr_channels(channels, split_ratio, squeeze_ratio, groups)
        return cls(
            channels,
            split_ratio,
            squeeze_ratio,
            Conv2d.build(store, f"{name}.squeeze1", ConvSpec(cc.upper, cc.squeezed_upper), rng, bias=False),
            Conv2d.build(store, f"{name}.squeeze2", ConvSpec(cc.lower, cc.squeezed_lower), rng, bias=False),
            Conv2d.build(
                store, f"{name}.gwc", ConvSpec(cc.squeezed_upper, channels, 3, 1, 1, groups=groups), rng, bias=False
            ),
            Conv2d.build(store, f"{name}.pwc_high", ConvSpec(cc.squeezed_upper, channels), rng, bias=False),
            Conv2d.build(store, f"{name}.pwc_low", ConvSpec(cc.squeezed_lower, cc.low_extra), rng, bias=False),
        )

    def __call__(self, x: Tensor):
        return channel_refinement(x, self)


def channel_refinement(x_out: Tensor, p: ChannelRefinement) -> tuple[Tensor, Tensor]:
    """Return the (high, low) streams, both with the input's channel count."""
    c = x_out.shape[1]
    if c != p.channels:
        raise ShapeError(f"channel_refinement built for {p.channels} channels, got {c}")
    upper = p.squeeze1.spec.in_channels
    x_up, x_low = split(x_out, 1, [upper, c - upper])
    x_c1 = p.squeeze1(x_up)
    x_c2 = p.squeeze2(x_low)
    x_h = p.gwc(x_c1) + p.pwc_high(x_c1)
    x_l = concat([x_c2, p.pwc_low(x_c2)], axis=1)
    return x_h, x_l


@dataclass
class SCRM:
    sg: SpatialGate
    cr: ChannelRefinement
    fam: FAM | None = None

    @classmethod
    def build(cls, store, name, channels, rng, split_ratio=0.5, squeeze_ratio=2, groups=2,
              gn_groups=None, ablate_fam=False):
        sg = SpatialGate.build(store, f"{name}.sg", channels, gn_groups)
        cr = ChannelRefinement.build(store, f"{name}.cr", channels, rng, split_ratio, squeeze_ratio, groups)
        fam = None if ablate_fam else FAM.build(store, f"{name}.fam", channels, rng)
        return cls(sg, cr, fam)

    @property
    def ablate_fam(self) -> bool:
        return self.fam is None

    def __call__(self, x: Tensor) -> Tensor:
        return scrm_forward(x, self.sg, self.cr, self.fam, ablate_fam=self.fam is None)


def scrm_forward(x: Tensor, sg: SpatialGate, cr: ChannelRefinement, fam: FAM | None = None,
                 ablate_fam: bool = False) -> Tensor:
    """Gate, refine, then aggregate; the ablated variant sums the two streams instead."""
    x_h, x_l = channel_refinement(spatial_gate(x, sg), cr)
    if ablate_fam:
        return x_h + x_l
    if fam is None:
        raise ValueError("scrm_forward needs a FAM unless ablate_fam is set")
    return fam_forward(x_h, x_l, fam)

"""Neural building blocks on top of :mod:`scrnet.tensor`.

Each operation is a single recorded graph node with a hand-written backward
rule, so memory stays proportional to the activations rather than to the
number of primitive arithmetic steps.  Thin dataclasses (``Conv2d``,
``BatchNorm2d``, ...) bundle parameters with their operation and know how to
register themselves in a :class:`ParameterStore`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import ndtr

from .tensor import Parameter, ShapeError, Tensor, note_branch, record, reduce

EPS = 1e-5
BN_MOMENTUM = 0.1
SHIFT_OFFSETS = (-2, -1, 0, 1, 2)


# ---------------------------------------------------------------------------
# parameter bookkeeping
# ---------------------------------------------------------------------------


def on_f32_grid(a) -> np.ndarray:
    """Round to the nearest float32 value, kept as float64.

    Stored state lives on this grid so a float32 checkpoint holds it exactly;
    arithmetic stays in float64.
    """
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


class ParameterStore:
    """Ordered name -> Parameter map plus non-trainable buffers (BN running stats).

    Values are snapped to the float32 grid on registration.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, data) -> Parameter:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(on_f32_grid(data), name=name)
        self._params[name] = p
        return p

    def add_buffer(self, name: str, data) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = on_f32_grid(data).copy()
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def state(self) -> dict[str, np.ndarray]:
        """Every stored array, parameters first, in registration order."""
        out = {k: p.data for k, p in self._params.items()}
        out.update(self._buffers)
        return out

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def count(self) -> int:
        return sum(p.size for p in self._params.values())


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # ReLU gain sqrt(2): bound = gain * sqrt(3 / fan_in)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    a, b = v
    return (int(a), int(b))


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    groups: int = 1
    output_padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        for name in ("kernel", "stride", "padding", "output_padding"):
            object.__setattr__(self, name, _pair(getattr(self, name)))
        if self.in_channels <= 0 or self.out_channels <= 0 or self.groups <= 0:
            raise ValueError(f"channel and group counts must be positive: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )
        if min(self.kernel) < 1 or min(self.stride) < 1 or min(self.padding) < 0:
            raise ValueError(f"invalid convolution geometry: {self}")

    @property
    def kind(self) -> str:
        if self.groups == self.in_channels == self.out_channels and self.groups > 1:
            return "depthwise"
        if self.kernel == (1, 1) and self.groups == 1:
            return "pointwise"
        if self.groups > 1:
            return "groupwise"
        return "standard"

    def weight_shape(self, transpose: bool = False) -> tuple[int, int, int, int]:
        if transpose:
            return (self.in_channels, self.out_channels // self.groups, *self.kernel)
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def out_extent(self, h: int, w: int, transpose: bool = False) -> tuple[int, int]:
        (kh, kw), (sh, sw), (ph, pw) = self.kernel, self.stride, self.padding
        if transpose:
            oh, ow = self.output_padding
            return ((h - 1) * sh - 2 * ph + kh + oh, (w - 1) * sw - 2 * pw + kw + ow)
        return ((h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)


def _windows(xg, kh, kw, sh, sw, ho, wo):
    # xg: (N, G, Cg, Hp, Wp) -> (N, G, Cg, kh, kw, Ho, Wo) view
    v = sliding_window_view(xg, (kh, kw), axis=(3, 4))
    v = v[:, :, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
    return v.transpose(0, 1, 2, 5, 6, 3, 4)


def _cols(xg, kh, kw, sh, sw, ho, wo):
    n, g, cg = xg.shape[:3]
    if (kh, kw, sh, sw) == (1, 1, 1, 1):
        return xg.reshape(n, g, cg, ho * wo)
    return _windows(xg, kh, kw, sh, sw, ho, wo).reshape(n, g, cg * kh * kw, ho * wo)


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_fwd(x, w, stride, padding, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    (sh, sw), (ph, pw), g = stride, padding, groups
    ho, wo = (h + 2 * ph - kh) // sh + 1, (wd + 2 * pw - kw) // sw + 1
    xp = _pad(x, ph, pw)
    xg = xp.reshape(n, g, cg, *xp.shape[2:])
    og = o // g
    if cg == 1:
        wg = w.reshape(g, og, kh, kw)
        out = np.zeros((n, g, og, ho, wo))
        for a in range(kh):
            for b in range(kw):
                patch = xg[:, :, :, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw]
                out += wg[None, :, :, a, b, None, None] * patch
        return out.reshape(n, o, ho, wo)
    cols = _cols(xg, kh, kw, sh, sw, ho, wo)
    out = np.matmul(w.reshape(g, og, cg * kh * kw), cols)
    return out.reshape(n, o, ho, wo)


def _conv_bwd_data(dy, w, x_shape, stride, padding, groups):
    n, c, h, wd = x_shape
    o, cg, kh, kw = w.shape
    (sh, sw), (ph, pw), g = stride, padding, groups
    ho, wo = dy.shape[2:]
    og = o // g
    dxp = np.zeros((n, g, cg, h + 2 * ph, wd + 2 * pw))
    dyg = dy.reshape(n, g, og, ho, wo)
    if cg == 1:
        wg = w.reshape(g, og, kh, kw)
        for a in range(kh):
            for b in range(kw):
                contrib = (dyg * wg[None, :, :, a, b, None, None]).sum(axis=2, keepdims=True)
                dxp[:, :, :, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw] += contrib
    else:
        wt = w.reshape(g, og, cg * kh * kw).transpose(0, 2, 1)
        dcols = np.matmul(wt, dyg.reshape(n, g, og, ho * wo)).reshape(n, g, cg, kh, kw, ho, wo)
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, :, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw] += dcols[
                    :, :, :, a, b
                ]
    dx = dxp[:, :, :, ph : ph + h, pw : pw + wd]
    return np.ascontiguousarray(dx).reshape(n, c, h, wd)


def _conv_bwd_weight(x, dy, w_shape, stride, padding, groups):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w_shape
    (sh, sw), (ph, pw), g = stride, padding, groups
    ho, wo = dy.shape[2:]
    og = o // g
    xp = _pad(x, ph, pw)
    xg = xp.reshape(n, g, cg, *xp.shape[2:])
    dyg = dy.reshape(n, g, og, ho, wo)
    if cg == 1:
        dw = np.empty((g, og, kh, kw))
        for a in range(kh):
            for b in range(kw):
                patch = xg[:, :, :, a : a + sh * (ho - 1) + 1 : sh, b : b + sw * (wo - 1) + 1 : sw]
                dw[:, :, a, b] = (dyg * patch).sum(axis=(0, 3, 4))
        return dw.reshape(w_shape)
    cols = _cols(xg, kh, kw, sh, sw, ho, wo)
    dw = np.matmul(dyg.reshape(n, g, og, ho * wo), cols.transpose(0, 1, 3, 2)).sum(axis=0)
    return dw.reshape(w_shape)


def conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv2d expects (N,{spec.in_channels},H,W) input, got {x.shape}")
    if weight.shape != spec.weight_shape():
        raise ShapeError(f"conv2d weight shape {weight.shape} != {spec.weight_shape()}")
    ho, wo = spec.out_extent(*x.shape[2:])
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output extent ({ho},{wo}) is not positive for input {x.shape}")
    args = (spec.stride, spec.padding, spec.groups)
    xd, wd_ = x.data, weight.data
    y = _conv_fwd(xd, wd_, *args)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def vjp(g):
        gx = _conv_bwd_data(g, wd_, xd.shape, *args) if x.requires_grad else None
        gw = _conv_bwd_weight(xd, g, wd_.shape, *args) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(y, parents, vjp, "conv2d")


def transpose_conv2d(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Adjoint of :func:`conv2d` for the same geometry; weight is (in, out/groups, kh, kw)."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeError(f"transpose_conv2d expects (N,{spec.in_channels},H,W) input, got {x.shape}")
    if weight.shape != spec.weight_shape(transpose=True):
        raise ShapeError(f"transpose_conv2d weight {weight.shape} != {spec.weight_shape(True)}")
    if spec.output_padding[0] >= spec.stride[0] or spec.output_padding[1] >= spec.stride[1]:
        raise ShapeError(f"output_padding {spec.output_padding} must be smaller than stride {spec.stride}")
    ho, wo = spec.out_extent(*x.shape[2:], transpose=True)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"transpose_conv2d output extent ({ho},{wo}) is not positive")
    n = x.shape[0]
    out_shape = (n, spec.out_channels, ho, wo)
    args = (spec.stride, spec.padding, spec.groups)
    xd, wd_ = x.data, weight.data
    y = _conv_bwd_data(xd, wd_, out_shape, *args)
    if bias is not None:
        y += bias.data[None, :, None, None]

    def vjp(g):
        gx = _conv_fwd(g, wd_, *args) if x.requires_grad else None
        gw = _conv_bwd_weight(g, xd, wd_.shape, *args) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(y, parents, vjp, "transpose_conv2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the trailing axis: ``x @ weight.T + bias``."""
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear expects trailing extent {cin}, got {x.shape}")
    xd, wd_ = x.data, weight.data
    y = xd @ wd_.T
    if bias is not None:
        y = y + bias.data

    def vjp(g):
        gx = g @ wd_ if x.requires_grad else None
        gw = g.reshape(-1, cout).T @ xd.reshape(-1, cin) if weight.requires_grad else None
        gb = g.reshape(-1, cout).sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(y, parents, vjp, "linear")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = EPS
    groups: int = 1
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None
    momentum: float = BN_MOMENTUM

    def __post_init__(self):
        if self.gamma.shape != self.beta.shape or self.gamma.ndim != 1:
            raise ShapeError("gamma and beta must be equal-length vectors")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.gamma.shape[0] % self.groups:
            raise ValueError(f"groups={self.groups} must divide channels={self.gamma.shape[0]}")


def group_norm(x: Tensor, p: NormParams) -> Tensor:
    n, c, h, w = x.shape
    if c != p.gamma.shape[0]:
        raise ShapeError(f"group_norm: {c} channels vs {p.gamma.shape[0]} affine entries")
    if c % p.groups:
        raise ShapeError(f"group_norm: {p.groups} groups do not divide {c} channels")
    g = p.groups
    xg = x.data.reshape(n, g, -1)
    m = xg.shape[2]
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    gam, bet = p.gamma.data, p.beta.data
    y = xhat * gam[None, :, None, None] + bet[None, :, None, None]

    def vjp(gy):
        gx = None
        if x.requires_grad:
            dxh = (gy * gam[None, :, None, None]).reshape(n, g, m)
            xh = xhat.reshape(n, g, m)
            gx = (inv / m) * (m * dxh - dxh.sum(axis=2, keepdims=True) - xh * (dxh * xh).sum(axis=2, keepdims=True))
            gx = gx.reshape(n, c, h, w)
        ggam = (gy * xhat).sum(axis=(0, 2, 3)) if p.gamma.requires_grad else None
        gbet = gy.sum(axis=(0, 2, 3)) if p.beta.requires_grad else None
        return gx, ggam, gbet

    return record(y, (x, p.gamma, p.beta), vjp, "group_norm")


def batch_norm(x: Tensor, p: NormParams, training: bool = True) -> Tensor:
    n, c, h, w = x.shape
    if c != p.gamma.shape[0]:
        raise ShapeError(f"batch_norm: {c} channels vs {p.gamma.shape[0]} affine entries")
    gam, bet = p.gamma.data[None, :, None, None], p.beta.data[None, :, None, None]
    if training:
        m = n * h * w
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        if p.running_mean is not None:
            p.running_mean *= 1.0 - p.momentum
            p.running_mean += p.momentum * mu.reshape(-1)
            p.running_var *= 1.0 - p.momentum
            p.running_var += p.momentum * var.reshape(-1)
            p.running_mean[...] = on_f32_grid(p.running_mean)
            p.running_var[...] = on_f32_grid(p.running_var)
    else:
        m = None
        mu = p.running_mean.reshape(1, c, 1, 1)
        var = p.running_var.reshape(1, c, 1, 1)
        xc = x.data - mu
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    y = xhat * gam + bet

    def vjp(gy):
        gx = None
        if x.requires_grad:
            dxh = gy * gam
            if training:
                gx = (inv / m) * (
                    m * dxh
                    - dxh.sum(axis=(0, 2, 3), keepdims=True)
                    - xhat * (dxh * xhat).sum(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = dxh * inv
        ggam = (gy * xhat).sum(axis=(0, 2, 3)) if p.gamma.requires_grad else None
        gbet = gy.sum(axis=(0, 2, 3)) if p.beta.requires_grad else None
        return gx, ggam, gbet

    return record(y, (x, p.gamma, p.beta), vjp, "batch_norm")


# ---------------------------------------------------------------------------
# activations, pooling, shift
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = ndtr(xd)
    y = xd * cdf

    def vjp(g):
        pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + xd * pdf),)

    return record(y, (x,), vjp, "gelu")


def max_pool2d(x: Tensor, window=(2, 2), stride=(2, 2)) -> Tensor:
    kh, kw = _pair(window)
    if _pair(stride) != (kh, kw):
        raise ShapeError("max_pool2d supports non-overlapping windows only (stride == window)")
    n, c, h, w = x.shape
    if h % kh or w % kw:
        raise ShapeError(f"max_pool2d: extents ({h},{w}) not divisible by window ({kh},{kw})")
    ho, wo = h // kh, w // kw
    blocks = x.data.reshape(n, c, ho, kh, wo, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kh * kw)
    arg = blocks.argmax(axis=-1)
    note_branch(arg.astype(np.int64))
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros((n, c, ho, wo, kh * kw))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(y, (x,), vjp, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C): mean over every spatial position."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects rank 4, got {x.shape}")
    return reduce(x, "mean", (2, 3))


def shift_groups(c: int) -> list[int]:
    base = c // len(SHIFT_OFFSETS)
    return [base] * (len(SHIFT_OFFSETS) - 1) + [c - base * (len(SHIFT_OFFSETS) - 1)]


def _translate_w(a: np.ndarray, offset: int) -> np.ndarray:
    out = np.zeros_like(a)
    w = a.shape[-1]
    if abs(offset) >= w:
        return out
    if offset > 0:
        out[..., offset:] = a[..., : w - offset]
    elif offset < 0:
        out[..., : w + offset] = a[..., -offset:]
    else:
        out[...] = a
    return out


def shift(x: Tensor) -> Tensor:
    """Translate five contiguous channel groups along width by -2..+2, zero filled."""
    n, c, h, w = x.shape
    if c < len(SHIFT_OFFSETS):
        raise ShapeError(f"shift needs at least {len(SHIFT_OFFSETS)} channels, got {c}")
    bounds = np.cumsum([0] + shift_groups(c))

    def move(a, sign):
        out = np.empty_like(a)
        for off, lo, hi in zip(SHIFT_OFFSETS, bounds[:-1], bounds[1:]):
            out[:, lo:hi] = _translate_w(a[:, lo:hi], sign * off)
        return out

    return record(move(x.data, 1), (x,), lambda g: (move(g, -1),), "shift")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

_BLOCK_ELEMS = 1 << 18


def _block_rows(t: int) -> int:
    return max(1, min(t, _BLOCK_ELEMS // max(t, 1)))


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> Tensor:
    """softmax(q k^T * scale) v over (N, T, C) token tensors.

    Scores are formed one block of query rows at a time and recomputed in the
    backward pass, so the (T, T) matrix never exists in full.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"attention expects equal (N,T,C) operands, got {q.shape}, {k.shape}, {v.shape}")
    n, t, c = q.shape
    qd, kd, vd = q.data, k.data, v.data
    out = np.empty((n, t, c))
    lse = np.empty((n, t))
    br = _block_rows(t)
    for b in range(n):
        kt = kd[b].T * scale
        for s in range(0, t, br):
            sc = qd[b, s : s + br] @ kt
            mx = sc.max(axis=1, keepdims=True)
            sc -= mx
            np.exp(sc, out=sc)
            tot = sc.sum(axis=1)
            out[b, s : s + br] = (sc @ vd[b]) / tot[:, None]
            lse[b, s : s + br] = mx[:, 0] + np.log(tot)

    def vjp(g):
        gq = np.zeros_like(qd)
        gk = np.zeros_like(kd)
        gv = np.zeros_like(vd)
        dsum = (g * out).sum(axis=2)
        for b in range(n):
            kt = kd[b].T * scale
            for s in range(0, t, br):
                e = s + br
                p = qd[b, s:e] @ kt
                p -= lse[b, s:e, None]
                np.exp(p, out=p)
                gv[b] += p.T @ g[b, s:e]
                dp = g[b, s:e] @ vd[b].T
                dp -= dsum[b, s:e, None]
                dp *= p
                gq[b, s:e] = (dp @ kd[b]) * scale
                gk[b] += (dp.T @ qd[b, s:e]) * scale
        return gq, gk, gv

    return record(out, (q, k, v), vjp, "attention")


def attention_weights(q: np.ndarray, k: np.ndarray, scale: float) -> np.ndarray:
    """Materialized (N, T, T) row-stochastic attention matrix, for inspection."""
    sc = np.einsum("ntc,nsc->nts", q, k) * scale
    sc -= sc.max(axis=2, keepdims=True)
    e = np.exp(sc)
    return e / e.sum(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# parameter-holding blocks
# ---------------------------------------------------------------------------


@dataclass
class Conv2d:
    spec: ConvSpec
    weight: Parameter
    bias: Parameter | None = None
    transpose: bool = False

    @classmethod
    def build(cls, store, name, spec: ConvSpec, rng, bias: bool = True, transpose: bool = False):
        shape = spec.weight_shape(transpose)
        fan_in = shape[1] * shape[2] * shape[3]
        weight = store.add(f"{name}.weight", kaiming_uniform(rng, shape, fan_in))
        b = store.add(f"{name}.bias", np.zeros(spec.out_channels)) if bias else None
        return cls(spec, weight, b, transpose)

    def __call__(self, x: Tensor) -> Tensor:
        if self.transpose:
            return transpose_conv2d(x, self.spec, self.weight, self.bias)
        return conv2d(x, self.spec, self.weight, self.bias)


@dataclass
class Linear:
    weight: Parameter
    bias: Parameter | None = None

    @classmethod
    def build(cls, store, name, cin: int, cout: int, rng, bias: bool = True):
        weight = store.add(f"{name}.weight", kaiming_uniform(rng, (cout, cin), cin))
        b = store.add(f"{name}.bias", np.zeros(cout)) if bias else None
        return cls(weight, b)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class GroupNorm:
    params: NormParams

    @classmethod
    def build(cls, store, name, channels: int, groups: int):
        gamma = store.add(f"{name}.gamma", np.ones(channels))
        beta = store.add(f"{name}.beta", np.zeros(channels))
        return cls(NormParams(gamma, beta, groups=groups))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.params)


@dataclass
class BatchNorm2d:
    params: NormParams
    training: bool = True

    @classmethod
    def build(cls, store, name, channels: int):
        gamma = store.add(f"{name}.gamma", np.ones(channels))
        beta = store.add(f"{name}.beta", np.zeros(channels))
        rm = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        rv = store.add_buffer(f"{name}.running_var", np.ones(channels))
        return cls(NormParams(gamma, beta, running_mean=rm, running_var=rv))

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.params, self.training)


@dataclass
class ConvMixer:
    """Depthwise 7x7 -> GELU -> BN, residual, then pointwise -> GELU -> BN."""

    dw: Conv2d
    bn1: BatchNorm2d
    pw: Conv2d
    bn2: BatchNorm2d
    kernel: int = 7

    @classmethod
    def build(cls, store, name, channels: int, rng, kernel: int = 7):
        pad = kernel // 2
        dw = Conv2d.build(store, f"{name}.dw", ConvSpec(channels, channels, kernel, 1, pad, groups=channels), rng)
        bn1 = BatchNorm2d.build(store, f"{name}.bn1", channels)
        pw = Conv2d.build(store, f"{name}.pw", ConvSpec(channels, channels), rng)
        bn2 = BatchNorm2d.build(store, f"{name}.bn2", channels)
        return cls(dw, bn1, pw, bn2, kernel)

    def norms(self) -> list[BatchNorm2d]:
        return [self.bn1, self.bn2]

    def __call__(self, x: Tensor) -> Tensor:
        return convmixer_block(x, self)


def convmixer_block(x: Tensor, params: ConvMixer) -> Tensor:
    y = params.bn1(gelu(params.dw(x))) + x
    return params.bn2(gelu(params.pw(y)))


@dataclass
class CrossAttention:
    q: Linear
    k: Linear
    v: Linear

    @classmethod
    def build(cls, store, name, channels: int, rng):
        return cls(
            Linear.build(store, f"{name}.q", channels, channels, rng),
            # a key bias adds the same q.b to every score in a row, which the softmax cancels
            Linear.build(store, f"{name}.k", channels, channels, rng, bias=False),
            Linear.build(store, f"{name}.v", channels, channels, rng),
        )

    def __call__(self, q_src, k_src, v_src):
        return cross_attention(q_src, k_src, v_src, self)


def _tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return x.reshape(n, c, h * w).transpose(0, 2, 1)


def cross_attention(q_src: Tensor, k_src: Tensor, v_src: Tensor, params: CrossAttention, return_weights: bool = False):
    """Single-head attention with queries from ``q_src`` and keys/values from the others.

    Each (N, C, H, W) input becomes H*W tokens of width C, is projected by its
    own linear map, and the attended tokens are folded back to (N, C, H, W).
    With ``return_weights`` the materialized attention matrix is returned too.
    """
    if not (q_src.shape == k_src.shape == v_src.shape) or q_src.ndim != 4:
        raise ShapeError(f"cross_attention inputs disagree: {q_src.shape}, {k_src.shape}, {v_src.shape}")
    n, c, h, w = q_src.shape
    q = params.q(_tokens(q_src))
    k = params.k(_tokens(k_src))
    v = params.v(_tokens(v_src))
    scale = 1.0 / math.sqrt(c)
    y = attention(q, k, v, scale).transpose(0, 2, 1).reshape(n, c, h, w)
    if return_weights:
        return y, attention_weights(q.data, k.data, scale)
    return y

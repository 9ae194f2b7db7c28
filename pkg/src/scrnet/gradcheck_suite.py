"""Registry of finite-difference checks for every differentiable op and composite block.

Each check builds a small scalar objective (a fixed random projection of the
op's output, or a loss) plus the tensors to differentiate.  One backward pass
supplies the analytic gradients; central differences are taken per tensor.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn_ops as nn
from . import tensor as T
from .fam import CCAPM, FAM, ccapm_forward, fam_forward, fusion_block
from .model import ModelConfig, build_model
from .scrm import SCRM, ChannelRefinement, SpatialGate, channel_refinement, spatial_gate
from .tensor import Tensor, backward, grad_check
from .train import LossConfig, bce_loss, combined_loss, dice_loss

OP_TOL = 1e-6
COMPOSITE_TOL = 1e-4
COMPOSITE_COORDS = 20

Objective = Callable[[], Tensor]


@dataclass
class Check:
    name: str
    kind: str  # "op" or "composite"
    build: Callable[[np.random.Generator], tuple[Objective, list[tuple[str, Tensor]]]]

    @property
    def tol(self) -> float:
        return OP_TOL if self.kind == "op" else COMPOSITE_TOL


@dataclass
class CheckResult:
    name: str
    kind: str
    tol: float
    max_rel_err: float
    passed: bool
    checked: int
    skipped: int
    tensors: int
    worst: str
    seconds: float


REGISTRY: dict[str, Check] = {}


def register(name: str, kind: str = "op"):
    def deco(fn):
        if name in REGISTRY:
            raise KeyError(f"check {name!r} registered twice")
        REGISTRY[name] = Check(name, kind, fn)
        return fn

    return deco


def _leaf(rng, *shape, low=None, high=None) -> Tensor:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Tensor(data, requires_grad=True)


def _projected(rng, fn: Callable[[], Tensor]) -> Objective:
    """Scalar sum(fn() * r) with r drawn once, on the first call."""
    r = None

    def objective():
        nonlocal r
        y = fn()
        if r is None:
            r = Tensor(rng.normal(size=y.shape))
        return (y * r).sum()

    return objective


def _store_tensors(store: nn.ParameterStore) -> list[tuple[str, Tensor]]:
    return list(store.items())


# ---------------------------------------------------------------------------
# element-wise and structural ops
# ---------------------------------------------------------------------------


@register("add")
def _add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 1)
    return _projected(rng, lambda: a + b), [("a", a), ("b", b)]


@register("mul")
def _mul(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)
    return _projected(rng, lambda: a * b), [("a", a), ("b", b)]


@register("div")
def _div(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4, low=0.5, high=2.0)
    return _projected(rng, lambda: a / b), [("a", a), ("b", b)]


@register("exp_log")
def _exp_log(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4, low=0.5, high=2.0)
    return _projected(rng, lambda: a.exp() + b.log()), [("a", a), ("b", b)]


@register("sigmoid")
def _sigmoid(rng):
    a = _leaf(rng, 4, 5)
    return _projected(rng, lambda: T.sigmoid(a)), [("x", a)]


@register("matmul")
def _matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 5)
    return _projected(rng, lambda: T.matmul(a, b)), [("a", a), ("b", b)]


@register("softmax")
def _softmax(rng):
    a = _leaf(rng, 2, 5, 3)
    return _projected(rng, lambda: T.softmax(a, axis=1)), [("x", a)]


@register("reduce")
def _reduce(rng):
    a = _leaf(rng, 2, 3, 4)
    return _projected(rng, lambda: T.reduce(a, "sum", (1,)) + T.reduce(a, "mean", (1,))), [("x", a)]


@register("concat_split")
def _concat_split(rng):
    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 2, 4)

    def fn():
        p, q = T.split(T.concat([a, b], axis=1), 1, [1, 4])
        return T.concat([q, p * p], axis=1)

    return _projected(rng, fn), [("a", a), ("b", b)]


@register("reshape_transpose")
def _reshape_transpose(rng):
    a = _leaf(rng, 2, 3, 4)
    return _projected(rng, lambda: a.reshape(6, 4).transpose(1, 0) * 2.0), [("x", a)]


# ---------------------------------------------------------------------------
# neural ops
# ---------------------------------------------------------------------------


def _conv_case(rng, spec: nn.ConvSpec, hw=(5, 6), transpose=False):
    x = _leaf(rng, 2, spec.in_channels, *hw)
    w = _leaf(rng, *spec.weight_shape(transpose))
    b = _leaf(rng, spec.out_channels)
    op = nn.transpose_conv2d if transpose else nn.conv2d
    return _projected(rng, lambda: op(x, spec, w, b)), [("x", x), ("weight", w), ("bias", b)]


@register("conv2d")
def _conv2d(rng):
    return _conv_case(rng, nn.ConvSpec(3, 4, 3, 1, 1))


@register("conv2d_strided_grouped")
def _conv2d_grouped(rng):
    return _conv_case(rng, nn.ConvSpec(4, 6, 3, 2, 1, groups=2))


@register("conv2d_depthwise")
def _conv2d_dw(rng):
    return _conv_case(rng, nn.ConvSpec(3, 3, 5, 1, 2, groups=3))


@register("conv2d_pointwise")
def _conv2d_pw(rng):
    return _conv_case(rng, nn.ConvSpec(4, 3, 1))


@register("transpose_conv2d")
def _tconv(rng):
    return _conv_case(rng, nn.ConvSpec(4, 3, 3, 2, 1, output_padding=1), hw=(3, 4), transpose=True)


@register("linear")
def _linear(rng):
    x, w, b = _leaf(rng, 2, 3, 5), _leaf(rng, 4, 5), _leaf(rng, 4)
    return _projected(rng, lambda: nn.linear(x, w, b)), [("x", x), ("weight", w), ("bias", b)]


def _norm_case(rng, groups=1, **kw):
    x = _leaf(rng, 2, 4, 3, 3)
    g, b = _leaf(rng, 4, low=0.5, high=1.5), _leaf(rng, 4)
    params = nn.NormParams(g, b, groups=groups, **kw)
    return params, x, g, b


@register("group_norm")
def _group_norm(rng):
    p, x, g, b = _norm_case(rng, groups=2)
    return _projected(rng, lambda: nn.group_norm(x, p)), [("x", x), ("gamma", g), ("beta", b)]


@register("batch_norm_train")
def _batch_norm(rng):
    p, x, g, b = _norm_case(rng)
    return _projected(rng, lambda: nn.batch_norm(x, p, training=True)), [("x", x), ("gamma", g), ("beta", b)]


@register("batch_norm_eval")
def _batch_norm_eval(rng):
    p, x, g, b = _norm_case(rng, running_mean=rng.normal(size=4),
                            running_var=rng.uniform(0.5, 2.0, size=4))
    return _projected(rng, lambda: nn.batch_norm(x, p, training=False)), [("x", x), ("gamma", g), ("beta", b)]


@register("relu")
def _relu(rng):
    x = _leaf(rng, 3, 7)
    return _projected(rng, lambda: nn.relu(x)), [("x", x)]


@register("gelu")
def _gelu(rng):
    x = _leaf(rng, 3, 7)
    return _projected(rng, lambda: nn.gelu(x)), [("x", x)]


@register("max_pool2d")
def _max_pool(rng):
    x = _leaf(rng, 2, 2, 4, 6)
    return _projected(rng, lambda: nn.max_pool2d(x)), [("x", x)]


@register("global_avg_pool")
def _gap(rng):
    x = _leaf(rng, 2, 3, 3, 4)
    return _projected(rng, lambda: nn.global_avg_pool(x)), [("x", x)]


@register("shift")
def _shift(rng):
    x = _leaf(rng, 1, 7, 3, 6)
    return _projected(rng, lambda: nn.shift(x)), [("x", x)]


@register("attention")
def _attention(rng):
    q, k, v = (_leaf(rng, 2, 6, 3) for _ in range(3))
    return _projected(rng, lambda: nn.attention(q, k, v, 1 / math.sqrt(3))), [("q", q), ("k", k), ("v", v)]


@register("cross_attention")
def _cross_attention(rng):
    store = nn.ParameterStore()
    attn = nn.CrossAttention.build(store, "attn", 4, rng)
    a, b, d = (_leaf(rng, 1, 4, 2, 3) for _ in range(3))
    fn = _projected(rng, lambda: nn.cross_attention(a, b, d, attn))
    return fn, [("q_src", a), ("k_src", b), ("v_src", d)] + _store_tensors(store)


@register("dice_loss")
def _dice(rng):
    z, g = _leaf(rng, 2, 1, 4, 4), (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
    return (lambda: dice_loss(z, g)), [("logits", z)]


@register("bce_loss")
def _bce(rng):
    z, g = _leaf(rng, 2, 1, 4, 4), (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
    return (lambda: bce_loss(z, g)), [("logits", z)]


@register("combined_loss")
def _combined(rng):
    z, g = _leaf(rng, 2, 1, 4, 4), (rng.random((2, 1, 4, 4)) < 0.4).astype(float)
    return (lambda: combined_loss(z, g, LossConfig())), [("logits", z)]


# ---------------------------------------------------------------------------
# composites
# ---------------------------------------------------------------------------


def _jitter(store: nn.ParameterStore, rng) -> None:
    # move norm affines and blend scalars off their symmetric init so every path matters
    for name, p in store.items():
        if name.endswith((".gamma", ".w_conv", ".w_cross")):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
        elif name.endswith((".beta", ".bias")):
            p.data[...] = rng.normal(scale=0.1, size=p.shape)


@register("convmixer", "composite")
def _convmixer(rng):
    store = nn.ParameterStore()
    mixer = nn.ConvMixer.build(store, "mixer", 4, rng, kernel=3)
    _jitter(store, rng)
    x = _leaf(rng, 2, 4, 4, 4)
    return _projected(rng, lambda: mixer(x)), [("x", x)] + _store_tensors(store)


@register("spatial_gate", "composite")
def _sg(rng):
    store = nn.ParameterStore()
    sg = SpatialGate.build(store, "sg", 8, gn_groups=4)
    _jitter(store, rng)
    x = _leaf(rng, 2, 8, 4, 4)
    return _projected(rng, lambda: spatial_gate(x, sg)), [("x", x)] + _store_tensors(store)


@register("channel_refinement", "composite")
def _cr(rng):
    store = nn.ParameterStore()
    cr = ChannelRefinement.build(store, "cr", 8, rng)
    x = _leaf(rng, 2, 8, 4, 4)

    def fn():
        h, low = channel_refinement(x, cr)
        return T.concat([h, low], axis=1)

    return _projected(rng, fn), [("x", x)] + _store_tensors(store)


@register("ccapm", "composite")
def _ccapm(rng):
    store = nn.ParameterStore()
    block = CCAPM.build(store, "ccapm", 8, rng)
    _jitter(store, rng)
    f1, f2 = _leaf(rng, 1, 8, 3, 4), _leaf(rng, 1, 8, 3, 4)
    fn = _projected(rng, lambda: ccapm_forward(f1, f2, block))
    return fn, [("feature1", f1), ("feature2", f2)] + _store_tensors(store)


@register("fusion_block", "composite")
def _fusion(rng):
    y1, y2 = _leaf(rng, 2, 4, 3, 3), _leaf(rng, 2, 4, 3, 3)
    return _projected(rng, lambda: fusion_block(y1, y2)), [("y1", y1), ("y2", y2)]


@register("fam", "composite")
def _fam(rng):
    store = nn.ParameterStore()
    fam = FAM.build(store, "fam", 8, rng)
    _jitter(store, rng)
    xh, xl = _leaf(rng, 1, 8, 3, 3), _leaf(rng, 1, 8, 3, 3)
    return _projected(rng, lambda: fam_forward(xh, xl, fam)), [("x_h", xh), ("x_l", xl)] + _store_tensors(store)


@register("scrm", "composite")
def _scrm(rng):
    store = nn.ParameterStore()
    block = SCRM.build(store, "scrm", 8, rng, gn_groups=4)
    _jitter(store, rng)
    x = _leaf(rng, 1, 8, 4, 4)
    return _projected(rng, lambda: block(x)), [("x", x)] + _store_tensors(store)


@register("scrnet_depth2", "composite")
def _model(rng):
    model = build_model(ModelConfig(depth=2, widths=(8, 16), seed=int(rng.integers(1 << 31))))
    _jitter(model.store, rng)
    x = _leaf(rng, 1, 3, 16, 16, low=0.0, high=1.0)
    gt = (rng.random((1, 1, 16, 16)) < 0.3).astype(float)
    return (lambda: combined_loss(model(x), gt)), [("input", x)] + _store_tensors(model.store)


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


def run_check(name: str, tol: float | None = None, seed: int = 0, coords: int | None = None) -> CheckResult:
    """Run one registered check; op checks test every coordinate, composites sample them."""
    check = REGISTRY[name]
    tol = check.tol if tol is None else tol
    if coords is None and check.kind == "composite":
        coords = COMPOSITE_COORDS
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    objective, tensors = check.build(rng)
    for _, t in tensors:
        t.grad = None
        t.requires_grad = True
    backward(objective())
    analytic = {label: (np.zeros(t.shape) if t.grad is None else t.grad.copy()) for label, t in tensors}
    for _, t in tensors:
        t.grad = None

    worst, worst_label, checked, skipped, ok = 0.0, "", 0, 0, True
    for label, t in tensors:
        rep = grad_check(lambda _t: objective(), t, tol=tol, coords=coords, rng=rng, skip_kinks=True,
                         analytic=analytic[label])
        checked += rep.checked
        skipped += rep.skipped
        ok &= rep.passed
        if rep.max_rel_err >= worst:
            worst, worst_label = rep.max_rel_err, f"{label}{list(rep.worst_index or ())}"
    elapsed = time.perf_counter() - start
    return CheckResult(name, check.kind, tol, worst, ok, checked, skipped, len(tensors), worst_label, elapsed)


def run_suite(only: list[str] | None = None, tol: float | None = None, seed: int = 0) -> list[CheckResult]:
    names = list(REGISTRY) if not only else only
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unknown check(s): {', '.join(unknown)}")
    return [run_check(n, tol, seed) for n in names]


def format_table(results: list[CheckResult]) -> str:
    head = f"{'check':<24} {'kind':<9} {'tol':>8} {'max_rel_err':>12} {'coords':>7} {'skipped':>7} {'time_s':>7}  result"
    lines = [head, "-" * len(head)]
    for r in results:
        lines.append(
            f"{r.name:<24} {r.kind:<9} {r.tol:>8.0e} {r.max_rel_err:>12.3e} {r.checked:>7d} {r.skipped:>7d} "
            f"{r.seconds:>7.2f}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)

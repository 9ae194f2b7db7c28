"""Acceptance criteria, one test and one printed PASS/FAIL line each.

The overfit runs are shared between the overfit and ablation criteria and
also written to ``results/overfit_ablation.csv`` at the repository root.
"""

import csv
import math
import time
from pathlib import Path

import numpy as np
import pytest

from scrnet.cli import parse_args, resolved_config
from scrnet.data import synth_generate
from scrnet.fam import fusion_block
from scrnet.gradcheck_suite import REGISTRY, run_suite
from scrnet.model import (ModelConfig, build_model, checkpoint_bytes, count_params, forward, load_checkpoint,
                          save_checkpoint)
from scrnet.nn_ops import ConvSpec, CrossAttention, ParameterStore, conv2d, cross_attention, shift, transpose_conv2d
from scrnet.scrm import ChannelRefinement, SpatialGate, channel_refinement, cr_channels, spatial_gate
from scrnet.tensor import ShapeError, Tensor, no_grad, softmax
from scrnet.train import (LossConfig, OptimState, bce_loss, combined_loss, dice_loss, evaluate, image_metrics,
                          train_loop, write_log_csv)
from test_nn_ops import attention_oracle, shift_oracle
from test_train import bce_oracle, dice_oracle

RESULTS = Path(__file__).resolve().parent.parent / "results"

OVERFIT_CFG = dict(depth=3, widths=(8, 16, 32), seed=0)
OVERFIT_STEPS = 296  # 37 epochs of 8 single-sample batches
OVERFIT_BATCH = 1


def run_overfit(ablate: bool) -> dict:
    samples = synth_generate(8, (64, 64), seed=0)
    model = build_model(ModelConfig(**OVERFIT_CFG, ablate_fam=ablate))
    opt = OptimState(lr=1e-3)
    start = time.perf_counter()
    epochs = OVERFIT_STEPS // (len(samples) // OVERFIT_BATCH)
    train_loop(model, samples, [], opt, epochs=epochs, batch=OVERFIT_BATCH, seed=0)
    seconds = time.perf_counter() - start
    loss, report = evaluate(model, samples)
    return {"config": "no_fam" if ablate else "full", "params": count_params(model), "steps": opt.step,
            "seconds": seconds, "loss": loss, "dsc": report.dsc, "miou": report.miou,
            "precision": report.precision, "recall": report.recall}


@pytest.fixture(scope="module")
def overfit_runs():
    runs = {r["config"]: r for r in (run_overfit(False), run_overfit(True))}
    RESULTS.mkdir(exist_ok=True)
    with open(RESULTS / "overfit_ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(runs["full"]), lineterminator="\n")
        w.writeheader()
        for r in runs.values():
            w.writerow({k: f"{v:.6g}" if isinstance(v, float) else v for k, v in r.items()})
    return runs


def test_gradient_suite(verdict):
    start = time.perf_counter()
    results = run_suite()
    seconds = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    composites = {r.name for r in results if r.kind == "composite"}
    required = {"spatial_gate", "channel_refinement", "ccapm", "fusion_block", "fam", "scrnet_depth2"}
    tols_ok = all(r.tol == (1e-4 if r.kind == "composite" else 1e-6) for r in results)
    worst = max(results, key=lambda r: r.max_rel_err / r.tol)
    ok = not failed and required <= composites and tols_ok and seconds <= 300
    detail = (f"{len(results)} checks, failed={failed or 'none'}, worst {worst.name} {worst.max_rel_err:.2e} "
              f"(tol {worst.tol:.0e}), {seconds:.0f} s")
    assert verdict("gradient suite", ok, detail)


def test_shape_topology(verdict):
    problems = []
    for depth in (2, 3, 4, 5):
        model = build_model(ModelConfig(depth=depth, widths=(8,) * depth)).eval()
        for h in (32, 64, 128):
            with no_grad():
                logits, skips = forward(model, Tensor(np.zeros((1, 3, h, h))), return_skips=True)
            if logits.shape != (1, 1, h, h):
                problems.append(f"depth {depth} H {h}: {logits.shape}")
            if [s.shape[2] for s in skips] != [h >> i for i in range(depth)]:
                problems.append(f"depth {depth} H {h}: skip extents")
        bad = 2 ** (depth - 1) + 1 if depth > 1 else None
        try:
            forward(model, Tensor(np.zeros((1, 3, 32, bad))))
            problems.append(f"depth {depth}: width {bad} accepted")
        except ShapeError:
            pass
    assert verdict("shape/topology", not problems, "; ".join(problems) or "12 forwards, 4 rejections")


def test_equation_invariants(verdict):
    rng = np.random.default_rng(0)
    checks = {}
    rows = softmax(Tensor(rng.normal(scale=20, size=(6, 9))), 1).data.sum(axis=1)
    store = ParameterStore()
    attn = CrossAttention.build(store, "a", 4, rng)
    _, a = cross_attention(*(Tensor(rng.normal(scale=5, size=(2, 4, 3, 3))) for _ in range(3)), attn,
                           return_weights=True)
    checks["softmax/attention rows"] = max(np.abs(rows - 1).max(), np.abs(a.sum(axis=2) - 1).max()) <= 1e-6
    y1, y2 = Tensor(rng.normal(size=(2, 5, 4, 4))), Tensor(rng.normal(size=(2, 5, 4, 4)))
    _, w1, w2 = fusion_block(y1, y2, return_weights=True)
    checks["fusion weights sum"] = np.abs(w1 + w2 - 1).max() <= 1e-12
    checks["fusion Y1=Y2"] = np.abs(fusion_block(y1, y1).data - y1.data).max() <= 1e-12
    sg = SpatialGate.build(ParameterStore(), "sg", 8)
    sg.gn.params.gamma.data[...] = 0
    x = rng.normal(size=(2, 8, 5, 5))
    checks["SG identity"] = np.array_equal(sg(Tensor(x)).data, x)
    sg.gn.params.gamma.data[...] = rng.normal(scale=2, size=8)
    _, m1, m2 = spatial_gate(Tensor(x), sg, return_masks=True)
    checks["SG partition"] = not (m1 * m2).any() and set(np.unique(m1)) <= {0.0, 1.0} and m2.max() < 0.5
    cr_ok = True
    for c in (8, 16, 32, 64):
        cr = ChannelRefinement.build(ParameterStore(), "cr", c, rng)
        xh, xl = channel_refinement(Tensor(rng.normal(size=(1, c, 4, 4))), cr)
        cr_ok &= xh.shape[1] == xl.shape[1] == c and cr_channels(c).squeezed_lower + cr_channels(c).low_extra == c
    checks["CR channels"] = cr_ok
    fwd = ConvSpec(4, 6, 3, 2, 1, groups=2)
    back = ConvSpec(6, 4, 3, 2, 1, groups=2, output_padding=1)
    w = rng.normal(size=fwd.weight_shape())
    u, v = rng.normal(size=(2, 4, 8, 8)), rng.normal(size=(2, 6, 4, 4))
    lhs = np.vdot(conv2d(Tensor(u), fwd, Tensor(w)).data, v)
    rhs = np.vdot(u, transpose_conv2d(Tensor(v), back, Tensor(w)).data)
    checks["conv adjoint"] = abs(lhs - rhs) / abs(lhs) <= 1e-10
    failed = [k for k, ok in checks.items() if not ok]
    assert verdict("equation invariants", not failed, f"{len(checks)} checks, failed={failed or 'none'}")


def test_oracle_equivalence(verdict):
    rng = np.random.default_rng(1)
    checks = {}
    attn = CrossAttention.build(ParameterStore(), "a", 3, rng)
    attn.q.bias.data[...] = rng.normal(size=3)
    attn.v.bias.data[...] = rng.normal(size=3)
    q, k, v = (rng.normal(size=(1, 3, 4, 4)) for _ in range(3))
    got = cross_attention(Tensor(q), Tensor(k), Tensor(v), attn).data
    want = attention_oracle(q, k, v, attn.q.weight.data, attn.q.bias.data, attn.k.weight.data, attn.v.weight.data,
                            attn.v.bias.data)
    checks["cross-attention"] = np.abs(got - want).max() <= 1e-10
    xs = rng.normal(size=(1, 13, 3, 6))
    checks["shift"] = np.array_equal(shift(Tensor(xs)).data, shift_oracle(xs))
    m = image_metrics(np.ones((2, 2)), np.array([[1, 0], [1, 0]]))
    checks["metrics hand case"] = (m.dsc, m.precision, m.recall, m.iou_fg, m.iou_bg, m.miou) == (
        2 / 3, 0.5, 1.0, 0.5, 0.0, 0.25)
    z = rng.normal(scale=3, size=(1, 1, 4, 4))
    g = (rng.random((1, 1, 4, 4)) < 0.4).astype(float)
    checks["dice/bce"] = (abs(dice_loss(Tensor(z), g).item() - dice_oracle(z, g, 1.0)) <= 1e-10
                          and abs(bce_loss(Tensor(z), g).item() - bce_oracle(z, g)) <= 1e-10)
    ident = 0.0
    for _ in range(200):
        mm = image_metrics(rng.random((6, 6)), rng.random((6, 6)) < 0.5)
        ident = max(ident, abs(mm.dsc - 2 * mm.iou_fg / (1 + mm.iou_fg)))
    checks["DSC-IoU identity"] = ident <= 1e-12
    failed = [k for k, ok in checks.items() if not ok]
    assert verdict("oracle equivalence", not failed, f"{len(checks)} checks, failed={failed or 'none'}")


def test_overfit(verdict, overfit_runs):
    r = overfit_runs["full"]
    ok = r["dsc"] >= 0.95 and r["loss"] <= 0.1 and r["steps"] <= 300 and r["seconds"] <= 600
    detail = (f"DSC {r['dsc']:.4f} (>= 0.95), combined loss {r['loss']:.4f} (<= 0.1), {r['steps']} steps, "
              f"{r['seconds']:.0f} s")
    assert verdict("overfit", ok, detail)


def test_ablation_parity(verdict, overfit_runs):
    full, abl = overfit_runs["full"], overfit_runs["no_fam"]
    ok = abl["params"] < full["params"] and abl["steps"] == full["steps"] and math.isfinite(abl["loss"])
    detail = (f"params {abl['params']} < {full['params']}; no_fam DSC {abl['dsc']:.4f} loss {abl['loss']:.4f} vs "
              f"full DSC {full['dsc']:.4f} loss {full['loss']:.4f}; recorded in results/overfit_ablation.csv")
    assert verdict("ablation parity", ok, detail)


def test_determinism_persistence(verdict, tmp_path):
    samples = synth_generate(4, (32, 32), seed=3)
    logs = []
    for k in range(2):
        model = build_model(ModelConfig(depth=2, widths=(8, 16), seed=5))
        rows = train_loop(model, samples, [], OptimState(lr=1e-3), epochs=2, batch=2, seed=5)
        write_log_csv(rows, tmp_path / f"log{k}.csv")
        logs.append((tmp_path / f"log{k}.csv").read_bytes())
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt", model.cfg)
    bit_exact = checkpoint_bytes(loaded) == (tmp_path / "m.ckpt").read_bytes()
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)))
    with no_grad():
        diff = np.abs(forward(model.eval(), x).data - forward(loaded.eval(), x).data).max()
    ok = logs[0] == logs[1] and bit_exact and diff <= 1e-6
    assert verdict("determinism & persistence", ok,
                   f"log bytes equal={logs[0] == logs[1]}, checkpoint bit-exact={bit_exact}, max logit diff {diff:.1e}")


def test_loss_recipe(verdict):
    rng = np.random.default_rng(2)
    z = rng.normal(scale=2, size=(2, 1, 4, 4))
    g = (rng.random((2, 1, 4, 4)) < 0.5).astype(float)
    want = dice_oracle(z, g, 1.0) + 0.5 * bce_oracle(z, g)
    err = abs(combined_loss(Tensor(z), g).item() - want)
    cfg = dict(line.split("=", 1) for line in resolved_config(
        parse_args(["train", "--synth", "1", "--out", "unused"])).splitlines())
    recipe = (cfg["lr"], cfg["weight_decay"], cfg["batch"], cfg["epochs"]) == ("0.0001", "0.0005", "8", "100")
    ok = err <= 1e-10 and recipe and LossConfig().bce_weight == 0.5
    assert verdict("loss recipe", ok, f"combined vs independent {err:.1e}; resolved recipe "
                   f"lr={cfg['lr']} wd={cfg['weight_decay']} batch={cfg['batch']} epochs={cfg['epochs']}")


def test_registry_covers_every_op():
    expected = {"softmax", "conv2d", "transpose_conv2d", "group_norm", "batch_norm_train", "shift", "attention",
                "cross_attention", "dice_loss", "bce_loss", "combined_loss"}
    assert expected <= set(REGISTRY)

"""Loss, segmentation metrics, Adam, plateau annealing and the train/evaluate loops."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import SCRNet, save_checkpoint
from .nn_ops import ParameterStore, on_f32_grid
from .tensor import ShapeError, Tensor, _sigmoid_np, no_grad, record, sigmoid

LOG_COLUMNS = (
    "epoch", "train_loss", "val_loss", "lr", "val_dsc", "val_miou", "val_iou_fg", "val_precision", "val_recall",
)
METRIC_COLUMNS = ("id", "dsc", "miou", "iou_fg", "iou_bg", "precision", "recall", "tp", "fp", "fn", "tn")


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossConfig:
    bce_weight: float = 0.5
    dice_eps: float = 1.0

    def __post_init__(self):
        if self.bce_weight < 0 or self.dice_eps <= 0:
            raise ValueError("bce_weight must be >= 0 and dice_eps > 0")


def _target(logits: Tensor, gt) -> Tensor:
    g = gt if isinstance(gt, Tensor) else Tensor(gt)
    if g.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and mask {g.shape} differ")
    return g


def dice_loss(logits: Tensor, gt, eps: float = 1.0) -> Tensor:
    """1 - (2 sum(p g) + eps) / (sum p + sum g + eps), summed over the whole batch."""
    g = _target(logits, gt)
    p = sigmoid(logits)
    inter = (p * g).sum()
    return 1.0 - (2.0 * inter + eps) / (p.sum() + g.sum() + eps)


def bce_loss(logits: Tensor, gt) -> Tensor:
    """Mean binary cross-entropy in the stable logit form."""
    g = _target(logits, gt).data
    z = logits.data
    m = z.size
    val = np.mean(np.maximum(z, 0.0) - z * g + np.log1p(np.exp(-np.abs(z))))
    return record(np.asarray(val), (logits,), lambda gr: (gr * (_sigmoid_np(z) - g) / m,), "bce")


def combined_loss(logits: Tensor, gt, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return dice_loss(logits, gt, cfg.dice_eps) + cfg.bce_weight * bce_loss(logits, gt)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


@dataclass
class ImageMetrics:
    id: str
    tp: int
    fp: int
    fn: int
    tn: int
    dsc: float
    iou_fg: float
    iou_bg: float
    miou: float
    precision: float
    recall: float


@dataclass
class MetricsReport:
    per_image: list[ImageMetrics]
    dsc: float
    miou: float
    iou_fg: float
    precision: float
    recall: float
    threshold: float = 0.5

    @property
    def confusion(self) -> dict[str, int]:
        return {k: sum(getattr(m, k) for m in self.per_image) for k in ("tp", "fp", "fn", "tn")}

    def rows(self) -> list[dict]:
        out = []
        for m in self.per_image:
            out.append({k: getattr(m, k) for k in METRIC_COLUMNS})
        agg = {"id": "mean", "dsc": self.dsc, "miou": self.miou, "iou_fg": self.iou_fg,
               "iou_bg": float(np.mean([m.iou_bg for m in self.per_image])),
               "precision": self.precision, "recall": self.recall}
        agg.update(self.confusion)
        out.append(agg)
        return out


def _ratio(num: int, den: int, empty_ok: bool) -> float:
    # a zero denominator means the case is vacuous: 1 when nothing was missed, else 0
    if den == 0:
        return 1.0 if empty_ok else 0.0
    return num / den


def image_metrics(prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5, id: str = "") -> ImageMetrics:
    prob = np.asarray(prob)
    gt = np.asarray(gt)
    if prob.shape != gt.shape:
        raise ShapeError(f"prediction {prob.shape} and mask {gt.shape} differ")
    pred = prob >= threshold
    truth = gt > 0.5
    tp = int(np.count_nonzero(pred & truth))
    fp = int(np.count_nonzero(pred & ~truth))
    fn = int(np.count_nonzero(~pred & truth))
    tn = int(np.count_nonzero(~pred & ~truth))
    dsc = _ratio(2 * tp, 2 * tp + fp + fn, True)
    iou_fg = _ratio(tp, tp + fp + fn, True)
    iou_bg = _ratio(tn, tn + fp + fn, True)
    precision = _ratio(tp, tp + fp, fn == 0)
    recall = _ratio(tp, tp + fn, fp == 0)
    return ImageMetrics(id, tp, fp, fn, tn, dsc, iou_fg, iou_bg, (iou_fg + iou_bg) / 2, precision, recall)


def compute_metrics(prob_maps: Sequence, gts: Sequence, threshold: float = 0.5,
                    ids: Sequence[str] | None = None) -> MetricsReport:
    """Per-image confusion metrics; dataset values are unweighted means over images."""
    if len(prob_maps) != len(gts):
        raise ValueError(f"{len(prob_maps)} predictions for {len(gts)} masks")
    if not prob_maps:
        raise ValueError("no samples")
    ids = list(ids) if ids is not None else [str(i) for i in range(len(gts))]
    per = [image_metrics(p, g, threshold, i) for p, g, i in zip(prob_maps, gts, ids)]

    def mean(attr):
        return float(np.mean([getattr(m, attr) for m in per]))

    return MetricsReport(per, mean("dsc"), mean("miou"), mean("iou_fg"), mean("precision"), mean("recall"), threshold)


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in report.rows():
            w.writerow([_cell(row[k]) for k in METRIC_COLUMNS])


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    anneal_factor: float = 0.2
    patience: int = 10
    min_delta: float = 1e-4
    min_lr: float = 1e-7
    best: float = math.inf
    plateau: int = 0
    seen: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def adam_step(store: ParameterStore, opt: OptimState) -> None:
    """One Adam update with L2 weight decay folded into the gradient; clears gradients.

    Updated weights are snapped to the float32 grid (see ``on_f32_grid``).
    """
    for name, p in store.items():
        if p.grad is None:
            raise TrainingError(f"parameter {name!r} has no gradient")
    opt.step += 1
    b1, b2 = opt.betas
    c1 = 1.0 - b1**opt.step
    c2 = 1.0 - b2**opt.step
    for p in store.values():
        g = p.grad + opt.weight_decay * p.data if opt.weight_decay else p.grad
        p.m *= b1
        p.m += (1.0 - b1) * g
        p.v *= b2
        p.v += (1.0 - b2) * g * g
        p.data -= opt.lr * (p.m / c1) / (np.sqrt(p.v / c2) + opt.eps)
        p.data[...] = on_f32_grid(p.data)
        p.grad = None


def lr_anneal(opt: OptimState, val_loss_history: Sequence[float]) -> None:
    """Multiply the learning rate by ``anneal_factor`` after a plateau.

    A plateau is ``patience`` consecutive epochs, counted from the epoch that
    set the current best, without beating that best by ``min_delta``.  Only
    history entries not seen by earlier calls are consumed.
    """
    if not val_loss_history:
        raise ValueError("empty validation history")
    for v in val_loss_history[opt.seen:]:
        if v < opt.best - opt.min_delta:
            opt.best = v
            opt.plateau = 1
        else:
            opt.plateau += 1
        if opt.plateau >= opt.patience:
            opt.lr = max(opt.lr * opt.anneal_factor, opt.min_lr)
            opt.plateau = 0
    opt.seen = len(val_loss_history)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def stack_batch(samples) -> tuple[Tensor, Tensor]:
    x = np.stack([s.image for s in samples])
    y = np.stack([s.mask for s in samples])
    return Tensor(x), Tensor(y)


def predict_probs(model: SCRNet, samples, batch: int = 8) -> list[np.ndarray]:
    was = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(samples), batch):
            x, _ = stack_batch(samples[i : i + batch])
            out.extend(_sigmoid_np(model(x).data))
    model.train(was)
    return out


def evaluate(model: SCRNet, samples, loss_cfg: LossConfig | None = None, batch: int = 8,
             threshold: float = 0.5) -> tuple[float, MetricsReport]:
    """Mean per-sample combined loss and metrics in evaluation mode, no augmentation."""
    if not samples:
        raise ValueError("no samples")
    loss_cfg = loss_cfg or LossConfig()
    was = model.training
    model.eval()
    losses, probs = [], []
    with no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            x, y = stack_batch(chunk)
            logits = model(x)
            for j in range(len(chunk)):
                lj = Tensor(logits.data[j : j + 1])
                losses.append(combined_loss(lj, y.data[j : j + 1], loss_cfg).item())
            probs.extend(_sigmoid_np(logits.data))
    model.train(was)
    report = compute_metrics(probs, [s.mask for s in samples], threshold, [s.id for s in samples])
    return float(np.mean(losses)), report


def train_loop(model: SCRNet, train_set, val_set, opt: OptimState, epochs: int = 100, batch: int = 8,
               seed: int = 0, loss_cfg: LossConfig | None = None, augment_cfg=None, checkpoint_dir=None,
               on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Train for ``epochs`` and return one log row per epoch.

    Each epoch shuffles with a seeded generator, steps Adam once per batch on
    the combined loss, evaluates on ``val_set`` (the training set when that is
    empty), anneals the learning rate and, with ``checkpoint_dir``, keeps
    ``best.ckpt`` (lowest validation loss) and ``last.ckpt``.
    """
    from .data import augment, sample_rng

    if not train_set:
        raise ValueError("empty training set")
    loss_cfg = loss_cfg or LossConfig()
    val_set = val_set or train_set
    order_rng = np.random.default_rng(seed)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    history: list[float] = []
    rows = []
    best = math.inf
    for epoch in range(1, epochs + 1):
        model.train()
        perm = order_rng.permutation(len(train_set))
        lr_used = opt.lr
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(perm), batch)):
            idx = perm[start : start + batch]
            chunk = [train_set[i] for i in idx]
            if augment_cfg is not None:
                chunk = [augment(s, augment_cfg, sample_rng(seed, epoch, int(i))) for s, i in zip(chunk, idx)]
            x, y = stack_batch(chunk)
            loss = combined_loss(model(x), y, loss_cfg)
            val = loss.item()
            if not math.isfinite(val):
                raise TrainingError(f"non-finite loss {val} at epoch {epoch}, batch {b}")
            loss.backward()
            adam_step(model.store, opt)
            total += val * len(chunk)
            count += len(chunk)
        val_loss, report = evaluate(model, val_set, loss_cfg, batch)
        history.append(val_loss)
        lr_anneal(opt, history)
        row = {
            "epoch": epoch, "train_loss": total / count, "val_loss": val_loss, "lr": lr_used,
            "val_dsc": report.dsc, "val_miou": report.miou, "val_iou_fg": report.iou_fg,
            "val_precision": report.precision, "val_recall": report.recall,
        }
        rows.append(row)
        if ckdir is not None:
            if val_loss < best:
                best = val_loss
                save_checkpoint(model, ckdir / "best.ckpt")
            save_checkpoint(model, ckdir / "last.ckpt")
        if on_epoch is not None:
            on_epoch(row)
    return rows


def write_log_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in rows:
            w.writerow([_cell(row[k]) for k in LOG_COLUMNS])


def format_row(row: dict) -> str:
    return " ".join(f"{k}={_cell(row[k])}" for k in LOG_COLUMNS)

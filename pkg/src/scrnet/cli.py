"""Command-line interface: train, eval, predict, gradcheck, synth.

Exit codes: 0 success, 1 runtime failure (stage named on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (AugmentConfig, DatasetError, Sample, image_from_uint8, load_dataset, read_image_file,
                   resize_bilinear, resize_nearest, split_dataset, synth_generate, write_dataset, write_image,
                   write_mask)
from .model import ModelConfig, build_model, count_params, load_checkpoint
from .train import (LossConfig, OptimState, evaluate, format_row, predict_probs, train_loop, write_log_csv,
                    write_metrics_csv)

CONFIG_NAME = "resolved_config.txt"


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"{stage}: {exc}")
        self.stage = stage


def _stage(name: str, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure is reported with its stage
        raise StageError(name, exc) from exc


# ---------------------------------------------------------------------------
# argument types and resolved configs
# ---------------------------------------------------------------------------


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated integer list, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    vals = _int_list(text.lower().replace("x", ","))
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}")
    return vals


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _optional_int(text: str):
    return None if text.strip().lower() in ("", "none", "auto") else int(text)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def read_config(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"{path}: malformed line {line!r}")
        out[key.strip()] = val.strip()
    return out


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

# (dest, type) for every option a resolved config may carry
_TYPED = {
    "data": str, "synth": int, "val_synth": int, "synth_seed": int, "size": _size, "split": _float_list,
    "depth": int, "widths": _int_list, "split_ratio": float, "squeeze_ratio": int, "gwc_groups": int,
    "gn_groups": _optional_int, "ablate_fam": _bool, "seed": int, "epochs": int, "batch": int, "lr": float,
    "weight_decay": float, "anneal_factor": float, "patience": int, "min_delta": float, "bce_weight": float,
    "dice_eps": float, "augment": _bool, "threshold": float,
}


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--depth", type=int, default=5)
    g.add_argument("--widths", type=_int_list, default=(16, 32, 64, 128, 256), help="comma list, one per level")
    g.add_argument("--split-ratio", dest="split_ratio", type=float, default=0.5)
    g.add_argument("--squeeze-ratio", dest="squeeze_ratio", type=int, default=2)
    g.add_argument("--gwc-groups", dest="gwc_groups", type=int, default=2)
    g.add_argument("--gn-groups", dest="gn_groups", type=_optional_int, default=None)
    g.add_argument("--no-fam", dest="ablate_fam", action="store_const", const=True, default=False,
                   help="replace feature aggregation by summation of the two streams")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help=f"{CONFIG_NAME} from an earlier run; explicit flags override it")


def _add_data_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset root with images/ and masks/")
    src.add_argument("--synth", type=int, help="use N generated samples instead of a dataset")
    g.add_argument("--synth-seed", dest="synth_seed", type=int, default=0)
    g.add_argument("--size", type=_size, default=(256, 256), help="resize target N or HxW")
    g.add_argument("--split", type=_float_list, default=(0.7, 0.1, 0.2), help="train,val,test fractions")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scrnet", description="Ultrasound segmentation network tools.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", help="train a model and write logs and checkpoints")
    _add_data_args(p)
    p.add_argument("--val-synth", dest="val_synth", type=int, default=0,
                   help="with --synth: size of a separate generated validation set (0 validates on the training set)")
    _add_model_args(p)
    g = p.add_argument_group("optimisation")
    g.add_argument("--epochs", type=int, default=100)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--lr", type=float, default=1e-4)
    g.add_argument("--weight-decay", dest="weight_decay", type=float, default=5e-4)
    g.add_argument("--anneal-factor", dest="anneal_factor", type=float, default=0.2)
    g.add_argument("--patience", type=int, default=10)
    g.add_argument("--min-delta", dest="min_delta", type=float, default=1e-4)
    g.add_argument("--bce-weight", dest="bce_weight", type=float, default=0.5)
    g.add_argument("--dice-eps", dest="dice_eps", type=float, default=1.0)
    g.add_argument("--augment", type=_bool, default=True, help="true/false")
    g.add_argument("--no-augment", dest="augment", action="store_false")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("eval", help="evaluate a checkpoint and write metrics.csv")
    _add_data_args(p)
    p.add_argument("--subset", choices=("all", "train", "val", "test"), default="all",
                   help="with --data: which split to score")
    _add_model_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict", help="write mask and overlay images for input files")
    p.add_argument("inputs", nargs="+", help="PPM/PGM/PNG images")
    p.add_argument("--size", type=_size, default=(256, 256), help="network input size")
    _add_model_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--tol", type=float, default=None, help="override every check's tolerance")
    p.add_argument("--only", action="append", default=[], help="check name (repeatable or comma list)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--list", action="store_true", help="list registered checks and exit")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            stored = read_config(args.config)
        except (OSError, ValueError) as exc:
            parser.error(f"--config: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
        dests = {a.dest for a in sub._actions}  # noqa: SLF001
        defaults = {}
        for key, raw in stored.items():
            if key not in _TYPED or key not in dests:
                continue
            try:
                defaults[key] = None if raw == "none" else _TYPED[key](raw)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                parser.error(f"--config: bad value for {key}: {exc}")
        # the stored data source only applies when no source is given on the command line
        if args.command in ("train", "eval") and (args.data is not None or args.synth is not None):
            defaults.pop("data", None)
            defaults.pop("synth", None)
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


def model_config(args) -> ModelConfig:
    return ModelConfig(
        depth=args.depth, widths=tuple(args.widths), split_ratio=args.split_ratio, squeeze_ratio=args.squeeze_ratio,
        gwc_groups=args.gwc_groups, gn_groups=args.gn_groups, ablate_fam=args.ablate_fam, seed=args.seed,
    ).validate()


def resolved_config(args) -> str:
    keys = ["data", "synth", "synth_seed", "val_synth", "size", "split", "depth", "widths", "split_ratio",
            "squeeze_ratio", "gwc_groups", "gn_groups", "ablate_fam", "seed", "epochs", "batch", "lr",
            "weight_decay", "anneal_factor", "patience", "min_delta", "bce_weight", "dice_eps", "augment"]
    lines = [f"command={args.command}"]
    lines += [f"{k}={_fmt(getattr(args, k))}" for k in keys]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _datasets(args):
    """(train, val, test) for a dataset root, or a generated training set."""
    if args.synth is not None:
        if args.synth < 1:
            raise DatasetError("no samples")
        train = synth_generate(args.synth, args.size, args.synth_seed)
        n_val = getattr(args, "val_synth", 0)
        val = synth_generate(n_val, args.size, args.synth_seed + 1) if n_val else []
        return train, val, []
    if args.data is None:
        raise DatasetError("one of --data or --synth is required")
    samples = load_dataset(args.data, args.size)
    return split_dataset(samples, args.split, args.seed)


def cmd_train(args) -> int:
    out = Path(args.out)
    _stage("output", out.mkdir, parents=True, exist_ok=True)
    cfg = _stage("config", model_config, args)
    _stage("output", (out / CONFIG_NAME).write_text, resolved_config(args))
    train, val, _ = _stage("data", _datasets, args)
    model = _stage("model", build_model, cfg)
    print(f"model: {count_params(model)} parameters; train {len(train)} / val {len(val) or len(train)} samples")
    opt = OptimState(lr=args.lr, weight_decay=args.weight_decay, anneal_factor=args.anneal_factor,
                     patience=args.patience, min_delta=args.min_delta)
    loss_cfg = LossConfig(args.bce_weight, args.dice_eps)
    aug = AugmentConfig(seed=args.seed) if args.augment else None
    rows = _stage(
        "training", train_loop, model, train, val, opt, epochs=args.epochs, batch=args.batch, seed=args.seed,
        loss_cfg=loss_cfg, augment_cfg=aug, checkpoint_dir=out, on_epoch=lambda r: print(format_row(r), flush=True),
    )
    _stage("output", write_log_csv, rows, out / "train_log.csv")
    return 0


def _eval_samples(args) -> list[Sample]:
    train, val, test = _datasets(args)
    if args.synth is not None:
        return train
    return {"all": train + val + test, "train": train, "val": val, "test": test}[args.subset]


def cmd_eval(args) -> int:
    out = Path(args.out)
    cfg = _stage("config", model_config, args)
    model = _stage("checkpoint", load_checkpoint, args.checkpoint, cfg)
    samples = _stage("data", _eval_samples, args)
    if not samples:
        raise StageError("data", DatasetError("no samples"))
    samples = sorted(samples, key=lambda s: s.id)
    _, report = _stage("evaluation", evaluate, model, samples, batch=args.batch, threshold=args.threshold)
    _stage("output", out.mkdir, parents=True, exist_ok=True)
    _stage("output", write_metrics_csv, report, out / "metrics.csv")
    agg = report.rows()[-1]
    print(" ".join(f"{k}={v:.6f}" if isinstance(v, float) else f"{k}={v}" for k, v in agg.items()))
    return 0


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one 4-neighbour outside the mask (image edge counts as outside)."""
    m = np.pad(mask.astype(bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    inner = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return core & ~inner


def overlay(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """(3,H,W) image with the mask boundary drawn in pure red."""
    out = image.copy()
    edge = boundary(mask)
    out[0][edge] = 1.0
    out[1][edge] = 0.0
    out[2][edge] = 0.0
    return out


def cmd_predict(args) -> int:
    out = Path(args.out)
    cfg = _stage("config", model_config, args)
    model = _stage("checkpoint", load_checkpoint, args.checkpoint, cfg)
    _stage("output", out.mkdir, parents=True, exist_ok=True)
    failed = 0
    for path in args.inputs:
        try:
            image = image_from_uint8(read_image_file(path))
            h, w = image.shape[1:]
            x = np.clip(resize_bilinear(image, args.size), 0.0, 1.0)
            dummy = Sample(x, np.zeros((1,) + tuple(args.size)), Path(path).stem)
            prob = predict_probs(model, [dummy])[0]
            mask = resize_nearest((prob >= args.threshold).astype(np.float64), (h, w))[0]
            stem = Path(path).stem
            write_mask(out / f"{stem}_mask.pgm", mask)
            write_image(out / f"{stem}_overlay.ppm", overlay(image, mask))
            print(f"{path}: {int(mask.sum())} foreground pixels")
        except Exception as exc:  # noqa: BLE001 - keep going with the remaining files
            failed += 1
            print(f"error: predict: {path}: {exc}", file=sys.stderr)
    return 1 if failed else 0


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import REGISTRY, format_table, run_suite

    if args.list:
        for name, check in REGISTRY.items():
            print(f"{name:<24} {check.kind:<9} tol {check.tol:.0e}")
        return 0
    only = [n.strip() for item in args.only for n in item.split(",") if n.strip()]
    results = _stage("gradcheck", run_suite, only or None, args.tol, args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} checks passed")
    return 0


def cmd_synth(args) -> int:
    if args.n < 1:
        raise StageError("synth", ValueError("--n must be >= 1"))
    samples = _stage("synth", synth_generate, args.n, args.size, args.seed)
    _stage("output", write_dataset, samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth}


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

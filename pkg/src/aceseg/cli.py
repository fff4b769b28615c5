"""Command-line entry point wiring data generation, training, evaluation,
gradient checking, and head comparison into reproducible experiments.

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 training divergence. Every command is deterministic given its flags.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from types import SimpleNamespace

import numpy as np

from .data import SceneDataset, SceneSpec, write_dataset
from .errors import (
    ConfigError,
    DivergenceError,
    FormatError,
    GeometryError,
    IncompatibleModelError,
    LabelError,
    MetricError,
    ShapeError,
)
from .gradcheck import grad_check, registered_ops
from .heads import HeadConfig, head_summary
from .metrics import (
    DEFAULT_SCALES,
    evaluate_dataset,
    format_report,
    write_per_class_csv,
)
from .model import SegModel
from .train import (
    TrainConfig,
    adjusted_base_lr,
    load_model_checkpoint,
    run_training,
    save_model_checkpoint,
    write_metrics_csv,
)

log = logging.getLogger("aceseg")

_USAGE_ERRORS = (ConfigError, FormatError, GeometryError, ShapeError,
                 LabelError, MetricError, IncompatibleModelError,
                 FileNotFoundError, NotADirectoryError)

DEFAULTS: dict[str, dict] = {
    "gen-data": {
        "out": None, "num": 240, "size": 64, "classes": 4, "seed": 0,
        "shapes": 5, "min_size": 6, "max_size": 48,
    },
    "train": {
        "data": None, "head": "ace", "epochs": 15, "batch": 4,
        "base_lr": 0.001, "crop": 64, "seed": 0, "out": "model.ckpt",
        "csv": None, "channels": 128, "val_frac": 0.1, "val_count": None,
        "aux_weight": 0.2, "momentum": 0.9, "weight_decay": 0.0001,
        "scale_lo": 0.5, "scale_hi": 2.0, "ace_fuse": "cascade",
        "ace_version": "v2",
    },
    "eval": {
        "data": None, "ckpt": None, "multiscale": False, "scales": None,
        "flip": False, "split": "val", "val_frac": 0.1, "val_count": None,
        "iou_csv": None,
    },
    "compare-heads": {
        "data": None, "epochs": 15, "batch": 4, "seed": 0, "base_lr": 0.001,
        "crop": 64, "out": "compare_out", "channels": 128, "val_frac": 0.1,
        "val_count": None, "aux_weight": 0.2,
    },
    "gradcheck": {
        "op": None, "seed": 0, "epsilon": 1e-6, "tolerance": 1e-4,
    },
}

_REQUIRED = {
    "gen-data": ("out",),
    "train": ("data",),
    "eval": ("data", "ckpt"),
    "compare-heads": ("data",),
    "gradcheck": ("op",),
}

_CONVERTERS = {
    "out": str, "num": int, "size": int, "classes": int, "seed": int,
    "shapes": int, "min_size": int, "max_size": int, "data": str,
    "head": str, "epochs": int, "batch": int, "base_lr": float, "crop": int,
    "csv": str, "channels": int, "val_frac": float, "val_count": int,
    "aux_weight": float, "momentum": float, "weight_decay": float,
    "scale_lo": float, "scale_hi": float, "ace_fuse": str, "ace_version": str,
    "ckpt": str, "multiscale": lambda s: s.lower() in ("1", "true", "yes"),
    "flip": lambda s: s.lower() in ("1", "true", "yes"), "split": str,
    "iou_csv": str, "op": str, "epsilon": float, "tolerance": float,
    "scales": lambda s: s,
}


def _setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("ACESEG_LOG", "info").lower(), logging.INFO)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(handler)
    root.setLevel(level)
    log.setLevel(level)


def _read_config_file(path: str) -> dict[str, str]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = text.partition("=")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _merge(command: str, ns: argparse.Namespace) -> SimpleNamespace:
    merged = dict(DEFAULTS[command])
    config_path = getattr(ns, "config", None)
    if config_path:
        for key, raw in _read_config_file(config_path).items():
            if key not in merged:
                raise ConfigError(f"config key '{key}' unknown to {command}")
            merged[key] = _CONVERTERS[key](raw)
    for key in merged:
        provided = getattr(ns, key, None)
        if provided is not None:
            merged[key] = provided
    for key in _REQUIRED[command]:
        if merged[key] is None:
            raise ConfigError(f"{command} requires --{key.replace('_', '-')}")
    for key in sorted(merged):
        log.info("config %s=%s", key, merged[key])
    return SimpleNamespace(**merged)


def _parse_scales(raw) -> list[float]:
    if isinstance(raw, (list, tuple)):
        return [float(v) for v in raw]
    try:
        return [float(tok) for tok in str(raw).split(",") if tok]
    except ValueError as exc:
        raise ConfigError(f"bad --scales value {raw!r}") from exc


def _split_dataset(ds: SceneDataset, val_frac: float, val_count) -> tuple[list, list]:
    n_val = int(val_count) if val_count is not None else max(1, round(len(ds) * val_frac))
    return ds.split(n_val)


def _build_model(head: str, ds: SceneDataset, cfg: SimpleNamespace) -> SegModel:
    head_cfg = HeadConfig(
        in_channels=cfg.channels,
        num_classes=ds.classes,
        ace_fuse=getattr(cfg, "ace_fuse", "cascade"),
        ace_version=getattr(cfg, "ace_version", "v2"),
    )
    return SegModel(head, ds.classes, backbone_channels=cfg.channels,
                    head_cfg=head_cfg, seed=cfg.seed)


def _train_one(head: str, ds: SceneDataset, cfg: SimpleNamespace,
               ckpt_path: str, csv_path: str) -> tuple[float, float]:
    train_idx, val_idx = _split_dataset(ds, cfg.val_frac, cfg.val_count)
    tc = TrainConfig(base_lr=cfg.base_lr, batch_size=cfg.batch, epochs=cfg.epochs,
                     crop=cfg.crop, seed=cfg.seed, aux_weight=cfg.aux_weight,
                     momentum=getattr(cfg, "momentum", 0.9),
                     weight_decay=getattr(cfg, "weight_decay", 0.0001),
                     scale_lo=getattr(cfg, "scale_lo", 0.5),
                     scale_hi=getattr(cfg, "scale_hi", 2.0))
    log.info("training head=%s on %d scenes (%d held out), effective base lr %r",
             head, len(train_idx), len(val_idx), adjusted_base_lr(tc))
    model = _build_model(head, ds, cfg)
    log.info("%s", head_summary(model.head))
    records = run_training(model, ds, train_idx, tc)
    write_metrics_csv(csv_path, records)
    save_model_checkpoint(ckpt_path, model)
    cm = evaluate_dataset(model, ds, val_idx)
    return cm.pix_acc(), cm.mean_iou()


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: SimpleNamespace) -> int:
    spec = SceneSpec(canvas=cfg.size, classes=cfg.classes, shapes=cfg.shapes,
                     min_size=cfg.min_size, max_size=cfg.max_size, seed=cfg.seed)
    try:
        os.makedirs(cfg.out, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {cfg.out}: {exc}") from exc
    write_dataset(cfg.out, spec, cfg.num)
    print(f"wrote {cfg.num} scenes to {cfg.out}")
    return 0


def cmd_train(cfg: SimpleNamespace) -> int:
    ds = SceneDataset(cfg.data)
    csv_path = cfg.csv or os.path.splitext(cfg.out)[0] + ".csv"
    pixacc, miou = _train_one(cfg.head, ds, cfg, cfg.out, csv_path)
    print(f"pixAcc={pixacc:.6f} mIoU={miou:.6f}")
    return 0


def cmd_eval(cfg: SimpleNamespace) -> int:
    ds = SceneDataset(cfg.data)
    model = load_model_checkpoint(cfg.ckpt)
    if cfg.split == "all":
        indices = list(range(len(ds)))
    else:
        train_idx, val_idx = _split_dataset(ds, cfg.val_frac, cfg.val_count)
        indices = val_idx if cfg.split == "val" else train_idx
    scales = None
    if cfg.scales is not None:
        scales = _parse_scales(cfg.scales)
    elif cfg.multiscale:
        scales = list(DEFAULT_SCALES)
    cm = evaluate_dataset(model, ds, indices, scales=scales, flip=cfg.flip)
    print(format_report(cm))
    print("class,iou")
    for c, v in enumerate(cm.per_class_iou()):
        print(f"{c},{'nan' if np.isnan(v) else repr(float(v))}")
    if cfg.iou_csv:
        write_per_class_csv(cfg.iou_csv, cm)
    return 0


def cmd_compare_heads(cfg: SimpleNamespace) -> int:
    ds = SceneDataset(cfg.data)
    os.makedirs(cfg.out, exist_ok=True)
    rows = []
    for head, label in (("aspp", "ASPP"), ("ppm", "PPM"), ("ace", "Proposed")):
        ckpt = os.path.join(cfg.out, f"head_{head}.ckpt")
        csv = os.path.join(cfg.out, f"head_{head}.csv")
        pixacc, miou = _train_one(head, ds, cfg, ckpt, csv)
        rows.append((label, pixacc, miou))
    lines = [f"{'head':<10}{'pixAcc':>10}{'mIoU':>10}"]
    lines += [f"{label:<10}{pixacc:>10.4f}{miou:>10.4f}" for label, pixacc, miou in rows]
    table = "\n".join(lines)
    print(table)
    with open(os.path.join(cfg.out, "compare.csv"), "w", newline="") as fh:
        fh.write("head,pixacc,miou\n")
        for label, pixacc, miou in rows:
            fh.write(f"{label},{pixacc!r},{miou!r}\n")
    return 0


def cmd_gradcheck(cfg: SimpleNamespace) -> int:
    report = grad_check(cfg.op, seed=cfg.seed, epsilon=cfg.epsilon,
                        tolerance=cfg.tolerance)
    print(report)
    for name, err in sorted(report.per_input.items()):
        log.debug("input %s: max_rel_err=%.3e", name, err)
    return 0 if report.passed else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aceseg",
        description="Train and compare context-aggregation heads on "
                    "synthetic segmentation scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file; flags win")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out")
    p.add_argument("--num", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--shapes", type=int)
    p.add_argument("--min-size", dest="min_size", type=int)
    p.add_argument("--max-size", dest="max_size", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one head and report held-out metrics")
    common(p)
    p.add_argument("--data")
    p.add_argument("--head", choices=("ppm", "aspp", "ace"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--crop", type=int)
    p.add_argument("--out")
    p.add_argument("--csv")
    p.add_argument("--channels", type=int)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--aux-weight", dest="aux_weight", type=float)
    p.add_argument("--ace-fuse", dest="ace_fuse", choices=("cascade", "concat"))
    p.add_argument("--ace-version", dest="ace_version", choices=("v1", "v2"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--multiscale", action="store_true", default=None)
    p.add_argument("--scales")
    p.add_argument("--flip", action="store_true", default=None)
    p.add_argument("--split", choices=("val", "train", "all"))
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--iou-csv", dest="iou_csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-heads",
                       help="train PPM, ASPP, and the proposed head under "
                            "identical budgets")
    common(p)
    p.add_argument("--data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--base-lr", dest="base_lr", type=float)
    p.add_argument("--crop", type=int)
    p.add_argument("--out")
    p.add_argument("--channels", type=int)
    p.add_argument("--val-frac", dest="val_frac", type=float)
    p.add_argument("--val-count", dest="val_count", type=int)
    p.add_argument("--aux-weight", dest="aux_weight", type=float)
    p.set_defaults(func=cmd_compare_heads)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p.add_argument("--op", help=f"one of: {', '.join(registered_ops())}")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tolerance", type=float)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        merged = _merge(args.command, args)
        return args.func(merged)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

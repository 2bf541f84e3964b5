"""Command-line entry points: train, eval, ablate, visualize.

Every command takes ``--config PATH``, repeatable ``--set key=value``
overrides, ``--out DIR``, and ``--seed N``, resolves the full
configuration, and snapshots it to ``config.resolved`` in the output
directory so any run can be reproduced from its artifacts alone.
"""

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import visualize as viz
from .backbone import build_model, count_parameters, predict
from .config import (
    ConfigError,
    load_dataset,
    make_backbone_spec,
    make_dgdm_config,
    make_train_config,
    parse_value,
    resolve_config,
    write_resolved,
)
from .evaluation import (
    BBox,
    evaluate_model,
    extract_cam,
    heatmap_to_bbox,
    write_metrics_csv,
    write_metrics_json,
)
from .sagd import ADAPTIVE_7
from .training import load_checkpoint, train

SWEEP_DEFAULTS = {
    "block_size": ("1", "2", "3"),
    "beta": ("2", "2.5", "3", "3.5"),
    "stage": ("stage1", "stage1+2", "full"),
}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="config file path")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dgdm",
        description="Train, evaluate, sweep, and visualize the dual-attention "
        "dropblock localization pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_common(p_eval)
    p_eval.add_argument("--checkpoint", type=Path, required=True)
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="sweep one axis and tabulate metrics")
    _add_common(p_ablate)
    p_ablate.add_argument("--axis", required=True, choices=sorted(SWEEP_DEFAULTS))
    p_ablate.add_argument(
        "--values", default=None, help="comma-separated sweep values (axis defaults otherwise)"
    )
    p_ablate.set_defaults(func=cmd_ablate)

    p_viz = sub.add_parser("visualize", help="render heatmap and box overlays")
    _add_common(p_viz)
    p_viz.add_argument("--checkpoint", type=Path, required=True)
    p_viz.add_argument("--images", type=Path, nargs="+", required=True)
    p_viz.add_argument(
        "--annotations",
        type=Path,
        default=None,
        help="annotation file supplying ground-truth boxes (matched by file name)",
    )
    p_viz.set_defaults(func=cmd_visualize)
    return parser


def _prepare_out_dir(args, config) -> Path:
    out = args.out or Path(f"run_{time.strftime('%Y%m%d-%H%M%S')}_{config['seed']}")
    for sub in ("logs", "reports", "viz"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_resolved(config, out / "config.resolved")
    return out


def _num_classes(config, samples) -> int:
    if config["data.source"] == "folder":
        return max(s.label for s in samples) + 1
    return config["data.n_classes"]


def cmd_train(args) -> int:
    config = resolve_config(args.config, args.overrides, args.seed)
    out = _prepare_out_dir(args, config)
    samples = load_dataset(config, "train")
    spec = make_backbone_spec(config, num_classes=_num_classes(config, samples))
    model = build_model(spec, make_dgdm_config(config), init_seed=config["seed"])
    stats = train(
        model,
        samples,
        make_train_config(config),
        log_path=out / "logs" / "train_log.csv",
        checkpoint_path=out / "checkpoint.pt",
    )
    final = stats[-1]
    print(
        f"trained {final.epoch} epochs on {len(samples)} samples "
        f"({count_parameters(model)} parameters): "
        f"loss {final.mean_loss:.4f}, accuracy {100 * final.train_acc:.2f}%"
    )
    print(f"checkpoint: {out / 'checkpoint.pt'}")
    return 0


def _evaluate(config, model, samples, out: Path, tag: str = "metrics"):
    records, report = evaluate_model(
        model, samples, threshold_fraction=config["eval.threshold_fraction"]
    )
    write_metrics_json(report, out / "reports" / f"{tag}.json")
    write_metrics_csv(report, out / "reports" / f"{tag}.csv")
    viz.plot_metrics_figure(report, out / "reports" / f"{tag}.png")
    return records, report


def cmd_eval(args) -> int:
    config = resolve_config(args.config, args.overrides, args.seed)
    out = _prepare_out_dir(args, config)
    model, meta = load_checkpoint(args.checkpoint)
    samples = load_dataset(config, "test")
    top = max(s.label for s in samples)
    if top >= model.spec.num_classes:
        raise ConfigError(
            f"checkpoint classifies {model.spec.num_classes} classes but the "
            f"dataset has labels up to {top}"
        )
    _, report = _evaluate(config, model, samples, out)
    print(
        f"gt_loc={report.gt_loc:.2f} top1_clas={report.top1_clas:.2f} "
        f"top1_loc={report.top1_loc:.2f} (n={report.n_records})"
    )
    print(f"reports: {out / 'reports'}")
    return 0


def _sweep_values(axis: str, values) -> list[str]:
    raw = values.split(",") if values else list(SWEEP_DEFAULTS[axis])
    cleaned = [v.strip() for v in raw if v.strip()]
    if not cleaned:
        raise ConfigError(f"empty sweep for axis {axis}")
    return cleaned


def _apply_sweep_value(config: dict, axis: str, value: str) -> dict:
    swept = dict(config)
    if axis == "block_size":
        if value == ADAPTIVE_7:
            swept["sagd.adaptive"] = ADAPTIVE_7
        else:
            size = parse_value("sagd.block_size_high", value)
            swept["sagd.adaptive"] = "fixed"
            swept["sagd.block_size_high"] = size
            swept["sagd.block_size_low"] = size
    elif axis == "beta":
        swept["cagd.beta"] = parse_value("cagd.beta", value)
        swept["dgdm.stage"] = "full"  # the beta sweep exercises the channel mask
    elif axis == "stage":
        swept["dgdm.stage"] = parse_value("dgdm.stage", value)
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}")
    return swept


def cmd_ablate(args) -> int:
    config = resolve_config(args.config, args.overrides, args.seed)
    out = _prepare_out_dir(args, config)
    values = _sweep_values(args.axis, args.values)
    train_set = load_dataset(config, "train")
    test_set = load_dataset(config, "test")
    num_classes = _num_classes(config, train_set)

    rows = []
    for value in values:
        swept = _apply_sweep_value(config, args.axis, value)
        spec = make_backbone_spec(swept, num_classes=num_classes)
        model = build_model(spec, make_dgdm_config(swept), init_seed=swept["seed"])
        train(model, train_set, make_train_config(swept))
        _, report = evaluate_model(
            model, test_set, threshold_fraction=swept["eval.threshold_fraction"]
        )
        rows.append(
            {
                "axis": args.axis,
                "value": value,
                "stage": swept["dgdm.stage"],
                "gt_loc": report.gt_loc,
                "top1_clas": report.top1_clas,
                "top1_loc": report.top1_loc,
                "n_records": report.n_records,
            }
        )
        print(
            f"{args.axis}={value}: gt_loc={report.gt_loc:.2f} "
            f"top1_clas={report.top1_clas:.2f} top1_loc={report.top1_loc:.2f}"
        )

    table = out / "reports" / f"ablation_{args.axis}.csv"
    with open(table, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    viz.plot_sweep_figure(rows, args.axis, out / "reports" / f"ablation_{args.axis}.png")
    print(f"sweep table: {table}")
    return 0


def _load_annotation_boxes(path: Path) -> dict:
    boxes: dict[str, list[BBox]] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ConfigError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        rel, *numbers = parts
        x_min, y_min, x_max, y_max, _ = (int(v) for v in numbers)
        boxes.setdefault(Path(rel).name, []).append(BBox(x_min, y_min, x_max, y_max))
    return boxes


def cmd_visualize(args) -> int:
    config = resolve_config(args.config, args.overrides, args.seed)
    out = _prepare_out_dir(args, config)
    model, _ = load_checkpoint(args.checkpoint)
    weights = model.classifier_weights().detach()
    gt_lookup = _load_annotation_boxes(args.annotations) if args.annotations else {}
    downsamples = sum(stage.downsample for stage in model.spec.stages)
    min_side = 2**downsamples

    skipped = 0
    written = 0
    for path in args.images:
        try:
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        except Exception as err:
            print(f"warning: skipping unreadable image {path}: {err}", file=sys.stderr)
            skipped += 1
            continue
        image = arr.transpose(2, 0, 1)
        height, width = image.shape[1:]
        if min(height, width) < min_side:
            print(
                f"warning: skipping {path}: smaller than the model's minimum "
                f"input side {min_side}",
                file=sys.stderr,
            )
            skipped += 1
            continue
        x = torch.from_numpy(image)[None].to(next(model.parameters()).dtype)
        scores, feats = predict(model, x)
        pred_class = int(scores.argmax(dim=1)[0])
        heat = extract_cam(feats[0], weights[pred_class], (height, width))
        pred_box = heatmap_to_bbox(heat, config["eval.threshold_fraction"])
        gt_boxes = gt_lookup.get(Path(path).name, ())

        stem = Path(path).stem
        viz.save_image_png(image, out / "viz" / f"{stem}_input.png")
        viz.save_heatmap_png(heat, out / "viz" / f"{stem}_heatmap.png")
        overlay = viz.make_overlay(image, heat, gt_boxes, pred_box)
        viz.save_overlay_png(overlay, out / "viz" / f"{stem}_overlay.png")
        written += 1
        print(f"{path}: predicted class {pred_class}, box {pred_box}")

    print(f"wrote {written} overlay sets to {out / 'viz'}; skipped {skipped}")
    return 0 if written else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

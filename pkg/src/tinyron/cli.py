"""Command-line entry point.

Subcommands: gen-data, train, eval, detect, proposals and gradcheck.
"""

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path

from tinyron.domain.enums import ShapeKind
from tinyron.domain.errors import (
    ConfigurationError,
    NumericError,
    StorageError,
    TinyRonError,
)
from tinyron.evaluation import (
    IOU_THRESH,
    evaluate,
    recall_curve,
    write_metrics,
    write_recall_curve,
)
from tinyron.formats import read_ppm
from tinyron.gradcheck import CASES, DEFAULT_SUITE, run_suite
from tinyron.inference import CONF_THRESH, NMS_THRESH, TOP_K, detect, proposals_batch
from tinyron.network import build
from tinyron.repository import CheckpointRepository, DatasetRepository, load_model
from tinyron.settings import Settings, format_config, load_config
from tinyron.shapes import gen_shapes
from tinyron.trainer import train

logger = logging.getLogger(__name__)

DEFAULT_N_LIST = "1,5,10,20,50,100"


def _int_list(text: str) -> list[int]:
    try:
        values = [int(item) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        msg = f"Expected comma-separated integers, got {text!r}"
        raise ConfigurationError(msg) from exc
    if not values or any(v < 1 for v in values):
        msg = f"Expected positive integers, got {text!r}"
        raise ConfigurationError(msg)
    return values


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        msg = f"Failed to write {path}"
        raise StorageError(msg) from exc


def cmd_gen_data(out: Path, n: int, seed: int, size: int) -> None:
    """Render n synthetic shape images and save them as a dataset directory."""
    samples = gen_shapes(n, seed=seed, image_size=size)
    DatasetRepository(out).save(samples, [kind.value for kind in ShapeKind])


def cmd_train(
    config: Path | None,
    data: Path,
    out: Path,
    overrides: Sequence[str],
) -> None:
    """Train a fresh model on a dataset; checkpoints, config and loss log go to out."""
    model_config, train_config = load_config(config, overrides)
    classes, samples = DatasetRepository(data).load()
    if model_config.num_classes != len(classes):
        msg = (
            f"num_classes={model_config.num_classes} but dataset {data} "
            f"has {len(classes)} classes"
        )
        raise ConfigurationError(msg)

    checkpoints = CheckpointRepository(out)
    _write_text(out / "config.txt", format_config(model_config, train_config))
    model = build(model_config, train_config.seed)
    result = train(
        model,
        samples,
        train_config,
        checkpoints=checkpoints,
        log_path=out / "train.csv",
    )
    if result.reports:
        logger.info(
            "Trained %d iterations, final loss %.4f, %d skipped updates",
            len(result.reports),
            result.reports[-1].total,
            result.skipped,
        )


def cmd_eval(
    settings: Settings,
    weights: Path,
    data: Path,
    metrics_out: Path,
    *,
    iou: float,
    coco_style: bool,
    all_point: bool,
    per_class_csv: Path | None,
) -> None:
    """Score a checkpoint on a dataset and write the metrics report."""
    model = load_model(weights)
    classes, samples = DatasetRepository(data).load()
    report = evaluate(
        model,
        samples,
        classes,
        iou_thresh=iou,
        all_point=all_point,
        coco_style=coco_style,
        batch_size=settings.eval_batch_size,
    )
    write_metrics(report, metrics_out, per_class_csv)
    sys.stdout.write(f"mAP@{iou:g}: {report.mean_ap:.4f}\n")
    for row in report.per_class:
        sys.stdout.write(f"  {row.name:<10} {row.ap:.4f}\n")
    if report.coco_ap is not None:
        sys.stdout.write(f"AP@[0.5:0.95]: {report.coco_ap:.4f}\n")


def cmd_detect(
    weights: Path,
    image: Path,
    out: Path,
    *,
    conf: float,
    nms: float,
    top_k: int,
) -> None:
    """Detect objects in one PPM image and write them as JSON lines."""
    model = load_model(weights)
    found = detect(model, read_ppm(image), conf, nms, top_k, image_id=image.stem)
    _write_text(
        out,
        "".join(json.dumps(d.to_record()) + "\n" for d in found),
    )
    logger.info("Wrote %d detections to %s", len(found), out)


def cmd_proposals(
    settings: Settings,
    weights: Path,
    data: Path,
    n_list: Sequence[int],
    curve_out: Path,
    *,
    iou: float,
) -> None:
    """Recall of the top-N proposals for every N in n_list, written as CSV."""
    model = load_model(weights)
    _, samples = DatasetRepository(data).load()
    top = max(n_list)
    boxes = []
    for start in range(0, len(samples), settings.eval_batch_size):
        chunk = samples[start : start + settings.eval_batch_size]
        for ranked in proposals_batch(model, [s.image for s in chunk], top):
            boxes.append([p.box for p in ranked])
    curve = recall_curve(boxes, [s.annotation.objects for s in samples], n_list, iou)
    write_recall_curve(curve, curve_out)
    for n, recall in curve:
        sys.stdout.write(f"recall@{n}: {recall:.4f}\n")


def cmd_gradcheck(ops: str, coordinates: int, seed: int) -> None:
    """Run the 64-bit finite-difference suite; fails if any op misses its tolerance."""
    names = None if ops == "all" else [name.strip() for name in ops.split(",")]
    results = run_suite(names, coordinates=coordinates, seed=seed)
    for result in results:
        sys.stdout.write(
            f"{result.op:<16} {result.coordinates:>5} coords  "
            f"max rel {result.max_rel_error:.2e}  "
            f"{'ok' if result.passed else 'FAILED'}\n",
        )
    failed = [r.op for r in results if not r.passed]
    if failed:
        msg = f"Gradient check failed for {', '.join(failed)}"
        raise NumericError(msg)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tinyron",
        description="Desk-scale RON detector",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    gen = subparsers.add_parser("gen-data", help="Generate a synthetic shapes dataset")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--size", type=int, default=128, help="Image edge in pixels")

    train_parser = subparsers.add_parser("train", help="Train a model end to end")
    train_parser.add_argument("--config", type=Path, default=None)
    train_parser.add_argument("--data", type=Path, required=True)
    train_parser.add_argument("--out", type=Path, required=True)
    train_parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override a config key; may be repeated",
    )

    eval_parser = subparsers.add_parser("eval", help="Compute VOC-style mAP")
    eval_parser.add_argument("--weights", type=Path, required=True)
    eval_parser.add_argument("--data", type=Path, required=True)
    eval_parser.add_argument("--metrics-out", type=Path, required=True)
    eval_parser.add_argument("--iou", type=float, default=IOU_THRESH)
    eval_parser.add_argument(
        "--coco-style",
        action="store_true",
        help="Also report AP averaged over IoU 0.5:0.95",
    )
    eval_parser.add_argument(
        "--all-point",
        action="store_true",
        help="Integrate every recall step instead of 11-point interpolation",
    )
    eval_parser.add_argument("--per-class-csv", type=Path, default=None)

    detect_parser = subparsers.add_parser("detect", help="Detect objects in one image")
    detect_parser.add_argument("--weights", type=Path, required=True)
    detect_parser.add_argument("--image", type=Path, required=True)
    detect_parser.add_argument("--out", type=Path, required=True)
    detect_parser.add_argument("--conf", type=float, default=CONF_THRESH)
    detect_parser.add_argument("--nms", type=float, default=NMS_THRESH)
    detect_parser.add_argument("--top-k", type=int, default=TOP_K)

    proposals_parser = subparsers.add_parser(
        "proposals",
        help="Recall versus proposal count",
    )
    proposals_parser.add_argument("--weights", type=Path, required=True)
    proposals_parser.add_argument("--data", type=Path, required=True)
    proposals_parser.add_argument("--n-list", default=DEFAULT_N_LIST)
    proposals_parser.add_argument("--curve-out", type=Path, required=True)
    proposals_parser.add_argument("--iou", type=float, default=IOU_THRESH)

    grad_parser = subparsers.add_parser(
        "gradcheck",
        help="Finite-difference gradient checks",
    )
    grad_parser.add_argument(
        "--ops",
        default="all",
        help=(
            f"'all' ({', '.join(DEFAULT_SUITE)}) or comma-separated names "
            f"from {', '.join(CASES)}"
        ),
    )
    grad_parser.add_argument("--coordinates", type=int, default=100)
    grad_parser.add_argument("--seed", type=int, default=0)
    return parser


def _dispatch(args: argparse.Namespace, settings: Settings) -> None:
    if args.command == "gen-data":
        cmd_gen_data(args.out, args.n, args.seed, args.size)
    elif args.command == "train":
        cmd_train(args.config, args.data, args.out, args.overrides)
    elif args.command == "eval":
        cmd_eval(
            settings,
            args.weights,
            args.data,
            args.metrics_out,
            iou=args.iou,
            coco_style=args.coco_style,
            all_point=args.all_point,
            per_class_csv=args.per_class_csv,
        )
    elif args.command == "detect":
        cmd_detect(
            args.weights,
            args.image,
            args.out,
            conf=args.conf,
            nms=args.nms,
            top_k=args.top_k,
        )
    elif args.command == "proposals":
        cmd_proposals(
            settings,
            args.weights,
            args.data,
            _int_list(args.n_list),
            args.curve_out,
            iou=args.iou,
        )
    elif args.command == "gradcheck":
        cmd_gradcheck(args.ops, args.coordinates, args.seed)


def main(argv: Sequence[str] | None = None) -> int:
    """Parse argv, run the command and return its exit status."""
    args = _parser().parse_args(argv)
    settings = Settings()
    settings.configure_logging()
    try:
        _dispatch(args, settings)
    except TinyRonError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)  # noqa: TRY400
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

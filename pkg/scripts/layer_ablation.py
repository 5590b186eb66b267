import argparse
import logging
from pathlib import Path

from tinyron.domain.enums import ShapeKind
from tinyron.evaluation import evaluate
from tinyron.network import build
from tinyron.settings import Settings, load_config
from tinyron.shapes import gen_shapes
from tinyron.trainer import train

# --- Inputs / constants ---
COMBINATIONS = ((7,), (6, 7), (5, 6, 7), (4, 5, 6, 7))
TEST_SEED_OFFSET = 10_000

logger = logging.getLogger(__name__)


def _label(scales: tuple[int, ...]) -> str:
    return "+".join(str(s) for s in scales)


def main() -> None:
    """Train one model per detection-scale combination and print mAP per combination."""
    parser = argparse.ArgumentParser(description="Layer-combination ablation")
    parser.add_argument("--config", type=Path, default=Path("configs/shapes.cfg"))
    parser.add_argument("--train-images", type=int, default=2000)
    parser.add_argument("--test-images", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--set", dest="overrides", action="append", default=[])
    args = parser.parse_args()

    settings = Settings()
    settings.configure_logging()

    base_model, base_train = load_config(args.config, args.overrides)
    size = base_model.input_size
    kinds = tuple(ShapeKind)[: base_model.num_classes]
    train_set = gen_shapes(args.train_images, kinds, seed=args.seed, image_size=size)
    test_set = gen_shapes(
        args.test_images,
        kinds,
        seed=args.seed + TEST_SEED_OFFSET,
        image_size=size,
    )
    class_names = [kind.value for kind in kinds]

    rows = []
    for scales in COMBINATIONS:
        model_config = base_model.model_copy(update={"detection_scales": scales})
        train_config = base_train.model_copy(update={"seed": args.seed})
        model = build(model_config, args.seed)
        train(model, train_set, train_config)
        report = evaluate(
            model,
            test_set,
            class_names,
            batch_size=settings.eval_batch_size,
        )
        logger.info("layers %s: mAP %.4f", _label(scales), report.mean_ap)
        rows.append((scales, report))

    header = "".join(f"{name:>10}" for name in class_names)
    print(f"{'layers':<10}{header}{'mAP':>10}")
    for scales, report in rows:
        per_class = {row.name: row.ap for row in report.per_class}
        cells = "".join(
            f"{per_class.get(name, 0.0) * 100:>10.1f}" for name in class_names
        )
        print(f"{_label(scales):<10}{cells}{report.mean_ap * 100:>10.1f}")


if __name__ == "__main__":
    main()

import argparse
import logging
from pathlib import Path

import numpy as np

from tinyron.assigner import pass_fraction
from tinyron.domain.enums import ShapeKind
from tinyron.evaluation import evaluate, objectness_concentration
from tinyron.inference import predict
from tinyron.network import build
from tinyron.settings import Settings, load_config
from tinyron.shapes import gen_shapes
from tinyron.trainer import train

# --- Inputs / constants ---
TEST_SEED_OFFSET = 10_000
GATE_SWEEP = (0.0, 0.01, 0.03, 0.1, 0.3, 0.5, 1.0)

logger = logging.getLogger(__name__)


def main() -> None:
    """Train with and without the objectness prior on one seed and compare."""
    parser = argparse.ArgumentParser(description="Objectness-prior ablation")
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
    train_config = base_train.model_copy(update={"seed": args.seed})

    results = {}
    for use_objectness in (True, False):
        model_config = base_model.model_copy(update={"use_objectness": use_objectness})
        model = build(model_config, args.seed)
        train(model, train_set, train_config)
        report = evaluate(
            model,
            test_set,
            class_names,
            batch_size=settings.eval_batch_size,
        )
        results[use_objectness] = report.mean_ap
        logger.info("objectness=%s: mAP %.4f", use_objectness, report.mean_ap)

        if not use_objectness:
            continue
        inside, outside = objectness_concentration(
            model,
            test_set,
            batch_size=settings.eval_batch_size,
        )
        print(f"mean p_obj on objects {inside:.3f}, on background {outside:.3f}")
        chunks = []
        for start in range(0, len(test_set), settings.eval_batch_size):
            batch = test_set[start : start + settings.eval_batch_size]
            obj = predict(model, [s.image for s in batch]).obj
            if obj is not None:
                chunks.append(obj.reshape(-1))
        probs = np.concatenate(chunks)
        print(f"{'o_p':>6}{'passed':>10}")
        for o_p in GATE_SWEEP:
            print(f"{o_p:>6.2f}{pass_fraction(probs, o_p):>10.4f}")

    print(f"{'objectness':<12}{'mAP':>8}")
    for use_objectness, value in results.items():
        print(f"{'on' if use_objectness else 'off':<12}{value * 100:>8.1f}")
    print(f"drop {(results[True] - results[False]) * 100:.1f} points")


if __name__ == "__main__":
    main()

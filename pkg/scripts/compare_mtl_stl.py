"""Multi-task net versus five single-field baselines on one dataset.

Trains both model kinds with the same budget, saves checkpoints, and
prints the side-by-side per-field report along with parameter counts.

    python3 scripts/compare_mtl_stl.py --data runs/compare --epochs 100
"""

import argparse
import os
import sys
import time

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from thermoplate.cli import _report_lines
from thermoplate.datastore import generate_dataset, load_split
from thermoplate.geometry import BoardGeometry, MaterialParams, default_holes
from thermoplate.grf import GrfConfig
from thermoplate.model import parameter_count, save_checkpoint
from thermoplate.training import TrainConfig, evaluate, train


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="runs/compare")
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--hole-radius", type=float, default=0.015)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--optimizer", default="adadelta",
                   choices=("adam", "adadelta"))
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", default="runs/compare_models")
    return p.parse_args()


def main():
    args = parse_args()
    board = BoardGeometry(holes=default_holes(radius=args.hole_radius))
    mat = MaterialParams()
    if not os.path.exists(os.path.join(args.data, "manifest.json")):
        generate_dataset(board, mat, args.grid, args.grid, GrfConfig(),
                         args.n_train, args.data, 0, split="train",
                         workers=args.workers)
        generate_dataset(board, mat, args.grid, args.grid, GrfConfig(),
                         args.n_test, args.data, 1000, split="test",
                         workers=args.workers)
    train_set, manifest = load_split(args.data, "train")
    test_set, _ = load_split(args.data, "test")
    _, classes = manifest.build_grid()

    os.makedirs(args.out, exist_ok=True)
    results = []
    for kind in ("mta-unet", "unet-stl"):
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          optimizer=args.optimizer, levels=args.levels,
                          base_channels=args.base_channels, seed=args.seed)
        t0 = time.time()
        result = train(train_set, [], kind, cfg, classes, mat)
        dt = time.time() - t0
        path = os.path.join(args.out, f"{kind}.mtaw")
        save_checkpoint(path, result.model,
                        extra={"norm_stats": result.stats.to_dict()})
        n_params = parameter_count(result.model)
        print(f"{kind}: {n_params} parameters, trained in {dt:.0f}s -> {path}",
              file=sys.stderr)
        results.append((kind, evaluate(result.model, test_set,
                                       result.stats, classes)))

    print("\n".join(_report_lines(results)))


if __name__ == "__main__":
    main()

"""Physics-residual trend across training-set sizes.

Trains the multi-task net with the physics term on and off for each
training-set size and seed, then reports the per-field median test MRE.
The interesting regime is small n_train, where the residual term acts as
a label-free regularizer.

    python3 scripts/small_data_study.py --sizes 10 25 50 --seeds 3
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from thermoplate.datastore import generate_dataset, load_split
from thermoplate.geometry import BoardGeometry, MaterialParams, default_holes
from thermoplate.grf import GrfConfig
from thermoplate.solver import LABEL_NAMES
from thermoplate.training import TrainConfig, evaluate, train


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", default="runs/small_data",
                   help="dataset directory (generated on first use)")
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--hole-radius", type=float, default=0.015)
    p.add_argument("--sizes", type=int, nargs="+", default=[10, 25, 50])
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--optimizer", default="adam", choices=("adam", "adadelta"))
    p.add_argument("--pde-weight", type=float, default=0.03)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--workers", type=int, default=4)
    return p.parse_args()


def ensure_data(args, board, mat):
    if not os.path.exists(os.path.join(args.data, "manifest.json")):
        n_train = max(args.sizes)
        generate_dataset(board, mat, args.grid, args.grid, GrfConfig(),
                         n_train, args.data, 0, split="train",
                         workers=args.workers)
        generate_dataset(board, mat, args.grid, args.grid, GrfConfig(),
                         args.n_test, args.data, 1000, split="test",
                         workers=args.workers)


def run_cell(train_set, test_set, classes, mat, args, physics, seed):
    weights = ((1 / 3, 1 / 3, 1 / 3, args.pde_weight) if physics else None)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                      optimizer=args.optimizer, physics=physics,
                      fixed_weights=weights, levels=args.levels,
                      base_channels=args.base_channels, seed=seed)
    t0 = time.time()
    result = train(train_set, [], "mta-unet", cfg, classes, mat)
    metrics = evaluate(result.model, test_set, result.stats, classes)
    return metrics.mre_pct, time.time() - t0


def main():
    args = parse_args()
    board = BoardGeometry(holes=default_holes(radius=args.hole_radius))
    mat = MaterialParams()
    ensure_data(args, board, mat)

    train_all, manifest = load_split(args.data, "train")
    test_set, _ = load_split(args.data, "test")
    _, classes = manifest.build_grid()

    print(f"{'n_train':>8} {'physics':>8} " +
          " ".join(f"{f:>10}" for f in LABEL_NAMES) + "   (median MRE %)")
    for n in args.sizes:
        subset = train_all[:n]
        for physics in (False, True):
            rows = []
            for seed in range(args.seeds):
                mre, dt = run_cell(subset, test_set, classes, mat, args,
                                   physics, seed)
                rows.append(mre)
                print(f"  seed {seed} ({dt:.0f}s): " +
                      " ".join(f"{f}={mre[f]:.1f}" for f in LABEL_NAMES),
                      file=sys.stderr)
            med = {f: float(np.median([r[f] for r in rows]))
                   for f in LABEL_NAMES}
            print(f"{n:>8} {str(physics):>8} " +
                  " ".join(f"{med[f]:>10.2f}" for f in LABEL_NAMES))


if __name__ == "__main__":
    main()

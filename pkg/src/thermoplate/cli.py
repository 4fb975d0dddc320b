"""Command-line surface: gen / solve / train / eval / export.

Exit codes: 0 success, 1 usage error, 2 runtime error.  `eval` accepts
--model repeatedly so one invocation produces a side-by-side per-field
MAE/MRE table for several checkpoints (multi-task vs baseline).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .geometry import (DEFAULT_SIDE, BoardGeometry, MaterialParams,
                       build_grid, default_holes)
from .grf import GrfConfig
from .solver import FIELD_NAMES, LABEL_NAMES, generate_sample
from . import datastore
from .datastore import (DatasetError, SampleFormatError, generate_dataset,
                        load_split, read_sample, write_sample)
from .model import load_checkpoint, save_checkpoint
from .training import Metrics, NormStats, TrainConfig, evaluate, history_lines, train

# Five-stop linear colormap used by `export`; dark violet to yellow.  Fixed
# so exporting one field twice yields byte-identical PNGs.
COLORMAP_STOPS = (
    (0.00, (68, 1, 84)),
    (0.25, (59, 82, 139)),
    (0.50, (33, 145, 140)),
    (0.75, (94, 201, 98)),
    (1.00, (253, 231, 37)),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_holes(spec: str) -> tuple:
    if spec == "default":
        return default_holes()
    if spec == "none":
        return ()
    holes = []
    for part in spec.split(";"):
        values = part.split(",")
        if len(values) != 3:
            raise UsageError(f"bad hole triple {part!r}; expected cx,cy,r")
        holes.append(tuple(float(v) for v in values))
    return tuple(holes)


def _build_parser() -> _Parser:
    parser = _Parser(prog="thermoplate",
                     description="Thermal plate dataset, solver, and model tools")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a solver-labeled dataset")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--grid", type=int, default=64)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--split", choices=datastore.SPLITS, default="train")
    gen.add_argument("--lengthscale", type=float, default=0.04)
    gen.add_argument("--tmin", type=float, default=0.0)
    gen.add_argument("--tmax", type=float, default=100.0)
    gen.add_argument("--holes", default="default",
                     help='"default", "none", or "cx,cy,r;cx,cy,r;..."')
    gen.add_argument("--workers", type=int, default=1)

    solve = sub.add_parser("solve", help="solve one temperature field")
    solve.add_argument("--temp", required=True,
                       help="input sample (.tesf) or CSV of temperatures")
    solve.add_argument("--out", required=True)
    solve.add_argument("--holes", default="default")

    tr = sub.add_parser("train", help="train a model on a dataset")
    tr.add_argument("--data", required=True)
    tr.add_argument("--val", default=None,
                    help="dataset dir for validation (default: val split of --data)")
    tr.add_argument("--model", choices=("mta-unet", "unet-stl"), default="mta-unet")
    tr.add_argument("--physics", choices=("on", "off"), default="off")
    tr.add_argument("--balance", choices=("fixed", "uncertainty"), default="fixed")
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--batch", type=int, default=16)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--optimizer", choices=("adadelta", "adam"), default="adadelta")
    tr.add_argument("--levels", type=int, default=3)
    tr.add_argument("--base-channels", type=int, default=16)
    tr.add_argument("--out", required=True, help="checkpoint path (.mtaw)")

    ev = sub.add_parser("eval", help="evaluate checkpoints on a dataset")
    ev.add_argument("--model", action="append", required=True,
                    help="checkpoint path; repeat to compare models")
    ev.add_argument("--data", required=True)
    ev.add_argument("--report", required=True)

    ex = sub.add_parser("export", help="render one field as PNG and/or CSV")
    ex.add_argument("--sample", required=True)
    ex.add_argument("--field", choices=FIELD_NAMES, required=True)
    ex.add_argument("--png", default=None)
    ex.add_argument("--csv", default=None)
    return parser


def colorize(values: np.ndarray) -> np.ndarray:
    """Map a 2D field to uint8 RGB through the fixed five-stop colormap."""
    vmin, vmax = float(values.min()), float(values.max())
    span = vmax - vmin
    t = np.zeros_like(values) if span == 0 else (values - vmin) / span
    positions = np.array([p for p, _ in COLORMAP_STOPS])
    channels = np.array([c for _, c in COLORMAP_STOPS], dtype=np.float64)
    rgb = np.stack([np.interp(t, positions, channels[:, k]) for k in range(3)],
                   axis=-1)
    return np.round(rgb).astype(np.uint8)


def _export_png(path: str, values: np.ndarray, field: str):
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    info = PngInfo()
    info.add_text("field", field)
    info.add_text("min", repr(float(values.min())))
    info.add_text("max", repr(float(values.max())))
    image = Image.fromarray(colorize(values), mode="RGB")
    tmp = f"{path}.tmp.{os.getpid()}"
    image.save(tmp, format="PNG", pnginfo=info)
    os.replace(tmp, path)


def _export_csv(path: str, values: np.ndarray):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        for row in values:
            writer.writerow([f"{v:.17g}" for v in row])
    os.replace(tmp, path)


def _read_temperature(path: str):
    """TESF sample or bare CSV grid of temperatures."""
    if path.endswith(".csv"):
        values = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        return np.ascontiguousarray(values)
    return read_sample(path).T


def _cmd_gen(args) -> int:
    board = BoardGeometry(length=DEFAULT_SIDE, height=DEFAULT_SIDE,
                          holes=_parse_holes(args.holes))
    grf = GrfConfig(length_scale=args.lengthscale, t_min=args.tmin,
                    t_max=args.tmax, seed=0)
    manifest = generate_dataset(board, MaterialParams(), args.grid, args.grid,
                                grf, args.n, args.out, args.seed,
                                split=args.split, workers=args.workers)
    print(f"wrote {args.n} samples to {args.out} "
          f"(split {args.split}, {sum(len(v) for v in manifest.splits.values())} total)")
    return 0


def _cmd_solve(args) -> int:
    temperature = _read_temperature(args.temp)
    ny, nx = temperature.shape
    if nx != ny:
        raise DatasetError("solve expects a square grid")
    board = BoardGeometry(length=DEFAULT_SIDE, height=DEFAULT_SIDE,
                          holes=_parse_holes(args.holes))
    grid, classes = build_grid(board, nx, ny)
    sample = generate_sample(grid, classes, MaterialParams(), temperature,
                             pin_rigid_modes=not board.holes)
    write_sample(args.out, sample)
    print(f"solved {nx}x{ny} field -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    train_set, manifest = load_split(args.data, "train")
    if not train_set:
        raise DatasetError(f"{args.data}: train split is empty")
    if args.val is not None:
        val_set, _ = load_split(args.val, "val", fallback="train")
    else:
        val_set, _ = load_split(args.data, "val")
    _, classes = manifest.build_grid()

    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch,
                      optimizer=args.optimizer, physics=args.physics == "on",
                      balance=args.balance, levels=args.levels,
                      base_channels=args.base_channels, seed=args.seed)
    result = train(train_set, val_set, args.model, cfg, classes,
                   manifest.material)

    extra = {"norm_stats": result.stats.to_dict(),
             "physics": cfg.physics, "balance": cfg.balance,
             "epochs": cfg.epochs, "batch_size": cfg.batch_size,
             "optimizer": cfg.optimizer, "train_seed": cfg.seed,
             "data_dir": os.path.abspath(args.data)}
    save_checkpoint(args.out, result.model, extra=extra)
    history_path = f"{args.out}.history.txt"
    with open(history_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(history_lines(result.history)) + "\n")
    last = result.history[-1] if result.history else {}
    print(f"trained {args.model} for {args.epochs} epochs "
          f"-> {args.out} (history: {history_path})")
    if "total" in last:
        print(f"final mean batch loss {last['total']:.6e}")
    return 0


def _report_lines(results: list[tuple[str, Metrics]]) -> list[str]:
    lines = ["# per-field metrics: MAE, MAE std, MRE %, MRE % std, raw MRE %"]
    for label, metrics in results:
        lines.append(f"model {label}")
        lines.append(f"{'field':>6} {'MAE':>14} {'MAE_std':>14} "
                     f"{'MRE_pct':>12} {'MRE_std':>12} {'MRE_raw_pct':>14}")
        for name in LABEL_NAMES:
            if name not in metrics.mae:
                continue
            lines.append(
                f"{name:>6} {metrics.mae[name]:>14.6e} {metrics.mae_std[name]:>14.6e} "
                f"{metrics.mre_pct[name]:>12.4f} {metrics.mre_pct_std[name]:>12.4f} "
                f"{metrics.mre_raw_pct[name]:>14.4f}")
    return lines


def _cmd_eval(args) -> int:
    test_set, manifest = load_split(args.data, "test", fallback="train")
    if not test_set:
        raise DatasetError(f"{args.data}: no test or train samples to evaluate")
    _, classes = manifest.build_grid()

    results = []
    for path in args.model:
        net, extra = load_checkpoint(path)
        if "norm_stats" in extra:
            stats = NormStats.from_dict(extra["norm_stats"])
        elif manifest.norm_stats is not None:
            stats = NormStats.from_dict(manifest.norm_stats)
        else:
            raise DatasetError(f"{path}: checkpoint has no normalization stats "
                               "and neither does the dataset manifest")
        results.append((os.path.basename(path), evaluate(net, test_set, stats, classes)))

    lines = _report_lines(results)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _cmd_export(args) -> int:
    if args.png is None and args.csv is None:
        raise UsageError("export needs --png and/or --csv")
    sample = read_sample(args.sample)
    values = sample.field(args.field)
    if args.png:
        _export_png(args.png, values, args.field)
        print(f"wrote {args.png}")
    if args.csv:
        _export_csv(args.csv, values)
        print(f"wrote {args.csv}")
    return 0


_COMMANDS = {"gen": _cmd_gen, "solve": _cmd_solve, "train": _cmd_train,
             "eval": _cmd_eval, "export": _cmd_export}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DatasetError, SampleFormatError, OSError, ValueError,
            RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

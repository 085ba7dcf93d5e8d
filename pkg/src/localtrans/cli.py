"""``localtrans`` command line: gen-data, train, eval, align, stitch, bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
Metrics go to stdout as an aligned table followed by ``key=value`` lines.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import runtime
from .bench import bench_case, totals
from .config import ConfigError, read_config
from .data import (
    AugmentRanges,
    DatasetFormatError,
    DatasetInvariantError,
    GenConfig,
    generate_pairs,
    read_dataset,
    write_dataset,
)
from .homography.geometry import (
    DegenerateConfigurationError,
    DegenerateHomographyError,
    PointAtInfinityError,
    warp,
)
from .homography.imageio import ImageFormatError, read_pnm, write_pnm
from .homography.stitch import grid_stitch
from .lak import AttentionBudgetError, DEFAULT_ORACLE_BUDGET
from .network import CascadeError, LocalTrans, ModelConfig
from .tensor.checkpoint import CheckpointError
from .tensor.core import NumericalError, set_default_dtype
from .train import TrainConfig, Trainer, TrainingError, evaluate, load_model

log = logging.getLogger("localtrans")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class MetricsReport:
    """Rows for a human-readable table plus flat ``key=value`` metrics."""

    def __init__(self):
        self.columns: list[str] = []
        self.rows: list[list[Any]] = []
        self.values: dict[str, Any] = {}

    def add(self, key: str, value: Any) -> None:
        self.values[key] = value

    def table(self) -> str:
        if not self.rows:
            return ""
        cells = [self.columns] + [[_fmt(v) for v in row] for row in self.rows]
        widths = [max(len(str(r[i])) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(str(v).rjust(w) for v, w in zip(r, widths)) for r in cells]
        return "\n".join(lines) + "\n"

    def key_values(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.values.items())

    def render(self) -> str:
        return self.table() + self.key_values()


def _fmt(v: Any) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


# --- commands ---------------------------------------------------------------------------------

GEN_KEYS = ("n", "seed", "patch_size", "rho", "margin", "cross_res", "augment", "noise_sigma",
            "source", "image_dir", "out")
TRAIN_KEYS = ("data", "val", "out", "steps", "batch_size", "lr", "lr_schedule", "lr_min", "levels",
              "channels", "boundary", "radii", "precision", "overfit", "eval_every", "checkpoint_every",
              "seed", "shared_encoder", "scaled_correlation")


def _merge_config(args: argparse.Namespace, allowed: Sequence[str]) -> None:
    """Fill options left at their defaults from ``--config``; explicit flags win."""
    if not getattr(args, "config", None):
        return
    for key, value in read_config(args.config, allowed).items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)


def _default(args: argparse.Namespace, key: str, value: Any) -> Any:
    v = getattr(args, key, None)
    return value if v is None else v


def cmd_gen_data(args: argparse.Namespace) -> MetricsReport:
    _merge_config(args, GEN_KEYS)
    if args.out is None:
        raise ConfigError("gen-data needs --out")
    sigma = _default(args, "noise_sigma", 0.02)
    cfg = GenConfig(
        patch_size=_default(args, "patch_size", 128),
        rho=float(_default(args, "rho", 32.0)),
        margin=_default(args, "margin", 32),
        cross_res=_default(args, "cross_res", 1),
        augment=_default(args, "augment", True),
        ranges=AugmentRanges(noise_sigma_max=sigma),
        source=_default(args, "source", "procedural"),
        image_dir=args.image_dir,
    )
    n, seed = _default(args, "n", 8), _default(args, "seed", 0)
    count = write_dataset(generate_pairs(cfg, n, seed), args.out)
    rep = MetricsReport()
    rep.add("samples", count)
    rep.add("master_seed", seed)
    rep.add("out", args.out)
    return rep


def _model_config(args: argparse.Namespace, size: int) -> ModelConfig:
    radii = args.radii
    if isinstance(radii, int):
        radii = (radii,)
    elif isinstance(radii, str):
        radii = tuple(int(r) for r in radii.split(","))
    return ModelConfig(
        levels=_default(args, "levels", 3),
        channels=_default(args, "channels", 32),
        height=size,
        width=size,
        radii=radii,
        boundary=_default(args, "boundary", "mask"),
        shared_encoder=_default(args, "shared_encoder", True),
        scaled_correlation=_default(args, "scaled_correlation", False),
        seed=_default(args, "seed", 0),
    )


def cmd_train(args: argparse.Namespace) -> MetricsReport:
    _merge_config(args, TRAIN_KEYS)
    if args.data is None or args.out is None:
        raise ConfigError("train needs --data and --out")
    precision = _default(args, "precision", "float32")
    if precision not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {precision!r}")
    set_default_dtype(np.dtype(precision))
    pairs = read_dataset(args.data)
    if args.overfit:
        pairs = pairs[: args.overfit]
    val = read_dataset(args.val) if args.val else None
    size = pairs[0].target.shape[1]
    if args.resume:
        model, state = load_model(args.resume)
    else:
        model, state = LocalTrans(_model_config(args, size)), None
    tcfg = TrainConfig(
        steps=_default(args, "steps", 2000),
        batch_size=_default(args, "batch_size", 8),
        lr=float(_default(args, "lr", 1e-4)),
        lr_schedule=_default(args, "lr_schedule", "constant"),
        lr_min=float(_default(args, "lr_min", 0.0)),
        eval_every=_default(args, "eval_every", 0),
        checkpoint_every=_default(args, "checkpoint_every", 0),
        seed=_default(args, "seed", 0),
    )
    trainer = Trainer(model, pairs, tcfg, val_pairs=val, out_dir=args.out)
    if state is not None:
        trainer.restore(state)
    steps_per_epoch = max(1, -(-len(pairs) // tcfg.batch_size))
    rep = MetricsReport()
    rep.columns = ["epoch", "step", "train_loss"]
    epoch_losses: list[float] = []

    def on_step(t: Trainer, loss: float) -> None:
        epoch_losses.append(loss)
        if t.step % steps_per_epoch == 0 or t.step == tcfg.steps:
            epoch = -(-t.step // steps_per_epoch)
            rep.rows.append([epoch, t.step, float(np.mean(epoch_losses))])
            log.info("epoch %d step %d loss %.5f", epoch, t.step, np.mean(epoch_losses))
            epoch_losses.clear()

    trainer.run(on_step)
    final = evaluate(model, pairs)
    rep.add("steps", trainer.step)
    rep.add("train_corner_error_mean", final.mean)
    rep.add("identity_baseline_mean", final.baseline_mean)
    if val:
        v = evaluate(model, val)
        rep.add("val_corner_error_mean", v.mean)
        rep.add("val_identity_baseline_mean", v.baseline_mean)
    if trainer.history.losses:
        rep.add("final_loss", trainer.history.losses[-1])
    rep.add("checkpoint", str(Path(args.out) / "best.ltck"))
    return rep


def cmd_eval(args: argparse.Namespace) -> MetricsReport:
    model, _ = load_model(args.checkpoint)
    pairs = read_dataset(args.data)
    size = pairs[0].target.shape[1:]
    if size != (model.cfg.height, model.cfg.width):
        raise ConfigError(f"dataset patches {size} do not match the model input {model.cfg.height}x{model.cfg.width}")
    res = evaluate(model, pairs, image_metrics=True)
    rep = MetricsReport()
    rep.add("samples", len(pairs))
    rep.add("corner_error_mean", res.mean)
    rep.add("corner_error_median", res.median)
    rep.add("identity_baseline_mean", res.baseline_mean)
    rep.add("psnr", res.psnr)
    rep.add("ssim", res.ssim)
    return rep


def cmd_align(args: argparse.Namespace) -> MetricsReport:
    model, _ = load_model(args.checkpoint)
    target, unaligned = read_pnm(args.target), read_pnm(args.unaligned)
    target, unaligned = (np.repeat(im, 3, axis=0) if im.shape[0] == 1 else im for im in (target, unaligned))
    h = model.estimator()(target, unaligned)
    warped = warp(unaligned, h, out_size=target.shape[1:])
    mosaic = np.concatenate([target[:1], warped[1:]], axis=0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "homography.txt").write_text(h.to_text() + "\n")
    write_pnm(out / "warped.ppm", warped)
    write_pnm(out / "mosaic.ppm", mosaic)
    rep = MetricsReport()
    rep.add("homography", h.to_text().replace(" ", ","))
    rep.add("out", str(out))
    return rep


def cmd_stitch(args: argparse.Namespace) -> MetricsReport:
    model, _ = load_model(args.checkpoint)
    try:
        rows, cols = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--grid must look like 3x3, got {args.grid!r}") from None
    global_img = read_pnm(args.global_image)
    locals_ = []
    for i in range(rows):
        for j in range(cols):
            path = Path(args.locals) / f"{i}_{j}.ppm"
            if not path.exists():
                raise FileNotFoundError(f"missing local image {path}")
            locals_.append((read_pnm(path), (i, j)))
    mosaic, layout = grid_stitch(global_img, locals_, model.estimator(), rows, cols, args.scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pnm(out, mosaic)
    rep = MetricsReport()
    rep.add("cells", rows * cols)
    rep.add("failed_cells", len(layout.failed))
    rep.add("out", str(out))
    return rep


def cmd_bench(args: argparse.Namespace) -> MetricsReport:
    sizes = [int(s) for s in args.sizes.split(",")]
    radii = [int(r) for r in args.radii.split(",")]
    modes = args.modes.split(",")
    rep = MetricsReport()
    rep.columns = ["mode", "H", "W", "C", "r", "MACs", "map_elements", "wall_ms", "peak_bytes"]
    results = []
    for size in sizes:
        for r in radii:
            for mode in modes:
                try:
                    row = bench_case(size, size, args.channels, r, mode, budget=args.budget)
                except AttentionBudgetError as exc:
                    log.warning("%s", exc)
                    rep.add(f"refused_{mode}_{size}_r{r}", f"budget={args.budget}")
                    continue
                results.append(row)
                rep.rows.append([row.mode, row.height, row.width, row.channels, row.radius, row.macs,
                                 row.map_elements, round(row.wall_ms, 3), row.peak_bytes])
    by_key = {}
    for row in results:
        by_key.setdefault((row.height, row.radius), {})[row.mode] = row
    for (size, r), pair in by_key.items():
        if "local" in pair and "global" in pair and (2 * r + 1) ** 2 < size * size:
            if not pair["local"].map_elements < pair["global"].map_elements:
                raise NumericalError(f"local map not smaller than global at {size}x{size}, r={r}")
            rep.add(f"map_ratio_{size}_r{r}", pair["local"].map_elements / pair["global"].map_elements)
    for mode in modes:
        t = totals(results, mode)
        rep.add(f"{mode}_map_elements_total", t["map_elements"])
        rep.add(f"{mode}_macs_total", t["macs"])
    return rep


# --- parser ------------------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--threads", type=int, default=None, help="worker threads (default: $LOCALTRANS_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    p.add_argument("--verbose", "-v", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="localtrans", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic pair dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--patch-size", dest="patch_size", type=int)
    g.add_argument("--rho", type=float)
    g.add_argument("--margin", type=int)
    g.add_argument("--cross-res", dest="cross_res", type=int)
    g.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--source", choices=("procedural", "image-directory"))
    g.add_argument("--image-dir", dest="image_dir")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--config")
    t.add_argument("--data")
    t.add_argument("--val")
    t.add_argument("--out")
    t.add_argument("--resume")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-schedule", dest="lr_schedule", choices=("constant", "cosine"))
    t.add_argument("--lr-min", dest="lr_min", type=float)
    t.add_argument("--levels", type=int)
    t.add_argument("--channels", type=int)
    t.add_argument("--radii", help="comma-separated per-level window radii")
    t.add_argument("--boundary", choices=("mask", "zero-pad"))
    t.add_argument("--precision", choices=("float32", "float64"))
    t.add_argument("--overfit", type=int, help="train on the first N samples only")
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="corner error and image metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("align", help="align one image pair")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--unaligned", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_align)

    s = sub.add_parser("stitch", help="place a grid of local images on a global view")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--global", dest="global_image", required=True)
    s.add_argument("--locals", required=True, help="directory of <row>_<col>.ppm images")
    s.add_argument("--grid", required=True, help="rows x cols, e.g. 3x3")
    s.add_argument("--scale", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stitch)

    b = sub.add_parser("bench", help="local vs dense attention cost")
    b.add_argument("--sizes", default="16,32,64")
    b.add_argument("--radii", default="2,3,4")
    b.add_argument("--channels", type=int, default=32)
    b.add_argument("--modes", default="local,global")
    b.add_argument("--budget", type=int, default=DEFAULT_ORACLE_BUDGET)
    b.set_defaults(func=cmd_bench)

    for p in (g, t, e, a, s, b):
        _common(p)
    return parser


CONFIG_ERRORS = (ConfigError, ValueError, KeyError)
DATA_ERRORS = (DatasetFormatError, DatasetInvariantError, ImageFormatError, CheckpointError, OSError)
NUMERIC_ERRORS = (NumericalError, TrainingError, CascadeError, DegenerateHomographyError,
                  DegenerateConfigurationError, PointAtInfinityError, FloatingPointError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        runtime.configure(args.threads, args.deterministic)
        report = args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CONFIG_ERRORS as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(report.render())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: synth, train, eval, kernel-study, export-kernels,
describe-model, render.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as lio
from .configs import describe, get_config
from .experiment import ConfigError, ExperimentConfig, load_config
from .hollow import make_annulus_mask
from .losses import CLASS_NAMES
from .networks import build_network
from .synth import HollowObjectParams, gen_dataset, gen_hollow_object, kernel_scale_study, study_panel
from .train import DataError, NumericalAbort, build_for, evaluate, load_dataset, predict_stack, restore_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

# RGB per class, painted in this order so the tumor stays on top
CLASS_COLORS = {"outer_wall": (255, 255, 0), "inner_wall": (0, 200, 0), "tumor": (255, 0, 0)}

log = logging.getLogger("hollowconv")


def thread_limit():
    """Cap BLAS threads from LORCK_THREADS (1 = deterministic single-thread mode)."""
    value = os.environ.get("LORCK_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"LORCK_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise ConfigError("LORCK_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _config(args) -> ExperimentConfig:
    return load_config(args.config, args.set)


def latest_checkpoint(run: Path) -> Path:
    ckpts = sorted(run.glob("ckpt-*.lorck"))
    if not ckpts:
        raise DataError(f"no checkpoint in {run}")
    return ckpts[-1]


def cmd_synth(args) -> int:
    cfg = _config(args)
    target = Path(args.out or cfg.dataset or Path(cfg.out) / "data")
    data = gen_dataset(cfg.n_train, cfg.n_test, cfg.seq_len, cfg.size, cfg.phantom, cfg.data_seed)
    data.save(target)
    print(f"wrote {data.images.shape[0]} stacks of {cfg.seq_len} x {cfg.size}x{cfg.size} to {target}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    result = train(cfg, resume=args.resume)
    print(f"trained {cfg.model} to iteration {result.iteration}; checkpoint {result.checkpoint}")
    print(evaluate(result.net, result.data).table())
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg)
    net = build_for(cfg, data)
    ckpt = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(Path(cfg.out))
    restore_checkpoint(ckpt, net)
    result = evaluate(net, data, args.split)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / f"eval-{args.split}.csv")
    print(f"{cfg.model} ({ckpt.name}, {args.split} split, {len(result.per_stack)} stacks)")
    print(result.table())
    return EXIT_OK


def cmd_kernel_study(args) -> int:
    sizes = [int(k) for k in args.kernels.split(",")]
    params = HollowObjectParams(size=args.size, semi_axes=(args.radius, args.radius), wall=args.wall,
                                noise=args.noise)
    obj = gen_hollow_object(params, seed=args.seed)
    result = kernel_scale_study(obj, sizes)
    for k, s in zip(result.kernel_sizes, result.scores):
        print(f"K={k:<3d} K/W={k / args.wall:5.2f} sharpness={s:.4f}")
    print(f"argmax K={result.best}")
    if args.out:
        lio.write_pgm(args.out, study_panel(obj, result))
        print(f"panel written to {args.out}")
    return EXIT_OK


def cmd_export_kernels(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg)
    net = build_for(cfg, data)
    ckpt = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(Path(cfg.out))
    restore_checkpoint(ckpt, net)
    out = Path(args.out or Path(cfg.out) / "kernels")
    out.mkdir(parents=True, exist_ok=True)
    params = dict(net.named_parameters())
    names = list(net.masks) or [n for n in params if n.endswith("conv.weight")][:1]
    for name in names:
        w = params[name].data
        tag = name.replace(".", "_")
        lio.save(out / f"{tag}.lorck", w)
        if name in net.masks:
            lio.save(out / f"{tag}.mask.lorck", np.ascontiguousarray(net.masks[name][0, 0]).astype(np.uint8))
            outside = np.abs(w[~net.masks[name]]).max(initial=0.0)
            print(f"{name}: {w.shape}, max |w| outside mask = {outside}")
        for o in range(w.shape[0]):
            for i in range(w.shape[1]):
                lio.write_pgm(out / f"{tag}_{o:03d}_{i:03d}.pgm", w[o, i])
    print(f"exported {len(names)} kernel bank(s) to {out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    cfg = _config(args)
    print(describe(get_config(cfg.model)))
    ncfg = cfg.network_config()
    scaled = [f"{s.name} {s.kernel_size}" for s in ncfg.layers if s.kernel_kind != "dense"]
    if scaled and cfg.kernel_scale != 1.0:
        print(f"training kernels at scale {cfg.kernel_scale:g}: " + ", ".join(scaled))
    masks = {k: make_annulus_mask(k, (k / 2, k / 2), max(1.0, min(k / 5, k / 2 - 0.5))) for k in ncfg.hollow_sizes()}
    net = build_network(ncfg, masks, seed=cfg.seed)
    print(f"parameters (width x{cfg.width:g}): {net.count_parameters()}")
    return EXIT_OK


def colorize(masks: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """(3, H, W) class maps -> (H, W, 3) uint8 with the class color code."""
    rgb = np.zeros(masks.shape[1:] + (3,), dtype=np.uint8)
    for c, name in enumerate(CLASS_NAMES):
        rgb[masks[c] >= threshold] = CLASS_COLORS[name]
    return rgb


def render_panel(image: np.ndarray, truth: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Image | ground truth | prediction, each H x W, side by side."""
    gray = lio.to_uint8(image)
    return np.concatenate([np.repeat(gray[..., None], 3, axis=2), colorize(truth), colorize(pred)], axis=1)


def cmd_render(args) -> int:
    cfg = _config(args)
    data = load_dataset(cfg)
    net = build_for(cfg, data)
    ckpt = Path(args.checkpoint) if args.checkpoint else latest_checkpoint(Path(cfg.out))
    restore_checkpoint(ckpt, net)
    stacks = list(data.split("test"))
    if args.stack >= len(stacks):
        raise DataError(f"test split has {len(stacks)} stacks, asked for {args.stack}")
    s = stacks[args.stack]
    pred = predict_stack(net, data.images[s], data.mean, data.std)
    out = Path(args.out or Path(cfg.out) / "panels")
    out.mkdir(parents=True, exist_ok=True)
    for t in range(data.images.shape[1]):
        panel = render_panel(data.images[s, t, 0], data.masks[s, t], pred[t])
        lio.write_ppm(out / f"stack{args.stack:02d}_slice{t:02d}.ppm", panel)
    print(f"wrote {data.images.shape[1]} panels to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hollowconv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key")
        p.set_defaults(func=func)
        return p

    p = with_config("synth", cmd_synth, "generate a phantom dataset")
    p.add_argument("--out", help="dataset directory (default: dataset key or <out>/data)")
    p = with_config("train", cmd_train, "train a model")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = with_config("eval", cmd_eval, "per-class Dice on a split")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p = with_config("export-kernels", cmd_export_kernels, "write hollow kernels as LORCK1 + PGM")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    with_config("describe-model", cmd_describe, "print the layer table of a model")
    p = with_config("render", cmd_render, "write image | truth | prediction PPM panels")
    p.add_argument("--checkpoint")
    p.add_argument("--stack", type=int, default=0)
    p.add_argument("--out")

    p = sub.add_parser("kernel-study", help="boundary highlighting versus kernel size")
    p.add_argument("--kernels", default="3,10,20,40")
    p.add_argument("--size", type=int, default=100)
    p.add_argument("--radius", type=float, default=20.0)
    p.add_argument("--wall", type=float, default=5.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="PGM panel path")
    p.set_defaults(func=cmd_kernel_study)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, lio.FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

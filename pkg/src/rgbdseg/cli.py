"""Command-line entry point: ``rgbdseg <subcommand> ...``.

Exit codes: 0 success, 1 usage or invalid input, 2 file IO, 3 numeric
divergence or a failed gradient check.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, read_flat_config
from .netpbm import NetpbmError, read_pgm, read_ppm, write_pgm
from .optim import DivergenceError
from .posenc import PeSpec, TokenCoords, embedding_matrix, normalize_disparity, similarity_map, to_gray8
from .tensor import NonFiniteError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("rgbdseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pair(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two integers 'u,v', got {text!r}") from None
    return a, b


def _overrides(items: list[str] | None) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- pe-map / embedding-matrix ---------------------------------------------------


def pixel_coords(disparity: np.ndarray, max_disparity: float) -> TokenCoords:
    """One token per pixel: centre coordinates in [0, 1] and normalized disparity."""
    H, W = disparity.shape
    v, u = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    return TokenCoords(u, v, normalize_disparity(disparity, max_disparity))


def pe_similarity(disparity: np.ndarray, target: tuple[int, int], mode: str, channels: int,
                  max_disparity: float) -> np.ndarray:
    """Cosine-similarity field for target pixel ``(u, v)`` = (column, row)."""
    H, W = disparity.shape
    u, v = target
    if not (0 <= u < W and 0 <= v < H):
        raise UsageError(f"target {u},{v} outside the {W}x{H} image")
    spatial = PeSpec(channels, max(H, W))
    depth = PeSpec(channels, max_disparity)
    return similarity_map((v, u), pixel_coords(disparity, max_disparity), spatial, mode, depth)


def cmd_pe_map(args) -> int:
    disp = read_pgm(args.disparity).astype(np.float64)
    if args.image is not None:
        rgb = read_ppm(args.image)
        if rgb.shape[:2] != disp.shape:
            raise UsageError(f"image {rgb.shape[:2]} and disparity {disp.shape} sizes differ")
    sim = pe_similarity(disp, args.target, args.mode, args.channels, args.max_disparity)
    write_pgm(args.out, to_gray8(sim), maxval=255)
    print(f"wrote {args.out} ({args.mode}, target {args.target[0]},{args.target[1]}, "
          f"mean similarity {sim.mean():.4f})")
    return EXIT_OK


def cmd_embedding_matrix(args) -> int:
    mat = embedding_matrix(PeSpec(args.channels, args.max_value), args.positions)
    write_pgm(args.out, to_gray8(mat), maxval=255)
    print(f"wrote {args.out} ({args.positions} positions x {args.channels} channels)")
    return EXIT_OK


# -- data / train / eval -----------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import SceneSpec, write_dataset

    values = read_flat_config(args.spec) if args.spec else {}
    values.update(_overrides(args.set))
    if args.seed is not None:
        values["seed"] = str(args.seed)
    spec = SceneSpec.from_dict(values)
    root = write_dataset(spec, args.count, args.out)
    print(f"wrote {args.count} scenes to {root}")
    return EXIT_OK


def _load_data(root, cfg: RunConfig):
    from .data import load_split, read_scene_spec

    spec, _ = read_scene_spec(root)
    if (spec.height, spec.width) != (cfg.image_size, cfg.image_size):
        raise UsageError(f"dataset is {spec.height}x{spec.width}, config expects {cfg.image_size}")
    if spec.num_classes > cfg.num_classes:
        raise UsageError(f"dataset has {spec.num_classes} classes, model only {cfg.num_classes}")
    data = {"train": load_split(root, "train", cfg.max_disparity)}
    if (Path(root) / "val").is_dir():
        data["val"] = load_split(root, "val", cfg.max_disparity)
    return data


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config, _overrides(args.set))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.updated({"seed": str(args.seed)})
    if getattr(args, "steps", None) is not None:
        cfg = cfg.updated({"steps": str(args.steps)})
    return cfg


def cmd_train(args) -> int:
    from .train import train

    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    data = _load_data(args.data, cfg)
    res = train(cfg.model_config(), data, cfg.train_config(), out)
    miou = "n/a" if res.final_miou is None else f"{res.final_miou:.4f}"
    print(f"trained {cfg.steps} steps; final val mIoU {miou}; outputs in {out}")
    return EXIT_OK


def iou_table(ious, miou) -> str:
    lines = ["class  IoU"]
    lines += [f"{k:>5}  {'-' if v is None else f'{100 * v:.1f}'}" for k, v in enumerate(ious)]
    lines.append(f" mIoU  {'-' if miou is None else f'{100 * miou:.1f}'}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .data import load_split
    from .model import load_checkpoint
    from .train import evaluate

    model = load_checkpoint(args.checkpoint)
    split = load_split(args.data, args.split, model.config.max_disparity)
    loss, conf = evaluate(model, split)
    print(f"{len(split)} {args.split} samples, loss {loss:.4f}")
    print(iou_table(conf.ious(), conf.miou()))
    return EXIT_OK


# -- checks / ablation ---------------------------------------------------------------


def cmd_grad_check(args) -> int:
    from . import gradsuite

    results, seconds = gradsuite.run(args.module, seeds=args.seeds, base_seed=args.seed or 0)
    for r in results:
        print(f"{'ok  ' if r.ok else 'FAIL'} {r.name:<20} max rel error {r.max_rel_error:.3e} "
              f"(tol {r.tol:.0e}, {r.checked} entries, {r.seeds} seeds)")
    worst = max(r.max_rel_error for r in results)
    print(f"max relative error {worst:.3e} over {len(results)} checks in {seconds:.1f}s")
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .ablation import ablation_csv, render_table, run_ablation

    cfg = _run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    data = _load_data(args.data, cfg)
    base_seed = cfg.seed
    runs = run_ablation(data, cfg.model_config(), cfg.train_config(),
                        seeds=range(base_seed, base_seed + args.seeds), jobs=args.jobs)
    (out / "ablation.csv").write_text(ablation_csv(runs, cfg.num_classes))
    table = render_table(runs, cfg.num_classes)
    (out / "table.txt").write_text(table)
    print(table, end="")
    failed = [r for r in runs if not r.ok]
    if failed:
        print(f"{len(failed)} run(s) diverged: " + ", ".join(f"{r.row}/seed {r.seed}" for r in failed))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rgbdseg", description="Depth-aware transformer segmentation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pe-map", help="similarity of one pixel's encoding to all others, as a PGM")
    s.add_argument("--image", type=Path, help="colour image (PPM); only checked for matching size")
    s.add_argument("--disparity", type=Path, required=True, help="disparity map (PGM)")
    s.add_argument("--target", type=_pair, required=True, help="target pixel as column,row")
    s.add_argument("--mode", choices=("2d", "3d"), default="3d")
    s.add_argument("--channels", type=int, default=64)
    s.add_argument("--max-disparity", type=float, default=64.0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_pe_map)

    s = sub.add_parser("embedding-matrix", help="positions x channels encoding table, as a PGM")
    s.add_argument("--channels", type=int, default=128)
    s.add_argument("--positions", type=int, default=64)
    s.add_argument("--max-value", type=float, default=64.0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_embedding_matrix)

    s = sub.add_parser("gen-data", help="render a synthetic RGB-D dataset")
    s.add_argument("--spec", type=Path, help="scene config (key = value)")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a scene key")
    s.set_defaults(func=cmd_gen_data)

    for name, func, help_ in (("train", cmd_train, "train one configuration"),
                              ("ablate", cmd_ablate, "train every ablation row over several seeds")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", type=Path, help="run config (key = value)")
        s.add_argument("--data", type=Path, required=True)
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        if name == "ablate":
            s.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
            s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="per-class IoU of a checkpoint")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--split", default="val")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("grad-check", help="finite-difference gradient checks")
    s.add_argument("--module", choices=("all", "tensor", "attention", "fusion", "model"), default="all")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DivergenceError, NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NetpbmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

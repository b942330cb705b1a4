"""Command-line entry point: ``python -m deblurgs <command> ...``."""
from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .blce import blur_score
from .blursynth import SyntheticSceneSpec, read_dataset, write_dataset, write_f32, write_png
from .evaluation import evaluate
from .geometry import interpolate_pose
from .trainer import TrainConfig, Trainer, load_model

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    def __init__(self, message: str, reported: bool = False):
        super().__init__(message)
        self.reported = reported


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message, reported=True)


def _save_image(path: Path, img: np.ndarray) -> None:
    if path.suffix.lower() == ".png":
        write_png(path, img)
    else:
        write_f32(path, img)


def cmd_synth(args) -> int:
    spec = SyntheticSceneSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    out = write_dataset(spec, args.out)
    print(f"wrote {spec.n_frames} frames to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    ds = read_dataset(args.dataset)
    cfg = TrainConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)
    if args.resume and (out / "state.json").exists():
        tr = Trainer.load(out, ds)
    else:
        tr = Trainer.create(ds, cfg)
    todo = max(cfg.n_iters - tr.iteration, 0)

    def progress(it, rep):
        if args.log_every and it % args.log_every == 0:
            print(f"iter {it} total {rep.total:.5f} l_rgb {rep.l_rgb:.5f} "
                  f"l_depth {rep.l_depth:.5f} t_hat {rep.t_hat:.3f}", file=sys.stderr)
        if args.checkpoint_every and it % args.checkpoint_every == 0:
            tr.save(out)

    tr.train(todo, progress=progress)
    tr.save(out)
    print(f"trained {tr.iteration} iterations; checkpoint in {out}")
    return EXIT_OK


def render_image(model, time: float, pose_mode: str, blurry: bool) -> np.ndarray:
    n = model.n_frames
    if blurry:
        if time != int(time) or not 0 <= time < n:
            raise ValueError("--blurry needs an integer training frame time")
        return model.render_blurry(int(time)).blurry.color
    if pose_mode == "interp":
        if not 0 <= time <= n - 1:
            raise ValueError(f"time {time} outside [0, {n - 1}]")
        lo = min(int(math.floor(time)), n - 2)
        pose = interpolate_pose(model.poses[lo], model.poses[lo + 1], time - lo)
    elif pose_mode == "latent":
        if time != int(time) or not 0 <= time < n:
            raise ValueError("--pose latent needs an integer training frame time")
        pose = model.frame_pose(int(time))
    else:
        idx = int(pose_mode)
        if not 0 <= idx < n:
            raise ValueError(f"pose index {idx} outside [0, {n - 1}]")
        pose = model.poses[idx]
    return model.render_sharp(time, pose).color


def cmd_render(args) -> int:
    pose_mode = args.pose
    if pose_mode not in ("interp", "latent"):
        try:
            int(pose_mode)
        except ValueError:
            raise UsageError("--pose takes a frame index, 'interp' or 'latent'") from None
    model = load_model(args.checkpoint)
    img = render_image(model, args.time, pose_mode, args.blurry)
    _save_image(Path(args.out), img)
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_score(args) -> int:
    ds = read_dataset(args.dataset)
    print("frame,beta")
    for t, frame in enumerate(ds.blurry):
        print(f"{t},{blur_score(frame, args.s, t).beta!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    ds = read_dataset(args.dataset)
    report = evaluate(model, ds, novel_views=not args.no_novel)
    report.write(args.report)
    if args.scatter:
        report.scatter_png(args.scatter)
    for k, v in report.summary().items():
        print(f"{k} {v:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deblurgs", description="Motion-deblurring dynamic Gaussian splatting on the CPU.")
    p.add_argument("--seed", type=int, default=None, help="override the seed of spec or config")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic blurry dataset")
    s.add_argument("spec", help="scene spec JSON")
    s.add_argument("out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="optimize a scene")
    s.add_argument("dataset")
    s.add_argument("config", help="key = value config file")
    s.add_argument("out", help="checkpoint directory")
    s.add_argument("--resume", action="store_true", help="continue from a checkpoint in OUT")
    s.add_argument("--log-every", type=int, default=500)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a sharp or blurry image")
    s.add_argument("checkpoint")
    s.add_argument("--time", type=float, required=True)
    s.add_argument("--pose", default="interp",
                   help="frame index (dataset camera), 'interp' (between dataset cameras) "
                        "or 'latent' (middle latent camera of the frame at --time)")
    kind = s.add_mutually_exclusive_group()
    kind.add_argument("--sharp", dest="blurry", action="store_false")
    kind.add_argument("--blurry", dest="blurry", action="store_true")
    s.add_argument("out", help=".png or .f32 output")
    s.set_defaults(func=cmd_render, blurry=False)

    s = sub.add_parser("score", help="print the blur score of every frame")
    s.add_argument("dataset")
    s.add_argument("--s", type=int, default=20, help="low-frequency window size")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("eval", help="PSNR and correlation report")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("report", help="CSV report path")
    s.add_argument("--scatter", default=None, help="optional PNG scatter of blur score vs exposure")
    s.add_argument("--no-novel", action="store_true", help="skip held-out interpolated views")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        if not exc.reported:
            print(f"deblurgs: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except Exception as exc:
        print(f"deblurgs: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

"""Command-line surface: scene synthesis, training, rendering, evaluation,
and checkpoint inspection.

Exit codes: 0 success, 1 usage error (bad flags, config keys, or argument
values), 2 runtime error (I/O failures, corrupt checkpoints, aborted runs).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import report
from .image import write_ppm
from .scene import Camera
from .sceneio import load_scene
from .synth import make_blob_scene
from .training import (
    TrainConfig,
    load_checkpoint,
    model_from_checkpoint,
    evaluate_model,
    render_model,
    split_views,
    train,
)


class UsageError(Exception):
    """Bad invocation: wrong values rather than a failing operation."""


class _Parser(argparse.ArgumentParser):
    """argparse that follows our exit-code convention for usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Line-oriented ``key = value`` settings with ``#`` comments."""
    settings: dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            key, eq, value = body.partition("=")
            if not eq or not key.strip():
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {body!r}")
            settings[key.strip()] = value.strip()
    return settings


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Built-in defaults, overlaid by the config file, overlaid by flags."""
    mapping: dict[str, object] = {}
    if args.config is not None:
        mapping.update(parse_config_file(args.config))
    for key in (f.name for f in TrainConfig.__dataclass_fields__.values()):
        value = getattr(args, key, None)
        if value is not None:
            mapping[key] = value
    try:
        return TrainConfig.from_mapping(mapping)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    defaults = TrainConfig()

    def flag(name: str, kind, help_text: str):
        default = getattr(defaults, name)
        p.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            type=kind,
            default=None,
            help=f"{help_text} [default {default}]",
        )

    p.add_argument("--config", default=None, help="key = value settings file [default none]")
    flag("iterations", int, "optimization steps")
    flag("k", int, "Gaussians per anchor")
    flag("voxel_size", float, "anchor voxel spacing")
    flag("tau_alpha", float, "opacity retention threshold")
    flag("seed", int, "run seed")
    flag("lr_features", float, "anchor-feature learning rate")
    flag("lr_offsets", float, "offset learning rate")
    flag("lr_scales", float, "anchor-scale learning rate")
    flag("lr_heads", float, "attention/spline-head learning rate")
    flag("lambda_dssim", float, "structural-dissimilarity weight")
    flag("lambda_vol", float, "volume-regularizer weight")
    flag("lambda_nlpd", float, "pyramid perceptual weight")
    flag("kan_hidden", int, "spline-head hidden width")
    flag("snapshot_every", int, "snapshot cadence in iterations (0 = final only)")
    for name in ("use_l1", "disable_nlpd", "disable_hgsa", "disable_kan_cov", "disable_kan_op"):
        p.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            action=argparse.BooleanOptionalAction,
            default=None,
            help=f"{name.replace('_', ' ')} [default {getattr(defaults, name)}]",
        )


def cmd_synth(args: argparse.Namespace) -> None:
    scene = make_blob_scene(
        args.out,
        blob_count=args.blobs,
        views=args.views,
        width=args.width,
        height=args.height,
        seed=args.seed,
        points_per_blob=args.points_per_blob,
    )
    print(f"wrote {scene.view_count} views, {len(scene.cloud)} points to {args.out}")


def cmd_train(args: argparse.Namespace) -> None:
    config = resolve_config(args)
    scene = load_scene(args.scene)
    result = train(scene, config, args.out)
    out = Path(args.out)
    if result.rows:
        report.save_loss_curves(result.rows, out / "loss_curve.png")
        last = result.rows[-1]
        print(f"iteration {last['iter']}: loss {last['loss']:.6f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {result.log_path}")


def _camera_from_args(args: argparse.Namespace) -> Camera:
    if (args.pose is None) == (args.view is None):
        raise UsageError("provide exactly one of --view (with --scene) or --pose")
    if args.pose is not None:
        with open(args.pose) as f:
            return Camera.from_dict(json.load(f))
    if args.scene is None:
        raise UsageError("--view needs --scene to resolve the camera")
    scene = load_scene(args.scene)
    if not 0 <= args.view < scene.view_count:
        raise UsageError(
            f"view index {args.view} out of range 0..{scene.view_count - 1}"
        )
    return scene.cameras[args.view]


def cmd_render(args: argparse.Namespace) -> None:
    camera = _camera_from_args(args)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    write_ppm(render_model(model, camera), args.out)
    print(f"wrote {camera.width}x{camera.height} image to {args.out}")


def cmd_eval(args: argparse.Namespace) -> None:
    scene = load_scene(args.scene)
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    _, test_views = split_views(scene.view_count)
    if args.all_views:
        indices = list(range(scene.view_count))
    elif test_views:
        indices = test_views
    else:
        raise UsageError("scene has no held-out views; pass --all-views to use them all")
    metrics = evaluate_model(model, scene, indices)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.metrics_json(metrics))
    text = report.metrics_text(metrics)
    (out / "metrics.txt").write_text(text)
    report.save_metric_bars(metrics, out / "metric_bars.png")
    pairs = [
        (render_model(model, scene.cameras[i]).data, scene.images[i]) for i in indices
    ]
    report.save_view_strip(pairs, out / "views.png")
    print(text, end="")


def cmd_inspect(args: argparse.Namespace) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    print(f"checkpoint: {args.checkpoint}")
    print(f"config: {json.dumps(ckpt.config.to_dict(), sort_keys=True)}")
    total = 0
    for name in sorted(ckpt.arrays):
        arr = ckpt.arrays[name]
        total += arr.size
        print(f"  {name}  shape {list(arr.shape)}  count {arr.size}")
    print(f"total values: {total}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anchorsplat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic blob scene")
    p.add_argument("--out", required=True, help="scene directory to create")
    p.add_argument("--blobs", type=int, default=5, help="number of blobs [default 5]")
    p.add_argument("--views", type=int, default=9, help="ring camera count [default 9]")
    p.add_argument("--width", type=int, default=32, help="image width [default 32]")
    p.add_argument("--height", type=int, default=32, help="image height [default 32]")
    p.add_argument("--seed", type=int, default=7, help="generator seed [default 7]")
    p.add_argument(
        "--points-per-blob", type=int, default=60, help="cloud samples per blob [default 60]"
    )
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="optimize a model against a scene")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="output directory for artifacts")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint from a camera")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--out", required=True, help="output PPM path")
    p.add_argument("--scene", default=None, help="scene directory (for --view)")
    p.add_argument("--view", type=int, default=None, help="camera index into the scene")
    p.add_argument("--pose", default=None, help="JSON file with one camera record")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics over the held-out views")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--scene", required=True, help="scene directory")
    p.add_argument("--out", required=True, help="output directory for metrics + figures")
    p.add_argument(
        "--all-views",
        action="store_true",
        help="evaluate every view instead of the held-out set",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dump checkpoint metadata")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

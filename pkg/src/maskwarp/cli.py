"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical failure
(non-finite loss or failed gradient check), 4 I/O error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .evaluation import (
    DESK_LENGTHS,
    Trajectory,
    depth_metrics,
    kitti_odometry_errors,
    umeyama_align,
)
from .exceptions import ConfigError, DimensionError, DomainError, NumericalError, SceneError
from .geometry import compose, invert
from .gradcheck import DEFAULT_TOL, run_gradcheck
from .io import (
    FormatError,
    default_output_root,
    load_scene_dir,
    read_float,
    read_kitti_poses,
    save_scene_dir,
    write_float,
    write_json,
    write_png,
)
from .losses import VARIANTS
from .sampling import warp_image
from .scene import build_scene, render_scene
from .training import RunConfig, Trainer, save_trainer_checkpoint, write_loss_csv, write_panels

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

log = logging.getLogger("maskwarp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _scene_kwargs(args):
    kw = {"kind": args.scene, "size": args.size, "n_frames": args.frames, "seed": args.scene_seed}
    if args.scene == "two_plane":
        kw.update(layout=args.layout, occluder=args.occluder, moving_object=args.moving_object)
    return kw


def _add_scene_flags(p):
    p.add_argument("--scene", default="two_plane", choices=["two_plane", "fronto_parallel", "layered"])
    p.add_argument("--size", type=int, default=64, help="image width and height in pixels")
    p.add_argument("--frames", type=int, default=3)
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--layout", default="corner", choices=["corner", "ground"])
    p.add_argument("--occluder", action="store_true")
    p.add_argument("--moving-object", action="store_true")


def _out_dir(args, default_name):
    return Path(args.out) if args.out else Path(args.output_root or default_output_root()) / default_name


# -- subcommands ---------------------------------------------------------------------------


def cmd_synth(args):
    kw = _scene_kwargs(args)
    if kw["size"] < 16:
        raise ConfigError("resolution must be at least 16x16")
    kind = kw.pop("kind")
    scene = build_scene(kind, **kw)
    rendered = render_scene(scene)
    out = _out_dir(args, f"scene-{kind}-seed{args.scene_seed}")
    save_scene_dir(out, scene, rendered)
    print(out)
    return EXIT_OK


def _load_frames(args, config):
    if args.scene_dir:
        scene, rendered = load_scene_dir(args.scene_dir)
    else:
        kw = dict(config.scene)
        scene = build_scene(kw.pop("kind", "two_plane"), **kw)
        rendered = render_scene(scene)
    return scene, rendered


def cmd_train(args):
    if args.config:
        config = RunConfig.from_json(args.config)
    else:
        config = RunConfig(scene=_scene_kwargs(args))
    overrides = {"variant": args.variant, "steps": args.steps, "seed": args.seed}
    d = config.to_dict()
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.weights:
        d["weights"] = {**d["weights"], **json.loads(Path(args.weights).read_text())}
    config = RunConfig.from_dict(d)
    config.train.seed = config.seed
    scene, rendered = _load_frames(args, config)
    out = _out_dir(args, f"run-{config.variant}-seed{config.seed}")
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", config.to_dict())

    trainer = Trainer(rendered.images, rendered.intrinsics, config.snippets, config.variant, config.weights,
                      config.train, n_steps=config.steps)
    history = []
    try:
        for k in range(config.steps):
            history.append(trainer.step())
            if config.checkpoint_every and (k + 1) % config.checkpoint_every == 0:
                save_trainer_checkpoint(out / f"checkpoint-{k + 1:06d}.bin", trainer)
            if args.verbose and (k % max(config.steps // 20, 1) == 0 or k == config.steps - 1):
                log.info("step %d total %.6g rec %.6g", k, history[-1].total, history[-1].rec_plain)
    finally:
        write_loss_csv(out / "losses.csv", history)
    save_trainer_checkpoint(out / "checkpoint.bin", trainer, {"config": config.to_dict()})
    write_panels(out / "panels", trainer)
    (out / "depth").mkdir(exist_ok=True)
    # Only snippet targets: source-frame depth is unconstrained unless the scale term is active.
    for f in sorted({sn.target for sn in trainer.snippets}):
        write_float(out / "depth" / f"{f:06d}.f32", trainer.depth(f))
    pairs = [
        {"snippet": i, "target": sn.target, "source": s, "pose": trainer.pose(i, j).vector.tolist()}
        for i, sn in enumerate(trainer.snippets) for j, s in enumerate(sn.sources)
    ]
    summary = {"variant": config.variant, "steps": config.steps, "final": history[-1].as_row(),
               "initial": history[0].as_row(), "pairs": pairs}
    write_json(out / "summary.json", summary)
    print(out)
    return EXIT_OK


def cmd_warp(args):
    scene, rendered = load_scene_dir(args.scene_dir)
    n = len(rendered.images)
    for f in (args.target, args.source):
        if not 0 <= f < n:
            raise ConfigError(f"frame {f} out of range (scene has {n} frames)")
    tgt, src = rendered.poses[args.target], rendered.poses[args.source]
    pose = compose(invert(src), tgt)
    result = warp_image(rendered.images[args.source], rendered.depths[args.target], pose, rendered.intrinsics)
    out = _out_dir(args, f"warp-{args.target}-from-{args.source}")
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "synth.png", result.image)
    write_float(out / "synth.f32", result.image)
    write_png(out / "validity.png", result.validity.astype(float))
    valid = result.validity
    err = np.abs(result.image - rendered.images[args.target])[valid]
    write_json(out / "warp.json", {"target": args.target, "source": args.source,
                                    "valid_fraction": float(valid.mean()),
                                    "mean_abs_error_valid": float(err.mean()) if err.size else None})
    print(out)
    return EXIT_OK


def cmd_gradcheck(args):
    results, seconds = run_gradcheck(seed=args.seed, size=args.size, tol=args.tol)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:48s} max rel err {r.max_rel_error:.3e} ({r.n_checked})")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {seconds:.1f} s")
    if args.json:
        write_json(args.json, {"seed": args.seed, "seconds": seconds, "results": [r.__dict__ for r in results]})
    return EXIT_NUMERICAL if failed else EXIT_OK


def _depth_files(path, sub="depth"):
    """Map frame index -> depth file for a single file or a directory of frames."""
    path = Path(path)
    if path.is_file():
        return {None: path}
    if (path / sub).is_dir():
        path = path / sub
    elif (path / "depths").is_dir():
        path = path / "depths"
    files = {int(p.stem): p for p in sorted(path.glob("*.f32"))}
    if not files:
        raise FileNotFoundError(f"no depth files under {path}")
    return files


def cmd_eval_depth(args):
    pred = _depth_files(args.pred)
    gt = _depth_files(args.gt, "depths")
    if None in pred or None in gt:
        if len(pred) != 1 or len(gt) != 1:
            raise ConfigError("a single prediction file must be compared with a single ground-truth file")
        pairs = [(None, next(iter(pred.values())), next(iter(gt.values())))]
    else:
        common = sorted(set(pred) & set(gt))
        if args.frames:
            common = [f for f in common if f in set(args.frames)]
        if not common:
            raise ConfigError("prediction and ground truth share no frame indices")
        pairs = [(f, pred[f], gt[f]) for f in common]
    reports = {}
    for f, p, g in pairs:
        rep = depth_metrics(read_float(p).astype(np.float64), read_float(g).astype(np.float64), cap=args.cap,
                            median_scaling=not args.no_median_scaling)
        reports["single" if f is None else str(f)] = rep.to_dict()
    keys = ["abs_rel", "sq_rel", "rmse", "rmse_log", "acc1", "acc2", "acc3"]
    mean = {k: float(np.mean([r[k] for r in reports.values()])) for k in keys}
    report = {"mean": mean, "frames": reports, "median_scaling": not args.no_median_scaling, "cap": args.cap}
    _emit(report, args)
    return EXIT_OK


def cmd_eval_traj(args):
    est = Trajectory.from_matrices(read_kitti_poses(args.est))
    gt = Trajectory.from_matrices(read_kitti_poses(args.gt))
    alignment = None
    if args.align != "none":
        est, al = umeyama_align(est, gt, args.align)
        alignment = {"mode": al.mode, "scale": al.scale, "rotation": al.rotation.tolist(),
                     "translation": al.translation.tolist(), "residual": al.residual}
    lengths = tuple(args.lengths) if args.lengths else DESK_LENGTHS
    rep = kitti_odometry_errors(est, gt, lengths=lengths)
    rep.alignment = args.align
    report = {"t_err": rep.t_err, "r_err": rep.r_err, "n_segments": len(rep.segments), "empty": rep.empty,
              "lengths": list(lengths), "alignment": alignment, "align_mode": args.align,
              "segments": rep.segments if args.segments else None}
    _emit(report, args)
    return EXIT_OK


def _emit(report, args):
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)


# -- parser ----------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="maskwarp", description="View-synthesis losses, masked adversarial training and evaluation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap numeric library threads")
    p.add_argument("--output-root", default=None,
                   help="default parent for outputs (else $MASKWARP_OUTPUT_ROOT, else ./maskwarp-runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic scene directory")
    _add_scene_flags(s)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimize depth, pose and masks on a scene")
    _add_scene_flags(t)
    t.add_argument("--scene-dir", default=None, help="use a directory written by 'synth'")
    t.add_argument("--config", default=None, help="RunConfig JSON file")
    t.add_argument("--weights", default=None, help="JSON file overriding loss weights")
    t.add_argument("--variant", default=None, choices=sorted(VARIANTS))
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("warp", help="warp a source frame into a target with ground-truth depth and pose")
    w.add_argument("--scene-dir", required=True)
    w.add_argument("--target", type=int, default=1)
    w.add_argument("--source", type=int, default=0)
    w.add_argument("--out", default=None)
    w.set_defaults(func=cmd_warp)

    g = sub.add_parser("gradcheck", help="finite-difference check of all analytic gradients")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--tol", type=float, default=DEFAULT_TOL)
    g.add_argument("--json", default=None)
    g.set_defaults(func=cmd_gradcheck)

    e = sub.add_parser("eval-depth", help="depth error metrics as JSON")
    e.add_argument("--pred", required=True, help="depth .f32 file or run/scene directory")
    e.add_argument("--gt", required=True, help="depth .f32 file or scene directory")
    e.add_argument("--frames", type=int, nargs="*", default=None)
    e.add_argument("--cap", type=float, default=80.0)
    e.add_argument("--no-median-scaling", action="store_true")
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval_depth)

    r = sub.add_parser("eval-traj", help="odometry errors of a KITTI pose file as JSON")
    r.add_argument("--est", required=True)
    r.add_argument("--gt", required=True)
    r.add_argument("--align", default="none", choices=["none", "se3", "sim3"])
    r.add_argument("--lengths", type=float, nargs="*", default=None)
    r.add_argument("--segments", action="store_true", help="include per-segment errors")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_eval_traj)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        if args.verbose:
            log.setLevel(logging.INFO)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (ConfigError, SceneError, DimensionError, DomainError, KeyError, ValueError) as exc:
        print(f"maskwarp: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, FloatingPointError) as exc:
        print(f"maskwarp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, FormatError) as exc:
        print(f"maskwarp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface.

Subcommands: synth, label, reconstruct, train, track, eval, pipeline.
Exit codes: 0 success, 1 validation error (bad arguments or input files),
2 runtime error (an algorithm stage refused or failed). Defaults come
from PipelineConfig, overridden by --config key=value files, overridden
by explicit flags. TRACKLIFT_THREADS caps worker threads (default: all
cores).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import fileio
from .fileio import DanglingReference, MissingFile, ParseError
from .labeling import generate_pseudo_labels
from .learning import train_regressor
from .pipeline import (
    PipelineConfig,
    depth_pairs_from_matches,
    run_pipeline,
    training_pairs,
    weights_from_matrices,
    weights_to_matrices,
)
from .reconstruction import (
    refine_points_lm,
    reject_outliers,
    track_reprojection_errors,
    triangulate_tracks,
)
from .scene import load_scene, write_scene
from .synth import SynthConfig, generate_synthetic_scene
from .tracker import run_sequence


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> Parser:
    p = Parser(prog="tracklift", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_config(sp):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument(
            "--set", action="append", default=[], metavar="KEY=VALUE",
            help="override one config value (repeatable)",
        )
        sp.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    sp = sub.add_parser("synth", help="generate a synthetic scene directory")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--frames", type=int, default=20)
    sp.add_argument("--frame-rate", type=float, default=10.0)
    sp.add_argument("--camera-speed", type=float, default=2.0)
    sp.add_argument("--static", type=int, default=3)
    sp.add_argument("--dynamic", type=int, default=0)
    sp.add_argument("--keypoints", type=int, default=40)
    sp.add_argument("--pixel-noise", type=float, default=0.0)
    sp.add_argument("--embedding-separation", type=float, default=1.0)
    sp.add_argument("--embedding-noise", type=float, default=0.0)
    sp.add_argument("--background", type=int, default=0)
    sp.add_argument("--crossing", action="store_true")

    sp = sub.add_parser("reconstruct", help="triangulate and refine keypoint tracks")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--reproj-threshold", type=float, default=None)
    add_config(sp)

    sp = sub.add_parser("label", help="generate pseudo 3D object labels")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--delta", type=float, default=None)
    sp.add_argument("--kappa", type=int, default=None)
    sp.add_argument("--min-ego-speed", type=float, default=None)
    sp.add_argument("--reproj-threshold", type=float, default=None)
    add_config(sp)

    sp = sub.add_parser("train", help="train the 3D-position regressor on labels")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--labels", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lr", type=float, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--hidden", type=int, default=None)
    add_config(sp)

    sp = sub.add_parser("track", help="run the online tracker over a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--weights", help="regressor weights for detection 3D positions")
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--det-thresh", type=float, default=None)
    sp.add_argument("--app-thresh", type=float, default=None)
    sp.add_argument("--max-age", type=int, default=None)
    sp.add_argument("--tau", type=float, default=None, help="3D kernel scale in meters")
    add_config(sp)

    sp = sub.add_parser("eval", help="evaluate hypothesis tracks against ground truth")
    sp.add_argument("--gt", action="append", required=True)
    sp.add_argument("--hyp", action="append", required=True)
    sp.add_argument("--iou", type=float, default=None)
    sp.add_argument("--max-depth", type=float, default=None)
    sp.add_argument("--out", required=True)
    add_config(sp)

    sp = sub.add_parser("pipeline", help="label, train, track and evaluate a scene")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--out", required=True)
    add_config(sp)
    return p


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if getattr(args, "config", None) else PipelineConfig()
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set needs KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    cfg.apply(overrides)
    flag_map = {
        "delta": "delta",
        "kappa": "kappa",
        "min_ego_speed": "min_ego_speed",
        "reproj_threshold": "reproj_threshold_px",
        "alpha": "alpha",
        "det_thresh": "detection_threshold",
        "app_thresh": "appearance_threshold",
        "max_age": "max_age",
        "tau": "kernel_tau",
        "lr": "learning_rate",
        "epochs": "epochs",
        "seed": "seed",
        "hidden": "hidden",
        "iou": "iou_threshold",
        "max_depth": "max_depth",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "no_figures", False):
        cfg.figures = False
    return cfg


def _cmd_synth(args) -> int:
    cfg = SynthConfig(
        seed=args.seed,
        num_frames=args.frames,
        frame_rate=args.frame_rate,
        camera_speed=args.camera_speed,
        num_static_objects=args.static,
        num_dynamic_objects=args.dynamic,
        keypoints_per_object=args.keypoints,
        pixel_noise=args.pixel_noise,
        embedding_separation=args.embedding_separation,
        embedding_noise=args.embedding_noise,
        background_points=args.background,
        crossing=args.crossing,
    )
    scene, _ = generate_synthetic_scene(cfg)
    write_scene(scene, args.out)
    print(f"wrote scene with {scene.num_frames} frames, "
          f"{len(scene.tracks)} keypoint tracks to {args.out}")
    return 0


def _cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    positions, failures = triangulate_tracks(scene.tracks, scene.poses, scene.intrinsics)
    tracks = [t for t in scene.tracks if t.track_id in positions]
    result = refine_points_lm(positions, tracks, scene.poses, scene.intrinsics, cfg.lm())
    tracks, removed = reject_outliers(
        tracks, result.points, scene.poses, scene.intrinsics, cfg.reproj_threshold_px
    )
    surviving = {t.track_id: t for t in tracks}
    points = {tid: p for tid, p in result.points.items() if tid in surviving}
    if removed and points:
        points = refine_points_lm(points, tracks, scene.poses, scene.intrinsics, cfg.lm()).points
    rows = []
    for tid in sorted(points):
        err = track_reprojection_errors(surviving[tid], points[tid], scene.poses, scene.intrinsics)
        finite = err[~(err == float("inf"))]
        rows.append((tid, points[tid], len(surviving[tid].observations),
                     float(finite.mean()) if len(finite) else float("inf")))
    fileio.write_points(Path(args.out), rows)
    print(f"reconstructed {len(rows)} points ({len(failures)} triangulation failures, "
          f"{removed} observations rejected)")
    return 0


def _cmd_label(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    labels, diag = generate_pseudo_labels(
        scene, cfg.cluster(), cfg.lm(),
        min_ego_speed=cfg.min_ego_speed, reproj_threshold_px=cfg.reproj_threshold_px,
    )
    out = Path(args.out)
    fileio.write_labels(out, labels)
    if cfg.figures:
        from .figures import save_label_map
        save_label_map(labels, out.with_suffix(".png"))
    print(f"labeled {diag.n_labeled_ids}/{diag.n_object_ids} tracks "
          f"({100 * diag.labeled_fraction:.1f}%), {len(labels)} labels")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    labels = fileio.read_labels(Path(args.labels))
    pairs = training_pairs(scene, labels)
    if not pairs:
        raise ValueError("no (descriptor, label) pairs: do labels match this scene?")
    weights, curve = train_regressor(pairs, cfg.train())
    out = Path(args.out)
    fileio.write_matrices(out, weights_to_matrices(weights))
    if cfg.figures:
        from .figures import save_loss_curve
        save_loss_curve(curve, out.with_suffix(".png"))
    print(f"trained on {len(pairs)} pairs: loss {curve[0]:.4f} -> {curve[-1]:.4f}")
    return 0


def _cmd_track(args) -> int:
    cfg = _load_config(args)
    scene = load_scene(args.scene)
    regressor = None
    if args.weights:
        regressor = weights_from_matrices(fileio.read_matrices(Path(args.weights)))
    rows = run_sequence(scene, cfg.tracker(), regressor=regressor)
    out = Path(args.out)
    fileio.write_track_rows(out, rows)
    if cfg.figures:
        from .figures import save_trajectories
        save_trajectories(rows, out.with_suffix(".png"))
    n_tracks = len({r.track_id for r in rows})
    print(f"tracked {n_tracks} objects over {scene.num_frames} frames ({len(rows)} rows)")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    if len(args.gt) != len(args.hyp):
        raise UsageError(f"{len(args.gt)} --gt files vs {len(args.hyp)} --hyp files")
    from .metrics import evaluate
    from .pipeline import _pool_reports

    named = []
    all_pairs = []
    for gt_path, hyp_path in zip(args.gt, args.hyp):
        gt_frames, gt_depths = fileio.read_gt_file(Path(gt_path))
        hyp_frames, hyp_depths = fileio.read_track_rows(Path(hyp_path))
        pairs = depth_pairs_from_matches(
            gt_frames, hyp_frames, gt_depths, hyp_depths, cfg.iou_threshold
        )
        all_pairs.extend(pairs)
        named.append(
            (Path(hyp_path).stem,
             evaluate(gt_frames, hyp_frames, cfg.iou_threshold, pairs or None, cfg.max_depth))
        )
    if len(named) == 1:
        aggregate = named[0][1]
    else:
        aggregate = _pool_reports([r for _, r in named], all_pairs, cfg.max_depth)
    named.append(("aggregate", aggregate))
    out = Path(args.out)
    fileio.write_report(out, named)
    if cfg.figures:
        from .figures import save_eval_summary
        save_eval_summary(named, out.with_suffix(".png"))
    for name, r in named:
        print(f"{name}: MOTA={r.mota:.4f} IDF1={r.idf1:.4f} "
              f"FP={r.fp} FN={r.fn} IDSW={r.idsw}")
    return 0


def _cmd_pipeline(args) -> int:
    cfg = _load_config(args)
    result = run_pipeline(args.scene, args.out, cfg)
    for name, r in result["reports"]:
        print(f"{name}: MOTA={r.mota:.4f} IDF1={r.idf1:.4f} "
              f"FP={r.fp} FN={r.fn} IDSW={r.idsw}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "reconstruct": _cmd_reconstruct,
    "label": _cmd_label,
    "train": _cmd_train,
    "track": _cmd_track,
    "eval": _cmd_eval,
    "pipeline": _cmd_pipeline,
}

_VALIDATION_ERRORS = (UsageError, ParseError, MissingFile, DanglingReference, ValueError)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

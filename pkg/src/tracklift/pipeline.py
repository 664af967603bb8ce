"""Configuration and the label -> train -> track -> eval orchestration."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import scipy

from . import __version__, fileio
from .fileio import read_keyvalues
from .labeling import ClusterConfig, generate_pseudo_labels
from .learning import RegressorWeights, TrainConfig, box_descriptor, train_regressor
from .metrics import EvalReport, clear_mot_detail, depth_metrics, evaluate
from .reconstruction import LMConfig
from .scene import Scene, load_scene
from .tracker import TrackerConfig, TrackRow, run_sequence


@dataclass
class PipelineConfig:
    """Every tunable default, overridable from a key=value file or CLI flags."""

    # labeling
    delta: float = 0.5
    kappa: int = 30
    min_ego_speed: float = 1.0
    reproj_threshold_px: float = 4.0
    # point refinement
    lm_max_iterations: int = 50
    lm_initial_damping: float = 1e-3
    lm_damping_up: float = 10.0
    lm_damping_down: float = 0.1
    lm_cost_tolerance: float = 1e-10
    lm_huber_delta: float | None = None
    # tracker
    detection_threshold: float = 0.5
    appearance_threshold: float = 0.6
    alpha: float = 0.4
    max_age: int = 30
    low_score_floor: float = 0.1
    iou_fallback_threshold: float = 0.3
    kernel_tau: float = 5.0
    process_noise_pos: float = 0.1
    process_noise_vel: float = 1.0
    measurement_noise: float = 1.0
    init_velocity_var: float = 100.0
    # regressor training
    learning_rate: float = 0.01
    epochs: int = 2000
    hidden: int = 32
    seed: int = 0
    # evaluation
    iou_threshold: float = 0.5
    max_depth: float = 75.0
    # reporting
    figures: bool = True

    def cluster(self) -> ClusterConfig:
        return ClusterConfig(delta=self.delta, kappa=self.kappa)

    def lm(self) -> LMConfig:
        return LMConfig(
            max_iterations=self.lm_max_iterations,
            initial_damping=self.lm_initial_damping,
            damping_up=self.lm_damping_up,
            damping_down=self.lm_damping_down,
            cost_tolerance=self.lm_cost_tolerance,
            huber_delta=self.lm_huber_delta,
        )

    def tracker(self) -> TrackerConfig:
        return TrackerConfig(
            detection_threshold=self.detection_threshold,
            appearance_threshold=self.appearance_threshold,
            alpha=self.alpha,
            max_age=self.max_age,
            low_score_floor=self.low_score_floor,
            iou_fallback_threshold=self.iou_fallback_threshold,
            kernel_tau=self.kernel_tau,
            process_noise_pos=self.process_noise_pos,
            process_noise_vel=self.process_noise_vel,
            measurement_noise=self.measurement_noise,
            init_velocity_var=self.init_velocity_var,
        )

    def train(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.seed,
            hidden=self.hidden,
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "PipelineConfig":
        cfg = cls()
        cfg.apply(read_keyvalues(Path(path)))
        return cfg

    def apply(self, overrides: dict[str, str]):
        by_name = {f.name: f for f in fields(self)}
        for key, value in overrides.items():
            if key not in by_name:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(self, key)
            if key == "lm_huber_delta":
                setattr(self, key, None if value in ("", "none", "None") else float(value))
            elif isinstance(current, bool):
                setattr(self, key, str(value).lower() in ("1", "true", "yes", "on"))
            elif isinstance(current, int):
                setattr(self, key, int(value))
            elif isinstance(current, float) or current is None:
                setattr(self, key, float(value))
            else:
                setattr(self, key, value)

    def to_dict(self) -> dict:
        return asdict(self)


def training_pairs(scene: Scene, labels) -> list[tuple[np.ndarray, np.ndarray]]:
    """(descriptor, camera-frame target) for every labeled ground-truth box."""
    by_key = {(l.track_id, l.frame_index, l.camera_id): l for l in labels}
    pairs = []
    for box in sorted(
        scene.detections_gt, key=lambda b: (b.object_id, b.frame_index, b.camera_id)
    ):
        label = by_key.get((box.object_id, box.frame_index, box.camera_id))
        if label is None:
            continue
        pairs.append((box_descriptor(box, scene.intrinsics[box.camera_id]), label.position_camera))
    return pairs


def weights_to_matrices(w: RegressorWeights) -> list[np.ndarray]:
    return [w.w1, w.b1.reshape(1, -1), w.w2, w.b2.reshape(1, -1)]


def weights_from_matrices(mats: list[np.ndarray]) -> RegressorWeights:
    if len(mats) != 4:
        raise ValueError(f"regressor weights need 4 matrices, got {len(mats)}")
    return RegressorWeights(mats[0], mats[1].ravel(), mats[2], mats[3].ravel())


def evaluate_scene_tracking(
    scene: Scene,
    rows: list[TrackRow],
    iou_threshold: float = 0.5,
    max_depth: float = 75.0,
) -> list[tuple[str, EvalReport]]:
    """Per-camera reports plus a pooled aggregate row."""
    cameras = sorted({b.camera_id for b in scene.detections_gt})
    named: list[tuple[str, EvalReport]] = []
    all_pairs: list[tuple[float, float]] = []
    for cam in cameras:
        gt_frames = fileio.gt_boxes_by_frame([b for b in scene.detections_gt if b.camera_id == cam])
        hyp_frames: dict[int, list] = {}
        hyp_depths: dict[tuple[int, int], float] = {}
        for r in rows:
            if r.camera_id != cam:
                continue
            from .geometry import BBox2D

            hyp_frames.setdefault(r.frame, []).append(
                BBox2D(r.left, r.top, r.width, r.height, r.score, r.frame, cam, object_id=r.track_id)
            )
            hyp_depths[(r.frame, r.track_id)] = r.z_cam
        pairs = depth_pairs_from_matches(gt_frames, hyp_frames, scene.gt_depths, hyp_depths, iou_threshold)
        all_pairs.extend(pairs)
        named.append((cam, evaluate(gt_frames, hyp_frames, iou_threshold, pairs or None, max_depth)))

    if len(named) == 1:
        aggregate = named[0][1]
    else:
        aggregate = _pool_reports([r for _, r in named], all_pairs, max_depth)
    named.append(("aggregate", aggregate))
    return named


def depth_pairs_from_matches(
    gt_frames, hyp_frames, gt_depths, hyp_depths, iou_threshold: float
) -> list[tuple[float, float]]:
    if not gt_depths or not hyp_depths:
        return []
    detail = clear_mot_detail(gt_frames, hyp_frames, iou_threshold)
    pairs = []
    for frame, matches in sorted(detail.matches_per_frame.items()):
        for g, h in matches:
            if (frame, g) in gt_depths and (frame, h) in hyp_depths:
                pred = hyp_depths[(frame, h)]
                true = gt_depths[(frame, g)]
                if pred > 0 and true > 0:
                    pairs.append((pred, true))
    return pairs


def _pool_reports(reports: list[EvalReport], pairs, max_depth: float) -> EvalReport:
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    idsw = sum(r.idsw for r in reports)
    num_gt = sum(r.num_gt for r in reports)
    idtp = sum(r.idtp for r in reports)
    idfp = sum(r.idfp for r in reports)
    idfn = sum(r.idfn for r in reports)
    out = EvalReport(
        mota=1.0 - (fn + fp + idsw) / num_gt if num_gt else 1.0,
        idf1=2.0 * idtp / (2.0 * idtp + idfp + idfn) if (2 * idtp + idfp + idfn) else 1.0,
        idp=idtp / (idtp + idfp) if (idtp + idfp) else 1.0,
        idr=idtp / (idtp + idfn) if (idtp + idfn) else 1.0,
        fp=fp,
        fn=fn,
        idsw=idsw,
        mt=sum(r.mt for r in reports),
        ml=sum(r.ml for r in reports),
        num_gt=num_gt,
        idtp=idtp,
        idfp=idfp,
        idfn=idfn,
    )
    if pairs:
        d = depth_metrics(pairs, max_depth)
        for name in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"):
            setattr(out, name, getattr(d, name))
        out.n_depth_pairs = d.n_depth_pairs
    return out


def run_pipeline(scene_dir: str | Path, out_dir: str | Path, cfg: PipelineConfig | None = None):
    """label -> train -> track -> eval, writing all artifacts plus a manifest."""
    from . import figures

    cfg = cfg or PipelineConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings: list[dict] = []

    def stage(name: str):
        timings.append({"name": name, "start": time.perf_counter()})

    def stage_done():
        timings[-1]["seconds"] = round(time.perf_counter() - timings[-1].pop("start"), 6)

    stage("load")
    scene = load_scene(scene_dir)
    stage_done()

    stage("label")
    labels, diag = generate_pseudo_labels(
        scene,
        cfg.cluster(),
        cfg.lm(),
        min_ego_speed=cfg.min_ego_speed,
        reproj_threshold_px=cfg.reproj_threshold_px,
    )
    fileio.write_labels(out / "labels.csv", labels)
    if cfg.figures:
        figures.save_label_map(labels, out / "labels.png")
    stage_done()

    stage("train")
    pairs = training_pairs(scene, labels)
    if not pairs:
        raise ValueError("no training pairs: labeling produced no usable labels")
    weights, curve = train_regressor(pairs, cfg.train())
    fileio.write_matrices(out / "weights.txt", weights_to_matrices(weights))
    if cfg.figures:
        figures.save_loss_curve(curve, out / "loss_curve.png")
    stage_done()

    stage("track")
    rows = run_sequence(scene, cfg.tracker(), regressor=weights)
    fileio.write_track_rows(out / "tracks.csv", rows)
    if cfg.figures:
        figures.save_trajectories(rows, out / "trajectories.png")
    stage_done()

    stage("eval")
    named = evaluate_scene_tracking(scene, rows, cfg.iou_threshold, cfg.max_depth)
    fileio.write_report(out / "report.csv", named)
    if cfg.figures:
        figures.save_eval_summary(named, out / "metrics.png")
    stage_done()

    config_text = json.dumps(cfg.to_dict(), sort_keys=True)
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": hashlib.sha256(config_text.encode()).hexdigest(),
        "versions": {
            "tracklift": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "stages": timings,
        "outputs": ["labels.csv", "weights.txt", "tracks.csv", "report.csv"],
        "diagnostics": {
            "labeled_fraction": diag.labeled_fraction,
            "n_labeled_ids": diag.n_labeled_ids,
            "n_object_ids": diag.n_object_ids,
            "training_pairs": len(pairs),
            "final_train_loss": curve[-1],
            "track_rows": len(rows),
        },
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return {"labels": labels, "weights": weights, "rows": rows, "reports": named, "diag": diag}

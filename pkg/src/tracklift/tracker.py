"""Online 2D tracker whose association is resolved in 3D space.

Per frame: predict every tracklet's 3D state with a constant-velocity
Kalman filter, match high-score detections against all tracks on the
alpha-weighted appearance/3D similarity, then low-score detections
against the leftovers, then fall back to 2D IoU for whatever remains.
Matched tracks are corrected with the detection's 3D position lifted to
the world frame, so the linear motion model holds for static objects
under ego-motion.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .association import (
    EncoderWeights,
    FeatureVector,
    GNNConfig,
    KIND_APPEARANCE,
    SimilarityConfig,
    appearance_similarity,
    encode_3d,
    fuse,
    gnn_aggregate,
    similarity_matrix,
    solve_assignment,
)
from .geometry import BBox2D, Pose, camera_to_world, world_to_camera


class SingularInnovation(Exception):
    """The Kalman innovation covariance is numerically singular."""


class InputNotSorted(Exception):
    """Detections must arrive in non-decreasing frame order."""


@dataclass(frozen=True)
class Detection:
    box: BBox2D
    appearance: np.ndarray
    position_3d: np.ndarray | None  # camera frame
    frame_index: int
    camera_id: str

    def __post_init__(self):
        object.__setattr__(self, "appearance", np.asarray(self.appearance, dtype=np.float64))
        if self.position_3d is not None:
            object.__setattr__(self, "position_3d", np.asarray(self.position_3d, dtype=np.float64))


@dataclass(frozen=True)
class TrackerConfig:
    detection_threshold: float = 0.5
    appearance_threshold: float = 0.6
    alpha: float = 0.4
    max_age: int = 30
    low_score_floor: float = 0.1
    iou_fallback_threshold: float = 0.3
    process_noise_pos: float = 0.1  # m^2 per second
    process_noise_vel: float = 1.0  # (m/s)^2 per second
    measurement_noise: float = 1.0  # m^2
    init_velocity_var: float = 100.0  # (m/s)^2
    three_d_mode: str = "geometric-kernel"
    kernel_tau: float = 5.0

    def __post_init__(self):
        if not (0.0 <= self.low_score_floor < self.detection_threshold <= 1.0):
            raise ValueError(
                f"need 0 <= low_score_floor < detection_threshold <= 1, got "
                f"{self.low_score_floor}, {self.detection_threshold}"
            )
        if self.max_age < 1:
            raise ValueError(f"max_age must be >= 1, got {self.max_age}")

    def similarity(self) -> SimilarityConfig:
        return SimilarityConfig(
            alpha=self.alpha,
            appearance_threshold=self.appearance_threshold,
            three_d_mode=self.three_d_mode,
            kernel_tau=self.kernel_tau,
        )


@dataclass(frozen=True)
class TrackState:
    track_id: int
    kf_mean: np.ndarray  # (6,) [x, y, z, vx, vy, vz], world frame
    kf_covariance: np.ndarray  # (6, 6)
    appearance_mean: np.ndarray
    appearance_count: int
    last_box: BBox2D
    age_since_update: int = 0
    hit_count: int = 1

    def position(self) -> np.ndarray:
        return self.kf_mean[:3]


@dataclass(frozen=True)
class TrackEvent:
    kind: str  # matched | new_track | terminated
    track_id: int
    detection_index: int | None = None


@dataclass
class StepResult:
    events: list[TrackEvent]
    tracks: list[TrackState]
    next_track_id: int


def kf_predict(
    state: TrackState,
    dt: float,
    process_noise_pos: float = 0.1,
    process_noise_vel: float = 1.0,
) -> TrackState:
    """Constant-velocity time update."""
    F = np.eye(6)
    F[0, 3] = F[1, 4] = F[2, 5] = dt
    Q = np.diag([process_noise_pos * dt] * 3 + [process_noise_vel * dt] * 3)
    mean = F @ state.kf_mean
    cov = F @ state.kf_covariance @ F.T + Q
    cov = 0.5 * (cov + cov.T)
    return replace(state, kf_mean=mean, kf_covariance=cov)


def kf_update(
    state: TrackState, measurement: np.ndarray, measurement_noise: float = 1.0
) -> TrackState:
    """Position-only measurement update (Joseph-form covariance)."""
    z = np.asarray(measurement, dtype=np.float64)
    H = np.zeros((3, 6))
    H[0, 0] = H[1, 1] = H[2, 2] = 1.0
    P = state.kf_covariance
    R = measurement_noise * np.eye(3)
    S = H @ P @ H.T + R
    if np.linalg.cond(S) > 1e12:
        raise SingularInnovation(f"innovation covariance condition {np.linalg.cond(S):.3e}")
    K = P @ H.T @ np.linalg.inv(S)
    mean = state.kf_mean + K @ (z - H @ state.kf_mean)
    A = np.eye(6) - K @ H
    cov = A @ P @ A.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    return replace(state, kf_mean=mean, kf_covariance=cov)


def new_track(
    track_id: int, det: Detection, world_position: np.ndarray | None, cfg: TrackerConfig
) -> TrackState:
    if world_position is None:
        mean = np.zeros(6)
        pos_var = 1e6
    else:
        mean = np.concatenate([world_position, np.zeros(3)])
        pos_var = cfg.measurement_noise
    cov = np.diag([pos_var] * 3 + [cfg.init_velocity_var] * 3)
    return TrackState(
        track_id=track_id,
        kf_mean=mean,
        kf_covariance=cov,
        appearance_mean=det.appearance.copy(),
        appearance_count=1,
        last_box=det.box,
    )


def iou(a: BBox2D, b: BBox2D) -> float:
    """Intersection over union of two boxes."""
    ix = max(0.0, min(a.right, b.right) - max(a.left, b.left))
    iy = max(0.0, min(a.bottom, b.bottom) - max(a.top, b.top))
    inter = ix * iy
    union = a.width_px * a.height_px + b.width_px * b.height_px - inter
    return inter / union if union > 0 else 0.0


def _fused_features(
    appearances: list[np.ndarray],
    positions_cam: list[np.ndarray | None],
    encoder: EncoderWeights,
) -> list[FeatureVector]:
    out = []
    for app, pos in zip(appearances, positions_cam):
        enc = encode_3d(pos if pos is not None else np.zeros(3), encoder)
        if np.linalg.norm(enc.values) < 1e-12:
            enc = FeatureVector(np.ones(encoder.dim), enc.kind)
        out.append(fuse(FeatureVector(app, KIND_APPEARANCE), enc))
    return out


def tracker_step(
    detections: list[Detection],
    tracks: list[TrackState],
    cfg: TrackerConfig,
    dt: float,
    pose: Pose | None = None,
    encoder: EncoderWeights | None = None,
    next_track_id: int = 0,
    gnn_cfg: GNNConfig | None = None,
    prev_features: list[FeatureVector] | None = None,
) -> StepResult:
    """One frame of the cascade; all detections share one (frame, camera).

    The optional pose lifts detection positions into the world frame; with
    no pose, camera-frame positions are used as world positions directly.
    """
    events: list[TrackEvent] = []
    predicted = [
        kf_predict(t, dt, cfg.process_noise_pos, cfg.process_noise_vel) for t in tracks
    ]

    def to_world(p: np.ndarray | None) -> np.ndarray | None:
        if p is None:
            return None
        return camera_to_world(p, pose) if pose is not None else np.asarray(p, dtype=np.float64)

    def to_camera(p: np.ndarray) -> np.ndarray:
        return world_to_camera(p, pose) if pose is not None else p

    high = [i for i, d in enumerate(detections) if d.box.score >= cfg.detection_threshold]
    low = [
        i
        for i, d in enumerate(detections)
        if cfg.low_score_floor <= d.box.score < cfg.detection_threshold
    ]

    if encoder is None:
        dim = len(detections[0].appearance) if detections else len(
            tracks[0].appearance_mean
        ) if tracks else 3
        encoder = EncoderWeights.identity(max(dim, 3))
    sim_cfg = cfg.similarity()

    track_world = [t.position() for t in predicted]
    track_fused = _fused_features(
        [t.appearance_mean for t in predicted],
        [to_camera(p) for p in track_world],
        encoder,
    )

    det_world = [to_world(d.position_3d) for d in detections]
    det_fused = _fused_features(
        [d.appearance for d in detections],
        [d.position_3d for d in detections],
        encoder,
    )
    if gnn_cfg is not None and prev_features:
        det_fused = gnn_aggregate(det_fused, prev_features, gnn_cfg)

    matched_tracks: set[int] = set()
    matched_dets: set[int] = set()
    matches: list[tuple[int, int]] = []  # (det index, track index)

    def run_stage(det_idx: list[int], trk_idx: list[int], use_similarity: bool):
        if not det_idx or not trk_idx:
            return
        if use_similarity:
            S = similarity_matrix(
                [det_fused[i] for i in det_idx],
                [det_world[i] for i in det_idx],
                [track_fused[j] for j in trk_idx],
                [track_world[j] for j in trk_idx],
                sim_cfg,
            )
            s_app = appearance_similarity(
                [det_fused[i] for i in det_idx], [track_fused[j] for j in trk_idx]
            )
            result = solve_assignment(S)
            for r, c in result.matches:
                if s_app[r, c] < cfg.appearance_threshold:
                    continue
                matches.append((det_idx[r], trk_idx[c]))
                matched_dets.add(det_idx[r])
                matched_tracks.add(trk_idx[c])
        else:
            M = np.array(
                [
                    [iou(detections[i].box, predicted[j].last_box) for j in trk_idx]
                    for i in det_idx
                ]
            )
            result = solve_assignment(M, gate=cfg.iou_fallback_threshold)
            for r, c in result.matches:
                matches.append((det_idx[r], trk_idx[c]))
                matched_dets.add(det_idx[r])
                matched_tracks.add(trk_idx[c])

    all_tracks = list(range(len(predicted)))
    run_stage(high, all_tracks, use_similarity=True)
    remaining = [j for j in all_tracks if j not in matched_tracks]
    run_stage([i for i in low if i not in matched_dets], remaining, use_similarity=True)
    remaining = [j for j in all_tracks if j not in matched_tracks]
    run_stage([i for i in high if i not in matched_dets], remaining, use_similarity=False)

    updated: list[TrackState] = list(predicted)
    for det_i, trk_j in sorted(matches):
        det = detections[det_i]
        state = updated[trk_j]
        wp = det_world[det_i]
        if wp is not None:
            state = kf_update(state, wp, cfg.measurement_noise)
        count = state.appearance_count + 1
        app = state.appearance_mean + (det.appearance - state.appearance_mean) / count
        state = replace(
            state,
            appearance_mean=app,
            appearance_count=count,
            last_box=det.box,
            age_since_update=0,
            hit_count=state.hit_count + 1,
        )
        updated[trk_j] = state
        events.append(TrackEvent("matched", state.track_id, det_i))

    out_tracks: list[TrackState] = []
    for j, state in enumerate(updated):
        if j in matched_tracks:
            out_tracks.append(state)
            continue
        state = replace(state, age_since_update=state.age_since_update + 1)
        if state.age_since_update > cfg.max_age:
            events.append(TrackEvent("terminated", state.track_id))
        else:
            out_tracks.append(state)

    for det_i in high:
        if det_i in matched_dets:
            continue
        det = detections[det_i]
        track = new_track(next_track_id, det, det_world[det_i], cfg)
        next_track_id += 1
        out_tracks.append(track)
        events.append(TrackEvent("new_track", track.track_id, det_i))

    return StepResult(events, out_tracks, next_track_id)


@dataclass(frozen=True)
class TrackRow:
    frame: int
    track_id: int
    left: float
    top: float
    width: float
    height: float
    score: float
    x_cam: float
    y_cam: float
    z_cam: float
    camera_id: str


def run_sequence(
    scene,
    cfg: TrackerConfig = TrackerConfig(),
    regressor=None,
    encoder: EncoderWeights | None = None,
    gnn_cfg: GNNConfig | None = None,
) -> list[TrackRow]:
    """Track every camera's detection stream independently.

    Detection 3D positions come from the regressor when one is given
    (applied to the box-geometry descriptor); track IDs are unique across
    the whole scene. Emits one row per track observed in a frame.
    """
    from .learning import box_descriptor, regressor_forward

    rows: list[TrackRow] = []
    next_id = 0
    cameras = sorted({d.camera_id for d in scene.detections_raw})
    by_cam: dict[str, list[BBox2D]] = {c: [] for c in cameras}
    for det in scene.detections_raw:
        by_cam[det.camera_id].append(det)
    dt = 1.0 / scene.frame_rate

    for cam in cameras:
        cam_dets = by_cam[cam]
        frames = [d.frame_index for d in cam_dets]
        if frames != sorted(frames):
            raise InputNotSorted(f"camera {cam} detections are not sorted by frame")
        per_frame: dict[int, list[BBox2D]] = {}
        for d in cam_dets:
            per_frame.setdefault(d.frame_index, []).append(d)

        tracks: list[TrackState] = []
        prev_features: list[FeatureVector] | None = None
        for frame in range(scene.num_frames):
            boxes = per_frame.get(frame, [])
            dets = []
            for i, box in enumerate(boxes):
                emb = scene.embeddings.get((frame, cam, i))
                if emb is None:
                    emb = np.ones(3)
                pos = None
                if regressor is not None:
                    desc = box_descriptor(box, scene.intrinsics[cam])
                    pos, _ = regressor_forward(desc, regressor)
                dets.append(Detection(box, emb, pos, frame, cam))
            pose = scene.poses.get((frame, cam))
            result = tracker_step(
                dets,
                tracks,
                cfg,
                dt,
                pose=pose,
                encoder=encoder,
                next_track_id=next_id,
                gnn_cfg=gnn_cfg,
                prev_features=prev_features,
            )
            tracks, next_id = result.tracks, result.next_track_id
            by_id = {t.track_id: t for t in tracks}
            for ev in result.events:
                if ev.detection_index is None:
                    continue
                det = dets[ev.detection_index]
                state = by_id[ev.track_id]
                p_cam = (
                    world_to_camera(state.position(), pose)
                    if pose is not None
                    else state.position()
                )
                rows.append(
                    TrackRow(
                        frame,
                        ev.track_id,
                        det.box.left,
                        det.box.top,
                        det.box.width_px,
                        det.box.height_px,
                        det.box.score,
                        float(p_cam[0]),
                        float(p_cam[1]),
                        float(p_cam[2]),
                        cam,
                    )
                )
            if gnn_cfg is not None:
                prev_features = _fused_features(
                    [d.appearance for d in dets],
                    [d.position_3d for d in dets],
                    encoder if encoder is not None else EncoderWeights.identity(
                        max(len(dets[0].appearance) if dets else 3, 3)
                    ),
                )
    rows.sort(key=lambda r: (r.camera_id, r.frame, r.track_id))
    return rows

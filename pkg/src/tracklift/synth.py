"""Seeded synthetic scenes with full ground truth.

Objects are chain-connected keypoint blobs (hop 0.4 m, below the default
clustering threshold) attached to static or laterally moving centers; the
camera advances along a configurable heading. Boxes are the pixel
bounding rectangles of each object's projected keypoints, detections
mirror the boxes with a configurable score, and appearance embeddings are
drawn per identity with a configurable inter-identity separation
(separation 0 makes all objects look alike).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox2D, PinholeIntrinsics, Pose
from .reconstruction import KeypointTrack
from .scene import Scene

CAMERA_ID = "cam0"


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_frames: int = 20
    frame_rate: float = 10.0
    camera_speed: float = 2.0  # m/s
    camera_heading: tuple[float, float, float] = (0.0, 0.0, 1.0)
    num_static_objects: int = 3
    num_dynamic_objects: int = 0
    dynamic_speed: float = 5.0  # m/s, lateral
    keypoints_per_object: int = 40
    object_size: float = 1.5  # blob radius bound, m
    blob_hop: float = 0.4  # chain hop, m
    pixel_noise: float = 0.0
    embedding_dim: int = 16
    embedding_separation: float = 1.0  # 0 = identical identities
    embedding_noise: float = 0.0
    detection_score: float = 0.9
    background_points: int = 0
    image_width: int = 1280
    image_height: int = 720
    focal: float = 600.0
    depth_range: tuple[float, float] = (10.0, 28.0)
    lateral_range: tuple[float, float] = (2.0, 6.0)
    crossing: bool = False
    crossing_depth_gap: float = 18.0
    occlusion_object: int | None = None
    occlusion_frames: tuple[int, int] | None = None

    def __post_init__(self):
        if self.num_frames < 2:
            raise ValueError(f"num_frames must be >= 2, got {self.num_frames}")
        if self.num_static_objects < 0 or self.num_dynamic_objects < 0:
            raise ValueError("object counts must be >= 0")
        if self.embedding_dim < 3:
            raise ValueError(f"embedding_dim must be >= 3, got {self.embedding_dim}")


@dataclass
class ObjectTruth:
    object_id: int
    is_static: bool
    keypoint_track_ids: list[int]
    keypoint_centroid: np.ndarray  # world, at t=0
    center_per_frame: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class SceneTruth:
    objects: dict[int, ObjectTruth]
    keypoint_world: dict[int, np.ndarray]  # static keypoints only
    camera_id: str = CAMERA_ID


def _blob(rng: np.random.Generator, center: np.ndarray, n: int, hop: float, radius: float):
    """Chain-connected point cloud: every point within `hop` of an earlier one."""
    pts = [center.copy()]
    for _ in range(n - 1):
        base = pts[int(rng.integers(0, len(pts)))]
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        step = float(rng.uniform(0.5, 1.0)) * hop
        cand = base + step * direction
        while np.linalg.norm(cand - center) > radius:
            step *= 0.5
            cand = base + step * direction
        pts.append(cand)
    return np.array(pts)


def _identity_embeddings(rng: np.random.Generator, n: int, dim: int, separation: float):
    if n + 1 > dim:
        raise ValueError(f"embedding_dim {dim} too small for {n} identities")
    shared = np.zeros(dim)
    shared[0] = 1.0
    bases = []
    for i in range(n):
        axis = np.zeros(dim)
        axis[i + 1] = 1.0
        v = (1.0 - separation) * shared + separation * axis
        bases.append(v / np.linalg.norm(v))
    return bases


def generate_synthetic_scene(cfg: SynthConfig) -> tuple[Scene, SceneTruth]:
    rng = np.random.default_rng(cfg.seed)
    heading = np.asarray(cfg.camera_heading, dtype=np.float64)
    heading = heading / np.linalg.norm(heading)

    intrinsics = {
        CAMERA_ID: PinholeIntrinsics(
            CAMERA_ID,
            cfg.focal,
            cfg.focal,
            cfg.image_width / 2.0,
            cfg.image_height / 2.0,
            cfg.image_width,
            cfg.image_height,
        )
    }
    poses = {}
    step = cfg.camera_speed / cfg.frame_rate
    for t in range(cfg.num_frames):
        poses[(t, CAMERA_ID)] = Pose(
            np.array([1.0, 0.0, 0.0, 0.0]), heading * step * t, t, CAMERA_ID
        )

    # --- object centers ---
    n_total = cfg.num_static_objects + cfg.num_dynamic_objects
    centers = []
    lat_lo, lat_hi = cfg.lateral_range
    dep_lo, dep_hi = cfg.depth_range
    for i in range(n_total):
        frac = i / max(1, n_total - 1)
        x = (lat_lo + frac * (lat_hi - lat_lo)) * (1 if i % 2 == 0 else -1)
        z = dep_lo + frac * (dep_hi - dep_lo)
        y = float(rng.uniform(-1.0, 1.0))
        centers.append(np.array([x, y, z]))
    if cfg.crossing and n_total >= 2:
        centers[0] = np.array([1.0, 0.0, 12.0])
        centers[1] = np.array([3.0, 0.0, 12.0 + cfg.crossing_depth_gap])

    # --- keypoint blobs and dynamic velocities ---
    truth = SceneTruth(objects={}, keypoint_world={})
    next_track = 0
    blobs: list[np.ndarray] = []
    velocities: list[np.ndarray] = []
    track_owner: dict[int, int] = {}
    for obj in range(n_total):
        pts = _blob(rng, centers[obj], cfg.keypoints_per_object, cfg.blob_hop, cfg.object_size)
        blobs.append(pts)
        is_static = obj < cfg.num_static_objects
        if is_static:
            vel = np.zeros(3)
        else:
            vel = np.array([cfg.dynamic_speed * (1 if obj % 2 == 0 else -1), 0.0, 0.0])
        velocities.append(vel)
        ids = list(range(next_track, next_track + len(pts)))
        for tid, p in zip(ids, pts):
            track_owner[tid] = obj
            if is_static:
                truth.keypoint_world[tid] = p.copy()
        truth.objects[obj] = ObjectTruth(
            object_id=obj,
            is_static=is_static,
            keypoint_track_ids=ids,
            keypoint_centroid=pts.mean(axis=0),
        )
        next_track += len(pts)

    background = []
    for _ in range(cfg.background_points):
        p = np.array(
            [rng.uniform(-8.0, 8.0), rng.uniform(-2.0, 2.0), rng.uniform(dep_lo - 4, dep_hi + 6)]
        )
        background.append((next_track, p))
        truth.keypoint_world[next_track] = p.copy()
        next_track += 1

    # --- observations, boxes, detections ---
    k = intrinsics[CAMERA_ID]
    obs: dict[int, list[tuple[int, str, float, float]]] = {}
    gt_boxes: list[BBox2D] = []
    raw_boxes: list[BBox2D] = []
    raw_owner: list[tuple[int, int]] = []  # (frame, object) per raw box, in emit order
    gt_depths: dict[tuple[int, int], float] = {}
    dt = 1.0 / cfg.frame_rate

    def project_points(pts: np.ndarray, cam_center: np.ndarray):
        rel = pts - cam_center
        z = rel[:, 2]
        ok = z > 0.2
        zz = np.where(ok, z, 1.0)
        u = k.fx * rel[:, 0] / zz + k.cx
        v = k.fy * rel[:, 1] / zz + k.cy
        ok &= (u >= 0) & (u <= k.width) & (v >= 0) & (v <= k.height)
        return u, v, ok

    for t in range(cfg.num_frames):
        cam_center = poses[(t, CAMERA_ID)].translation
        frame_dets: list[tuple[float, BBox2D, int]] = []
        for obj in range(n_total):
            pts = blobs[obj] + velocities[obj] * (t * dt)
            u, v, ok = project_points(pts, cam_center)
            ids = truth.objects[obj].keypoint_track_ids
            for idx in np.flatnonzero(ok):
                un = float(u[idx] + rng.normal() * cfg.pixel_noise) if cfg.pixel_noise else float(u[idx])
                vn = float(v[idx] + rng.normal() * cfg.pixel_noise) if cfg.pixel_noise else float(v[idx])
                if 0 <= un <= k.width and 0 <= vn <= k.height:
                    obs.setdefault(ids[idx], []).append((t, CAMERA_ID, un, vn))
            if int(np.count_nonzero(ok)) < 2:
                continue
            margin = 2.0
            left = max(0.0, float(u[ok].min()) - margin)
            right = min(float(k.width), float(u[ok].max()) + margin)
            top = max(0.0, float(v[ok].min()) - margin)
            bottom = min(float(k.height), float(v[ok].max()) + margin)
            if right - left <= 0 or bottom - top <= 0:
                continue
            box = BBox2D(left, top, right - left, bottom - top, 1.0, t, CAMERA_ID, object_id=obj)
            gt_boxes.append(box)
            center_now = truth.objects[obj].keypoint_centroid + velocities[obj] * (t * dt)
            truth.objects[obj].center_per_frame[t] = center_now
            gt_depths[(t, obj)] = float(center_now[2] - cam_center[2])
            occluded = (
                cfg.occlusion_object == obj
                and cfg.occlusion_frames is not None
                and cfg.occlusion_frames[0] <= t < cfg.occlusion_frames[1]
            )
            if not occluded:
                det = BBox2D(
                    left, top, right - left, bottom - top, cfg.detection_score, t, CAMERA_ID
                )
                frame_dets.append((left, det, obj))
        for tid, p in background:
            u, v, ok = project_points(p[None], cam_center)
            if ok[0]:
                un = float(u[0] + rng.normal() * cfg.pixel_noise) if cfg.pixel_noise else float(u[0])
                vn = float(v[0] + rng.normal() * cfg.pixel_noise) if cfg.pixel_noise else float(v[0])
                if 0 <= un <= k.width and 0 <= vn <= k.height:
                    obs.setdefault(tid, []).append((t, CAMERA_ID, un, vn))
        # detections ordered left-to-right, the way an image-space detector emits them
        frame_dets.sort(key=lambda d: d[0])
        for det_index, (_, det, obj) in enumerate(frame_dets):
            raw_boxes.append(det)
            raw_owner.append((t, obj))

    # --- embeddings ---
    bases = _identity_embeddings(rng, n_total, cfg.embedding_dim, cfg.embedding_separation) if n_total else []
    embeddings: dict[tuple[int, str, int], np.ndarray] = {}
    counter: dict[int, int] = {}
    for (t, obj) in raw_owner:
        det_index = counter.get(t, 0)
        counter[t] = det_index + 1
        v = bases[obj].copy()
        if cfg.embedding_noise:
            v = v + cfg.embedding_noise * rng.normal(size=cfg.embedding_dim)
        embeddings[(t, CAMERA_ID, det_index)] = v / np.linalg.norm(v)

    tracks = [KeypointTrack(tid, tuple(obs[tid])) for tid in sorted(obs)]
    scene = Scene(
        intrinsics=intrinsics,
        poses=poses,
        tracks=tracks,
        detections_gt=gt_boxes,
        detections_raw=raw_boxes,
        embeddings=embeddings,
        gt_depths=gt_depths,
        frame_rate=cfg.frame_rate,
    )
    scene.validate()
    return scene, truth


def crossing_self_check(scene: Scene, truth: SceneTruth) -> tuple[float, float]:
    """(max box IoU between objects 0 and 1, min 3D center distance)."""
    from .tracker import iou

    boxes: dict[int, dict[int, BBox2D]] = {0: {}, 1: {}}
    for b in scene.detections_gt:
        if b.object_id in (0, 1):
            boxes[b.object_id][b.frame_index] = b
    max_iou = 0.0
    min_dist = np.inf
    for t in boxes[0]:
        if t not in boxes[1]:
            continue
        max_iou = max(max_iou, iou(boxes[0][t], boxes[1][t]))
        c0 = truth.objects[0].center_per_frame[t]
        c1 = truth.objects[1].center_per_frame[t]
        min_dist = min(min_dist, float(np.linalg.norm(c0 - c1)))
    return max_iou, min_dist

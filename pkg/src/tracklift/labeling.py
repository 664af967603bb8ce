"""Pseudo 3D object labels from reconstructed points and 2D identity boxes.

Stages: per-box clustering keeps each object's main connected component,
global clustering filters small noise components, surviving clusters are
matched to object identities by projection containment, and each matched
cluster's barycenter becomes the per-frame camera-frame label.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import BBox2D, PinholeIntrinsics, Pose, WorldPoint, world_to_camera
from .reconstruction import (
    LMConfig,
    mean_ego_speed,
    refine_points_lm,
    reject_outliers,
    triangulate_tracks,
)


class EmptyInput(Exception):
    """No points were given where at least one is required."""


class UnassignedCluster(Exception):
    """Labels were requested for a cluster with no object identity."""


class GateRejected(Exception):
    """The sequence's ego motion is too slow for reliable reconstruction."""


@dataclass(frozen=True)
class ClusterConfig:
    delta: float = 0.5  # single-linkage hop threshold, meters
    kappa: int = 30  # minimum points per surviving cluster

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if self.kappa < 1:
            raise ValueError(f"kappa must be >= 1, got {self.kappa}")


@dataclass(frozen=True)
class PointCluster:
    points: tuple[WorldPoint, ...]
    cluster_id: int
    assigned_track_id: int | None = None

    @property
    def size(self) -> int:
        return len(self.points)

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.points])

    def min_track_id(self) -> int:
        return min(p.track_id for p in self.points)


@dataclass(frozen=True)
class PseudoLabel:
    track_id: int
    frame_index: int
    camera_id: str
    position_camera: np.ndarray
    position_world: np.ndarray
    support: int


@dataclass
class LabelingDiagnostics:
    ego_speed: float = 0.0
    n_tracks_input: int = 0
    n_triangulated: int = 0
    n_triangulation_failures: int = 0
    n_observations_removed: int = 0
    n_foreground_points: int = 0
    n_clusters: int = 0
    n_unassigned_clusters: int = 0
    n_object_ids: int = 0
    n_labeled_ids: int = 0
    triangulation_failures: dict[int, str] = field(default_factory=dict)

    @property
    def labeled_fraction(self) -> float:
        return self.n_labeled_ids / self.n_object_ids if self.n_object_ids else 0.0


def connected_components(positions: np.ndarray, delta: float) -> list[list[int]]:
    """Single-linkage components under Euclidean hop <= delta.

    Returns index groups sorted by (descending size, smallest member index);
    indices within a group are sorted ascending.
    """
    n = len(positions)
    if n == 0:
        return []
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in cKDTree(positions).query_pairs(r=delta):
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    out = [sorted(g) for g in groups.values()]
    out.sort(key=lambda g: (-len(g), g[0]))
    return out


def intra_pc(points: list[WorldPoint], delta: float) -> PointCluster:
    """Largest delta-connected component among the points inside one box.

    Ties between equally large components go to the one containing the
    smallest track_id. The cluster_id is that smallest member track_id.
    """
    if not points:
        raise EmptyInput("intra_pc needs at least one point")
    pts = sorted(points, key=lambda p: p.track_id)
    groups = connected_components(np.array([p.position for p in pts]), delta)
    best = min(groups, key=lambda g: (-len(g), pts[g[0]].track_id))
    members = tuple(pts[i] for i in best)
    return PointCluster(members, cluster_id=members[0].track_id)


def inter_pc(points: list[WorldPoint], cfg: ClusterConfig) -> list[PointCluster]:
    """Global clustering of all foreground points; small components die.

    Input is treated as a set keyed by track_id. Survivors (size >= kappa)
    come back sorted by descending size, then by smallest member track_id,
    and carry that smallest track_id as cluster_id.
    """
    unique: dict[int, WorldPoint] = {}
    for p in points:
        unique.setdefault(p.track_id, p)
    pts = [unique[tid] for tid in sorted(unique)]
    if not pts:
        return []
    groups = connected_components(np.array([p.position for p in pts]), cfg.delta)
    clusters = []
    for g in groups:
        if len(g) < cfg.kappa:
            continue
        members = tuple(pts[i] for i in g)
        clusters.append(PointCluster(members, cluster_id=members[0].track_id))
    clusters.sort(key=lambda c: (-c.size, c.cluster_id))
    return clusters


def _projections_by_view(
    positions: np.ndarray,
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
) -> dict[tuple[int, str], tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """(u, v, valid) arrays for all positions in every posed view."""
    out = {}
    for key in sorted(poses):
        pose = poses[key]
        k = intrinsics[pose.camera_id]
        pc = (positions - pose.translation) @ pose.rotation_matrix()
        z = pc[:, 2]
        valid = z > 1e-9
        zs = np.where(valid, z, 1.0)
        u = k.fx * pc[:, 0] / zs + k.cx
        v = k.fy * pc[:, 1] / zs + k.cy
        out[key] = (u, v, valid)
    return out


def match_clusters(
    clusters: list[PointCluster],
    boxes: list[BBox2D],
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
) -> tuple[dict[int, int], list[int]]:
    """Assign each cluster to one object identity.

    A cluster whose projections fall only inside boxes of a single
    identity takes that identity; otherwise the identity containing the
    most projected members wins (ties to the smaller identity). Each
    identity is granted to at most one cluster: the largest claimant wins
    and the rest stay unassigned. Returns (cluster_id -> object_id,
    unassigned cluster_ids).
    """
    candidates: list[tuple[PointCluster, int]] = []
    unassigned: list[int] = []
    boxes = sorted(
        (b for b in boxes if b.object_id is not None),
        key=lambda b: (b.frame_index, b.camera_id, b.object_id),
    )
    for cluster in clusters:
        proj = _projections_by_view(cluster.positions(), poses, intrinsics)
        counts: dict[int, int] = {}
        for box in boxes:
            view = proj.get((box.frame_index, box.camera_id))
            if view is None:
                continue
            u, v, valid = view
            inside = valid & (u >= box.left) & (u <= box.right) & (v >= box.top) & (v <= box.bottom)
            n = int(np.count_nonzero(inside))
            if n:
                counts[box.object_id] = counts.get(box.object_id, 0) + n
        if not counts:
            unassigned.append(cluster.cluster_id)
        elif len(counts) == 1:
            candidates.append((cluster, next(iter(counts))))
        else:
            best = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
            candidates.append((cluster, best))

    assignments: dict[int, int] = {}
    claimed: dict[int, PointCluster] = {}
    for cluster, obj_id in candidates:
        holder = claimed.get(obj_id)
        if holder is None:
            claimed[obj_id] = cluster
            continue
        # larger cluster keeps the identity; ties to the smaller cluster_id
        if (-cluster.size, cluster.cluster_id) < (-holder.size, holder.cluster_id):
            unassigned.append(holder.cluster_id)
            claimed[obj_id] = cluster
        else:
            unassigned.append(cluster.cluster_id)
    for obj_id, cluster in claimed.items():
        assignments[cluster.cluster_id] = obj_id
    return assignments, sorted(unassigned)


def make_labels(
    cluster: PointCluster,
    poses: dict[tuple[int, str], Pose],
    boxes: list[BBox2D],
) -> list[PseudoLabel]:
    """Per-frame labels for an assigned cluster.

    The world barycenter is computed once and shared by every label, so a
    tracklet's world-frame target is bitwise constant; only the camera
    frame transform varies per (frame, camera) where the object has a box.
    """
    if cluster.assigned_track_id is None:
        raise UnassignedCluster(f"cluster {cluster.cluster_id} has no object identity")
    barycenter = cluster.positions().mean(axis=0)
    barycenter.setflags(write=False)
    labels = []
    own_boxes = sorted(
        (b for b in boxes if b.object_id == cluster.assigned_track_id),
        key=lambda b: (b.frame_index, b.camera_id),
    )
    for box in own_boxes:
        pose = poses.get((box.frame_index, box.camera_id))
        if pose is None:
            continue
        labels.append(
            PseudoLabel(
                track_id=cluster.assigned_track_id,
                frame_index=box.frame_index,
                camera_id=box.camera_id,
                position_camera=world_to_camera(barycenter, pose),
                position_world=barycenter,
                support=cluster.size,
            )
        )
    return labels


def generate_pseudo_labels(
    scene,
    cfg: ClusterConfig = ClusterConfig(),
    lm_cfg: LMConfig = LMConfig(),
    min_ego_speed: float = 1.0,
    reproj_threshold_px: float = 4.0,
) -> tuple[list[PseudoLabel], LabelingDiagnostics]:
    """Full labeling pass over a scene: reconstruct, cluster, match, label."""
    diag = LabelingDiagnostics()
    poses = scene.poses
    intrinsics = scene.intrinsics
    pose_list = sorted(poses.values(), key=lambda p: (p.camera_id, p.frame_index))
    diag.ego_speed = mean_ego_speed(pose_list, scene.frame_rate)
    if diag.ego_speed < min_ego_speed:
        raise GateRejected(
            f"mean ego speed {diag.ego_speed:.3f} m/s below minimum {min_ego_speed} m/s"
        )

    tracks = list(scene.tracks)
    diag.n_tracks_input = len(tracks)
    positions, failures = triangulate_tracks(tracks, poses, intrinsics)
    diag.n_triangulation_failures = len(failures)
    diag.triangulation_failures = failures
    tracks = [t for t in tracks if t.track_id in positions]

    result = refine_points_lm(positions, tracks, poses, intrinsics, lm_cfg)
    tracks, removed = reject_outliers(
        tracks, result.points, poses, intrinsics, reproj_threshold_px
    )
    diag.n_observations_removed = removed
    surviving = {t.track_id for t in tracks}
    points = {tid: p for tid, p in result.points.items() if tid in surviving}
    if removed and points:
        points = refine_points_lm(points, tracks, poses, intrinsics, lm_cfg).points
    diag.n_triangulated = len(points)

    world_points = {tid: WorldPoint(p, tid) for tid, p in sorted(points.items())}
    all_positions = np.array([world_points[tid].position for tid in sorted(world_points)])
    all_ids = sorted(world_points)
    proj = _projections_by_view(all_positions, poses, intrinsics) if all_ids else {}

    gt_boxes = [b for b in scene.detections_gt if b.object_id is not None]
    gt_boxes.sort(key=lambda b: (b.object_id, b.frame_index, b.camera_id))
    diag.n_object_ids = len({b.object_id for b in gt_boxes})

    foreground: list[WorldPoint] = []
    seen: set[int] = set()
    for box in gt_boxes:
        view = proj.get((box.frame_index, box.camera_id))
        if view is None:
            continue
        u, v, valid = view
        inside = valid & (u >= box.left) & (u <= box.right) & (v >= box.top) & (v <= box.bottom)
        members = [world_points[all_ids[i]] for i in np.flatnonzero(inside)]
        if not members:
            continue
        main = intra_pc(members, cfg.delta)
        for p in main.points:
            if p.track_id not in seen:
                seen.add(p.track_id)
                foreground.append(p)
    diag.n_foreground_points = len(foreground)

    clusters = inter_pc(foreground, cfg)
    diag.n_clusters = len(clusters)
    assignments, unassigned = match_clusters(clusters, gt_boxes, poses, intrinsics)
    diag.n_unassigned_clusters = len(unassigned)

    labels: list[PseudoLabel] = []
    for cluster in clusters:
        obj_id = assignments.get(cluster.cluster_id)
        if obj_id is None:
            continue
        assigned = replace(cluster, assigned_track_id=obj_id)
        labels.extend(make_labels(assigned, poses, gt_boxes))
    labels.sort(key=lambda l: (l.track_id, l.frame_index, l.camera_id))
    diag.n_labeled_ids = len({l.track_id for l in labels})
    return labels, diag

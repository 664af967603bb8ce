import numpy as np
import pytest

from tracklift.geometry import BBox2D, PinholeIntrinsics, Pose, WorldPoint, world_to_camera
from tracklift.labeling import (
    ClusterConfig,
    EmptyInput,
    GateRejected,
    PointCluster,
    UnassignedCluster,
    connected_components,
    generate_pseudo_labels,
    inter_pc,
    intra_pc,
    make_labels,
    match_clusters,
)
from tracklift.synth import SynthConfig, generate_synthetic_scene

K = PinholeIntrinsics("cam", 600.0, 600.0, 640.0, 360.0, 1280, 720)
IDENTITY = Pose(np.array([1.0, 0, 0, 0]), np.zeros(3), 0, "cam")


def wp(x, y, z, tid):
    return WorldPoint(np.array([x, y, z], dtype=float), tid)


def brute_force_components(positions: np.ndarray, delta: float) -> list[list[int]]:
    """O(n^2) single-linkage oracle with plain union-find."""
    n = len(positions)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(positions[i] - positions[j]) <= delta:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[rj] = ri
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: (-len(g), g[0]))


def test_intra_chain_with_outlier():
    pts = [wp(0, 0, 0, 0), wp(0.4, 0, 0, 1), wp(0.8, 0, 0, 2), wp(10, 0, 0, 3)]
    cluster = intra_pc(pts, 0.5)
    assert sorted(p.track_id for p in cluster.points) == [0, 1, 2]


def test_intra_tie_break_by_track_id():
    pts = [wp(0.6, 0, 0, 5), wp(0, 0, 0, 9)]
    cluster = intra_pc(pts, 0.5)
    assert [p.track_id for p in cluster.points] == [5]


def test_intra_empty_input():
    with pytest.raises(EmptyInput):
        intra_pc([], 0.5)


def test_components_match_brute_force():
    rng = np.random.default_rng(0)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(5, 120))
        positions = rng.uniform(0, 4, size=(n, 3))
        fast = connected_components(positions, 0.5)
        slow = brute_force_components(positions, 0.5)
        assert fast == slow


def blob(center, n, tid0, spacing=0.3):
    """Chain of n points spaced `spacing` apart along x."""
    return [wp(center[0] + spacing * i, center[1], center[2], tid0 + i) for i in range(n)]


def test_inter_kappa_filters_small_clusters():
    pts = blob((0, 0, 0), 40, 0) + blob((100, 0, 0), 10, 100)
    clusters = inter_pc(pts, ClusterConfig(delta=0.5, kappa=30))
    assert len(clusters) == 1
    assert clusters[0].size == 40
    assert clusters[0].min_track_id() == 0


def test_inter_kappa_one_is_plain_components():
    pts = blob((0, 0, 0), 5, 0) + blob((100, 0, 0), 3, 50)
    clusters = inter_pc(pts, ClusterConfig(delta=0.5, kappa=1))
    assert [c.size for c in clusters] == [5, 3]


def test_inter_matches_brute_force():
    for seed in range(10):
        rng = np.random.default_rng(seed + 100)
        n = int(rng.integers(20, 150))
        positions = rng.uniform(0, 3, size=(n, 3))
        pts = [WorldPoint(p, i) for i, p in enumerate(positions)]
        for kappa in (1, 5):
            clusters = inter_pc(pts, ClusterConfig(delta=0.5, kappa=kappa))
            expected = [g for g in brute_force_components(positions, 0.5) if len(g) >= kappa]
            assert [sorted(p.track_id for p in c.points) for c in clusters] == expected


def test_inter_deduplicates_by_track_id():
    pts = blob((0, 0, 0), 35, 0)
    clusters = inter_pc(pts + pts, ClusterConfig(delta=0.5, kappa=30))
    assert len(clusters) == 1 and clusters[0].size == 35


def test_partition_property():
    rng = np.random.default_rng(7)
    positions = rng.uniform(0, 3, size=(80, 3))
    groups = connected_components(positions, 0.5)
    flat = [i for g in groups for i in g]
    assert sorted(flat) == list(range(80))
    assert len(flat) == len(set(flat))


def test_monotone_in_delta_and_kappa():
    rng = np.random.default_rng(8)
    positions = rng.uniform(0, 3, size=(100, 3))
    pts = [WorldPoint(p, i) for i, p in enumerate(positions)]
    n_prev = None
    for delta in (0.2, 0.4, 0.8, 1.6):
        n = len(connected_components(positions, delta))
        if n_prev is not None:
            assert n <= n_prev
        n_prev = n
    k_prev = None
    for kappa in (1, 3, 10, 30):
        n = len(inter_pc(pts, ClusterConfig(delta=0.5, kappa=kappa)))
        if k_prev is not None:
            assert n <= k_prev
        k_prev = n


def box_at(u, v, size, frame, obj):
    return BBox2D(u - size / 2, v - size / 2, size, size, 1.0, frame, "cam", object_id=obj)


def tight_cluster(center, n, tid0):
    return PointCluster(
        tuple(wp(center[0] + 0.01 * i, center[1], center[2], tid0 + i) for i in range(n)),
        cluster_id=tid0,
    )


def test_match_unique_containment():
    cluster = tight_cluster((0, 0, 10), 5, 0)
    poses = {(0, "cam"): IDENTITY}
    boxes = [box_at(640, 360, 80, 0, 7)]
    assignments, unassigned = match_clusters([cluster], boxes, poses, {"cam": K})
    assert assignments == {0: 7} and unassigned == []


def test_match_majority_count_wins():
    # id 3 contains the cluster in two frames, id 5 in one: 2n vs n projections
    cluster = tight_cluster((0, 0, 10), 60, 0)
    poses = {
        (0, "cam"): IDENTITY,
        (1, "cam"): Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 0.5]), 1, "cam"),
        (2, "cam"): Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 1.0]), 2, "cam"),
    }
    boxes = [
        box_at(640, 360, 200, 0, 3),
        box_at(640, 360, 200, 1, 3),
        box_at(640, 360, 200, 2, 5),
    ]
    assignments, _ = match_clusters([cluster], boxes, poses, {"cam": K})
    assert assignments == {0: 3}


def test_match_one_cluster_per_identity():
    big = tight_cluster((0, 0, 10), 50, 0)
    small = tight_cluster((0.2, 0, 10), 40, 100)
    poses = {(0, "cam"): IDENTITY}
    boxes = [box_at(640, 360, 300, 0, 3)]
    assignments, unassigned = match_clusters([big, small], boxes, poses, {"cam": K})
    assert assignments == {0: 3}
    assert unassigned == [100]


def test_match_zero_containment_unassigned():
    cluster = tight_cluster((50, 0, 10), 5, 0)  # projects far outside the box
    poses = {(0, "cam"): IDENTITY}
    boxes = [box_at(640, 360, 50, 0, 1)]
    assignments, unassigned = match_clusters([cluster], boxes, poses, {"cam": K})
    assert assignments == {} and unassigned == [0]


def test_make_labels_barycenter():
    cluster = PointCluster((wp(0, 0, 10, 0), wp(0, 0, 12, 1)), cluster_id=0, assigned_track_id=4)
    poses = {(0, "cam"): IDENTITY}
    boxes = [box_at(640, 360, 50, 0, 4)]
    labels = make_labels(cluster, poses, boxes)
    assert len(labels) == 1
    assert np.allclose(labels[0].position_camera, [0, 0, 11])
    assert np.allclose(labels[0].position_world, [0, 0, 11])


def test_make_labels_translated_camera():
    cluster = PointCluster((wp(0, 0, 10, 0), wp(0, 0, 12, 1)), cluster_id=0, assigned_track_id=4)
    pose = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 1.0]), 0, "cam")
    boxes = [box_at(640, 360, 50, 0, 4)]
    labels = make_labels(cluster, {(0, "cam"): pose}, boxes)
    assert np.allclose(labels[0].position_camera, [0, 0, 10])


def test_make_labels_requires_assignment():
    cluster = PointCluster((wp(0, 0, 10, 0),), cluster_id=0)
    with pytest.raises(UnassignedCluster):
        make_labels(cluster, {(0, "cam"): IDENTITY}, [])


def test_make_labels_world_position_shared():
    cluster = PointCluster(
        tuple(wp(0.1 * i, 0, 10, i) for i in range(4)), cluster_id=0, assigned_track_id=1
    )
    poses = {
        (0, "cam"): IDENTITY,
        (1, "cam"): Pose(np.array([1.0, 0, 0, 0]), np.array([0, 0, 0.3]), 1, "cam"),
    }
    boxes = [box_at(640, 360, 100, 0, 1), box_at(640, 360, 100, 1, 1)]
    labels = make_labels(cluster, poses, boxes)
    assert len(labels) == 2
    assert labels[0].position_world is labels[1].position_world  # bitwise shared


def static_scene(seed=0, **kwargs):
    defaults = dict(
        seed=seed,
        num_static_objects=3,
        keypoints_per_object=35,
        pixel_noise=0.3,
        num_frames=20,
    )
    defaults.update(kwargs)
    return generate_synthetic_scene(SynthConfig(**defaults))


def test_generate_labels_static_scene():
    scene, truth = static_scene()
    labels, diag = generate_pseudo_labels(scene)
    assert diag.n_labeled_ids == 3
    by_track = {}
    for l in labels:
        by_track.setdefault(l.track_id, []).append(l)
    assert sorted(by_track) == [0, 1, 2]
    for oid, obj in truth.objects.items():
        track_labels = by_track[oid]
        world = track_labels[0].position_world
        # constant world barycenter across the tracklet, bitwise
        for l in track_labels[1:]:
            assert np.array_equal(l.position_world, world)
        assert np.linalg.norm(world - obj.keypoint_centroid) < 0.5
        for l in track_labels:
            pose = scene.poses[(l.frame_index, l.camera_id)]
            assert np.allclose(l.position_camera, world_to_camera(world, pose), atol=1e-12)


def test_fast_mover_receives_no_label():
    scene, truth = static_scene(seed=5, num_static_objects=2, num_dynamic_objects=1,
                                dynamic_speed=10.0)
    labels, diag = generate_pseudo_labels(scene)
    labeled = {l.track_id for l in labels}
    assert 2 not in labeled  # the dynamic object
    assert labeled == {0, 1}


def test_stationary_camera_gate_rejected():
    scene, _ = static_scene(seed=1, camera_speed=0.0)
    with pytest.raises(GateRejected):
        generate_pseudo_labels(scene)


def test_labels_deterministic_under_input_order():
    scene, _ = static_scene(seed=2)
    labels_a, _ = generate_pseudo_labels(scene)
    rng = np.random.default_rng(0)
    scene.tracks = [scene.tracks[i] for i in rng.permutation(len(scene.tracks))]
    scene.detections_gt = [scene.detections_gt[i] for i in rng.permutation(len(scene.detections_gt))]
    labels_b, _ = generate_pseudo_labels(scene)
    assert len(labels_a) == len(labels_b)
    for a, b in zip(labels_a, labels_b):
        assert a.track_id == b.track_id and a.frame_index == b.frame_index
        assert np.array_equal(a.position_world, b.position_world)
        assert np.array_equal(a.position_camera, b.position_camera)


def test_cluster_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(delta=0.0)
    with pytest.raises(ValueError):
        ClusterConfig(kappa=0)

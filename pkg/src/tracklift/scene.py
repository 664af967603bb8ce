"""Scene data model: everything one sequence needs, loaded from a directory.

A scene directory holds intrinsics.txt, poses.txt and detections.csv
(required), plus tracks.txt, embeddings.csv and meta.txt (optional).
Frames are contiguous from 0 per camera and every record must reference a
declared camera and a posed (frame, camera) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .fileio import DanglingReference, MissingFile, ParseError
from .geometry import BBox2D, PinholeIntrinsics, Pose
from .reconstruction import KeypointTrack

SCENE_FILES = {
    "intrinsics": "intrinsics.txt",
    "poses": "poses.txt",
    "detections": "detections.csv",
    "tracks": "tracks.txt",
    "embeddings": "embeddings.csv",
    "meta": "meta.txt",
}

DEFAULT_FRAME_RATE = 10.0


@dataclass
class Scene:
    intrinsics: dict[str, PinholeIntrinsics]
    poses: dict[tuple[int, str], Pose]
    tracks: list[KeypointTrack] = field(default_factory=list)
    detections_gt: list[BBox2D] = field(default_factory=list)
    detections_raw: list[BBox2D] = field(default_factory=list)
    embeddings: dict[tuple[int, str, int], np.ndarray] = field(default_factory=dict)
    gt_depths: dict[tuple[int, int], float] = field(default_factory=dict)
    frame_rate: float = DEFAULT_FRAME_RATE

    @property
    def num_frames(self) -> int:
        return 1 + max((f for f, _ in self.poses), default=-1)

    def validate(self):
        cams = set(self.intrinsics)
        frames_by_cam: dict[str, set[int]] = {}
        for (frame, cam), pose in self.poses.items():
            if cam not in cams:
                raise DanglingReference(f"pose references undeclared camera {cam!r}")
            if pose.frame_index != frame or pose.camera_id != cam:
                raise DanglingReference(f"pose keyed ({frame}, {cam!r}) disagrees with its fields")
            frames_by_cam.setdefault(cam, set()).add(frame)
        for cam, frames in sorted(frames_by_cam.items()):
            expected = set(range(max(frames) + 1))
            if frames != expected:
                missing = sorted(expected - frames)
                raise DanglingReference(f"camera {cam!r} poses not contiguous from 0, missing {missing}")
        for box in self.detections_gt + self.detections_raw:
            if box.camera_id not in cams:
                raise DanglingReference(f"detection references undeclared camera {box.camera_id!r}")
            if (box.frame_index, box.camera_id) not in self.poses:
                raise DanglingReference(
                    f"detection at frame {box.frame_index} camera {box.camera_id!r} has no pose"
                )
        for track in self.tracks:
            for frame, cam, u, v in track.observations:
                if cam not in cams:
                    raise DanglingReference(
                        f"track {track.track_id} references undeclared camera {cam!r}"
                    )
                if (frame, cam) not in self.poses:
                    raise DanglingReference(
                        f"track {track.track_id} observation at frame {frame} "
                        f"camera {cam!r} has no pose"
                    )
                k = self.intrinsics[cam]
                if not (0 <= u <= k.width and 0 <= v <= k.height):
                    raise DanglingReference(
                        f"track {track.track_id} observation ({u}, {v}) outside "
                        f"{k.width}x{k.height} image of camera {cam!r}"
                    )
        raw_counts: dict[tuple[int, str], int] = {}
        for box in self.detections_raw:
            key = (box.frame_index, box.camera_id)
            raw_counts[key] = raw_counts.get(key, 0) + 1
        for frame, cam, det in self.embeddings:
            if cam not in cams:
                raise DanglingReference(f"embedding references undeclared camera {cam!r}")
            if det >= raw_counts.get((frame, cam), 0):
                raise DanglingReference(
                    f"embedding references detection {det} at frame {frame} "
                    f"camera {cam!r} but only {raw_counts.get((frame, cam), 0)} exist"
                )
        if self.embeddings:
            for (frame, cam), n in sorted(raw_counts.items()):
                for det in range(n):
                    if (frame, cam, det) not in self.embeddings:
                        raise DanglingReference(
                            f"no embedding for detection {det} at frame {frame} camera {cam!r}"
                        )
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")


def load_scene(directory: str | Path) -> Scene:
    """Load and validate a scene directory."""
    d = Path(directory)
    if not d.is_dir():
        raise MissingFile(f"scene directory {d} does not exist")
    intrinsics = fileio.read_intrinsics(d / SCENE_FILES["intrinsics"])
    poses = fileio.read_poses(d / SCENE_FILES["poses"])
    gt, raw, depths = fileio.read_detections(d / SCENE_FILES["detections"])

    tracks_path = d / SCENE_FILES["tracks"]
    tracks = fileio.read_keypoint_tracks(tracks_path) if tracks_path.exists() else []
    emb_path = d / SCENE_FILES["embeddings"]
    embeddings = fileio.read_embeddings(emb_path) if emb_path.exists() else {}

    frame_rate = DEFAULT_FRAME_RATE
    meta_path = d / SCENE_FILES["meta"]
    if meta_path.exists():
        meta = fileio.read_keyvalues(meta_path)
        if "frame_rate" in meta:
            try:
                frame_rate = float(meta["frame_rate"])
            except ValueError:
                raise ParseError(meta_path, 0, f"bad frame_rate {meta['frame_rate']!r}")

    scene = Scene(
        intrinsics=intrinsics,
        poses=poses,
        tracks=tracks,
        detections_gt=gt,
        detections_raw=raw,
        embeddings=embeddings,
        gt_depths=depths,
        frame_rate=frame_rate,
    )
    scene.validate()
    return scene


def write_scene(scene: Scene, directory: str | Path):
    """Write a scene so load_scene reads back an equal one."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    fileio.write_intrinsics(d / SCENE_FILES["intrinsics"], scene.intrinsics)
    fileio.write_poses(d / SCENE_FILES["poses"], scene.poses)
    fileio.write_detections(
        d / SCENE_FILES["detections"], scene.detections_gt, scene.detections_raw, scene.gt_depths
    )
    if scene.tracks:
        fileio.write_keypoint_tracks(d / SCENE_FILES["tracks"], scene.tracks)
    if scene.embeddings:
        fileio.write_embeddings(d / SCENE_FILES["embeddings"], scene.embeddings)
    fileio.write_keyvalues(d / SCENE_FILES["meta"], {"frame_rate": fileio.fmt(scene.frame_rate)})


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Exact equality of every stored field (arrays compared bitwise)."""
    if sorted(a.intrinsics) != sorted(b.intrinsics):
        return False
    for cam in a.intrinsics:
        if a.intrinsics[cam] != b.intrinsics[cam]:
            return False
    if sorted(a.poses) != sorted(b.poses):
        return False
    for key in a.poses:
        pa, pb = a.poses[key], b.poses[key]
        if not (np.array_equal(pa.rotation, pb.rotation) and np.array_equal(pa.translation, pb.translation)):
            return False
    if sorted(t.track_id for t in a.tracks) != sorted(t.track_id for t in b.tracks):
        return False
    ta = {t.track_id: t for t in a.tracks}
    tb = {t.track_id: t for t in b.tracks}
    for tid in ta:
        if sorted(ta[tid].observations) != sorted(tb[tid].observations):
            return False
    if sorted(a.detections_gt, key=_box_key) != sorted(b.detections_gt, key=_box_key):
        return False
    if sorted(a.detections_raw, key=_box_key) != sorted(b.detections_raw, key=_box_key):
        return False
    if sorted(a.embeddings) != sorted(b.embeddings):
        return False
    for key in a.embeddings:
        if not np.array_equal(a.embeddings[key], b.embeddings[key]):
            return False
    return a.gt_depths == b.gt_depths and a.frame_rate == b.frame_rate


def _box_key(b: BBox2D):
    return (b.frame_index, b.camera_id, -1 if b.object_id is None else b.object_id, b.left, b.top)

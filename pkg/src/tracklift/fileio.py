"""Line-oriented text formats.

All files are plain text, one record per line; blank lines and lines
starting with '#' are ignored on input. Floats are written with repr so
every format round-trips exactly. Formats:

  intrinsics   camera_id fx fy cx cy width height          (spaces)
  poses        frame camera_id tx ty tz qx qy qz qw        (spaces, camera-to-world, w last)
  tracks       track_id frame camera_id u v                (spaces)
  detections   frame,id,bb_left,bb_top,bb_width,bb_height,score,class,camera_id[,depth]
  embeddings   frame,camera_id,det_index,v1,...,vD
  points       track_id X Y Z n_observations mean_reproj_error_px
  labels       track_id,frame,camera_id,x_cam,y_cam,z_cam,X_world,Y_world,Z_world,support
  track rows   frame,track_id,bb_left,bb_top,bb_width,bb_height,score,x_cam,y_cam,z_cam
  matrices     'rows cols' header line, then row-major values one row per line
  meta/config  key=value
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import BBox2D, PinholeIntrinsics, Pose
from .labeling import PseudoLabel
from .metrics import EvalReport
from .reconstruction import KeypointTrack
from .tracker import TrackRow


class ParseError(Exception):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class MissingFile(Exception):
    pass


class DanglingReference(Exception):
    pass


def fmt(v: float) -> str:
    return repr(float(v))


def _lines(path: Path, sep: str | None):
    if not path.exists():
        raise MissingFile(str(path))
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line.split(sep) if sep else line.split()


def _floats(path: Path, lineno: int, tokens: list[str], what: str) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(path, lineno, f"bad {what}: {tokens}")


def _int(path: Path, lineno: int, token: str, what: str) -> int:
    try:
        return int(token)
    except ValueError:
        raise ParseError(path, lineno, f"bad {what}: {token!r}")


# --- intrinsics ---------------------------------------------------------

def read_intrinsics(path: Path) -> dict[str, PinholeIntrinsics]:
    out: dict[str, PinholeIntrinsics] = {}
    for lineno, tok in _lines(path, None):
        if len(tok) != 7:
            raise ParseError(path, lineno, f"intrinsics line needs 7 fields, got {len(tok)}")
        vals = _floats(path, lineno, tok[1:], "intrinsics values")
        try:
            cam = PinholeIntrinsics(tok[0], vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]))
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc))
        if cam.camera_id in out:
            raise ParseError(path, lineno, f"camera {cam.camera_id!r} declared twice")
        out[cam.camera_id] = cam
    return out


def write_intrinsics(path: Path, intrinsics: dict[str, PinholeIntrinsics]):
    with open(path, "w", encoding="utf-8") as f:
        for cam_id in sorted(intrinsics):
            k = intrinsics[cam_id]
            f.write(
                f"{cam_id} {fmt(k.fx)} {fmt(k.fy)} {fmt(k.cx)} {fmt(k.cy)} {k.width} {k.height}\n"
            )


# --- poses --------------------------------------------------------------

def read_poses(path: Path) -> dict[tuple[int, str], Pose]:
    out: dict[tuple[int, str], Pose] = {}
    for lineno, tok in _lines(path, None):
        if len(tok) != 9:
            raise ParseError(path, lineno, f"pose line needs 9 fields, got {len(tok)}")
        frame = _int(path, lineno, tok[0], "frame")
        cam = tok[1]
        vals = _floats(path, lineno, tok[2:], "pose values")
        qx, qy, qz, qw = vals[3:7]
        try:
            pose = Pose(np.array([qw, qx, qy, qz]), np.array(vals[:3]), frame, cam)
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc))
        key = (frame, cam)
        if key in out:
            raise ParseError(path, lineno, f"pose for frame {frame} camera {cam!r} repeated")
        out[key] = pose
    return out


def write_poses(path: Path, poses: dict[tuple[int, str], Pose]):
    with open(path, "w", encoding="utf-8") as f:
        for frame, cam in sorted(poses):
            p = poses[(frame, cam)]
            qw, qx, qy, qz = p.rotation
            t = p.translation
            f.write(
                f"{frame} {cam} {fmt(t[0])} {fmt(t[1])} {fmt(t[2])} "
                f"{fmt(qx)} {fmt(qy)} {fmt(qz)} {fmt(qw)}\n"
            )


# --- keypoint tracks ----------------------------------------------------

def read_keypoint_tracks(path: Path) -> list[KeypointTrack]:
    obs: dict[int, list[tuple[int, str, float, float]]] = {}
    for lineno, tok in _lines(path, None):
        if len(tok) != 5:
            raise ParseError(path, lineno, f"track line needs 5 fields, got {len(tok)}")
        tid = _int(path, lineno, tok[0], "track_id")
        frame = _int(path, lineno, tok[1], "frame")
        uv = _floats(path, lineno, tok[3:], "pixel coordinates")
        obs.setdefault(tid, []).append((frame, tok[2], uv[0], uv[1]))
    return [KeypointTrack(tid, tuple(obs[tid])) for tid in sorted(obs)]


def write_keypoint_tracks(path: Path, tracks: list[KeypointTrack]):
    with open(path, "w", encoding="utf-8") as f:
        for track in sorted(tracks, key=lambda t: t.track_id):
            for frame, cam, u, v in track.observations:
                f.write(f"{track.track_id} {frame} {cam} {fmt(u)} {fmt(v)}\n")


# --- detections ---------------------------------------------------------

def read_detections(path: Path) -> tuple[list[BBox2D], list[BBox2D], dict[tuple[int, int], float]]:
    """Returns (gt boxes with ids, raw detections, gt depth by (frame, id))."""
    gt: list[BBox2D] = []
    raw: list[BBox2D] = []
    depths: dict[tuple[int, int], float] = {}
    for lineno, tok in _lines(path, ","):
        if len(tok) not in (9, 10):
            raise ParseError(path, lineno, f"detection line needs 9 or 10 fields, got {len(tok)}")
        frame = _int(path, lineno, tok[0], "frame")
        obj = _int(path, lineno, tok[1], "id")
        vals = _floats(path, lineno, tok[2:7], "box values")
        _int(path, lineno, tok[7], "class")
        cam = tok[8]
        try:
            box = BBox2D(
                left=vals[0],
                top=vals[1],
                width_px=vals[2],
                height_px=vals[3],
                score=vals[4],
                frame_index=frame,
                camera_id=cam,
                object_id=obj if obj >= 0 else None,
            )
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc))
        if obj >= 0:
            gt.append(box)
            if len(tok) == 10:
                depths[(frame, obj)] = _floats(path, lineno, tok[9:], "depth")[0]
        else:
            raw.append(box)
    return gt, raw, depths


def write_detections(
    path: Path,
    gt: list[BBox2D],
    raw: list[BBox2D],
    depths: dict[tuple[int, int], float] | None = None,
):
    def line(box: BBox2D) -> str:
        obj = box.object_id if box.object_id is not None else -1
        base = (
            f"{box.frame_index},{obj},{fmt(box.left)},{fmt(box.top)},"
            f"{fmt(box.width_px)},{fmt(box.height_px)},{fmt(box.score)},1,{box.camera_id}"
        )
        if depths and box.object_id is not None and (box.frame_index, box.object_id) in depths:
            base += f",{fmt(depths[(box.frame_index, box.object_id)])}"
        return base + "\n"

    with open(path, "w", encoding="utf-8") as f:
        for box in sorted(gt, key=lambda b: (b.frame_index, b.camera_id, b.object_id)):
            f.write(line(box))
        for box in sorted(raw, key=lambda b: (b.frame_index, b.camera_id, b.left, b.top)):
            f.write(line(box))


# --- embeddings ---------------------------------------------------------

def read_embeddings(path: Path) -> dict[tuple[int, str, int], np.ndarray]:
    out: dict[tuple[int, str, int], np.ndarray] = {}
    dim: int | None = None
    for lineno, tok in _lines(path, ","):
        if len(tok) < 4:
            raise ParseError(path, lineno, f"embedding line needs >= 4 fields, got {len(tok)}")
        frame = _int(path, lineno, tok[0], "frame")
        det = _int(path, lineno, tok[2], "det_index")
        vec = np.array(_floats(path, lineno, tok[3:], "embedding values"))
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise ParseError(path, lineno, f"embedding dim {len(vec)} != {dim}")
        key = (frame, tok[1], det)
        if key in out:
            raise ParseError(path, lineno, f"embedding for {key} repeated")
        out[key] = vec
    return out


def write_embeddings(path: Path, embeddings: dict[tuple[int, str, int], np.ndarray]):
    with open(path, "w", encoding="utf-8") as f:
        for frame, cam, det in sorted(embeddings):
            vec = embeddings[(frame, cam, det)]
            vals = ",".join(fmt(v) for v in vec)
            f.write(f"{frame},{cam},{det},{vals}\n")


# --- reconstructed points -----------------------------------------------

def write_points(path: Path, rows: list[tuple[int, np.ndarray, int, float]]):
    """Rows of (track_id, position, n_observations, mean reprojection error)."""
    with open(path, "w", encoding="utf-8") as f:
        for tid, p, n_obs, err in rows:
            f.write(f"{tid} {fmt(p[0])} {fmt(p[1])} {fmt(p[2])} {n_obs} {fmt(err)}\n")


# --- pseudo labels ------------------------------------------------------

def write_labels(path: Path, labels: list[PseudoLabel]):
    with open(path, "w", encoding="utf-8") as f:
        for l in labels:
            pc, pw = l.position_camera, l.position_world
            f.write(
                f"{l.track_id},{l.frame_index},{l.camera_id},"
                f"{fmt(pc[0])},{fmt(pc[1])},{fmt(pc[2])},"
                f"{fmt(pw[0])},{fmt(pw[1])},{fmt(pw[2])},{l.support}\n"
            )


def read_labels(path: Path) -> list[PseudoLabel]:
    out = []
    for lineno, tok in _lines(path, ","):
        if len(tok) != 10:
            raise ParseError(path, lineno, f"label line needs 10 fields, got {len(tok)}")
        vals = _floats(path, lineno, tok[3:9], "label positions")
        out.append(
            PseudoLabel(
                track_id=_int(path, lineno, tok[0], "track_id"),
                frame_index=_int(path, lineno, tok[1], "frame"),
                camera_id=tok[2],
                position_camera=np.array(vals[:3]),
                position_world=np.array(vals[3:]),
                support=_int(path, lineno, tok[9], "support"),
            )
        )
    return out


# --- tracker output -----------------------------------------------------

def write_track_rows(path: Path, rows: list[TrackRow]):
    with open(path, "w", encoding="utf-8") as f:
        for r in rows:
            f.write(
                f"{r.frame},{r.track_id},{fmt(r.left)},{fmt(r.top)},{fmt(r.width)},"
                f"{fmt(r.height)},{fmt(r.score)},{fmt(r.x_cam)},{fmt(r.y_cam)},{fmt(r.z_cam)}\n"
            )


def read_track_rows(path: Path) -> tuple[dict[int, list[BBox2D]], dict[tuple[int, int], float]]:
    """Hypothesis boxes per frame and predicted depth (z_cam) per (frame, id)."""
    frames: dict[int, list[BBox2D]] = {}
    depths: dict[tuple[int, int], float] = {}
    for lineno, tok in _lines(path, ","):
        if len(tok) != 10:
            raise ParseError(path, lineno, f"track row needs 10 fields, got {len(tok)}")
        frame = _int(path, lineno, tok[0], "frame")
        tid = _int(path, lineno, tok[1], "track_id")
        vals = _floats(path, lineno, tok[2:], "track row values")
        box = BBox2D(
            left=vals[0],
            top=vals[1],
            width_px=vals[2],
            height_px=vals[3],
            score=vals[4],
            frame_index=frame,
            camera_id="",
            object_id=tid,
        )
        frames.setdefault(frame, []).append(box)
        depths[(frame, tid)] = vals[7]
    return frames, depths


def gt_boxes_by_frame(gt: list[BBox2D]) -> dict[int, list[BBox2D]]:
    frames: dict[int, list[BBox2D]] = {}
    for box in gt:
        frames.setdefault(box.frame_index, []).append(box)
    return frames


def read_gt_file(path: Path) -> tuple[dict[int, list[BBox2D]], dict[tuple[int, int], float]]:
    gt, _, depths = read_detections(path)
    return gt_boxes_by_frame(gt), depths


# --- matrices -----------------------------------------------------------

def read_matrices(path: Path) -> list[np.ndarray]:
    mats: list[np.ndarray] = []
    rows_left = 0
    current: list[list[float]] = []
    shape: tuple[int, int] | None = None
    for lineno, tok in _lines(path, None):
        if rows_left == 0:
            if len(tok) != 2:
                raise ParseError(path, lineno, f"matrix header needs 2 fields, got {len(tok)}")
            r = _int(path, lineno, tok[0], "rows")
            c = _int(path, lineno, tok[1], "cols")
            if r < 1 or c < 1:
                raise ParseError(path, lineno, f"bad matrix shape {r}x{c}")
            shape = (r, c)
            rows_left = r
            current = []
        else:
            vals = _floats(path, lineno, tok, "matrix row")
            if len(vals) != shape[1]:
                raise ParseError(path, lineno, f"matrix row needs {shape[1]} values, got {len(vals)}")
            current.append(vals)
            rows_left -= 1
            if rows_left == 0:
                mats.append(np.array(current))
    if rows_left != 0:
        raise ParseError(path, 0, "truncated matrix block at end of file")
    return mats


def write_matrices(path: Path, matrices: list[np.ndarray]):
    with open(path, "w", encoding="utf-8") as f:
        for m in matrices:
            m = np.atleast_2d(np.asarray(m, dtype=np.float64))
            f.write(f"{m.shape[0]} {m.shape[1]}\n")
            for row in m:
                f.write(" ".join(fmt(v) for v in row) + "\n")


# --- key=value files ----------------------------------------------------

def read_keyvalues(path: Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, tok in _lines(path, "\n"):
        line = tok[0]
        if "=" not in line:
            raise ParseError(path, lineno, f"expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_keyvalues(path: Path, values: dict):
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(values):
            f.write(f"{key}={values[key]}\n")


# --- evaluation report --------------------------------------------------

REPORT_COLUMNS = [
    "sequence", "mota", "idf1", "idp", "idr", "fp", "fn", "idsw", "mt", "ml",
    "num_gt", "abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3",
]


def write_report(path: Path, named_reports: list[tuple[str, EvalReport]]):
    def cell(v) -> str:
        if v is None:
            return ""
        if isinstance(v, float):
            return f"{v:.6f}"
        return str(v)

    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(REPORT_COLUMNS) + "\n")
        for name, r in named_reports:
            row = [
                name, cell(r.mota), cell(r.idf1), cell(r.idp), cell(r.idr),
                cell(r.fp), cell(r.fn), cell(r.idsw), cell(r.mt), cell(r.ml),
                cell(r.num_gt), cell(r.abs_rel), cell(r.sq_rel), cell(r.rmse),
                cell(r.rmse_log), cell(r.delta1), cell(r.delta2), cell(r.delta3),
            ]
            f.write(",".join(row) + "\n")

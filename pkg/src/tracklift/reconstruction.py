"""Recover 3D keypoint positions from multi-view pixel tracks.

Camera poses and intrinsics are fixed throughout; only the 3D points are
optimized, so the nonlinear refinement decomposes into independent
3-parameter least-squares problems that are solved as one vectorized
batch (optionally split across worker threads, see TRACKLIFT_THREADS).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .geometry import PinholeIntrinsics, Pose

_MIN_DEPTH = 1e-9
_MIN_BASELINE = 1e-6
_MAX_DAMPING = 1e12


class DegenerateGeometry(Exception):
    """Triangulation is rank-deficient (zero baseline or parallel rays)."""


class InsufficientObservations(Exception):
    """Fewer than two observations are available for triangulation."""


def worker_count() -> int:
    """Thread count for data-parallel solves (TRACKLIFT_THREADS overrides)."""
    env = os.environ.get("TRACKLIFT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"TRACKLIFT_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise ValueError(f"TRACKLIFT_THREADS must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


@dataclass(frozen=True)
class KeypointTrack:
    """One keypoint's pixel observations: (frame_index, camera_id, u, v)."""

    track_id: int
    observations: tuple[tuple[int, str, float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "observations", tuple(self.observations))

    def distinct_views(self) -> int:
        return len({(f, c) for f, c, _, _ in self.observations})


@dataclass(frozen=True)
class LMConfig:
    max_iterations: int = 50
    initial_damping: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1
    cost_tolerance: float = 1e-10
    huber_delta: float | None = None

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        for name in ("initial_damping", "damping_up", "damping_down", "cost_tolerance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.huber_delta is not None and self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be positive, got {self.huber_delta}")


@dataclass
class RefineResult:
    points: dict[int, np.ndarray]
    initial_cost: float
    final_cost: float
    cost_history: list[float]
    dropped_residuals: int
    iterations: int


@dataclass
class _ObsArrays:
    """Per-observation arrays, grouped contiguously by point."""

    rot_wc: np.ndarray  # (n_obs, 3, 3) world-to-camera rotations
    centers: np.ndarray  # (n_obs, 3) camera centers
    fx: np.ndarray
    fy: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    uv: np.ndarray  # (n_obs, 2) measured pixels
    point_index: np.ndarray  # (n_obs,) index into the point batch
    seg_starts: np.ndarray  # (n_pts,) first obs of each point
    track_ids: list[int] = field(default_factory=list)


def _build_obs_arrays(
    tracks: list[KeypointTrack],
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
    track_ids: list[int],
) -> _ObsArrays:
    by_id = {t.track_id: t for t in tracks}
    ordered = [by_id[tid] for tid in track_ids]
    # per-view tables, indexed once per observation afterward
    keys = sorted(poses)
    view_index = {key: j for j, key in enumerate(keys)}
    rot_tab = np.array([poses[key].rotation_matrix().T for key in keys]).reshape(-1, 3, 3)
    cen_tab = np.array([poses[key].translation for key in keys]).reshape(-1, 3)
    k_tab = np.array(
        [
            (
                intrinsics[key[1]].fx,
                intrinsics[key[1]].fy,
                intrinsics[key[1]].cx,
                intrinsics[key[1]].cy,
            )
            for key in keys
        ]
    ).reshape(-1, 4)

    flat = [o for t in ordered for o in t.observations]
    n_flat = len(flat)
    counts = np.fromiter((len(t.observations) for t in ordered), dtype=np.intp, count=len(ordered))
    vidx = np.fromiter(
        (view_index.get((o[0], o[1]), -1) for o in flat), dtype=np.intp, count=n_flat
    )
    us = np.fromiter((o[2] for o in flat), dtype=np.float64, count=n_flat)
    vs = np.fromiter((o[3] for o in flat), dtype=np.float64, count=n_flat)
    missing = vidx < 0
    if missing.any():
        point_rep = np.repeat(np.arange(len(counts), dtype=np.intp), counts)
        counts = counts - np.bincount(point_rep[missing], minlength=len(counts))
        vidx, us, vs = vidx[~missing], us[~missing], vs[~missing]
    seg = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp)
    return _ObsArrays(
        rot_wc=rot_tab[vidx],
        centers=cen_tab[vidx],
        fx=k_tab[vidx, 0],
        fy=k_tab[vidx, 1],
        cx=k_tab[vidx, 2],
        cy=k_tab[vidx, 3],
        uv=np.stack([us, vs], axis=1) if n_flat else np.empty((0, 2)),
        point_index=np.repeat(np.arange(len(counts), dtype=np.intp), counts),
        seg_starts=seg,
        track_ids=list(track_ids),
    )


def _residuals(P: np.ndarray, obs: _ObsArrays, with_jacobian: bool):
    """Residuals r = measured - projected and optionally J = dr/dP.

    Observations with non-positive depth get residual 0 and weight 0, so
    they drop out of the normal equations. Row-split form: returns
    (r0, r1, valid[, J0, J1]) with one (n_obs,) or (n_obs, 3) array per
    pixel-coordinate row, avoiding small-matrix batching overhead.
    """
    rel = P[obs.point_index] - obs.centers
    pc = np.matmul(obs.rot_wc, rel[..., None])[..., 0]
    z = pc[:, 2]
    valid = z > _MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    fx_z = obs.fx / zs
    fy_z = obs.fy / zs
    r0 = obs.uv[:, 0] - (fx_z * pc[:, 0] + obs.cx)
    r1 = obs.uv[:, 1] - (fy_z * pc[:, 1] + obs.cy)
    r0[~valid] = 0.0
    r1[~valid] = 0.0
    if not with_jacobian:
        return r0, r1, valid, None, None
    # J = -dproj @ rot, written per residual row
    J0 = (fx_z * pc[:, 0] / zs)[:, None] * obs.rot_wc[:, 2, :] - fx_z[:, None] * obs.rot_wc[:, 0, :]
    J1 = (fy_z * pc[:, 1] / zs)[:, None] * obs.rot_wc[:, 2, :] - fy_z[:, None] * obs.rot_wc[:, 1, :]
    J0[~valid] = 0.0
    J1[~valid] = 0.0
    return r0, r1, valid, J0, J1


def _robust_weights(r0: np.ndarray, r1: np.ndarray, valid: np.ndarray, huber_delta: float | None):
    """Per-observation (weight, cost) for plain L2 or Huber loss."""
    s2 = r0 * r0 + r1 * r1
    if huber_delta is None:
        w = valid.astype(np.float64)
        cost = 0.5 * s2 * w
    else:
        s = np.sqrt(s2)
        small = s <= huber_delta
        w = np.where(small, 1.0, huber_delta / np.maximum(s, 1e-300))
        w = np.where(valid, w, 0.0)
        cost = np.where(small, 0.5 * s2, huber_delta * (s - 0.5 * huber_delta))
        cost = np.where(valid, cost, 0.0)
    return w, cost


def _segment_sum(values: np.ndarray, seg_starts: np.ndarray) -> np.ndarray:
    return np.add.reduceat(values, seg_starts, axis=0)


def _subset_obs(obs: _ObsArrays, keep_points: np.ndarray, counts: np.ndarray) -> _ObsArrays:
    """Restrict observation arrays to a subset of point indices."""
    starts = obs.seg_starts[keep_points]
    cnts = counts[keep_points]
    sel = np.concatenate(
        [np.repeat(starts, cnts) + _ranges(cnts)]
    ) if len(cnts) else np.empty(0, dtype=np.intp)
    return _ObsArrays(
        rot_wc=obs.rot_wc[sel],
        centers=obs.centers[sel],
        fx=obs.fx[sel],
        fy=obs.fy[sel],
        cx=obs.cx[sel],
        cy=obs.cy[sel],
        uv=obs.uv[sel],
        point_index=np.repeat(np.arange(len(keep_points), dtype=np.intp), cnts),
        seg_starts=np.concatenate([[0], np.cumsum(cnts)[:-1]]).astype(np.intp),
    )


def _ranges(counts: np.ndarray) -> np.ndarray:
    """[0..c0-1, 0..c1-1, ...] for per-segment offsets."""
    total = int(counts.sum())
    out = np.arange(total, dtype=np.intp)
    out -= np.repeat(np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.intp), counts)
    return out


def _refine_batch(P0: np.ndarray, obs: _ObsArrays, cfg: LMConfig):
    n = len(P0)
    P = P0.copy()
    lam = np.full(n, cfg.initial_damping)
    dropped = 0
    counts = np.diff(np.append(obs.seg_starts, len(obs.uv)))

    cost = np.zeros(n)
    history: list[float] = []
    active = np.ones(n, dtype=bool)
    it = 0
    while it < cfg.max_iterations and active.any():
        it += 1
        # work only on still-active points
        act = np.flatnonzero(active)
        sub = _subset_obs(obs, act, counts) if len(act) < n else obs
        P_act = P[act]
        lam_act = lam[act]

        r0, r1, valid, J0, J1 = _residuals(P_act, sub, with_jacobian=True)
        w, c = _robust_weights(r0, r1, valid, cfg.huber_delta)
        cost_act = _segment_sum(c, sub.seg_starts)
        if it == 1:
            dropped += int(np.count_nonzero(~valid))
            cost = cost_act.copy()
            history.append(float(cost.sum()))
        if cfg.huber_delta is None and valid.all():
            wJ0, wJ1 = J0, J1
        else:
            wJ0 = w[:, None] * J0
            wJ1 = w[:, None] * J1
        # packed accumulation: upper-triangle of J^T J (6) plus J^T r (3)
        packed = np.empty((len(r0), 9))
        for col, (a, b) in enumerate(((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))):
            packed[:, col] = wJ0[:, a] * J0[:, b] + wJ1[:, a] * J1[:, b]
        packed[:, 6] = wJ0[:, 0] * r0 + wJ1[:, 0] * r1
        packed[:, 7] = wJ0[:, 1] * r0 + wJ1[:, 1] * r1
        packed[:, 8] = wJ0[:, 2] * r0 + wJ1[:, 2] * r1
        sums = _segment_sum(packed, sub.seg_starts)
        A = sums[:, (0, 1, 2, 1, 3, 4, 2, 4, 5)].reshape(-1, 3, 3)
        g = sums[:, 6:9]
        diag_view = np.einsum("pii->pi", A)
        diag_view += lam_act[:, None] * np.clip(diag_view, 1e-12, None)
        try:
            delta = np.linalg.solve(A, -g[..., None])[..., 0]
        except np.linalg.LinAlgError:
            A = A + 1e-9 * np.eye(3)
            delta = np.linalg.solve(A, -g[..., None])[..., 0]
        trial = P_act + delta

        t0, t1, valid_t, _, _ = _residuals(trial, sub, with_jacobian=False)
        dropped += int(np.count_nonzero(~valid_t))
        _, c_t = _robust_weights(t0, t1, valid_t, cfg.huber_delta)
        tcost = _segment_sum(c_t, sub.seg_starts)

        accept = tcost <= cost_act
        rel = (cost_act - tcost) / np.maximum(cost_act, 1e-300)
        P[act[accept]] = trial[accept]
        lam[act[accept]] = np.maximum(lam_act[accept] * cfg.damping_down, 1e-12)
        lam[act[~accept]] = lam_act[~accept] * cfg.damping_up
        cost[act[accept]] = tcost[accept]
        history.append(float(cost.sum()))

        done = (accept & (rel < cfg.cost_tolerance)) | (~accept & (lam[act] > _MAX_DAMPING))
        active[act[done]] = False
    if not history:
        r0, r1, valid, _, _ = _residuals(P, obs, with_jacobian=False)
        _, c = _robust_weights(r0, r1, valid, cfg.huber_delta)
        history = [float(_segment_sum(c, obs.seg_starts).sum())]
    return P, history, dropped, it


def refine_points_lm(
    points: dict[int, np.ndarray],
    tracks: list[KeypointTrack],
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
    cfg: LMConfig = LMConfig(),
) -> RefineResult:
    """Levenberg-Marquardt refinement of point positions with poses fixed.

    Each point is an independent 3-parameter problem with its own damping
    and acceptance state; accepted steps never increase that point's cost,
    so the summed cost history is non-increasing. Observations that fall
    behind a camera during iteration are dropped from the residual set and
    counted in ``dropped_residuals``.
    """
    refined = {tid: np.asarray(p, dtype=np.float64) for tid, p in points.items()}
    with_obs = {t.track_id for t in tracks if t.observations}
    track_ids = sorted(tid for tid in points if tid in with_obs)
    if not track_ids:
        return RefineResult(refined, 0.0, 0.0, [0.0], 0, 0)
    obs_all = _build_obs_arrays(tracks, poses, intrinsics, track_ids)
    counts = np.diff(np.append(obs_all.seg_starts, len(obs_all.uv)))
    if (counts == 0).any():
        track_ids = [tid for tid, c in zip(track_ids, counts) if c > 0]
        if not track_ids:
            return RefineResult(refined, 0.0, 0.0, [0.0], 0, 0)
        obs_all = _build_obs_arrays(tracks, poses, intrinsics, track_ids)
    P0 = np.array([np.asarray(points[tid], dtype=np.float64) for tid in track_ids])

    P, history, dropped, iters = _refine_prepared(P0, obs_all, cfg)
    refined.update({tid: P[i] for i, tid in enumerate(track_ids)})
    return RefineResult(refined, history[0], history[-1], history, dropped, iters)


def _refine_prepared(P0: np.ndarray, obs_all: _ObsArrays, cfg: LMConfig):
    """Chunked solve over prebuilt observation arrays."""
    counts_all = np.diff(np.append(obs_all.seg_starts, len(obs_all.uv)))
    n = len(P0)
    n_workers = min(worker_count(), n)
    if n_workers <= 1 or n < 2 * n_workers:
        return _refine_batch(P0, obs_all, cfg)
    chunks = np.array_split(np.arange(n, dtype=np.intp), n_workers)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        futs = [
            pool.submit(_refine_batch, P0[idx], _subset_obs(obs_all, idx, counts_all), cfg)
            for idx in chunks
        ]
        results = [f.result() for f in futs]
    P = np.concatenate([res[0] for res in results])
    depth = max(len(res[1]) for res in results)
    padded = [res[1] + [res[1][-1]] * (depth - len(res[1])) for res in results]
    history = [float(sum(col)) for col in zip(*padded)]
    dropped = sum(res[2] for res in results)
    iters = max(res[3] for res in results)
    return P, history, dropped, iters


def reprojection_residual_and_jacobian(
    point: np.ndarray,
    pose: Pose,
    intrinsics: PinholeIntrinsics,
    observed_uv: tuple[float, float],
) -> tuple[np.ndarray, np.ndarray]:
    """Single-observation residual (2,) and its Jacobian (2, 3) w.r.t. the point."""
    obs = _ObsArrays(
        rot_wc=pose.rotation_matrix().T[None],
        centers=pose.translation[None],
        fx=np.array([intrinsics.fx]),
        fy=np.array([intrinsics.fy]),
        cx=np.array([intrinsics.cx]),
        cy=np.array([intrinsics.cy]),
        uv=np.array([observed_uv], dtype=np.float64),
        point_index=np.zeros(1, dtype=np.intp),
        seg_starts=np.zeros(1, dtype=np.intp),
    )
    r0, r1, valid, J0, J1 = _residuals(
        np.asarray(point, dtype=np.float64)[None], obs, with_jacobian=True
    )
    if not valid[0]:
        raise DegenerateGeometry("point behind camera; residual undefined")
    return np.array([r0[0], r1[0]]), np.stack([J0[0], J1[0]])


def track_reprojection_errors(
    track: KeypointTrack,
    position: np.ndarray,
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
) -> np.ndarray:
    """Pixel error per observation; +inf where the point is behind the camera."""
    obs = _build_obs_arrays([track], poses, intrinsics, [track.track_id])
    r0, r1, valid, _, _ = _residuals(np.asarray(position, dtype=np.float64)[None], obs, False)
    err = np.sqrt(r0 * r0 + r1 * r1)
    err[~valid] = np.inf
    return err


def _dlt_rows(obs: _ObsArrays) -> np.ndarray:
    """Homogeneous DLT rows in normalized image coordinates, (n_obs, 2, 4)."""
    xn = (obs.uv[:, 0] - obs.cx) / obs.fx
    yn = (obs.uv[:, 1] - obs.cy) / obs.fy
    # world-to-camera affine map: Xc = M p + d
    M = obs.rot_wc
    d = -np.einsum("oij,oj->oi", obs.rot_wc, obs.centers)
    rows = np.empty((len(xn), 2, 4))
    rows[:, 0, :3] = xn[:, None] * M[:, 2, :] - M[:, 0, :]
    rows[:, 0, 3] = xn * d[:, 2] - d[:, 0]
    rows[:, 1, :3] = yn[:, None] * M[:, 2, :] - M[:, 1, :]
    rows[:, 1, 3] = yn * d[:, 2] - d[:, 1]
    return rows


def _solve_dlt_group(
    rows: np.ndarray, centers: np.ndarray, rot_wc: np.ndarray
) -> tuple[np.ndarray, list[str | None]]:
    """Solve a stack of same-size DLT systems.

    rows (k, 2m, 4), centers (k, m, 3), rot_wc (k, m, 3, 3). Returns points
    (k, 3) and a per-system failure message (None on success).
    """
    k, m = centers.shape[:2]
    fails: list[str | None] = [None] * k
    # coordinate span bounds the true max pairwise distance within sqrt(3)
    span = (centers.max(axis=1) - centers.min(axis=1)).max(axis=1)
    max_baseline = span.copy()
    for i in np.flatnonzero(span < 2 * _MIN_BASELINE):
        d = np.linalg.norm(centers[i][:, None, :] - centers[i][None, :, :], axis=-1)
        max_baseline[i] = d.max()
    # normal-equation eigendecomposition solves the bulk cheaply; systems
    # anywhere near rank deficiency are re-solved with an exact SVD, whose
    # singular-value ratios the degeneracy thresholds are defined on
    evals, evecs = np.linalg.eigh(np.matmul(rows.transpose(0, 2, 1), rows))
    s = np.sqrt(np.clip(evals[:, ::-1], 0.0, None))
    X = evecs[:, :, 0]
    for i in np.flatnonzero(s[:, 2] < 1e-7 * np.maximum(s[:, 0], 1e-300)):
        _, s_i, vt_i = np.linalg.svd(rows[i])
        s[i] = s_i
        X[i] = vt_i[-1]
    w = X[:, 3]
    xyz_norm = np.linalg.norm(X[:, :3], axis=1)
    safe_w = np.where(np.abs(w) < 1e-300, 1.0, w)
    p = X[:, :3] / safe_w[:, None]
    depths = np.einsum("kmj,kmj->km", rot_wc[:, :, 2, :], p[:, None, :] - centers)
    bad_base = max_baseline < _MIN_BASELINE
    bad_rank = s[:, 2] < 1e-10 * np.maximum(s[:, 0], 1e-300)
    bad_w = np.abs(w) < 1e-12 * xyz_norm
    bad_depth = ~np.any(depths > 0, axis=1)
    for i in np.flatnonzero(bad_base | bad_rank | bad_w | bad_depth):
        if bad_base[i]:
            fails[i] = f"camera baseline {max_baseline[i]:.2e} below {_MIN_BASELINE} m"
        elif bad_rank[i]:
            fails[i] = "rank-deficient triangulation system (parallel rays)"
        elif bad_w[i]:
            fails[i] = "triangulated point at infinity"
        else:
            fails[i] = "triangulated point behind every observing camera"
    return p, fails


def triangulate_dlt(
    track: KeypointTrack,
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
) -> np.ndarray:
    """Direct linear transform over all of a track's observations."""
    if track.distinct_views() < 2:
        raise InsufficientObservations(
            f"track {track.track_id} has {track.distinct_views()} distinct views, need 2"
        )
    obs = _build_obs_arrays([track], poses, intrinsics, [track.track_id])
    m = len(obs.uv)
    if m < 2:
        raise InsufficientObservations(
            f"track {track.track_id}: only {m} observations have known poses"
        )
    rows = _dlt_rows(obs).reshape(1, 2 * m, 4)
    p, fails = _solve_dlt_group(rows, obs.centers[None], obs.rot_wc[None])
    if fails[0] is not None:
        raise DegenerateGeometry(fails[0])
    return p[0]


def _split_eligible(tracks: list[KeypointTrack]):
    failures: dict[int, str] = {}
    eligible: list[KeypointTrack] = []
    for track in sorted(tracks, key=lambda t: t.track_id):
        if track.distinct_views() < 2:
            failures[track.track_id] = (
                f"track {track.track_id} has {track.distinct_views()} distinct views, need 2"
            )
        else:
            eligible.append(track)
    return eligible, failures


def _triangulate_prepared(obs: _ObsArrays, eligible: list[KeypointTrack]):
    positions: dict[int, np.ndarray] = {}
    failures: dict[int, str] = {}
    counts = np.diff(np.append(obs.seg_starts, len(obs.uv)))
    rows_all = _dlt_rows(obs)
    by_count: dict[int, list[int]] = {}
    for i, c in enumerate(counts):
        by_count.setdefault(int(c), []).append(i)
    for m, idxs in sorted(by_count.items()):
        if m < 2:
            for i in idxs:
                failures[eligible[i].track_id] = (
                    f"track {eligible[i].track_id}: only {m} observations have known poses"
                )
            continue
        starts = obs.seg_starts[np.asarray(idxs, dtype=np.intp)]
        sel = (starts[:, None] + np.arange(m)[None, :]).ravel()
        rows = rows_all[sel].reshape(len(idxs), 2 * m, 4)
        centers = obs.centers[sel].reshape(len(idxs), m, 3)
        rots = obs.rot_wc[sel].reshape(len(idxs), m, 3, 3)
        pts, fails = _solve_dlt_group(rows, centers, rots)
        for j, i in enumerate(idxs):
            tid = eligible[i].track_id
            if fails[j] is None:
                positions[tid] = pts[j]
            else:
                failures[tid] = fails[j]
    return positions, failures


def triangulate_tracks(
    tracks: list[KeypointTrack],
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
) -> tuple[dict[int, np.ndarray], dict[int, str]]:
    """Triangulate every track; failures are reported, not raised.

    Tracks with the same observation count are solved as one batched SVD.
    """
    eligible, failures = _split_eligible(tracks)
    if not eligible:
        return {}, failures
    obs = _build_obs_arrays(eligible, poses, intrinsics, [t.track_id for t in eligible])
    positions, more = _triangulate_prepared(obs, eligible)
    failures.update(more)
    return positions, failures


def reconstruct_tracks(
    tracks: list[KeypointTrack],
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
    cfg: LMConfig = LMConfig(),
) -> tuple[dict[int, np.ndarray], RefineResult, dict[int, str]]:
    """Triangulate then refine in one pass over shared observation arrays.

    Returns (initial DLT positions, refinement result, failure messages).
    """
    eligible, failures = _split_eligible(tracks)
    if not eligible:
        return {}, RefineResult({}, 0.0, 0.0, [0.0], 0, 0), failures
    obs = _build_obs_arrays(eligible, poses, intrinsics, [t.track_id for t in eligible])
    positions, more = _triangulate_prepared(obs, eligible)
    failures.update(more)
    if not positions:
        return {}, RefineResult({}, 0.0, 0.0, [0.0], 0, 0), failures

    track_ids = sorted(positions)
    if len(track_ids) != len(eligible):
        keep = [t for t in eligible if t.track_id in positions]
        obs = _build_obs_arrays(keep, poses, intrinsics, track_ids)
    P0 = np.array([positions[tid] for tid in track_ids])
    P, history, dropped, iters = _refine_prepared(P0, obs, cfg)
    refined = {tid: P[i] for i, tid in enumerate(track_ids)}
    result = RefineResult(refined, history[0], history[-1], history, dropped, iters)
    return positions, result, failures


def reject_outliers(
    tracks: list[KeypointTrack],
    points: dict[int, np.ndarray],
    poses: dict[tuple[int, str], Pose],
    intrinsics: dict[str, PinholeIntrinsics],
    reproj_threshold_px: float,
) -> tuple[list[KeypointTrack], int]:
    """Drop observations with reprojection error above the threshold.

    Tracks left with fewer than 2 observations are removed entirely.
    A +inf threshold is the identity.
    """
    kept_tracks: list[KeypointTrack] = []
    removed = 0
    for track in tracks:
        if track.track_id not in points:
            kept_tracks.append(track)
            continue
        err = track_reprojection_errors(track, points[track.track_id], poses, intrinsics)
        keep = ~(err > reproj_threshold_px)
        removed += int(np.count_nonzero(~keep))
        if keep.all():
            kept_tracks.append(track)
            continue
        obs = tuple(o for o, k in zip(track.observations, keep) if k)
        if len({(f, c) for f, c, _, _ in obs}) >= 2:
            kept_tracks.append(KeypointTrack(track.track_id, obs))
    return kept_tracks, removed


def mean_ego_speed(poses: list[Pose], frame_rate: float) -> float:
    """Mean camera-center speed over consecutive frames, per camera."""
    by_cam: dict[str, list[Pose]] = {}
    for p in poses:
        by_cam.setdefault(p.camera_id, []).append(p)
    speeds = []
    for cam_poses in by_cam.values():
        cam_poses.sort(key=lambda p: p.frame_index)
        for a, b in zip(cam_poses, cam_poses[1:]):
            df = b.frame_index - a.frame_index
            if df <= 0:
                continue
            dist = float(np.linalg.norm(b.translation - a.translation))
            speeds.append(dist * frame_rate / df)
    if not speeds:
        raise ValueError("ego speed needs poses from at least 2 frames")
    return float(np.mean(speeds))


def ego_speed_gate(poses: list[Pose], frame_rate: float, min_speed: float) -> bool:
    """Keep a sequence only when the mean ego speed reaches min_speed."""
    return mean_ego_speed(poses, frame_rate) >= min_speed

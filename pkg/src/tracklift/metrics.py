"""Tracking evaluation: CLEAR metrics, IDF1, and depth accuracy.

Ground truth and hypotheses are per-frame lists of identity-carrying
boxes. CLEAR matching carries the last known gt-to-hypothesis
correspondence forward when it is still valid, then matches the rest by
maximum IoU; identity switches are counted against the last known
correspondence. IDF1 assigns identities globally with a min-cost
bipartite solve over whole-sequence overlap counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox2D
from .tracker import iou

FrameBoxes = dict[int, list[BBox2D]]

_INF = 1e18


class DuplicateID(Exception):
    """An identity appears twice in one frame."""


class EmptyAfterFilter(Exception):
    """No depth pairs remain after the max-depth cutoff."""


@dataclass
class EvalReport:
    mota: float = 0.0
    idf1: float = 0.0
    idp: float = 0.0
    idr: float = 0.0
    fp: int = 0
    fn: int = 0
    idsw: int = 0
    mt: int = 0
    ml: int = 0
    num_gt: int = 0
    idtp: int = 0
    idfp: int = 0
    idfn: int = 0
    abs_rel: float | None = None
    sq_rel: float | None = None
    rmse: float | None = None
    rmse_log: float | None = None
    delta1: float | None = None
    delta2: float | None = None
    delta3: float | None = None
    n_depth_pairs: int = 0


def _check_unique(boxes: FrameBoxes, name: str):
    for frame, frame_boxes in boxes.items():
        ids = [b.object_id for b in frame_boxes]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DuplicateID(f"{name} frame {frame}: repeated ids {dupes}")


def _frames(gt: FrameBoxes, hyp: FrameBoxes) -> list[int]:
    return sorted(set(gt) | set(hyp))


@dataclass
class ClearDetail:
    report: EvalReport
    matches_per_frame: dict[int, list[tuple[int, int]]] = field(default_factory=dict)


def clear_mot_detail(gt: FrameBoxes, hyp: FrameBoxes, iou_threshold: float = 0.5) -> ClearDetail:
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    _check_unique(gt, "ground truth")
    _check_unique(hyp, "hypothesis")

    fp = fn = idsw = num_gt = 0
    last_match: dict[int, int] = {}  # gt id -> last hypothesis id it matched
    gt_frames: dict[int, int] = {}
    gt_matched_frames: dict[int, int] = {}
    detail = ClearDetail(EvalReport())

    for frame in _frames(gt, hyp):
        gt_boxes = sorted(gt.get(frame, []), key=lambda b: b.object_id)
        hyp_boxes = sorted(hyp.get(frame, []), key=lambda b: b.object_id)
        num_gt += len(gt_boxes)
        for b in gt_boxes:
            gt_frames[b.object_id] = gt_frames.get(b.object_id, 0) + 1

        gt_ids = [b.object_id for b in gt_boxes]
        hyp_ids = [b.object_id for b in hyp_boxes]
        gt_by_id = {b.object_id: b for b in gt_boxes}
        hyp_by_id = {b.object_id: b for b in hyp_boxes}

        matches: list[tuple[int, int]] = []
        used_gt: set[int] = set()
        used_hyp: set[int] = set()
        # keep still-valid correspondences before re-solving
        for g in gt_ids:
            h = last_match.get(g)
            if h is None or h not in hyp_by_id or h in used_hyp:
                continue
            if iou(gt_by_id[g], hyp_by_id[h]) >= iou_threshold:
                matches.append((g, h))
                used_gt.add(g)
                used_hyp.add(h)

        free_gt = [g for g in gt_ids if g not in used_gt]
        free_hyp = [h for h in hyp_ids if h not in used_hyp]
        if free_gt and free_hyp:
            cost = np.full((len(free_gt), len(free_hyp)), _INF)
            for i, g in enumerate(free_gt):
                for j, h in enumerate(free_hyp):
                    v = iou(gt_by_id[g], hyp_by_id[h])
                    if v >= iou_threshold:
                        cost[i, j] = 1.0 - v
            rows, cols = linear_sum_assignment(cost)
            for i, j in zip(rows, cols):
                if cost[i, j] < _INF:
                    matches.append((free_gt[i], free_hyp[j]))
                    used_gt.add(free_gt[i])
                    used_hyp.add(free_hyp[j])

        for g, h in matches:
            prev = last_match.get(g)
            if prev is not None and prev != h:
                idsw += 1
            last_match[g] = h
            gt_matched_frames[g] = gt_matched_frames.get(g, 0) + 1

        fn += len(gt_ids) - len(matches)
        fp += len(hyp_ids) - len(matches)
        detail.matches_per_frame[frame] = sorted(matches)

    mt = ml = 0
    for g, total in gt_frames.items():
        ratio = gt_matched_frames.get(g, 0) / total
        if ratio >= 0.8:
            mt += 1
        elif ratio <= 0.2:
            ml += 1

    mota = 1.0 - (fn + fp + idsw) / num_gt if num_gt else 1.0
    detail.report = EvalReport(
        mota=mota, fp=fp, fn=fn, idsw=idsw, mt=mt, ml=ml, num_gt=num_gt
    )
    return detail


def clear_mot(gt: FrameBoxes, hyp: FrameBoxes, iou_threshold: float = 0.5) -> EvalReport:
    """CLEAR metrics: per-frame matching with hysteresis, FP/FN/IDSW counts."""
    return clear_mot_detail(gt, hyp, iou_threshold).report


def _overlap_counts(gt: FrameBoxes, hyp: FrameBoxes, iou_threshold: float):
    gt_ids = sorted({b.object_id for boxes in gt.values() for b in boxes})
    hyp_ids = sorted({b.object_id for boxes in hyp.values() for b in boxes})
    gt_len = {g: 0 for g in gt_ids}
    hyp_len = {h: 0 for h in hyp_ids}
    overlap = np.zeros((len(gt_ids), len(hyp_ids)))
    g_index = {g: i for i, g in enumerate(gt_ids)}
    h_index = {h: j for j, h in enumerate(hyp_ids)}
    for frame in _frames(gt, hyp):
        for b in gt.get(frame, []):
            gt_len[b.object_id] += 1
        for b in hyp.get(frame, []):
            hyp_len[b.object_id] += 1
        for bg in gt.get(frame, []):
            for bh in hyp.get(frame, []):
                if iou(bg, bh) >= iou_threshold:
                    overlap[g_index[bg.object_id], h_index[bh.object_id]] += 1
    return gt_ids, hyp_ids, gt_len, hyp_len, overlap


def idf1(gt: FrameBoxes, hyp: FrameBoxes, iou_threshold: float = 0.5) -> EvalReport:
    """Identity metrics from a global min-cost identity assignment."""
    _check_unique(gt, "ground truth")
    _check_unique(hyp, "hypothesis")
    gt_ids, hyp_ids, gt_len, hyp_len, overlap = _overlap_counts(gt, hyp, iou_threshold)
    nG, nH = len(gt_ids), len(hyp_ids)
    size = nG + nH
    total_gt = sum(gt_len.values())
    total_hyp = sum(hyp_len.values())
    if size == 0:
        return EvalReport(idf1=1.0, idp=1.0, idr=1.0)

    cost = np.full((size, size), _INF)
    for i, g in enumerate(gt_ids):
        for j, h in enumerate(hyp_ids):
            cost[i, j] = gt_len[g] + hyp_len[h] - 2.0 * overlap[i, j]
        cost[i, nH + i] = gt_len[g]
    for j, h in enumerate(hyp_ids):
        cost[nG + j, j] = hyp_len[h]
    cost[nG:, nH:] = 0.0

    rows, cols = linear_sum_assignment(cost)
    idtp = 0
    for i, j in zip(rows, cols):
        if i < nG and j < nH:
            idtp += int(overlap[i, j])
    idfn = total_gt - idtp
    idfp = total_hyp - idtp
    idp = idtp / (idtp + idfp) if (idtp + idfp) else 1.0
    idr = idtp / (idtp + idfn) if (idtp + idfn) else 1.0
    f1 = 2.0 * idtp / (2.0 * idtp + idfp + idfn) if (2 * idtp + idfp + idfn) else 1.0
    return EvalReport(idf1=f1, idp=idp, idr=idr, idtp=idtp, idfp=idfp, idfn=idfn)


def depth_metrics(
    pairs: list[tuple[float, float]], max_depth: float = 75.0
) -> EvalReport:
    """Depth accuracy of (predicted, true) pairs, ignoring gt beyond max_depth."""
    kept = [(d, d_true) for d, d_true in pairs if d_true <= max_depth]
    if not kept:
        raise EmptyAfterFilter(f"no depth pairs with ground truth <= {max_depth} m")
    d = np.array([p[0] for p in kept], dtype=np.float64)
    g = np.array([p[1] for p in kept], dtype=np.float64)
    if np.any(d <= 0) or np.any(g <= 0):
        raise ValueError("depths must be positive")
    ratio = np.maximum(d / g, g / d)
    return EvalReport(
        abs_rel=float(np.mean(np.abs(d - g) / g)),
        sq_rel=float(np.mean((d - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((d - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(d) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_depth_pairs=len(kept),
    )


def evaluate(
    gt: FrameBoxes,
    hyp: FrameBoxes,
    iou_threshold: float = 0.5,
    depth_pairs: list[tuple[float, float]] | None = None,
    max_depth: float = 75.0,
) -> EvalReport:
    """CLEAR + identity metrics in one report, with optional depth fields."""
    report = clear_mot(gt, hyp, iou_threshold)
    ids = idf1(gt, hyp, iou_threshold)
    report.idf1, report.idp, report.idr = ids.idf1, ids.idp, ids.idr
    report.idtp, report.idfp, report.idfn = ids.idtp, ids.idfp, ids.idfn
    if depth_pairs:
        depth = depth_metrics(depth_pairs, max_depth)
        for name in ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3"):
            setattr(report, name, getattr(depth, name))
        report.n_depth_pairs = depth.n_depth_pairs
    return report

"""Evaluation: CLEAR-MOT tracking metrics (MOTA, MOTP, MT, ML, IDSW, FRAG)
and monocular depth statistics (Abs Rel, Sq Rel, RMSE, RMSE log, delta
accuracies), with region- and range-restricted depth evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .codec import object_depth
from .errors import ValidationError
from .geometry import SparseDepthMap

INFEASIBLE = 1e9


@dataclass(frozen=True)
class TrackedBox:
    """One (frame, identity, class, box) observation used by the MOT metrics."""

    frame: int
    track_id: int
    class_id: int
    box: np.ndarray  # (x1, y1, x2, y2)


@dataclass
class MotReport:
    """CLEAR-MOT bundle; MOTP is mean IoU over matches (higher is better)."""

    mota: float
    motp: float
    mt: float
    ml: float
    idsw: int
    frag: int
    fp: int
    fn: int
    gt: int
    matches: int
    gt_trajectories: int = 0

    def __post_init__(self):
        if self.mota > 1.0 + 1e-12:
            raise ValidationError(f"MOTA cannot exceed 1, got {self.mota}")
        if not -1e-12 <= self.motp <= 1.0 + 1e-12:
            raise ValidationError(f"MOTP must be in [0, 1], got {self.motp}")
        if self.mt + self.ml > 1.0 + 1e-12:
            raise ValidationError("MT + ML cannot exceed 1")

    def to_dict(self) -> dict:
        return {
            "MOTA": self.mota, "MOTP": self.motp, "MT": self.mt, "ML": self.ml,
            "IDSW": self.idsw, "FRAG": self.frag, "FP": self.fp, "FN": self.fn,
            "GT": self.gt, "matches": self.matches, "gt_trajectories": self.gt_trajectories,
        }


@dataclass
class DepthReport:
    """Depth error/accuracy statistics over one evaluation region.

    All metric fields are None when the region holds no valid pixel.
    """

    abs_rel: float | None
    sq_rel: float | None
    rmse: float | None
    rmse_log: float | None
    delta1: float | None
    delta2: float | None
    delta3: float | None
    pixel_count: int
    region_label: str = "whole_image"

    def __post_init__(self):
        if self.pixel_count > 0 and not (self.delta1 <= self.delta2 <= self.delta3 + 1e-12):
            raise ValidationError("delta accuracies must be nondecreasing")

    def to_dict(self) -> dict:
        return {
            "region": self.region_label, "abs_rel": self.abs_rel, "sq_rel": self.sq_rel,
            "rmse": self.rmse, "rmse_log": self.rmse_log, "delta1": self.delta1,
            "delta2": self.delta2, "delta3": self.delta3, "pixel_count": self.pixel_count,
        }


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (N, 4) / (M, 4) corner-box arrays -> (N, M)."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def match_frame(
    gt_boxes,
    pred_boxes,
    iou_threshold: float = 0.5,
    sticky_pairs=None,
) -> tuple[list[tuple[int, int, float]], int, int]:
    """Match one frame's boxes; returns (matches, FP, FN).

    Matches maximize total IoU over pairs at or above the threshold via
    optimal assignment, after first honoring `sticky_pairs` (gt, pred index
    pairs matched last frame) that are still above the threshold, per the
    CLEAR-MOT convention. Each match is (gt index, pred index, IoU).
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValidationError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    if gt.shape[0] == 0 or pred.shape[0] == 0:
        return [], pred.shape[0], gt.shape[0]
    return _match_with_matrix(iou_matrix(gt, pred), iou_threshold, sticky_pairs or ())


def compute_mot(
    gt_tracks: list[TrackedBox],
    pred_tracks: list[TrackedBox],
    iou_threshold: float = 0.5,
) -> MotReport:
    """Score predicted tracks against ground truth over a shared frame space.

    Matching is class-constrained and sticky frame to frame. An identity
    switch is counted when a ground-truth trajectory's matched prediction id
    changes between its consecutive matched frames; a fragmentation at every
    matched -> unmatched -> matched transition.
    """
    frames = sorted({b.frame for b in gt_tracks} | {b.frame for b in pred_tracks})
    gt_by_frame: dict[int, list[TrackedBox]] = {}
    for b in gt_tracks:
        gt_by_frame.setdefault(b.frame, []).append(b)
    pred_by_frame: dict[int, list[TrackedBox]] = {}
    for b in pred_tracks:
        pred_by_frame.setdefault(b.frame, []).append(b)

    for frame, boxes in gt_by_frame.items():
        ids = [b.track_id for b in boxes]
        if len(ids) != len(set(ids)):
            raise ValidationError(f"duplicate ground-truth track ids in frame {frame}")

    fp = fn = idsw = matches_total = gt_total = 0
    iou_sum = 0.0
    last_pred_of_gt: dict[int, int] = {}    # gt id -> pred id at its last matched frame
    prev_frame_pairs: dict[int, int] = {}   # gt id -> pred id matched in previous frame
    matched_flags: dict[int, list[bool]] = {}

    for frame in frames:
        gts = gt_by_frame.get(frame, [])
        preds = pred_by_frame.get(frame, [])
        gt_total += len(gts)

        ious = iou_matrix([g.box for g in gts], [p.box for p in preds]) \
            if gts and preds else np.zeros((len(gts), len(preds)))
        for gi, g in enumerate(gts):
            for pi, p in enumerate(preds):
                if g.class_id != p.class_id:
                    ious[gi, pi] = 0.0

        sticky = []
        pred_index = {p.track_id: pi for pi, p in enumerate(preds)}
        for gi, g in enumerate(gts):
            want = prev_frame_pairs.get(g.track_id)
            if want is not None and want in pred_index:
                sticky.append((gi, pred_index[want]))

        frame_matches, frame_fp, frame_fn = _match_with_matrix(ious, iou_threshold, sticky)
        fp += frame_fp
        fn += frame_fn
        matches_total += len(frame_matches)

        prev_frame_pairs = {}
        matched_gt = set()
        for gi, pi, iou in frame_matches:
            iou_sum += iou
            g, p = gts[gi], preds[pi]
            matched_gt.add(g.track_id)
            prev_frame_pairs[g.track_id] = p.track_id
            before = last_pred_of_gt.get(g.track_id)
            if before is not None and before != p.track_id:
                idsw += 1
            last_pred_of_gt[g.track_id] = p.track_id
        for g in gts:
            matched_flags.setdefault(g.track_id, []).append(g.track_id in matched_gt)

    frag = 0
    mt = ml = 0
    for flags in matched_flags.values():
        ratio = sum(flags) / len(flags)
        if ratio >= 0.8:
            mt += 1
        if ratio <= 0.2:
            ml += 1
        in_gap = False
        seen_match = False
        for f in flags:
            if f:
                if seen_match and in_gap:
                    frag += 1
                seen_match = True
                in_gap = False
            elif seen_match:
                in_gap = True

    n_traj = len(matched_flags)
    return MotReport(
        mota=1.0 - (fp + fn + idsw) / max(1, gt_total),
        motp=(iou_sum / matches_total) if matches_total else 0.0,
        mt=mt / n_traj if n_traj else 0.0,
        ml=ml / n_traj if n_traj else 0.0,
        idsw=idsw,
        frag=frag,
        fp=fp,
        fn=fn,
        gt=gt_total,
        matches=matches_total,
        gt_trajectories=n_traj,
    )


def _match_with_matrix(ious: np.ndarray, iou_threshold: float, sticky):
    """match_frame on a precomputed (possibly class-masked) IoU matrix."""
    n_gt, n_pred = ious.shape
    if n_gt == 0 or n_pred == 0:
        return [], n_pred, n_gt
    matches = []
    taken_gt: set[int] = set()
    taken_pred: set[int] = set()
    for gi, pi in sticky:
        if gi in taken_gt or pi in taken_pred:
            continue
        if ious[gi, pi] >= iou_threshold:
            matches.append((gi, pi, float(ious[gi, pi])))
            taken_gt.add(gi)
            taken_pred.add(pi)
    free_gt = [i for i in range(n_gt) if i not in taken_gt]
    free_pred = [j for j in range(n_pred) if j not in taken_pred]
    if free_gt and free_pred:
        sub = ious[np.ix_(free_gt, free_pred)]
        cost = np.where(sub >= iou_threshold, -sub, INFEASIBLE)
        rows, cols = linear_sum_assignment(cost)
        for r, c in zip(rows, cols):
            if sub[r, c] >= iou_threshold:
                matches.append((free_gt[r], free_pred[c], float(sub[r, c])))
    return matches, n_pred - len(matches), n_gt - len(matches)


def compute_depth_metrics(
    pred_depth: np.ndarray,
    gt_depth: SparseDepthMap,
    region_mask: np.ndarray | None = None,
    depth_cap: float = 80.0,
    region_label: str = "whole_image",
) -> DepthReport:
    """Depth statistics over cells valid in the ground truth, inside the
    region mask and at most `depth_cap` meters deep."""
    pred = np.asarray(pred_depth, dtype=np.float64)
    if pred.ndim == 3 and pred.shape[-1] == 1:
        pred = pred[..., 0]
    if pred.shape != gt_depth.values.shape:
        raise ValidationError(
            f"prediction shape {pred.shape} does not match ground truth {gt_depth.values.shape}"
        )
    mask = gt_depth.valid & (gt_depth.values <= depth_cap)
    if region_mask is not None:
        mask = mask & region_mask
    return depth_metrics_from_pairs(pred[mask], gt_depth.values[mask], region_label)


def depth_metrics_from_pairs(pred_values: np.ndarray, gt_values: np.ndarray,
                             region_label: str = "whole_image") -> DepthReport:
    """Depth statistics over matched (prediction, ground truth) value pairs."""
    p = np.asarray(pred_values, dtype=np.float64).reshape(-1)
    g = np.asarray(gt_values, dtype=np.float64).reshape(-1)
    if p.shape != g.shape:
        raise ValidationError(f"pair arrays differ in length: {p.shape} vs {g.shape}")
    n = p.size
    if n == 0:
        return DepthReport(None, None, None, None, None, None, None, 0, region_label)
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthReport(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err ** 2 / g)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
        pixel_count=n,
        region_label=region_label,
    )


def region_masks(
    annotations,
    gt_depth: SparseDepthMap,
    ranges: list[tuple[float, float]] = ((0.0, 20.0), (20.0, 50.0), (50.0, 80.0)),
) -> dict[str, np.ndarray]:
    """Build the evaluation masks: whole image, all object boxes, and one
    disjoint mask per depth range.

    A cell shared by several boxes belongs to the nearest object; an object's
    depth is its center-cell ground truth (nearest valid cell in the box as
    fallback). Objects without any return join the box mask but no range.
    """
    los = [lo for lo, _ in ranges]
    his = [hi for _, hi in ranges]
    for i in range(len(ranges)):
        for j in range(i + 1, len(ranges)):
            if max(los[i], los[j]) < min(his[i], his[j]):
                raise ValidationError(f"ranges {ranges[i]} and {ranges[j]} overlap")

    grid = gt_depth.values.shape
    scale = gt_depth.scale
    boxes_mask = np.zeros(grid, dtype=bool)
    owner_depth = np.full(grid, np.inf)

    for ann in annotations:
        c0 = max(0, int(math.floor(ann.x1 / scale)))
        r0 = max(0, int(math.floor(ann.y1 / scale)))
        c1 = min(grid[1] - 1, int(math.floor(ann.x2 / scale)))
        r1 = min(grid[0] - 1, int(math.floor(ann.y2 / scale)))
        if c0 > c1 or r0 > r1:
            continue
        boxes_mask[r0:r1 + 1, c0:c1 + 1] = True
        cu, cv = ann.center
        cell = (int(math.floor(cv / scale)), int(math.floor(cu / scale)))
        depth = object_depth(gt_depth, (ann.x1, ann.y1, ann.x2, ann.y2), cell)
        if depth is not None:
            window = owner_depth[r0:r1 + 1, c0:c1 + 1]
            np.minimum(window, depth, out=window)

    masks = {"whole_image": np.ones(grid, dtype=bool), "object_boxes": boxes_mask}
    for lo, hi in ranges:
        masks[f"objects_{lo:g}m_{hi:g}m"] = (owner_depth >= lo) & (owner_depth < hi)
    return masks


def merge_mot_reports(reports: list[MotReport]) -> MotReport:
    """Count-weighted accumulation of per-sequence MOT reports."""
    if not reports:
        raise ValidationError("no reports to merge")
    fp = sum(r.fp for r in reports)
    fn = sum(r.fn for r in reports)
    idsw = sum(r.idsw for r in reports)
    gt = sum(r.gt for r in reports)
    matches = sum(r.matches for r in reports)
    frag = sum(r.frag for r in reports)
    traj = sum(r.gt_trajectories for r in reports)
    motp = sum(r.motp * r.matches for r in reports) / matches if matches else 0.0
    mt = sum(r.mt * r.gt_trajectories for r in reports) / traj if traj else 0.0
    ml = sum(r.ml * r.gt_trajectories for r in reports) / traj if traj else 0.0
    return MotReport(
        mota=1.0 - (fp + fn + idsw) / max(1, gt),
        motp=motp, mt=mt, ml=ml, idsw=idsw, frag=frag,
        fp=fp, fn=fn, gt=gt, matches=matches, gt_trajectories=traj,
    )

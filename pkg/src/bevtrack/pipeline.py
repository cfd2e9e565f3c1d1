"""Stage logic shared by the CLI: building training samples from a dataset,
running detection + tracking over sequences, and sequence-level evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import codec
from .codec import Detection, decode_detections, encode_targets, render_prior_map
from .errors import DatasetError
from .geometry import SparseDepthMap, render_depth_map
from .kitti import DatasetIndex, Frame, load_frame_pair
from .metrics import (
    DepthReport,
    MotReport,
    TrackedBox,
    compute_mot,
    depth_metrics_from_pairs,
    merge_mot_reports,
    region_masks,
)
from .model import ModelConfig, ToyBackbone, forward
from .tracker import Track, TrackerConfig, TrackerState, step
from .training import TrainSample


def frame_depth(frame: Frame, scale: int) -> SparseDepthMap:
    """Ground-truth depth grid for a frame, rendered from its LiDAR cloud."""
    if frame.cloud is None:
        return SparseDepthMap.empty(
            SparseDepthMap.grid_shape(frame.image_size, scale), scale
        )
    return render_depth_map(frame.cloud, frame.calib, scale)


def _gt_prior_objects(frame: Frame, depth: SparseDepthMap, scale: int) -> list[Detection]:
    """Previous-frame ground truth viewed as unit-confidence detections."""
    objs = []
    for ann in frame.annotations:
        cu, cv = ann.center
        cell = (int(cv // scale), int(cu // scale))
        z = codec.object_depth(depth, (ann.x1, ann.y1, ann.x2, ann.y2), cell)
        objs.append(
            Detection(
                center=np.array([cu, cv]),
                half_extents=np.array([(ann.x2 - ann.x1) / 2, (ann.y2 - ann.y1) / 2]),
                confidence=1.0,
                class_id=ann.class_id,
                depth=z,
            )
        )
    return objs


def build_training_samples(
    dataset: DatasetIndex,
    sequence_ids: list[int],
    model_config: ModelConfig,
) -> list[TrainSample]:
    """Encode every frame of the chosen sequences into a training sample.

    Prior channels are rendered from the previous frame's ground truth, so
    the network trains with the same tracklet conditioning it sees at
    inference time.
    """
    scale = model_config.downscale
    samples = []
    for seq_id in sequence_ids:
        info = dataset.info(seq_id)
        for t in range(info.frame_count):
            frame_t, frame_prev = load_frame_pair(dataset, seq_id, t)
            depth_t = frame_depth(frame_t, scale)
            depth_prev = depth_t if frame_prev is frame_t else frame_depth(frame_prev, scale)
            targets = encode_targets(
                frame_t, frame_prev, depth_t, scale, model_config.num_classes,
                depth_prev=depth_prev,
            )
            prior_heat = prior_depth = None
            if model_config.use_prior_channels:
                prior_objs = [] if frame_prev is frame_t else \
                    _gt_prior_objects(frame_prev, depth_prev, scale)
                prior_heat, prior_depth = render_prior_map(
                    prior_objs, targets.grid_shape, scale
                )
            samples.append(
                TrainSample(
                    image_t=frame_t.image.astype(np.float32),
                    image_prev=frame_prev.image.astype(np.float32),
                    targets=targets,
                    prior_heat=prior_heat,
                    prior_depth=prior_depth,
                )
            )
    return samples


def oracle_detections(frame_t: Frame, frame_prev: Frame, scale: int) -> list[Detection]:
    """Perfect detections from labels: GT boxes, GT depth, true displacement."""
    depth_t = frame_depth(frame_t, scale)
    depth_prev = depth_t if frame_prev is frame_t else frame_depth(frame_prev, scale)
    prev_by_id = {a.track_id: a for a in frame_prev.annotations}
    dets = []
    for ann in frame_t.annotations:
        cu, cv = ann.center
        cell = (int(cv // scale), int(cu // scale))
        z = codec.object_depth(depth_t, (ann.x1, ann.y1, ann.x2, ann.y2), cell)
        disp = np.zeros(3)
        prev = prev_by_id.get(ann.track_id)
        if prev is not None and prev is not ann:
            pu, pv = prev.center
            disp[0] = (pu - cu) / scale
            disp[1] = (pv - cv) / scale
            if z is not None:
                prev_cell = (int(pv // scale), int(pu // scale))
                z_prev = codec.object_depth(
                    depth_prev, (prev.x1, prev.y1, prev.x2, prev.y2), prev_cell
                )
                if z_prev is not None:
                    disp[2] = z_prev - z
        dets.append(
            Detection(
                center=np.array([cu, cv]),
                half_extents=np.array([(ann.x2 - ann.x1) / 2, (ann.y2 - ann.y1) / 2]),
                confidence=1.0,
                class_id=ann.class_id,
                depth=z,
                displacement=disp,
            )
        )
    return dets


@dataclass
class SequenceTrackingResult:
    sequence_id: int
    tracks: list[Track]
    frames_processed: int
    detections_total: int


def track_sequence(
    dataset: DatasetIndex,
    sequence_id: int,
    model: ToyBackbone | None,
    tracker_config: TrackerConfig,
    detection_threshold: float | None = None,
    max_detections: int = 50,
    use_oracle: bool = False,
) -> SequenceTrackingResult:
    """Run detection (network or oracle) + tracking over one sequence."""
    if model is None and not use_oracle:
        raise DatasetError("tracking needs either a model or oracle detections")
    info = dataset.info(sequence_id)
    state = TrackerState()
    threshold = tracker_config.detection_threshold if detection_threshold is None \
        else detection_threshold
    detections_total = 0
    snapshot: list[Track] = []

    for t in range(info.frame_count):
        frame_t, frame_prev = load_frame_pair(dataset, sequence_id, t)
        if use_oracle:
            dets = oracle_detections(frame_t, frame_prev, tracker_config.downscale)
        else:
            config = model.config
            grid = config.grid_shape
            priors = None
            if config.use_prior_channels:
                priors = render_prior_map(
                    [trk for trk in snapshot if trk.depth is not None],
                    grid, config.downscale,
                )
            outputs = forward(model, frame_t.image, frame_prev.image, priors)
            dets = decode_detections(
                outputs.heatmap, outputs.size, outputs.subpixel_offset, outputs.depth,
                threshold=threshold, max_detections=max_detections,
                scale=config.downscale, pred_displacement=outputs.displacement,
            )
        detections_total += len(dets)
        state, snapshot = step(state, dets, t, tracker_config)

    return SequenceTrackingResult(
        sequence_id=sequence_id,
        tracks=state.all_tracks(),
        frames_processed=info.frame_count,
        detections_total=detections_total,
    )


def labels_as_tracked_boxes(dataset: DatasetIndex, sequence_id: int) -> list[TrackedBox]:
    boxes = []
    info = dataset.info(sequence_id)
    labels = dataset.labels(sequence_id)
    for t in range(info.frame_count):
        for ann in labels.get(t, []):
            boxes.append(
                TrackedBox(t, ann.track_id, ann.class_id,
                           np.array([ann.x1, ann.y1, ann.x2, ann.y2]))
            )
    return boxes


@dataclass
class DepthEvaluation:
    reports: list[DepthReport]
    frames: int = 0
    region_pairs: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def evaluate_depth_sequences(
    dataset: DatasetIndex,
    sequence_ids: list[int],
    model: ToyBackbone | None,
    depth_cap: float = 80.0,
    ranges=((0.0, 20.0), (20.0, 50.0), (50.0, 80.0)),
    pred_depth_fn=None,
) -> DepthEvaluation:
    """Pool per-region (pred, gt) depth pairs over sequences and score them.

    `pred_depth_fn(frame_t, frame_prev) -> (H', W') array` can replace the
    model (e.g. to feed stored predictions); exactly one must be given.
    """
    if (model is None) == (pred_depth_fn is None):
        raise DatasetError("provide exactly one of model or pred_depth_fn")
    pooled: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
    frames = 0
    scale = model.config.downscale if model is not None else 4

    for seq_id in sequence_ids:
        info = dataset.info(seq_id)
        for t in range(info.frame_count):
            frame_t, frame_prev = load_frame_pair(dataset, seq_id, t)
            gt = frame_depth(frame_t, scale)
            if not gt.valid.any():
                continue
            if pred_depth_fn is not None:
                pred = np.asarray(pred_depth_fn(frame_t, frame_prev), dtype=np.float64)
            else:
                outputs = forward(model, frame_t.image, frame_prev.image, None)
                pred = outputs.depth[:, :, 0]
            masks = region_masks(frame_t.annotations, gt, ranges)
            base = gt.valid & (gt.values <= depth_cap)
            for label, mask in masks.items():
                m = base & mask
                if m.any():
                    pooled.setdefault(label, []).append((pred[m], gt.values[m]))
            frames += 1

    reports = []
    region_pairs = {}
    order = ["whole_image", "object_boxes"] + [
        f"objects_{lo:g}m_{hi:g}m" for lo, hi in ranges
    ]
    for label in order:
        chunks = pooled.get(label, [])
        if chunks:
            p = np.concatenate([c[0] for c in chunks])
            g = np.concatenate([c[1] for c in chunks])
        else:
            p = g = np.zeros(0)
        region_pairs[label] = (p, g)
        reports.append(depth_metrics_from_pairs(p, g, label))
    return DepthEvaluation(reports=reports, frames=frames, region_pairs=region_pairs)


def evaluate_mot_sequences(
    gt_by_sequence: dict[int, list[TrackedBox]],
    pred_by_sequence: dict[int, list[TrackedBox]],
    iou_threshold: float = 0.5,
) -> tuple[MotReport, dict[int, MotReport]]:
    """Per-sequence CLEAR-MOT reports plus their count-weighted merge."""
    per_seq = {}
    for seq_id, gt in sorted(gt_by_sequence.items()):
        pred = pred_by_sequence.get(seq_id, [])
        per_seq[seq_id] = compute_mot(gt, pred, iou_threshold)
    merged = merge_mot_reports(list(per_seq.values())) if per_seq else None
    return merged, per_seq

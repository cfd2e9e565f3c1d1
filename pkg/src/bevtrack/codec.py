"""Center-point target encoding and decoding.

Boxes become per-class heatmaps with Gaussian peaks plus dense regression
targets (half-extents, sub-cell offsets, 3D displacement to the previous
frame) sampled at ground-truth center cells. Decoding finds heatmap peaks
and reassembles detections. Prior-frame tracks render into a class-agnostic
heatmap + depth pair that is fed back to the network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .geometry import SparseDepthMap

DEFAULT_MIN_OVERLAP = 0.7


@dataclass
class Detection:
    """One decoded object: 2D center + half-extents, depth, class and confidence.

    `displacement` is the predicted motion from the current frame toward the
    previous one, as (du, dv) in output-grid cells and dz in meters.
    `label` stays None until a tracker assigns an identity.
    """

    center: np.ndarray
    half_extents: np.ndarray
    confidence: float
    class_id: int
    depth: float | None = None
    label: int | None = None
    displacement: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.half_extents = np.asarray(self.half_extents, dtype=np.float64).reshape(2)
        self.displacement = np.asarray(self.displacement, dtype=np.float64).reshape(3)
        if not 0.0 <= self.confidence <= 1.0:
            raise ValidationError(f"confidence must be in [0, 1], got {self.confidence}")
        if self.depth is not None and self.depth <= 0:
            raise ValidationError(f"depth must be positive when set, got {self.depth}")

    @property
    def box(self) -> np.ndarray:
        """(x1, y1, x2, y2) in full-resolution pixels."""
        return np.concatenate([self.center - self.half_extents, self.center + self.half_extents])


@dataclass
class TargetMaps:
    """Per-frame training targets on the (H/R, W/R) output grid.

    Regression channels are supervised only where `center_mask` is true;
    `displacement_mask` is the subset of center cells whose objects have a
    defined depth change (objects lacking LiDAR depth in either frame are
    excluded from displacement supervision).
    """

    heatmap: np.ndarray           # (H', W', K) in [0, 1]
    size: np.ndarray              # (H', W', 2) half-extents, input pixels
    subpixel_offset: np.ndarray   # (H', W', 2) in output-grid cells
    displacement: np.ndarray      # (H', W', 3): (du, dv) cells, dz meters
    depth: SparseDepthMap
    center_mask: np.ndarray       # (H', W') bool
    displacement_mask: np.ndarray  # (H', W') bool
    skipped_objects: int = 0

    def __post_init__(self):
        grid = self.heatmap.shape[:2]
        for name in ("size", "subpixel_offset", "displacement", "center_mask", "displacement_mask"):
            if getattr(self, name).shape[:2] != grid:
                raise ValidationError(f"target map {name} does not match grid {grid}")
        if self.heatmap.min() < 0 or self.heatmap.max() > 1:
            raise ValidationError("heatmap values must lie in [0, 1]")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.heatmap.shape[:2]

    @property
    def num_classes(self) -> int:
        return self.heatmap.shape[2]


def gaussian_radius(half_extents, min_overlap: float = DEFAULT_MIN_OVERLAP) -> int:
    """Gaussian radius for a box with the given half-extents (output-grid cells).

    Uses the corner-keypoint rule: the largest radius such that a box whose
    corners shift by it still overlaps the original at `min_overlap` IoU,
    taking the minimum over the three shift scenarios. Floored at one cell.
    """
    half_w, half_h = float(half_extents[0]), float(half_extents[1])
    if half_w <= 0 or half_h <= 0:
        raise ValidationError(f"half extents must be positive, got {(half_w, half_h)}")
    width, height = 2.0 * half_w, 2.0 * half_h

    a1 = 1.0
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 - math.sqrt(b1 ** 2 - 4 * a1 * c1)) / (2 * a1)

    a2 = 4.0
    b2 = 2.0 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 - math.sqrt(b2 ** 2 - 4 * a2 * c2)) / (2 * a2)

    a3 = 4.0 * min_overlap
    b3 = -2.0 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / (2 * a3)

    return max(1, int(min(r1, r2, r3)))


def splat_gaussian(channel: np.ndarray, center_cell: tuple[int, int], radius: int,
                   peak: float = 1.0) -> None:
    """Max-blend a Gaussian bump (sigma = radius / 3) into `channel` in place."""
    row, col = center_cell
    rows, cols = channel.shape
    sigma = radius / 3.0
    r0, r1 = max(0, row - radius), min(rows, row + radius + 1)
    c0, c1 = max(0, col - radius), min(cols, col + radius + 1)
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1]
    bump = peak * np.exp(-((yy - row) ** 2 + (xx - col) ** 2) / (2.0 * sigma ** 2))
    np.maximum(channel[r0:r1, c0:c1], bump, out=channel[r0:r1, c0:c1])


def object_depth(depth_map: SparseDepthMap, box, center_cell: tuple[int, int]) -> float | None:
    """Depth of an object: its center cell if valid, else the nearest valid
    cell inside the box; None when the box holds no LiDAR return."""
    row, col = center_cell
    rows, cols = depth_map.values.shape
    if 0 <= row < rows and 0 <= col < cols and depth_map.valid[row, col]:
        return float(depth_map.values[row, col])
    scale = depth_map.scale
    x1, y1, x2, y2 = box
    c0 = max(0, int(math.floor(x1 / scale)))
    r0 = max(0, int(math.floor(y1 / scale)))
    c1 = min(cols - 1, int(math.floor(x2 / scale)))
    r1 = min(rows - 1, int(math.floor(y2 / scale)))
    if c0 > c1 or r0 > r1:
        return None
    window = depth_map.valid[r0:r1 + 1, c0:c1 + 1]
    if not window.any():
        return None
    rr, cc = np.nonzero(window)
    rr = rr + r0
    cc = cc + c0
    dist2 = (rr - row) ** 2 + (cc - col) ** 2
    order = np.lexsort((cc, rr, dist2))  # ties -> smallest (row, col)
    best = order[0]
    return float(depth_map.values[rr[best], cc[best]])


def encode_targets(
    frame_t,
    frame_prev,
    depth_gt: SparseDepthMap,
    scale: int,
    num_classes: int,
    depth_prev: SparseDepthMap | None = None,
    min_overlap: float = DEFAULT_MIN_OVERLAP,
) -> TargetMaps:
    """Convert two consecutive frames' annotations into training target maps.

    `frame_t` / `frame_prev` need `.annotations` (BoxAnnotation2D) and
    `.image_size`. `depth_prev` supplies the previous frame's LiDAR depth for
    the dz displacement component; when omitted it falls back to `depth_gt`
    only if the frames are the same object (self-paired first frame).
    """
    if depth_gt.scale != scale:
        raise ValidationError(f"depth map scale {depth_gt.scale} does not match R={scale}")
    grid = SparseDepthMap.grid_shape(frame_t.image_size, scale)
    if depth_gt.values.shape != grid:
        raise ValidationError(f"depth map shape {depth_gt.values.shape} does not match grid {grid}")
    if depth_prev is None and frame_prev is frame_t:
        depth_prev = depth_gt

    heatmap = np.zeros(grid + (num_classes,))
    size = np.zeros(grid + (2,))
    offset = np.zeros(grid + (2,))
    displacement = np.zeros(grid + (3,))
    center_mask = np.zeros(grid, dtype=bool)
    disp_mask = np.zeros(grid, dtype=bool)
    skipped = 0

    prev_by_id = {ann.track_id: ann for ann in frame_prev.annotations}

    for ann in frame_t.annotations:
        cu = (ann.x1 + ann.x2) / 2.0
        cv = (ann.y1 + ann.y2) / 2.0
        half_w = (ann.x2 - ann.x1) / 2.0
        half_h = (ann.y2 - ann.y1) / 2.0
        col = int(math.floor(cu / scale))
        row = int(math.floor(cv / scale))
        if not (0 <= row < grid[0] and 0 <= col < grid[1]):
            skipped += 1
            continue
        if not 0 <= ann.class_id < num_classes:
            raise ValidationError(f"class id {ann.class_id} outside [0, {num_classes})")

        radius = gaussian_radius((half_w / scale, half_h / scale), min_overlap)
        splat_gaussian(heatmap[:, :, ann.class_id], (row, col), radius)
        heatmap[row, col, ann.class_id] = 1.0
        size[row, col] = (half_w, half_h)
        offset[row, col] = (cu / scale - col, cv / scale - row)
        center_mask[row, col] = True

        prev = prev_by_id.get(ann.track_id)
        if prev is None or prev is ann:
            displacement[row, col] = 0.0
            disp_mask[row, col] = True
            continue
        z_t = object_depth(depth_gt, (ann.x1, ann.y1, ann.x2, ann.y2), (row, col))
        z_prev = None
        if depth_prev is not None:
            prev_cu = (prev.x1 + prev.x2) / 2.0
            prev_cv = (prev.y1 + prev.y2) / 2.0
            prev_cell = (int(math.floor(prev_cv / scale)), int(math.floor(prev_cu / scale)))
            z_prev = object_depth(depth_prev, (prev.x1, prev.y1, prev.x2, prev.y2), prev_cell)
        if z_t is None or z_prev is None:
            continue  # dz undefined: no displacement supervision for this object
        du = ((prev.x1 + prev.x2) / 2.0 - cu) / scale
        dv = ((prev.y1 + prev.y2) / 2.0 - cv) / scale
        displacement[row, col] = (du, dv, z_prev - z_t)
        disp_mask[row, col] = True

    return TargetMaps(
        heatmap=heatmap,
        size=size,
        subpixel_offset=offset,
        displacement=displacement,
        depth=depth_gt,
        center_mask=center_mask,
        displacement_mask=disp_mask,
        skipped_objects=skipped,
    )


def _local_peaks(heatmap: np.ndarray, threshold: float) -> np.ndarray:
    """Cells that are >= all 3x3 neighbors and >= threshold, per channel."""
    padded = np.pad(heatmap, ((1, 1), (1, 1), (0, 0)), constant_values=-np.inf)
    is_max = np.ones(heatmap.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            shifted = padded[1 + dr:1 + dr + heatmap.shape[0], 1 + dc:1 + dc + heatmap.shape[1]]
            is_max &= heatmap >= shifted
    return is_max & (heatmap >= threshold)


def decode_detections(
    pred_heatmap: np.ndarray,
    pred_size: np.ndarray,
    pred_offset: np.ndarray,
    pred_depth: np.ndarray,
    threshold: float = 0.3,
    max_detections: int = 100,
    scale: int = 4,
    pred_displacement: np.ndarray | None = None,
) -> list[Detection]:
    """Turn network output grids into a confidence-sorted detection list.

    Peaks are 3x3 local maxima at or above `threshold`; ties order by
    (row, col, class). `pred_displacement`, when given, is sampled at each
    peak cell so downstream tracking sees the predicted motion.
    """
    grid = pred_heatmap.shape[:2]
    for name, arr in (("size", pred_size), ("offset", pred_offset), ("depth", pred_depth)):
        if arr.shape[:2] != grid:
            raise ValidationError(f"prediction grid {name} does not match heatmap {grid}")

    peaks = _local_peaks(pred_heatmap, threshold)
    rows, cols, classes = np.nonzero(peaks)
    if rows.size == 0:
        return []
    conf = pred_heatmap[rows, cols, classes]
    order = np.lexsort((classes, cols, rows, -conf))[:max_detections]

    detections = []
    depth_grid = pred_depth[:, :, 0] if pred_depth.ndim == 3 else pred_depth
    for idx in order:
        r, c, k = int(rows[idx]), int(cols[idx]), int(classes[idx])
        center = (np.array([c, r], dtype=np.float64) + pred_offset[r, c]) * scale
        half = np.maximum(pred_size[r, c], 1e-3)
        disp = pred_displacement[r, c] if pred_displacement is not None else np.zeros(3)
        depth = float(depth_grid[r, c])
        detections.append(
            Detection(
                center=center,
                half_extents=half,
                confidence=float(np.clip(conf[idx], 0.0, 1.0)),
                class_id=k,
                depth=depth if depth > 0 else None,
                displacement=disp,
            )
        )
    return detections


def render_prior_map(
    tracks,
    grid_shape: tuple[int, int],
    scale: int,
    min_overlap: float = DEFAULT_MIN_OVERLAP,
) -> tuple[np.ndarray, np.ndarray]:
    """Render previous-frame tracks into (heatmap, depth) prior channels.

    Each track (any object with center, half_extents, depth, confidence)
    splats a class-agnostic Gaussian weighted by its confidence; the depth
    channel carries the track depth over the Gaussian's support, nearest
    track winning where supports overlap, zero elsewhere.
    """
    heat = np.zeros(grid_shape)
    depth = np.zeros(grid_shape)
    for trk in tracks:
        col = int(math.floor(trk.center[0] / scale))
        row = int(math.floor(trk.center[1] / scale))
        if not (0 <= row < grid_shape[0] and 0 <= col < grid_shape[1]):
            continue
        half_cells = (trk.half_extents[0] / scale, trk.half_extents[1] / scale)
        if half_cells[0] <= 0 or half_cells[1] <= 0:
            continue
        radius = gaussian_radius(half_cells, min_overlap)
        splat_gaussian(heat, (row, col), radius, peak=float(trk.confidence))
        if trk.depth is None:
            continue
        r0, r1 = max(0, row - radius), min(grid_shape[0], row + radius + 1)
        c0, c1 = max(0, col - radius), min(grid_shape[1], col + radius + 1)
        support = depth[r0:r1, c0:c1]
        write = (support == 0) | (trk.depth < support)
        support[write] = trk.depth
    return heat, depth

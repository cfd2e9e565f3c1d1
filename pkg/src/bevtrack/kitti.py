"""KITTI-tracking-format ingest: sequence indexing, frame loading, the
sequence-granular train/val split and geometry-consistent augmentation.

Expected layout under a dataset root::

    image_02/<seq>/<frame>.png     RGB frames
    label_02/<seq>.txt             2D track labels (KITTI tracking columns)
    calib/<seq>.txt                calibration per sequence
    velodyne/<seq>/<frame>.bin     LiDAR returns (optional)
    oxts/<seq>.txt                 GPS/IMU per frame (optional)

Pixel coordinates are continuous with pixel centers at index + 0.5; boxes
use (x1, y1, x2, y2) corners in that space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DatasetError, ValidationError
from .geometry import CameraCalibration, EgoPose, SparseDepthMap, load_calibration, load_lidar_points

CLASS_NAMES = ("Car", "Pedestrian")
FRAME_RATE = 10.0  # KITTI tracking sequences are captured at 10 FPS


@dataclass
class BoxAnnotation2D:
    """Axis-aligned 2D box with class and track identity."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    track_id: int

    def __post_init__(self):
        if self.x2 <= self.x1 or self.y2 <= self.y1:
            raise ValidationError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)


@dataclass
class Frame:
    """One timestep: image, annotations and optional LiDAR / ego pose."""

    image: np.ndarray
    annotations: list[BoxAnnotation2D]
    calib: CameraCalibration
    sequence_id: int = 0
    frame_index: int = 0
    cloud: np.ndarray | None = None
    ego: EgoPose | None = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise ValidationError(f"frame_index must be >= 0, got {self.frame_index}")
        ids = [a.track_id for a in self.annotations]
        if len(ids) != len(set(ids)):
            raise ValidationError(
                f"duplicate track ids in sequence {self.sequence_id} frame {self.frame_index}"
            )

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.image.shape[1], self.image.shape[0])


@dataclass(frozen=True)
class AugmentationConfig:
    """Knobs for the paired geometric + photometric augmentation."""

    flip_probability: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    crop_size: tuple[int, int] | None = None  # (W, H)
    color_jitter: tuple[float, float, float] = (0.0, 0.0, 0.0)  # brightness/contrast/saturation
    max_rotation_deg: float = 0.0
    max_translation_px: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError(f"flip_probability: must be in [0, 1], got {self.flip_probability}")
        if self.scale_range[0] > self.scale_range[1] or self.scale_range[0] <= 0:
            raise ConfigError(f"scale_range: invalid range {self.scale_range}")


@dataclass(frozen=True)
class SequenceInfo:
    sequence_id: int
    frame_count: int
    has_lidar: bool
    has_oxts: bool


_CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}


def _parse_label_file(path: Path) -> tuple[dict[int, list[BoxAnnotation2D]], int]:
    """Parse a tracking label file; returns (frame -> boxes, max frame index)."""
    frames: dict[int, list[BoxAnnotation2D]] = {}
    max_frame = -1
    for line_no, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 10:
            raise ValidationError(f"{path}:{line_no}: expected >= 10 label columns")
        frame = int(float(parts[0]))
        max_frame = max(max_frame, frame)
        cls = parts[2]
        if cls not in _CLASS_IDS:
            continue
        box = BoxAnnotation2D(
            x1=float(parts[6]), y1=float(parts[7]), x2=float(parts[8]), y2=float(parts[9]),
            class_id=_CLASS_IDS[cls], track_id=int(float(parts[1])),
        )
        frames.setdefault(frame, []).append(box)
    return frames, max_frame


def _parse_oxts_file(path: Path) -> list[EgoPose]:
    poses = []
    for i, line in enumerate(path.read_text().splitlines()):
        parts = line.split()
        if len(parts) < 6:
            continue
        poses.append(
            EgoPose(
                latitude=float(parts[0]),
                longitude=float(parts[1]),
                altitude=float(parts[2]),
                yaw=float(parts[5]),
                timestamp=i / FRAME_RATE,
            )
        )
    return poses


class DatasetIndex:
    """Indexed view of a dataset root with lazy per-sequence caches."""

    def __init__(self, root: Path, sequences: list[SequenceInfo]):
        self.root = Path(root)
        self.sequences = sequences
        self._labels: dict[int, dict] = {}
        self._calib: dict[int, CameraCalibration] = {}
        self._oxts: dict[int, list[EgoPose]] = {}

    def __iter__(self):
        return iter((s.sequence_id, s.frame_count) for s in self.sequences)

    def __len__(self):
        return len(self.sequences)

    def info(self, sequence_id: int) -> SequenceInfo:
        for s in self.sequences:
            if s.sequence_id == sequence_id:
                return s
        raise DatasetError(f"unknown sequence {sequence_id}")

    def _seq_name(self, sequence_id: int) -> str:
        return f"{sequence_id:04d}"

    def labels(self, sequence_id: int) -> dict[int, list[BoxAnnotation2D]]:
        if sequence_id not in self._labels:
            path = self.root / "label_02" / f"{self._seq_name(sequence_id)}.txt"
            self._labels[sequence_id] = _parse_label_file(path)[0]
        return self._labels[sequence_id]

    def calibration(self, sequence_id: int) -> CameraCalibration:
        if sequence_id not in self._calib:
            path = self.root / "calib" / f"{self._seq_name(sequence_id)}.txt"
            self._calib[sequence_id] = load_calibration(path.read_text())
        return self._calib[sequence_id]

    def ego_poses(self, sequence_id: int) -> list[EgoPose]:
        if sequence_id not in self._oxts:
            path = self.root / "oxts" / f"{self._seq_name(sequence_id)}.txt"
            self._oxts[sequence_id] = _parse_oxts_file(path) if path.exists() else []
        return self._oxts[sequence_id]

    def load_frame(self, sequence_id: int, t: int) -> Frame:
        info = self.info(sequence_id)
        if not 0 <= t < info.frame_count:
            raise IndexError(f"frame {t} out of range for sequence {sequence_id}")
        seq = self._seq_name(sequence_id)
        img_path = self.root / "image_02" / seq / f"{t:06d}.png"
        image = np.asarray(Image.open(img_path).convert("RGB"), dtype=np.float32) / 255.0
        h, w = image.shape[:2]
        calib = self.calibration(sequence_id)
        if calib.image_size != (w, h):
            calib = calib.with_image_size(w, h)
            self._calib[sequence_id] = calib

        annotations = []
        for box in self.labels(sequence_id).get(t, []):
            x1, x2 = max(0.0, box.x1), min(float(w), box.x2)
            y1, y2 = max(0.0, box.y1), min(float(h), box.y2)
            if x2 - x1 > 1e-6 and y2 - y1 > 1e-6:
                annotations.append(replace(box, x1=x1, y1=y1, x2=x2, y2=y2))

        cloud = None
        if info.has_lidar:
            bin_path = self.root / "velodyne" / seq / f"{t:06d}.bin"
            if bin_path.exists():
                cloud = load_lidar_points(bin_path)

        poses = self.ego_poses(sequence_id)
        ego = poses[t] if t < len(poses) else None
        return Frame(
            image=image, annotations=annotations, calib=calib,
            sequence_id=sequence_id, frame_index=t, cloud=cloud, ego=ego,
        )


def index_dataset(root) -> DatasetIndex:
    """Enumerate sequences under a KITTI-tracking-layout root.

    Missing velodyne/oxts are flagged per sequence, not fatal; a missing
    image tree or a label file referencing frames beyond the images is.
    """
    root = Path(root)
    image_root = root / "image_02"
    if not image_root.is_dir():
        raise DatasetError(f"dataset root {root} has no image_02 directory")
    seq_dirs = sorted(d for d in image_root.iterdir() if d.is_dir())
    if not seq_dirs:
        raise DatasetError(f"dataset root {root} contains no sequences")

    sequences = []
    for seq_dir in seq_dirs:
        seq_id = int(seq_dir.name)
        frame_count = len(list(seq_dir.glob("*.png")))
        label_path = root / "label_02" / f"{seq_dir.name}.txt"
        if not label_path.exists():
            raise DatasetError(f"sequence {seq_dir.name}: missing label file {label_path}")
        _, max_frame = _parse_label_file(label_path)
        if max_frame >= frame_count:
            raise ValidationError(
                f"sequence {seq_dir.name}: labels reference frame {max_frame} "
                f"but only {frame_count} images exist"
            )
        calib_path = root / "calib" / f"{seq_dir.name}.txt"
        if not calib_path.exists():
            raise DatasetError(f"sequence {seq_dir.name}: missing calibration {calib_path}")
        sequences.append(
            SequenceInfo(
                sequence_id=seq_id,
                frame_count=frame_count,
                has_lidar=(root / "velodyne" / seq_dir.name).is_dir(),
                has_oxts=(root / "oxts" / f"{seq_dir.name}.txt").exists(),
            )
        )
    return DatasetIndex(root, sequences)


def split_train_val(dataset, ratio: float = 0.5) -> tuple[list[int], list[int]]:
    """Deterministically split sequences so no sequence spans both sets.

    Walks sequences in id order, filling the training side until it reaches
    `ratio` of the total frame count; guarantees both sides are nonempty.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    pairs = list(dataset) if not isinstance(dataset, list) else dataset
    if len(pairs) < 2:
        raise DatasetError(f"need at least 2 sequences to split, got {len(pairs)}")
    pairs = sorted(pairs, key=lambda p: p[0])
    total = sum(count for _, count in pairs)
    train, cum = [], 0
    for seq_id, count in pairs:
        if cum >= ratio * total:
            break
        train.append(seq_id)
        cum += count
    if len(train) == len(pairs):
        train = train[:-1]
    if not train:
        train = [pairs[0][0]]
    train_set = set(train)
    val = [seq_id for seq_id, _ in pairs if seq_id not in train_set]
    return train, val


def load_frame_pair(dataset: DatasetIndex, sequence_id: int, t: int) -> tuple[Frame, Frame]:
    """Frames (t, t-1) sharing calibration; t = 0 self-pairs."""
    frame_t = dataset.load_frame(sequence_id, t)
    if t == 0:
        return frame_t, frame_t
    return frame_t, dataset.load_frame(sequence_id, t - 1)


def _affine_matrix(config: AugmentationConfig, rng: np.random.Generator,
                   image_size: tuple[int, int]):
    """Draw the random geometric transform as a 3x3 matrix on (x, y, 1).

    Returns (matrix, output_size). Flip, zoom and rotation act about the
    image center; the canvas stays fixed unless a crop is requested.
    """
    w, h = image_size
    matrix = np.eye(3)

    if rng.random() < config.flip_probability:
        flip = np.array([[-1.0, 0.0, float(w)], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        matrix = flip @ matrix

    scale = rng.uniform(*config.scale_range)
    angle = math.radians(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)) \
        if config.max_rotation_deg > 0 else 0.0
    tx = ty = 0.0
    if config.max_translation_px > 0:
        tx = rng.uniform(-config.max_translation_px, config.max_translation_px)
        ty = rng.uniform(-config.max_translation_px, config.max_translation_px)

    if scale != 1.0 or angle != 0.0 or tx or ty:
        cx, cy = w / 2.0, h / 2.0
        cos_a, sin_a = math.cos(angle), math.sin(angle)
        rot_scale = np.array(
            [[scale * cos_a, -scale * sin_a, cx - scale * (cos_a * cx - sin_a * cy) + tx],
             [scale * sin_a, scale * cos_a, cy - scale * (sin_a * cx + cos_a * cy) + ty],
             [0.0, 0.0, 1.0]]
        )
        matrix = rot_scale @ matrix

    out_size = (w, h)
    if config.crop_size is not None:
        cw, ch = config.crop_size
        if cw > w or ch > h:
            raise ConfigError(f"crop_size: {config.crop_size} exceeds image size {(w, h)}")
        x0 = rng.uniform(0, w - cw)
        y0 = rng.uniform(0, h - ch)
        crop = np.array([[1.0, 0.0, -x0], [0.0, 1.0, -y0], [0.0, 0.0, 1.0]])
        matrix = crop @ matrix
        out_size = (int(cw), int(ch))
    return matrix, out_size


def _warp_image(image: np.ndarray, matrix: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Inverse-warp an (H, W, C) image through the pixel-space matrix."""
    out_w, out_h = out_size
    inv = np.linalg.inv(matrix)
    # ndimage maps output index -> input index; convert between index space
    # (integer centers) and the continuous space (centers at +0.5).
    a = inv[:2, :2]
    b = inv[:2, 2]
    idx_matrix = np.array([[a[1, 1], a[1, 0]], [a[0, 1], a[0, 0]]])
    idx_offset = np.array(
        [a[1, 0] * 0.5 + a[1, 1] * 0.5 + b[1] - 0.5,
         a[0, 0] * 0.5 + a[0, 1] * 0.5 + b[0] - 0.5]
    )
    out = np.empty((out_h, out_w, image.shape[2]), dtype=image.dtype)
    for c in range(image.shape[2]):
        out[:, :, c] = ndimage.affine_transform(
            image[:, :, c], idx_matrix, offset=idx_offset, output_shape=(out_h, out_w),
            order=1, mode="constant", cval=0.0,
        )
    return out


def _transform_boxes(annotations, matrix, out_size):
    out_w, out_h = out_size
    boxes = []
    for ann in annotations:
        corners = np.array(
            [[ann.x1, ann.y1, 1.0], [ann.x2, ann.y1, 1.0],
             [ann.x1, ann.y2, 1.0], [ann.x2, ann.y2, 1.0]]
        )
        mapped = corners @ matrix.T
        xs, ys = mapped[:, 0], mapped[:, 1]
        x1, x2 = max(0.0, xs.min()), min(float(out_w), xs.max())
        y1, y2 = max(0.0, ys.min()), min(float(out_h), ys.max())
        if x2 - x1 > 1.0 and y2 - y1 > 1.0:
            boxes.append(replace(ann, x1=x1, y1=y1, x2=x2, y2=y2))
    return boxes


def _transform_depth(depth: SparseDepthMap, matrix, out_size) -> SparseDepthMap:
    scale = depth.scale
    out_grid = SparseDepthMap.grid_shape(out_size, scale)
    result = SparseDepthMap.empty(out_grid, scale)
    rows, cols = np.nonzero(depth.valid)
    if rows.size == 0:
        return result
    centers = np.column_stack(
        [(cols + 0.5) * scale, (rows + 0.5) * scale, np.ones(rows.size)]
    )
    mapped = centers @ matrix.T
    new_cols = np.floor(mapped[:, 0] / scale).astype(int)
    new_rows = np.floor(mapped[:, 1] / scale).astype(int)
    inside = (new_rows >= 0) & (new_rows < out_grid[0]) & (new_cols >= 0) & (new_cols < out_grid[1])
    values = depth.values[rows[inside], cols[inside]]
    buf = np.full(out_grid, np.inf)
    np.minimum.at(buf, (new_rows[inside], new_cols[inside]), values)
    hit = np.isfinite(buf)
    result.values[hit] = buf[hit]
    result.valid = hit
    return result


def _color_jitter(image: np.ndarray, factors: tuple[float, float, float]) -> np.ndarray:
    brightness, contrast, saturation = factors
    out = image * brightness
    mean = out.mean()
    out = (out - mean) * contrast + mean
    gray = out.mean(axis=2, keepdims=True)
    out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def augment(
    pair: tuple[Frame, Frame],
    depth_gt: SparseDepthMap,
    config: AugmentationConfig,
) -> tuple[Frame, Frame, SparseDepthMap]:
    """Apply one random, seed-reproducible augmentation to a frame pair.

    The same geometric transform hits both images, every box and the sparse
    depth map (validity transported cell-wise, depth values untouched);
    color jitter perturbs the images only.
    """
    frame_t, frame_prev = pair
    if frame_t.image.shape != frame_prev.image.shape:
        raise ValidationError("frame pair images must share a size")
    rng = np.random.default_rng(config.seed)
    matrix, out_size = _affine_matrix(config, rng, frame_t.image_size)

    jb, jc, js = config.color_jitter
    factors = (
        1.0 + (rng.uniform(-jb, jb) if jb else 0.0),
        1.0 + (rng.uniform(-jc, jc) if jc else 0.0),
        1.0 + (rng.uniform(-js, js) if js else 0.0),
    )

    identity = np.array_equal(matrix, np.eye(3)) and out_size == frame_t.image_size
    no_jitter = factors == (1.0, 1.0, 1.0)

    def transform_frame(frame: Frame) -> Frame:
        if identity and no_jitter:
            return replace(frame, image=frame.image.copy(),
                           annotations=list(frame.annotations))
        image = frame.image if identity else _warp_image(frame.image, matrix, out_size)
        if not no_jitter:
            image = _color_jitter(image, factors)
        elif identity:
            image = image.copy()
        boxes = frame.annotations if identity else _transform_boxes(
            frame.annotations, matrix, out_size
        )
        return replace(frame, image=image, annotations=list(boxes))

    new_t = transform_frame(frame_t)
    new_prev = new_t if frame_prev is frame_t else transform_frame(frame_prev)
    new_depth = depth_gt.copy() if identity else _transform_depth(depth_gt, matrix, out_size)
    return new_t, new_prev, new_depth

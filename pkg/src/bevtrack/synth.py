"""Synthetic street-like sequences with analytic depth, written in the KITTI
tracking layout so every pipeline stage runs on them unchanged.

Scenes hold a flat ground plane seen from a forward camera plus a few boxes
(class Car) and ellipses (class Pedestrian) gliding at constant 3D velocity.
Pixel brightness falls off monotonically with depth, for ground and objects
alike, so dense depth is learnable from local appearance; the sky above the
horizon has no LiDAR returns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraCalibration, EgoPose, RigidTransform
from .kitti import BoxAnnotation2D
from .utils import atomic_write_bytes, atomic_write_text

# LiDAR frame: x forward, y left, z up -> camera: x right, y down, z forward.
LIDAR_TO_CAM_ROT = np.array(
    [[0.0, -1.0, 0.0],
     [0.0, 0.0, -1.0],
     [1.0, 0.0, 0.0]]
)

CAMERA_HEIGHT = 1.5      # meters above ground
MAX_GROUND_DEPTH = 60.0  # meters; ground beyond this gives no return

# Appearance: the blue channel carries a monotone depth code on every
# surface (inverting it is exactly the mapping the depth head must learn),
# while red/green carry class identity modulated by an in-object gradient so
# each object pixel is locally distinguishable and centers stay localizable.
SHADE_NEAR, SHADE_FAR = 1.0, 0.35
SHADE_DEPTH_RANGE = (3.0, 40.0)

SKY_COLOR = np.array([0.30, 0.30, 0.95])
GROUND_RG = np.array([0.45, 0.42])
CLASS_RG = (
    np.array([0.95, 0.25]),  # Car
    np.array([0.25, 0.90]),  # Pedestrian
)


def depth_shade(z: np.ndarray | float) -> np.ndarray | float:
    lo, hi = SHADE_DEPTH_RANGE
    t = np.clip((np.asarray(z, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    return SHADE_NEAR + (SHADE_FAR - SHADE_NEAR) * t


@dataclass
class SceneObject:
    """One actor: physical size, class, and a constant-velocity 3D path."""

    track_id: int
    class_id: int
    width_m: float
    height_m: float
    position: np.ndarray  # camera-frame (x, y, z) at frame 0
    velocity: np.ndarray  # meters per frame

    def state_at(self, t: int) -> np.ndarray:
        return self.position + t * self.velocity


@dataclass(frozen=True)
class SceneConfig:
    image_size: tuple[int, int] = (128, 96)  # (W, H)
    num_frames: int = 10
    num_objects: int = 3
    focal: float = 120.0
    seed: int = 7
    ego_start: tuple[float, float] = (49.01, 8.41)
    ego_speed: float = 0.8  # meters north per frame
    lidar_keep_fraction: float = 1.0  # fraction of depth cells that get a return
    downscale: int = 4


@dataclass
class SynthFrame:
    """Ground truth for one rendered frame."""

    image: np.ndarray                    # (H, W, 3) float in [0, 1]
    annotations: list[BoxAnnotation2D]
    depth_full: np.ndarray               # (H, W) analytic depth, NaN = no return
    cloud: np.ndarray                    # (N, 3) LiDAR-frame points
    ego: EgoPose
    object_depths: dict[int, float] = field(default_factory=dict)


def make_calibration(config: SceneConfig) -> CameraCalibration:
    w, h = config.image_size
    return CameraCalibration(
        fx=config.focal, fy=config.focal, cx=w / 2.0, cy=h / 2.0,
        lidar_to_cam=RigidTransform(LIDAR_TO_CAM_ROT, np.zeros(3)),
        image_size=(w, h),
    )


def _spawn_objects(config: SceneConfig, rng: np.random.Generator) -> list[SceneObject]:
    lanes = np.linspace(-4.5, 4.5, max(2, config.num_objects))
    rng.shuffle(lanes)
    objects = []
    for i in range(config.num_objects):
        class_id = int(i % 2 == 1 and rng.random() < 0.8)  # mostly cars, some peds
        if class_id == 0:
            width_m, height_m = 2.6 + rng.uniform(-0.3, 0.3), 1.5 + rng.uniform(-0.2, 0.2)
        else:
            width_m, height_m = 0.8, 1.75
        z0 = rng.uniform(7.0, 18.0)
        z1 = rng.uniform(8.0, 24.0)
        x0 = lanes[i] + rng.uniform(-0.4, 0.4)
        vx = rng.uniform(-0.1, 0.1)
        vz = (z1 - z0) / max(1, config.num_frames - 1)
        y_center = CAMERA_HEIGHT - height_m / 2.0  # standing on the ground
        objects.append(
            SceneObject(
                track_id=i + 1,
                class_id=class_id,
                width_m=width_m,
                height_m=height_m,
                position=np.array([x0, y_center, z0]),
                velocity=np.array([vx, 0.0, vz]),
            )
        )
    return objects


def _ground_depth(config: SceneConfig) -> np.ndarray:
    """Analytic per-pixel depth of the empty scene; NaN above the horizon."""
    w, h = config.image_size
    cy = h / 2.0
    v = np.arange(h, dtype=np.float64) + 0.5
    depth = np.full((h, w), np.nan)
    below = v > cy + 1.0
    z = config.focal * CAMERA_HEIGHT / np.clip(v - cy, 1e-6, None)
    z = np.where(z <= MAX_GROUND_DEPTH, z, np.nan)
    rows = np.where(below, z, np.nan)
    depth[:] = rows[:, None]
    return depth


def render_frame(config: SceneConfig, objects: list[SceneObject], t: int,
                 ego: EgoPose, calib: CameraCalibration,
                 rng: np.random.Generator) -> SynthFrame:
    w, h = config.image_size
    depth = _ground_depth(config)

    image = np.empty((h, w, 3))
    image[:] = SKY_COLOR
    ground = ~np.isnan(depth)
    shade = depth_shade(np.nan_to_num(depth, nan=1.0))
    image[ground, 0] = GROUND_RG[0] * shade[ground]
    image[ground, 1] = GROUND_RG[1] * shade[ground]
    image[ground, 2] = shade[ground]

    annotations = []
    object_depths: dict[int, float] = {}
    xs = np.arange(w, dtype=np.float64) + 0.5
    ys = np.arange(h, dtype=np.float64) + 0.5

    for obj in sorted(objects, key=lambda o: -o.state_at(t)[2]):  # far to near
        x, y, z = obj.state_at(t)
        if z <= 1.0:
            continue
        cu = calib.fx * x / z + calib.cx
        cv = calib.fy * y / z + calib.cy
        half_u = calib.fx * obj.width_m / 2.0 / z
        half_v = calib.fy * obj.height_m / 2.0 / z
        x1, x2 = cu - half_u, cu + half_u
        y1, y2 = cv - half_v, cv + half_v
        if x2 <= 1 or x1 >= w - 1 or y2 <= 1 or y1 >= h - 1:
            continue

        if obj.class_id == 0:
            mask = (np.abs(xs[None, :] - cu) <= half_u) & (np.abs(ys[:, None] - cv) <= half_v)
        else:
            mask = (((xs[None, :] - cu) / half_u) ** 2
                    + ((ys[:, None] - cv) / half_v) ** 2) <= 1.0
        if not mask.any():
            continue
        # Diagonal gradient across the object footprint keeps every pixel
        # position-aware, so the heatmap can localize the geometric center.
        u_rel = np.clip((xs[None, :] - (cu - half_u)) / (2 * half_u), 0.0, 1.0)
        v_rel = np.clip((ys[:, None] - (cv - half_v)) / (2 * half_v), 0.0, 1.0)
        gradient = 0.55 + 0.45 * (u_rel + v_rel) / 2.0
        rg = CLASS_RG[obj.class_id]
        image[mask, 0] = rg[0] * gradient[mask]
        image[mask, 1] = rg[1] * gradient[mask]
        image[mask, 2] = depth_shade(z)
        depth[mask] = z

        cx1, cx2 = max(0.0, x1), min(float(w), x2)
        cy1, cy2 = max(0.0, y1), min(float(h), y2)
        if cx2 - cx1 > 2 and cy2 - cy1 > 2:
            annotations.append(
                BoxAnnotation2D(cx1, cy1, cx2, cy2, obj.class_id, obj.track_id)
            )
            object_depths[obj.track_id] = float(z)

    cloud = _depth_to_cloud(depth, calib, config, rng)
    return SynthFrame(
        image=np.clip(image, 0.0, 1.0),
        annotations=annotations,
        depth_full=depth,
        cloud=cloud,
        ego=ego,
        object_depths=object_depths,
    )


def _depth_to_cloud(depth_full: np.ndarray, calib: CameraCalibration,
                    config: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    """Sample one return per output-grid cell center and move it to LiDAR frame."""
    scale = config.downscale
    h, w = depth_full.shape
    vs = np.arange(scale // 2, h, scale, dtype=np.float64) + 0.5
    us = np.arange(scale // 2, w, scale, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(us, vs)
    zz = depth_full[vv.astype(int), uu.astype(int)]
    keep = ~np.isnan(zz)
    if config.lidar_keep_fraction < 1.0:
        keep &= rng.random(zz.shape) < config.lidar_keep_fraction
    u, v, z = uu[keep], vv[keep], zz[keep]
    cam = np.column_stack(
        [(u - calib.cx) * z / calib.fx, (v - calib.cy) * z / calib.fy, z]
    )
    return cam @ np.linalg.inv(LIDAR_TO_CAM_ROT).T


def generate_sequence(config: SceneConfig) -> tuple[list[SynthFrame], CameraCalibration]:
    """Render all frames of one synthetic sequence."""
    rng = np.random.default_rng(config.seed)
    calib = make_calibration(config)
    objects = _spawn_objects(config, rng)
    lat0, lon0 = config.ego_start
    frames = []
    for t in range(config.num_frames):
        ego = EgoPose(
            latitude=lat0 + config.ego_speed * t / 111320.0,
            longitude=lon0,
            altitude=110.0,
            yaw=math.pi / 2.0,  # heading north
            timestamp=t / 10.0,
        )
        frames.append(render_frame(config, objects, t, ego, calib, rng))
    return frames, calib


def write_kitti_tree(root, sequences: dict[int, tuple[list[SynthFrame], CameraCalibration]]) -> Path:
    """Write synthetic sequences to disk in the KITTI tracking layout."""
    root = Path(root)
    for seq_id, (frames, calib) in sequences.items():
        seq = f"{seq_id:04d}"
        img_dir = root / "image_02" / seq
        vel_dir = root / "velodyne" / seq
        img_dir.mkdir(parents=True, exist_ok=True)
        vel_dir.mkdir(parents=True, exist_ok=True)

        label_lines = []
        oxts_lines = []
        for t, frame in enumerate(frames):
            img = Image.fromarray((frame.image * 255.0 + 0.5).astype(np.uint8))
            img.save(img_dir / f"{t:06d}.png")

            pts = frame.cloud.astype("<f4")
            recs = np.column_stack([pts, np.full(len(pts), 0.5, dtype="<f4")])
            atomic_write_bytes(vel_dir / f"{t:06d}.bin", recs.astype("<f4").tobytes())

            for ann in frame.annotations:
                name = ("Car", "Pedestrian")[ann.class_id]
                z = frame.object_depths.get(ann.track_id, -1.0)
                label_lines.append(
                    f"{t} {ann.track_id} {name} 0 0 0.0 "
                    f"{ann.x1:.2f} {ann.y1:.2f} {ann.x2:.2f} {ann.y2:.2f} "
                    f"1.5 1.6 3.0 0.0 0.0 {z:.2f} 0.0"
                )
            e = frame.ego
            oxts_lines.append(
                f"{e.latitude:.9f} {e.longitude:.9f} {e.altitude:.3f} 0.0 0.0 {e.yaw:.6f} "
                "0.0 0.0 0.0 0.0"
            )

        atomic_write_text(root / "label_02" / f"{seq}.txt", "\n".join(label_lines) + "\n")
        atomic_write_text(root / "oxts" / f"{seq}.txt", "\n".join(oxts_lines) + "\n")
        fx, fy, cx, cy = calib.fx, calib.fy, calib.cx, calib.cy
        calib_text = (
            f"P2: {fx} 0.0 {cx} 0.0 0.0 {fy} {cy} 0.0 0.0 0.0 1.0 0.0\n"
            "R_rect 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0\n"
            "Tr_velo_cam 0.0 -1.0 0.0 0.0 0.0 0.0 -1.0 0.0 1.0 0.0 0.0 0.0\n"
        )
        atomic_write_text(root / "calib" / f"{seq}.txt", calib_text)
    return root


def make_synthetic_dataset(root, num_sequences: int = 1,
                           config: SceneConfig = SceneConfig()) -> Path:
    """Generate and write `num_sequences` synthetic sequences under `root`."""
    sequences = {}
    for seq_id in range(num_sequences):
        cfg = SceneConfig(**{**config.__dict__, "seed": config.seed + seq_id})
        sequences[seq_id] = generate_sequence(cfg)
    return write_kitti_tree(root, sequences)

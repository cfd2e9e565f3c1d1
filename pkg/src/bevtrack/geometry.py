"""Camera/LiDAR geometry: calibration parsing, point projection, sparse depth
rendering, pixel lifting and ego->world transforms.

Conventions
-----------
* Camera frame: x right, y down, z forward (optical axis), meters.
* Ego ground frame: x forward, y left, z up, meters.
* Image frame: u right, v down, pixels, origin at the top-left corner.
* Depth stored in :class:`SparseDepthMap` is camera-frame z, not ray length.
* Geodetic positions use a local East-North tangent plane with a constant
  111320 m/degree scale; adequate for actor ranges of a few hundred meters.
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass, field, replace

import numpy as np

from .errors import CalibrationParseError, ValidationError

METERS_PER_DEGREE = 111320.0

ROTATION_TOL = 1e-6
# Rotations read from calibration files are estimates printed with limited
# precision; accept their roundoff without weakening programmatic inputs.
PARSED_ROTATION_TOL = 5e-3

# Maps camera axes (x right, y down, z forward) onto ego axes
# (x forward, y left, z up). Used when no explicit mount is given.
CAMERA_TO_EGO_AXES = np.array(
    [[0.0, 0.0, 1.0],
     [-1.0, 0.0, 0.0],
     [0.0, -1.0, 0.0]]
)


def _check_rotation(rot: np.ndarray, name: str, tol: float = ROTATION_TOL) -> np.ndarray:
    rot = np.asarray(rot, dtype=np.float64)
    if rot.shape != (3, 3):
        raise ValidationError(f"{name}: expected 3x3 rotation, got {rot.shape}")
    if np.abs(rot @ rot.T - np.eye(3)).max() > tol:
        raise ValidationError(f"{name}: rotation is not orthonormal")
    if np.linalg.det(rot) < 0:
        raise ValidationError(f"{name}: rotation has determinant -1 (reflection)")
    return rot


@dataclass(frozen=True)
class RigidTransform:
    """3D rigid transform y = R x + t."""

    rotation: np.ndarray
    translation: np.ndarray
    tol: InitVar[float] = ROTATION_TOL

    def __post_init__(self, tol: float = ROTATION_TOL):
        object.__setattr__(self, "rotation", _check_rotation(self.rotation, "RigidTransform", tol))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (3,) or (N, 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, inner: "RigidTransform") -> "RigidTransform":
        """Return the transform equivalent to applying `inner` first, then self."""
        return RigidTransform(
            self.rotation @ inner.rotation,
            self.rotation @ inner.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)


@dataclass(frozen=True)
class CameraCalibration:
    """Pinhole intrinsics plus LiDAR->camera extrinsics.

    `cam_offset` holds the translation baked into a KITTI projection matrix
    (K^-1 times its fourth column); it is applied after rectification.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    lidar_to_cam: RigidTransform = field(default_factory=RigidTransform.identity)
    rect: np.ndarray | None = None
    image_size: tuple[int, int] = (1280, 384)  # (W, H)
    cam_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tol: InitVar[float] = ROTATION_TOL

    def __post_init__(self, tol: float = ROTATION_TOL):
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.rect is not None:
            object.__setattr__(self, "rect", _check_rotation(self.rect, "rect", tol))
        object.__setattr__(
            self, "cam_offset", np.asarray(self.cam_offset, dtype=np.float64).reshape(3)
        )

    def with_image_size(self, width: int, height: int) -> "CameraCalibration":
        # rect was validated at construction; don't re-tighten on copy
        return replace(self, image_size=(int(width), int(height)), tol=PARSED_ROTATION_TOL)

    def lidar_to_rect(self, points: np.ndarray) -> np.ndarray:
        """LiDAR-frame points (N, 3) -> rectified camera frame (N, 3)."""
        cam = self.lidar_to_cam.apply(points)
        if self.rect is not None:
            cam = cam @ self.rect.T
        return cam + self.cam_offset


@dataclass(frozen=True)
class EgoPose:
    """GPS pose of the ego vehicle; yaw in radians, 0 = east, counter-clockwise."""

    latitude: float
    longitude: float
    altitude: float = 0.0
    yaw: float = 0.0
    timestamp: float = 0.0

    def __post_init__(self):
        if abs(self.latitude) > 90.0:
            raise ValidationError(f"latitude out of range: {self.latitude}")
        if abs(self.longitude) > 180.0:
            raise ValidationError(f"longitude out of range: {self.longitude}")


@dataclass
class SparseDepthMap:
    """Downscaled depth grid; `valid` marks cells that received a return."""

    values: np.ndarray
    valid: np.ndarray
    scale: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.values.shape != self.valid.shape:
            raise ValidationError(
                f"depth/valid shape mismatch: {self.values.shape} vs {self.valid.shape}"
            )
        if self.scale < 1:
            raise ValidationError(f"scale must be >= 1, got {self.scale}")
        if np.any(self.values[self.valid] <= 0):
            raise ValidationError("valid depth cells must be positive")

    @classmethod
    def empty(cls, grid_shape: tuple[int, int], scale: int) -> "SparseDepthMap":
        return cls(np.zeros(grid_shape), np.zeros(grid_shape, dtype=bool), scale)

    @classmethod
    def grid_shape(cls, image_size: tuple[int, int], scale: int) -> tuple[int, int]:
        w, h = image_size
        return (-(-h // scale), -(-w // scale))  # ceil division

    def copy(self) -> "SparseDepthMap":
        return SparseDepthMap(self.values.copy(), self.valid.copy(), self.scale)


# KITTI calibration files name the same matrices differently across variants.
_CALIB_ALIASES = {
    "P2": ("P2",),
    "rect": ("R_rect", "R0_rect", "R_rect_02"),
    "lidar_to_cam": ("Tr_velo_cam", "Tr_velo_to_cam"),
}


def _parse_calib_lines(raw_text: str) -> dict[str, np.ndarray]:
    entries: dict[str, np.ndarray] = {}
    for line in raw_text.splitlines():
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        key = parts[0].rstrip(":")
        try:
            entries[key] = np.array([float(x) for x in parts[1:]])
        except ValueError:
            continue  # non-numeric line, e.g. comments
    return entries


def load_calibration(raw_text: str, image_size: tuple[int, int] | None = None) -> CameraCalibration:
    """Parse a KITTI-style calibration file into a :class:`CameraCalibration`.

    Expects whitespace-separated ``KEY: v1 v2 ...`` lines holding the camera-2
    projection matrix, the rectifying rotation and the LiDAR->camera transform.
    """
    entries = _parse_calib_lines(raw_text)

    def lookup(role: str, n_values: int) -> np.ndarray:
        for alias in _CALIB_ALIASES[role]:
            if alias in entries:
                vals = entries[alias]
                if vals.size != n_values:
                    raise CalibrationParseError(
                        f"calibration key {alias}: expected {n_values} values, got {vals.size}"
                    )
                return vals
        raise CalibrationParseError(
            f"calibration is missing required key {_CALIB_ALIASES[role][0]}"
        )

    proj = lookup("P2", 12).reshape(3, 4)
    tr = lookup("lidar_to_cam", 12).reshape(3, 4)
    fx, fy = proj[0, 0], proj[1, 1]
    cx, cy = proj[0, 2], proj[1, 2]
    if fx <= 0 or fy <= 0:
        raise CalibrationParseError(f"projection matrix has non-positive focal ({fx}, {fy})")
    intrinsics = np.array([[fx, 0, cx], [0, fy, cy], [0, 0, 1.0]])
    cam_offset = np.linalg.solve(intrinsics, proj[:, 3])

    rect = None
    for alias in _CALIB_ALIASES["rect"]:
        if alias in entries:
            vals = entries[alias]
            if vals.size != 9:
                raise CalibrationParseError(
                    f"calibration key {alias}: expected 9 values, got {vals.size}"
                )
            rect = _check_rotation(vals.reshape(3, 3), alias, PARSED_ROTATION_TOL)
            break

    calib = CameraCalibration(
        fx=float(fx),
        fy=float(fy),
        cx=float(cx),
        cy=float(cy),
        lidar_to_cam=RigidTransform(tr[:, :3], tr[:, 3], tol=PARSED_ROTATION_TOL),
        rect=rect,
        cam_offset=cam_offset,
        tol=PARSED_ROTATION_TOL,
    )
    if image_size is not None:
        calib = calib.with_image_size(*image_size)
    return calib


def load_lidar_points(source) -> np.ndarray:
    """Read a KITTI velodyne ``.bin`` (little-endian float32 x,y,z,reflectance).

    Accepts a path or raw bytes; returns (N, 3) float64 points, reflectance dropped.
    """
    if isinstance(source, (bytes, bytearray)):
        raw = np.frombuffer(source, dtype="<f4")
    else:
        raw = np.fromfile(source, dtype="<f4")
    if raw.size % 4 != 0:
        raise ValidationError(f"LiDAR buffer length {raw.size} is not a multiple of 4")
    return raw.reshape(-1, 4)[:, :3].astype(np.float64)


def project_points(cloud: np.ndarray, calib: CameraCalibration) -> np.ndarray:
    """Project LiDAR-frame points into the image.

    Returns an (M, 3) array of (u, v, z): pixel coordinates and camera-frame
    depth, keeping only points in front of the camera and inside image bounds.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cloud.size == 0:
        return np.zeros((0, 3))
    cam = calib.lidar_to_rect(cloud)
    z = cam[:, 2]
    front = z > 0
    cam = cam[front]
    z = z[front]
    u = calib.fx * cam[:, 0] / z + calib.cx
    v = calib.fy * cam[:, 1] / z + calib.cy
    w, h = calib.image_size
    inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
    return np.column_stack([u[inside], v[inside], z[inside]])


def render_depth_map(cloud: np.ndarray, calib: CameraCalibration, scale: int) -> SparseDepthMap:
    """Rasterize projected points into an R-times downscaled depth grid.

    Each point writes its depth into cell (floor(v/R), floor(u/R)); when
    several points land in one cell the nearest return wins (min-z buffer).
    """
    if scale < 1 or int(scale) != scale:
        raise ValidationError(f"downscale factor must be a positive integer, got {scale}")
    scale = int(scale)
    grid_shape = SparseDepthMap.grid_shape(calib.image_size, scale)
    uvz = project_points(cloud, calib)
    depth = SparseDepthMap.empty(grid_shape, scale)
    if uvz.shape[0] == 0:
        return depth
    rows = np.floor(uvz[:, 1] / scale).astype(int)
    cols = np.floor(uvz[:, 0] / scale).astype(int)
    buf = np.full(grid_shape, np.inf)
    np.minimum.at(buf, (rows, cols), uvz[:, 2])
    hit = np.isfinite(buf)
    depth.values[hit] = buf[hit]
    depth.valid = hit
    return depth


def lift_pixel(u: float, v: float, z: float, calib: CameraCalibration) -> np.ndarray:
    """Invert the pinhole projection: pixel (u, v) at depth z -> camera-frame point."""
    if z <= 0:
        raise ValidationError(f"cannot lift pixel with non-positive depth {z}")
    return np.array([(u - calib.cx) * z / calib.fx, (v - calib.cy) * z / calib.fy, z])


def ego_to_world(
    point_cam: np.ndarray,
    ego: EgoPose,
    cam_to_ego: RigidTransform | None = None,
) -> tuple[float, float]:
    """Convert a camera-frame point to geodetic (latitude, longitude).

    The point is moved to the ego ground frame (default mount: camera looking
    forward with no offset), rotated by the ego yaw into East-North meters and
    converted to degrees on a local tangent plane anchored at the ego pose.
    """
    point_cam = np.asarray(point_cam, dtype=np.float64).reshape(3)
    if cam_to_ego is None:
        p_ego = CAMERA_TO_EGO_AXES @ point_cam
    else:
        p_ego = cam_to_ego.apply(point_cam)
    forward, left = p_ego[0], p_ego[1]
    cos_y, sin_y = np.cos(ego.yaw), np.sin(ego.yaw)
    east = forward * cos_y - left * sin_y
    north = forward * sin_y + left * cos_y
    lat = ego.latitude + north / METERS_PER_DEGREE
    lon = ego.longitude + east / (METERS_PER_DEGREE * np.cos(np.radians(ego.latitude)))
    return float(lat), float(lon)

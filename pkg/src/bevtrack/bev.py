"""Bird's-eye-view trajectory extraction and export.

Tracked 2.5D states (image center + depth) are lifted to camera-frame 3D,
moved into the ego ground frame and anchored at the per-frame GPS pose,
yielding one geodetic trajectory per actor plus the ego's own path. Exports
are map-viewer-ready CSV or GeoJSON.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ExportError, ValidationError
from .geometry import CameraCalibration, EgoPose, RigidTransform, ego_to_world, lift_pixel
from .tracker import Track
from .utils import atomic_write_text

EGO_ACTOR_ID = "ego"


@dataclass
class BevSample:
    frame_index: int
    latitude: float
    longitude: float
    range_m: float
    confidence: float


@dataclass
class BevTrajectory:
    """Time-ordered world-frame positions of one actor."""

    actor_id: str
    samples: list[BevSample] = field(default_factory=list)

    def __post_init__(self):
        frames = [s.frame_index for s in self.samples]
        if any(b <= a for a, b in zip(frames, frames[1:])):
            raise ValidationError(f"trajectory {self.actor_id}: frame indices must increase")
        if self.actor_id == EGO_ACTOR_ID and any(s.confidence != 1.0 for s in self.samples):
            raise ValidationError("ego trajectory must have confidence 1")


def extract_bev(
    tracks: list[Track],
    ego_poses,
    calib: CameraCalibration,
    cam_to_ego: RigidTransform | None = None,
    smoothed_depths: dict[int, np.ndarray] | None = None,
) -> tuple[list[BevTrajectory], int]:
    """Fuse tracks with ego poses into geodetic trajectories.

    `ego_poses` maps frame index to :class:`EgoPose` (list or dict);
    `smoothed_depths` optionally overrides each track's depth series (same
    length as its states). Returns (trajectories, skipped state count); the
    ego's own trajectory comes straight from the poses. Raises
    :class:`ExportError` when no pose is available at all.
    """
    if isinstance(ego_poses, dict):
        pose_at = ego_poses.get
        have_poses = len(ego_poses) > 0
    else:
        poses = list(ego_poses)
        have_poses = len(poses) > 0

        def pose_at(i):
            return poses[i] if 0 <= i < len(poses) else None

    if not have_poses:
        raise ExportError("no ego poses available; world-frame export impossible")

    trajectories = []
    skipped = 0
    for track in sorted(tracks, key=lambda t: t.id):
        depths = (smoothed_depths or {}).get(track.id)
        samples = []
        for i, obs in enumerate(track.states):
            depth = float(depths[i]) if depths is not None else obs.depth
            pose = pose_at(obs.frame_index)
            if pose is None or depth is None or not np.isfinite(depth) or depth <= 0:
                skipped += 1
                continue
            point = lift_pixel(obs.center[0], obs.center[1], depth, calib)
            lat, lon = ego_to_world(point, pose, cam_to_ego)
            samples.append(BevSample(obs.frame_index, lat, lon, depth, obs.confidence))
        if samples:
            trajectories.append(BevTrajectory(str(track.id), samples))

    ego_samples = []
    items = sorted(ego_poses.items()) if isinstance(ego_poses, dict) \
        else list(enumerate(ego_poses))
    for frame_index, pose in items:
        if pose is None:
            continue
        ego_samples.append(BevSample(frame_index, pose.latitude, pose.longitude, 0.0, 1.0))
    if ego_samples:
        trajectories.append(BevTrajectory(EGO_ACTOR_ID, ego_samples))
    return trajectories, skipped


CSV_COLUMNS = ("actor_id", "frame", "lat", "lon", "range_m", "confidence")


def export_trajectories(trajectories: list[BevTrajectory], fmt: str, path) -> None:
    """Write trajectories as `csv` or `geojson`; numeric fields roundtrip exactly."""
    if not trajectories:
        raise ExportError("no trajectories to export")
    if fmt == "csv":
        text = trajectories_to_csv(trajectories)
    elif fmt == "geojson":
        text = json.dumps(trajectories_to_geojson(trajectories), indent=2) + "\n"
    else:
        raise ExportError(f"unknown export format {fmt!r} (expected csv or geojson)")
    atomic_write_text(path, text)


def trajectories_to_csv(trajectories: list[BevTrajectory]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(CSV_COLUMNS)
    for traj in trajectories:
        for s in traj.samples:
            writer.writerow(
                [traj.actor_id, s.frame_index, repr(float(s.latitude)),
                 repr(float(s.longitude)), repr(float(s.range_m)),
                 repr(float(s.confidence))]
            )
    return buf.getvalue()


def trajectories_from_csv(text: str) -> list[BevTrajectory]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != CSV_COLUMNS:
        raise ValidationError(f"unexpected CSV header {header}")
    by_actor: dict[str, list[BevSample]] = {}
    for row in reader:
        if not row:
            continue
        actor, frame, lat, lon, rng, conf = row
        by_actor.setdefault(actor, []).append(
            BevSample(int(frame), float(lat), float(lon), float(rng), float(conf))
        )
    return [BevTrajectory(actor, samples) for actor, samples in by_actor.items()]


def trajectories_to_geojson(trajectories: list[BevTrajectory]) -> dict:
    """One LineString (or Point, for single samples) feature per actor."""
    features = []
    for traj in trajectories:
        coords = [[float(s.longitude), float(s.latitude)] for s in traj.samples]
        geometry = (
            {"type": "Point", "coordinates": coords[0]}
            if len(coords) == 1
            else {"type": "LineString", "coordinates": coords}
        )
        features.append(
            {
                "type": "Feature",
                "geometry": geometry,
                "properties": {
                    "actor_id": traj.actor_id,
                    "frames": [s.frame_index for s in traj.samples],
                    "ranges_m": [float(s.range_m) for s in traj.samples],
                    "confidences": [float(s.confidence) for s in traj.samples],
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def trajectories_from_geojson(payload: dict) -> list[BevTrajectory]:
    trajectories = []
    for feature in payload["features"]:
        props = feature["properties"]
        geom = feature["geometry"]
        coords = [geom["coordinates"]] if geom["type"] == "Point" else geom["coordinates"]
        samples = [
            BevSample(frame, latitude=c[1], longitude=c[0], range_m=rng, confidence=conf)
            for frame, c, rng, conf in zip(
                props["frames"], coords, props["ranges_m"], props["confidences"]
            )
        ]
        trajectories.append(BevTrajectory(props["actor_id"], samples))
    return trajectories


def plot_bev(trajectories: list[BevTrajectory], out_path) -> None:
    """Render trajectories as a static BEV figure; dot opacity fades with age."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not trajectories:
        raise ExportError("no trajectories to plot")
    fig, ax = plt.subplots(figsize=(7, 7))
    cmap = plt.get_cmap("tab10")
    max_frame = max(s.frame_index for t in trajectories for s in t.samples)
    for i, traj in enumerate(trajectories):
        color = "red" if traj.actor_id == EGO_ACTOR_ID else cmap(i % 10)
        lons = [s.longitude for s in traj.samples]
        lats = [s.latitude for s in traj.samples]
        ages = [1.0 - 0.75 * (max_frame - s.frame_index) / max(1, max_frame)
                for s in traj.samples]
        ax.plot(lons, lats, "-", color=color, linewidth=0.8, alpha=0.5)
        for lon, lat, age in zip(lons, lats, ages):
            ax.plot(lon, lat, "o", color=color, markersize=4, alpha=age)
        ax.annotate(traj.actor_id, (lons[-1], lats[-1]), fontsize=8, color=color)
    ax.set_xlabel("longitude [deg]")
    ax.set_ylabel("latitude [deg]")
    ax.set_title("BEV trajectories")
    ax.ticklabel_format(useOffset=False, style="plain")
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)

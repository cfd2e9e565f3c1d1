"""Tracking conditioned on detection: greedy association of detections to
tracks through predicted 3D displacements, birth/death management, and
median smoothing of per-track depth against occlusion outliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import Detection
from .errors import SequencingError, ValidationError


@dataclass(frozen=True)
class TrackerConfig:
    """Gates and lifecycle settings.

    `gate_2d` multiplies the track's larger half-extent to bound the planar
    distance between a motion-compensated detection and the track;
    `gate_depth` bounds their depth difference in meters. `use_depth_cost`
    folds the depth term into the match cost as well (both terms normalized
    by their gate); when off, depth only gates.
    """

    detection_threshold: float = 0.3
    max_age: int = 2
    gate_2d: float = 1.0
    gate_depth: float = 2.0
    depth_smooth_window: int = 5
    downscale: int = 4
    use_depth_cost: bool = True

    def __post_init__(self):
        if self.max_age < 0:
            raise ValidationError(f"max_age must be >= 0, got {self.max_age}")
        if self.gate_2d <= 0 or self.gate_depth <= 0:
            raise ValidationError("gates must be positive")
        if self.depth_smooth_window < 1 or self.depth_smooth_window % 2 == 0:
            raise ValidationError(
                f"depth_smooth_window must be odd and >= 1, got {self.depth_smooth_window}"
            )


@dataclass
class TrackObservation:
    """One per-frame state of a track."""

    frame_index: int
    center: np.ndarray
    half_extents: np.ndarray
    depth: float | None
    confidence: float
    class_id: int


@dataclass
class Track:
    """A persistent identity with its time-ordered 2.5D states."""

    id: int
    states: list[TrackObservation] = field(default_factory=list)
    age: int = 0
    missed: int = 0
    active: bool = True

    @property
    def last(self) -> TrackObservation:
        return self.states[-1]

    # Detection-like view of the last state, so prior-map rendering can
    # consume tracks directly.
    @property
    def center(self) -> np.ndarray:
        return self.last.center

    @property
    def half_extents(self) -> np.ndarray:
        return self.last.half_extents

    @property
    def depth(self) -> float | None:
        return self.last.depth

    @property
    def confidence(self) -> float:
        return self.last.confidence

    @property
    def class_id(self) -> int:
        return self.last.class_id

    def depth_series(self) -> np.ndarray:
        return np.array([s.depth if s.depth is not None else np.nan for s in self.states])


@dataclass
class TrackerState:
    """All live and finished tracks of one sequence."""

    tracks: list[Track] = field(default_factory=list)
    finished: list[Track] = field(default_factory=list)
    next_id: int = 1
    last_frame: int | None = None

    @property
    def active_tracks(self) -> list[Track]:
        return [t for t in self.tracks if t.active]

    def all_tracks(self) -> list[Track]:
        return self.finished + self.tracks


def _compensated(det: Detection, downscale: int) -> tuple[np.ndarray, float | None]:
    """Project the detection back to where it should have been last frame."""
    center = det.center + det.displacement[:2] * downscale
    depth = None if det.depth is None else det.depth + det.displacement[2]
    return center, depth


def associate(
    detections: list[Detection],
    tracks: list[Track],
    config: TrackerConfig = TrackerConfig(),
) -> tuple[list[tuple[int, Track]], list[int], list[Track]]:
    """Greedy confidence-ordered matching of detections to tracks.

    Each detection, motion-compensated by its predicted displacement, grabs
    the lowest-cost unclaimed track of its class within both gates. Returns
    (matches as (detection index, track), unmatched detection indices,
    unmatched tracks).
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    claimed: set[int] = set()
    matches: list[tuple[int, Track]] = []
    unmatched_dets: list[int] = []

    for det_idx in order:
        det = detections[det_idx]
        center, depth = _compensated(det, config.downscale)
        best, best_cost = None, np.inf
        for track in tracks:
            if not track.active or id(track) in claimed or track.class_id != det.class_id:
                continue
            last = track.last
            planar_gate = config.gate_2d * float(np.max(last.half_extents))
            planar = float(np.hypot(*(center - last.center)))
            if planar > planar_gate:
                continue
            if depth is not None and last.depth is not None:
                depth_err = abs(depth - last.depth)
                if depth_err > config.gate_depth:
                    continue
            else:
                depth_err = 0.0
            cost = planar / planar_gate if planar_gate > 0 else 0.0
            if config.use_depth_cost:
                cost += depth_err / config.gate_depth
            if cost < best_cost - 1e-12 or (abs(cost - best_cost) <= 1e-12
                                            and best is not None and track.id < best.id):
                best, best_cost = track, cost
        if best is None:
            unmatched_dets.append(det_idx)
        else:
            claimed.add(id(best))
            matches.append((det_idx, best))

    matched_tracks = {id(t) for _, t in matches}
    unmatched_tracks = [t for t in tracks if t.active and id(t) not in matched_tracks]
    return matches, unmatched_dets, unmatched_tracks


def step(
    state: TrackerState,
    detections: list[Detection],
    frame_index: int,
    config: TrackerConfig = TrackerConfig(),
) -> tuple[TrackerState, list[Track]]:
    """Advance the tracker by one frame.

    Matched tracks extend and reset their miss counter; unmatched tracks age
    out after `max_age` consecutive misses; confident unmatched detections
    spawn fresh, never-reused ids. Detections get their `label` set in place.
    """
    if state.last_frame is not None and frame_index <= state.last_frame:
        raise SequencingError(
            f"frame {frame_index} is not after last processed frame {state.last_frame}"
        )
    dets = [d for d in detections if d.confidence >= config.detection_threshold]
    matches, unmatched_dets, unmatched_tracks = associate(dets, state.active_tracks, config)

    for det_idx, track in matches:
        det = dets[det_idx]
        det.label = track.id
        track.states.append(
            TrackObservation(frame_index, det.center.copy(), det.half_extents.copy(),
                             det.depth, det.confidence, det.class_id)
        )
        track.missed = 0

    for track in unmatched_tracks:
        track.missed += 1
        if track.missed > config.max_age:
            track.active = False

    for det_idx in unmatched_dets:
        det = dets[det_idx]
        det.label = state.next_id
        track = Track(
            id=state.next_id,
            states=[TrackObservation(frame_index, det.center.copy(), det.half_extents.copy(),
                                     det.depth, det.confidence, det.class_id)],
        )
        state.next_id += 1
        state.tracks.append(track)

    for track in state.tracks:
        track.age += 1
    still, done = [], []
    for track in state.tracks:
        (still if track.active else done).append(track)
    state.tracks = still
    state.finished.extend(done)
    state.last_frame = frame_index
    return state, list(state.active_tracks)


def smooth_depth(track_or_series, window: int) -> np.ndarray:
    """Sliding-median filter over a depth series.

    Edge windows shrink symmetrically (always odd-length), which keeps the
    filter idempotent on monotone series and its output inside the input's
    range. Accepts a :class:`Track` or a plain 1-D sequence; missing depths
    (NaN) are skipped inside each window.
    """
    if window < 1 or window % 2 == 0:
        raise ValidationError(f"window must be odd and >= 1, got {window}")
    series = track_or_series.depth_series() if isinstance(track_or_series, Track) \
        else np.asarray(track_or_series, dtype=np.float64)
    if window == 1 or series.size <= 1:
        return series.copy()
    out = np.empty_like(series)
    n = series.size
    for i in range(n):
        half = min(window // 2, i, n - 1 - i)
        chunk = series[i - half:i + half + 1]
        finite = chunk[np.isfinite(chunk)]
        out[i] = np.median(finite) if finite.size else series[i]
    return out


TRACK_EXPORT_HEADER = "# sequence frame id class x1 y1 x2 y2 depth confidence"


def format_track_records(sequence_id: int, tracks: list[Track],
                         smooth_window: int | None = None) -> list[str]:
    """Serialize finished tracks as one whitespace-separated line per state."""
    lines = []
    for track in sorted(tracks, key=lambda t: t.id):
        depths = (smooth_depth(track, smooth_window) if smooth_window
                  else track.depth_series())
        for obs, depth in zip(track.states, depths):
            x1, y1 = obs.center - obs.half_extents
            x2, y2 = obs.center + obs.half_extents
            d = depth if np.isfinite(depth) else -1.0
            lines.append(
                f"{sequence_id} {obs.frame_index} {track.id} {obs.class_id} "
                f"{x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f} {d:.6f} {obs.confidence:.6f}"
            )
    lines.sort(key=lambda ln: (int(ln.split()[1]), int(ln.split()[2])))
    return lines


def parse_track_records(text: str):
    """Parse the export format back into per-(sequence, frame) observations.

    Yields tuples (sequence, frame, track_id, class_id, box, depth, confidence).
    """
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 10:
            raise ValidationError(f"track record has {len(parts)} columns, expected 10")
        seq, frame, tid, cls = int(parts[0]), int(parts[1]), int(parts[2]), int(parts[3])
        box = np.array([float(parts[4]), float(parts[5]), float(parts[6]), float(parts[7])])
        depth = float(parts[8])
        yield seq, frame, tid, cls, box, (None if depth <= 0 else depth), float(parts[9])

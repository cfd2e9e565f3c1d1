import numpy as np
import pytest
from hypothesis import given, strategies as st

from bevtrack.codec import (
    Detection,
    decode_detections,
    encode_targets,
    gaussian_radius,
    object_depth,
    render_prior_map,
    splat_gaussian,
)
from bevtrack.errors import ValidationError
from bevtrack.geometry import SparseDepthMap

from conftest import FrameStub, make_box


def box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def brute_force_radius(width, height, min_overlap):
    """Largest integer corner shift keeping IoU >= min_overlap in all three
    shift scenarios (translate, both corners out, both corners in)."""
    base = (0.0, 0.0, width, height)
    r = 0
    while True:
        s = r + 1
        translated = (s, s, width + s, height + s)
        grown = (-s, -s, width + s, height + s)
        shrunk = (s, s, width - s, height - s)
        if shrunk[2] <= shrunk[0] or shrunk[3] <= shrunk[1]:
            return r
        ious = [box_iou(base, translated), box_iou(base, grown), box_iou(base, shrunk)]
        if min(ious) < min_overlap:
            return r
        r = s


def full_depth(grid, scale, value=10.0):
    values = np.full(grid, value)
    return SparseDepthMap(values, np.ones(grid, dtype=bool), scale)


class TestGaussianRadius:
    def test_tiny_box_floors_at_one(self):
        assert gaussian_radius((0.2, 0.2), 0.7) == 1

    def test_monotone_in_box_size(self):
        last = 0
        for half in [1, 2, 4, 8, 16, 32, 64]:
            r = gaussian_radius((half, half), 0.7)
            assert r >= last
            last = r

    def test_matches_brute_force_oracle(self):
        # 96x96-pixel box at R=4 -> 24x24 cells, and a spread of other sizes.
        for half_w, half_h in [(12, 12), (6, 6), (24, 24), (40, 20), (10, 30), (60, 60)]:
            expected = brute_force_radius(2 * half_w, 2 * half_h, 0.7)
            assert gaussian_radius((half_w, half_h), 0.7) == max(1, expected), \
                f"half extents {(half_w, half_h)}"

    def test_invalid_extents_rejected(self):
        with pytest.raises(ValidationError):
            gaussian_radius((0.0, 4.0), 0.7)


class TestEncode:
    def test_center_on_cell_corner_peaks_at_one(self):
        frame = FrameStub([make_box(96, 96, 104, 104)])  # center (100, 100)
        tm = encode_targets(frame, frame, full_depth((64, 128), 4), 4, 2)
        assert tm.heatmap[25, 25, 0] == 1.0
        assert tm.center_mask[25, 25]

    def test_worked_example(self):
        # Box (100, 100, 200, 180): center (150, 140), cell (col 37, row 35),
        # half-extents (50, 40), sub-cell offset (0.5, 0.0).
        frame = FrameStub([make_box(100, 100, 200, 180)])
        tm = encode_targets(frame, frame, full_depth((64, 128), 4), 4, 2)
        assert tm.center_mask[35, 37]
        assert tm.heatmap[35, 37, 0] == 1.0
        assert tuple(tm.size[35, 37]) == (50.0, 40.0)
        assert tm.subpixel_offset[35, 37] == pytest.approx([0.5, 0.0])

    def test_static_object_zero_displacement(self):
        frame_t = FrameStub([make_box(100, 100, 200, 180, track_id=9)])
        frame_p = FrameStub([make_box(100, 100, 200, 180, track_id=9)])
        depth = full_depth((64, 128), 4)
        tm = encode_targets(frame_t, frame_p, depth, 4, 2, depth_prev=depth)
        assert tm.displacement_mask[35, 37]
        assert tm.displacement[35, 37] == pytest.approx([0.0, 0.0, 0.0])

    def test_moving_object_displacement_points_to_previous(self):
        frame_t = FrameStub([make_box(108, 100, 208, 180, track_id=9)])   # center 158,140
        frame_p = FrameStub([make_box(100, 104, 200, 184, track_id=9)])   # center 150,144
        d_t = full_depth((64, 128), 4, 12.0)
        d_p = full_depth((64, 128), 4, 14.0)
        tm = encode_targets(frame_t, frame_p, d_t, 4, 2, depth_prev=d_p)
        row, col = 35, int(158 // 4)
        assert tm.displacement_mask[row, col]
        assert tm.displacement[row, col] == pytest.approx([-2.0, 1.0, 2.0])

    def test_displacement_antisymmetry(self):
        box_a = make_box(108, 100, 208, 180, track_id=9)
        box_b = make_box(100, 104, 200, 184, track_id=9)
        d_a = full_depth((64, 128), 4, 12.0)
        d_b = full_depth((64, 128), 4, 14.0)
        fwd = encode_targets(FrameStub([box_a]), FrameStub([box_b]), d_a, 4, 2, depth_prev=d_b)
        rev = encode_targets(FrameStub([box_b]), FrameStub([box_a]), d_b, 4, 2, depth_prev=d_a)
        disp_fwd = fwd.displacement[fwd.displacement_mask]
        disp_rev = rev.displacement[rev.displacement_mask]
        assert disp_fwd == pytest.approx(-disp_rev)

    def test_object_without_depth_excluded_from_displacement(self):
        grid = (64, 128)
        depth = SparseDepthMap.empty(grid, 4)  # no returns anywhere
        frame_t = FrameStub([make_box(100, 100, 200, 180, track_id=9)])
        frame_p = FrameStub([make_box(104, 100, 204, 180, track_id=9)])
        tm = encode_targets(frame_t, frame_p, depth, 4, 2, depth_prev=depth)
        assert tm.center_mask[35, 37]           # still supervised for size/offset
        assert not tm.displacement_mask.any()   # but not for displacement

    def test_center_outside_grid_skipped_with_count(self):
        frame = FrameStub([make_box(500, 250, 520, 260)], image_size=(512, 256))
        # center (510, 255) -> cell (63, 127) valid; use a box beyond bounds instead
        frame_off = FrameStub([make_box(509, 250, 530, 270)], image_size=(512, 256))
        tm = encode_targets(frame_off, frame_off, full_depth((64, 128), 4), 4, 2)
        # center (519.5, 260) -> row 65 outside the 64-row grid
        assert tm.skipped_objects == 1
        assert not tm.center_mask.any()

    def test_gaussian_peak_is_strict_local_max(self):
        boxes = [make_box(100, 100, 160, 140, track_id=1),
                 make_box(300, 100, 380, 160, class_id=1, track_id=2)]
        frame = FrameStub(boxes)
        tm = encode_targets(frame, frame, full_depth((64, 128), 4), 4, 2)
        for ann in boxes:
            cu, cv = ann.center
            row, col = int(cv // 4), int(cu // 4)
            patch = tm.heatmap[row - 1:row + 2, col - 1:col + 2, ann.class_id]
            center_val = patch[1, 1]
            others = np.delete(patch.ravel(), 4)
            assert center_val == 1.0
            assert np.all(others < center_val)

    def test_overlapping_gaussians_max_blend_stays_in_range(self):
        boxes = [make_box(100, 100, 180, 160, track_id=1),
                 make_box(120, 104, 200, 164, track_id=2)]
        frame = FrameStub(boxes)
        tm = encode_targets(frame, frame, full_depth((64, 128), 4), 4, 2)
        assert tm.heatmap.max() == 1.0
        assert tm.heatmap.min() >= 0.0


class TestDecode:
    def test_all_zero_heatmap_empty(self):
        grid = (64, 128)
        dets = decode_detections(
            np.zeros(grid + (2,)), np.zeros(grid + (2,)), np.zeros(grid + (2,)),
            np.ones(grid + (1,)), threshold=0.3,
        )
        assert dets == []

    def test_roundtrip_single_box(self):
        frame = FrameStub([make_box(101, 97, 163, 141, class_id=1, track_id=4)])
        tm = encode_targets(frame, frame, full_depth((64, 128), 4, 17.0), 4, 2)
        dets = decode_detections(
            tm.heatmap, tm.size, tm.subpixel_offset, tm.depth.values[..., None],
            threshold=0.3, scale=4,
        )
        assert len(dets) == 1
        det = dets[0]
        assert det.class_id == 1
        assert det.confidence == 1.0
        assert det.center == pytest.approx([132.0, 119.0], abs=1e-9)
        assert det.half_extents == pytest.approx([31.0, 22.0])
        assert det.depth == pytest.approx(17.0)

    def test_two_equal_peaks_tie_broken_by_position(self):
        grid = (16, 16)
        heat = np.zeros(grid + (1,))
        heat[4, 4, 0] = 0.9
        heat[10, 10, 0] = 0.9
        dets = decode_detections(
            heat, np.ones(grid + (2,)), np.zeros(grid + (2,)), np.ones(grid + (1,)),
            threshold=0.3, max_detections=1,
        )
        assert len(dets) == 1
        assert dets[0].center == pytest.approx([16.0, 16.0])  # cell (4, 4) wins

    def test_displacement_sampled_at_peaks(self):
        grid = (16, 16)
        heat = np.zeros(grid + (1,))
        heat[4, 4, 0] = 0.9
        disp = np.zeros(grid + (3,))
        disp[4, 4] = (1.5, -0.5, 2.0)
        dets = decode_detections(
            heat, np.ones(grid + (2,)), np.zeros(grid + (2,)), np.ones(grid + (1,)),
            threshold=0.3, pred_displacement=disp,
        )
        assert dets[0].displacement == pytest.approx([1.5, -0.5, 2.0])

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            decode_detections(
                np.zeros((8, 8, 1)), np.zeros((8, 9, 2)), np.zeros((8, 8, 2)),
                np.ones((8, 8, 1)),
            )


def random_separated_scene(rng, num_boxes, grid=(64, 128), scale=4, num_classes=2):
    """Boxes whose center cells are far enough apart for unique peaks."""
    placed = []
    attempts = 0
    while len(placed) < num_boxes and attempts < 300:
        attempts += 1
        half_w = rng.uniform(8, 40)
        half_h = rng.uniform(8, 30)
        cu = rng.uniform(half_w + 1, grid[1] * scale - half_w - 1)
        cv = rng.uniform(half_h + 1, grid[0] * scale - half_h - 1)
        radius = gaussian_radius((half_w / scale, half_h / scale), 0.7)
        ok = True
        for other in placed:
            dist = np.hypot(cu - other["cu"], cv - other["cv"]) / scale
            if dist < 2 * max(radius, other["radius"]) + 2:
                ok = False
                break
        if ok:
            placed.append({
                "cu": cu, "cv": cv, "half_w": half_w, "half_h": half_h,
                "radius": radius, "class_id": int(rng.integers(num_classes)),
            })
    boxes = [
        make_box(p["cu"] - p["half_w"], p["cv"] - p["half_h"],
                 p["cu"] + p["half_w"], p["cv"] + p["half_h"],
                 class_id=p["class_id"], track_id=i + 1)
        for i, p in enumerate(placed)
    ]
    return boxes


class TestEncodeDecodeConsistency:
    def test_multi_object_roundtrip(self, rng):
        for trial in range(20):
            boxes = random_separated_scene(rng, int(rng.integers(2, 7)))
            frame = FrameStub(boxes)
            tm = encode_targets(frame, frame, full_depth((64, 128), 4), 4, 2)
            dets = decode_detections(
                tm.heatmap, tm.size, tm.subpixel_offset, tm.depth.values[..., None],
                threshold=0.3, scale=4,
            )
            assert len(dets) == len(boxes)
            gt = {(round(b.center[0], 3), round(b.center[1], 3)) for b in boxes}
            for det in dets:
                cu, cv = det.center
                best = min(gt, key=lambda g: np.hypot(g[0] - cu, g[1] - cv))
                assert np.hypot(best[0] - cu, best[1] - cv) < 1.0


class TestPriorMap:
    def test_no_tracks_all_zero(self):
        heat, depth = render_prior_map([], (32, 32), 4)
        assert not heat.any() and not depth.any()

    def test_single_track_peak(self):
        trk = Detection(center=(64, 64), half_extents=(20, 12), confidence=1.0,
                        class_id=0, depth=9.0)
        heat, depth = render_prior_map([trk], (32, 32), 4)
        assert heat[16, 16] == 1.0
        assert depth[16, 16] == 9.0

    def test_confidence_scales_peak(self):
        trk = Detection(center=(64, 64), half_extents=(20, 12), confidence=0.5,
                        class_id=0, depth=9.0)
        heat, _ = render_prior_map([trk], (32, 32), 4)
        assert heat[16, 16] == pytest.approx(0.5)

    def test_overlapping_tracks_nearest_depth_wins(self):
        a = Detection(center=(64, 64), half_extents=(24, 16), confidence=1.0,
                      class_id=0, depth=5.0)
        b = Detection(center=(72, 64), half_extents=(24, 16), confidence=1.0,
                      class_id=0, depth=9.0)
        _, depth = render_prior_map([a, b], (32, 32), 4)
        overlap = (depth > 0)
        # Cells covered by both supports hold the nearer depth 5.
        _, depth_a = render_prior_map([a], (32, 32), 4)
        _, depth_b = render_prior_map([b], (32, 32), 4)
        both = (depth_a > 0) & (depth_b > 0)
        assert both.any()
        assert np.all(depth[both] == 5.0)
        assert np.all(depth[~overlap] == 0.0)


class TestObjectDepth:
    def test_center_cell_when_valid(self):
        depth = full_depth((32, 32), 4, 11.0)
        assert object_depth(depth, (40, 40, 80, 80), (15, 15)) == 11.0

    def test_nearest_valid_fallback(self):
        depth = SparseDepthMap.empty((32, 32), 4)
        depth.values[14, 17] = 8.0
        depth.valid[14, 17] = True
        assert object_depth(depth, (40, 40, 80, 80), (15, 15)) == 8.0

    def test_no_return_in_box_gives_none(self):
        depth = SparseDepthMap.empty((32, 32), 4)
        depth.values[0, 0] = 8.0
        depth.valid[0, 0] = True  # far outside the box
        assert object_depth(depth, (40, 40, 80, 80), (15, 15)) is None


@given(half=st.floats(0.5, 50.0), overlap=st.floats(0.2, 0.9))
def test_radius_always_at_least_one(half, overlap):
    assert gaussian_radius((half, half), overlap) >= 1


def test_splat_clips_at_borders():
    channel = np.zeros((8, 8))
    splat_gaussian(channel, (0, 0), 5)
    assert channel[0, 0] == 1.0
    assert channel.shape == (8, 8)

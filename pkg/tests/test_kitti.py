import numpy as np
import pytest
from PIL import Image

from bevtrack.errors import ConfigError, DatasetError, ValidationError
from bevtrack.geometry import SparseDepthMap
from bevtrack.kitti import (
    AugmentationConfig,
    BoxAnnotation2D,
    Frame,
    augment,
    index_dataset,
    load_frame_pair,
    split_train_val,
)

from conftest import make_box

CALIB_TEXT = (
    "P2: 120.0 0.0 64.0 0.0 0.0 120.0 48.0 0.0 0.0 0.0 1.0 0.0\n"
    "R_rect 1.0 0.0 0.0 0.0 1.0 0.0 0.0 0.0 1.0\n"
    "Tr_velo_cam 0.0 -1.0 0.0 0.0 0.0 0.0 -1.0 0.0 1.0 0.0 0.0 0.0\n"
)


def write_mini_sequence(root, seq_id, num_frames, labels_by_frame=None,
                        with_lidar=False, with_oxts=False, size=(64, 48)):
    """Hand-built miniature KITTI sequence."""
    seq = f"{seq_id:04d}"
    img_dir = root / "image_02" / seq
    img_dir.mkdir(parents=True, exist_ok=True)
    w, h = size
    for t in range(num_frames):
        arr = np.full((h, w, 3), 40 * (t + 1) % 255, dtype=np.uint8)
        Image.fromarray(arr).save(img_dir / f"{t:06d}.png")
    lines = []
    for frame, boxes in (labels_by_frame or {}).items():
        for tid, cls, box in boxes:
            name = ("Car", "Pedestrian")[cls]
            lines.append(
                f"{frame} {tid} {name} 0 0 0.0 {box[0]} {box[1]} {box[2]} {box[3]} "
                "1.5 1.6 3.0 0.0 0.0 10.0 0.0"
            )
    (root / "label_02").mkdir(exist_ok=True)
    (root / "label_02" / f"{seq}.txt").write_text("\n".join(lines) + "\n")
    (root / "calib").mkdir(exist_ok=True)
    (root / "calib" / f"{seq}.txt").write_text(CALIB_TEXT)
    if with_lidar:
        vel = root / "velodyne" / seq
        vel.mkdir(parents=True, exist_ok=True)
        pts = np.array([[10.0, 0.0, -1.0, 0.5]], dtype="<f4")
        for t in range(num_frames):
            (vel / f"{t:06d}.bin").write_bytes(pts.tobytes())
    if with_oxts:
        (root / "oxts").mkdir(exist_ok=True)
        rows = [f"49.0 8.4 110.0 0.0 0.0 1.5707963 0 0 0" for _ in range(num_frames)]
        (root / "oxts" / f"{seq}.txt").write_text("\n".join(rows) + "\n")


class TestIndexDataset:
    def test_empty_directory_rejected(self, tmp_path):
        with pytest.raises(DatasetError):
            index_dataset(tmp_path)

    def test_single_sequence_no_lidar(self, tmp_path):
        write_mini_sequence(tmp_path, 0, 3,
                            {0: [(1, 0, (10, 10, 30, 30))]})
        ds = index_dataset(tmp_path)
        assert list(ds) == [(0, 3)]
        info = ds.info(0)
        assert not info.has_lidar and not info.has_oxts

    def test_twenty_one_sequences(self, tmp_path):
        # The KITTI tracking training set's sequence count.
        for seq in range(21):
            write_mini_sequence(tmp_path, seq, 2, {0: [(1, 0, (10, 10, 30, 30))]})
        ds = index_dataset(tmp_path)
        assert len(ds) == 21
        assert [s.sequence_id for s in ds.sequences] == list(range(21))

    def test_label_frame_mismatch_names_sequence(self, tmp_path):
        write_mini_sequence(tmp_path, 7, 2, {5: [(1, 0, (10, 10, 30, 30))]})
        with pytest.raises(ValidationError, match="0007"):
            index_dataset(tmp_path)

    def test_missing_labels_fatal(self, tmp_path):
        write_mini_sequence(tmp_path, 0, 2)
        (tmp_path / "label_02" / "0000.txt").unlink()
        with pytest.raises(DatasetError, match="label"):
            index_dataset(tmp_path)

    def test_missing_calib_fatal(self, tmp_path):
        write_mini_sequence(tmp_path, 0, 2)
        (tmp_path / "calib" / "0000.txt").unlink()
        with pytest.raises(DatasetError, match="calib"):
            index_dataset(tmp_path)

    def test_lidar_and_oxts_flagged(self, tmp_path):
        write_mini_sequence(tmp_path, 0, 2, with_lidar=True, with_oxts=True)
        info = index_dataset(tmp_path).info(0)
        assert info.has_lidar and info.has_oxts


class TestSplit:
    def test_21_sequences_disjoint_cover(self):
        pairs = [(i, 100 + i) for i in range(21)]
        train, val = split_train_val(pairs, 0.5)
        assert sorted(train + val) == list(range(21))
        assert not (set(train) & set(val))
        total = sum(c for _, c in pairs)
        train_frames = sum(c for i, c in pairs if i in set(train))
        assert abs(train_frames - total / 2) <= max(c for _, c in pairs)

    def test_two_equal_sequences(self):
        train, val = split_train_val([(0, 10), (1, 10)], 0.5)
        assert train == [0] and val == [1]

    def test_deterministic(self):
        pairs = [(i, 7 * i + 3) for i in range(9)]
        assert split_train_val(pairs, 0.4) == split_train_val(list(pairs), 0.4)

    def test_both_sides_nonempty_with_skewed_counts(self):
        train, val = split_train_val([(0, 1), (1, 1000)], 0.5)
        assert train and val

    def test_too_few_sequences_rejected(self):
        with pytest.raises(DatasetError):
            split_train_val([(0, 5)], 0.5)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ConfigError):
            split_train_val([(0, 5), (1, 5)], 1.5)

    def test_accepts_dataset_index(self, synth_root):
        ds = index_dataset(synth_root)
        train, val = split_train_val(ds, 0.5)
        assert sorted(train + val) == [s.sequence_id for s in ds.sequences]


class TestFrameLoading:
    def test_t0_self_pairs(self, synth_root):
        ds = index_dataset(synth_root)
        frame_t, frame_prev = load_frame_pair(ds, 0, 0)
        assert frame_prev is frame_t
        assert frame_t.frame_index == 0

    def test_t5_pairs_with_t4(self, synth_root):
        ds = index_dataset(synth_root)
        frame_t, frame_prev = load_frame_pair(ds, 0, 5)
        assert frame_t.frame_index == 5
        assert frame_prev.frame_index == 4
        assert frame_t.calib is frame_prev.calib

    def test_out_of_range_rejected(self, synth_root):
        ds = index_dataset(synth_root)
        with pytest.raises(IndexError):
            load_frame_pair(ds, 0, 999)

    def test_track_ids_correspond_across_pair(self, tmp_path):
        labels = {
            0: [(1, 0, (10, 10, 30, 30)), (2, 1, (40, 10, 50, 30))],
            1: [(1, 0, (12, 10, 32, 30)), (2, 1, (41, 10, 51, 30))],
            2: [(1, 0, (14, 10, 34, 30))],
        }
        write_mini_sequence(tmp_path, 0, 3, labels)
        ds = index_dataset(tmp_path)
        frame_t, frame_prev = load_frame_pair(ds, 0, 1)
        ids_t = {a.track_id for a in frame_t.annotations}
        ids_p = {a.track_id for a in frame_prev.annotations}
        assert ids_t == ids_p == {1, 2}
        frame2, frame1 = load_frame_pair(ds, 0, 2)
        assert {a.track_id for a in frame2.annotations} == {1}

    def test_frame_loads_image_scaled_to_unit(self, synth_root):
        ds = index_dataset(synth_root)
        frame = ds.load_frame(0, 0)
        assert frame.image.dtype == np.float32
        assert 0.0 <= frame.image.min() and frame.image.max() <= 1.0

    def test_loader_totality(self, synth_root):
        ds = index_dataset(synth_root)
        for seq_id, count in ds:
            for t in range(count):
                frame = ds.load_frame(seq_id, t)
                assert frame.image.size > 0

    def test_duplicate_track_ids_rejected(self, toy_calib):
        boxes = [make_box(10, 10, 20, 20, track_id=5), make_box(30, 30, 40, 40, track_id=5)]
        with pytest.raises(ValidationError):
            Frame(image=np.zeros((96, 128, 3)), annotations=boxes, calib=toy_calib)


def paired_frames(toy_calib, boxes, size=(128, 96)):
    image = np.linspace(0, 1, size[0] * size[1] * 3, dtype=np.float32).reshape(
        (size[1], size[0], 3))
    frame = Frame(image=image, annotations=boxes, calib=toy_calib)
    return frame, frame


def checker_depth(grid=(24, 32), scale=4):
    depth = SparseDepthMap.empty(grid, scale)
    depth.values[::2, 1::3] = 9.0
    depth.valid[::2, 1::3] = True
    return depth


class TestAugment:
    def test_identity_config_returns_inputs(self, toy_calib):
        frame_t, frame_prev = paired_frames(toy_calib, [make_box(20, 20, 60, 60)])
        depth = checker_depth()
        out_t, out_prev, out_depth = augment((frame_t, frame_prev), depth,
                                             AugmentationConfig(seed=1))
        assert np.array_equal(out_t.image, frame_t.image)
        assert np.array_equal(out_depth.values, depth.values)
        assert np.array_equal(out_depth.valid, depth.valid)
        assert out_t.annotations[0].x1 == 20

    def test_forced_flip_mirrors_everything(self, toy_calib):
        box = make_box(20, 24, 60, 64)
        frame_t, frame_prev = paired_frames(toy_calib, [box])
        depth = checker_depth()
        config = AugmentationConfig(flip_probability=1.0, seed=3)
        out_t, _, out_depth = augment((frame_t, frame_prev), depth, config)
        w = 128
        ann = out_t.annotations[0]
        assert (ann.x1, ann.x2) == (w - 60, w - 20)
        assert (ann.y1, ann.y2) == (24, 64)
        assert np.allclose(out_t.image, frame_t.image[:, ::-1])
        # Depth cells mirror; values unchanged.
        assert np.array_equal(out_depth.valid, depth.valid[:, ::-1])
        assert np.array_equal(out_depth.values, depth.values[:, ::-1])

    def test_same_seed_bit_identical(self, toy_calib):
        frame_t, frame_prev = paired_frames(toy_calib, [make_box(20, 20, 60, 60)])
        depth = checker_depth()
        config = AugmentationConfig(
            flip_probability=0.5, scale_range=(0.8, 1.2), max_rotation_deg=5.0,
            max_translation_px=6.0, color_jitter=(0.2, 0.2, 0.2), seed=99,
        )
        a_t, a_p, a_d = augment((frame_t, frame_prev), depth, config)
        b_t, b_p, b_d = augment((frame_t, frame_prev), depth, config)
        assert np.array_equal(a_t.image, b_t.image)
        assert np.array_equal(a_d.values, b_d.values)
        assert [(x.x1, x.y1, x.x2, x.y2) for x in a_t.annotations] == \
               [(x.x1, x.y1, x.x2, x.y2) for x in b_t.annotations]

    def test_different_seed_differs(self, toy_calib):
        frame_t, frame_prev = paired_frames(toy_calib, [make_box(20, 20, 60, 60)])
        depth = checker_depth()
        config_a = AugmentationConfig(scale_range=(0.7, 1.3), seed=1)
        config_b = AugmentationConfig(scale_range=(0.7, 1.3), seed=2)
        a_t, _, _ = augment((frame_t, frame_prev), depth, config_a)
        b_t, _, _ = augment((frame_t, frame_prev), depth, config_b)
        assert not np.array_equal(a_t.image, b_t.image)

    def test_crop_larger_than_image_rejected(self, toy_calib):
        frame_t, frame_prev = paired_frames(toy_calib, [make_box(20, 20, 60, 60)])
        with pytest.raises(ConfigError):
            augment((frame_t, frame_prev), checker_depth(),
                    AugmentationConfig(crop_size=(256, 256), seed=0))

    def test_crop_changes_canvas_and_grid(self, toy_calib):
        frame_t, frame_prev = paired_frames(toy_calib, [make_box(20, 20, 60, 60)])
        config = AugmentationConfig(crop_size=(64, 48), seed=4)
        out_t, _, out_depth = augment((frame_t, frame_prev), checker_depth(), config)
        assert out_t.image.shape == (48, 64, 3)
        assert out_depth.values.shape == (12, 16)

    def test_depth_values_never_change_under_zoom(self, toy_calib):
        frame_t, frame_prev = paired_frames(toy_calib, [make_box(20, 20, 60, 60)])
        depth = checker_depth()
        config = AugmentationConfig(scale_range=(1.5, 1.5), seed=8)
        _, _, out_depth = augment((frame_t, frame_prev), depth, config)
        assert out_depth.valid.any()
        assert set(np.unique(out_depth.values[out_depth.valid])) <= \
               set(np.unique(depth.values[depth.valid]))

    def test_box_mask_consistency_under_integer_translation(self, toy_calib):
        # The valid cells inside the box must transport exactly with it.
        box = make_box(24, 24, 56, 56)
        frame_t, frame_prev = paired_frames(toy_calib, [box])
        depth = checker_depth()
        config = AugmentationConfig(max_translation_px=8.0, seed=12)
        # Draw the actual translation the seed produces.
        out_t, _, out_depth = augment((frame_t, frame_prev), depth, config)
        rng = np.random.default_rng(12)
        rng.random()  # flip draw
        rng.uniform(1.0, 1.0)  # scale draw
        tx = rng.uniform(-8, 8)
        ty = rng.uniform(-8, 8)
        ann = out_t.annotations[0]
        assert ann.x1 == pytest.approx(24 + tx)
        assert ann.y1 == pytest.approx(24 + ty)

        def cells_in(depth_map, b):
            sel = np.zeros_like(depth_map.valid)
            c0, r0 = int(b[0] // 4), int(b[1] // 4)
            c1, r1 = int(np.ceil(b[2] / 4)), int(np.ceil(b[3] / 4))
            sel[r0:r1, c0:c1] = True
            return depth_map.valid & sel

        before = cells_in(depth, (24, 24, 56, 56)).sum()
        after = cells_in(out_depth, (ann.x1, ann.y1, ann.x2, ann.y2)).sum()
        assert abs(int(before) - int(after)) <= 4  # cell-quantization slack

    def test_color_jitter_leaves_geometry(self, toy_calib):
        frame_t, frame_prev = paired_frames(toy_calib, [make_box(20, 20, 60, 60)])
        depth = checker_depth()
        config = AugmentationConfig(color_jitter=(0.3, 0.3, 0.3), seed=5)
        out_t, _, out_depth = augment((frame_t, frame_prev), depth, config)
        assert not np.array_equal(out_t.image, frame_t.image)
        ann = out_t.annotations[0]
        assert (ann.x1, ann.y1, ann.x2, ann.y2) == (20, 20, 60, 60)
        assert np.array_equal(out_depth.valid, depth.valid)

    def test_mismatched_pair_rejected(self, toy_calib):
        frame_a = Frame(image=np.zeros((96, 128, 3), dtype=np.float32),
                        annotations=[], calib=toy_calib)
        frame_b = Frame(image=np.zeros((48, 64, 3), dtype=np.float32),
                        annotations=[], calib=toy_calib)
        with pytest.raises(ValidationError):
            augment((frame_a, frame_b), checker_depth(), AugmentationConfig())


class TestBoxAnnotation:
    def test_degenerate_box_rejected(self):
        with pytest.raises(ValidationError):
            BoxAnnotation2D(10, 10, 10, 20, 0, 1)

    def test_center(self):
        assert make_box(10, 20, 30, 60).center == (20.0, 40.0)

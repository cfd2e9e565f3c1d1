"""Command-line pipeline: prepare, train, track, evaluate and export stages.

Every stage reads only on-disk artifacts of earlier stages, writes its
outputs atomically and drops a structured JSON log next to the main
artifact. Run ``bevtrack <stage> --help`` for flags; defaults live in
:mod:`bevtrack.config`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .bev import (
    export_trajectories,
    extract_bev,
    plot_bev,
    trajectories_from_csv,
    trajectories_from_geojson,
)
from .config import CONFIG_ENV_VAR, RunConfig
from .errors import BevtrackError, ConfigError, DatasetError
from .kitti import index_dataset, split_train_val
from .metrics import TrackedBox
from .tracker import TRACK_EXPORT_HEADER, Track, TrackObservation, format_track_records, \
    parse_track_records
from .training import load_checkpoint, save_checkpoint, train_model
from .utils import atomic_write_text, write_json


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"config file (default: ${CONFIG_ENV_VAR})")
    common.add_argument("--root", help="dataset root in KITTI tracking layout")
    common.add_argument("--sequences", help="comma-separated ids, or train/val/all (default all)")
    common.add_argument("--checkpoint", help="model checkpoint path")
    common.add_argument("--out", help="output artifact path")
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--format", choices=("csv", "geojson"),
                        help="trajectory export format (default csv)")
    common.add_argument("--depth-cap", type=float, dest="depth_cap",
                        help="max ground-truth depth in meters (default 80)")
    common.add_argument("--iou-threshold", type=float, dest="iou_threshold",
                        help="IoU threshold for MOT matching (default 0.5)")

    parser = argparse.ArgumentParser(
        prog="bevtrack",
        description="Monocular center-point detection + depth, tracking and BEV export",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common],
                   help="index a dataset and write the train/val split")
    p_train = sub.add_parser("train", parents=[common], help="train the toy model")
    p_train.add_argument("--steps", type=int, help="training steps (default 2000)")
    p_track = sub.add_parser("track", parents=[common],
                             help="run detection + tracking, write track records")
    p_track.add_argument("--oracle-detections", action="store_true", default=None,
                         help="use ground-truth boxes instead of the network")
    p_emot = sub.add_parser("evaluate-mot", parents=[common], help="score tracks with CLEAR-MOT")
    p_emot.add_argument("--tracks", help="track export file (default <root>/tracks.txt)")
    p_edep = sub.add_parser("evaluate-depth", parents=[common],
                            help="score depth with region breakdowns")
    p_edep.add_argument("--pred-depth", dest="pred_depth",
                        help="directory of <seq>/<frame>.npy depth grids instead of a checkpoint")
    p_bev = sub.add_parser("export-bev", parents=[common],
                           help="fuse tracks + ego poses into BEV trajectories")
    p_bev.add_argument("--tracks", help="track export file (default <root>/tracks.txt)")
    p_plot = sub.add_parser("plot-bev", parents=[common], help="plot exported trajectories")
    p_plot.add_argument("--trajectories", help="trajectory file from export-bev")
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {}
    for key in ("root", "sequences", "checkpoint", "out", "seed", "format",
                "depth_cap", "iou_threshold", "tracks", "trajectories", "pred_depth"):
        if hasattr(args, key) and getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    if getattr(args, "steps", None) is not None:
        overrides["train.steps"] = args.steps
    if getattr(args, "oracle_detections", None):
        overrides["oracle_detections"] = True
    return RunConfig.load(args.config, overrides)


def _split_path(root: Path) -> Path:
    return root / "split.json"


def _resolve_sequences(cfg: RunConfig, dataset) -> list[int]:
    spec = cfg.get("sequences", "all")
    all_ids = [s.sequence_id for s in dataset.sequences]
    if spec == "all":
        return all_ids
    if spec in ("train", "val"):
        split_file = _split_path(Path(cfg.require("root")))
        if not split_file.exists():
            raise ConfigError(
                f"sequences={spec!r} needs {split_file}; run `bevtrack prepare` first"
            )
        split = json.loads(split_file.read_text())
        ids = split[spec]
        missing = [i for i in ids if i not in all_ids]
        if missing:
            raise DatasetError(f"split references unknown sequences {missing}")
        return ids
    try:
        ids = [int(x) for x in spec.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"sequences: cannot parse {spec!r}") from exc
    for i in ids:
        dataset.info(i)
    return ids


def _log(stage: str, out_path, record: dict) -> None:
    record = {"stage": stage, **record}
    write_json(str(out_path) + ".log.json", record)
    brief = ", ".join(f"{k}={v}" for k, v in record.items() if not isinstance(v, (dict, list)))
    print(f"[{stage}] {brief}")


def cmd_prepare(cfg: RunConfig) -> int:
    root = Path(cfg.require("root"))
    dataset = index_dataset(root)
    train_ids, val_ids = split_train_val(dataset, cfg.get("split_ratio", 0.5))
    out = Path(cfg.get("out") or _split_path(root))
    payload = {
        "ratio": cfg.get("split_ratio", 0.5),
        "train": train_ids,
        "val": val_ids,
        "sequences": [
            {"id": s.sequence_id, "frames": s.frame_count,
             "lidar": s.has_lidar, "oxts": s.has_oxts}
            for s in dataset.sequences
        ],
    }
    write_json(out, payload)
    _log("prepare", out, {
        "root": str(root), "sequences": len(dataset.sequences),
        "train_sequences": len(train_ids), "val_sequences": len(val_ids),
        "out": str(out),
    })
    return 0


def cmd_train(cfg: RunConfig) -> int:
    root = Path(cfg.require("root"))
    dataset = index_dataset(root)
    if cfg.get("sequences") == "all" and _split_path(root).exists():
        cfg.values["sequences"] = "train"
    seq_ids = _resolve_sequences(cfg, dataset)
    if "model.input_width" not in cfg.values or "model.input_height" not in cfg.values:
        w, h = dataset.load_frame(seq_ids[0], 0).image_size
        cfg.values.setdefault("model.input_width", w)
        cfg.values.setdefault("model.input_height", h)
    model_config = cfg.model_config()
    train_config = cfg.train_config()

    samples = pipeline.build_training_samples(dataset, seq_ids, model_config)
    if not samples:
        raise DatasetError(f"no training samples in sequences {seq_ids}")

    loss_rows = []

    def log_fn(step, breakdown):
        print(f"  step {step:5d}  total {breakdown['total']:.4f}  "
              f"obj {breakdown['obj']:.4f}  disp {breakdown['disp']:.4f}  "
              f"depth {breakdown['depth']:.4f}  lr {breakdown['lr']:.2e}")

    state, history = train_model(samples, model_config, train_config, log_fn=log_fn)
    for i, row in enumerate(history, 1):
        loss_rows.append(f"{i},{row['obj']:.6f},{row['disp']:.6f},"
                         f"{row['depth']:.6f},{row['total']:.6f},{row['lr']:.6e}")

    out = Path(cfg.get("out") or root / "model.ckpt")
    save_checkpoint(out, state)
    atomic_write_text(str(out) + ".losses.csv",
                      "step,obj,disp,depth,total,lr\n" + "\n".join(loss_rows) + "\n")
    _log("train", out, {
        "sequences": seq_ids, "samples": len(samples), "steps": state.step,
        "initial_loss": history[0]["total"], "final_loss": history[-1]["total"],
        "out": str(out),
    })
    return 0


def cmd_track(cfg: RunConfig) -> int:
    root = Path(cfg.require("root"))
    dataset = index_dataset(root)
    seq_ids = _resolve_sequences(cfg, dataset)
    tracker_config = cfg.tracker_config()
    use_oracle = bool(cfg.get("oracle_detections", False))
    model = None
    if not use_oracle:
        ckpt = cfg.require("checkpoint")
        model = load_checkpoint(ckpt).model

    lines = [TRACK_EXPORT_HEADER]
    frames = detections = n_tracks = 0
    for seq_id in seq_ids:
        result = pipeline.track_sequence(
            dataset, seq_id, model, tracker_config,
            max_detections=cfg.get("max_detections", 50), use_oracle=use_oracle,
        )
        lines.extend(
            format_track_records(seq_id, result.tracks,
                                 smooth_window=tracker_config.depth_smooth_window)
        )
        frames += result.frames_processed
        detections += result.detections_total
        n_tracks += len(result.tracks)

    out = Path(cfg.get("out") or root / "tracks.txt")
    atomic_write_text(out, "\n".join(lines) + "\n")
    _log("track", out, {
        "sequences": seq_ids, "frames": frames, "detections": detections,
        "tracks": n_tracks, "oracle": use_oracle, "out": str(out),
    })
    return 0


def _tracked_boxes_from_file(path) -> dict[int, list[TrackedBox]]:
    by_seq: dict[int, list[TrackedBox]] = {}
    for seq, frame, tid, cls, box, _depth, _conf in parse_track_records(
        Path(path).read_text()
    ):
        by_seq.setdefault(seq, []).append(TrackedBox(frame, tid, cls, box))
    return by_seq


def cmd_evaluate_mot(cfg: RunConfig) -> int:
    root = Path(cfg.require("root"))
    dataset = index_dataset(root)
    tracks_path = cfg.get("tracks") or root / "tracks.txt"
    pred_by_seq = _tracked_boxes_from_file(tracks_path)
    seq_ids = sorted(pred_by_seq) or _resolve_sequences(cfg, dataset)
    gt_by_seq = {sid: pipeline.labels_as_tracked_boxes(dataset, sid) for sid in seq_ids}
    merged, per_seq = pipeline.evaluate_mot_sequences(
        gt_by_seq, pred_by_seq, cfg.get("iou_threshold", 0.5)
    )

    out = Path(cfg.get("out") or root / "mot_report.json")
    payload = {
        "iou_threshold": cfg.get("iou_threshold", 0.5),
        "overall": merged.to_dict(),
        "per_sequence": {str(k): v.to_dict() for k, v in per_seq.items()},
    }
    write_json(out, payload)
    flat = [f"{k} = {v}" for k, v in merged.to_dict().items()]
    atomic_write_text(out.with_suffix(".txt"), "\n".join(flat) + "\n")
    _log("evaluate-mot", out, {
        "tracks": str(tracks_path), "MOTA": round(merged.mota, 6),
        "MOTP": round(merged.motp, 6), "IDSW": merged.idsw, "FRAG": merged.frag,
        "out": str(out),
    })
    return 0


def cmd_evaluate_depth(cfg: RunConfig) -> int:
    root = Path(cfg.require("root"))
    dataset = index_dataset(root)
    seq_ids = _resolve_sequences(cfg, dataset)
    pred_dir = cfg.get("pred_depth")
    model = None
    pred_fn = None
    if pred_dir:
        pred_root = Path(pred_dir)

        def pred_fn(frame_t, frame_prev):
            path = pred_root / f"{frame_t.sequence_id:04d}" / f"{frame_t.frame_index:06d}.npy"
            if not path.exists():
                raise DatasetError(f"missing stored depth prediction {path}")
            return np.load(path)
    else:
        model = load_checkpoint(cfg.require("checkpoint")).model

    evaluation = pipeline.evaluate_depth_sequences(
        dataset, seq_ids, model, depth_cap=cfg.get("depth_cap", 80.0), pred_depth_fn=pred_fn
    )
    out = Path(cfg.get("out") or root / "depth_report.json")
    payload = {
        "depth_cap": cfg.get("depth_cap", 80.0),
        "frames": evaluation.frames,
        "regions": [r.to_dict() for r in evaluation.reports],
    }
    write_json(out, payload)
    flat = []
    for report in evaluation.reports:
        for key, value in report.to_dict().items():
            if key != "region":
                flat.append(f"{report.region_label}.{key} = {value}")
    atomic_write_text(out.with_suffix(".txt"), "\n".join(flat) + "\n")
    whole = evaluation.reports[0]
    _log("evaluate-depth", out, {
        "frames": evaluation.frames,
        "abs_rel": None if whole.abs_rel is None else round(whole.abs_rel, 6),
        "rmse": None if whole.rmse is None else round(whole.rmse, 6),
        "out": str(out),
    })
    return 0


def _tracks_from_records(records) -> dict[int, list[Track]]:
    """Rebuild per-sequence Track objects from export records."""
    by_seq_track: dict[int, dict[int, Track]] = {}
    for seq, frame, tid, cls, box, depth, conf in records:
        center = np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])
        half = np.array([(box[2] - box[0]) / 2, (box[3] - box[1]) / 2])
        track = by_seq_track.setdefault(seq, {}).setdefault(tid, Track(id=tid, states=[]))
        track.states.append(TrackObservation(frame, center, half, depth, conf, cls))
    return {seq: sorted(tracks.values(), key=lambda t: t.id)
            for seq, tracks in by_seq_track.items()}


def cmd_export_bev(cfg: RunConfig) -> int:
    root = Path(cfg.require("root"))
    dataset = index_dataset(root)
    tracks_path = cfg.get("tracks") or root / "tracks.txt"
    records = list(parse_track_records(Path(tracks_path).read_text()))
    by_seq = _tracks_from_records(records)

    trajectories = []
    skipped_total = 0
    multi = len(by_seq) > 1
    for seq_id, tracks in sorted(by_seq.items()):
        poses = dataset.ego_poses(seq_id)
        calib = dataset.calibration(seq_id)
        trajs, skipped = extract_bev(tracks, poses, calib)
        skipped_total += skipped
        for traj in trajs:
            if multi:
                traj.actor_id = f"{seq_id}:{traj.actor_id}"
            trajectories.append(traj)

    fmt = cfg.get("format", "csv")
    out = Path(cfg.get("out") or root / f"trajectories.{fmt}")
    export_trajectories(trajectories, fmt, out)
    _log("export-bev", out, {
        "tracks": str(tracks_path), "actors": len(trajectories),
        "skipped_states": skipped_total, "format": fmt, "out": str(out),
    })
    return 0


def cmd_plot_bev(cfg: RunConfig) -> int:
    traj_path = Path(cfg.require("trajectories"))
    if traj_path.suffix == ".geojson" or traj_path.suffix == ".json":
        trajectories = trajectories_from_geojson(json.loads(traj_path.read_text()))
    else:
        trajectories = trajectories_from_csv(traj_path.read_text())
    out = Path(cfg.get("out") or traj_path.with_suffix(".png"))
    plot_bev(trajectories, out)
    _log("plot-bev", out, {
        "trajectories": str(traj_path), "actors": len(trajectories), "out": str(out),
    })
    return 0


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "track": cmd_track,
    "evaluate-mot": cmd_evaluate_mot,
    "evaluate-depth": cmd_evaluate_depth,
    "export-bev": cmd_export_bev,
    "plot-bev": cmd_plot_bev,
}


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = _config_from_args(args)
        return COMMANDS[args.command](cfg)
    except BevtrackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()

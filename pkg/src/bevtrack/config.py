"""Plain-text run configuration: ``key = value`` lines, '#' comments.

Every key is listed in KEY_PARSERS; unknown keys fail loudly with the exact
key name. Command-line flags override file values, and the environment
variable ``BEVTRACK_CONFIG`` supplies a default config path.
"""

from __future__ import annotations

import os
from pathlib import Path

from .errors import ConfigError
from .losses import FocalParams, LossWeights
from .model import ModelConfig
from .tracker import TrackerConfig
from .training import TrainConfig

CONFIG_ENV_VAR = "BEVTRACK_CONFIG"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


KEY_PARSERS = {
    "root": str,
    "sequences": str,
    "checkpoint": str,
    "tracks": str,
    "trajectories": str,
    "pred_depth": str,
    "out": str,
    "seed": int,
    "format": str,
    "depth_cap": float,
    "iou_threshold": float,
    "split_ratio": float,
    "oracle_detections": _parse_bool,
    "max_detections": int,
    "tracker.detection_threshold": float,
    "tracker.max_age": int,
    "tracker.gate_2d": float,
    "tracker.gate_depth": float,
    "tracker.depth_smooth_window": int,
    "tracker.use_depth_cost": _parse_bool,
    "model.input_width": int,
    "model.input_height": int,
    "model.downscale": int,
    "model.num_classes": int,
    "model.channels": _parse_int_list,
    "model.head_channels": int,
    "model.use_prior_channels": _parse_bool,
    "train.learning_rate": float,
    "train.lr_decay_gamma": float,
    "train.lr_decay_every": int,
    "train.batch_size": int,
    "train.steps": int,
    "train.size_weight": float,
    "train.offset_weight": float,
    "train.z_weight": float,
    "train.alpha1": float,
    "train.alpha2": float,
    "train.alpha3": float,
    "train.focal_alpha": float,
    "train.focal_beta": float,
}

DEFAULTS = {
    "sequences": "all",
    "seed": 0,
    "format": "csv",
    "depth_cap": 80.0,
    "iou_threshold": 0.5,
    "split_ratio": 0.5,
    "oracle_detections": False,
    "max_detections": 50,
}


class RunConfig:
    """Typed view over the merged (defaults <- file <- flag overrides) keys."""

    def __init__(self, values: dict):
        self.values = dict(DEFAULTS)
        self.values.update(values)

    @classmethod
    def load(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        values: dict = {}
        path = config_path or os.environ.get(CONFIG_ENV_VAR)
        if path:
            values.update(parse_config_file(path))
        for key, value in (overrides or {}).items():
            if value is None:
                continue
            if key not in KEY_PARSERS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = KEY_PARSERS[key](value) if isinstance(value, str) else value
        return cls(values)

    def get(self, key: str, default=None):
        if key not in KEY_PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values.get(key, default)

    def require(self, key: str):
        value = self.get(key)
        if value is None:
            raise ConfigError(f"missing required config key {key!r}")
        return value

    def tracker_config(self) -> TrackerConfig:
        g = self.values.get
        return TrackerConfig(
            detection_threshold=g("tracker.detection_threshold", 0.3),
            max_age=g("tracker.max_age", 2),
            gate_2d=g("tracker.gate_2d", 1.0),
            gate_depth=g("tracker.gate_depth", 2.0),
            depth_smooth_window=g("tracker.depth_smooth_window", 5),
            downscale=g("model.downscale", 4),
            use_depth_cost=g("tracker.use_depth_cost", True),
        )

    def model_config(self) -> ModelConfig:
        g = self.values.get
        return ModelConfig(
            input_size=(g("model.input_width", 1280), g("model.input_height", 384)),
            downscale=g("model.downscale", 4),
            num_classes=g("model.num_classes", 2),
            channels=tuple(g("model.channels", (16, 32, 64))),
            head_channels=g("model.head_channels"),
            use_prior_channels=g("model.use_prior_channels", True),
        )

    def train_config(self) -> TrainConfig:
        g = self.values.get
        return TrainConfig(
            learning_rate=g("train.learning_rate", 1.25e-4),
            lr_decay_gamma=g("train.lr_decay_gamma", 0.95),
            lr_decay_every=g("train.lr_decay_every", 200),
            batch_size=g("train.batch_size", 4),
            steps=g("train.steps", 2000),
            seed=g("seed", 0),
            size_weight=g("train.size_weight", 0.1),
            offset_weight=g("train.offset_weight", 1.0),
            z_weight=g("train.z_weight", 1.0),
            weights=LossWeights(
                g("train.alpha1", 1.0), g("train.alpha2", 1.0), g("train.alpha3", 1.0)
            ),
            focal=FocalParams(g("train.focal_alpha", 2.0), g("train.focal_beta", 4.0)),
        )


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    for line_no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in KEY_PARSERS:
            raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
        try:
            values[key] = KEY_PARSERS[key](value)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{line_no}: bad value for {key!r}: {exc}") from exc
    return values

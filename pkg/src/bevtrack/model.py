"""Joint detection + depth network: backbone-agnostic I/O contract and a
small trainable encoder-decoder for desk-scale experiments.

The network sees the current and previous frame stacked as six input
channels; prior-track channels (rendered heatmap + depth at output
resolution) are fused at the bottleneck. Five heads emit, all at 1/R
resolution: per-class center heatmap, half-extents, sub-cell offsets,
3D displacement and dense depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ValidationError

HEATMAP_CLAMP = 1e-4
DEPTH_LOG_RANGE = (-10.0, 6.0)  # raw depth head output; depth = exp(raw)

HEAD_CHANNELS = {
    "heatmap": None,  # num_classes, filled per config
    "size": 2,
    "subpixel_offset": 2,
    "displacement": 3,
    "depth": 1,
}


@dataclass(frozen=True)
class ModelConfig:
    """Shape contract of the network."""

    input_size: tuple[int, int] = (1280, 384)  # (W, H)
    downscale: int = 4
    num_classes: int = 2
    channels: tuple[int, ...] = (16, 32, 64)
    head_channels: int | None = None
    use_prior_channels: bool = True

    def __post_init__(self):
        w, h = self.input_size
        if not self.channels:
            raise ConfigError("channels: must be a nonempty list of feature widths")
        stride = 2 ** (len(self.channels) - 1)
        if stride != self.downscale:
            raise ConfigError(
                f"channels: {len(self.channels)} levels give stride {stride}, "
                f"config requires downscale {self.downscale}"
            )
        if w % self.downscale or h % self.downscale:
            raise ConfigError(
                f"input_size: ({w}, {h}) must be divisible by downscale {self.downscale}"
            )

    @property
    def grid_shape(self) -> tuple[int, int]:
        w, h = self.input_size
        return (h // self.downscale, w // self.downscale)

    @property
    def heads(self) -> dict[str, int]:
        out = dict(HEAD_CHANNELS)
        out["heatmap"] = self.num_classes
        return out

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "downscale": self.downscale,
            "num_classes": self.num_classes,
            "channels": list(self.channels),
            "head_channels": self.head_channels,
            "use_prior_channels": self.use_prior_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_size=tuple(d["input_size"]),
            downscale=int(d["downscale"]),
            num_classes=int(d["num_classes"]),
            channels=tuple(d["channels"]),
            head_channels=d.get("head_channels"),
            use_prior_channels=bool(d.get("use_prior_channels", True)),
        )


@dataclass
class NetworkOutputs:
    """Per-frame head outputs as numpy grids, all at (H/R, W/R)."""

    heatmap: np.ndarray          # (H', W', K), strictly inside (0, 1)
    size: np.ndarray             # (H', W', 2)
    subpixel_offset: np.ndarray  # (H', W', 2)
    displacement: np.ndarray     # (H', W', 3)
    depth: np.ndarray            # (H', W', 1), strictly positive

    def __post_init__(self):
        grid = self.heatmap.shape[:2]
        for name in ("size", "subpixel_offset", "displacement", "depth"):
            if getattr(self, name).shape[:2] != grid:
                raise ValidationError(f"output {name} does not match grid {grid}")
        if np.any(self.depth <= 0):
            raise ValidationError("depth output must be strictly positive")
        if self.heatmap.min() <= 0 or self.heatmap.max() >= 1:
            raise ValidationError("heatmap output must lie strictly inside (0, 1)")


class ToyBackbone(nn.Module):
    """Small strided encoder with prior-channel fusion and five 1x1-topped heads."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        chans = config.channels
        layers = [
            nn.Conv2d(6, chans[0], 3, padding=1),
            nn.BatchNorm2d(chans[0]),
            nn.ReLU(inplace=True),
        ]
        for prev, cur in zip(chans[:-1], chans[1:]):
            layers += [
                nn.Conv2d(prev, cur, 3, stride=2, padding=1),
                nn.BatchNorm2d(cur),
                nn.ReLU(inplace=True),
                nn.Conv2d(cur, cur, 3, padding=1),
                nn.BatchNorm2d(cur),
                nn.ReLU(inplace=True),
            ]
        self.encoder = nn.Sequential(*layers)

        bottleneck = chans[-1]
        fuse_in = bottleneck + (2 if config.use_prior_channels else 0)
        self.fuse = nn.Sequential(
            nn.Conv2d(fuse_in, bottleneck, 1),
            nn.BatchNorm2d(bottleneck),
            nn.ReLU(inplace=True),
        )

        head_ch = config.head_channels or max(8, bottleneck // 2)
        self.heads = nn.ModuleDict()
        for name, out_ch in config.heads.items():
            self.heads[name] = nn.Sequential(
                nn.Conv2d(bottleneck, head_ch, 3, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(head_ch, out_ch, 1),
            )
        # Bias the heatmap toward background and the depth toward mid-range
        # so early training is stable.
        self.heads["heatmap"][-1].bias.data.fill_(-2.19)
        self.heads["depth"][-1].bias.data.fill_(math.log(15.0))

    def forward(self, images: torch.Tensor, priors: torch.Tensor | None) -> dict[str, torch.Tensor]:
        feats = self.encoder(images)
        if self.config.use_prior_channels:
            if priors is None:
                priors = torch.zeros(
                    feats.shape[0], 2, *feats.shape[2:], dtype=feats.dtype, device=feats.device
                )
            feats = torch.cat([feats, priors], dim=1)
        feats = self.fuse(feats)
        raw = {name: head(feats) for name, head in self.heads.items()}
        out = dict(raw)
        out["heatmap"] = torch.sigmoid(raw["heatmap"]).clamp(HEATMAP_CLAMP, 1 - HEATMAP_CLAMP)
        out["depth"] = torch.exp(raw["depth"].clamp(*DEPTH_LOG_RANGE))
        return out


def build_toy_backbone(config: ModelConfig, seed: int = 0) -> ToyBackbone:
    """Construct the toy model with reproducible initialization."""
    torch.manual_seed(seed)
    return ToyBackbone(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _check_image(name: str, image: np.ndarray, config: ModelConfig) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float32)
    w, h = config.input_size
    if arr.shape != (h, w, 3):
        raise ValidationError(
            f"{name}: expected shape {(h, w, 3)} per model config, got {arr.shape}"
        )
    return arr


def forward(
    model: ToyBackbone,
    image_t: np.ndarray,
    image_prev: np.ndarray,
    prior_maps: tuple[np.ndarray, np.ndarray] | None = None,
) -> NetworkOutputs:
    """Run one frame pair through the network in inference mode.

    Images are (H, W, 3) floats in [0, 1]; `prior_maps` is the
    (heatmap, depth) pair at output resolution or None for zeros.
    """
    config = model.config
    img_t = _check_image("image_t", image_t, config)
    img_prev = _check_image("image_prev", image_prev, config)
    stacked = np.concatenate([img_t, img_prev], axis=2).transpose(2, 0, 1)[None]
    images = torch.as_tensor(stacked)

    priors = None
    if prior_maps is not None:
        heat, depth = prior_maps
        grid = config.grid_shape
        if heat.shape != grid or depth.shape != grid:
            raise ValidationError(
                f"prior_maps: expected two {grid} grids, got {heat.shape} and {depth.shape}"
            )
        priors = torch.as_tensor(
            np.stack([heat, depth]).astype(np.float32)[None]
        )

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            raw = model(images.to(next(model.parameters()).dtype),
                        None if priors is None else priors.to(next(model.parameters()).dtype))
    finally:
        model.train(was_training)

    def grab(name):
        return raw[name][0].permute(1, 2, 0).numpy().astype(np.float64)

    return NetworkOutputs(
        heatmap=grab("heatmap"),
        size=grab("size"),
        subpixel_offset=grab("subpixel_offset"),
        displacement=grab("displacement"),
        depth=grab("depth"),
    )

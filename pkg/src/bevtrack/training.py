"""Training loop: Adam with exponential learning-rate decay, per-component
loss bookkeeping, and a versioned binary checkpoint format.

The optimized objective combines the focal heatmap loss with masked L1
regression on the half-extent and sub-cell offset channels (reported
together as the detection component), plus the displacement and depth
losses, each with its configured weight.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .codec import TargetMaps
from .errors import ConfigError, TrainingError, ValidationError
from .losses import FocalParams, LossWeights, depth_loss, displacement_loss, focal_loss, total_loss
from .model import ModelConfig, ToyBackbone, build_toy_backbone

CHECKPOINT_MAGIC = b"BVTK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and loss-weight settings; lr decays by `lr_decay_gamma`
    every `lr_decay_every` steps (one desk-scale epoch)."""

    learning_rate: float = 1.25e-4
    lr_decay_gamma: float = 0.95
    lr_decay_every: int = 200
    batch_size: int = 4
    steps: int = 2000
    seed: int = 0
    size_weight: float = 0.1
    offset_weight: float = 1.0
    z_weight: float = 1.0
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate: must be nonnegative, got {self.learning_rate}")
        if not 0 < self.lr_decay_gamma <= 1:
            raise ConfigError(f"lr_decay_gamma: must be in (0, 1], got {self.lr_decay_gamma}")
        if self.lr_decay_every < 1 or self.batch_size < 1:
            raise ConfigError("lr_decay_every and batch_size must be positive")

    def to_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "lr_decay_gamma": self.lr_decay_gamma,
            "lr_decay_every": self.lr_decay_every,
            "batch_size": self.batch_size,
            "steps": self.steps,
            "seed": self.seed,
            "size_weight": self.size_weight,
            "offset_weight": self.offset_weight,
            "z_weight": self.z_weight,
            "weights": [self.weights.alpha1, self.weights.alpha2, self.weights.alpha3],
            "focal": [self.focal.alpha, self.focal.beta],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        w = d.pop("weights", [1.0, 1.0, 1.0])
        f = d.pop("focal", [2.0, 4.0])
        return cls(weights=LossWeights(*w), focal=FocalParams(*f), **d)


@dataclass
class TrainSample:
    """One training example: frame pair, optional prior channels and targets."""

    image_t: np.ndarray
    image_prev: np.ndarray
    targets: TargetMaps
    prior_heat: np.ndarray | None = None
    prior_depth: np.ndarray | None = None


@dataclass
class TrainState:
    """Owns the model parameters and optimizer moments for one training run."""

    model: ToyBackbone
    optimizer: torch.optim.Adam
    model_config: ModelConfig
    train_config: TrainConfig
    step: int = 0

    @property
    def learning_rate(self) -> float:
        cfg = self.train_config
        return cfg.learning_rate * cfg.lr_decay_gamma ** (self.step // cfg.lr_decay_every)

    @property
    def params_flat(self) -> np.ndarray:
        with torch.no_grad():
            return np.concatenate(
                [p.detach().double().reshape(-1).numpy() for p in self.model.parameters()]
            )


def init_train_state(model_config: ModelConfig, train_config: TrainConfig) -> TrainState:
    model = build_toy_backbone(model_config, seed=train_config.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    return TrainState(model, optimizer, model_config, train_config)


def _stack_batch(batch: list[TrainSample], config: ModelConfig, dtype):
    w, h = config.input_size
    images = np.empty((len(batch), 6, h, w), dtype=np.float32)
    priors = None
    if config.use_prior_channels:
        priors = np.zeros((len(batch), 2) + config.grid_shape, dtype=np.float32)
    for i, sample in enumerate(batch):
        if sample.image_t.shape != (h, w, 3) or sample.image_prev.shape != (h, w, 3):
            raise ValidationError(
                f"batch image {i}: expected {(h, w, 3)}, got {sample.image_t.shape}"
            )
        images[i, :3] = sample.image_t.transpose(2, 0, 1)
        images[i, 3:] = sample.image_prev.transpose(2, 0, 1)
        if priors is not None and sample.prior_heat is not None:
            priors[i, 0] = sample.prior_heat
            priors[i, 1] = sample.prior_depth
    images_t = torch.as_tensor(images).to(dtype)
    priors_t = None if priors is None else torch.as_tensor(priors).to(dtype)
    return images_t, priors_t


def _masked_l1(pred: torch.Tensor, target: np.ndarray, mask: np.ndarray) -> torch.Tensor:
    """Mean L1 over masked cells of a (H', W', C) channel pair."""
    m = torch.as_tensor(mask)
    n = int(m.sum())
    if n == 0:
        return pred.sum() * 0.0
    tgt = torch.as_tensor(target).to(pred.dtype)
    return (pred - tgt).abs().sum(dim=-1)[m].sum() / n


def train_step(state: TrainState, batch: list[TrainSample], weights: LossWeights | None = None):
    """One Adam update on a batch; returns (state, loss breakdown).

    The breakdown reports the detection component (focal + size/offset L1),
    displacement, depth, the weighted total and the learning rate in effect.
    """
    if not batch:
        raise ValidationError("train_step requires a nonempty batch")
    cfg = state.train_config
    weights = weights or cfg.weights
    model = state.model
    model.train()

    lr = state.learning_rate
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    dtype = next(model.parameters()).dtype
    images, priors = _stack_batch(batch, state.model_config, dtype)
    out = model(images, priors)

    def scalar(x: torch.Tensor) -> float:
        return float(x.detach())

    comp = {"obj": [], "disp": [], "depth": []}
    totals = []
    for i, sample in enumerate(batch):
        tm = sample.targets
        heat = out["heatmap"][i].permute(1, 2, 0)
        det = focal_loss(heat, tm.heatmap, cfg.focal)
        det = det + cfg.size_weight * _masked_l1(
            out["size"][i].permute(1, 2, 0), tm.size, tm.center_mask
        )
        det = det + cfg.offset_weight * _masked_l1(
            out["subpixel_offset"][i].permute(1, 2, 0), tm.subpixel_offset, tm.center_mask
        )
        disp = displacement_loss(out["displacement"][i].permute(1, 2, 0), tm, cfg.z_weight)
        dep = depth_loss(out["depth"][i].permute(1, 2, 0), tm.depth)
        total, _ = total_loss((det, disp, dep), weights)
        comp["obj"].append(det)
        comp["disp"].append(disp)
        comp["depth"].append(dep)
        totals.append(total)

    batch_total = torch.stack(totals).mean()
    breakdown = {name: scalar(torch.stack(vals).mean()) for name, vals in comp.items()}
    breakdown["total"] = scalar(batch_total)
    breakdown["lr"] = lr
    for name in ("obj", "disp", "depth", "total"):
        if not np.isfinite(breakdown[name]):
            raise TrainingError(f"{name} loss became non-finite at step {state.step}")

    state.optimizer.zero_grad()
    batch_total.backward()
    state.optimizer.step()
    with torch.no_grad():
        for p in model.parameters():
            if not torch.isfinite(p).all():
                raise TrainingError(f"parameters became non-finite at step {state.step}")
    state.step += 1
    return state, breakdown


def train_model(
    samples: list[TrainSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    log_every: int = 100,
    log_fn=None,
):
    """Train from scratch on an in-memory sample set; returns (state, history)."""
    if not samples:
        raise ValidationError("no training samples")
    state = init_train_state(model_config, train_config)
    rng = np.random.default_rng(train_config.seed)
    history = []
    for _ in range(train_config.steps):
        idx = rng.choice(len(samples), size=train_config.batch_size,
                         replace=len(samples) < train_config.batch_size)
        state, breakdown = train_step(state, [samples[i] for i in idx])
        history.append(breakdown)
        if log_fn is not None and (state.step % log_every == 0 or state.step == 1):
            log_fn(state.step, breakdown)
    return state, history


def _state_entries(model: ToyBackbone):
    return [(name, tensor) for name, tensor in model.state_dict().items()]


def save_checkpoint(path, state: TrainState) -> None:
    """Serialize model + optimizer into the versioned binary container.

    Layout: magic, uint32 version, uint32 header length, UTF-8 JSON header,
    then one little-endian float64 block holding every state-dict entry in
    header order followed by Adam first/second moments per parameter.
    """
    from .utils import atomic_write_bytes

    entries = _state_entries(state.model)
    param_names = [n for n, _ in state.model.named_parameters()]
    header = {
        "model_config": state.model_config.to_dict(),
        "train_config": state.train_config.to_dict(),
        "step": state.step,
        "entries": [[name, list(t.shape)] for name, t in entries],
        "optimizer_params": param_names,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    blocks = [t.detach().double().reshape(-1).numpy() for _, t in entries]
    params = dict(state.model.named_parameters())
    for name in param_names:
        p = params[name]
        opt_state = state.optimizer.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq"):
            if key in opt_state:
                blocks.append(opt_state[key].detach().double().reshape(-1).numpy())
            else:
                blocks.append(np.zeros(p.numel()))
    payload = np.concatenate(blocks).astype("<f8").tobytes()

    data = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
    atomic_write_bytes(path, data + header_bytes + payload)


def load_checkpoint(path) -> TrainState:
    """Restore a :class:`TrainState` (resumable) from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"checkpoint {path}: bad magic, not a checkpoint file")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(
            f"checkpoint {path}: incompatible version {version} (expected {CHECKPOINT_VERSION})"
        )
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    payload = np.frombuffer(blob[12 + header_len:], dtype="<f8")

    model_config = ModelConfig.from_dict(header["model_config"])
    train_config = TrainConfig.from_dict(header["train_config"])
    state = init_train_state(model_config, train_config)
    state.step = int(header["step"])

    offset = 0

    def take(shape):
        nonlocal offset
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset:offset + n]
        if chunk.size != n:
            raise ConfigError(f"checkpoint {path}: truncated payload")
        offset += n
        return chunk.reshape(shape)

    state_dict = state.model.state_dict()
    new_state = {}
    for name, shape in header["entries"]:
        if name not in state_dict:
            raise ConfigError(f"checkpoint {path}: unknown state entry {name}")
        ref = state_dict[name]
        values = take(shape).copy()
        new_state[name] = torch.as_tensor(values).reshape(ref.shape).to(ref.dtype)
    state.model.load_state_dict(new_state)

    params = dict(state.model.named_parameters())
    for name in header["optimizer_params"]:
        p = params[name]
        exp_avg = take(list(p.shape)).copy()
        exp_avg_sq = take(list(p.shape)).copy()
        state.optimizer.state[p] = {
            "step": torch.tensor(float(state.step)),
            "exp_avg": torch.as_tensor(exp_avg).to(p.dtype).reshape(p.shape),
            "exp_avg_sq": torch.as_tensor(exp_avg_sq).to(p.dtype).reshape(p.shape),
        }
    return state

"""Weakly-supervised monocular perception: center-point detection with dense
depth, 2.5D multi-object tracking and bird's-eye-view trajectory export."""

from .codec import Detection, TargetMaps, decode_detections, encode_targets, gaussian_radius
from .geometry import (
    CameraCalibration,
    EgoPose,
    RigidTransform,
    SparseDepthMap,
    ego_to_world,
    lift_pixel,
    load_calibration,
    project_points,
    render_depth_map,
)
from .losses import FocalParams, LossWeights, depth_loss, displacement_loss, focal_loss, total_loss
from .model import ModelConfig, NetworkOutputs, build_toy_backbone, forward

__version__ = "0.1.0"

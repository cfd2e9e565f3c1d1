import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bevtrack.geometry import CameraCalibration
from bevtrack.kitti import BoxAnnotation2D
from bevtrack.synth import SceneConfig, make_synthetic_dataset

settings.register_profile(
    "suite", max_examples=50, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def calib():
    """Simple pinhole camera: fx=fy=700, principal point (600, 180)."""
    return CameraCalibration(fx=700.0, fy=700.0, cx=600.0, cy=180.0, image_size=(1280, 384))


@pytest.fixture
def toy_calib():
    return CameraCalibration(fx=120.0, fy=120.0, cx=64.0, cy=48.0, image_size=(128, 96))


def make_box(x1, y1, x2, y2, class_id=0, track_id=1):
    return BoxAnnotation2D(x1, y1, x2, y2, class_id, track_id)


class FrameStub:
    """Minimal stand-in for kitti.Frame in codec-level tests."""

    def __init__(self, annotations, image_size=(512, 256)):
        self.annotations = annotations
        self.image_size = image_size


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """A two-sequence synthetic dataset in KITTI layout (8 frames each)."""
    root = tmp_path_factory.mktemp("synth") / "data"
    make_synthetic_dataset(root, num_sequences=2,
                           config=SceneConfig(num_frames=8, num_objects=3, seed=5))
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

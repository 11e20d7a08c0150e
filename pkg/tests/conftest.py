import numpy as np
import pytest

from sceneweaver.camera import CameraView, Intrinsics, Pose


def make_view(width=64, height=64, fx=None, yaw=0.0, pitch=0.0,
              position=(0.0, 0.0, 0.0), vid=0) -> CameraView:
    if fx is None:
        intr = Intrinsics.default(width, height)
    else:
        intr = Intrinsics(fx, fx, width / 2.0, height / 2.0, width, height)
    return CameraView(intr, Pose.from_yaw_pitch(yaw, pitch, position), id=vid)


@pytest.fixture
def rng():
    return np.random.default_rng(20240803)

"""Text-driven 3D scene synthesis on a voxel radiance field.

A single generated image is lifted to 3D by depth estimation, reinforced
with DIBR-warped support views, and progressively extended view by view:
render, mask the never-seen region, inpaint it, align the new depth, and
retrain the field.  Generative models are pluggable providers; a
deterministic procedural scene stands in for them during testing.
"""

from .camera import (
    CameraView,
    DepthMap,
    Intrinsics,
    Pose,
    RegionMask,
    TrajectorySpec,
    build_trajectory,
    forward_warp,
    missing_mask,
    support_poses,
    warp_pixel,
)
from .field import RadianceGrid, Ray, RenderSample, render_ray, render_view
from .kernels import backend_name

__version__ = "0.1.0"

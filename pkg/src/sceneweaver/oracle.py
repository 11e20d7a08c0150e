"""Deterministic procedural ground truth: a textured box room.

The camera sits inside an axis-aligned box; every ray hits exactly one of
the six interior walls.  Each wall carries a smooth two-color pattern (a
product of sines in the wall plane, so the scene is band-limited and a
voxel grid can actually represent it).  Same spec + seed always produces
identical renders, which makes the scene a drop-in stand-in for the
generative providers during testing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView, DepthMap
from .field import view_rays

__all__ = ["OracleScene"]

# face order: +x, -x, +y, -y, +z, -z
_FACE_AXIS = np.array([0, 0, 1, 1, 2, 2])
_FACE_SIGN = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
# texture coordinates: the two axes spanning each wall plane
_FACE_UV = np.array([[1, 2], [1, 2], [0, 2], [0, 2], [0, 1], [0, 1]])


@dataclass(frozen=True)
class OracleScene:
    """Axis-aligned box room with per-wall two-color sine patterns."""

    half_extents: tuple[float, float, float] = (2.0, 1.6, 2.0)
    seed: int = 0
    colors_a: np.ndarray = field(default=None, repr=False)
    colors_b: np.ndarray = field(default=None, repr=False)
    cycles: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        rng = np.random.Generator(np.random.PCG64(self.seed))
        if self.colors_a is None:
            object.__setattr__(self, "colors_a", rng.uniform(0.55, 0.95, (6, 3)))
        if self.colors_b is None:
            object.__setattr__(self, "colors_b", rng.uniform(0.05, 0.45, (6, 3)))
        if self.cycles is None:
            object.__setattr__(self, "cycles", rng.uniform(0.4, 1.1, (6, 2)))
        for name in ("colors_a", "colors_b", "cycles"):
            getattr(self, name).setflags(write=False)

    @property
    def extents(self) -> np.ndarray:
        return np.asarray(self.half_extents, dtype=np.float64)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.all(np.abs(p) < self.extents, axis=-1)

    def hit(self, origins, dirs):
        """First wall crossing of rays starting inside the box.

        Returns (t, face) with t the ray distance to the wall and face the
        index into the +x,-x,+y,-y,+z,-z order.
        """
        origins = np.asarray(origins, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        if not np.all(self.contains(origins)):
            raise ValueError("oracle rays must start inside the box room")
        h = self.extents
        with np.errstate(divide="ignore", invalid="ignore"):
            # distance to the wall each axis exits through
            t_axis = (np.sign(dirs) * h - origins) / dirs
        t_axis = np.where(dirs == 0.0, np.inf, t_axis)
        axis = np.argmin(t_axis, axis=-1)
        t = np.take_along_axis(t_axis, axis[..., None], axis=-1)[..., 0]
        sign = np.take_along_axis(np.sign(dirs), axis[..., None], axis=-1)[..., 0]
        face = axis * 2 + (sign < 0)
        return t, face

    def face_color(self, face, points):
        """Wall pattern color at world points lying on the given faces."""
        points = np.asarray(points, dtype=np.float64)
        face = np.asarray(face)
        uv_axes = _FACE_UV[face]  # (..., 2)
        u = np.take_along_axis(points, uv_axes[..., :1], axis=-1)[..., 0]
        v = np.take_along_axis(points, uv_axes[..., 1:], axis=-1)[..., 0]
        fu = self.cycles[face, 0]
        fv = self.cycles[face, 1]
        w = 0.5 * (1.0 + np.sin(2 * np.pi * fu * u) * np.sin(2 * np.pi * fv * v))
        ca = self.colors_a[face]
        cb = self.colors_b[face]
        return ca * w[..., None] + cb * (1.0 - w[..., None])

    def render(self, view: CameraView):
        """Analytic RGB + z-depth of the room from a camera inside it.

        Returns (image (H, W, 3) float in [0, 1], DepthMap).
        """
        origins, dirs, z_scale = view_rays(view)
        t, face = self.hit(origins.reshape(-1, 3), dirs.reshape(-1, 3))
        pts = origins.reshape(-1, 3) + t[:, None] * dirs.reshape(-1, 3)
        rgb = self.face_color(face, pts).reshape(view.height, view.width, 3)
        z = (t.reshape(view.height, view.width)) * z_scale
        return np.clip(rgb, 0.0, 1.0), DepthMap(z)

    def depth(self, view: CameraView) -> DepthMap:
        return self.render(view)[1]

    def grid_bbox(self, margin: float = 0.1):
        """Bounding box for a radiance grid that encloses the walls."""
        h = self.extents * (1.0 + margin)
        return -h, h

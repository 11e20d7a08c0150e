"""Pinhole cameras, pose trajectories, and depth-image-based forward warping.

Conventions used throughout the package:
  - Right-handed frames; the camera looks along +z in its own frame,
    x points right and y points down in the image.
  - ``Pose`` stores world->camera: x_cam = R @ x_world + t.
  - Pixel origin is the top-left corner; pixel (u, v) = (column, row) has
    its center at integer coordinates, u in [0, W-1], v in [0, H-1].
  - Depth always means camera-space z, never distance along the ray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Intrinsics",
    "Pose",
    "CameraView",
    "DepthMap",
    "RegionMask",
    "TrajectorySpec",
    "warp_pixel",
    "warp_points",
    "forward_warp",
    "support_poses",
    "missing_mask",
    "build_trajectory",
]


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics in pixel units."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @classmethod
    def default(cls, width: int, height: int) -> "Intrinsics":
        # 90 degree horizontal field of view: fx = (W/2) / tan(45 deg).
        fx = width / 2.0
        return cls(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0, width=width, height=height)

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )


def _frozen_array(a, shape) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Pose:
    """World->camera rigid transform: x_cam = rotation @ x_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen_array(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen_array(self.translation, (3,)))
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
        if np.linalg.det(self.rotation) < 0:
            raise ValueError("rotation must have determinant +1")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw_pitch(cls, yaw_deg: float, pitch_deg: float, position=(0.0, 0.0, 0.0)) -> "Pose":
        """Camera at ``position`` looking along +z rotated by yaw (about the
        vertical axis) then pitch (about the camera x axis)."""
        ya, pa = math.radians(yaw_deg), math.radians(pitch_deg)
        ry = np.array(
            [[math.cos(ya), 0.0, math.sin(ya)], [0.0, 1.0, 0.0], [-math.sin(ya), 0.0, math.cos(ya)]]
        )
        rx = np.array(
            [[1.0, 0.0, 0.0], [0.0, math.cos(pa), -math.sin(pa)], [0.0, math.sin(pa), math.cos(pa)]]
        )
        cam_to_world = ry @ rx
        rot = cam_to_world.T
        return cls(rot, -rot @ np.asarray(position, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def with_center(self, center) -> "Pose":
        """Same orientation, camera moved to ``center`` (world coords)."""
        return Pose(self.rotation, -self.rotation @ np.asarray(center, dtype=np.float64))

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera x/y/z axes expressed in world coordinates."""
        return self.rotation[0], self.rotation[1], self.rotation[2]


@dataclass(frozen=True)
class CameraView:
    """A camera (intrinsics + pose) with a stable id within a run."""

    intrinsics: Intrinsics
    pose: Pose
    id: int = 0

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def with_pose(self, pose: Pose, id: int | None = None) -> "CameraView":
        return CameraView(self.intrinsics, pose, self.id if id is None else id)


class DepthMap:
    """Per-pixel z-depth with a validity mask.

    Invalid pixels carry the sentinel 0.0 and must be excluded from every
    reduction; ``values`` is strictly positive wherever ``valid``.
    """

    __slots__ = ("values", "valid")

    def __init__(self, values: np.ndarray, valid: np.ndarray | None = None):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if valid is None:
            valid = np.ones(values.shape, dtype=bool)
        valid = np.asarray(valid, dtype=bool)
        if valid.shape != values.shape:
            raise ValueError("valid mask shape must match depth values")
        if np.any(values[valid] <= 0) or not np.all(np.isfinite(values[valid])):
            raise ValueError("valid depth values must be finite and positive")
        self.values = np.where(valid, values, 0.0)
        self.valid = valid

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.valid.copy())


@dataclass
class RegionMask:
    """Boolean grid marking pixels whose content is unknown (to be inpainted)."""

    missing: np.ndarray

    def __post_init__(self):
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.missing.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def count(self) -> int:
        return int(self.missing.sum())

    @property
    def fraction(self) -> float:
        return self.count / self.missing.size

    def is_empty(self) -> bool:
        return not self.missing.any()


# ---------------------------------------------------------------------------
# Warping


def warp_points(q: np.ndarray, z: np.ndarray, src: CameraView, dst: CameraView):
    """Reproject pixels+depths of ``src`` into ``dst``.

    Args:
        q: (..., 2) pixel coordinates (u, v) in ``src``.
        z: (...) z-depths in ``src`` camera space, > 0.
    Returns:
        (q_dst, z_dst): warped pixel coordinates and dst z-depths.  z_dst may
        be <= 0 for points behind the destination camera; the corresponding
        pixel coordinates are then meaningless and left to callers to filter.
    """
    q = np.asarray(q, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    ki, kd = src.intrinsics, dst.intrinsics
    x = (q[..., 0] - ki.cx) / ki.fx * z
    y = (q[..., 1] - ki.cy) / ki.fy * z
    pts_cam = np.stack([x, y, z], axis=-1)

    r_rel = dst.pose.rotation @ src.pose.rotation.T
    t_rel = dst.pose.translation - r_rel @ src.pose.translation
    pts_dst = pts_cam @ r_rel.T + t_rel
    zd = pts_dst[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ud = pts_dst[..., 0] / zd * kd.fx + kd.cx
        vd = pts_dst[..., 1] / zd * kd.fy + kd.cy
    return np.stack([ud, vd], axis=-1), zd


def warp_pixel(q, z: float, src: CameraView, dst: CameraView):
    """Single-pixel form of :func:`warp_points`."""
    qd, zd = warp_points(np.asarray(q, dtype=np.float64), float(z), src, dst)
    return (float(qd[0]), float(qd[1])), float(zd)


def _splat(depth: DepthMap, src: CameraView, dst: CameraView):
    """Z-buffered nearest-pixel splat of the valid source pixels into dst.

    Returns (hit, dst_depth, src_flat_index) grids; ties at equal depth are
    broken by the lowest source pixel index so results are deterministic.
    """
    h, w = depth.shape
    hd, wd = dst.height, dst.width
    vv, uu = np.nonzero(depth.valid)
    out_hit = np.zeros((hd, wd), dtype=bool)
    out_depth = np.zeros((hd, wd), dtype=np.float64)
    out_src = np.full((hd, wd), -1, dtype=np.int64)
    if vv.size == 0:
        return out_hit, out_depth, out_src

    q = np.stack([uu, vv], axis=-1).astype(np.float64)
    qd, zd = warp_points(q, depth.values[vv, uu], src, dst)
    ud = np.rint(qd[..., 0]).astype(np.int64)
    vd = np.rint(qd[..., 1]).astype(np.int64)
    keep = (zd > 0) & (ud >= 0) & (ud < wd) & (vd >= 0) & (vd < hd)
    if not keep.any():
        return out_hit, out_depth, out_src

    flat_dst = vd[keep] * wd + ud[keep]
    z_keep = zd[keep]
    src_idx = (vv[keep] * w + uu[keep]).astype(np.int64)
    # Nearest depth wins; ties resolved by source index via the sort order.
    order = np.lexsort((src_idx, z_keep, flat_dst))
    flat_sorted = flat_dst[order]
    first = np.ones(flat_sorted.size, dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    winners = order[first]

    tv, tu = np.divmod(flat_dst[winners], wd)
    out_hit[tv, tu] = True
    out_depth[tv, tu] = z_keep[winners]
    out_src[tv, tu] = src_idx[winners]
    return out_hit, out_depth, out_src


def _close_pinholes(hit, out_depth, out_src):
    """Mark unhit pixels with a hit 8-neighbour as hit, copying the
    nearest-depth neighbour's payload (1-pixel valid-region dilation)."""
    hd, wd = hit.shape
    best_depth = np.full((hd, wd), np.inf)
    best_src = np.full((hd, wd), -1, dtype=np.int64)
    pad_hit = np.zeros((hd + 2, wd + 2), dtype=bool)
    pad_depth = np.full((hd + 2, wd + 2), np.inf)
    pad_src = np.full((hd + 2, wd + 2), -1, dtype=np.int64)
    pad_hit[1:-1, 1:-1] = hit
    pad_depth[1:-1, 1:-1] = np.where(hit, out_depth, np.inf)
    pad_src[1:-1, 1:-1] = out_src
    for dv in (-1, 0, 1):
        for du in (-1, 0, 1):
            if dv == 0 and du == 0:
                continue
            nh = pad_hit[1 + dv : 1 + dv + hd, 1 + du : 1 + du + wd]
            nd = pad_depth[1 + dv : 1 + dv + hd, 1 + du : 1 + du + wd]
            ns = pad_src[1 + dv : 1 + dv + hd, 1 + du : 1 + du + wd]
            better = nh & (nd < best_depth)
            best_depth = np.where(better, nd, best_depth)
            best_src = np.where(better, ns, best_src)
    fill = (~hit) & np.isfinite(best_depth)
    out_depth = np.where(fill, best_depth, out_depth)
    out_src = np.where(fill, best_src, out_src)
    return hit | fill, out_depth, out_src


def forward_warp(
    image: np.ndarray,
    depth: DepthMap,
    src: CameraView,
    dst: CameraView,
    close_pinholes: bool = False,
):
    """DIBR forward warp with z-buffering.

    Every valid source pixel is splatted to its nearest destination pixel;
    when several land on the same pixel the smallest destination depth wins.
    Unhit destination pixels are flagged missing.

    Returns:
        (rgb, DepthMap, RegionMask) in the destination view.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != depth.shape:
        raise ValueError("image and depth must share resolution")
    hit, out_depth, out_src = _splat(depth, src, dst)
    if close_pinholes:
        hit, out_depth, out_src = _close_pinholes(hit, out_depth, out_src)
    out_rgb = np.zeros((dst.height, dst.width, 3), dtype=np.float64)
    flat = image.reshape(-1, 3)
    out_rgb[hit] = flat[out_src[hit]]
    return out_rgb, DepthMap(out_depth, hit), RegionMask(~hit)


def support_poses(center: CameraView, shift: float, count: int) -> list[CameraView]:
    """Satellite poses on a circle of radius ``shift`` around the camera
    position, in the camera's own x-y plane, keeping the orientation.

    For count=8 the positions are the 8 compass directions (left/right,
    up/down and the four diagonals) of the image plane.
    """
    if shift < 0:
        raise ValueError("shift must be >= 0")
    if count < 1:
        raise ValueError("count must be >= 1")
    cpos = center.pose.camera_center()
    ax_x, ax_y, _ = center.pose.axes()
    out = []
    for j in range(count):
        phi = 2.0 * math.pi * j / count
        pos = cpos + shift * (math.cos(phi) * ax_x + math.sin(phi) * ax_y)
        out.append(center.with_pose(center.pose.with_center(pos), id=-(j + 1)))
    return out


def missing_mask(target: CameraView, known: list[tuple[CameraView, DepthMap]],
                 close_pinholes: bool = False) -> RegionMask:
    """Pixels of ``target`` that no known view splats into.

    Equivalently the intersection of the per-view unseen regions: a pixel is
    missing only if every known view leaves it unhit.
    """
    if not known:
        raise ValueError("need at least one known view")
    covered = np.zeros((target.height, target.width), dtype=bool)
    for view, depth in known:
        hit, out_depth, out_src = _splat(depth, view, target)
        if close_pinholes:
            hit, _, _ = _close_pinholes(hit, out_depth, out_src)
        covered |= hit
        if covered.all():
            break
    return RegionMask(~covered)


# ---------------------------------------------------------------------------
# Trajectories


@dataclass(frozen=True)
class TrajectorySpec:
    """Deterministic pose layouts: a yaw orbit or a yaw/pitch lattice.

    The first generated pose is always the initialization pose (yaw=0,
    pitch=0 at ``position``).
    """

    pattern: str = "orbit"
    steps: int = 8
    yaw_step_deg: float | None = None
    yaws_deg: tuple[float, ...] = (-30.0, 0.0, 30.0)
    pitches_deg: tuple[float, ...] = (-15.0, 0.0, 15.0)
    position: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectorySpec":
        kw = dict(d)
        for key in ("yaws_deg", "pitches_deg", "position"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self) -> dict:
        return {
            "pattern": self.pattern,
            "steps": self.steps,
            "yaw_step_deg": self.yaw_step_deg,
            "yaws_deg": list(self.yaws_deg),
            "pitches_deg": list(self.pitches_deg),
            "position": list(self.position),
        }


def build_trajectory(spec: TrajectorySpec, intrinsics: Intrinsics) -> list[CameraView]:
    """Materialize a trajectory spec into an ordered list of camera views."""
    angles: list[tuple[float, float]] = []
    if spec.pattern == "orbit":
        if spec.steps < 1:
            raise ValueError("orbit needs at least one step")
        step = spec.yaw_step_deg if spec.yaw_step_deg is not None else 360.0 / spec.steps
        angles = [(k * step, 0.0) for k in range(spec.steps)]
    elif spec.pattern == "lattice":
        if not spec.yaws_deg or not spec.pitches_deg:
            raise ValueError("lattice needs yaw and pitch values")
        angles = [(y, p) for p in spec.pitches_deg for y in spec.yaws_deg]
        # Initialization pose first, rest in enumeration order.
        angles.sort(key=lambda a: (a != (0.0, 0.0),))
        if angles[0] != (0.0, 0.0):
            raise ValueError("lattice must include the (0, 0) center pose")
    else:
        raise ValueError(f"unknown trajectory pattern {spec.pattern!r}")
    return [
        CameraView(intrinsics, Pose.from_yaw_pitch(y, p, spec.position), id=i)
        for i, (y, p) in enumerate(angles)
    ]


def angular_distance_deg(a: Pose, b: Pose) -> float:
    """Rotation angle between two camera orientations, in degrees."""
    r = a.rotation @ b.rotation.T
    c = (np.trace(r) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))

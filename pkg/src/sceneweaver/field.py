"""Dense voxel radiance field with differentiable volume rendering.

The grid stores unconstrained pre-activations; density goes through a
softplus and color through a logistic, so the rendered quantities satisfy
sigma >= 0 and rgb in [0, 1] by construction.  View direction is
deliberately not an input: color is position-only.

Rendering uses the standard discrete emission-absorption quadrature with
stratified-center samples (deterministic, no jitter):

    alpha_i = 1 - exp(-sigma_i * delta),  w_i = T_i * alpha_i,
    T_{i+1} = T_i * (1 - alpha_i),        C = sum w_i c_i.

Ray-distance depth is sum w_i t_i; z-depth multiplies by the camera-space
z component per unit ray length (``z_scale``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .camera import CameraView, DepthMap

__all__ = ["RadianceGrid", "Ray", "RenderSample", "render_ray", "render_view",
           "render_with_gradients", "view_rays", "clip_to_bbox"]

DEFAULT_STEPS = 128
DEFAULT_NEAR = 0.05
OPACITY_FLOOR = 0.5


@dataclass
class RadianceGrid:
    """Axis-aligned voxel lattice of pre-activation density and color.

    Node (i, j, k) sits at ``bbox_min + (i, j, k) * spacing``; queries
    interpolate activated values trilinearly and are zero outside the box.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    density: np.ndarray  # (nx, ny, nz)
    color: np.ndarray  # (nx, ny, nz, 3)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.density = np.ascontiguousarray(self.density, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValueError("bounding box must have positive extent on all axes")
        if self.density.ndim != 3 or self.color.shape != self.density.shape + (3,):
            raise ValueError("density must be (nx,ny,nz) and color (nx,ny,nz,3)")
        if min(self.density.shape) < 2:
            raise ValueError("need at least 2 nodes per axis")

    @classmethod
    def create(cls, resolution, bbox_min, bbox_max,
               density_init: float = -4.0, color_init: float = 0.0) -> "RadianceGrid":
        nx, ny, nz = resolution
        return cls(
            np.asarray(bbox_min, dtype=np.float64),
            np.asarray(bbox_max, dtype=np.float64),
            np.full((nx, ny, nz), density_init, dtype=np.float64),
            np.full((nx, ny, nz, 3), color_init, dtype=np.float64),
        )

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density.shape

    @property
    def spacing(self) -> np.ndarray:
        dims = np.asarray(self.density.shape, dtype=np.float64)
        return (self.bbox_max - self.bbox_min) / (dims - 1.0)

    def copy(self) -> "RadianceGrid":
        return RadianceGrid(self.bbox_min.copy(), self.bbox_max.copy(),
                            self.density.copy(), self.color.copy())

    def activations(self) -> "ActivationCache":
        """Activated node values, recomputed from the current parameters."""
        return ActivationCache.from_grid(self)

    def query(self, pts: np.ndarray, cache: "ActivationCache | None" = None):
        """Activated (sigma, rgb) at world points; accepts (3,) or (N, 3)."""
        pts = np.asarray(pts, dtype=np.float64)
        cache = cache or self.activations()
        single = pts.ndim == 1
        sigma, rgb = kernels.query_points(
            cache.sigma, cache.color, self.bbox_min, self.spacing,
            np.ascontiguousarray(pts.reshape(-1, 3)))
        if single:
            return float(sigma[0]), rgb[0]
        return sigma, rgb


@dataclass
class ActivationCache:
    """Activated grids shared between a render pass and its backward pass.

    ``sigma`` = softplus(density), ``dsigma`` = d softplus / d pre =
    logistic(density), ``color`` = logistic(color).  Valid only until the
    grid parameters change.
    """

    sigma: np.ndarray
    dsigma: np.ndarray
    color: np.ndarray

    @classmethod
    def from_grid(cls, grid: "RadianceGrid") -> "ActivationCache":
        p = grid.density
        # One exp serves both softplus and its derivative:
        # softplus(p) = max(p, 0) + log1p(e),  sigmoid(p) = {1/(1+e), e/(1+e)}
        # with e = exp(-|p|).
        e = np.exp(-np.abs(p))
        sig = np.maximum(p, 0.0) + np.log1p(e)
        dsig = np.where(p >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
        q = grid.color
        ec = np.exp(-np.abs(q))
        col = np.where(q >= 0.0, 1.0 / (1.0 + ec), ec / (1.0 + ec))
        return cls(np.ascontiguousarray(sig), np.ascontiguousarray(dsig),
                   np.ascontiguousarray(col))


def query(grid: RadianceGrid, x):
    """Module-level alias for :meth:`RadianceGrid.query`."""
    return grid.query(x)


@dataclass(frozen=True)
class Ray:
    """A sampling segment: origin, unit direction and [t_near, t_far].

    ``z_scale`` converts ray distance to camera z-depth (the camera-space z
    component of the direction per unit length); 1.0 for free-floating rays.
    """

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    z_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64))
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit length, got |d|={n}")
        if not (0 <= self.t_near < self.t_far):
            raise ValueError("need 0 <= t_near < t_far")


@dataclass
class RenderSample:
    """Per-ray render outputs, including the transmittance trace."""

    color: np.ndarray  # (3,)
    ray_depth: float
    z_depth: float
    opacity: float
    transmittance: np.ndarray  # (steps,), T before absorbing sample i
    t_values: np.ndarray  # (steps,) sample positions


def clip_to_bbox(origins, dirs, bbox_min, bbox_max, t_near, t_far):
    """Intersect per-ray [t_near, t_far] with the bounding box slab.

    Rays that miss the box get t0 = t1 = 0 (rendering then yields zero
    opacity and a unit transmittance trace).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (bbox_min - origins) * inv
        tb = (bbox_max - origins) * inv
    # Axes with zero direction: inside the slab -> (-inf, inf), else miss.
    zero = dirs == 0.0
    if zero.any():
        inside = (origins >= bbox_min) & (origins <= bbox_max)
        ta = np.where(zero, np.where(inside, -np.inf, np.inf), ta)
        tb = np.where(zero, np.where(inside, np.inf, -np.inf), tb)
    lo = np.minimum(ta, tb).max(axis=-1)
    hi = np.maximum(ta, tb).min(axis=-1)
    t0 = np.maximum(lo, t_near)
    t1 = np.minimum(hi, t_far)
    miss = ~(t1 > t0)
    t0 = np.where(miss, 0.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return t0, t1


def render_batch(grid: RadianceGrid, origins, dirs, steps: int,
                 near: float = DEFAULT_NEAR, far: float = np.inf,
                 cache: ActivationCache | None = None):
    """Render a flat batch of rays clipped to the grid bounds.

    Returns (colors (R,3), ray_depth (R,), opacity (R,), trace (R,S),
    t0 (R,), t1 (R,)).
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    cache = cache or grid.activations()
    t0, t1 = clip_to_bbox(origins, dirs, grid.bbox_min, grid.bbox_max, near, far)
    colors, ray_depth, opacity, trace = kernels.render_forward(
        cache.sigma, cache.color, grid.bbox_min, grid.spacing,
        origins, dirs, t0, t1, steps)
    return colors, ray_depth, opacity, trace, t0, t1


def grad_batch(grid: RadianceGrid, origins, dirs, t0, t1, steps: int,
               d_color, d_ray_depth, d_trace=None, d_opacity=None,
               cache: ActivationCache | None = None, out=None):
    """Gradients of render_batch outputs w.r.t. grid pre-activations.

    ``d_ray_depth`` is the adjoint of the *ray-distance* depth; callers
    supervising z-depth must fold in their z_scale first.  ``out`` may hold
    (grad_density, grad_color) arrays to accumulate into.
    """
    cache = cache or grid.activations()
    if out is None:
        grad_density = np.zeros_like(grid.density)
        grad_color = np.zeros_like(grid.color)
    else:
        grad_density, grad_color = out
    kernels.render_backward(
        cache.sigma, cache.dsigma, cache.color, grid.bbox_min, grid.spacing,
        np.ascontiguousarray(origins, dtype=np.float64),
        np.ascontiguousarray(dirs, dtype=np.float64),
        np.ascontiguousarray(t0, dtype=np.float64),
        np.ascontiguousarray(t1, dtype=np.float64),
        steps,
        np.ascontiguousarray(d_color, dtype=np.float64),
        np.ascontiguousarray(d_ray_depth, dtype=np.float64),
        None if d_trace is None else np.ascontiguousarray(d_trace, dtype=np.float64),
        grad_density, grad_color,
        None if d_opacity is None else np.ascontiguousarray(d_opacity, dtype=np.float64))
    return grad_density, grad_color


def sample_ts(t0, t1, steps: int):
    """Stratified-center sample positions; the one formula shared by the
    renderer and every loss that needs per-sample t values."""
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    offs = (np.arange(steps, dtype=np.float64) + 0.5) / steps
    return t0[..., None] + offs * (t1 - t0)[..., None]


def render_ray(grid: RadianceGrid, ray: Ray, steps: int = DEFAULT_STEPS) -> RenderSample:
    """Render a single ray (convenience wrapper over the batched kernel)."""
    if steps < 2:
        raise ValueError("need at least 2 samples")
    colors, ray_depth, opacity, trace, t0, t1 = render_batch(
        grid, ray.origin[None], ray.direction[None], steps,
        near=ray.t_near, far=ray.t_far)
    return RenderSample(
        color=colors[0],
        ray_depth=float(ray_depth[0]),
        z_depth=float(ray_depth[0] * ray.z_scale),
        opacity=float(opacity[0]),
        transmittance=trace[0],
        t_values=sample_ts(t0, t1, steps)[0],
    )


def view_rays(view: CameraView):
    """Per-pixel world rays of a view.

    Returns (origins (H,W,3), dirs (H,W,3) unit, z_scale (H,W)) where
    z_scale converts ray distance to camera z-depth.
    """
    k = view.intrinsics
    u = np.arange(k.width, dtype=np.float64)
    v = np.arange(k.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([(uu - k.cx) / k.fx, (vv - k.cy) / k.fy, np.ones_like(uu)], axis=-1)
    norm = np.linalg.norm(d_cam, axis=-1)
    d_world = d_cam @ view.pose.rotation  # == d_cam rows through R^T
    d_world /= norm[..., None]
    origin = view.pose.camera_center()
    origins = np.broadcast_to(origin, d_world.shape).copy()
    return origins, d_world, 1.0 / norm


def ray_for_pixel(view: CameraView, u: float, v: float,
                  near: float = DEFAULT_NEAR, far: float = 1e9) -> Ray:
    k = view.intrinsics
    d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    norm = np.linalg.norm(d_cam)
    d_world = view.pose.rotation.T @ (d_cam / norm)
    return Ray(view.pose.camera_center(), d_world, near, far, z_scale=1.0 / norm)


def render_view(grid: RadianceGrid, view: CameraView, steps: int = DEFAULT_STEPS,
                near: float = DEFAULT_NEAR, opacity_floor: float = OPACITY_FLOOR,
                normalize_depth: bool = True):
    """Render color/depth/opacity images of a full view.

    The depth map stores z-depth and marks pixels below the opacity floor
    invalid (nothing solid was hit along those rays).  By default depth is
    normalized by the accumulated opacity: the raw quadrature sum w_i t_i
    underestimates the surface depth by (1 - opacity) * z whenever rays are
    not fully saturated, which would bias every consumer of rendered depth
    (DIBR warps, alignment anchors).  The training loss deliberately uses
    the raw quantity instead.
    """
    h, w = view.height, view.width
    origins, dirs, z_scale = view_rays(view)
    colors, ray_depth, opacity, _, _, _ = render_batch(
        grid, origins.reshape(-1, 3), dirs.reshape(-1, 3), steps, near=near)
    image = colors.reshape(h, w, 3)
    op = opacity.reshape(h, w)
    z = ray_depth.reshape(h, w) * z_scale
    if normalize_depth:
        z = z / np.maximum(op, 1e-12)
    valid = (op >= opacity_floor) & (z > 0)
    return image, DepthMap(np.where(valid, z, 0.0), valid), op


def render_with_gradients(grid: RadianceGrid, view: CameraView, steps: int,
                          d_color, d_z_depth, d_trace=None, near: float = DEFAULT_NEAR):
    """Full-view adjoint rendering: per-pixel adjoints of color, z-depth and
    (optionally) the transmittance trace, to grid parameter gradients."""
    h, w = view.height, view.width
    d_color = np.asarray(d_color, dtype=np.float64)
    d_z = np.asarray(d_z_depth, dtype=np.float64)
    if d_color.shape != (h, w, 3) or d_z.shape != (h, w):
        raise ValueError("adjoint shapes must match the view resolution")
    if d_trace is not None:
        d_trace = np.asarray(d_trace, dtype=np.float64)
        if d_trace.shape != (h, w, steps):
            raise ValueError("trace adjoint must be (H, W, steps)")
        d_trace = d_trace.reshape(-1, steps)
    origins, dirs, z_scale = view_rays(view)
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    t0, t1 = clip_to_bbox(o, d, grid.bbox_min, grid.bbox_max, near, np.inf)
    d_ray_depth = (d_z * z_scale).reshape(-1)
    return grad_batch(grid, o, d, t0, t1, steps,
                      d_color.reshape(-1, 3), d_ray_depth, d_trace)

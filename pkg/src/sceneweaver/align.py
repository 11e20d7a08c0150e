"""Two-stage alignment of estimated depth to rendered depth.

Stage one removes the mean scale and offset disparity: random pixel pairs
are back-projected under both maps, the scale is the mean ratio of
consecutive pair distances and the offset the mean residual z after
scaling, giving D_global = s * D_est + delta.

Stage two fits a low-resolution lattice of per-node (scale, offset)
corrections, bilinearly interpolated over the image, by linear least
squares on the overlap plus a smoothness penalty on node differences.
The correction therefore extrapolates smoothly into regions the rendered
map never saw.  A synthetic distortion generator for testing applies
(D + tau1) * D^(1/tau2) with shift tau1 in [0, 1] and scale tau2 in
[30, 50].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraView, DepthMap

__all__ = [
    "PointPairs",
    "GlobalAlignment",
    "CorrectionField",
    "AlignmentError",
    "sample_pairs",
    "global_align",
    "local_align",
    "align_two_stage",
    "distort_depth",
]

SCALE_FLOOR = 1e-3
RIDGE = 1e-9


class AlignmentError(RuntimeError):
    """Raised when alignment is impossible (empty overlap, degenerate pairs)."""


@dataclass
class PointPairs:
    """Back-projected (rendered, estimated) camera-space points per pixel.

    Both members of a pair lie on the same pixel ray, so x/z and y/z agree;
    z carries the depth disagreement.
    """

    x_rendered: np.ndarray  # (M, 3)
    x_estimated: np.ndarray  # (M, 3)
    pixels: np.ndarray  # (M, 2) as (u, v)

    def __len__(self) -> int:
        return self.x_rendered.shape[0]


@dataclass(frozen=True)
class GlobalAlignment:
    """Affine depth correction: aligned = scale * depth + offset."""

    scale: float
    offset: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def apply(self, depth: DepthMap) -> DepthMap:
        vals = self.scale * depth.values + self.offset
        # Alignment never alters validity; floor guards the positivity
        # invariant against non-physical fits.
        vals = np.where(depth.valid, np.maximum(vals, 1e-9), 0.0)
        return DepthMap(vals, depth.valid.copy())

    @classmethod
    def identity(cls) -> "GlobalAlignment":
        return cls(1.0, 0.0)


def _back_project(view: CameraView, depth_values, pixels):
    k = view.intrinsics
    u = pixels[:, 0].astype(np.float64)
    v = pixels[:, 1].astype(np.float64)
    z = depth_values[pixels[:, 1], pixels[:, 0]]
    return np.stack([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z], axis=1)


def sample_pairs(rendered: DepthMap, estimated: DepthMap, overlap: np.ndarray,
                 view: CameraView, max_pairs: int = 10_000, seed: int = 0) -> PointPairs:
    """Uniform sample (without replacement) of min(|overlap|, max_pairs)
    pixel pairs, back-projected under both depth maps."""
    overlap = np.asarray(overlap, dtype=bool)
    vv, uu = np.nonzero(overlap & rendered.valid & estimated.valid)
    if vv.size == 0:
        raise AlignmentError("empty overlap: no pixel valid in both depth maps")
    m = min(vv.size, max_pairs)
    rng = np.random.Generator(np.random.PCG64(seed))
    pick = rng.choice(vv.size, size=m, replace=False)
    pixels = np.stack([uu[pick], vv[pick]], axis=1)
    return PointPairs(
        x_rendered=_back_project(view, rendered.values, pixels),
        x_estimated=_back_project(view, estimated.values, pixels),
        pixels=pixels,
    )


def global_align(pairs: PointPairs) -> GlobalAlignment:
    """Mean scale from consecutive pair distances, then the mean z offset.

    Consecutive pairs whose estimated points coincide are skipped; if all
    are degenerate the scale is undefined and an error is raised.
    """
    if len(pairs) < 2:
        raise AlignmentError("need at least two pairs for the scale estimate")
    dr = np.linalg.norm(np.diff(pairs.x_rendered, axis=0), axis=1)
    de = np.linalg.norm(np.diff(pairs.x_estimated, axis=0), axis=1)
    keep = de >= 1e-9
    if not keep.any():
        raise AlignmentError("all consecutive estimated pairs are coincident")
    scale = float(np.mean(dr[keep] / de[keep]))
    offset = float(np.mean(pairs.x_rendered[:, 2] - scale * pairs.x_estimated[:, 2]))
    return GlobalAlignment(scale, offset)


@dataclass
class CorrectionField:
    """Lattice of per-node (scale, offset), bilinear over the image."""

    node_scale: np.ndarray  # (gh, gw)
    node_offset: np.ndarray  # (gh, gw)
    height: int
    width: int

    def __post_init__(self):
        if np.any(~np.isfinite(self.node_scale)) or np.any(~np.isfinite(self.node_offset)):
            raise ValueError("correction nodes must be finite")
        if np.any(self.node_scale <= 0):
            raise ValueError("interpolated scale must stay positive")

    @classmethod
    def identity(cls, height: int, width: int, grid_shape=(17, 17)) -> "CorrectionField":
        gh, gw = grid_shape
        return cls(np.ones((gh, gw)), np.zeros((gh, gw)), height, width)

    def _basis(self):
        """Bilinear weights of every pixel on the 4 surrounding nodes.

        Returns (iy, ix, wy, wx) with iy/ix the lower node index per pixel
        row/column and wy/wx the fractional weights toward the upper node.
        """
        gh, gw = self.node_scale.shape
        ys = np.arange(self.height) * (gh - 1) / max(self.height - 1, 1)
        xs = np.arange(self.width) * (gw - 1) / max(self.width - 1, 1)
        iy = np.minimum(ys.astype(np.int64), gh - 2)
        ix = np.minimum(xs.astype(np.int64), gw - 2)
        return iy, ix, ys - iy, xs - ix

    def maps(self):
        """Full-resolution (scale, offset) images."""
        iy, ix, wy, wx = self._basis()
        out = []
        for nodes in (self.node_scale, self.node_offset):
            top = nodes[iy][:, ix] * (1 - wx) + nodes[iy][:, ix + 1] * wx
            bot = nodes[iy + 1][:, ix] * (1 - wx) + nodes[iy + 1][:, ix + 1] * wx
            out.append(top * (1 - wy)[:, None] + bot * wy[:, None])
        return out[0], out[1]

    def apply(self, depth: DepthMap) -> DepthMap:
        s, o = self.maps()
        vals = np.where(depth.valid, np.maximum(s * depth.values + o, 1e-9), 0.0)
        return DepthMap(vals, depth.valid.copy())


def local_align(d_global: DepthMap, rendered: DepthMap, overlap: np.ndarray,
                grid_shape=(17, 17), smoothness: float = 0.1):
    """Fit the correction field minimizing the squared overlap residual
    plus ``smoothness`` times the squared differences of adjacent nodes.

    The problem is linear in the node values, so the global optimum comes
    from one normal-equation solve; the overlap residual can therefore
    never exceed the identity field's (= the global-only) residual.

    Returns (aligned DepthMap over the full image, CorrectionField).
    """
    overlap = np.asarray(overlap, dtype=bool) & d_global.valid & rendered.valid
    if not overlap.any():
        raise AlignmentError("empty overlap for local alignment")
    gh, gw = grid_shape
    n_nodes = gh * gw
    field = CorrectionField.identity(d_global.shape[0], d_global.shape[1], grid_shape)
    iy, ix, wy, wx = field._basis()

    vv, uu = np.nonzero(overlap)
    d = d_global.values[vv, uu]
    r = rendered.values[vv, uu]
    # Per-pixel bilinear weights on the 4 surrounding nodes.
    y0, x0 = iy[vv], ix[uu]
    fy, fx = wy[vv], wx[uu]
    nodes = np.stack([
        y0 * gw + x0,
        y0 * gw + x0 + 1,
        (y0 + 1) * gw + x0,
        (y0 + 1) * gw + x0 + 1,
    ], axis=1)  # (P, 4)
    wgt = np.stack([
        (1 - fy) * (1 - fx),
        (1 - fy) * fx,
        fy * (1 - fx),
        fy * fx,
    ], axis=1)  # (P, 4)

    # Unknowns theta = [scales (n_nodes), offsets (n_nodes)]; row per pixel:
    # sum_k w_k * d * s_k + sum_k w_k * o_k = r
    cols = np.concatenate([nodes, nodes + n_nodes], axis=1)  # (P, 8)
    coef = np.concatenate([wgt * d[:, None], wgt], axis=1)  # (P, 8)

    ata = np.zeros((2 * n_nodes, 2 * n_nodes))
    atb = np.zeros(2 * n_nodes)
    # Accumulate A^T A from the 8x8 outer products of each pixel row.
    outer = coef[:, :, None] * coef[:, None, :]  # (P, 8, 8)
    rows_idx = np.repeat(cols[:, :, None], 8, axis=2)
    cols_idx = np.repeat(cols[:, None, :], 8, axis=1)
    np.add.at(ata, (rows_idx.reshape(-1), cols_idx.reshape(-1)), outer.reshape(-1))
    np.add.at(atb, cols.reshape(-1), (coef * r[:, None]).reshape(-1))

    # Smoothness: mu * sum over adjacent node pairs (theta_a - theta_b)^2,
    # applied to both channels.
    pairs = []
    for y in range(gh):
        for x in range(gw):
            if x + 1 < gw:
                pairs.append((y * gw + x, y * gw + x + 1))
            if y + 1 < gh:
                pairs.append((y * gw + x, (y + 1) * gw + x))
    for a, b in pairs:
        for off in (0, n_nodes):
            ata[a + off, a + off] += smoothness
            ata[b + off, b + off] += smoothness
            ata[a + off, b + off] -= smoothness
            ata[b + off, a + off] -= smoothness

    # Tiny ridge anchored at the identity field keeps the system definite
    # when the overlap under-constrains distant nodes.
    ata[np.diag_indices_from(ata)] += RIDGE
    atb[:n_nodes] += RIDGE * 1.0

    theta = np.linalg.solve(ata, atb)
    scale_nodes = np.maximum(theta[:n_nodes].reshape(gh, gw), SCALE_FLOOR)
    offset_nodes = theta[n_nodes:].reshape(gh, gw)
    if not (np.all(np.isfinite(scale_nodes)) and np.all(np.isfinite(offset_nodes))):
        raise AlignmentError("local alignment produced non-finite node values")
    field = CorrectionField(scale_nodes, offset_nodes, d_global.shape[0], d_global.shape[1])
    return field.apply(d_global), field


def align_two_stage(rendered: DepthMap, estimated: DepthMap, view: CameraView,
                    max_pairs: int = 10_000, seed: int = 0,
                    grid_shape=(17, 17), smoothness: float = 0.1):
    """Global then local alignment of ``estimated`` onto ``rendered``.

    Returns (aligned DepthMap, GlobalAlignment, CorrectionField).  Raises
    AlignmentError when the maps share no valid pixels (callers fall back
    to identity alignment).
    """
    overlap = rendered.valid & estimated.valid
    pairs = sample_pairs(rendered, estimated, overlap, view, max_pairs, seed)
    ga = global_align(pairs)
    d_global = ga.apply(estimated)
    aligned, field = local_align(d_global, rendered, overlap, grid_shape, smoothness)
    return aligned, ga, field


def distort_depth(depth: DepthMap, tau1: float | None = None,
                  tau2: float | None = None, seed: int = 0) -> DepthMap:
    """Synthetic non-linear depth distortion (D + tau1) * D^(1/tau2).

    Unset parameters are sampled from their calibration ranges, tau1 in
    [0, 1] and tau2 in [30, 50]; validity is preserved.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    if tau1 is None:
        tau1 = float(rng.uniform(0.0, 1.0))
    if tau2 is None:
        tau2 = float(rng.uniform(30.0, 50.0))
    if tau2 <= 0:
        raise ValueError("tau2 must be positive")
    vals = depth.values
    out = np.where(depth.valid, (vals + tau1) * np.power(vals, 1.0 / tau2,
                                                         where=depth.valid,
                                                         out=np.ones_like(vals)), 0.0)
    return DepthMap(out, depth.valid.copy())

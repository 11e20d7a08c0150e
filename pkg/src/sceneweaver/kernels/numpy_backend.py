"""Pure-numpy implementations of the ray-march kernels.

The compiled extension in ``_native.pyx`` mirrors these functions exactly
(same formulas, same accumulation order per ray); this module is the
portable fallback and the reference the parity tests compare against.

All kernels consume *activated* grids, precomputed once per optimization
step by the caller (sigma = softplus(density), its derivative, and
logistic color).  Grid layout: node (i, j, k) of an (nx, ny, nz) lattice
sits at ``bbox_min + (i, j, k) * spacing``; queries interpolate
trilinearly and return zero density / black outside the lattice.
"""

from __future__ import annotations

import numpy as np

_EPS = 1e-9  # slack for points nominally on the lattice boundary
_CHUNK = 1024  # rays per block, keeps corner gathers small


def _locate(pts, bbox_min, spacing, dims):
    """Trilinear cell indices and weights for a batch of points.

    Returns (i0 (N,3) int, frac (N,3), inside (N,)).
    """
    g = (pts - bbox_min) / spacing
    hi = np.asarray(dims, dtype=np.float64) - 1.0
    inside = np.all((g >= -_EPS) & (g <= hi + _EPS), axis=-1)
    g = np.clip(g, 0.0, hi)
    i0 = np.minimum(g.astype(np.int64), (np.asarray(dims) - 2))
    frac = g - i0
    return i0, frac, inside


_CORNERS = np.array(
    [[0, 0, 0], [0, 0, 1], [0, 1, 0], [0, 1, 1], [1, 0, 0], [1, 0, 1], [1, 1, 0], [1, 1, 1]],
    dtype=np.int64,
)


def _corner_weights(frac):
    fx, fy, fz = frac[..., 0], frac[..., 1], frac[..., 2]
    wx = np.stack([1.0 - fx, fx], axis=-1)
    wy = np.stack([1.0 - fy, fy], axis=-1)
    wz = np.stack([1.0 - fz, fz], axis=-1)
    # (N, 8) in _CORNERS order
    return (
        wx[..., _CORNERS[:, 0]] * wy[..., _CORNERS[:, 1]] * wz[..., _CORNERS[:, 2]]
    )


def query_points(act_sigma, act_color, bbox_min, spacing, pts):
    """Interpolated (sigma, rgb) at arbitrary points; zero outside the grid.

    Args:
        act_sigma: (nx, ny, nz) activated density grid.
        act_color: (nx, ny, nz, 3) activated color grid.
        pts: (N, 3) world points.
    """
    pts = np.asarray(pts, dtype=np.float64)
    dims = act_sigma.shape
    i0, frac, inside = _locate(pts, bbox_min, spacing, dims)
    w = _corner_weights(frac)  # (N, 8)
    ci = i0[:, None, :] + _CORNERS[None, :, :]  # (N, 8, 3)
    d8 = act_sigma[ci[..., 0], ci[..., 1], ci[..., 2]]
    c8 = act_color[ci[..., 0], ci[..., 1], ci[..., 2], :]
    sigma = (w * d8).sum(axis=1)
    rgb = (w[..., None] * c8).sum(axis=1)
    sigma[~inside] = 0.0
    rgb[~inside] = 0.0
    return sigma, rgb


def _sample_ts(t0, t1, n_steps):
    delta = (t1 - t0) / n_steps  # (R,)
    offs = (np.arange(n_steps, dtype=np.float64) + 0.5)[None, :]
    return t0[:, None] + offs * delta[:, None], delta


def render_forward(act_sigma, act_color, bbox_min, spacing, origins, dirs, t0, t1, n_steps):
    """Emission-absorption quadrature along rays.

    Rays use ``n_steps`` stratified-center samples on [t0, t1]; rays with
    t1 <= t0 produce zero opacity and a unit transmittance trace.

    Returns:
        colors (R, 3), ray_depth (R,), opacity (R,), trace (R, S) where
        trace[:, i] is the transmittance *before* absorbing sample i.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    n_rays = origins.shape[0]

    colors = np.zeros((n_rays, 3))
    ray_depth = np.zeros(n_rays)
    opacity = np.zeros(n_rays)
    trace = np.ones((n_rays, n_steps))
    for lo in range(0, n_rays, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, n_rays))
        t, delta = _sample_ts(t0[sl], t1[sl], n_steps)
        pts = origins[sl, None, :] + t[..., None] * dirs[sl, None, :]
        sigma, rgb = query_points(act_sigma, act_color, bbox_min, spacing, pts.reshape(-1, 3))
        r = t.shape[0]
        sigma = sigma.reshape(r, n_steps)
        rgb = rgb.reshape(r, n_steps, 3)
        alpha = -np.expm1(-sigma * delta[:, None])
        tr = np.cumprod(1.0 - alpha, axis=1)
        tr = np.concatenate([np.ones((r, 1)), tr[:, :-1]], axis=1)
        w = tr * alpha
        colors[sl] = (w[..., None] * rgb).sum(axis=1)
        ray_depth[sl] = (w * t).sum(axis=1)
        opacity[sl] = w.sum(axis=1)
        trace[sl] = tr
    return colors, ray_depth, opacity, trace


def render_backward(
    act_sigma,
    dact_sigma,
    act_color,
    bbox_min,
    spacing,
    origins,
    dirs,
    t0,
    t1,
    n_steps,
    d_color,
    d_depth,
    d_trace,
    grad_density,
    grad_color,
    d_opacity=None,
):
    """Accumulate exact reverse-mode gradients of :func:`render_forward`.

    ``dact_sigma`` is the derivative of the density activation at each node
    (the logistic of the pre-activation); the color chain rule uses
    c * (1 - c) from the activated color directly.  Adjoints: d_color (R, 3)
    w.r.t. the composited color, d_depth (R,) w.r.t. ray-distance depth,
    d_trace (R, S) or None w.r.t. the transmittance trace, d_opacity (R,)
    or None w.r.t. the accumulated opacity.  Gradients are *added* into
    grad_density / grad_color (pre-activation space).
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    d_color = np.asarray(d_color, dtype=np.float64)
    d_depth = np.asarray(d_depth, dtype=np.float64)
    n_rays = origins.shape[0]
    dims = act_sigma.shape

    for lo in range(0, n_rays, _CHUNK):
        sl = slice(lo, min(lo + _CHUNK, n_rays))
        t, delta = _sample_ts(t0[sl], t1[sl], n_steps)
        r = t.shape[0]
        pts = origins[sl, None, :] + t[..., None] * dirs[sl, None, :]
        i0, frac, inside = _locate(pts.reshape(-1, 3), bbox_min, spacing, dims)
        w8 = _corner_weights(frac).reshape(r, n_steps, 8)
        ci = (i0[:, None, :] + _CORNERS[None, :, :]).reshape(r, n_steps, 8, 3)
        inside = inside.reshape(r, n_steps)

        d8 = act_sigma[ci[..., 0], ci[..., 1], ci[..., 2]]  # (r, S, 8)
        sigma = np.where(inside, (w8 * d8).sum(axis=2), 0.0)
        alpha = -np.expm1(-sigma * delta[:, None])
        trace = np.cumprod(1.0 - alpha, axis=1)
        trace = np.concatenate([np.ones((r, 1)), trace[:, :-1]], axis=1)
        wgt = trace * alpha

        c8 = act_color[ci[..., 0], ci[..., 1], ci[..., 2], :]  # (r, S, 8, 3)
        rgb = np.where(inside[..., None], (w8[..., None] * c8).sum(axis=2), 0.0)

        # dL/dw_i and color-node gradients (independent of the recurrence).
        dldw = (d_color[sl, None, :] * rgb).sum(axis=2) + d_depth[sl, None] * t
        if d_opacity is not None:
            dldw = dldw + np.asarray(d_opacity, dtype=np.float64)[sl, None]
        dc = wgt[..., None] * d_color[sl, None, :]  # (r, S, 3) = dL/drgb_i
        dcpre = (
            w8[..., None] * (c8 * (1.0 - c8))
            * np.where(inside[..., None, None], dc[:, :, None, :], 0.0)
        )

        # Reverse recurrence over steps for density gradients.
        dtr = None if d_trace is None else np.asarray(d_trace, dtype=np.float64)[sl]
        g = np.zeros(r)  # dL/dT_{i+1}, running
        dsig = np.empty((r, n_steps))
        for i in range(n_steps - 1, -1, -1):
            da = trace[:, i] * (dldw[:, i] - g)
            gi = dldw[:, i] * alpha[:, i] + g * (1.0 - alpha[:, i])
            if dtr is not None:
                gi = gi + dtr[:, i]
            g = gi
            dsig[:, i] = da * delta * (1.0 - alpha[:, i])
        dsig[~inside] = 0.0
        dd8 = dact_sigma[ci[..., 0], ci[..., 1], ci[..., 2]]
        ddpre = w8 * dd8 * dsig[..., None]  # (r, S, 8)

        flat = ci.reshape(-1, 3)
        np.add.at(grad_density, (flat[:, 0], flat[:, 1], flat[:, 2]), ddpre.reshape(-1))
        np.add.at(grad_color, (flat[:, 0], flat[:, 1], flat[:, 2]), dcpre.reshape(-1, 3))


def adam_step_density(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2, act, dact):
    """Fused Adam step on the density grid + activation refresh.

    Same update as the compiled kernel; all writes go through ``out=`` so
    repeated calls do not churn the allocator.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    denom = np.sqrt(v * bias2)
    denom += eps
    param -= lr * (m * bias1) / denom
    # softplus(p) = max(p, 0) + log1p(e), sigmoid from the same e = exp(-|p|)
    e = np.exp(-np.abs(param))
    np.log1p(e, out=act)
    act += np.maximum(param, 0.0)
    np.divide(1.0, 1.0 + e, out=dact)
    neg = param < 0
    dact[neg] = e[neg] / (1.0 + e[neg])


def adam_step_color(param, grad, m, v, lr, beta1, beta2, eps, bias1, bias2, act):
    """Fused Adam step on the color grid + logistic refresh."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    denom = np.sqrt(v * bias2)
    denom += eps
    param -= lr * (m * bias1) / denom
    e = np.exp(-np.abs(param))
    np.divide(1.0, 1.0 + e, out=act)
    neg = param < 0
    act[neg] = e[neg] / (1.0 + e[neg])

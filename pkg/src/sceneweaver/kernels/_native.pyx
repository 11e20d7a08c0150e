# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled ray-march kernels.

Mirrors ``numpy_backend`` function by function: same sampling, same
formulas, same per-ray accumulation order.  Rays are processed
sequentially so gradient accumulation is deterministic.  All kernels take
activated grids (plus the density-activation derivative for the backward
pass), so the inner loops are pure gathers and multiply-adds.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, expm1, log1p, sqrt

cnp.import_array()

DEF BOUNDARY_EPS = 1e-9


cdef inline bint _locate(double px, double bmin, double inv_h, Py_ssize_t n,
                         Py_ssize_t* i0, double* frac) nogil:
    cdef double g = (px - bmin) * inv_h
    cdef double hi = <double>(n - 1)
    cdef Py_ssize_t i
    if g < -BOUNDARY_EPS or g > hi + BOUNDARY_EPS:
        return False
    if g < 0.0:
        g = 0.0
    elif g > hi:
        g = hi
    i = <Py_ssize_t>g
    if i > n - 2:
        i = n - 2
    i0[0] = i
    frac[0] = g - <double>i
    return True


cdef inline void _corner_offsets(Py_ssize_t ny, Py_ssize_t nz, Py_ssize_t* off) nogil:
    """Flat-index offsets of the 8 cell corners in _CORNERS order."""
    cdef Py_ssize_t sx = ny * nz
    off[0] = 0
    off[1] = 1
    off[2] = nz
    off[3] = nz + 1
    off[4] = sx
    off[5] = sx + 1
    off[6] = sx + nz
    off[7] = sx + nz + 1


cdef inline bint _cell(const double* p, const double* bmin, const double* inv_h,
                       Py_ssize_t nx, Py_ssize_t ny, Py_ssize_t nz,
                       Py_ssize_t* ix, Py_ssize_t* iy, Py_ssize_t* iz,
                       double* w8) nogil:
    """Corner weights of the trilinear cell containing p (8 weights in the
    (dx, dy, dz) binary order of numpy_backend._CORNERS)."""
    cdef double fx, fy, fz
    if not _locate(p[0], bmin[0], inv_h[0], nx, ix, &fx):
        return False
    if not _locate(p[1], bmin[1], inv_h[1], ny, iy, &fy):
        return False
    if not _locate(p[2], bmin[2], inv_h[2], nz, iz, &fz):
        return False
    w8[0] = (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
    w8[1] = (1.0 - fx) * (1.0 - fy) * fz
    w8[2] = (1.0 - fx) * fy * (1.0 - fz)
    w8[3] = (1.0 - fx) * fy * fz
    w8[4] = fx * (1.0 - fy) * (1.0 - fz)
    w8[5] = fx * (1.0 - fy) * fz
    w8[6] = fx * fy * (1.0 - fz)
    w8[7] = fx * fy * fz
    return True


def query_points(double[:, :, ::1] act_sigma, double[:, :, :, ::1] act_color,
                 double[::1] bbox_min, double[::1] spacing,
                 double[:, ::1] pts):
    """Interpolated density/color at arbitrary points; zero outside."""
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t nx = act_sigma.shape[0], ny = act_sigma.shape[1], nz = act_sigma.shape[2]
    sigma_arr = np.zeros(n, dtype=np.float64)
    rgb_arr = np.zeros((n, 3), dtype=np.float64)
    cdef double[::1] sigma = sigma_arr
    cdef double[:, ::1] rgb = rgb_arr
    cdef double inv_h[3]
    inv_h[0] = 1.0 / spacing[0]; inv_h[1] = 1.0 / spacing[1]; inv_h[2] = 1.0 / spacing[2]
    cdef Py_ssize_t k, c, ci, cj, ck, ix, iy, iz
    cdef double w8[8]
    cdef double p[3]
    cdef double s, r0, r1, r2, w
    with nogil:
        for k in range(n):
            p[0] = pts[k, 0]; p[1] = pts[k, 1]; p[2] = pts[k, 2]
            if not _cell(p, &bbox_min[0], inv_h, nx, ny, nz, &ix, &iy, &iz, w8):
                continue
            s = 0.0; r0 = 0.0; r1 = 0.0; r2 = 0.0
            for c in range(8):
                ci = ix + (c >> 2); cj = iy + ((c >> 1) & 1); ck = iz + (c & 1)
                w = w8[c]
                s += w * act_sigma[ci, cj, ck]
                r0 += w * act_color[ci, cj, ck, 0]
                r1 += w * act_color[ci, cj, ck, 1]
                r2 += w * act_color[ci, cj, ck, 2]
            sigma[k] = s
            rgb[k, 0] = r0; rgb[k, 1] = r1; rgb[k, 2] = r2
    return sigma_arr, rgb_arr


def render_forward(double[:, :, ::1] act_sigma, double[:, :, :, ::1] act_color,
                   double[::1] bbox_min, double[::1] spacing,
                   double[:, ::1] origins, double[:, ::1] dirs,
                   double[::1] t0, double[::1] t1, int n_steps):
    """Emission-absorption quadrature; see numpy_backend.render_forward."""
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t nx = act_sigma.shape[0], ny = act_sigma.shape[1], nz = act_sigma.shape[2]
    colors_arr = np.zeros((n_rays, 3), dtype=np.float64)
    depth_arr = np.zeros(n_rays, dtype=np.float64)
    opacity_arr = np.zeros(n_rays, dtype=np.float64)
    trace_arr = np.ones((n_rays, n_steps), dtype=np.float64)
    cdef double[:, ::1] colors = colors_arr
    cdef double[::1] depth = depth_arr
    cdef double[::1] opacity = opacity_arr
    cdef double[:, ::1] trace = trace_arr
    cdef double inv_h[3]
    inv_h[0] = 1.0 / spacing[0]; inv_h[1] = 1.0 / spacing[1]; inv_h[2] = 1.0 / spacing[2]
    cdef Py_ssize_t r, i, c, ix, iy, iz, base
    cdef Py_ssize_t off[8]
    _corner_offsets(ny, nz, off)
    cdef const double* sig_p = &act_sigma[0, 0, 0]
    cdef const double* col_p = &act_color[0, 0, 0, 0]
    cdef const double* cp
    cdef double w8[8]
    cdef double p[3]
    cdef double delta, t, tr, sigma, alpha, wgt, r0, r1, r2, w
    cdef double acc_c0, acc_c1, acc_c2, acc_d, acc_o
    with nogil:
        for r in range(n_rays):
            delta = (t1[r] - t0[r]) / n_steps
            tr = 1.0
            acc_c0 = 0.0; acc_c1 = 0.0; acc_c2 = 0.0; acc_d = 0.0; acc_o = 0.0
            for i in range(n_steps):
                t = t0[r] + (i + 0.5) * delta
                trace[r, i] = tr
                p[0] = origins[r, 0] + t * dirs[r, 0]
                p[1] = origins[r, 1] + t * dirs[r, 1]
                p[2] = origins[r, 2] + t * dirs[r, 2]
                sigma = 0.0; r0 = 0.0; r1 = 0.0; r2 = 0.0
                if _cell(p, &bbox_min[0], inv_h, nx, ny, nz, &ix, &iy, &iz, w8):
                    base = (ix * ny + iy) * nz + iz
                    for c in range(8):
                        w = w8[c]
                        sigma += w * sig_p[base + off[c]]
                        cp = col_p + 3 * (base + off[c])
                        r0 += w * cp[0]
                        r1 += w * cp[1]
                        r2 += w * cp[2]
                alpha = -expm1(-sigma * delta)
                wgt = tr * alpha
                acc_c0 += wgt * r0
                acc_c1 += wgt * r1
                acc_c2 += wgt * r2
                acc_d += wgt * t
                acc_o += wgt
                tr *= 1.0 - alpha
            colors[r, 0] = acc_c0; colors[r, 1] = acc_c1; colors[r, 2] = acc_c2
            depth[r] = acc_d
            opacity[r] = acc_o
    return colors_arr, depth_arr, opacity_arr, trace_arr


def render_backward(double[:, :, ::1] act_sigma, double[:, :, ::1] dact_sigma,
                    double[:, :, :, ::1] act_color,
                    double[::1] bbox_min, double[::1] spacing,
                    double[:, ::1] origins, double[:, ::1] dirs,
                    double[::1] t0, double[::1] t1, int n_steps,
                    double[:, ::1] d_color, double[::1] d_depth, d_trace,
                    double[:, :, ::1] grad_density, double[:, :, :, ::1] grad_color,
                    d_opacity=None):
    """Exact reverse-mode gradients of render_forward, accumulated in place.

    Adjoints cover the composited color, the ray-distance depth, the
    transmittance trace and (optionally) the accumulated opacity.  Per
    ray: a forward sweep recomputes transmittance, then a reverse sweep
    applies the chain rule through the alpha-compositing recurrence and
    scatters into the pre-activation grids.
    """
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t nx = act_sigma.shape[0], ny = act_sigma.shape[1], nz = act_sigma.shape[2]
    cdef bint has_trace = d_trace is not None
    cdef double[:, ::1] dtr_mv
    if has_trace:
        dtr_mv = np.ascontiguousarray(d_trace, dtype=np.float64)
    cdef bint has_op = d_opacity is not None
    cdef double[::1] dop_mv
    if has_op:
        dop_mv = np.ascontiguousarray(d_opacity, dtype=np.float64)

    scratch_alpha = np.empty(n_steps, dtype=np.float64)
    scratch_trace = np.empty(n_steps, dtype=np.float64)
    scratch_rgb = np.empty((n_steps, 3), dtype=np.float64)
    cdef double[::1] alpha_s = scratch_alpha
    cdef double[::1] trace_s = scratch_trace
    cdef double[:, ::1] rgb_s = scratch_rgb
    cdef double inv_h[3]
    inv_h[0] = 1.0 / spacing[0]; inv_h[1] = 1.0 / spacing[1]; inv_h[2] = 1.0 / spacing[2]

    cdef Py_ssize_t r, i, c, ix, iy, iz, base, o3
    cdef Py_ssize_t off[8]
    _corner_offsets(ny, nz, off)
    cdef const double* sig_p = &act_sigma[0, 0, 0]
    cdef const double* dsig_p = &dact_sigma[0, 0, 0]
    cdef const double* col_p = &act_color[0, 0, 0, 0]
    cdef double* gd_p = &grad_density[0, 0, 0]
    cdef double* gc_p = &grad_color[0, 0, 0, 0]
    cdef double w8[8]
    cdef double p[3]
    cdef double delta, t, tr, sigma, alpha, w, cv, g, da, dldw, dsig, wgt
    cdef double dc0, dc1, dc2, dop
    with nogil:
        for r in range(n_rays):
            delta = (t1[r] - t0[r]) / n_steps
            tr = 1.0
            for i in range(n_steps):
                t = t0[r] + (i + 0.5) * delta
                trace_s[i] = tr
                p[0] = origins[r, 0] + t * dirs[r, 0]
                p[1] = origins[r, 1] + t * dirs[r, 1]
                p[2] = origins[r, 2] + t * dirs[r, 2]
                sigma = 0.0
                rgb_s[i, 0] = 0.0; rgb_s[i, 1] = 0.0; rgb_s[i, 2] = 0.0
                if _cell(p, &bbox_min[0], inv_h, nx, ny, nz, &ix, &iy, &iz, w8):
                    base = (ix * ny + iy) * nz + iz
                    for c in range(8):
                        w = w8[c]
                        sigma += w * sig_p[base + off[c]]
                        o3 = 3 * (base + off[c])
                        rgb_s[i, 0] += w * col_p[o3]
                        rgb_s[i, 1] += w * col_p[o3 + 1]
                        rgb_s[i, 2] += w * col_p[o3 + 2]
                alpha = -expm1(-sigma * delta)
                alpha_s[i] = alpha
                tr *= 1.0 - alpha

            # Reverse sweep: g carries dL/dT_{i+1}.
            g = 0.0
            dc0 = d_color[r, 0]; dc1 = d_color[r, 1]; dc2 = d_color[r, 2]
            dop = dop_mv[r] if has_op else 0.0
            for i in range(n_steps - 1, -1, -1):
                t = t0[r] + (i + 0.5) * delta
                dldw = (dc0 * rgb_s[i, 0] + dc1 * rgb_s[i, 1]
                        + dc2 * rgb_s[i, 2] + d_depth[r] * t + dop)
                da = trace_s[i] * (dldw - g)
                g = dldw * alpha_s[i] + g * (1.0 - alpha_s[i])
                if has_trace:
                    g += dtr_mv[r, i]
                p[0] = origins[r, 0] + t * dirs[r, 0]
                p[1] = origins[r, 1] + t * dirs[r, 1]
                p[2] = origins[r, 2] + t * dirs[r, 2]
                if not _cell(p, &bbox_min[0], inv_h, nx, ny, nz, &ix, &iy, &iz, w8):
                    continue
                dsig = da * delta * (1.0 - alpha_s[i])
                wgt = trace_s[i] * alpha_s[i]
                for c in range(8):
                    base = (ix * ny + iy) * nz + iz + off[c]
                    w = w8[c]
                    gd_p[base] += w * dsig_p[base] * dsig
                    o3 = 3 * base
                    cv = col_p[o3]
                    gc_p[o3] += w * cv * (1.0 - cv) * wgt * dc0
                    cv = col_p[o3 + 1]
                    gc_p[o3 + 1] += w * cv * (1.0 - cv) * wgt * dc1
                    cv = col_p[o3 + 2]
                    gc_p[o3 + 2] += w * cv * (1.0 - cv) * wgt * dc2


def adam_step_density(double[:, :, ::1] param, double[:, :, ::1] grad,
                      double[:, :, ::1] m, double[:, :, ::1] v,
                      double lr, double beta1, double beta2, double eps,
                      double bias1, double bias2,
                      double[:, :, ::1] act, double[:, :, ::1] dact):
    """Fused Adam step on the density grid + activation refresh.

    bias1/bias2 are the precomputed 1/(1-beta^t) corrections.  act/dact
    receive softplus(p) and its derivative for the updated parameters.
    """
    cdef Py_ssize_t nx = param.shape[0], ny = param.shape[1], nz = param.shape[2]
    cdef Py_ssize_t i, j, k
    cdef double g, mm, vv, p, e
    with nogil:
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    g = grad[i, j, k]
                    mm = beta1 * m[i, j, k] + (1.0 - beta1) * g
                    vv = beta2 * v[i, j, k] + (1.0 - beta2) * g * g
                    m[i, j, k] = mm
                    v[i, j, k] = vv
                    p = param[i, j, k] - lr * (mm * bias1) / (sqrt(vv * bias2) + eps)
                    param[i, j, k] = p
                    if p >= 0.0:
                        e = exp(-p)
                        act[i, j, k] = p + log1p(e)
                        dact[i, j, k] = 1.0 / (1.0 + e)
                    else:
                        e = exp(p)
                        act[i, j, k] = log1p(e)
                        dact[i, j, k] = e / (1.0 + e)


def adam_step_color(double[:, :, :, ::1] param, double[:, :, :, ::1] grad,
                    double[:, :, :, ::1] m, double[:, :, :, ::1] v,
                    double lr, double beta1, double beta2, double eps,
                    double bias1, double bias2,
                    double[:, :, :, ::1] act):
    """Fused Adam step on the color grid + logistic refresh."""
    cdef Py_ssize_t n = param.shape[0] * param.shape[1] * param.shape[2] * param.shape[3]
    cdef double* pp = &param[0, 0, 0, 0]
    cdef double* gg = &grad[0, 0, 0, 0]
    cdef double* pm = &m[0, 0, 0, 0]
    cdef double* pv = &v[0, 0, 0, 0]
    cdef double* pa = &act[0, 0, 0, 0]
    cdef Py_ssize_t i
    cdef double g, mm, vv, p, e
    with nogil:
        for i in range(n):
            g = gg[i]
            mm = beta1 * pm[i] + (1.0 - beta1) * g
            vv = beta2 * pv[i] + (1.0 - beta2) * g * g
            pm[i] = mm
            pv[i] = vv
            p = pp[i] - lr * (mm * bias1) / (sqrt(vv * bias2) + eps)
            pp[i] = p
            if p >= 0.0:
                pa[i] = 1.0 / (1.0 + exp(-p))
            else:
                e = exp(p)
                pa[i] = e / (1.0 + e)

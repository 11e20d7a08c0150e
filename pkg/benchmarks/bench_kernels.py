"""Benchmark: compiled kernels vs the pure-numpy fallback.

Times the three hot paths (forward render, backward/gradient pass, fused
optimizer step) on a mid-sized grid and a realistic ray batch, printing a
table with the speedup.  Both implementations are imported directly so the
comparison ignores the import-time backend selection.

Run:  python benchmarks/bench_kernels.py [--grid 96] [--rays 4096] [--steps 96]
"""

import argparse
import time

import numpy as np

from sceneweaver.field import RadianceGrid, clip_to_bbox
from sceneweaver.kernels import numpy_backend

try:
    from sceneweaver.kernels import _native as native
except ImportError:  # pragma: no cover
    native = None


def best_of(fn, repeats=3):
    out = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return min(out)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--grid", type=int, default=96)
    ap.add_argument("--rays", type=int, default=4096)
    ap.add_argument("--steps", type=int, default=96)
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    n = args.grid
    grid = RadianceGrid(
        np.array([-2.2, -1.8, -2.2]), np.array([2.2, 1.8, 2.2]),
        rng.normal(-2.0, 1.0, (n, n, n)), rng.normal(0.0, 1.0, (n, n, n, 3)))
    cache = grid.activations()
    r = args.rays
    origins = np.zeros((r, 3))
    dirs = rng.normal(size=(r, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    t0, t1 = clip_to_bbox(origins, dirs, grid.bbox_min, grid.bbox_max, 0.05, np.inf)
    d_color = rng.normal(size=(r, 3))
    d_depth = rng.normal(size=r)
    d_op = rng.normal(size=r)

    impls = [("numpy", numpy_backend)] + ([("native", native)] if native else [])
    rows = {}
    for name, impl in impls:
        fwd_args = (cache.sigma, cache.color, grid.bbox_min, grid.spacing,
                    origins, dirs, t0, t1, args.steps)
        _, _, _, trace = impl.render_forward(*fwd_args)
        t_fwd = best_of(lambda: impl.render_forward(*fwd_args), args.repeats)

        gd = np.zeros_like(grid.density)
        gc = np.zeros_like(grid.color)

        def bwd():
            gd[...] = 0.0
            gc[...] = 0.0
            impl.render_backward(cache.sigma, cache.dsigma, cache.color,
                                 grid.bbox_min, grid.spacing, origins, dirs,
                                 t0, t1, args.steps, d_color, d_depth, trace,
                                 gd, gc, d_op)

        t_bwd = best_of(bwd, args.repeats)

        m = np.zeros_like(grid.density)
        v = np.zeros_like(grid.density)
        mc = np.zeros_like(grid.color)
        vc = np.zeros_like(grid.color)
        params = grid.density.copy()
        paramc = grid.color.copy()

        def adam():
            impl.adam_step_density(params, gd, m, v, 0.0, 0.9, 0.99, 1e-8,
                                   1.0, 1.0, cache.sigma, cache.dsigma)
            impl.adam_step_color(paramc, gc, mc, vc, 0.0, 0.9, 0.99, 1e-8,
                                 1.0, 1.0, cache.color)

        t_adam = best_of(adam, args.repeats)
        rows[name] = (t_fwd, t_bwd, t_adam)

    samples = args.rays * args.steps
    print(f"\ngrid {n}^3, {args.rays} rays x {args.steps} steps "
          f"({samples / 1e6:.2f}M samples), best of {args.repeats}\n")
    print(f"{'kernel':<10}{'numpy':>12}{'native':>12}{'speedup':>10}")
    for i, label in enumerate(("forward", "backward", "adam+act")):
        np_t = rows["numpy"][i]
        if "native" in rows:
            na_t = rows["native"][i]
            print(f"{label:<10}{np_t * 1e3:>10.1f}ms{na_t * 1e3:>10.1f}ms"
                  f"{np_t / na_t:>9.1f}x")
        else:
            print(f"{label:<10}{np_t * 1e3:>10.1f}ms{'n/a':>12}{'':>10}")
    if "native" in rows:
        tot_np = sum(rows["numpy"])
        tot_na = sum(rows["native"])
        print(f"{'full step':<10}{tot_np * 1e3:>10.1f}ms{tot_na * 1e3:>10.1f}ms"
              f"{tot_np / tot_na:>9.1f}x")


if __name__ == "__main__":
    main()

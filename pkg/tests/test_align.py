"""Depth-alignment tests.

The global-stage oracle re-evaluates the scale/offset definitions with a
plain python loop over the same sampled pairs; the local stage is checked
against its guaranteed properties (identity at the optimum, residual
monotonicity, affine collapse under infinite smoothing) and a
distortion-recovery run with the synthetic noise model.
"""

import numpy as np
import pytest

from conftest import make_view
from sceneweaver.align import (
    AlignmentError,
    GlobalAlignment,
    align_two_stage,
    distort_depth,
    global_align,
    local_align,
    sample_pairs,
)
from sceneweaver.camera import DepthMap


def brute_force_affine_oracle(pairs):
    """Direct evaluation of the mean-ratio scale and mean z offset."""
    xr, xe = pairs.x_rendered, pairs.x_estimated
    ratios = []
    for j in range(len(pairs) - 1):
        num = float(np.linalg.norm(xr[j] - xr[j + 1]))
        den = float(np.linalg.norm(xe[j] - xe[j + 1]))
        if den >= 1e-9:
            ratios.append(num / den)
    s = sum(ratios) / len(ratios)
    delta = float(np.mean([xr[j][2] - s * xe[j][2] for j in range(len(pairs))]))
    return s, delta


def structured_depth(h=48, w=48):
    """Smooth, spatially varying positive depth standing in for a scene."""
    v, u = np.mgrid[0:h, 0:w]
    vals = 1.8 + 0.5 * np.sin(2 * np.pi * u / w) * np.cos(np.pi * v / h) + 0.4 * v / h
    return DepthMap(vals)


def overlap_rmse(a: DepthMap, b: DepthMap, mask) -> float:
    sel = mask & a.valid & b.valid
    d = a.values[sel] - b.values[sel]
    return float(np.sqrt((d * d).mean()))


# ---------------------------------------------------------------------------
# sample_pairs


def test_sample_pairs_exhaustive_small_overlap():
    view = make_view(width=32, height=32)
    d = structured_depth(32, 32)
    overlap = np.zeros((32, 32), dtype=bool)
    overlap.reshape(-1)[:50] = True
    pairs = sample_pairs(d, d, overlap, view, max_pairs=10_000, seed=1)
    assert len(pairs) == 50


def test_sample_pairs_caps_at_limit():
    view = make_view(width=160, height=160)
    vals = np.full((160, 160), 2.0)
    d = DepthMap(vals)
    overlap = np.ones((160, 160), dtype=bool)  # 25600 candidates
    pairs = sample_pairs(d, d, overlap, view, max_pairs=10_000, seed=1)
    assert len(pairs) == 10_000


def test_sample_pairs_deterministic():
    view = make_view(width=48, height=48)
    d = structured_depth()
    overlap = np.ones((48, 48), dtype=bool)
    p1 = sample_pairs(d, d, overlap, view, seed=42)
    p2 = sample_pairs(d, d, overlap, view, seed=42)
    np.testing.assert_array_equal(p1.pixels, p2.pixels)


def test_sample_pairs_empty_overlap_raises():
    view = make_view(width=8, height=8)
    d = structured_depth(8, 8)
    with pytest.raises(AlignmentError):
        sample_pairs(d, d, np.zeros((8, 8), dtype=bool), view)


def test_pairs_lie_on_the_same_ray():
    view = make_view(width=32, height=32)
    d_r = structured_depth(32, 32)
    d_e = DepthMap(d_r.values * 0.6)
    pairs = sample_pairs(d_r, d_e, np.ones((32, 32), dtype=bool), view, seed=3)
    cross = np.cross(pairs.x_rendered, pairs.x_estimated)
    norms = np.linalg.norm(pairs.x_rendered, axis=1) * np.linalg.norm(pairs.x_estimated, axis=1)
    assert np.max(np.abs(cross) / norms[:, None]) < 1e-6


# ---------------------------------------------------------------------------
# global_align


def test_global_align_identity_pairs():
    view = make_view(width=32, height=32)
    d = structured_depth(32, 32)
    pairs = sample_pairs(d, d, np.ones((32, 32), dtype=bool), view, seed=5)
    ga = global_align(pairs)
    assert ga.scale == pytest.approx(1.0, abs=1e-12)
    assert ga.offset == pytest.approx(0.0, abs=1e-12)


def test_global_align_pure_scale_recovered_exactly():
    # Back-projection is linear in depth, so a pure 1/2 scale gives s=2.
    view = make_view(width=40, height=40)
    d_r = structured_depth(40, 40)
    d_e = DepthMap(d_r.values / 2.0)
    pairs = sample_pairs(d_r, d_e, np.ones((40, 40), dtype=bool), view, seed=7)
    ga = global_align(pairs)
    assert ga.scale == pytest.approx(2.0, abs=1e-6)
    assert ga.offset == pytest.approx(0.0, abs=1e-6)
    recovered = ga.apply(d_e)
    np.testing.assert_allclose(recovered.values, d_r.values, atol=1e-9)


def test_global_align_offset_distortion_improves_rmse_and_matches_oracle():
    view = make_view(width=48, height=48)
    d_r = structured_depth()
    d_e = DepthMap((d_r.values - 0.3) / 1.5)
    overlap = np.ones((48, 48), dtype=bool)
    pairs = sample_pairs(d_r, d_e, overlap, view, seed=11)
    ga = global_align(pairs)
    s_oracle, delta_oracle = brute_force_affine_oracle(pairs)
    assert ga.scale == pytest.approx(s_oracle, abs=1e-12)
    assert ga.offset == pytest.approx(delta_oracle, abs=1e-12)
    aligned = ga.apply(d_e)
    assert overlap_rmse(aligned, d_r, overlap) < overlap_rmse(d_e, d_r, overlap)


def _single_pair():
    from sceneweaver.align import PointPairs

    return PointPairs(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 2), dtype=int))


def test_global_align_rejects_single_pair():
    with pytest.raises(AlignmentError):
        global_align(_single_pair())


def test_global_align_all_coincident_estimated_points():
    from sceneweaver.align import PointPairs

    xr = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.1], [0.2, 0.0, 1.2]])
    xe = np.tile([0.0, 0.0, 1.0], (3, 1))
    with pytest.raises(AlignmentError):
        global_align(PointPairs(xr, xe, np.zeros((3, 2), dtype=int)))


def test_global_alignment_validates_scale():
    with pytest.raises(ValueError):
        GlobalAlignment(-1.0, 0.0)


# ---------------------------------------------------------------------------
# local_align


def test_local_align_identity_at_optimum():
    d = structured_depth()
    overlap = np.ones((48, 48), dtype=bool)
    aligned, field = local_align(d, d, overlap)
    np.testing.assert_allclose(field.node_scale, 1.0, atol=1e-6)
    np.testing.assert_allclose(field.node_offset, 0.0, atol=1e-6)
    np.testing.assert_allclose(aligned.values, d.values, atol=1e-6)


def test_local_align_high_smoothness_collapses_to_affine():
    d_r = structured_depth()
    noisy = DepthMap(d_r.values * 1.12 + 0.2)
    overlap = np.ones((48, 48), dtype=bool)
    _, field = local_align(noisy, d_r, overlap, smoothness=1e12)
    # Direct least-squares affine fit r ~ a*d + b as the oracle.
    dd = noisy.values.reshape(-1)
    rr = d_r.values.reshape(-1)
    a, b = np.linalg.lstsq(np.stack([dd, np.ones_like(dd)], axis=1), rr, rcond=None)[0]
    np.testing.assert_allclose(field.node_scale, a, atol=1e-3)
    np.testing.assert_allclose(field.node_offset, b, atol=1e-3)


def test_local_align_never_alters_validity():
    d_r = structured_depth()
    vals = d_r.values.copy()
    valid = np.ones((48, 48), dtype=bool)
    valid[:, :10] = False
    noisy = DepthMap(vals * 1.1, valid)
    aligned, _ = local_align(noisy, d_r, valid)
    np.testing.assert_array_equal(aligned.valid, valid)


def test_local_align_empty_overlap_raises():
    d = structured_depth(8, 8)
    with pytest.raises(AlignmentError):
        local_align(d, d, np.zeros((8, 8), dtype=bool))


# ---------------------------------------------------------------------------
# two-stage recovery on the synthetic noise model


def test_two_stage_recovers_synthetic_distortion():
    # Shift/scale noise (D + 0.5) * D^(1/40): global+local must cut the
    # overlap RMSE by at least 80% (reference run gives ~99.9%).
    view = make_view(width=48, height=48)
    d_r = structured_depth()
    d_e = distort_depth(d_r, tau1=0.5, tau2=40.0)
    overlap = np.ones((48, 48), dtype=bool)
    base = overlap_rmse(d_e, d_r, overlap)
    aligned, ga, field = align_two_stage(d_r, d_e, view, seed=13)
    final = overlap_rmse(aligned, d_r, overlap)
    assert final < 0.2 * base
    # residual monotonicity: estimated -> global -> local never degrades
    mid = overlap_rmse(ga.apply(d_e), d_r, overlap)
    assert final <= mid + 1e-12
    assert mid <= base + 1e-12


def test_two_stage_identity_on_undistorted_input():
    view = make_view(width=48, height=48)
    d_r = structured_depth()
    aligned, ga, _ = align_two_stage(d_r, d_r.copy(), view, seed=17)
    assert overlap_rmse(aligned, d_r, np.ones((48, 48), dtype=bool)) < 1e-6
    assert ga.scale == pytest.approx(1.0, abs=1e-9)


def test_two_stage_partial_overlap_extrapolates():
    # The correction must extend smoothly into the unobserved half.
    view = make_view(width=48, height=48)
    d_r = structured_depth()
    d_e = DepthMap((d_r.values - 0.2) / 1.3)
    overlap = np.zeros((48, 48), dtype=bool)
    overlap[:, :24] = True
    pairs = sample_pairs(d_r, d_e, overlap, view, seed=19)
    ga = global_align(pairs)
    aligned, _ = local_align(ga.apply(d_e), d_r, overlap)
    right_half = np.zeros_like(overlap)
    right_half[:, 24:] = True
    # Affine distortion extrapolates exactly up to lattice interpolation.
    assert overlap_rmse(aligned, d_r, right_half) < 0.05


# ---------------------------------------------------------------------------
# distort_depth


def test_distort_depth_limit_cases():
    d = structured_depth(16, 16)
    out = distort_depth(d, tau1=0.0, tau2=1e12)
    np.testing.assert_allclose(out.values, d.values, rtol=1e-9)

    ones = DepthMap(np.ones((8, 8)))
    out = distort_depth(ones, tau1=0.5, tau2=37.0)
    np.testing.assert_allclose(out.values, 1.5, atol=1e-12)


def test_distort_depth_analytic_value():
    d = DepthMap(np.full((4, 4), 4.0))
    out = distort_depth(d, tau1=0.0, tau2=2.0)
    np.testing.assert_allclose(out.values, 8.0, atol=1e-12)


def test_distort_depth_rejects_bad_tau2():
    d = DepthMap(np.ones((4, 4)))
    with pytest.raises(ValueError):
        distort_depth(d, tau1=0.1, tau2=-1.0)


def test_distort_depth_sampling_ranges_and_mask():
    vals = np.full((6, 6), 2.0)
    valid = np.ones((6, 6), dtype=bool)
    valid[0] = False
    d = DepthMap(vals, valid)
    out = distort_depth(d, seed=99)
    np.testing.assert_array_equal(out.valid, valid)
    assert not out.values[0].any()  # invalid rows keep the sentinel
    # sampled tau1 in [0,1], tau2 in [30,50]: bound the possible outputs
    assert np.all(out.values[valid] >= 2.0 * 2.0 ** (1 / 50.0) - 1e-9)
    assert np.all(out.values[valid] <= 3.0 * 2.0 ** (1 / 30.0) + 1e-9)

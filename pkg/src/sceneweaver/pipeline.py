"""Scene initialization and the progressive inpaint-and-update loop.

One generated view plus its estimated depth seed the radiance grid,
reinforced by DIBR-warped satellite views (the support set).  The loop
then visits the remaining trajectory views nearest-first: render the
view, mask what no updated view has ever seen, inpaint only that region,
estimate and align its depth, build the view's support set, and retrain
the grid.  Because every update is reflected in subsequent renders, a
pixel supervised once never re-enters a later inpainting mask.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .align import AlignmentError, align_two_stage
from .camera import (
    CameraView,
    DepthMap,
    Intrinsics,
    TrajectorySpec,
    angular_distance_deg,
    build_trajectory,
    forward_warp,
    missing_mask,
    support_poses,
)
from .field import RadianceGrid, render_view
from .io import RunConfig, RunDirectory, checkpoint_hash, quantize8, view_to_dict, view_from_dict
from .optim import FitConfig, LossWeights, TrainTarget, fit
from .providers import InpaintRequest, select_candidate

__all__ = ["PipelineState", "build_support_set", "initialize", "update_view",
           "run", "resume", "load_state", "pending_order", "seed_for"]

logger = logging.getLogger(__name__)


def seed_for(root_seed: int, stream: str, index: int = 0) -> int:
    """Stable named substream seeds, resume-safe by construction."""
    digest = hashlib.sha256(f"{root_seed}:{stream}:{index}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _wire_depth(depth: DepthMap) -> DepthMap:
    """Snap depth to 32-bit float so in-memory state equals its disk form."""
    return DepthMap(depth.values.astype(np.float32).astype(np.float64), depth.valid)


@dataclass
class UpdatedView:
    """A view whose content is final: supervision image + aligned depth."""

    view: CameraView
    image: np.ndarray
    depth: DepthMap


@dataclass
class PipelineState:
    """Everything the loop carries between updates."""

    config: RunConfig
    trajectory: list[CameraView]
    grid: RadianceGrid
    updated: list[UpdatedView] = field(default_factory=list)
    pending: list[CameraView] = field(default_factory=list)
    hashes: list[str] = field(default_factory=list)

    @property
    def initial_image(self) -> np.ndarray:
        return self.updated[0].image

    def updated_ids(self) -> list[int]:
        return [u.view.id for u in self.updated]

    def check_partition(self) -> None:
        upd = set(self.updated_ids())
        pen = {v.id for v in self.pending}
        traj = {v.id for v in self.trajectory}
        if upd & pen or (upd | pen) != traj:
            raise RuntimeError("updated/pending no longer partition the trajectory")


def _fit_config(config: RunConfig, iterations: int, seed: int) -> FitConfig:
    return FitConfig(
        iterations=iterations,
        batch_size=config.batch_size,
        steps=config.render_steps,
        near=config.near,
        lr_init=config.lr_init,
        lr_final=config.lr_final,
        seed=seed,
    )


def _weights(config: RunConfig) -> LossWeights:
    return LossWeights(config.lambda_depth, config.lambda_trans)


def build_support_set(view: CameraView, image: np.ndarray, depth: DepthMap,
                      count: int, shift: float,
                      close_pinholes: bool = True) -> list[TrainTarget]:
    """The view itself plus ``count`` DIBR-warped satellites.

    Satellite supervision masks are their splat validity, so holes opened
    by parallax are simply unsupervised.
    """
    center_mask = depth.valid.copy()
    targets = [TrainTarget(view, np.asarray(image, dtype=np.float64), depth, center_mask)]
    for sat in support_poses(view, shift, count):
        rgb, d, missing = forward_warp(image, depth, view, sat,
                                       close_pinholes=close_pinholes)
        targets.append(TrainTarget(sat, rgb, d, ~missing.missing))
    return targets


def _make_grid(config: RunConfig) -> RadianceGrid:
    h = np.asarray(config.bbox_half_extent, dtype=np.float64)
    n = config.grid_resolution
    return RadianceGrid.create((n, n, n), -h, h)


def initialize(provider, view0: CameraView, config: RunConfig,
               writer: RunDirectory | None = None,
               trajectory: list[CameraView] | None = None) -> PipelineState:
    """Generate the first view, lift it to 3D, and train the initial grid."""
    if trajectory is None:
        trajectory = [view0]
    image0 = quantize8(provider.generate_initial(
        config.prompt, view0, seed=seed_for(config.seed, "provider", view0.id)))
    depth0 = _wire_depth(provider.estimate_depth(
        image0, view0, seed=seed_for(config.seed, "depth", view0.id)))
    targets = build_support_set(view0, image0, depth0, config.support_count,
                                config.support_shift, config.close_pinholes)
    grid = _make_grid(config)
    report = fit(grid, targets,
                 _fit_config(config, config.iterations_init,
                             seed_for(config.seed, "rays", view0.id)),
                 _weights(config))
    state = PipelineState(config=config, trajectory=list(trajectory), grid=grid,
                          updated=[UpdatedView(view0, image0, depth0)],
                          pending=[v for v in trajectory if v.id != view0.id])
    state.hashes.append(checkpoint_hash(grid))
    if writer is not None:
        writer.save_view(view0.id, image0, depth0, depth0.valid)
        writer.save_checkpoint(f"update_{view0.id:03d}", grid)
        for rec in report.records:
            writer.log({"stage": f"fit_{view0.id:03d}", **rec})
        _write_state(writer, state)
    state.check_partition()
    return state


def update_view(state: PipelineState, view: CameraView, provider,
                writer: RunDirectory | None = None) -> PipelineState:
    """One body of the progressive loop for ``view``.

    Views already fully covered by updated content advance without any
    training or provider call; sub-threshold masks (provider cost guard)
    take the same path.
    """
    if all(v.id != view.id for v in state.pending):
        raise ValueError(f"view {view.id} is not pending")
    config = state.config
    rendered, rendered_depth, _ = render_view(
        state.grid, view, steps=config.render_steps, near=config.near)
    rendered = quantize8(rendered)
    known = [(u.view, u.depth) for u in state.updated]
    # By construction the mask is the complement of the updated views'
    # splat coverage, which is what guarantees nothing is inpainted twice.
    mask = missing_mask(view, known, close_pinholes=config.close_pinholes)

    if mask.fraction <= config.min_mask_fraction:
        # Continue branch: nothing (worth) inpainting; content is already
        # determined by the grid, so record the rendered view untrained.
        final = UpdatedView(view, rendered, rendered_depth)
        logger.info("view %d: mask %.4f%% below threshold, no training",
                    view.id, 100 * mask.fraction)
        if writer is not None:
            writer.log({"stage": f"update_{view.id:03d}", "event": "skip",
                        "mask_fraction": mask.fraction})
    else:
        inpaint_seed = seed_for(config.seed, "provider", view.id)
        req = InpaintRequest(config.prompt, rendered, mask,
                             num_candidates=config.candidate_count, seed=inpaint_seed)
        candidates = provider.inpaint(req, view)
        selected = quantize8(select_candidate(candidates, state.initial_image,
                                              embed=provider.embed))
        est = provider.estimate_depth(selected, view,
                                      seed=seed_for(config.seed, "depth", view.id))
        try:
            aligned, ga, _ = align_two_stage(
                rendered_depth, est, view, seed=seed_for(config.seed, "pairs", view.id))
            logger.info("view %d: aligned depth (s=%.4f, offset=%.4f)",
                        view.id, ga.scale, ga.offset)
        except AlignmentError:
            logger.warning("view %d: no depth overlap, falling back to identity "
                           "alignment", view.id)
            aligned = est
        aligned = _wire_depth(aligned)
        targets = build_support_set(view, selected, aligned, config.support_count,
                                    config.support_shift, config.close_pinholes)
        report = fit(state.grid, targets,
                     _fit_config(config, config.iterations_update,
                                 seed_for(config.seed, "rays", view.id)),
                     _weights(config))
        final = UpdatedView(view, selected, aligned)
        if writer is not None:
            writer.save_inpaint(view.id, rendered, mask.missing, selected)
            for rec in report.records:
                writer.log({"stage": f"fit_{view.id:03d}", **rec})

    state.updated.append(final)
    state.pending = [v for v in state.pending if v.id != view.id]
    state.hashes.append(checkpoint_hash(state.grid))
    if writer is not None:
        writer.save_view(view.id, final.image, final.depth, final.depth.valid)
        writer.save_checkpoint(f"update_{view.id:03d}", state.grid)
        _write_state(writer, state)
    state.check_partition()
    return state


def pending_order(state: PipelineState) -> list[CameraView]:
    """Nearest-first visitation: ascending angular distance from the
    initialization pose, ties by id, so each mask stays small and anchored
    by a large overlap."""
    p0 = state.trajectory[0].pose
    return sorted(state.pending,
                  key=lambda v: (round(angular_distance_deg(p0, v.pose), 9), v.id))


def run(provider, config: RunConfig, writer: RunDirectory | None = None,
        trajectory: list[CameraView] | None = None) -> PipelineState:
    """Initialize on the first trajectory pose, then update every other
    view nearest-first."""
    if trajectory is None:
        intr = Intrinsics.default(config.width, config.height)
        trajectory = build_trajectory(TrajectorySpec.from_dict(config.trajectory), intr)
    if not trajectory:
        raise ValueError("trajectory must not be empty")
    state = initialize(provider, trajectory[0], config, writer, trajectory)
    return resume(state, provider, writer)


def resume(state: PipelineState, provider,
           writer: RunDirectory | None = None) -> PipelineState:
    """Continue a run until no views are pending."""
    while state.pending:
        nxt = pending_order(state)[0]
        update_view(state, nxt, provider, writer)
    if writer is not None:
        writer.save_checkpoint("final", state.grid)
    return state


# ---------------------------------------------------------------------------
# persistence


def _write_state(writer: RunDirectory, state: PipelineState) -> None:
    writer.save_state({
        "trajectory": [view_to_dict(v) for v in state.trajectory],
        "updated_ids": state.updated_ids(),
        "pending_ids": [v.id for v in state.pending],
        "hashes": state.hashes,
    })


def load_state(run_dir: RunDirectory | str) -> PipelineState:
    """Rebuild a PipelineState from a run directory (exact resume)."""
    writer = run_dir if isinstance(run_dir, RunDirectory) else RunDirectory(run_dir)
    config = RunConfig.from_json((writer.root / "config.json").read_text())
    meta = writer.load_state()
    trajectory = [view_from_dict(d) for d in meta["trajectory"]]
    by_id = {v.id: v for v in trajectory}
    last = meta["updated_ids"][-1]
    grid = writer.load_checkpoint(f"update_{last:03d}")
    updated = []
    for vid in meta["updated_ids"]:
        image, depth, mask = writer.load_view(vid)
        updated.append(UpdatedView(by_id[vid], image, DepthMap(depth.values, mask)))
    state = PipelineState(
        config=config, trajectory=trajectory, grid=grid, updated=updated,
        pending=[by_id[i] for i in meta["pending_ids"]], hashes=list(meta["hashes"]))
    state.check_partition()
    return state

"""Command-line surface.

    sceneweaver generate --config run.json [--resume]
    sceneweaver render   --ckpt final.ckpt --traj orbit:8 --out frames/
    sceneweaver eval     --ckpt final.ckpt --oracle-seed 7 [--sweep xi|zeta] ...
    sceneweaver align    --rendered a.pfm --estimated b.pfm [--mask m.png]

Exit codes: 0 ok, 2 usage error, 3 provider failure, 4 numeric abort.
The SCENEWEAVER_PROVIDER_URL environment variable overrides the config's
provider with a remote endpoint.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .align import AlignmentError, align_two_stage
from .camera import CameraView, DepthMap, Intrinsics, Pose, TrajectorySpec, build_trajectory
from .field import render_view
from .io import (
    CheckpointError,
    RunConfig,
    RunDirectory,
    atomic_write_bytes,
    checkpoint_hash,
    load_grid,
    mask_to_png_bytes,
    png_bytes_to_mask,
    quantize8,
    read_pfm_bytes,
    rgb_to_png_bytes,
    write_pfm_bytes,
)
from .optim import NumericError, eval_initialization, make_warp_targets, psnr, shifted_test_views
from .oracle import OracleScene
from .pipeline import initialize, load_state, resume, run, seed_for
from .providers import ProviderError, make_provider

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PROVIDER = 3
EXIT_NUMERIC = 4


class _UsageError(Exception):
    pass


def _parse_traj(text: str) -> dict:
    """Compact trajectory specs: "orbit:8", "orbit:8:yaw=45",
    "lattice:yaws=-30,0,30:pitches=-15,0,15"."""
    parts = text.split(":")
    if parts[0] == "orbit":
        out = {"pattern": "orbit", "steps": int(parts[1]) if len(parts) > 1 else 8}
        for p in parts[2:]:
            key, _, val = p.partition("=")
            if key != "yaw":
                raise _UsageError(f"unknown orbit option {key!r}")
            out["yaw_step_deg"] = float(val)
        return out
    if parts[0] == "lattice":
        out = {"pattern": "lattice"}
        for p in parts[1:]:
            key, _, val = p.partition("=")
            if key == "yaws":
                out["yaws_deg"] = [float(x) for x in val.split(",")]
            elif key == "pitches":
                out["pitches_deg"] = [float(x) for x in val.split(",")]
            else:
                raise _UsageError(f"unknown lattice option {key!r}")
        return out
    raise _UsageError(f"unknown trajectory pattern {parts[0]!r}")


def _provider_for(config: RunConfig):
    override = os.environ.get("SCENEWEAVER_PROVIDER_URL")
    spec = override or config.provider
    scene = OracleScene(seed=config.oracle_seed) if spec == "oracle" else None
    return make_provider(spec, scene=scene, depth_noise=config.oracle_depth_noise)


def cmd_generate(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise _UsageError(f"config file not found: {config_path}")
    try:
        config = RunConfig.from_json(config_path.read_text())
    except (ValueError, json.JSONDecodeError) as exc:
        raise _UsageError(f"invalid config: {exc}") from exc
    provider = _provider_for(config)
    writer = RunDirectory(config.output_dir)
    if args.resume and (writer.root / "state.json").exists():
        state = load_state(writer)
        state = resume(state, provider, writer)
    else:
        writer.create(config)
        state = run(provider, config, writer)
    print(f"run complete: {len(state.updated)} views, "
          f"final checkpoint {state.hashes[-1][:12]} in {writer.root}")
    return EXIT_OK


def cmd_render(args) -> int:
    grid = load_grid(args.ckpt)
    spec = TrajectorySpec.from_dict(_parse_traj(args.traj))
    intr = Intrinsics.default(args.width, args.height)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, view in enumerate(build_trajectory(spec, intr)):
        image, depth, _ = render_view(grid, view, steps=args.steps)
        atomic_write_bytes(out / f"frame_{i:04d}.png", rgb_to_png_bytes(quantize8(image)))
        atomic_write_bytes(out / f"frame_{i:04d}.pfm", write_pfm_bytes(depth.values))
    print(f"rendered {i + 1} frames to {out}")
    return EXIT_OK


def _eval_report(grid, scene, width, height, support_count, support_shift,
                 steps, n_test, seed) -> dict:
    view0 = CameraView(Intrinsics.default(width, height), Pose.identity(), id=0)
    image0 = quantize8(scene.render(view0)[0])
    depth0 = scene.depth(view0)
    test_views = shifted_test_views(view0, count=n_test, seed=seed)
    targets = make_warp_targets(view0, image0, depth0, test_views)
    per_view = []
    for view, image, mask in targets:
        rendered, _, _ = render_view(grid, view, steps=steps)
        per_view.append({"view": view.id, "psnr": psnr(rendered, image, mask)})
    mean = float(np.mean([r["psnr"] for r in per_view]))
    return {"mean_psnr": mean, "per_view": per_view,
            "protocol": {"n_test": n_test, "zeta_range": [0.1, 0.4], "seed": seed,
                         "support_count": support_count, "support_shift": support_shift}}


def cmd_eval(args) -> int:
    if args.n_test < 1:
        raise _UsageError("need at least one test pose")
    if args.sweep:
        return _cmd_eval_sweep(args)
    if not args.ckpt:
        raise _UsageError("eval without --sweep requires --ckpt")
    grid = load_grid(args.ckpt)
    scene = OracleScene(seed=args.oracle_seed)
    report = _eval_report(grid, scene, args.width, args.height,
                          args.xi, args.zeta, args.steps, args.n_test, args.seed)
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        atomic_write_bytes(Path(args.out), text.encode())
    print(text)
    return EXIT_OK


def _init_for_sweep(scene, width, height, xi, zeta, args) -> float:
    config = RunConfig(
        width=width, height=height, support_count=xi, support_shift=zeta,
        grid_resolution=args.grid, render_steps=args.steps,
        iterations_init=args.iterations, seed=args.seed,
        lr_init=args.lr, lr_final=args.lr / 10.0, lambda_depth=args.lambda_depth,
        oracle_seed=args.oracle_seed,
    )
    provider = make_provider("oracle", scene=scene)
    view0 = CameraView(Intrinsics.default(width, height), Pose.identity(), id=0)
    state = initialize(provider, view0, config)
    image0, depth0 = state.updated[0].image, state.updated[0].depth
    test_views = shifted_test_views(view0, count=args.n_test, seed=args.seed + 1)
    targets = make_warp_targets(view0, image0, depth0, test_views)
    return eval_initialization(state.grid, targets, steps=args.steps)


def _cmd_eval_sweep(args) -> int:
    scene = OracleScene(seed=args.oracle_seed)
    rows = []
    if args.sweep == "xi":
        values = [int(v) for v in args.values.split(",")] if args.values else [0, 2, 4, 8, 12]
        for xi in values:
            rows.append({"xi": xi, "zeta": args.zeta,
                         "mean_psnr": _init_for_sweep(scene, args.width, args.height,
                                                      xi, args.zeta, args)})
    else:
        values = [float(v) for v in args.values.split(",")] if args.values else [0.1, 0.2, 0.3, 0.4]
        for zeta in values:
            rows.append({"xi": args.xi, "zeta": zeta,
                         "mean_psnr": _init_for_sweep(scene, args.width, args.height,
                                                      args.xi, zeta, args)})
    text = json.dumps({"sweep": args.sweep, "rows": rows}, indent=2, sort_keys=True)
    if args.out:
        atomic_write_bytes(Path(args.out), text.encode())
    print(text)
    return EXIT_OK


def cmd_align(args) -> int:
    rendered_vals = read_pfm_bytes(Path(args.rendered).read_bytes())
    estimated_vals = read_pfm_bytes(Path(args.estimated).read_bytes())
    rendered = DepthMap(rendered_vals, rendered_vals > 0)
    estimated = DepthMap(estimated_vals, estimated_vals > 0)
    if args.mask:
        keep = png_bytes_to_mask(Path(args.mask).read_bytes())
        rendered = DepthMap(np.where(keep, rendered.values, 0.0), rendered.valid & keep)
    view = CameraView(Intrinsics.default(rendered.shape[1], rendered.shape[0]),
                      Pose.identity(), id=0)
    aligned, ga, _ = align_two_stage(rendered, estimated, view,
                                     seed=args.seed, smoothness=args.smoothness)
    out = Path(args.out) if args.out else Path(args.estimated).with_suffix(".aligned.pfm")
    atomic_write_bytes(out, write_pfm_bytes(aligned.values))
    print(json.dumps({"scale": ga.scale, "offset": ga.offset, "output": str(out)}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sceneweaver",
                                     description="Text-driven 3D scene synthesis")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="run the full generation pipeline")
    g.add_argument("--config", required=True)
    g.add_argument("--resume", action="store_true")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("render", help="render a trajectory from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--traj", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--width", type=int, default=128)
    r.add_argument("--height", type=int, default=128)
    r.add_argument("--steps", type=int, default=96)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="oracle-scene evaluation / sweeps")
    e.add_argument("--ckpt")
    e.add_argument("--oracle-seed", type=int, default=7)
    e.add_argument("--sweep", choices=["xi", "zeta"])
    e.add_argument("--values")
    e.add_argument("--width", type=int, default=64)
    e.add_argument("--height", type=int, default=64)
    e.add_argument("--xi", type=int, default=8)
    e.add_argument("--zeta", type=float, default=0.2)
    e.add_argument("--grid", type=int, default=64)
    e.add_argument("--steps", type=int, default=64)
    e.add_argument("--iterations", type=int, default=600)
    e.add_argument("--lr", type=float, default=0.1)
    e.add_argument("--lambda-depth", type=float, default=1.0)
    e.add_argument("--n-test", type=int, default=100)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("align", help="two-stage depth alignment, standalone")
    a.add_argument("--rendered", required=True)
    a.add_argument("--estimated", required=True)
    a.add_argument("--mask")
    a.add_argument("--out")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--smoothness", type=float, default=0.1)
    a.set_defaults(func=cmd_align)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ProviderError,) as exc:
        print(f"provider failure [{exc.code}]: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (NumericError, AlignmentError, CheckpointError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

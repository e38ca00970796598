"""Command-line entry point: ``roverscape <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import camera, formats, imgfilter, pipeline, render, trajectory
from .errors import RoverscapeError
from .geometry import load_depth, load_ply

logger = logging.getLogger("roverscape")


def _global_flags(p: argparse.ArgumentParser, top: bool) -> None:
    default = None if top else argparse.SUPPRESS
    p.add_argument("--seed", type=int, default=0 if top else default, help="random seed (default 0)")
    p.add_argument("--workers", type=int, default=1 if top else default, help="worker threads (default 1)")
    p.add_argument("--out", default=default, help="output file or directory")


def _need_out(args) -> Path:
    if not args.out:
        raise SystemExit("error: --out is required for this command")
    return Path(args.out)


def cmd_filter(args) -> int:
    th = imgfilter.FilterThresholds()
    for name in ("min_dim", "min_bytes", "var_threshold", "max_hamming", "lap_var_threshold", "spike_bound",
                 "entropy_min", "entropy_max"):
        value = getattr(args, name)
        if value is not None:
            th = pipeline.apply_threshold(th, name, str(value))
    manifest = Path(args.manifest)
    ids = imgfilter.read_manifest(manifest)
    excl = imgfilter.read_manifest(args.exclusions) if args.exclusions else None
    reports = imgfilter.run_filter_pipeline(ids, th, base_dir=manifest.parent, exclusions=excl,
                                            workers=args.workers)
    imgfilter.write_report(_need_out(args), reports)
    kept = sum(r.kept for r in reports)
    print(f"{kept}/{len(reports)} images kept")
    return 0


def cmd_convert_camera(args) -> int:
    out = _need_out(args)
    if args.cahvor:
        pose, intr = camera.cahvor_to_pinhole(camera.load_cahvor(args.cahvor))
        camera.save_intrinsics(out, intr)
        if args.pose_out:
            formats.write_poses(args.pose_out, [pose])
    else:
        intr = camera.load_intrinsics(args.intrinsics)
        pose = formats.read_poses(args.pose)[0] if args.pose else camera.Pose.identity()
        camera.save_cahvor(out, camera.pinhole_to_cahvor(pose, intr))
    return 0


def cmd_reconstruct(args) -> int:
    m = pipeline.read_scene_manifest(args.manifest)
    rec = pipeline.run_reconstruct(m, seed=args.seed, stride=args.stride)
    pipeline.write_reconstruction(_need_out(args), rec)
    sys.stdout.write(rec.report())
    return 0


def cmd_trajectory(args) -> int:
    traj = trajectory.canonical_trajectory(args.kind, args.extent, args.frames, radius=args.reference_depth)
    if args.depth_map:
        stats = trajectory.DepthStats.from_depth(load_depth(args.depth_map))
        traj = trajectory.depth_adaptive_scale(traj, stats, args.reference_depth)
    trajectory.save_trajectory(_need_out(args), traj)
    print(trajectory.describe_motion(traj))
    return 0


def cmd_render(args) -> int:
    cloud = load_ply(args.cloud)
    traj = trajectory.load_trajectory(args.trajectory)
    intr = camera.load_intrinsics(args.intrinsics)
    frames = render.render_sequence(cloud, traj, intr, args.splat_radius, workers=args.workers)
    cap = trajectory.caption_path(args.trajectory)
    caption = cap.read_text(encoding="utf-8").strip() if cap.exists() else None
    render.write_sequence(_need_out(args), frames, traj, intr, caption)
    return 0


def cmd_evaluate(args) -> int:
    rep = pipeline.run_evaluate(args.sequence, args.reference, truth_dir=args.truth, stride=args.stride,
                                pairs=args.pairs)
    text = rep.to_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _parse_perturb(items) -> dict | None:
    if not items:
        return None
    spec = {}
    for item in items:
        key, _, value = item.partition("=")
        try:
            spec[key] = float(value)
        except ValueError:
            spec[key] = value
    return spec


def cmd_synth(args) -> int:
    out = _need_out(args)
    if args.mode == "scene":
        path = pipeline.write_oracle_scene(out, args.seed, size=args.size, perturbation=_parse_perturb(args.perturb))
        print(path)
    else:
        spec = pipeline.TrajectorySpec(args.kind, args.extent, args.frames)
        pipeline.write_oracle_sequence(out, args.seed, spec, size=args.size)
    return 0


def cmd_pipeline(args) -> int:
    res = pipeline.run_pipeline(args.manifest, _need_out(args), seed=args.seed, workers=args.workers)
    print(f"{res.index_path}: {len(res.records)} rows, exit {res.exit_code}")
    return res.exit_code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roverscape", description="Planetary stereo data engine.")
    _global_flags(p, top=True)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("filter", help="quality-gate an image manifest")
    f.add_argument("--manifest", required=True)
    f.add_argument("--exclusions")
    f.add_argument("--min-dim", dest="min_dim", type=int)
    f.add_argument("--min-bytes", dest="min_bytes", type=int)
    f.add_argument("--var-threshold", dest="var_threshold", type=float)
    f.add_argument("--max-hamming", dest="max_hamming", type=int)
    f.add_argument("--lap-var", dest="lap_var_threshold", type=float)
    f.add_argument("--spike-bound", dest="spike_bound", type=float)
    f.add_argument("--entropy-min", dest="entropy_min", type=float)
    f.add_argument("--entropy-max", dest="entropy_max", type=float)
    f.set_defaults(func=cmd_filter)

    c = sub.add_parser("convert-camera", help="CAHVOR <-> pinhole conversion")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--cahvor", help="CAHVOR file to convert to pinhole intrinsics")
    src.add_argument("--intrinsics", help="pinhole file to convert to CAHVOR")
    c.add_argument("--pose", help="world->camera pose file used with --intrinsics")
    c.add_argument("--pose-out", help="write the world->camera pose recovered from --cahvor")
    c.set_defaults(func=cmd_convert_camera)

    r = sub.add_parser("reconstruct", help="pose, depth alignment and fused cloud for one scene")
    r.add_argument("--manifest", required=True)
    r.add_argument("--stride", type=int, default=1)
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("trajectory", help="synthesize a canonical camera trajectory")
    t.add_argument("--kind", required=True, choices=trajectory.KINDS)
    t.add_argument("--extent", type=float, required=True)
    t.add_argument("--frames", type=int, default=trajectory.DEFAULT_FRAMES)
    t.add_argument("--depth-map", dest="depth_map")
    t.add_argument("--reference-depth", dest="reference_depth", type=float, default=trajectory.DEFAULT_REFERENCE_DEPTH)
    t.set_defaults(func=cmd_trajectory)

    d = sub.add_parser("render", help="render a point cloud along a trajectory")
    d.add_argument("--cloud", required=True)
    d.add_argument("--trajectory", required=True)
    d.add_argument("--intrinsics", required=True)
    d.add_argument("--splat-radius", dest="splat_radius", type=float)
    d.set_defaults(func=cmd_render)

    e = sub.add_parser("evaluate", help="warp error and image metrics of a sequence")
    e.add_argument("--sequence", required=True)
    e.add_argument("--reference")
    e.add_argument("--truth")
    e.add_argument("--stride", type=int, default=8)
    e.add_argument("--pairs", choices=("consecutive", "all"), default="consecutive")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", help="write a synthetic oracle scene or sequence")
    s.add_argument("--mode", choices=("scene", "sequence"), default="scene")
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--kind", choices=trajectory.KINDS, default="orbit")
    s.add_argument("--extent", type=float, default=0.15)
    s.add_argument("--frames", type=int, default=trajectory.DEFAULT_FRAMES)
    s.add_argument("--perturb", nargs="*", metavar="KEY=VALUE",
                   help="capture perturbation, e.g. kind=depth_affine s=2 b=0.5")
    s.set_defaults(func=cmd_synth)

    pp = sub.add_parser("pipeline", help="run the full batch pipeline")
    pp.add_argument("--manifest", required=True)
    pp.set_defaults(func=cmd_pipeline)

    for sp in (f, c, r, t, d, e, s, pp):
        _global_flags(sp, top=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RoverscapeError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

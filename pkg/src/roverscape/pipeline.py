"""Batch orchestration: filter, reconstruct, synthesize trajectories, render, evaluate.

Manifests are line-oriented text with a versioned first line.  Paths inside a
manifest are resolved relative to the manifest's directory.

Scene manifest::

    scene-manifest v1
    scene_id <id>
    left <image>            right <image>
    intrinsics <file>       (or: cahvor <file>; optional intrinsics_right / cahvor_right)
    depth_left <file>       depth_right <file>
    correspondences <file>
    exclusions <file>       (optional; image ids to reject up front)
    threshold <name> <value>  (optional filter overrides, repeatable)

Batch manifest::

    batch-manifest v1
    scene <scene manifest>
    trajectory <kind> <extent> [frames]
    threshold <name> <value>
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import camera, formats, imgfilter, render, synthworld, trajectory
from .camera import Intrinsics, Pose, back_project_pixels
from .consistency import FrameGeometry, frame_pairs, psnr, ssim, warp_error
from .errors import (
    BadParams,
    DegenerateConfiguration,
    FormatError,
    LayoutError,
    MissingInput,
    RoverscapeError,
)
from .geometry import (
    DepthAlignment,
    DepthMap,
    PnpResult,
    PointCloud,
    View,
    align_depth,
    fuse_point_clouds,
    initial_gaussian_scales,
    load_depth,
    save_ply,
    solve_pnp,
)

logger = logging.getLogger(__name__)

SCENE_HEADER = "scene-manifest v1"
BATCH_HEADER = "batch-manifest v1"
INDEX_HEADER = "scene_id\ttrajectory\tframes\tstatus\tpath\tl2d\tcaption"
MIN_BASELINE = 1e-6

_FLOAT_THRESHOLDS = {"var_threshold", "lap_var_threshold", "spike_bound"}
_INT_THRESHOLDS = {"min_dim", "min_bytes", "max_hamming"}


# ---------------------------------------------------------------------------
# manifests


def _manifest_lines(path, header):
    path = Path(path)
    if not path.exists():
        raise MissingInput(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    body = [(i, ln.split()) for i, ln in enumerate(lines, 1) if ln.strip() and not ln.lstrip().startswith("#")]
    if not body or " ".join(body[0][1]) != header:
        raise FormatError(f"{path}: first line must be {header!r}")
    return path.parent, body[1:]


def apply_threshold(th: imgfilter.FilterThresholds, name: str, value: str) -> imgfilter.FilterThresholds:
    if name in _FLOAT_THRESHOLDS:
        return replace(th, **{name: float(value)})
    if name in _INT_THRESHOLDS:
        return replace(th, **{name: int(value)})
    if name == "entropy_min":
        return replace(th, entropy_bounds=(float(value), th.entropy_bounds[1]))
    if name == "entropy_max":
        return replace(th, entropy_bounds=(th.entropy_bounds[0], float(value)))
    raise FormatError(f"unknown filter threshold {name!r}")


@dataclass(frozen=True)
class SceneManifest:
    scene_id: str
    left: Path
    right: Path
    depth_left: Path
    depth_right: Path
    correspondences: Path
    intrinsics: Path | None = None
    cahvor: Path | None = None
    intrinsics_right: Path | None = None
    cahvor_right: Path | None = None
    exclusions: Path | None = None
    thresholds: tuple[tuple[str, str], ...] = ()

    def filter_thresholds(self, base: imgfilter.FilterThresholds) -> imgfilter.FilterThresholds:
        th = base
        for name, value in self.thresholds:
            th = apply_threshold(th, name, value)
        return th

    def check_inputs(self) -> None:
        for p in (self.left, self.right, self.depth_left, self.depth_right, self.correspondences,
                  self.intrinsics, self.cahvor, self.intrinsics_right, self.cahvor_right, self.exclusions):
            if p is not None and not p.exists():
                raise MissingInput(p)

    def excluded_ids(self) -> set[str]:
        if self.exclusions is None:
            return set()
        return set(imgfilter.read_manifest(self.exclusions))


_PATH_KEYS = ("left", "right", "depth_left", "depth_right", "correspondences", "intrinsics", "cahvor",
              "intrinsics_right", "cahvor_right", "exclusions")


def read_scene_manifest(path) -> SceneManifest:
    base, body = _manifest_lines(path, SCENE_HEADER)
    fields_: dict = {}
    thresholds = []
    for lineno, toks in body:
        key = toks[0]
        if key == "threshold":
            if len(toks) != 3:
                raise FormatError(f"{path}:{lineno}: threshold needs a name and a value")
            thresholds.append((toks[1], toks[2]))
        elif key == "scene_id" and len(toks) == 2:
            fields_["scene_id"] = toks[1]
        elif key in _PATH_KEYS and len(toks) == 2:
            fields_[key] = base / toks[1]
        else:
            raise FormatError(f"{path}:{lineno}: unrecognised entry {' '.join(toks)!r}")
    if ("intrinsics" in fields_) == ("cahvor" in fields_):
        raise FormatError(f"{path}: give exactly one of 'intrinsics' or 'cahvor'")
    required = ("scene_id", "left", "right", "depth_left", "depth_right", "correspondences")
    missing = [k for k in required if k not in fields_]
    if missing:
        raise FormatError(f"{path}: missing {', '.join(missing)}")
    return SceneManifest(thresholds=tuple(thresholds), **fields_)


def write_scene_manifest(path, m: SceneManifest) -> None:
    base = Path(path).parent
    lines = [SCENE_HEADER, f"scene_id {m.scene_id}"]
    for key in _PATH_KEYS:
        p = getattr(m, key)
        if p is not None:
            lines.append(f"{key} {Path(p).relative_to(base).as_posix()}")
    lines += [f"threshold {n} {v}" for n, v in m.thresholds]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str
    extent: float
    frames: int = trajectory.DEFAULT_FRAMES


@dataclass(frozen=True)
class BatchManifest:
    scenes: tuple[Path, ...]
    trajectories: tuple[TrajectorySpec, ...]
    thresholds: tuple[tuple[str, str], ...] = ()


def read_batch_manifest(path) -> BatchManifest:
    base, body = _manifest_lines(path, BATCH_HEADER)
    scenes, trajs, thresholds = [], [], []
    for lineno, toks in body:
        key = toks[0]
        if key == "scene" and len(toks) == 2:
            scenes.append(base / toks[1])
        elif key == "trajectory" and len(toks) in (3, 4):
            frames = int(toks[3]) if len(toks) == 4 else trajectory.DEFAULT_FRAMES
            trajs.append(TrajectorySpec(toks[1], float(toks[2]), frames))
        elif key == "threshold" and len(toks) == 3:
            thresholds.append((toks[1], toks[2]))
        else:
            raise FormatError(f"{path}:{lineno}: unrecognised entry {' '.join(toks)!r}")
    return BatchManifest(tuple(scenes), tuple(trajs), tuple(thresholds))


def write_batch_manifest(path, scene_paths, specs, thresholds=()) -> None:
    base = Path(path).parent
    lines = [BATCH_HEADER]
    lines += [f"scene {Path(p).relative_to(base).as_posix()}" for p in scene_paths]
    lines += [f"trajectory {s.kind} {s.extent!r} {s.frames}" for s in specs]
    lines += [f"threshold {n} {v}" for n, v in thresholds]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# reconstruction


def _load_camera(intr_path, cahvor_path) -> Intrinsics:
    if intr_path is not None:
        return camera.load_intrinsics(intr_path)
    _, intr = camera.cahvor_to_pinhole(camera.load_cahvor(cahvor_path))
    return intr


@dataclass(eq=False)
class Reconstruction:
    scene_id: str
    cloud: PointCloud
    relative_pose: Pose  # view-1 camera -> view-2 camera
    pnp: PnpResult
    alignment: DepthAlignment
    intr_left: Intrinsics
    intr_right: Intrinsics
    depth_left: DepthMap  # after the scale/offset adjustment
    correspondences: int

    def report(self) -> str:
        R = self.relative_pose
        rows = [
            ("scene_id", self.scene_id),
            ("correspondences", str(self.correspondences)),
            ("inliers", str(int(self.pnp.inliers.sum()))),
            ("reprojection_rms_px", repr(self.pnp.reprojection_rms)),
            ("pnp_iterations", str(self.pnp.iterations)),
            ("rotation_rad", repr(camera.rotation_angle(R.rotation))),
            ("rotvec", " ".join(repr(float(v)) for v in camera.matrix_to_rotvec(R.rotation))),
            ("translation", " ".join(repr(float(v)) for v in R.translation)),
            ("depth_scale", repr(self.alignment.s)),
            ("depth_offset", repr(self.alignment.b)),
            ("depth_residual_rms", repr(self.alignment.residual_rms)),
            ("depth_samples", str(self.alignment.sample_count)),
            ("points", str(len(self.cloud))),
        ]
        return "".join(f"{k}\t{v}\n" for k, v in rows)


def run_reconstruct(manifest: SceneManifest, *, seed: int = 0, stride: int = 1,
                    ransac_threshold: float = 2.0) -> Reconstruction:
    """Relative pose, depth alignment and fused cloud for one stereo scene.

    The world frame is the left camera.  View-1 points are lifted from the
    left depth at the correspondence pixels, PnP recovers the right camera,
    and the right depth is compared with the depths PnP predicts for the
    inlier points.  The fitted (s, b) adjusts the left depth toward the right
    one; the recovered translation is scaled by s so both views stay
    consistent before fusion.
    """
    manifest.check_inputs()
    intr1 = _load_camera(manifest.intrinsics, manifest.cahvor)
    if manifest.intrinsics_right is not None or manifest.cahvor_right is not None:
        intr2 = _load_camera(manifest.intrinsics_right, manifest.cahvor_right)
    else:
        intr2 = intr1
    img1 = formats.read_image(manifest.left)
    img2 = formats.read_image(manifest.right)
    d1 = load_depth(manifest.depth_left)
    d2 = load_depth(manifest.depth_right)
    uv1, uv2, _ = formats.read_correspondences(manifest.correspondences)

    z1, ok1 = d1.sample(uv1)
    uv1, uv2, z1 = uv1[ok1], uv2[ok1], z1[ok1]
    P1 = back_project_pixels(uv1, z1, intr1)
    pnp = solve_pnp(P1, uv2, intr2, seed=seed, ransac_threshold=ransac_threshold)
    rel = pnp.pose
    if float(np.linalg.norm(rel.translation)) < MIN_BASELINE:
        raise DegenerateConfiguration(
            f"recovered baseline {np.linalg.norm(rel.translation):.3e} m is below {MIN_BASELINE} m")

    inl = np.flatnonzero(pnp.inliers)
    z_pred = rel.apply(P1[inl])[:, 2]
    z2, ok2 = d2.sample(uv2[inl])
    align = align_depth(z_pred[ok2], z2[ok2])
    d1_adj = d1.affine(align.s, align.b)
    rel_adj = Pose(rel.rotation, align.s * rel.translation)

    views = [View(img1, d1_adj, intr1, Pose.identity()), View(img2, d2, intr2, rel_adj)]
    cloud = fuse_point_clouds(views, stride=stride)
    cloud.scales = initial_gaussian_scales(cloud, views)
    return Reconstruction(manifest.scene_id, cloud, rel_adj, pnp, align, intr1, intr2, d1_adj, int(uv1.shape[0]))


def write_reconstruction(out_dir, rec: Reconstruction) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(out / "cloud.ply", rec.cloud)
    formats.write_poses(out / "poses.txt", [Pose.identity(), rec.relative_pose])
    (out / "reconstruction.tsv").write_text(rec.report(), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (kind, a, b, metric, value)
    l2d: float = math.nan

    def to_text(self) -> str:
        lines = ["kind\ta\tb\tmetric\tvalue"]
        for kind, a, b, metric, value in self.rows:
            lines.append(f"{kind}\t{a}\t{b}\t{metric}\t{_fmt_metric(value)}")
        return "\n".join(lines) + "\n"


def _fmt_metric(v) -> str:
    v = float(v)
    if math.isinf(v):
        return "inf"
    if math.isnan(v):
        return "nan"
    return repr(v)


def _indexed(dir_: Path, suffix: str) -> list[Path]:
    return sorted(p for p in dir_.glob(f"*{suffix}") if p.stem.isdigit())


def read_sequence(seq_dir):
    """Frames, depths, camera->world poses and intrinsics of a sequence directory."""
    seq = Path(seq_dir)
    for name in ("frames", "depth", "poses.txt", "intrinsics.txt"):
        if not (seq / name).exists():
            raise LayoutError(seq / name)
    frames = _indexed(seq / "frames", ".png")
    depths = _indexed(seq / "depth", ".pfm")
    poses = formats.read_poses(seq / "poses.txt")
    if not frames:
        raise LayoutError(seq / "frames" / "00000.png")
    for i in range(len(frames)):
        if i >= len(depths) or depths[i].stem != f"{i:05d}":
            raise LayoutError(seq / "depth" / f"{i:05d}.pfm")
        if frames[i].stem != f"{i:05d}":
            raise LayoutError(seq / "frames" / f"{i:05d}.png")
    if len(poses) != len(frames):
        raise LayoutError(seq / "poses.txt")
    intr = camera.load_intrinsics(seq / "intrinsics.txt")
    return frames, depths, poses, intr


def _truth_expected(truth_dir: Path, k: int, i: int, grid: np.ndarray):
    path = truth_dir / f"corr_{k:05d}_{i:05d}.txt"
    if not path.exists():
        return None
    uv_k, uv_i, _ = formats.read_correspondences(path)
    lookup = {(float(a), float(b)): j for j, (a, b) in enumerate(uv_k)}
    exp = np.full(grid.shape, np.nan)
    for r, (a, b) in enumerate(grid):
        j = lookup.get((float(a), float(b)))
        if j is not None:
            exp[r] = uv_i[j]
    return exp


def run_evaluate(seq_dir, reference_dir=None, *, truth_dir=None, stride: int = 8,
                 pairs: str = "consecutive") -> EvalReport:
    """Warp error of a sequence, plus PSNR/SSIM against reference frames.

    Cross terms use ``truth/corr_KKKKK_IIIII.txt`` correspondences when the
    sequence (or ``truth_dir``) provides them, and the depth round trip
    otherwise.
    """
    seq = Path(seq_dir)
    frames, depths, poses, intr = read_sequence(seq)
    geos = [FrameGeometry.from_depth(load_depth(d), intr, p, stride) for d, p in zip(depths, poses)]
    tdir = Path(truth_dir) if truth_dir is not None else seq / "truth"
    corr = {}
    if tdir.is_dir():
        for k, i in frame_pairs(len(geos), pairs):
            exp = _truth_expected(tdir, k, i, geos[k].grid)
            if exp is not None:
                corr[(k, i)] = exp
    rep = warp_error(geos, pairs, correspondences=corr)
    out = EvalReport(l2d=rep.l2d)
    for j, v in enumerate(rep.self_errors):
        out.rows.append(("frame", j, "-", "l_self", v))
    for (k, i), v in rep.cross_errors:
        out.rows.append(("pair", k, i, "l_cross", v))

    if reference_dir is not None:
        ref = Path(reference_dir)
        ref_frames = _indexed(ref / "frames", ".png") if (ref / "frames").is_dir() else _indexed(ref, ".png")
        if len(ref_frames) < len(frames):
            raise LayoutError(ref / "frames" / f"{len(ref_frames):05d}.png")
        ps, ss = [], []
        for j, (a, b) in enumerate(zip(frames, ref_frames)):
            ia = formats.read_image(a).astype(np.float64) / 255.0
            ib = formats.read_image(b).astype(np.float64) / 255.0
            ps.append(psnr(ia, ib))
            ss.append(ssim(ia, ib))
            out.rows.append(("frame", j, "-", "psnr", ps[-1]))
            out.rows.append(("frame", j, "-", "ssim", ss[-1]))
        out.rows.append(("summary", "-", "-", "psnr", float(np.mean(ps))))
        out.rows.append(("summary", "-", "-", "ssim", float(np.mean(ss))))

    out.rows.append(("summary", "-", "-", "l_self_avg", rep.self_avg))
    out.rows.append(("summary", "-", "-", "l_cross_avg", rep.cross_avg))
    out.rows.append(("summary", "-", "-", "l2d_reproj", rep.l2d))
    return out


# ---------------------------------------------------------------------------
# synthetic scenes and sequences


def write_oracle_scene(out_dir, seed: int, *, size: int = 256, scene_id: str | None = None,
                       perturbation: dict | None = None) -> Path:
    """Write a ray-cast stereo capture as a scene directory; returns its manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cap = synthworld.oracle_scene(seed, size=size)
    records = []
    if perturbation is not None:
        cap, rec = synthworld.perturb(cap, perturbation, seed)
        records.append(rec)
    formats.write_png(out / "left.png", cap.left.image)
    formats.write_png(out / "right.png", cap.right.image)
    formats.write_pfm(out / "left_depth.pfm", cap.left.depth.values)
    formats.write_pfm(out / "right_depth.pfm", cap.right.depth.values)
    camera.save_intrinsics(out / "intrinsics.txt", cap.intr)
    formats.write_correspondences(out / "correspondences.txt", cap.uv1, cap.uv2)
    truth = out / "truth"
    truth.mkdir(exist_ok=True)
    formats.write_poses(truth / "poses_world_to_camera.txt", [cap.left.pose, cap.right.pose])
    formats.write_poses(truth / "relative_pose.txt", [cap.relative_pose])
    _write_records(truth / "perturbations.txt", records)
    m = SceneManifest(
        scene_id=scene_id or f"scene{seed:03d}", left=out / "left.png", right=out / "right.png",
        depth_left=out / "left_depth.pfm", depth_right=out / "right_depth.pfm",
        correspondences=out / "correspondences.txt", intrinsics=out / "intrinsics.txt",
    )
    path = out / "scene.manifest"
    write_scene_manifest(path, m)
    return path


def _write_records(path, records) -> None:
    lines = []
    for rec in records:
        lines.append("\t".join(f"{k}={rec[k]}" for k in sorted(rec)))
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def write_oracle_sequence(out_dir, seed: int, spec: TrajectorySpec, *, size: int = 256,
                          stride: int = 8) -> Path:
    """Ray-cast a trajectory over a seeded terrain in the render layout plus ``truth/``."""
    rng = np.random.default_rng(seed)
    terrain = synthworld.generate_terrain(seed)
    anchor = synthworld.rover_pose(terrain, x=float(rng.uniform(-2, 2)), y=float(rng.uniform(-8, -4)),
                                   height=float(rng.uniform(1.4, 1.9)), pitch_deg=float(rng.uniform(36, 48)),
                                   yaw_deg=float(rng.uniform(-20, 20))).inverse()
    intr = synthworld.default_intrinsics(size, size)
    first = synthworld.render_oracle_view(terrain, intr, anchor.inverse())
    stats = trajectory.DepthStats.from_depth(first.depth)
    traj = trajectory.depth_adaptive_scale(
        trajectory.canonical_trajectory(spec.kind, spec.extent, spec.frames, anchor), stats)
    views = synthworld.render_oracle_sequence(terrain, intr, traj.world_to_camera())
    frames = [render.Frame(v.image, v.depth, v.depth.valid, v.pose, j) for j, v in enumerate(views)]
    out = render.write_sequence(out_dir, frames, traj, intr)
    truth = out / "truth"
    truth.mkdir(exist_ok=True)
    for k, i in frame_pairs(len(views)):
        geo = FrameGeometry.from_depth(views[k].depth, intr, traj.poses[k], stride)
        exp = synthworld.project_grid(terrain, views[k], views[i], geo.grid)
        found = np.all(np.isfinite(exp), axis=1)
        formats.write_correspondences(truth / f"corr_{k:05d}_{i:05d}.txt", geo.grid[found], exp[found])
    _write_records(truth / "perturbations.txt", [])
    return out


# ---------------------------------------------------------------------------
# batch pipeline


@dataclass
class SequenceRecord:
    scene_id: str
    trajectory: str
    frames: int
    status: str
    path: str = "-"
    l2d: float = math.nan
    caption: str = "-"

    def row(self) -> str:
        l2d = "-" if math.isnan(self.l2d) else _fmt_metric(self.l2d)
        return "\t".join([self.scene_id, self.trajectory, str(self.frames), self.status, self.path, l2d,
                          self.caption])


@dataclass
class PipelineResult:
    records: list
    exit_code: int
    index_path: Path


def _scene_sequences(rec: Reconstruction, specs, out: Path, scene_dir: Path, workers: int) -> list:
    stats = trajectory.DepthStats.from_depth(rec.depth_left)
    records = []
    for j, spec in enumerate(specs):
        name = f"{j:02d}_{spec.kind}"
        traj = trajectory.depth_adaptive_scale(
            trajectory.canonical_trajectory(spec.kind, spec.extent, spec.frames), stats)
        frames = render.render_sequence(rec.cloud, traj, rec.intr_left, workers=workers)
        caption = trajectory.describe_motion(traj)
        seq_dir = render.write_sequence(scene_dir / name, frames, traj, rec.intr_left, caption)
        ev = run_evaluate(seq_dir)
        (seq_dir / "metrics.tsv").write_text(ev.to_text(), encoding="utf-8")
        records.append(SequenceRecord(rec.scene_id, name, len(frames), "ok",
                                      seq_dir.relative_to(out).as_posix(), ev.l2d, caption))
    return records


def run_pipeline(batch_path, out_dir, *, seed: int = 0, workers: int = 1,
                 thresholds: imgfilter.FilterThresholds | None = None) -> PipelineResult:
    """Filter, reconstruct and render every scene of a batch manifest.

    Writes ``filter_report.tsv``, per-scene reconstruction and sequence
    directories, and ``index.tsv`` (one row per sequence plus one per failed
    scene, in manifest order).  Exit code 0 when every scene succeeds, 2 when
    some fail and 1 when all fail.
    """
    batch = read_batch_manifest(batch_path)
    if not batch.trajectories:
        raise BadParams("batch manifest lists no trajectories")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base_th = thresholds or imgfilter.FilterThresholds()
    for name, value in batch.thresholds:
        base_th = apply_threshold(base_th, name, value)

    scenes: list = []
    failures: dict[int, str] = {}
    for n, p in enumerate(batch.scenes):
        try:
            m = read_scene_manifest(p)
            m.check_inputs()
            scenes.append(m)
        except RoverscapeError as exc:
            scenes.append(None)
            failures[n] = f"manifest: {type(exc).__name__}: {exc}"

    # filter every left/right image; dedup only across left images
    ids, ths, mask, owner, excluded = [], [], [], [], set()
    for n, m in enumerate(scenes):
        if m is None:
            continue
        th = m.filter_thresholds(base_th)
        for side, path in (("left", m.left), ("right", m.right)):
            ids.append(path.as_posix())
            ths.append(th)
            mask.append(side == "left")
            owner.append(n)
        excluded |= {(m.left.parent / e).as_posix() for e in m.excluded_ids()}
    reports = imgfilter.run_filter_pipeline(ids, ths, exclusions=excluded, dedup_mask=mask, workers=workers)
    shown = [imgfilter.QualityReport(_rel(r.image_id, out, batch_path), r.gate_results, r.verdict, r.reason)
             for r in reports]
    imgfilter.write_report(out / "filter_report.tsv", shown)
    for r, n in zip(shown, owner):
        if not r.kept and n not in failures:
            failures[n] = f"rejected: {r.failed_gate} ({r.image_id})"

    def do_scene(n):
        m = scenes[n]
        scene_dir = out / m.scene_id
        rec = run_reconstruct(m, seed=seed)
        write_reconstruction(scene_dir, rec)
        return _scene_sequences(rec, batch.trajectories, out, scene_dir, 1)

    todo = [n for n in range(len(scenes)) if n not in failures]
    results: dict[int, list] = {}

    def guarded(n):
        try:
            return n, do_scene(n), None
        except RoverscapeError as exc:
            return n, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for n, recs, err in pool.map(guarded, todo):
            if err is None:
                results[n] = recs
            else:
                failures[n] = err
                logger.warning("scene %s failed: %s", scenes[n].scene_id, err)

    records = []
    for n in range(len(scenes)):
        if n in results:
            records += results[n]
        else:
            sid = scenes[n].scene_id if scenes[n] is not None else Path(batch.scenes[n]).stem
            records.append(SequenceRecord(sid, "-", 0, _one_line(failures[n])))
    index = out / "index.tsv"
    index.write_text(INDEX_HEADER + "\n" + "".join(r.row() + "\n" for r in records), encoding="utf-8")
    ok = len(results)
    code = 0 if ok == len(scenes) else (1 if ok == 0 else 2)
    return PipelineResult(records, code, index)


def _one_line(s: str) -> str:
    return " ".join(s.replace("\t", " ").split())


def _rel(image_id: str, out: Path, batch_path) -> str:
    """Image ids relative to the batch manifest, so reports do not embed absolute paths."""
    p = Path(image_id)
    try:
        return p.relative_to(Path(batch_path).parent).as_posix()
    except ValueError:
        return p.as_posix()

"""Virtual camera trajectories: canonical paths, depth-adaptive scaling,
pose interpolation and rule-based motion captions.

Trajectory poses are camera->world.  Paths are expressed relative to an
anchor pose: frame ``t`` is ``anchor @ M_t`` where ``M_t`` maps camera ``t``
into the anchor camera frame (x right, y down, z forward).  Positive pan
angles turn the view to the right.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from .camera import Pose, matrix_to_rotvec, rotvec_to_matrix
from .errors import BadParams, EmptyCloud, FormatError, OutOfRange, UnknownKind

KINDS = ("dolly", "truck", "boom", "pan", "orbit", "spiral")
DEFAULT_FRAMES = 49
DEFAULT_REFERENCE_DEPTH = 10.0
SCALE_CLAMP = (0.05, 20.0)

# caption thresholds
_ROT_STATIC = 1e-3  # rad
_TRANS_STATIC = 1e-6  # m, before scale_factor
_ROT_SLIGHT = math.radians(10.0)
_TRANS_SLIGHT = 0.1  # m, before scale_factor


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[Pose, ...]
    kind: str
    scale_factor: float = 1.0
    timestamps: tuple[float, ...] = field(default=())

    def __post_init__(self):
        poses = tuple(self.poses)
        object.__setattr__(self, "poses", poses)
        if len(poses) < 2:
            raise BadParams("a trajectory needs at least 2 poses")
        ts = tuple(float(t) for t in self.timestamps) or tuple(float(i) for i in range(1, len(poses) + 1))
        if len(ts) != len(poses):
            raise BadParams("one timestamp per pose is required")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise BadParams("timestamps must be strictly increasing")
        object.__setattr__(self, "timestamps", ts)

    def __len__(self):
        return len(self.poses)

    def world_to_camera(self) -> list[Pose]:
        return [p.inverse() for p in self.poses]


@dataclass(frozen=True)
class DepthStats:
    median_depth: float
    p10_depth: float
    p90_depth: float

    def __post_init__(self):
        if not 0 < self.p10_depth <= self.median_depth <= self.p90_depth:
            raise BadParams("depth stats need 0 < p10 <= median <= p90")

    @classmethod
    def from_depth(cls, depth) -> "DepthStats":
        """Percentiles over the valid pixels of a DepthMap or raw array."""
        values = getattr(depth, "values", depth)
        valid = getattr(depth, "valid", None)
        d = np.asarray(values, dtype=np.float64)
        mask = np.isfinite(d) & (d > 0)
        if valid is not None:
            mask &= np.asarray(valid, dtype=bool)
        if not np.any(mask):
            raise EmptyCloud("depth map has no valid pixels")
        p10, med, p90 = np.percentile(d[mask], [10, 50, 90])
        return cls(float(med), float(p10), float(p90))


def _rot_y(theta: float) -> np.ndarray:
    return rotvec_to_matrix([0.0, theta, 0.0])


def _local_motion(kind: str, s: float, extent: float, radius: float, spiral_dolly: float) -> Pose:
    if kind == "dolly":
        return Pose(np.eye(3), [0.0, 0.0, s * extent])
    if kind == "truck":
        return Pose(np.eye(3), [s * extent, 0.0, 0.0])
    if kind == "boom":
        # camera y points down, so rising is -y
        return Pose(np.eye(3), [0.0, -s * extent, 0.0])
    if kind == "pan":
        return Pose(_rot_y(s * extent), np.zeros(3))
    r = radius * (1.0 - spiral_dolly * s) if kind == "spiral" else radius
    R = _rot_y(s * extent)
    pivot = np.array([0.0, 0.0, radius])
    return Pose(R, pivot + R @ np.array([0.0, 0.0, -r]))


def canonical_trajectory(kind: str, extent: float, n_frames: int = DEFAULT_FRAMES, anchor: Pose | None = None,
                         *, radius: float = DEFAULT_REFERENCE_DEPTH, spiral_dolly: float = 0.5) -> Trajectory:
    """Closed-form path of ``n_frames`` poses starting at ``anchor``.

    ``extent`` is metres for dolly/truck/boom and radians for pan/orbit/spiral.
    Orbit and spiral circle a pivot ``radius`` metres along the anchor's
    optical axis; the spiral also closes ``spiral_dolly`` of the radius.
    """
    if kind not in KINDS:
        raise UnknownKind(f"unknown trajectory kind {kind!r}; expected one of {', '.join(KINDS)}")
    if not n_frames >= 2:
        raise BadParams("n_frames must be >= 2")
    if not (math.isfinite(extent) and extent > 0):
        raise BadParams("extent must be positive")
    if kind in ("orbit", "spiral") and not radius > 0:
        raise BadParams("orbit radius must be positive")
    if kind == "spiral" and not 0 <= spiral_dolly < 1:
        raise BadParams("spiral_dolly must be in [0, 1)")
    anchor = anchor or Pose.identity()
    poses = []
    for i in range(n_frames):
        s = i / (n_frames - 1)
        poses.append(anchor.compose(_local_motion(kind, s, extent, radius, spiral_dolly)))
    return Trajectory(tuple(poses), kind)


def depth_adaptive_scale(traj: Trajectory, stats: DepthStats,
                         reference_depth: float = DEFAULT_REFERENCE_DEPTH,
                         clamp: tuple[float, float] = SCALE_CLAMP) -> Trajectory:
    """Scale camera displacements from the first pose by median/reference depth."""
    if not reference_depth > 0:
        raise BadParams("reference_depth must be positive")
    factor = min(max(stats.median_depth / reference_depth, clamp[0]), clamp[1])
    c0 = traj.poses[0].translation
    poses = []
    for p in traj.poses:
        c = c0 + factor * (p.translation - c0)
        poses.append(Pose(p.rotation, c))
    return Trajectory(tuple(poses), traj.kind, traj.scale_factor * factor, traj.timestamps)


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    """Slerp rotation and lerp camera centre between the bracketing keys."""
    ts = traj.timestamps
    if not ts[0] <= t <= ts[-1]:
        raise OutOfRange(f"t={t} outside [{ts[0]}, {ts[-1]}]")
    k = int(np.searchsorted(ts, t, side="left"))
    if ts[k] == t:
        return traj.poses[k]
    a, b = traj.poses[k - 1], traj.poses[k]
    w = (t - ts[k - 1]) / (ts[k] - ts[k - 1])
    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([a.rotation, b.rotation])))
    R = slerp([w]).as_matrix()[0]
    c = (1.0 - w) * a.translation + w * b.translation
    return Pose(R, c)


def resample(traj: Trajectory, n_frames: int) -> Trajectory:
    """Uniformly resample the path in time to ``n_frames`` poses."""
    if n_frames < 2:
        raise BadParams("n_frames must be >= 2")
    t0, t1 = traj.timestamps[0], traj.timestamps[-1]
    ts = [t0 + (t1 - t0) * i / (n_frames - 1) for i in range(n_frames)]
    ts[-1] = t1
    poses = tuple(interpolate_pose(traj, t) for t in ts)
    return Trajectory(poses, traj.kind, traj.scale_factor)


# ---------------------------------------------------------------------------
# captions


def _axes_intersection(d: np.ndarray, fwd1: np.ndarray) -> tuple[float, float] | None:
    """Distances along the start axis (origin, +z) and the end axis (d, fwd1)
    to their closest approach in the horizontal x-z plane."""
    a = np.array([0.0, 1.0])
    b = np.array([fwd1[0], fwd1[2]])
    p = np.array([d[0], d[2]])
    M = np.column_stack([a, -b])
    if abs(np.linalg.det(M)) < 1e-12:
        return None
    lam = np.linalg.solve(M, p)
    return float(lam[0]), float(lam[1])


def describe_motion(traj: Trajectory) -> str:
    """Fixed-template caption from the net motion between the first and last pose.

    Translation is classified by the dominant component of the displacement in
    the first camera's frame; rotation by its yaw (pan) and pitch (tilt)
    components.  Lateral motion opposite to the pan direction reads as an orbit.
    """
    first, last = traj.poses[0], traj.poses[-1]
    R0 = first.rotation
    d = R0.T @ (last.translation - first.translation)
    R_rel = R0.T @ last.rotation
    w = matrix_to_rotvec(R_rel)
    yaw, pitch = float(w[1]), float(w[0])
    unit = traj.scale_factor
    dist = float(np.linalg.norm(d))
    moving = dist > _TRANS_STATIC * unit
    turning = max(abs(yaw), abs(pitch)) > _ROT_STATIC

    if moving and abs(yaw) > _ROT_STATIC and d[0] * yaw < 0 and abs(d[0]) >= abs(d[1]):
        hit = _axes_intersection(d, R_rel[:, 2])
        if hit is not None and hit[0] > 0 and hit[1] > 0:
            r0, r1 = hit
            if r1 < 0.95 * r0:
                return "The camera orbits while moving forward."
            if r1 > 1.05 * r0:
                return "The camera orbits while moving backward."
            return "The camera orbits."

    parts = []
    if moving:
        axis = int(np.argmax(np.abs(d)))
        names = (("left", "right"), ("up", "down"), ("backward", "forward"))[axis]
        word = names[1] if d[axis] > 0 else names[0]
        adverb = "slightly " if dist < _TRANS_SLIGHT * unit else ""
        parts.append(f"moves {adverb}{word}")
    if turning:
        if abs(yaw) >= abs(pitch):
            verb, word, mag = "pans", "right" if yaw > 0 else "left", abs(yaw)
        else:
            verb, word, mag = "tilts", "up" if pitch > 0 else "down", abs(pitch)
        adverb = "slightly " if mag < _ROT_SLIGHT else ""
        parts.append(f"{verb} {adverb}{word}")
    if not parts:
        return "The camera remains still."
    return "The camera " + " and ".join(parts) + "."


# ---------------------------------------------------------------------------
# files


def _fmt(x) -> str:
    return repr(float(x))


def trajectory_to_text(traj: Trajectory) -> str:
    lines = [f"{traj.kind} {len(traj)} {_fmt(traj.scale_factor)}"]
    for p in traj.poses:
        lines.append(" ".join(_fmt(v) for v in p.matrix34().reshape(-1)))
    return "\n".join(lines) + "\n"


def trajectory_from_text(text: str) -> Trajectory:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise FormatError("empty trajectory file")
    head = lines[0].split()
    if len(head) != 3:
        raise FormatError("trajectory header must be 'kind N scale_factor'")
    kind, n, scale = head[0], int(head[1]), float(head[2])
    rows = lines[1:]
    if len(rows) != n:
        raise FormatError(f"header declares {n} poses, found {len(rows)}")
    poses = []
    for ln in rows:
        vals = ln.split()
        if len(vals) != 12:
            raise FormatError("pose rows need 12 values")
        poses.append(Pose.from_matrix(np.array([float(v) for v in vals]).reshape(3, 4)))
    return Trajectory(tuple(poses), kind, scale)


def caption_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".caption.txt")


def save_trajectory(path, traj: Trajectory, caption: str | None = None) -> None:
    """Write the trajectory file and its caption sidecar ``<stem>.caption.txt``."""
    Path(path).write_text(trajectory_to_text(traj), encoding="utf-8")
    text = describe_motion(traj) if caption is None else caption
    caption_path(path).write_text(text + "\n", encoding="utf-8")


def load_trajectory(path) -> Trajectory:
    return trajectory_from_text(Path(path).read_text(encoding="utf-8"))

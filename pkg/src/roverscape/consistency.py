"""3-D consistency and image-quality metrics.

Warp error measures how well a sequence's own per-frame geometry explains
itself.  Each frame supplies camera-frame points sampled on a pixel grid.
The self term reprojects a frame's points into that frame.  The cross term
moves frame k's points into frame i and compares their projections with the
expected locations.  Both are mean squared pixel distances, and the combined
score is the mean of the two averages.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .camera import Intrinsics, Pose, back_project_pixels
from .errors import BehindCamera, NoOverlap, ShapeMismatch, TooSmall
from .geometry import DepthMap

logger = logging.getLogger(__name__)

DEFAULT_GRID_STRIDE = 8


@dataclass(frozen=True, eq=False)
class FrameGeometry:
    points_cam: np.ndarray  # (M, 3) camera-frame points
    grid: np.ndarray  # (M, 2) pixel locations the points were sampled at
    intr: Intrinsics
    pose_world: Pose  # camera -> world
    depth: DepthMap | None = None  # dense depth, used for round-trip cross terms

    def __post_init__(self):
        pts = np.asarray(self.points_cam, dtype=np.float64).reshape(-1, 3)
        grid = np.asarray(self.grid, dtype=np.float64).reshape(-1, 2)
        if pts.shape[0] != grid.shape[0]:
            raise ShapeMismatch(f"{pts.shape[0]} points but {grid.shape[0]} grid locations")
        K = self.intr
        if np.any((grid < 0) | (grid[:, 0] > K.width - 1)[:, None] | (grid[:, 1] > K.height - 1)[:, None]):
            raise ValueError("grid locations must lie inside the image")
        object.__setattr__(self, "points_cam", pts)
        object.__setattr__(self, "grid", grid)

    def __len__(self):
        return self.points_cam.shape[0]

    @classmethod
    def from_depth(cls, depth: DepthMap, intr: Intrinsics, pose_world: Pose,
                   stride: int = DEFAULT_GRID_STRIDE) -> "FrameGeometry":
        """Back-project the valid pixels of a ``stride`` grid."""
        vv, uu = np.mgrid[0:depth.height:stride, 0:depth.width:stride]
        uu, vv = uu.ravel(), vv.ravel()
        ok = depth.valid[vv, uu]
        grid = np.column_stack([uu[ok], vv[ok]]).astype(np.float64)
        pts = back_project_pixels(grid, depth.values[vv[ok], uu[ok]], intr)
        return cls(pts, grid, intr, pose_world, depth)


class ErrorTerm(NamedTuple):
    value: float  # mean squared pixel distance
    used: int  # residuals that entered the mean
    behind: int  # points excluded for lying behind the camera


def relative_pose(g_i: FrameGeometry, g_k: FrameGeometry) -> Pose:
    """M_{i<-k}: frame-k camera coordinates to frame-i camera coordinates."""
    return g_i.pose_world.inverse().compose(g_k.pose_world)


def _project(points, intr: Intrinsics):
    z = points[:, 2]
    front = z > 0
    zs = np.where(front, z, 1.0)
    u = intr.fx * points[:, 0] / zs + intr.cx
    v = intr.fy * points[:, 1] / zs + intr.cy
    return np.column_stack([u, v]), front


def _mean_sq(uv, expected, mask) -> float:
    d = uv[mask] - expected[mask]
    return float(np.mean(d[:, 0] ** 2 + d[:, 1] ** 2))


def self_reprojection_error(g: FrameGeometry) -> ErrorTerm:
    if len(g) == 0:
        raise ValueError("frame has no grid points")
    uv, front = _project(g.points_cam, g.intr)
    behind = int(np.count_nonzero(~front))
    if not np.any(front):
        raise BehindCamera("every point lies behind the camera")
    return ErrorTerm(_mean_sq(uv, g.grid, front), int(front.sum()), behind)


def cross_reprojection_error(g_k: FrameGeometry, M_ik: Pose, intr_i: Intrinsics, expected_in_i) -> ErrorTerm:
    """Project frame k's points into frame i and compare with ``expected_in_i``.

    ``expected_in_i`` has one row per grid point of ``g_k``; rows holding NaN
    (points without a known match in frame i) are skipped.
    """
    exp = np.asarray(expected_in_i, dtype=np.float64).reshape(-1, 2)
    if exp.shape[0] != len(g_k):
        raise ShapeMismatch(f"{exp.shape[0]} expected locations for {len(g_k)} points")
    uv, front = _project(M_ik.apply(g_k.points_cam), intr_i)
    known = np.all(np.isfinite(exp), axis=1)
    behind = int(np.count_nonzero(known & ~front))
    use = known & front
    if not np.any(use):
        raise NoOverlap("no point of frame k has an expected location in frame i")
    return ErrorTerm(_mean_sq(uv, exp, use), int(use.sum()), behind)


def round_trip_error(g_k: FrameGeometry, g_i: FrameGeometry, M_ik: Pose | None = None) -> ErrorTerm:
    """Cross term without correspondences: k -> i, lift with frame i's depth, back to k.

    The discrepancy is measured against frame k's grid.  Points that leave
    frame i or land on invalid depth are skipped.
    """
    if g_i.depth is None:
        raise ValueError("round-trip cross error needs frame i's dense depth")
    M = M_ik if M_ik is not None else relative_pose(g_i, g_k)
    uv_i, front = _project(M.apply(g_k.points_cam), g_i.intr)
    behind = int(np.count_nonzero(~front))
    K = g_i.intr
    inside = front & (uv_i[:, 0] >= 0) & (uv_i[:, 0] <= K.width - 1) & (uv_i[:, 1] >= 0) & (uv_i[:, 1] <= K.height - 1)
    idx = np.flatnonzero(inside)
    d, ok = g_i.depth.sample(uv_i[idx])
    idx = idx[ok]
    if idx.size == 0:
        raise NoOverlap("frames share no valid depth")
    P_i = back_project_pixels(uv_i[idx], d[ok], K)
    uv_k, front_k = _project(M.inverse().apply(P_i), g_k.intr)
    if not np.any(front_k):
        raise NoOverlap("round trip lands behind frame k")
    return ErrorTerm(_mean_sq(uv_k, g_k.grid[idx], front_k), int(front_k.sum()), behind)


@dataclass(frozen=True)
class WarpReport:
    self_errors: tuple[float, ...]
    cross_errors: tuple[tuple[tuple[int, int], float], ...]  # ((k, i), L_cross)
    self_avg: float
    cross_avg: float
    l2d: float
    pairing: str = "consecutive"


def frame_pairs(n: int, policy: str = "consecutive") -> list[tuple[int, int]]:
    """(k, i) pairs: ``consecutive`` gives (j, j+1) and (j+1, j); ``all`` every ordered pair."""
    if policy == "consecutive":
        out = []
        for j in range(n - 1):
            out += [(j, j + 1), (j + 1, j)]
        return out
    if policy == "all":
        return [(k, i) for k in range(n) for i in range(n) if k != i]
    raise ValueError(f"unknown pairing policy {policy!r}")


def warp_error(frames, pairs="consecutive", *, correspondences=None, relative_poses=None) -> WarpReport:
    """Self and cross warp errors of a sequence and their combined score.

    ``pairs`` is a policy name or an explicit list of (k, i).
    ``correspondences`` maps (k, i) to expected frame-i locations of frame k's
    grid points; pairs without an entry use the depth round trip.
    ``relative_poses`` optionally maps (k, i) to M_{i<-k}; otherwise it is
    derived from the frames' world poses.  With no pairs the cross average
    is 0.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("warp error needs at least one frame")
    policy = pairs if isinstance(pairs, str) else "explicit"
    pair_list = frame_pairs(len(frames), pairs) if isinstance(pairs, str) else [tuple(p) for p in pairs]
    corr = correspondences or {}
    rel = relative_poses or {}

    self_errs = tuple(self_reprojection_error(g).value for g in frames)
    cross = []
    for k, i in pair_list:
        M = rel.get((k, i)) or relative_pose(frames[i], frames[k])
        try:
            if (k, i) in corr:
                term = cross_reprojection_error(frames[k], M, frames[i].intr, corr[(k, i)])
            else:
                term = round_trip_error(frames[k], frames[i], M)
        except NoOverlap as exc:
            logger.warning("pair (%d, %d) skipped: %s", k, i, exc)
            continue
        cross.append(((k, i), term.value))

    self_avg = float(np.mean(self_errs))
    cross_avg = float(np.mean([v for _, v in cross])) if cross else 0.0
    return WarpReport(self_errs, tuple(cross), self_avg, cross_avg, 0.5 * (self_avg + cross_avg), policy)


# ---------------------------------------------------------------------------
# image metrics


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` for identical inputs."""
    a, b = _pair(a, b)
    # exactly rounded sum keeps round MSE values exact, e.g. 0.01 -> 20 dB
    sq = ((a - b) ** 2).ravel()
    mse = math.fsum(sq) / sq.size if sq.size else math.nan
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def _filter_valid(x, w):
    """Separable correlation over the first two axes, cropped to the valid region."""
    h = w.size // 2
    y = ndimage.correlate1d(x, w, axis=0, mode="constant")
    y = ndimage.correlate1d(y, w, axis=1, mode="constant")
    return y[h:x.shape[0] - h, h:x.shape[1] - h]


def ssim(a, b, *, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: float = 1.0) -> float:
    """Gaussian-windowed structural similarity, averaged over valid pixels and channels."""
    a, b = _pair(a, b)
    if min(a.shape[0], a.shape[1]) < window:
        raise TooSmall(f"images must be at least {window}x{window}")
    w = _gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a * mu_a
    var_b = _filter_valid(b * b, w) - mu_b * mu_b
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def d_ssim(a, b, **kw) -> float:
    return (1.0 - ssim(a, b, **kw)) / 2.0


def photometric_loss(a, b, lam: float = 0.2, **kw) -> float:
    """(1 - lam) * mean |a - b| + lam * D-SSIM."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must be in [0, 1]")
    a, b = _pair(a, b)
    return (1.0 - lam) * float(np.mean(np.abs(a - b))) + lam * d_ssim(a, b, **kw)


class DepthL1(NamedTuple):
    value: float
    count: int


def depth_l1(d_render: DepthMap, d_ref: DepthMap) -> DepthL1:
    """Mean absolute depth difference over the jointly valid pixels."""
    if d_render.values.shape != d_ref.values.shape:
        raise ShapeMismatch(f"depth shapes differ: {d_render.values.shape} vs {d_ref.values.shape}")
    both = d_render.valid & d_ref.valid
    n = int(both.sum())
    if n == 0:
        raise NoOverlap("depth maps share no valid pixel")
    return DepthL1(float(np.mean(np.abs(d_render.values[both] - d_ref.values[both]))), n)

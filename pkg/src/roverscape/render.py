"""Deterministic point-splat rendering and bilateral-grid colour harmonization.

Points are drawn as depth-tested discs.  Each pixel keeps the fragment with
the smallest camera depth; exact depth ties are broken by point content
(world position, then colour) and only then by point index, so the image does
not depend on the order of the cloud.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from . import formats
from .camera import Intrinsics, Pose, back_project_pixels, intrinsics_to_text
from .errors import EmptyCloud, ShapeMismatch, SingularSystem
from .geometry import DepthMap, PointCloud
from .trajectory import Trajectory, describe_motion

logger = logging.getLogger(__name__)

MAX_SPLAT_RADIUS = 16.0


@dataclass(frozen=True, eq=False)
class Frame:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: DepthMap
    coverage: np.ndarray  # (H, W) bool
    pose: Pose  # world -> camera
    index: int = 0

    @property
    def coverage_fraction(self) -> float:
        return float(self.coverage.mean())


def _fragments(cloud: PointCloud, pose: Pose, intr: Intrinsics, splat_radius):
    """All (pixel, depth, point) fragments of the visible points."""
    Q = pose.apply(cloud.positions)
    z = Q[:, 2]
    front = np.flatnonzero(z > 1e-9)
    Q, z = Q[front], z[front]
    u = intr.fx * Q[:, 0] / z + intr.cx
    v = intr.fy * Q[:, 1] / z + intr.cy
    if splat_radius is not None:
        r = np.full(z.shape, float(splat_radius))
    elif cloud.scales is not None:
        r = 0.5 * np.maximum(1.0, cloud.scales[front] * intr.f_avg / z)
    else:
        r = np.full(z.shape, 0.5)
    r = np.minimum(r, MAX_SPLAT_RADIUS)
    # drop points whose disc cannot touch the image
    near = (u + r >= -0.5) & (u - r <= intr.width - 0.5) & (v + r >= -0.5) & (v - r <= intr.height - 0.5)
    keep = np.flatnonzero(near)
    front, u, v, z, r = front[keep], u[keep], v[keep], z[keep], r[keep]

    pix, dep, idx = [], [], []
    # group points by window size so each group is one vectorized pass
    win = np.ceil(2.0 * r).astype(np.int64) + 1
    for k in np.unique(win):
        sel = np.flatnonzero(win == k)
        if sel.size == 0:
            continue
        us, vs, rs = u[sel], v[sel], r[sel]
        x0 = np.floor(us - rs).astype(np.int64)
        y0 = np.floor(vs - rs).astype(np.int64)
        nu = np.rint(us).astype(np.int64)
        nv = np.rint(vs).astype(np.int64)
        off = np.arange(k + 1)
        px = x0[:, None] + off
        py = y0[:, None] + off
        dx2 = (px - us[:, None]) ** 2
        dy2 = (py - vs[:, None]) ** 2
        inside = dy2[:, :, None] + dx2[:, None, :] <= (rs ** 2)[:, None, None]
        inside |= (py == nv[:, None])[:, :, None] & (px == nu[:, None])[:, None, :]
        inside &= ((py >= 0) & (py < intr.height))[:, :, None] & ((px >= 0) & (px < intr.width))[:, None, :]
        pi, yi, xi = np.nonzero(inside)
        pix.append((y0[pi] + yi) * intr.width + x0[pi] + xi)
        dep.append(z[sel][pi])
        idx.append(front[sel][pi])
    if not pix:
        return np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64)
    return np.concatenate(pix), np.concatenate(dep), np.concatenate(idx)


def _resolve(pix, dep, idx, cloud: PointCloud):
    """Winning fragment per pixel: sort by pixel, depth, content, then index."""
    order = np.lexsort((dep, pix))
    pix_s, dep_s = pix[order], dep[order]
    first = np.ones(pix_s.size, dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win = order[first]
    # exact depth ties at the front of a pixel need the full key
    tied = first[:-1] & ~first[1:] & (dep_s[1:] == dep_s[:-1])
    if np.any(tied):
        tied_pix = pix_s[:-1][tied]
        sub = np.flatnonzero(np.isin(pix, tied_pix))
        P = cloud.positions[idx[sub]]
        C = cloud.colors[idx[sub]]
        o = sub[np.lexsort((idx[sub], C[:, 2], C[:, 1], C[:, 0], P[:, 2], P[:, 1], P[:, 0], dep[sub], pix[sub]))]
        f = np.ones(o.size, dtype=bool)
        f[1:] = pix[o][1:] != pix[o][:-1]
        fixed = o[f]
        pos = np.searchsorted(pix[win], pix[fixed])
        win[pos] = fixed
    return pix[win], dep[win], idx[win]


def render_view(cloud: PointCloud, pose: Pose, intr: Intrinsics, splat_radius: float | None = None,
                *, workers: int = 1, background=(0, 0, 0), index: int = 0) -> Frame:
    """Z-buffer splat render of ``cloud`` from a world->camera ``pose``.

    ``splat_radius`` fixes the disc radius in pixels (0 draws only the nearest
    pixel).  When it is None, each point's footprint diameter is
    ``max(1, scale * f / z)`` from the cloud's Gaussian scales, or 1 px when
    the cloud has none.  ``workers`` splits the z-buffer into row bands; the
    result does not depend on it.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot render an empty point cloud")
    H, W = intr.height, intr.width
    pix, dep, idx = _fragments(cloud, pose, intr, splat_radius)
    bands = max(1, min(int(workers), H))
    if bands == 1:
        wp, wd, wi = _resolve(pix, dep, idx, cloud)
    else:
        rows = pix // W
        edges = np.linspace(0, H, bands + 1).astype(np.int64)
        parts = [np.flatnonzero((rows >= a) & (rows < b)) for a, b in zip(edges[:-1], edges[1:])]
        with ThreadPoolExecutor(max_workers=bands) as pool:
            res = list(pool.map(lambda s: _resolve(pix[s], dep[s], idx[s], cloud), parts))
        wp = np.concatenate([r[0] for r in res])
        wd = np.concatenate([r[1] for r in res])
        wi = np.concatenate([r[2] for r in res])
    rgb = np.empty((H * W, 3), dtype=np.uint8)
    rgb[:] = np.asarray(background, dtype=np.uint8)
    depth = np.zeros(H * W)
    cov = np.zeros(H * W, dtype=bool)
    rgb[wp] = cloud.colors[wi]
    depth[wp] = wd
    cov[wp] = True
    cov = cov.reshape(H, W)
    return Frame(rgb.reshape(H, W, 3), DepthMap(depth.reshape(H, W), cov), cov, pose, index)


def render_sequence(cloud: PointCloud, traj: Trajectory, intr: Intrinsics, splat_radius: float | None = None,
                    *, workers: int = 1) -> list[Frame]:
    """One frame per trajectory pose (trajectory poses are camera->world)."""
    poses = traj.world_to_camera()

    def one(i):
        return render_view(cloud, poses[i], intr, splat_radius, index=i)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(one, range(len(poses))))


def normal_from_depth(depth: DepthMap, intr: Intrinsics) -> np.ndarray:
    """Camera-frame unit normals from central-difference tangents.

    Normals face the camera.  Pixels lacking a valid 4-neighbourhood get the
    zero vector.
    """
    H, W = depth.height, depth.width
    vv, uu = np.mgrid[0:H, 0:W]
    uv = np.column_stack([uu.ravel(), vv.ravel()]).astype(np.float64)
    P = back_project_pixels(uv, depth.values.ravel(), intr).reshape(H, W, 3)
    out = np.zeros((H, W, 3))
    if H < 3 or W < 3:
        return out
    ok = depth.valid[1:-1, 1:-1] & depth.valid[1:-1, :-2] & depth.valid[1:-1, 2:] \
        & depth.valid[:-2, 1:-1] & depth.valid[2:, 1:-1]
    tx = P[1:-1, 2:] - P[1:-1, :-2]
    ty = P[2:, 1:-1] - P[:-2, 1:-1]
    n = np.cross(tx, ty)
    norm = np.linalg.norm(n, axis=-1)
    ok &= norm > 0
    n = n / np.where(ok, norm, 1.0)[..., None]
    facing = np.sum(n * P[1:-1, 1:-1], axis=-1)
    n = np.where((facing > 0)[..., None], -n, n)
    out[1:-1, 1:-1] = np.where(ok[..., None], n, 0.0)
    return out


# ---------------------------------------------------------------------------
# sequence emission


def write_sequence(out_dir, frames, traj: Trajectory, intr: Intrinsics, caption: str | None = None) -> Path:
    """Write ``frames/``, ``depth/``, ``normals/``, ``poses.txt``, ``caption.txt``
    and ``intrinsics.txt`` under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("frames", "depth", "normals"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(frames):
        formats.write_png(out / "frames" / f"{i:05d}.png", fr.rgb)
        formats.write_pfm(out / "depth" / f"{i:05d}.pfm", fr.depth.values)
        formats.write_pfm(out / "normals" / f"{i:05d}.pfm", normal_from_depth(fr.depth, intr))
    formats.write_poses(out / "poses.txt", traj.poses)
    text = describe_motion(traj) if caption is None else caption
    (out / "caption.txt").write_text(text + "\n", encoding="utf-8")
    (out / "intrinsics.txt").write_text(intrinsics_to_text(intr), encoding="utf-8")
    return out


# ---------------------------------------------------------------------------
# bilateral grid


def _as_float(image) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _guide(rgb: np.ndarray) -> np.ndarray:
    lum = rgb[..., 0] * 0.299 + rgb[..., 1] * 0.587 + rgb[..., 2] * 0.114
    return np.clip(lum, 0.0, 1.0)


def _grid_coords(shape, lum, dims):
    H, W = shape
    Wg, Hg, Dg = dims
    vv, uu = np.mgrid[0:H, 0:W]
    gx = uu / max(W - 1, 1) * (Wg - 1)
    gy = vv / max(H - 1, 1) * (Hg - 1)
    gz = lum * (Dg - 1)
    return gx, gy, gz


def _split(g, n):
    """Lower cell index and fraction, with the top edge folded into the last cell."""
    i0 = np.clip(np.floor(g).astype(np.int64), 0, max(n - 2, 0))
    f = g - i0 if n > 1 else np.zeros_like(g)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, f


@dataclass(frozen=True, eq=False)
class BilateralGrid:
    """Per-cell 3x4 affine colour transforms on a (Wg, Hg, Dg) grid."""

    coeffs: np.ndarray  # (Wg, Hg, Dg, 3, 4)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.float64)
        if c.ndim != 5 or c.shape[3:] != (3, 4):
            raise ShapeMismatch(f"grid coefficients must be (Wg, Hg, Dg, 3, 4), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("grid coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.coeffs.shape[:3])

    @classmethod
    def identity(cls, dims=(16, 16, 8)) -> "BilateralGrid":
        c = np.zeros(tuple(dims) + (3, 4))
        c[..., :, :3] = np.eye(3)
        return cls(c)

    @classmethod
    def constant(cls, affine, dims=(16, 16, 8)) -> "BilateralGrid":
        A = np.asarray(affine, dtype=np.float64).reshape(3, 4)
        return cls(np.broadcast_to(A, tuple(dims) + (3, 4)).copy())

    def slice(self, image) -> np.ndarray:
        """Trilinearly interpolated (H, W, 3, 4) affine per pixel, guided by luminance."""
        rgb = _as_float(image)
        gx, gy, gz = _grid_coords(rgb.shape[:2], _guide(rgb), self.dims)
        Wg, Hg, Dg = self.dims
        x0, x1, fx = _split(gx, Wg)
        y0, y1, fy = _split(gy, Hg)
        z0, z1, fz = _split(gz, Dg)
        c = self.coeffs

        def lerp(a, b, t):
            return a + (b - a) * t[..., None, None]

        def along_z(xi, yi):
            return lerp(c[xi, yi, z0], c[xi, yi, z1], fz)

        c00 = along_z(x0, y0)
        c10 = along_z(x1, y0)
        c01 = along_z(x0, y1)
        c11 = along_z(x1, y1)
        return lerp(lerp(c00, c10, fx), lerp(c01, c11, fx), fy)


def apply_bilateral_grid(grid: BilateralGrid, image) -> np.ndarray:
    """Apply the sliced affine to [r, g, b, 1]; float output, unclipped.

    uint8 inputs are taken as [0, 1] values.
    """
    rgb = _as_float(image)
    A = grid.slice(rgb)
    r, g, b = rgb[..., 0:1], rgb[..., 1:2], rgb[..., 2:3]
    return A[..., 0] * r + A[..., 1] * g + A[..., 2] * b + A[..., 3]


def _tv_operator(dims) -> sparse.csr_matrix:
    """Forward differences between neighbouring cells along each grid axis."""
    Wg, Hg, Dg = dims
    mats = []
    for axis, n in enumerate(dims):
        if n < 2:
            continue
        d = sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n))
        eyes = [sparse.identity(m) for m in dims]
        eyes[axis] = d
        mats.append(sparse.kron(sparse.kron(eyes[0], eyes[1]), eyes[2]))
    if not mats:
        return sparse.csr_matrix((0, Wg * Hg * Dg))
    return sparse.vstack(mats).tocsr()


def fit_bilateral_grid(source, target, grid_dims=(16, 16, 8), tv_weight: float = 1e-3, *,
                       ridge: float = 1e-9, mask=None) -> BilateralGrid:
    """Least-squares grid mapping ``source`` colours onto ``target``.

    Minimizes the per-pixel squared colour error of the sliced affines plus
    ``tv_weight`` times the squared differences between neighbouring cells,
    plus a small ``ridge`` pull toward the identity that pins cells no pixel
    reaches.  ``mask`` excludes pixels (for example clipped ones).  The three
    output channels share one normal matrix.
    """
    src = _as_float(source)
    tgt = _as_float(target)
    if src.shape != tgt.shape or src.ndim != 3 or src.shape[2] != 3:
        raise ShapeMismatch(f"source {src.shape} and target {tgt.shape} must be equal (H, W, 3)")
    dims = tuple(int(d) for d in grid_dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ValueError("grid_dims must be three positive integers")
    if tv_weight < 0 or ridge < 0:
        raise ValueError("tv_weight and ridge must be non-negative")
    Wg, Hg, Dg = dims
    ncell = Wg * Hg * Dg
    H, W = src.shape[:2]
    keep = np.ones((H, W), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)

    gx, gy, gz = _grid_coords((H, W), _guide(src), dims)
    x0, x1, fx = _split(gx[keep], Wg)
    y0, y1, fy = _split(gy[keep], Hg)
    z0, z1, fz = _split(gz[keep], Dg)
    feats = np.concatenate([src[keep], np.ones((int(keep.sum()), 1))], axis=1)
    npx = feats.shape[0]

    rows, cols, vals = [], [], []
    pix = np.arange(npx)
    for xi, wx in ((x0, 1 - fx), (x1, fx)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for zi, wz in ((z0, 1 - fz), (z1, fz)):
                cell = (xi * Hg + yi) * Dg + zi
                w = wx * wy * wz
                for j in range(4):
                    rows.append(pix)
                    cols.append(cell * 4 + j)
                    vals.append(w * feats[:, j])
    A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(npx, ncell * 4))
    L = sparse.kron(_tv_operator(dims), sparse.identity(4)).tocsr()
    lhs = (A.T @ A + tv_weight * (L.T @ L) + ridge * sparse.identity(ncell * 4)).tocsc()

    ident = np.zeros((3, 4))
    ident[:, :3] = np.eye(3)
    rhs = np.empty((ncell * 4, 3))
    for ch in range(3):
        rhs[:, ch] = A.T @ tgt[keep][:, ch] + ridge * np.tile(ident[ch], ncell)
    try:
        sol = splinalg.splu(lhs).solve(rhs)
    except RuntimeError as exc:
        raise SingularSystem(f"bilateral grid system is singular ({exc}); raise ridge or tv_weight") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularSystem("bilateral grid solution is not finite; raise ridge or tv_weight")
    coeffs = sol.reshape(Wg, Hg, Dg, 4, 3).transpose(0, 1, 2, 4, 3)
    return BilateralGrid(coeffs)

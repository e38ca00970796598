"""Procedural terrain and ray-cast stereo captures with exact ground truth.

World frame: x east, y north, z up (metres).  The terrain surface is the
bilinear interpolant of a square heightfield grid centred on the origin;
albedo is a procedural hash-noise texture evaluated at the hit point, so
images never depend on a texture resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .camera import Intrinsics, Pose, project_points, rotvec_to_matrix
from .errors import BadSpec, NoVisibleTerrain
from .geometry import DepthMap

SUN = np.array([-0.45, 0.35, 0.82]) / np.linalg.norm([-0.45, 0.35, 0.82])
SKY = np.array([0.78, 0.66, 0.56])
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True, eq=False)
class Terrain:
    heights: np.ndarray  # (n, n); row index runs along +y, column along +x
    extent: float
    seed: int
    amplitude: float
    octaves: int

    @property
    def cell(self) -> float:
        return self.extent / (self.heights.shape[0] - 1)

    def height_at(self, x, y) -> np.ndarray:
        h, _, _ = self._bilinear(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        return h

    def normal_at(self, x, y) -> np.ndarray:
        _, gx, gy = self._bilinear(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
        n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def inside(self, x, y) -> np.ndarray:
        half = 0.5 * self.extent
        return (np.abs(x) <= half) & (np.abs(y) <= half)

    def _bilinear(self, x, y):
        n = self.heights.shape[0]
        half = 0.5 * self.extent
        gx = np.clip((x + half) / self.cell, 0.0, n - 1.0)
        gy = np.clip((y + half) / self.cell, 0.0, n - 1.0)
        j0 = np.minimum(np.floor(gx).astype(int), n - 2)
        i0 = np.minimum(np.floor(gy).astype(int), n - 2)
        fx, fy = gx - j0, gy - i0
        H = self.heights
        h00, h01 = H[i0, j0], H[i0, j0 + 1]
        h10, h11 = H[i0 + 1, j0], H[i0 + 1, j0 + 1]
        top = h00 + fx * (h01 - h00)
        bot = h10 + fx * (h11 - h10)
        h = top + fy * (bot - top)
        dx = ((h01 - h00) * (1 - fy) + (h11 - h10) * fy) / self.cell
        dy = (bot - top) / self.cell
        return h, dx, dy

    def albedo_at(self, x, y) -> np.ndarray:
        """Procedural reddish regolith colour in [0, 1]."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        s = self.seed
        low = value_noise(x * 0.15, y * 0.15, s + 11)
        mid = value_noise(x * 1.3, y * 1.3, s + 12)
        rocks = value_noise(x * 3.1, y * 3.1, s + 13)
        grain = value_noise(x * 45.0, y * 45.0, s + 14) + 0.5 * value_noise(x * 90.0, y * 90.0, s + 15)
        light = np.array([0.80, 0.52, 0.34])
        dark = np.array([0.42, 0.27, 0.19])
        mix = np.clip(0.35 * low + 0.35 * mid + 0.3 * (rocks > 0.72), 0.0, 1.0)
        col = dark + mix[..., None] * (light - dark)
        col = col * (0.86 + 0.19 * grain[..., None])
        return np.clip(col, 0.0, 1.0)


def _hash01(ix, iy, seed):
    """Deterministic per-lattice-point uniform values in [0, 1)."""
    with np.errstate(over="ignore"):
        h = ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
        h ^= iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
        h ^= np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x165667B19E3779F9)
        h ^= h >> np.uint64(31)
        h = (h * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        h ^= h >> np.uint64(29)
        h = (h * np.uint64(0x94D049BB133111EB)) & _MASK64
        h ^= h >> np.uint64(32)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(x, y, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1] at continuous (x, y)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    sx = fx * fx * (3 - 2 * fx)
    sy = fy * fy * (3 - 2 * fy)
    ix = x0.astype(np.int64)
    iy = y0.astype(np.int64)
    v00 = _hash01(ix, iy, seed)
    v10 = _hash01(ix + 1, iy, seed)
    v01 = _hash01(ix, iy + 1, seed)
    v11 = _hash01(ix + 1, iy + 1, seed)
    top = v00 + sx * (v10 - v00)
    bot = v01 + sx * (v11 - v01)
    return top + sy * (bot - top)


def generate_terrain(seed: int, extent: float = 40.0, amplitude: float = 0.6, octaves: int = 5,
                     resolution: int = 401) -> Terrain:
    """Multi-octave value-noise heightfield; deterministic in (seed, params)."""
    if extent <= 0 or amplitude < 0 or octaves < 1 or resolution < 2:
        raise ValueError("terrain parameters must be positive")
    coords = np.linspace(-0.5 * extent, 0.5 * extent, resolution)
    X, Y = np.meshgrid(coords, coords)
    h = np.zeros_like(X)
    if amplitude > 0:
        total = 0.0
        freq, amp = 0.08, 1.0
        for o in range(octaves):
            h += amp * (2.0 * value_noise(X * freq, Y * freq, seed * 1000 + o) - 1.0)
            total += amp
            freq *= 2.0
            amp *= 0.5
        h *= amplitude / total
    h.setflags(write=False)
    return Terrain(h, float(extent), int(seed), float(amplitude), int(octaves))


# ---------------------------------------------------------------------------
# ray casting


def cast_rays(terrain: Terrain, origins, directions, t_min: float = 1e-9, t_max: float = np.inf,
              chunk: int = 16384) -> np.ndarray:
    """First intersection parameter t of ``o + t d`` with the terrain (NaN on miss).

    Marches at half-cell horizontal steps inside the slab between the lowest and
    highest terrain heights, then bisects the first sign change to machine
    precision.
    """
    O = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(directions)).reshape(-1, 3)
    D = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    out = np.full(D.shape[0], np.nan)
    for s in range(0, D.shape[0], chunk):
        out[s:s + chunk] = _cast_chunk(terrain, O[s:s + chunk], D[s:s + chunk], t_min, t_max)
    return out


def _cast_chunk(terrain, O, D, t_min, t_max):
    hmin = float(terrain.heights.min()) - 1e-9
    hmax = float(terrain.heights.max()) + 1e-9
    n = O.shape[0]
    t0 = np.full(n, t_min)
    t1 = np.full(n, t_max)
    dz = D[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ta = (hmax - O[:, 2]) / dz
        tb = (hmin - O[:, 2]) / dz
    lo = np.where(dz != 0, np.minimum(ta, tb), np.where((O[:, 2] >= hmin) & (O[:, 2] <= hmax), -np.inf, np.inf))
    hi = np.where(dz != 0, np.maximum(ta, tb), np.where((O[:, 2] >= hmin) & (O[:, 2] <= hmax), np.inf, -np.inf))
    t0 = np.maximum(t0, lo)
    t1 = np.minimum(t1, hi)
    # clip to the terrain's horizontal extent
    half = 0.5 * terrain.extent
    for k in (0, 1):
        with np.errstate(divide="ignore", invalid="ignore"):
            ea = (-half - O[:, k]) / D[:, k]
            eb = (half - O[:, k]) / D[:, k]
        inside_k = np.abs(O[:, k]) <= half
        lo_k = np.where(D[:, k] != 0, np.minimum(ea, eb), np.where(inside_k, -np.inf, np.inf))
        hi_k = np.where(D[:, k] != 0, np.maximum(ea, eb), np.where(inside_k, np.inf, -np.inf))
        t0 = np.maximum(t0, lo_k)
        t1 = np.minimum(t1, hi_k)
    result = np.full(n, np.nan)
    live = np.flatnonzero(np.isfinite(t0) & np.isfinite(t1) & (t1 > t0))
    if live.size == 0:
        return result
    O, D, t0, t1 = O[live], D[live], t0[live], t1[live]
    horiz = np.hypot(D[:, 0], D[:, 1]) * (t1 - t0)
    # a bilinear patch is crossed at most twice per cell, so half-cell steps suffice
    S = int(min(max(np.ceil(horiz.max() / (0.5 * terrain.cell)), 2), 4000))
    frac = np.linspace(0.0, 1.0, S + 1)
    T = t0[:, None] + (t1 - t0)[:, None] * frac[None, :]
    P = O[:, None, :] + T[..., None] * D[:, None, :]
    F = P[..., 2] - terrain.height_at(P[..., 0], P[..., 1])
    below = F <= 0
    has = below.any(axis=1)
    first = np.argmax(below, axis=1)
    idx = np.flatnonzero(has)
    if idx.size == 0:
        return result
    k = first[idx]
    hit_at_start = k == 0
    a = np.where(hit_at_start, T[idx, 0], T[idx, np.maximum(k - 1, 0)])
    b = T[idx, k]
    Oi, Di = O[idx], D[idx]
    # 40 halvings of a half-cell bracket leave < 1e-13 m
    for _ in range(40):
        m = 0.5 * (a + b)
        pm = Oi + m[:, None] * Di
        fm = pm[:, 2] - terrain.height_at(pm[:, 0], pm[:, 1])
        a = np.where(fm > 0, m, a)
        b = np.where(fm > 0, b, m)
    t = np.where(hit_at_start, T[idx, 0], b)
    result[live[idx]] = t
    return result


def rover_pose(terrain: Terrain, x: float = 0.0, y: float = -6.0, height: float = 1.6,
               pitch_deg: float = 40.0, yaw_deg: float = 0.0) -> Pose:
    """World->camera pose of a mast camera ``height`` above the ground, looking north and down."""
    ground = float(terrain.height_at(x, y))
    c = np.array([x, y, ground + height])
    p, yw = math.radians(pitch_deg), math.radians(yaw_deg)
    fwd = np.array([math.sin(yw) * math.cos(p), math.cos(yw) * math.cos(p), -math.sin(p)])
    right = np.array([math.cos(yw), -math.sin(yw), 0.0])
    down = np.cross(fwd, right)
    R_cw = np.column_stack([right, down, fwd])
    return Pose(R_cw.T, -R_cw.T @ c)


def default_intrinsics(width: int = 256, height: int = 256, hfov_deg: float = 60.0) -> Intrinsics:
    f = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
    return Intrinsics(fx=f, fy=f, cx=(width - 1) / 2, cy=(height - 1) / 2, width=width, height=height)


@dataclass(eq=False)
class RenderedView:
    image: np.ndarray  # (H, W, 3) uint8
    depth: DepthMap
    pose: Pose  # world -> camera
    intr: Intrinsics


def render_oracle_view(terrain: Terrain, intr: Intrinsics, pose: Pose) -> RenderedView:
    """Ray-cast one pinhole view: exact camera-frame depth and Lambert-shaded colour."""
    vv, uu = np.mgrid[0:intr.height, 0:intr.width]
    dcam = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones(uu.shape)], axis=-1).reshape(-1, 3)
    R_cw = pose.rotation.T
    D = dcam @ R_cw.T
    c = pose.center
    t = cast_rays(terrain, c, D)
    hit = np.isfinite(t)
    if not np.any(hit):
        raise NoVisibleTerrain("no camera ray reaches the terrain")
    P = c + np.where(hit, t, 0.0)[:, None] * D
    col = np.tile(SKY, (t.size, 1))
    alb = terrain.albedo_at(P[hit, 0], P[hit, 1])
    nrm = terrain.normal_at(P[hit, 0], P[hit, 1])
    shade = 0.32 + 0.68 * np.clip(nrm @ SUN, 0.0, None)
    col[hit] = alb * shade[:, None]
    img = np.clip(np.rint(col * 255.0), 0, 255).astype(np.uint8).reshape(intr.height, intr.width, 3)
    depth = np.where(hit, t, 0.0).reshape(intr.height, intr.width)
    return RenderedView(img, DepthMap(depth, hit.reshape(intr.height, intr.width)), pose, intr)


def visible_from(terrain: Terrain, center, points, rel_tol: float = 1e-6) -> np.ndarray:
    """True where the segment from ``center`` to each surface point is unobstructed."""
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    D = P - np.asarray(center, dtype=np.float64)
    t = cast_rays(terrain, center, D, t_max=1.0 - 1e-5)
    return ~np.isfinite(t) | (t >= 1.0 - rel_tol)


# ---------------------------------------------------------------------------
# stereo captures


@dataclass(eq=False)
class StereoCapture:
    left: RenderedView
    right: RenderedView
    uv1: np.ndarray  # integer left pixels (N, 2)
    uv2: np.ndarray  # exact right projections (N, 2)
    baseline: float
    terrain: Terrain | None = None
    records: list = field(default_factory=list)

    @property
    def intr(self) -> Intrinsics:
        return self.left.intr

    @property
    def relative_pose(self) -> Pose:
        """View-1 camera frame -> view-2 camera frame."""
        return self.right.pose.compose(self.left.pose.inverse())

    def points1(self) -> np.ndarray:
        """Left-camera 3-D points of the correspondences, from the left GT depth."""
        u = self.uv1[:, 0].astype(int)
        v = self.uv1[:, 1].astype(int)
        d = self.left.depth.values[v, u]
        K = self.intr
        return np.column_stack([(self.uv1[:, 0] - K.cx) / K.fx * d, (self.uv1[:, 1] - K.cy) / K.fy * d, d])


def stereo_right_pose(left: Pose, baseline: float, toe_in_deg: float = 0.0) -> Pose:
    """Right camera ``baseline`` metres along the left camera's x axis, yawed inward."""
    rel = Pose(rotvec_to_matrix([0.0, math.radians(toe_in_deg), 0.0]), np.zeros(3))
    shift = Pose(np.eye(3), [-baseline, 0.0, 0.0])
    return rel.compose(shift).compose(left)


def project_grid(terrain: Terrain, a: RenderedView, b: RenderedView, grid_uv) -> np.ndarray:
    """Exact locations in ``b`` of the surface seen at integer pixels ``grid_uv`` of ``a``.

    Rows are NaN where the pixel has no depth in ``a`` or the surface point is
    outside ``b``'s image or hidden from it.
    """
    g = np.asarray(grid_uv, dtype=np.float64).reshape(-1, 2)
    uu = g[:, 0].astype(int)
    vv = g[:, 1].astype(int)
    out = np.full(g.shape, np.nan)
    ok = np.flatnonzero(a.depth.valid[vv, uu])
    K = a.intr
    d = a.depth.values[vv[ok], uu[ok]]
    cam = np.column_stack([(g[ok, 0] - K.cx) / K.fx * d, (g[ok, 1] - K.cy) / K.fy * d, d])
    world = a.pose.inverse().apply(cam)
    qb = b.pose.apply(world)
    uvb = project_points(qb, b.intr)
    Kb = b.intr
    with np.errstate(invalid="ignore"):
        keep = (qb[:, 2] > 0) & (uvb[:, 0] >= 0) & (uvb[:, 0] <= Kb.width - 1) \
            & (uvb[:, 1] >= 0) & (uvb[:, 1] <= Kb.height - 1)
    idx = np.flatnonzero(keep)
    vis = visible_from(terrain, b.pose.center, world[idx])
    idx = idx[vis]
    out[ok[idx]] = uvb[idx]
    return out


def correspondences(terrain: Terrain, a: RenderedView, b: RenderedView, stride: int = 4):
    """Exact co-visible matches from a grid of integer pixels in ``a`` to ``b``."""
    K = a.intr
    vv, uu = np.mgrid[0:K.height:stride, 0:K.width:stride]
    grid = np.column_stack([uu.ravel(), vv.ravel()]).astype(np.float64)
    uvb = project_grid(terrain, a, b, grid)
    found = np.all(np.isfinite(uvb), axis=1)
    return grid[found], uvb[found]


def simulate_stereo_capture(terrain: Terrain, intr: Intrinsics, pose: Pose, baseline: float = 0.2,
                            toe_in_deg: float = 0.0, corr_stride: int = 4) -> StereoCapture:
    left = render_oracle_view(terrain, intr, pose)
    right = render_oracle_view(terrain, intr, stereo_right_pose(pose, baseline, toe_in_deg))
    uv1, uv2 = correspondences(terrain, left, right, corr_stride)
    if uv1.shape[0] == 0:
        raise NoVisibleTerrain("stereo views share no visible terrain")
    return StereoCapture(left, right, uv1, uv2, float(baseline), terrain)


def oracle_scene(seed: int, size: int = 256, baseline: float = 0.2, toe_in_deg: float = 5.0,
                 amplitude: float = 0.6, corr_stride: int = 4) -> StereoCapture:
    """Seeded stereo capture with a mild per-seed jitter of the mast pose."""
    rng = np.random.default_rng(seed)
    terrain = generate_terrain(seed, amplitude=amplitude)
    pose = rover_pose(terrain, x=float(rng.uniform(-2, 2)), y=float(rng.uniform(-8, -4)),
                      height=float(rng.uniform(1.4, 1.9)), pitch_deg=float(rng.uniform(36, 48)),
                      yaw_deg=float(rng.uniform(-20, 20)))
    return simulate_stereo_capture(terrain, default_intrinsics(size, size), pose, baseline, toe_in_deg, corr_stride)


def render_oracle_sequence(terrain: Terrain, intr: Intrinsics, poses_world_to_cam) -> list[RenderedView]:
    return [render_oracle_view(terrain, intr, p) for p in poses_world_to_cam]


# ---------------------------------------------------------------------------
# perturbations


def _gray(img):
    lum = img[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    g = np.clip(np.rint(lum), 0, 255).astype(np.uint8)
    return np.repeat(g[..., None], 3, axis=2)


def perturb(artifact, spec: dict, seed: int = 0):
    """Apply a recorded perturbation to an image or a :class:`StereoCapture`.

    Image kinds: ``blur`` (sigma), ``grayscale``, ``duplicate`` (brightness
    offset, gain), ``thumbnail`` (size), ``occlude`` (fraction, color),
    ``constant`` (color).  Capture kinds: ``depth_affine`` (s, b) applied to
    the right depth so that aligning the left depth recovers (s, b),
    ``pose_noise`` (rot_sigma, trans_sigma) applied to the right pose, and
    ``outliers`` (fraction, min_offset) replacing right-view matches.
    Returns ``(perturbed, record)``.
    """
    kind = spec.get("kind")
    rng = np.random.default_rng(seed)
    record = {"kind": kind, "seed": int(seed), **{k: v for k, v in spec.items() if k != "kind"}}
    if isinstance(artifact, StereoCapture):
        return _perturb_capture(artifact, kind, spec, rng, record)
    img = np.asarray(artifact)
    if img.ndim != 3 or img.shape[2] != 3:
        raise BadSpec("image perturbations need an (H, W, 3) array")
    if kind == "blur":
        sigma = float(spec.get("sigma", 3.0))
        if sigma <= 0:
            raise BadSpec("blur sigma must be positive")
        out = np.stack([ndimage.gaussian_filter(img[..., c].astype(np.float64), sigma, mode="reflect")
                        for c in range(3)], axis=-1)
        return np.clip(np.rint(out), 0, 255).astype(np.uint8), record
    if kind == "grayscale":
        return _gray(img), record
    if kind == "duplicate":
        off = float(spec.get("offset", 10.0))
        gain = float(spec.get("gain", 1.0))
        out = np.clip(np.rint(img.astype(np.float64) * gain + off), 0, 255).astype(np.uint8)
        return out, record
    if kind == "thumbnail":
        size = int(spec.get("size", 32))
        if size < 1:
            raise BadSpec("thumbnail size must be >= 1")
        from PIL import Image

        out = np.asarray(Image.fromarray(img).resize((size, size), Image.BILINEAR))
        return out.copy(), record
    if kind == "occlude":
        frac = float(spec.get("fraction", 0.7))
        color = np.asarray(spec.get("color", (96, 96, 104)), dtype=np.uint8)
        if not 0 < frac <= 1:
            raise BadSpec("occlusion fraction must be in (0, 1]")
        out = img.copy()
        rows = int(round(frac * img.shape[0]))
        out[img.shape[0] - rows:] = color
        record["rows"] = rows
        return out, record
    if kind == "constant":
        color = np.asarray(spec.get("color", (150, 100, 70)), dtype=np.uint8)
        return np.broadcast_to(color, img.shape).copy(), record
    raise BadSpec(f"unknown image perturbation {kind!r}")


def _perturb_capture(cap: StereoCapture, kind, spec, rng, record):
    if kind == "depth_affine":
        s = float(spec.get("s", 1.0))
        b = float(spec.get("b", 0.0))
        if s <= 0:
            raise BadSpec("depth scale must be positive")
        right = RenderedView(cap.right.image, cap.right.depth.affine(s, b), cap.right.pose, cap.right.intr)
        out = StereoCapture(cap.left, right, cap.uv1, cap.uv2, cap.baseline, cap.terrain, cap.records + [record])
        return out, record
    if kind == "pose_noise":
        rs = float(spec.get("rot_sigma", 0.0))
        ts = float(spec.get("trans_sigma", 0.0))
        w = rng.normal(0.0, rs, 3)
        dt = rng.normal(0.0, ts, 3)
        noise = Pose(rotvec_to_matrix(w), dt)
        record.update(rotvec=w.tolist(), translation=dt.tolist())
        right = RenderedView(cap.right.image, cap.right.depth, noise.compose(cap.right.pose), cap.right.intr)
        out = StereoCapture(cap.left, right, cap.uv1, cap.uv2, cap.baseline, cap.terrain, cap.records + [record])
        return out, record
    if kind == "outliers":
        frac = float(spec.get("fraction", 0.2))
        min_off = float(spec.get("min_offset", 10.0))
        if not 0 <= frac < 1:
            raise BadSpec("outlier fraction must be in [0, 1)")
        n = cap.uv2.shape[0]
        k = int(round(frac * n))
        idx = np.sort(rng.choice(n, size=k, replace=False))
        uv2 = cap.uv2.copy()
        K = cap.intr
        for i in idx:
            while True:
                cand = rng.uniform([0, 0], [K.width - 1, K.height - 1])
                if np.linalg.norm(cand - cap.uv2[i]) >= min_off:
                    break
            uv2[i] = cand
        record["indices"] = idx.tolist()
        out = StereoCapture(cap.left, cap.right, cap.uv1, uv2, cap.baseline, cap.terrain, cap.records + [record])
        return out, record
    raise BadSpec(f"unknown capture perturbation {kind!r}")


def oracle_view(seed: int, size: int = 256, amplitude: float = 0.6) -> RenderedView:
    """Single seeded capture (the left view of :func:`oracle_scene`)."""
    rng = np.random.default_rng(seed)
    terrain = generate_terrain(seed, amplitude=amplitude)
    pose = rover_pose(terrain, x=float(rng.uniform(-2, 2)), y=float(rng.uniform(-8, -4)),
                      height=float(rng.uniform(1.4, 1.9)), pitch_deg=float(rng.uniform(36, 48)),
                      yaw_deg=float(rng.uniform(-20, 20)))
    return render_oracle_view(terrain, default_intrinsics(size, size), pose)

"""Metric reconstruction: PnP, depth rescaling, point-cloud fusion, Gaussian scales."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import formats
from .camera import (
    Intrinsics,
    Pose,
    back_project_pixels,
    nearest_rotation,
    pixel_to_normalized,
    project_points,
    rotvec_to_matrix,
)
from .errors import (
    DegenerateConfiguration,
    DegenerateSamples,
    EmptyCloud,
    FormatError,
    NoConvergence,
    TooFewPoints,
)

logger = logging.getLogger(__name__)

MIN_PNP_POINTS = 6


# ---------------------------------------------------------------------------
# depth maps


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel metric depth with a validity mask."""

    values: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"depth map must be 2-D, got shape {vals.shape}")
        ok = np.isfinite(vals) & (vals > 0)
        if self.valid is not None:
            ok &= np.asarray(self.valid, dtype=bool)
        vals = np.where(ok, vals, 0.0)
        vals.setflags(write=False)
        ok.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "valid", ok)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def affine(self, s: float, b: float) -> "DepthMap":
        return DepthMap(s * self.values + b, self.valid)

    def sample(self, uv, *, max_jump: float = 0.05):
        """Bilinearly interpolate inverse depth at continuous pixel positions.

        Inverse depth is affine in pixel coordinates on planar surfaces, so the
        lookup is exact there.  Returns (depth, ok); samples outside the image,
        touching invalid pixels or straddling a relative depth jump larger than
        ``max_jump`` are flagged not ok.
        """
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        u, v = uv[:, 0], uv[:, 1]
        inside = (u >= 0) & (v >= 0) & (u <= self.width - 1) & (v <= self.height - 1)
        u0 = np.clip(np.floor(u), 0, max(self.width - 2, 0)).astype(int)
        v0 = np.clip(np.floor(v), 0, max(self.height - 2, 0)).astype(int)
        u1 = np.minimum(u0 + 1, self.width - 1)
        v1 = np.minimum(v0 + 1, self.height - 1)
        fu = np.clip(u - u0, 0.0, 1.0)
        fv = np.clip(v - v0, 0.0, 1.0)
        corners = [(v0, u0), (v0, u1), (v1, u0), (v1, u1)]
        d = np.stack([self.values[r, c] for r, c in corners], axis=1)
        ok = inside & np.all(np.stack([self.valid[r, c] for r, c in corners], axis=1), axis=1)
        dsafe = np.where(d > 0, d, 1.0)
        ratio = dsafe.max(axis=1) / dsafe.min(axis=1)
        ok &= ratio <= 1.0 + max_jump
        inv = 1.0 / dsafe
        top = inv[:, 0] + fu * (inv[:, 1] - inv[:, 0])
        bot = inv[:, 2] + fu * (inv[:, 3] - inv[:, 2])
        val = 1.0 / (top + fv * (bot - top))
        # integer positions return the stored value untouched
        exact = (fu == 0) & (fv == 0)
        val = np.where(exact, d[:, 0], val)
        return np.where(ok, val, np.nan), ok


def load_depth(path) -> DepthMap:
    """Read a PFM depth map or a raw little-endian float32 file with a ``.hdr`` sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return DepthMap(formats.read_pfm(path))
    hdr = path.with_suffix(path.suffix + ".hdr")
    if not hdr.exists():
        hdr = path.with_suffix(".hdr")
    if not hdr.exists():
        raise FormatError(f"{path}: raw depth needs a sidecar header ({hdr.name})")
    meta = dict(ln.split(None, 1) for ln in hdr.read_text().splitlines() if ln.strip())
    w, h = int(meta["width"]), int(meta["height"])
    order = meta.get("byte_order", "little").strip()
    dtype = "<f4" if order == "little" else ">f4"
    arr = np.fromfile(path, dtype=dtype, count=w * h).reshape(h, w)
    return DepthMap(arr.astype(np.float64))


def save_depth(path, depth: DepthMap) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        formats.write_pfm(path, depth.values)
        return
    depth.values.astype("<f4").tofile(path)
    Path(str(path) + ".hdr").write_text(
        f"width {depth.width}\nheight {depth.height}\nbyte_order little\n", encoding="utf-8"
    )


# ---------------------------------------------------------------------------
# point clouds


@dataclass(eq=False)
class PointCloud:
    """Coloured world-frame points with per-point provenance."""

    positions: np.ndarray
    colors: np.ndarray
    view_ids: np.ndarray
    source_pixels: np.ndarray
    cam_depths: np.ndarray
    scales: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(n, 3)
        self.view_ids = np.asarray(self.view_ids, dtype=np.int32).reshape(n)
        self.source_pixels = np.asarray(self.source_pixels, dtype=np.float64).reshape(n, 2)
        self.cam_depths = np.asarray(self.cam_depths, dtype=np.float64).reshape(n)
        if self.scales is not None:
            self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("point positions must be finite")
        if np.any(self.cam_depths <= 0):
            raise ValueError("camera depths must be positive")

    def __len__(self):
        return self.positions.shape[0]

    def subset(self, idx) -> "PointCloud":
        return PointCloud(
            self.positions[idx], self.colors[idx], self.view_ids[idx], self.source_pixels[idx],
            self.cam_depths[idx], None if self.scales is None else self.scales[idx],
        )

    @staticmethod
    def concatenate(clouds: Sequence["PointCloud"]) -> "PointCloud":
        scales = None
        if all(c.scales is not None for c in clouds):
            scales = np.concatenate([c.scales for c in clouds])
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.view_ids for c in clouds]),
            np.concatenate([c.source_pixels for c in clouds]),
            np.concatenate([c.cam_depths for c in clouds]),
            scales,
        )


_PLY_FIELDS = [
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("red", "u1"), ("green", "u1"), ("blue", "u1"),
    ("view_id", "<i4"), ("src_u", "<f8"), ("src_v", "<f8"),
    ("cam_depth", "<f8"), ("scale", "<f8"),
]
_PLY_TYPES = {"<f8": "double", "u1": "uchar", "<i4": "int"}


def save_ply(path, cloud: PointCloud) -> None:
    """Binary little-endian PLY with provenance fields; scale is NaN when unset."""
    n = len(cloud)
    arr = np.empty(n, dtype=_PLY_FIELDS)
    arr["x"], arr["y"], arr["z"] = cloud.positions.T
    arr["red"], arr["green"], arr["blue"] = cloud.colors.T
    arr["view_id"] = cloud.view_ids
    arr["src_u"], arr["src_v"] = cloud.source_pixels.T
    arr["cam_depth"] = cloud.cam_depths
    arr["scale"] = np.nan if cloud.scales is None else cloud.scales
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {_PLY_TYPES[t]} {name}" for name, t in _PLY_FIELDS]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


def load_ply(path) -> PointCloud:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    n = next(int(ln.split()[2]) for ln in header if ln.startswith("element vertex"))
    props = [ln.split()[2] for ln in header if ln.startswith("property")]
    if props != [name for name, _ in _PLY_FIELDS]:
        raise FormatError(f"{path}: unexpected PLY layout {props}")
    arr = np.frombuffer(raw, dtype=_PLY_FIELDS, count=n, offset=end + len(b"end_header\n"))
    scales = arr["scale"].astype(np.float64)
    return PointCloud(
        np.column_stack([arr["x"], arr["y"], arr["z"]]),
        np.column_stack([arr["red"], arr["green"], arr["blue"]]),
        arr["view_id"], np.column_stack([arr["src_u"], arr["src_v"]]), arr["cam_depth"],
        None if np.all(np.isnan(scales)) else scales,
    )


# ---------------------------------------------------------------------------
# reprojection


class Residuals(NamedTuple):
    per_point: np.ndarray
    rms: float
    behind: np.ndarray


def reprojection_residuals(pose: Pose, intr: Intrinsics, points3d, pixels2) -> Residuals:
    """Pixel distance between observed ``pixels2`` and projections of ``pose``-mapped points.

    Points that land behind the camera get an infinite residual and are
    flagged in ``behind``; the RMS is taken over finite residuals only.
    """
    P = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    obs = np.asarray(pixels2, dtype=np.float64).reshape(-1, 2)
    Q = pose.apply(P)
    behind = ~(Q[:, 2] > 0)
    proj = project_points(Q, intr, distort=True)
    res = np.linalg.norm(proj - obs, axis=1)
    res[behind] = np.inf
    fin = np.isfinite(res)
    rms = float(np.sqrt(np.mean(res[fin] ** 2))) if np.any(fin) else float("nan")
    return Residuals(res, rms, behind)


# ---------------------------------------------------------------------------
# PnP


@dataclass
class PnpResult:
    pose: Pose
    inliers: np.ndarray
    reprojection_rms: float
    iterations: int
    cost_history: list[float] = field(default_factory=list)
    hypotheses: int = 0


def _normalize_points(X):
    c = X.mean(axis=0)
    d = np.sqrt(np.mean(np.sum((X - c) ** 2, axis=1)))
    s = math.sqrt(X.shape[1]) / d if d > 0 else 1.0
    return c, s


def _dlt_pose(P, xn):
    """Linear pose from >= 6 points and normalized image coordinates."""
    c3, s3 = _normalize_points(P)
    Pn = (P - c3) * s3
    c2, s2 = _normalize_points(xn)
    xh = (xn - c2) * s2
    n = P.shape[0]
    Xh = np.hstack([Pn, np.ones((n, 1))])
    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -xh[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -xh[:, 1:2] * Xh
    _, sv, Vt = np.linalg.svd(A)
    Pm = Vt[-1].reshape(3, 4)
    # undo the 2-D normalisation: x = T2^-1 x_h
    T2inv = np.array([[1 / s2, 0, c2[0]], [0, 1 / s2, c2[1]], [0, 0, 1]])
    Pm = T2inv @ Pm
    # undo the 3-D normalisation: X_n = s3 (X - c3)
    M = Pm[:, :3] * s3
    t = Pm[:, 3] - M @ c3
    return _rt_from_projective(M, t, P)


def _rt_from_projective(M, t, P):
    U, S, Vt = np.linalg.svd(M)
    scale = S.mean()
    if scale <= 0:
        raise DegenerateConfiguration("linear pose estimate is rank deficient")
    R = U @ Vt
    t = t / scale
    # the projective scale may be negative; det(R) = +1 fixes its sign
    if np.linalg.det(R) < 0:
        R, t = -R, -t
    return R, t


def _planar_pose(P, xn, basis):
    """Pose from coplanar points via a plane-to-image homography."""
    c, E = basis
    Q = (P - c) @ E[:, :2]  # in-plane coordinates
    cq, sq = _normalize_points(Q)
    Qn = (Q - cq) * sq
    c2, s2 = _normalize_points(xn)
    xh = (xn - c2) * s2
    n = P.shape[0]
    A = np.zeros((2 * n, 9))
    Qh = np.hstack([Qn, np.ones((n, 1))])
    A[0::2, 0:3] = Qh
    A[0::2, 6:9] = -xh[:, 0:1] * Qh
    A[1::2, 3:6] = Qh
    A[1::2, 6:9] = -xh[:, 1:2] * Qh
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    T2inv = np.array([[1 / s2, 0, c2[0]], [0, 1 / s2, c2[1]], [0, 0, 1]])
    Tq = np.array([[sq, 0, -sq * cq[0]], [0, sq, -sq * cq[1]], [0, 0, 1]])
    H = T2inv @ Hn @ Tq
    lam = 2.0 / (np.linalg.norm(H[:, 0]) + np.linalg.norm(H[:, 1]))
    r1, r2, tp = lam * H[:, 0], lam * H[:, 1], lam * H[:, 2]
    if tp[2] < 0:
        r1, r2, tp = -r1, -r2, -tp
    Rp = nearest_rotation(np.column_stack([r1, r2, np.cross(r1, r2)]))
    # plane frame -> camera; compose with world -> plane frame (q = E^T (X - c))
    R = Rp @ E.T
    t = tp - R @ c
    return R, t


def _geometry_kind(P, rel_tol=1e-6):
    c = P.mean(axis=0)
    _, S, Vt = np.linalg.svd(P - c, full_matrices=False)
    if S[0] == 0 or S[1] <= rel_tol * S[0]:
        return "collinear", None
    if S[2] <= rel_tol * S[0]:
        E = Vt.T.copy()  # columns: two in-plane directions then the normal
        if np.linalg.det(E) < 0:
            E[:, 2] = -E[:, 2]
        return "planar", (c, E)
    return "general", None


def _initial_pose(P, xn, kind, basis):
    if kind == "planar":
        return _planar_pose(P, xn, basis)
    return _dlt_pose(P, xn)


def _cost_and_jacobian(R, t, P, obs, intr):
    X = P @ R.T
    Q = X + t
    z = Q[:, 2]
    active = z > 0
    Xa, Qa, za = X[active], Q[active], z[active]
    u = intr.fx * Qa[:, 0] / za + intr.cx
    v = intr.fy * Qa[:, 1] / za + intr.cy
    r = np.empty(2 * Qa.shape[0])
    r[0::2] = u - obs[active, 0]
    r[1::2] = v - obs[active, 1]
    # d(pixel)/d(Q)
    dQ = np.zeros((Qa.shape[0], 2, 3))
    dQ[:, 0, 0] = intr.fx / za
    dQ[:, 0, 2] = -intr.fx * Qa[:, 0] / za**2
    dQ[:, 1, 1] = intr.fy / za
    dQ[:, 1, 2] = -intr.fy * Qa[:, 1] / za**2
    # left perturbation: Q(w, dt) = exp(w) R P + t + dt  ->  dQ/dw = -[R P]x
    dw = np.zeros((Qa.shape[0], 3, 3))
    dw[:, 0, 1], dw[:, 0, 2] = Xa[:, 2], -Xa[:, 1]
    dw[:, 1, 0], dw[:, 1, 2] = -Xa[:, 2], Xa[:, 0]
    dw[:, 2, 0], dw[:, 2, 1] = Xa[:, 1], -Xa[:, 0]
    J = np.concatenate([dQ @ dw, dQ], axis=2).reshape(-1, 6)
    return float(r @ r), r, J, active


def _refine(R, t, P, obs, intr, max_iterations, history):
    """Levenberg-Marquardt on the reprojection cost with SE(3) left updates.

    Only cost-decreasing steps are accepted, so ``history`` is monotone.
    """
    cost, r, J, active = _cost_and_jacobian(R, t, P, obs, intr)
    if active.sum() < 3:
        raise DegenerateConfiguration("fewer than 3 points in front of the camera")
    history.append(cost)
    mu = 1e-3
    it = 0
    for it in range(1, max_iterations + 1):
        JtJ = J.T @ J
        g = J.T @ r
        improved = False
        for _ in range(30):
            A = JtJ + mu * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                delta = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            Rn = rotvec_to_matrix(delta[:3]) @ R
            tn = t + delta[3:]
            cn, rn, Jn, an = _cost_and_jacobian(Rn, tn, P, obs, intr)
            if an.sum() >= 3 and cn < cost:
                improved = True
                break
            mu *= 10.0
        if not improved:
            break
        decrease = cost - cn
        R, t, cost, r, J, active = nearest_rotation(Rn), tn, cn, rn, Jn, an
        history.append(cost)
        mu = max(mu / 10.0, 1e-12)
        if decrease < 1e-12 * max(cost + decrease, 1e-300) or cost == 0.0:
            break
    return R, t, it


def solve_pnp(
    points3d,
    pixels2,
    intr: Intrinsics,
    *,
    ransac_threshold: float = 2.0,
    max_iterations: int = 100,
    max_hypotheses: int = 1000,
    confidence: float = 0.9999,
    seed: int = 0,
) -> PnpResult:
    """Robust pose of view 2 given 3-D points in the view-1 frame and their view-2 pixels.

    Six-point linear hypotheses are scored with a seeded RANSAC loop, the
    best consensus set is refitted linearly and then refined by minimising
    the summed squared reprojection error.  Inliers are re-selected with the
    refined pose until the set stops changing.
    """
    P = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    obs = np.asarray(pixels2, dtype=np.float64).reshape(-1, 2)
    n = P.shape[0]
    if n != obs.shape[0]:
        raise ValueError("points3d and pixels2 differ in length")
    if n < MIN_PNP_POINTS:
        raise TooFewPoints(f"PnP needs at least {MIN_PNP_POINTS} correspondences, got {n}")
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(obs))):
        raise ValueError("non-finite correspondences")

    kind, basis = _geometry_kind(P)
    if kind == "collinear":
        raise DegenerateConfiguration("3-D points are collinear")
    if _geometry_kind(np.column_stack([obs, np.zeros(n)]))[0] == "collinear":
        raise DegenerateConfiguration("observations are collinear: points lie on a plane through the camera centre")

    # observations in undistorted pixel units; refinement runs in that space
    xn = pixel_to_normalized(obs, intr)
    obs_u = np.column_stack([intr.fx * xn[:, 0] + intr.cx, intr.fy * xn[:, 1] + intr.cy])

    rng = np.random.default_rng(seed)
    best_count, best_inl, best_err = -1, None, np.inf
    needed = max_hypotheses
    h = 0
    while h < min(needed, max_hypotheses):
        h += 1
        idx = rng.choice(n, size=MIN_PNP_POINTS, replace=False)
        sk, sb = _geometry_kind(P[idx])
        if sk == "collinear" or (sk == "planar" and kind != "planar"):
            continue
        try:
            R, t = _initial_pose(P[idx], xn[idx], sk, sb)
        except (np.linalg.LinAlgError, DegenerateConfiguration):
            continue
        res = _residuals_raw(R, t, P, obs_u, intr)
        inl = res < ransac_threshold
        cnt = int(inl.sum())
        err = float(np.sum(np.minimum(res, ransac_threshold) ** 2))
        if cnt > best_count or (cnt == best_count and err < best_err):
            best_count, best_inl, best_err = cnt, inl, err
            frac = cnt / n
            if frac >= 1.0:
                needed = h
            elif frac > 0:
                needed = math.ceil(math.log(1 - confidence) / math.log(1 - frac**MIN_PNP_POINTS))
    if best_inl is None or best_count < MIN_PNP_POINTS:
        raise DegenerateConfiguration("no hypothesis reached a minimal consensus set")

    inl = best_inl
    history: list[float] = []
    total_iter = 0
    for _ in range(5):
        Pi, xi = P[inl], xn[inl]
        ik, ib = _geometry_kind(Pi)
        R, t = _initial_pose(Pi, xi, ik if ik != "collinear" else "general", ib)
        history.clear()
        R, t, it = _refine(R, t, Pi, obs_u[inl], intr, max_iterations, history)
        total_iter += it
        res = _residuals_raw(R, t, P, obs_u, intr)
        new_inl = res < ransac_threshold
        if new_inl.sum() < MIN_PNP_POINTS:
            raise NoConvergence("refined pose lost its consensus set")
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl
    if total_iter == 0 and history and history[0] > 0 and max_iterations > 0:
        logger.debug("PnP refinement made no progress from the linear estimate")

    pose = Pose(nearest_rotation(R), t)
    rres = reprojection_residuals(pose, intr, P[inl], obs[inl])
    return PnpResult(pose, inl, rres.rms, total_iter, list(history), h)


def _residuals_raw(R, t, P, obs_u, intr):
    Q = P @ R.T + t
    z = Q[:, 2]
    res = np.full(P.shape[0], np.inf)
    ok = z > 0
    u = intr.fx * Q[ok, 0] / z[ok] + intr.cx
    v = intr.fy * Q[ok, 1] / z[ok] + intr.cy
    res[ok] = np.hypot(u - obs_u[ok, 0], v - obs_u[ok, 1])
    return res


# ---------------------------------------------------------------------------
# depth rescaling


@dataclass(frozen=True)
class DepthAlignment:
    s: float
    b: float
    residual_rms: float
    sample_count: int

    def apply(self, depth):
        return self.s * np.asarray(depth, dtype=np.float64) + self.b


def align_depth(d1_samples, d2_samples) -> DepthAlignment:
    """Closed-form least squares for ``min_{s,b} sum (s d1 + b - d2)^2``."""
    d1 = np.asarray(d1_samples, dtype=np.float64).reshape(-1)
    d2 = np.asarray(d2_samples, dtype=np.float64).reshape(-1)
    if d1.shape != d2.shape:
        raise ValueError(f"sample lists differ in length: {d1.size} vs {d2.size}")
    n = d1.size
    if n < 2:
        raise DegenerateSamples(f"need at least 2 samples, got {n}")
    m1 = d1.mean()
    m2 = d2.mean()
    c1 = d1 - m1
    var1 = float(c1 @ c1) / n
    if var1 < 1e-12:
        raise DegenerateSamples(f"view-1 depth variance {var1:.3e} is too small; normal equations are singular")
    s = float(c1 @ (d2 - m2)) / (n * var1)
    b = float(m2 - s * m1)
    resid = s * d1 + b - d2
    return DepthAlignment(s, b, float(np.sqrt(np.mean(resid**2))), n)


# ---------------------------------------------------------------------------
# fusion and Gaussian scales


@dataclass(frozen=True, eq=False)
class View:
    image: np.ndarray
    depth: DepthMap
    intr: Intrinsics
    pose: Pose  # world -> camera


def _as_view(v) -> View:
    return v if isinstance(v, View) else View(*v)


def _view_geometry(v):
    """(intr, pose, depth or None) from a View, a fusion 4-tuple or an (intr, pose[, depth]) tuple."""
    if isinstance(v, View):
        return v.intr, v.pose, v.depth
    if len(v) == 4:
        vw = View(*v)
        return vw.intr, vw.pose, vw.depth
    return v[0], v[1], (v[2] if len(v) > 2 else None)


def fuse_point_clouds(views, stride: int = 1) -> PointCloud:
    """Lift every valid pixel on a ``stride`` grid of every view into the world frame."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    parts = []
    for vid, view in enumerate(_as_view(v) for v in views):
        d = view.depth
        img = np.asarray(view.image)
        if img.shape[:2] != (d.height, d.width):
            raise ValueError(f"view {vid}: image {img.shape[:2]} and depth {(d.height, d.width)} differ")
        if (d.width, d.height) != (view.intr.width, view.intr.height):
            raise ValueError(f"view {vid}: depth size does not match intrinsics")
        vv, uu = np.mgrid[0:d.height:stride, 0:d.width:stride]
        uu, vv = uu.ravel(), vv.ravel()
        ok = d.valid[vv, uu]
        uu, vv = uu[ok], vv[ok]
        z = d.values[vv, uu]
        uv = np.column_stack([uu, vv]).astype(np.float64)
        cam = back_project_pixels(uv, z, view.intr)
        world = view.pose.inverse().apply(cam)
        colors = img[vv, uu] if img.ndim == 3 else np.repeat(img[vv, uu, None], 3, axis=1)
        if colors.dtype != np.uint8:
            colors = formats.to_uint8(colors)
        parts.append(PointCloud(world, colors, np.full(uu.size, vid), uv, z))
    cloud = PointCloud.concatenate(parts) if parts else None
    if cloud is None or len(cloud) == 0:
        raise EmptyCloud("no valid depth pixels to fuse")
    return cloud


def initial_gaussian_scales(cloud: PointCloud, views, *, occlusion_tol: float = 0.05) -> np.ndarray:
    """Per-point scale ``d'_min / f_avg``.

    ``d'_min`` is the smallest camera-frame depth of the point over the views
    that observe it and ``f_avg`` is the mean of (fx + fy)/2 over those views.
    A view observes a point when it projects inside the image in front of the
    camera and, if the view carries a depth map, lies within ``occlusion_tol``
    (relative) of the depth stored at the nearest pixel.  The source view
    always counts.
    """
    n = len(cloud)
    dmin = np.full(n, np.inf)
    fsum = np.zeros(n)
    fcnt = np.zeros(n)
    for vid, view in enumerate(views):
        intr, pose, depth = _view_geometry(view)
        Q = pose.apply(cloud.positions)
        z = Q[:, 2]
        uv = project_points(Q, intr)
        seen = z > 0
        with np.errstate(invalid="ignore"):
            ui = np.rint(uv[:, 0])
            vi = np.rint(uv[:, 1])
            seen &= (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
        if depth is not None:
            idx = np.flatnonzero(seen)
            ref = depth.values[vi[idx].astype(int), ui[idx].astype(int)]
            okd = depth.valid[vi[idx].astype(int), ui[idx].astype(int)]
            seen[idx] = okd & (np.abs(z[idx] - ref) <= occlusion_tol * z[idx])
        seen |= cloud.view_ids == vid
        zv = np.where(seen, z, np.inf)
        dmin = np.minimum(dmin, zv)
        fsum += np.where(seen, intr.f_avg, 0.0)
        fcnt += seen
    if np.any(fcnt == 0):
        raise ValueError("some points are observed by no view")
    return dmin / (fsum / fcnt)

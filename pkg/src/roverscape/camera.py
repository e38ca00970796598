"""Camera models: pinhole with radial distortion, rigid poses, and CAHVOR.

Camera frames follow the computer-vision convention: x right, y down,
z forward.  Pixel centres sit at integer coordinates.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (
    DegenerateModel,
    FormatError,
    InvalidPose,
    NoConvergence,
    NonOrthogonal,
    NonPositiveDepth,
)

logger = logging.getLogger(__name__)

POSE_TOL = 1e-9
CAHVOR_ORTHO_TOL = 1e-6


class Pixel(NamedTuple):
    u: float
    v: float


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole calibration with a three-term radial model.

    The distortion scale applied to a normalized image point of radius r is
    ``1 + k0 + k1 r^2 + k2 r^4``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k0: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    pixel_size: float = 1.0

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy, self.k0, self.k1, self.k2, self.pixel_size)
        if not all(math.isfinite(float(v)) for v in vals):
            raise ValueError("intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be at least 1x1")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def f_avg(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def has_distortion(self) -> bool:
        return self.k0 != 0.0 or self.k1 != 0.0 or self.k2 != 0.0

    def scaled(self, factor: float) -> "Intrinsics":
        """Intrinsics for the same camera resampled by ``factor``."""
        return Intrinsics(
            fx=self.fx * factor, fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5, cy=(self.cy + 0.5) * factor - 0.5,
            width=max(1, round(self.width * factor)), height=max(1, round(self.height * factor)),
            k0=self.k0, k1=self.k1, k2=self.k2, pixel_size=self.pixel_size,
        )


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform x -> R x + t.

    Whether it maps world to camera, camera to world or frame to frame is
    declared by the caller.
    """

    rotation: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation)
        t = _frozen(self.translation).reshape(3)
        if R.shape != (3, 3):
            raise InvalidPose(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidPose("pose contains non-finite values")
        ortho = np.abs(R.T @ R - np.eye(3)).max()
        det = np.linalg.det(R)
        if ortho > POSE_TOL or abs(det - 1.0) > POSE_TOL:
            raise InvalidPose(f"rotation is not in SO(3): |RtR-I|={ortho:.2e}, det={det:.12f}")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "Pose":
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(rotvec_to_matrix(rotvec), translation)

    def matrix34(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def matrix44(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :4] = self.matrix34()
        return M

    def apply(self, points) -> np.ndarray:
        """Transform a single 3-vector or an (N, 3) array."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Return ``self ∘ other``: apply ``other`` first, then ``self``."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    @property
    def center(self) -> np.ndarray:
        """Origin of the source frame expressed in the target frame, inverted.

        For a world->camera pose this is the camera centre in world coordinates.
        """
        return -self.rotation.T @ self.translation

    def angle_to(self, other: "Pose") -> float:
        return rotation_angle(self.rotation.T @ other.rotation)

    def __repr__(self):
        rv = matrix_to_rotvec(self.rotation)
        return f"Pose(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def transform_point(pose: Pose, p) -> np.ndarray:
    return pose.apply(p)


def skew(w) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def rotvec_to_matrix(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = skew(w)
    if theta < 1e-8:
        # second-order Taylor terms keep the result orthonormal to ~1e-24
        return np.eye(3) + W + 0.5 * (W @ W)
    return np.eye(3) + (math.sin(theta) / theta) * W + ((1.0 - math.cos(theta)) / theta**2) * (W @ W)


def matrix_to_rotvec(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    cos = (np.trace(R) - 1.0) / 2.0
    cos = min(1.0, max(-1.0, cos))
    theta = math.acos(cos)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * v
    if math.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        if np.dot(axis, v) < 0:
            axis = -axis
        return axis * theta
    return v * (theta / (2.0 * math.sin(theta)))


def rotation_angle(R) -> float:
    return float(np.linalg.norm(matrix_to_rotvec(R)))


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


# ---------------------------------------------------------------------------
# projection


def project(point_cam, intr: Intrinsics) -> Pixel:
    """Pinhole projection of a camera-frame point, without distortion."""
    x, y, z = (float(c) for c in point_cam)
    if not z > 0:
        raise NonPositiveDepth(f"point has depth {z}")
    return Pixel(intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy)


def back_project(pixel, depth: float, intr: Intrinsics) -> np.ndarray:
    """Lift a pixel with metric depth into the camera frame: ``d * K^-1 [u, v, 1]``."""
    if not depth > 0:
        raise NonPositiveDepth(f"depth must be positive, got {depth}")
    u, v = pixel
    return np.array([(u - intr.cx) / intr.fx * depth, (v - intr.cy) / intr.fy * depth, float(depth)])


def project_points(points, intr: Intrinsics, *, distort: bool = False) -> np.ndarray:
    """Vectorised projection of (N, 3) camera points.

    Points with z <= 0 come back as NaN rows.
    """
    P = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = P[:, 2]
    out = np.full((P.shape[0], 2), np.nan)
    ok = z > 0
    xn = P[ok, :2] / z[ok, None]
    if distort and intr.has_distortion:
        xn = apply_distortion(xn, intr.k0, intr.k1, intr.k2)
    out[ok, 0] = intr.fx * xn[:, 0] + intr.cx
    out[ok, 1] = intr.fy * xn[:, 1] + intr.cy
    return out


def back_project_pixels(uv, depth, intr: Intrinsics) -> np.ndarray:
    """Vectorised back-projection of (N, 2) pixels with (N,) depths."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(depth, dtype=np.float64).reshape(-1)
    out = np.empty((uv.shape[0], 3))
    out[:, 0] = (uv[:, 0] - intr.cx) / intr.fx * d
    out[:, 1] = (uv[:, 1] - intr.cy) / intr.fy * d
    out[:, 2] = d
    return out


def pixel_to_normalized(uv, intr: Intrinsics, *, undistort_points: bool = True) -> np.ndarray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    xn = np.column_stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy])
    if undistort_points and intr.has_distortion:
        xn = undistort(xn, intr.k0, intr.k1, intr.k2)
    return xn


# ---------------------------------------------------------------------------
# radial distortion


def _radial_scale(r2, k0, k1, k2):
    return 1.0 + k0 + k1 * r2 + k2 * r2 * r2


def apply_distortion(x, k0: float, k1: float, k2: float) -> np.ndarray:
    """Scale normalized points radially by ``1 + k0 + k1 r^2 + k2 r^4``.

    Accepts a single 2-vector or an (N, 2) array.
    """
    x = np.asarray(x, dtype=np.float64)
    r2 = np.sum(x * x, axis=-1, keepdims=True)
    return x * _radial_scale(r2, k0, k1, k2)


def undistort(x, k0: float, k1: float, k2: float, *, max_iter: int = 50, tol: float = 1e-15) -> np.ndarray:
    """Invert :func:`apply_distortion`.

    Solves ``r (1 + k0 + k1 r^2 + k2 r^4) = r_d`` for the undistorted radius
    with a Newton iteration kept inside a bisection bracket, so each point
    converges or raises :class:`NoConvergence` after ``max_iter`` steps.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x.reshape(-1, 2)
    if k0 == 0.0 and k1 == 0.0 and k2 == 0.0:
        return x.copy()
    rd = np.linalg.norm(X, axis=1)
    out = np.zeros_like(X)
    nz = rd > 0
    if np.any(nz):
        r = _solve_radius(rd[nz], k0, k1, k2, max_iter, tol)
        out[nz] = X[nz] * (r / rd[nz])[:, None]
    return out.reshape(2) if single else out


def _quadratic_roots(a: float, b: float, c: float) -> list[float]:
    """Real roots of ``a s^2 + b s + c`` without cancellation."""
    if a == 0.0:
        return [-c / b] if b != 0.0 else []
    disc = b * b - 4.0 * a * c
    if disc < 0.0:
        return []
    q = -0.5 * (b + math.copysign(math.sqrt(disc), b))
    roots = [c / q] if q != 0.0 else []
    with np.errstate(over="ignore"):
        roots.append(float(np.float64(q) / a))
    return roots


def _solve_radius(rd, k0, k1, k2, max_iter, tol):
    def f(r):
        r2 = r * r
        return r * _radial_scale(r2, k0, k1, k2) - rd

    def df(r):
        r2 = r * r
        return 1.0 + k0 + 3.0 * k1 * r2 + 5.0 * k2 * r2 * r2

    base = 1.0 + k0
    if base <= 0:
        raise NoConvergence("radial model is not invertible near the centre (1 + k0 <= 0)")
    lo = np.zeros_like(rd)
    # the invertible branch ends where d(r_d)/dr first reaches 0 (a root in r^2)
    crit = [v for v in _quadratic_roots(5.0 * k2, 3.0 * k1, base) if v > 0 and math.isfinite(v)]
    r_max = math.sqrt(min(crit)) if crit else math.inf
    hi = np.minimum(rd / base, r_max)
    # grow the upper bracket until the residual changes sign, never past r_max
    for _ in range(1100):
        bad = f(hi) < 0
        if not np.any(bad):
            break
        if np.any(bad & (hi >= r_max)):
            raise NoConvergence("distorted radius lies beyond the invertible range of the radial model")
        hi = np.where(bad, np.minimum(hi * 2.0, r_max), hi)
    else:
        raise NoConvergence("could not bracket the undistorted radius")
    r = rd / base
    r = np.clip(r, lo, hi)
    for _ in range(max_iter):
        fr = f(r)
        lo = np.where(fr < 0, r, lo)
        hi = np.where(fr > 0, r, hi)
        d = df(r)
        step = np.where(d != 0, fr / np.where(d != 0, d, 1.0), 0.0)
        scale = tol * np.maximum(1.0, np.abs(r))
        # converged points stay put; a rounding-level step must not trigger bisection
        done = (fr == 0) | ((d > 0) & (np.abs(step) <= scale)) | (hi - lo <= scale)
        if np.all(done):
            return r
        cand = r - step
        outside = (cand <= lo) | (cand >= hi) | (d <= 0)
        cand = np.where(outside, 0.5 * (lo + hi), cand)
        r = np.where(done, r, cand)
    raise NoConvergence(f"undistortion did not converge after {max_iter} iterations")


# ---------------------------------------------------------------------------
# CAHVOR


@dataclass(frozen=True, eq=False)
class CahvorModel:
    """CAHVOR camera: centre, axis, horizontal, vertical, optical offset, radial terms."""

    C: np.ndarray
    A: np.ndarray
    H: np.ndarray
    V: np.ndarray
    O: np.ndarray
    R: np.ndarray
    pixel_size: float = 1.0
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        for name in "CAHVOR":
            arr = _frozen(getattr(self, name)).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise DegenerateModel(f"{name} vector is not finite")
            object.__setattr__(self, name, arr)
        na = float(np.linalg.norm(self.A))
        if abs(na - 1.0) > 1e-9:
            raise DegenerateModel(f"axis vector A must be unit length, |A| = {na:.12f}")

    @property
    def hc(self) -> float:
        return float(self.H @ self.A)

    @property
    def vc(self) -> float:
        return float(self.V @ self.A)

    @property
    def hs(self) -> float:
        return float(np.linalg.norm(self.H - self.hc * self.A))

    @property
    def vs(self) -> float:
        return float(np.linalg.norm(self.V - self.vc * self.A))


def cahv_project(model: CahvorModel, points_world) -> np.ndarray:
    """Direct CAHV projection ``u = (P-C)·H / (P-C)·A``, ``v = (P-C)·V / (P-C)·A``."""
    d = np.asarray(points_world, dtype=np.float64).reshape(-1, 3) - model.C
    za = d @ model.A
    return np.column_stack([(d @ model.H) / za, (d @ model.V) / za])


def cahvor_to_pinhole(m: CahvorModel) -> tuple[Pose, Intrinsics]:
    """Convert a CAHVOR model to a world->camera pose and pinhole intrinsics.

    Raises :class:`DegenerateModel` when either focal scale vanishes and
    :class:`NonOrthogonal` when (Hn, Vn, A) is not a proper rotation within
    1e-6.  Smaller residuals are projected onto SO(3).
    """
    hc, vc, hs, vs = m.hc, m.vc, m.hs, m.vs
    if hs < 1e-12 or vs < 1e-12:
        raise DegenerateModel(f"focal scales vanish: hs={hs:.3e}, vs={vs:.3e}")
    Hn = (m.H - hc * m.A) / hs
    Vn = (m.V - vc * m.A) / vs
    Rm = np.vstack([Hn, Vn, m.A])
    residual = max(float(np.abs(Rm @ Rm.T - np.eye(3)).max()), abs(float(np.linalg.det(Rm)) - 1.0))
    if residual > CAHVOR_ORTHO_TOL:
        raise NonOrthogonal("CAHVOR axes (Hn, Vn, A) do not form a rotation", residual)
    if residual > POSE_TOL:
        logger.warning("CAHVOR axes off-orthogonal by %.2e; projecting onto SO(3)", residual)
        Rm = nearest_rotation(Rm)
    pose = Pose(Rm, -Rm @ m.C)
    scale = m.pixel_size * hs
    width = m.width if m.width is not None else max(1, round(2 * hc))
    height = m.height if m.height is not None else max(1, round(2 * vc))
    intr = Intrinsics(
        fx=hs, fy=vs, cx=hc, cy=vc, width=width, height=height,
        k0=float(m.R[0]), k1=float(m.R[1]) / scale**2, k2=float(m.R[2]) / scale**4,
        pixel_size=m.pixel_size,
    )
    return pose, intr


def pinhole_to_cahvor(pose: Pose, intr: Intrinsics) -> CahvorModel:
    """Build the CAHVOR model whose conversion yields ``pose`` and ``intr``."""
    Rm = pose.rotation
    A = Rm[2]
    H = intr.fx * Rm[0] + intr.cx * A
    V = intr.fy * Rm[1] + intr.cy * A
    scale = intr.pixel_size * intr.fx
    R = np.array([intr.k0, intr.k1 * scale**2, intr.k2 * scale**4])
    return CahvorModel(C=pose.center, A=A, H=H, V=V, O=A, R=R,
                       pixel_size=intr.pixel_size, width=intr.width, height=intr.height)


# ---------------------------------------------------------------------------
# text key-value files


def _fmt(x) -> str:
    return repr(float(x))


def _fmt_vec(v) -> str:
    return " ".join(_fmt(c) for c in v)


def _parse_kv(text: str) -> dict[str, list[str]]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        if not vals:
            raise FormatError(f"line {lineno}: key {key!r} has no value")
        out[key] = vals
    return out


def intrinsics_to_text(intr: Intrinsics) -> str:
    lines = ["# pinhole intrinsics"]
    for key in ("fx", "fy", "cx", "cy"):
        lines.append(f"{key} {_fmt(getattr(intr, key))}")
    lines.append(f"width {intr.width}")
    lines.append(f"height {intr.height}")
    for key in ("k0", "k1", "k2", "pixel_size"):
        lines.append(f"{key} {_fmt(getattr(intr, key))}")
    return "\n".join(lines) + "\n"


def intrinsics_from_text(text: str) -> Intrinsics:
    kv = _parse_kv(text)
    try:
        return Intrinsics(
            fx=float(kv["fx"][0]), fy=float(kv["fy"][0]),
            cx=float(kv["cx"][0]), cy=float(kv["cy"][0]),
            width=int(kv["width"][0]), height=int(kv["height"][0]),
            k0=float(kv.get("k0", ["0"])[0]), k1=float(kv.get("k1", ["0"])[0]),
            k2=float(kv.get("k2", ["0"])[0]),
            pixel_size=float(kv.get("pixel_size", ["1"])[0]),
        )
    except KeyError as exc:
        raise FormatError(f"intrinsics file is missing key {exc.args[0]!r}") from None


def cahvor_to_text(m: CahvorModel) -> str:
    lines = ["# CAHVOR camera model"]
    for key in "CAHVOR":
        lines.append(f"{key} {_fmt_vec(getattr(m, key))}")
    lines.append(f"pixel_size {_fmt(m.pixel_size)}")
    if m.width is not None:
        lines.append(f"width {m.width}")
    if m.height is not None:
        lines.append(f"height {m.height}")
    return "\n".join(lines) + "\n"


def cahvor_from_text(text: str) -> CahvorModel:
    kv = _parse_kv(text)
    vecs = {}
    for key in "CAHVOR":
        if key not in kv:
            raise FormatError(f"CAHVOR file is missing vector {key}")
        if len(kv[key]) != 3:
            raise FormatError(f"CAHVOR vector {key} needs 3 components, got {len(kv[key])}")
        vecs[key] = [float(c) for c in kv[key]]
    return CahvorModel(
        **vecs,
        pixel_size=float(kv.get("pixel_size", ["1"])[0]),
        width=int(kv["width"][0]) if "width" in kv else None,
        height=int(kv["height"][0]) if "height" in kv else None,
    )


def load_intrinsics(path) -> Intrinsics:
    return intrinsics_from_text(Path(path).read_text(encoding="utf-8"))


def save_intrinsics(path, intr: Intrinsics) -> None:
    Path(path).write_text(intrinsics_to_text(intr), encoding="utf-8")


def load_cahvor(path) -> CahvorModel:
    return cahvor_from_text(Path(path).read_text(encoding="utf-8"))


def save_cahvor(path, m: CahvorModel) -> None:
    Path(path).write_text(cahvor_to_text(m), encoding="utf-8")

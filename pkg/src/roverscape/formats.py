"""On-disk formats: PFM depth/normal maps, PNG frames, pose and correspondence text.

PFM files are written little-endian (negative scale header) with rows stored
bottom-to-top as the format prescribes.  Invalid depth is stored as 0.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Pose
from .errors import DecodeError, FormatError


def write_pfm(path, data: np.ndarray) -> None:
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise FormatError(f"PFM holds 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    body = np.ascontiguousarray(np.flipud(data)).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(body.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h = int(m.group(2)), int(m.group(3))
    scale = float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=m.end())
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(arr.reshape(shape)).astype(np.float32)


def read_image(path) -> np.ndarray:
    """Decode an image file into an (H, W, 3) uint8 array."""
    try:
        with Image.open(path) as im:
            im.load()
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def write_png(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    Image.fromarray(img).save(path, format="PNG", optimize=False)


def to_uint8(image) -> np.ndarray:
    """Convert a float image in [0, 1] to uint8 with rounding."""
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _fmt(x) -> str:
    return repr(float(x))


def pose_to_line(pose: Pose) -> str:
    return " ".join(_fmt(v) for v in pose.matrix34().reshape(-1))


def pose_from_line(line: str) -> Pose:
    vals = line.split()
    if len(vals) != 12:
        raise FormatError(f"pose line needs 12 values, got {len(vals)}")
    return Pose.from_matrix(np.array([float(v) for v in vals]).reshape(3, 4))


def write_poses(path, poses) -> None:
    Path(path).write_text("".join(pose_to_line(p) + "\n" for p in poses), encoding="utf-8")


def read_poses(path) -> list[Pose]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [pose_from_line(ln) for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def write_correspondences(path, uv1, uv2, weights=None) -> None:
    uv1 = np.asarray(uv1, dtype=np.float64).reshape(-1, 2)
    uv2 = np.asarray(uv2, dtype=np.float64).reshape(-1, 2)
    rows = []
    for i in range(uv1.shape[0]):
        vals = [uv1[i, 0], uv1[i, 1], uv2[i, 0], uv2[i, 1]]
        if weights is not None:
            vals.append(weights[i])
        rows.append(" ".join(_fmt(v) for v in vals))
    Path(path).write_text("".join(r + "\n" for r in rows), encoding="utf-8")


def read_correspondences(path):
    """Read ``u1 v1 u2 v2 [w]`` rows; returns (uv1, uv2, weights or None)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        vals = s.replace(",", " ").split()
        if len(vals) not in (4, 5):
            raise FormatError(f"{path}:{lineno}: expected 4 or 5 columns, got {len(vals)}")
        rows.append([float(v) for v in vals] + ([1.0] if len(vals) == 4 else []))
    if not rows:
        return np.zeros((0, 2)), np.zeros((0, 2)), None
    arr = np.array(rows)
    weights = arr[:, 4] if np.any(arr[:, 4] != 1.0) else None
    return arr[:, 0:2], arr[:, 2:4], weights

"""Image-quality gating for raw rover imagery.

Five gates run in a fixed order: size, grayscale, dedup, sharpness and
histogram.  The first failing gate rejects the image.  Deduplication is a
greedy scan over the images that survived the first two gates, keeping the
earliest capture of each near-duplicate group.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DecodeError, NotThreeChannel, TooSmall
from .formats import read_image

logger = logging.getLogger(__name__)

GATES = ("size", "grayscale", "dedup", "sharpness", "histogram")
REPORT_HEADER = "image_id\tverdict\tgate\tstatistics"

# Rec. 601 luma weights in thousandths, so luminance stays integral
_LUMA_MILLI = np.array([299, 587, 114], dtype=np.int64)


@dataclass(frozen=True)
class FilterThresholds:
    min_dim: int = 64
    min_bytes: int = 4096
    var_threshold: float = 4.0
    max_hamming: int = 8
    lap_var_threshold: float = 25.0
    spike_bound: float = 0.5
    entropy_bounds: tuple[float, float] = (1.0, 7.9)

    def __post_init__(self):
        if not 0 <= self.max_hamming <= 64:
            raise ValueError("max_hamming must be in [0, 64]")
        lo, hi = self.entropy_bounds
        if lo > hi:
            raise ValueError("entropy bounds must be ordered")


@dataclass(frozen=True)
class GateResult:
    name: str
    passed: bool
    statistic: float | dict


@dataclass(frozen=True)
class QualityReport:
    image_id: str
    gate_results: tuple[GateResult, ...]
    verdict: str  # "keep" or "reject"
    reason: str = ""

    @property
    def kept(self) -> bool:
        return self.verdict == "keep"

    @property
    def failed_gate(self) -> str | None:
        for g in self.gate_results:
            if not g.passed:
                return g.name
        return None if self.kept else self.reason.split(":", 1)[0]


@dataclass(frozen=True)
class PerceptualHash:
    bits: int
    algorithm: str = "dhash-9x8"

    def distance(self, other: "PerceptualHash") -> int:
        return hamming(self, other)

    def __str__(self):
        return f"{self.bits:016x}"


def hamming(a: PerceptualHash, b: PerceptualHash) -> int:
    return bin(a.bits ^ b.bits).count("1")


def _rgb(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] < 3:
        raise NotThreeChannel(f"expected an (H, W, 3) image, got shape {img.shape}")
    return img[..., :3]


def luminance(image) -> np.ndarray:
    """Rec. 601 luminance on the 0-255 scale; 2-D inputs pass through."""
    img = np.asarray(image)
    if img.ndim == 2:
        return img.astype(np.float64)
    return _rgb(img).astype(np.float64) @ np.array([0.299, 0.587, 0.114])


def _luminance_milli(image) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        return img.astype(np.int64) * 1000
    return _rgb(img).astype(np.int64) @ _LUMA_MILLI


# ---------------------------------------------------------------------------
# gates


def size_gate(width: int, height: int, file_bytes: int | None, min_dim: int = 64,
              min_bytes: int = 4096) -> bool:
    if width <= 0 or height <= 0:
        raise ValueError("image dimensions must be positive")
    if min(width, height) < min_dim:
        return False
    return file_bytes is None or file_bytes >= min_bytes


def grayscale_gate(image, var_threshold: float = 4.0) -> tuple[bool, float]:
    """Mean over pixels of the variance across the R, G, B values."""
    rgb = _rgb(image).astype(np.float64)
    stat = float(np.mean(np.var(rgb, axis=2)))
    return stat >= var_threshold, stat


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Integer box-filter overlaps: entry (j, x) is the overlap of input pixel x
    with output cell j, measured in units of 1/n_out pixel."""
    j = np.arange(n_out)[:, None]
    x = np.arange(n_in)[None, :]
    lo = np.maximum(j * n_in, x * n_out)
    hi = np.minimum((j + 1) * n_in, (x + 1) * n_out)
    return np.clip(hi - lo, 0, None).astype(np.int64)


def perceptual_hash(image) -> PerceptualHash:
    """64-bit difference hash on a 9x8 area-downscaled luminance image.

    The downscale is done in exact integer arithmetic, so any positive integer
    gain or uniform offset (without clipping) leaves the hash unchanged.
    """
    if isinstance(image, (str, os.PathLike)):
        image = read_image(image)
    lum = _luminance_milli(image)
    h, w = lum.shape
    if h < 1 or w < 1:
        raise DecodeError("empty raster")
    small = _area_weights(h, 8) @ lum @ _area_weights(w, 9).T
    diff = small[:, :-1] < small[:, 1:]
    bits = 0
    for b in diff.ravel():
        bits = (bits << 1) | int(b)
    return PerceptualHash(bits)


def dedup(hashes, max_hamming: int = 8) -> list[int]:
    """Greedy first-wins deduplication; returns kept indices in input order."""
    if not 0 <= max_hamming <= 64:
        raise ValueError("max_hamming must be in [0, 64]")
    kept: list[int] = []
    for i, h in enumerate(hashes):
        if all(hamming(h, hashes[k]) > max_hamming for k in kept):
            kept.append(i)
    return kept


def laplacian_variance(image) -> float:
    lum = luminance(image)
    if lum.shape[0] < 3 or lum.shape[1] < 3:
        raise TooSmall(f"image {lum.shape[1]}x{lum.shape[0]} is below 3x3")
    c = lum[1:-1, 1:-1]
    lap = 4.0 * c - lum[:-2, 1:-1] - lum[2:, 1:-1] - lum[1:-1, :-2] - lum[1:-1, 2:]
    return float(np.var(lap))


def sharpness_gate(image, lap_var_threshold: float = 25.0) -> tuple[bool, float]:
    stat = laplacian_variance(image)
    return stat >= lap_var_threshold, stat


def histogram_stats(image) -> dict:
    lum = np.clip(np.rint(luminance(image)), 0, 255).astype(np.int64)
    hist = np.bincount(lum.ravel(), minlength=256)
    p = hist / hist.sum()
    nz = p[p > 0]
    entropy = float(-np.sum(nz * np.log2(nz)))
    return {"spike": float(p.max()), "entropy": entropy + 0.0}


def histogram_gate(image, flatness_bounds=(1.0, 7.9), spike_bound: float = 0.5) -> tuple[bool, dict]:
    stats = histogram_stats(image)
    lo, hi = flatness_bounds
    ok = stats["spike"] <= spike_bound and lo <= stats["entropy"] <= hi
    return ok, stats


# ---------------------------------------------------------------------------
# batch pipeline


def read_manifest(path) -> list[str]:
    """One image path per line; blank lines and ``#`` comments are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


@dataclass
class _Stage:
    image_id: str
    image: np.ndarray | None = None
    results: list = field(default_factory=list)
    reason: str = ""
    hash: PerceptualHash | None = None

    @property
    def alive(self) -> bool:
        return not self.reason


def _resolve(image_id: str, base_dir) -> Path:
    p = Path(image_id)
    if base_dir is not None and not p.is_absolute():
        p = Path(base_dir) / p
    return p


def _early_gates(image_id: str, base_dir, th: FilterThresholds) -> _Stage:
    st = _Stage(image_id)
    path = _resolve(image_id, base_dir)
    try:
        nbytes = path.stat().st_size
        img = read_image(path)
    except (OSError, DecodeError) as exc:
        st.reason = f"io: {exc}"
        return st
    h, w = img.shape[:2]
    ok = size_gate(w, h, nbytes, th.min_dim, th.min_bytes)
    st.results.append(GateResult("size", ok, {"min_dim": min(w, h), "bytes": nbytes}))
    if not ok:
        st.reason = "size"
        return st
    ok, stat = grayscale_gate(img, th.var_threshold)
    st.results.append(GateResult("grayscale", ok, stat))
    if not ok:
        st.reason = "grayscale"
        return st
    st.image = img
    st.hash = perceptual_hash(img)
    return st


def _late_gates(st: _Stage, th: FilterThresholds) -> _Stage:
    try:
        ok, stat = sharpness_gate(st.image, th.lap_var_threshold)
    except TooSmall as exc:
        ok, stat = False, float("nan")
        logger.warning("%s: %s", st.image_id, exc)
    st.results.append(GateResult("sharpness", ok, stat))
    if not ok:
        st.reason = "sharpness"
        return st
    ok, stats = histogram_gate(st.image, th.entropy_bounds, th.spike_bound)
    st.results.append(GateResult("histogram", ok, stats))
    if not ok:
        st.reason = "histogram"
    return st


def run_filter_pipeline(image_ids, thresholds: FilterThresholds | None = None, *, base_dir=None,
                        exclusions=None, dedup_mask=None, workers: int = 1) -> list[QualityReport]:
    """Gate every image and return one report per input, in input order.

    ``thresholds`` is one :class:`FilterThresholds` or a sequence with one
    entry per image.  ``exclusions`` is an optional set of image ids rejected
    up front (a precomputed refinement list).  ``dedup_mask`` optionally restricts the
    dedup stage to the flagged inputs; the others skip it.
    """
    ids = list(image_ids)
    if thresholds is None or isinstance(thresholds, FilterThresholds):
        ths = [thresholds or FilterThresholds()] * len(ids)
    else:
        ths = list(thresholds)
        if len(ths) != len(ids):
            raise ValueError("one FilterThresholds per image is required")
    excluded = set(exclusions or ())
    mask = [True] * len(ids) if dedup_mask is None else [bool(m) for m in dedup_mask]
    if len(mask) != len(ids):
        raise ValueError("dedup_mask length must match the image list")

    def early(i):
        if ids[i] in excluded:
            return _Stage(ids[i], reason="excluded")
        return _early_gates(ids[i], base_dir, ths[i])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        stages = list(pool.map(early, range(len(ids))))

        # sequential greedy reduction over the survivors
        kept_hashes: list[tuple[str, PerceptualHash]] = []
        for st, m, th in zip(stages, mask, ths):
            if not st.alive or not m:
                continue
            dists = [(hamming(st.hash, h), kid) for kid, h in kept_hashes]
            nearest = min(dists, default=(64, ""))
            ok = not dists or nearest[0] > th.max_hamming
            st.results.append(GateResult("dedup", ok, nearest[0]))
            if ok:
                kept_hashes.append((st.image_id, st.hash))
            else:
                st.reason = f"dedup: near-duplicate of {nearest[1]}"

        alive = [i for i, st in enumerate(stages) if st.alive]
        list(pool.map(lambda i: _late_gates(stages[i], ths[i]), alive))

    reports = []
    for st in stages:
        verdict = "keep" if st.alive else "reject"
        reports.append(QualityReport(st.image_id, tuple(st.results), verdict, st.reason))
    return reports


def _fmt_stat(v) -> str:
    if isinstance(v, dict):
        return ",".join(f"{k}={_fmt_stat(v[k])}" for k in sorted(v))
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "nan" if math.isnan(v) else repr(v)


def format_report(reports) -> str:
    """Tab-separated report: id, verdict, failing gate (or ``-``), per-gate statistics."""
    lines = [REPORT_HEADER]
    for r in reports:
        stats = ";".join(f"{g.name}={_fmt_stat(g.statistic)}" for g in r.gate_results)
        gate = r.failed_gate or "-"
        lines.append(f"{r.image_id}\t{r.verdict}\t{gate}\t{stats or '-'}")
    return "\n".join(lines) + "\n"


def write_report(path, reports) -> None:
    Path(path).write_text(format_report(reports), encoding="utf-8")

"""Independent brute-force reference implementations used by the tests.

Each function here is written from the definition with plain loops and does
not call into the code it checks.
"""

import math

import numpy as np


def scalar_project(p, fx, fy, cx, cy):
    x, y, z = (float(c) for c in p)
    return fx * x / z + cx, fy * y / z + cy


def scalar_residuals(R, t, intr, points, pixels):
    out = []
    for P, obs in zip(points, pixels):
        q = [sum(R[r][c] * P[c] for c in range(3)) + t[r] for r in range(3)]
        if q[2] <= 0:
            out.append(math.inf)
            continue
        u, v = scalar_project(q, intr.fx, intr.fy, intr.cx, intr.cy)
        out.append(math.hypot(u - obs[0], v - obs[1]))
    return out


def lstsq_affine(d1, d2):
    """(s, b) from an explicit 2x2 normal-equation inverse."""
    n = len(d1)
    sx, sy = sum(d1), sum(d2)
    sxx = sum(a * a for a in d1)
    sxy = sum(a * b for a, b in zip(d1, d2))
    det = n * sxx - sx * sx
    s = (n * sxy - sx * sy) / det
    b = (sxx * sy - sx * sxy) / det
    return s, b


def brute_zbuffer(cam_points, colors, positions, intr, radius):
    """Sequential per-point z-buffer with the full (depth, position, colour, index) key.

    ``cam_points`` are camera-frame coordinates; ``radius`` is a scalar disc
    radius in pixels.  Returns (rgb, depth, covered).
    """
    H, W = intr.height, intr.width
    best = {}
    for i, q in enumerate(cam_points):
        z = float(q[2])
        if not z > 1e-9:
            continue
        u = intr.fx * q[0] / z + intr.cx
        v = intr.fy * q[1] / z + intr.cy
        nu, nv = int(np.rint(u)), int(np.rint(v))
        key = (z, *map(float, positions[i]), *map(int, colors[i]), i)
        # scan the disc's bounding box plus the nearest pixel
        ys = range(max(0, int(np.floor(v - radius)) - 1), min(H, int(np.ceil(v + radius)) + 2))
        xs = range(max(0, int(np.floor(u - radius)) - 1), min(W, int(np.ceil(u + radius)) + 2))
        for y in ys:
            for x in xs:
                inside = (x - u) ** 2 + (y - v) ** 2 <= radius * radius or (x == nu and y == nv)
                if inside and ((y, x) not in best or key < best[(y, x)]):
                    best[(y, x)] = key
    rgb = np.zeros((H, W, 3), dtype=np.uint8)
    depth = np.zeros((H, W))
    cov = np.zeros((H, W), dtype=bool)
    for (y, x), key in best.items():
        rgb[y, x] = colors[key[-1]]
        depth[y, x] = key[0]
        cov[y, x] = True
    return rgb, depth, cov


def laplacian_variance_loop(gray):
    H, W = gray.shape
    vals = []
    for y in range(1, H - 1):
        for x in range(1, W - 1):
            vals.append(4 * gray[y, x] - gray[y - 1, x] - gray[y + 1, x] - gray[y, x - 1] - gray[y, x + 1])
    m = sum(vals) / len(vals)
    return sum((a - m) ** 2 for a in vals) / len(vals)


def mean_sq_distance(uv, expected):
    tot = 0.0
    for (a, b), (c, d) in zip(uv, expected):
        tot += (a - c) ** 2 + (b - d) ** 2
    return tot / len(uv)


def psnr_loop(a, b, peak):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    mse = sum((x - y) ** 2 for x, y in zip(a.tolist(), b.tolist())) / a.size
    return 10 * math.log10(peak * peak / mse)

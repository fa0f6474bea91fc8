"""Independent reference implementations used to cross-check the library.

Nothing here imports the package under test.  Each helper is a slow,
obviously-correct variant of some production computation: rasterized set
areas via an even-odd crossing-number test, shoelace areas, scalar
ray/triangle and ray/box intersection, brute-force grid binning, and
central finite differences.
"""

from __future__ import annotations

import math

import numpy as np


# ---------------------------------------------------------------------------
# Rasterized polygon-set algebra (even-odd convention, cell-center sampling)
# ---------------------------------------------------------------------------


def ring_crossings(px: np.ndarray, py: np.ndarray, ring: np.ndarray) -> np.ndarray:
    """Even-odd point-in-ring test for arrays of query points."""
    inside = np.zeros(px.shape, dtype=bool)
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        cond = (y0 > py) != (y1 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
        hit = cond & (px < xint)
        inside ^= hit
    return inside


def points_in_rings(px: np.ndarray, py: np.ndarray, rings) -> np.ndarray:
    """Even-odd membership across a list of rings (XOR of per-ring tests)."""
    inside = np.zeros(px.shape, dtype=bool)
    for ring in rings:
        inside ^= ring_crossings(px, py, np.asarray(ring, dtype=float))
    return inside


def _grid(bounds, step):
    xmin, ymin, xmax, ymax = bounds
    xs = np.arange(xmin + 0.5 * step, xmax, step)
    ys = np.arange(ymin + 0.5 * step, ymax, step)
    return np.meshgrid(xs, ys, indexing="ij")


def bounds_of(rings, pad=0.1):
    arrs = [np.asarray(r, dtype=float) for r in rings if len(r)]
    if not arrs:
        return (0.0, 0.0, 1.0, 1.0)
    allv = np.vstack(arrs)
    return (
        allv[:, 0].min() - pad,
        allv[:, 1].min() - pad,
        allv[:, 0].max() + pad,
        allv[:, 1].max() + pad,
    )


def raster_area(rings, step=0.001, bounds=None) -> float:
    """Area of an even-odd polygon set by counting covered grid cells."""
    if not rings:
        return 0.0
    if bounds is None:
        bounds = bounds_of(rings)
    px, py = _grid(bounds, step)
    return float(np.count_nonzero(points_in_rings(px, py, rings))) * step * step


def raster_boolean_area(rings_a, rings_b, kind, step=0.001, bounds=None) -> float:
    """Area of a boolean combination computed on masks, not geometry."""
    if bounds is None:
        bounds = bounds_of(list(rings_a) + list(rings_b))
    px, py = _grid(bounds, step)
    ina = points_in_rings(px, py, rings_a)
    inb = points_in_rings(px, py, rings_b)
    if kind == "intersection":
        mask = ina & inb
    elif kind == "union":
        mask = ina | inb
    elif kind == "difference":
        mask = ina & ~inb
    else:
        raise ValueError(kind)
    return float(np.count_nonzero(mask)) * step * step


def shoelace_area(ring) -> float:
    arr = np.asarray(ring, dtype=float)
    x, y = arr[:, 0], arr[:, 1]
    return abs(0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def polygon_centroid(ring) -> tuple[float, float]:
    arr = np.asarray(ring, dtype=float)
    x, y = arr[:, 0], arr[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * np.sum(cross)
    cx = float(np.sum((x + xn) * cross) / (6.0 * a))
    cy = float(np.sum((y + yn) * cross) / (6.0 * a))
    return cx, cy


# ---------------------------------------------------------------------------
# Scalar ray intersection references
# ---------------------------------------------------------------------------


def ray_triangle(origin, direction, v0, v1, v2, eps=1e-12):
    """Möller–Trumbore for a single ray and triangle; returns t or None."""
    origin = np.asarray(origin, dtype=float)
    direction = np.asarray(direction, dtype=float)
    e1 = np.asarray(v1, dtype=float) - v0
    e2 = np.asarray(v2, dtype=float) - v0
    pvec = np.cross(direction, e2)
    det = float(np.dot(e1, pvec))
    if abs(det) < eps:
        return None
    inv = 1.0 / det
    tvec = origin - v0
    u = float(np.dot(tvec, pvec)) * inv
    if u < -1e-12 or u > 1.0 + 1e-12:
        return None
    qvec = np.cross(tvec, e1)
    v = float(np.dot(direction, qvec)) * inv
    if v < -1e-12 or u + v > 1.0 + 1e-12:
        return None
    t = float(np.dot(e2, qvec)) * inv
    if t <= eps:
        return None
    return t


def ray_mesh_hits(origin, direction, vertices, triangles):
    """All positive ray-mesh intersection distances, sorted ascending."""
    ts = []
    for tri in triangles:
        t = ray_triangle(origin, direction, vertices[tri[0]], vertices[tri[1]], vertices[tri[2]])
        if t is not None:
            ts.append(t)
    return sorted(ts)


def ray_aabb(origin, direction, lo, hi):
    """Slab-method ray versus axis-aligned box; entry distance or None."""
    tmin, tmax = 0.0, math.inf
    for k in range(3):
        o, d = origin[k], direction[k]
        if abs(d) < 1e-15:
            if o < lo[k] or o > hi[k]:
                return None
            continue
        t1, t2 = (lo[k] - o) / d, (hi[k] - o) / d
        if t1 > t2:
            t1, t2 = t2, t1
        tmin, tmax = max(tmin, t1), min(tmax, t2)
        if tmin > tmax:
            return None
    return tmin if tmin > 1e-12 else (tmax if tmax > 1e-12 else None)


# ---------------------------------------------------------------------------
# Grid binning and finite differences
# ---------------------------------------------------------------------------


def brute_force_bins(points_xy, origin, cell, width, height):
    """Per-cell point counts via a plain double loop."""
    counts = np.zeros((width, height), dtype=int)
    for x, y in points_xy:
        i = int(math.floor((x - origin[0]) / cell))
        j = int(math.floor((y - origin[1]) / cell))
        if 0 <= i < width and 0 <= j < height:
            counts[i, j] += 1
    return counts


def central_diff(fn, x0: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central finite-difference gradient of a scalar function."""
    x0 = np.asarray(x0, dtype=float)
    g = np.zeros_like(x0)
    flat = x0.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(x0)
        flat[i] = orig - h
        fm = fn(x0)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g

"""Planar geometry for bird's-eye-view footprints.

Simple CCW polygons, oriented boxes, rigid 2D motions, and robust boolean
set operations with snap rounding.  All coordinates are metres, all angles
radians.  Lists of polygons are interpreted with an even-odd convention:
a ring nested inside another ring is a hole.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import shapely
import shapely.geometry as sgeom

EPS_GEO = 1e-6              # snap-rounding grid for boolean results (m)
SLIVER_AREA = EPS_GEO ** 2  # rings below this area are numerical dust


def _shoelace(arr: np.ndarray) -> float:
    """Signed area of a vertex ring (positive = counter-clockwise)."""
    x, y = arr[:, 0], arr[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class Polygon:
    """Simple polygon stored as a counter-clockwise vertex ring."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise ValueError("polygon needs at least 3 vertices")
        arr = np.asarray(self.vertices, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise ValueError("polygon vertices must be finite")
        if _shoelace(arr) < 0.0:  # normalize orientation to CCW
            object.__setattr__(
                self, "vertices", tuple((float(x), float(y)) for x, y in arr[::-1])
            )
        else:
            object.__setattr__(
                self, "vertices", tuple((float(x), float(y)) for x, y in arr)
            )

    @classmethod
    def from_array(cls, arr) -> "Polygon":
        return cls(tuple((float(x), float(y)) for x, y in np.asarray(arr, dtype=float)))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    @property
    def area(self) -> float:
        return abs(_shoelace(self.array))

    def centroid(self) -> tuple[float, float]:
        c = self.shapely.centroid
        return (c.x, c.y)

    @property
    def shapely(self) -> sgeom.Polygon:
        return sgeom.Polygon(self.vertices)

    def to_json(self) -> dict:
        return {"vertices": [[x, y] for x, y in self.vertices]}

    @classmethod
    def from_json(cls, obj: dict) -> "Polygon":
        return cls.from_array(obj["vertices"])


def _norm_angle(a: float) -> float:
    """Map an angle to [-pi, pi)."""
    return float((a + math.pi) % (2.0 * math.pi) - math.pi)


@dataclass(frozen=True)
class OrientedBox:
    """Oriented BEV rectangle; canonical form has length >= width."""

    center: tuple[float, float]
    length: float
    width: float
    yaw: float

    def __post_init__(self):
        l, w, yaw = self.length, self.width, self.yaw
        if not (l > 0 and w > 0):
            raise ValueError("box dimensions must be positive")
        if w > l:
            l, w = w, l
            yaw = yaw + 0.5 * math.pi
        object.__setattr__(self, "length", float(l))
        object.__setattr__(self, "width", float(w))
        object.__setattr__(self, "yaw", _norm_angle(yaw))
        object.__setattr__(
            self, "center", (float(self.center[0]), float(self.center[1]))
        )

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self) -> np.ndarray:
        """4x2 array of corner coordinates, counter-clockwise."""
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.asarray(self.center)

    def footprint(self) -> Polygon:
        return Polygon.from_array(self.corners())

    def inflate(self, margin: float) -> "OrientedBox":
        """Grow length and width by `margin` on each side."""
        return OrientedBox(
            self.center, self.length + 2 * margin, self.width + 2 * margin, self.yaw
        )

    def to_json(self) -> dict:
        return {
            "center": [self.center[0], self.center[1]],
            "length": self.length,
            "width": self.width,
            "yaw": self.yaw,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "OrientedBox":
        return cls(tuple(obj["center"]), obj["length"], obj["width"], obj["yaw"])


@dataclass(frozen=True)
class Transform2D:
    """Rigid planar motion p' = R(rotation) p + translation.

    The rotation field is deliberately NOT wrapped into [-pi, pi): these
    transforms double as motion rates (rotation per time unit), and
    rescaling a rate must round-trip exactly.  Use normalized() when a
    wrapped pose delta is wanted.
    """

    rotation: float
    translation: tuple[float, float]

    @classmethod
    def identity(cls) -> "Transform2D":
        return cls(0.0, (0.0, 0.0))

    def normalized(self) -> "Transform2D":
        return Transform2D(_norm_angle(self.rotation), self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        rot = np.array([[c, -s], [s, c]])
        return pts @ rot.T + np.asarray(self.translation)

    def compose(self, other: "Transform2D") -> "Transform2D":
        """Return the transform equivalent to applying `other`, then self."""
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        ox, oy = other.translation
        tx = c * ox - s * oy + self.translation[0]
        ty = s * ox + c * oy + self.translation[1]
        return Transform2D(self.rotation + other.rotation, (tx, ty))

    def to_json(self) -> dict:
        return {"rot": self.rotation, "dx": self.translation[0], "dy": self.translation[1]}

    @classmethod
    def from_json(cls, obj: dict) -> "Transform2D":
        return cls(obj["rot"], (obj["dx"], obj["dy"]))


def apply_transform(p: Polygon, t: Transform2D) -> Polygon:
    """Rigidly move a polygon (rotation about the origin, then translation)."""
    return Polygon.from_array(t.apply(p.array))


def transform_box(box: OrientedBox, t: Transform2D) -> OrientedBox:
    cx, cy = t.apply(np.asarray([box.center]))[0]
    return OrientedBox((cx, cy), box.length, box.width, box.yaw + t.rotation)


def scale_transform(t: Transform2D, factor: float) -> Transform2D:
    """Scale a motion to a different time base: rotation and translation x factor."""
    if not math.isfinite(factor):
        raise ValueError("scale factor must be finite")
    return Transform2D(
        t.rotation * factor, (t.translation[0] * factor, t.translation[1] * factor)
    )


# ---------------------------------------------------------------------------
# Polygon-set algebra.  Shapely (GEOS) does the clipping; this layer owns the
# even-odd ring convention, snap rounding, and sliver filtering.
# ---------------------------------------------------------------------------


class Region:
    """A (possibly empty, possibly multi-part, possibly holed) planar set."""

    __slots__ = ("geom",)

    def __init__(self, geom):
        self.geom = geom

    @classmethod
    def empty(cls) -> "Region":
        return cls(sgeom.Polygon())

    @classmethod
    def from_polygons(cls, polys) -> "Region":
        return cls(_build_geom(polys))

    @classmethod
    def from_shapely(cls, geom) -> "Region":
        return cls(_clean(geom))

    @property
    def area(self) -> float:
        return float(self.geom.area)

    @property
    def is_empty(self) -> bool:
        return self.geom.is_empty or self.geom.area <= SLIVER_AREA

    def intersection(self, other: "Region") -> "Region":
        return Region(_clean(self.geom.intersection(other.geom)))

    def union(self, other: "Region") -> "Region":
        return Region(_clean(self.geom.union(other.geom)))

    def difference(self, other: "Region") -> "Region":
        return Region(_clean(self.geom.difference(other.geom)))

    def components(self) -> list["Region"]:
        """Connected parts of the region, each as its own Region."""
        return [Region(g) for g in _iter_polygons(self.geom) if g.area > SLIVER_AREA]

    def to_polygons(self) -> list[Polygon]:
        """Export as CCW rings; holes become separate CCW rings (even-odd)."""
        out: list[Polygon] = []
        for poly in _iter_polygons(self.geom):
            if poly.area <= SLIVER_AREA:
                continue
            out.append(Polygon.from_array(_ring_coords(poly.exterior)))
            for hole in poly.interiors:
                ring = sgeom.Polygon(hole)
                if ring.area > SLIVER_AREA:
                    out.append(Polygon.from_array(_ring_coords(hole)))
        return out


def _ring_coords(ring) -> np.ndarray:
    coords = np.asarray(ring.coords, dtype=float)
    return coords[:-1]  # shapely rings repeat the first vertex


def _iter_polygons(geom):
    if geom.is_empty:
        return
    if isinstance(geom, sgeom.Polygon):
        yield geom
    elif isinstance(geom, (sgeom.MultiPolygon, sgeom.GeometryCollection)):
        for g in geom.geoms:
            yield from _iter_polygons(g)


def _clean(geom):
    """Snap-round to the EPS_GEO grid and drop degenerate pieces."""
    if geom.is_empty:
        return geom
    geom = shapely.set_precision(geom, EPS_GEO)
    if not geom.is_valid:
        geom = shapely.make_valid(geom)
    parts = [g for g in _iter_polygons(geom) if g.area > SLIVER_AREA]
    if not parts:
        return sgeom.Polygon()
    if len(parts) == 1:
        return parts[0]
    return sgeom.MultiPolygon(parts)


def _as_polygon_list(polys) -> list[Polygon]:
    if polys is None:
        return []
    if isinstance(polys, Polygon):
        return [polys]
    return list(polys)


def _build_geom(polys):
    """Assemble shapely geometry from rings under the even-odd convention."""
    rings = []
    for p in _as_polygon_list(polys):
        sp = sgeom.Polygon(p.vertices)
        if sp.area <= SLIVER_AREA:
            continue  # degenerate inputs are dropped, not rejected
        if not sp.is_valid:
            for part in _iter_polygons(shapely.make_valid(sp)):
                if part.area > SLIVER_AREA:
                    rings.append(sgeom.Polygon(_ring_coords(part.exterior)))
            continue
        rings.append(sp)
    if not rings:
        return sgeom.Polygon()
    rings.sort(key=lambda g: g.area, reverse=True)
    reps = [g.representative_point() for g in rings]
    depth = [0] * len(rings)
    parent = [-1] * len(rings)
    for i in range(len(rings)):
        # smallest ring strictly containing ring i = last enclosing candidate
        for j in range(i - 1, -1, -1):
            if rings[j].contains(reps[i]):
                parent[i] = j
                depth[i] = depth[j] + 1
                break
    shells = []
    for i, g in enumerate(rings):
        if depth[i] % 2 == 0:
            holes = [
                _ring_coords(rings[k].exterior)
                for k in range(len(rings))
                if parent[k] == i
            ]
            shells.append(sgeom.Polygon(_ring_coords(g.exterior), holes))
    return _clean(shapely.unary_union(shells))


def boolean_op(a, b, kind: str) -> list[Polygon]:
    """Set operation on two polygon sets; returns CCW rings, even-odd holes."""
    ra = Region.from_polygons(a)
    rb = Region.from_polygons(b)
    if kind == "intersection":
        out = ra.intersection(rb)
    elif kind == "union":
        out = ra.union(rb)
    elif kind == "difference":
        out = ra.difference(rb)
    else:
        raise ValueError(f"unknown boolean kind: {kind!r}")
    return out.to_polygons()


def area(polys) -> float:
    """Set-theoretic area of a polygon list (even-odd convention)."""
    if isinstance(polys, Region):
        return polys.area
    return Region.from_polygons(polys).area


def convex_hull(points) -> Polygon:
    """Minimal convex polygon containing all points.

    Raises ValueError for collinear/degenerate input, which callers treat
    as an unclusterable region.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise ValueError("need at least 3 points for a hull")
    hull = sgeom.MultiPoint(pts).convex_hull
    if not isinstance(hull, sgeom.Polygon) or hull.area <= SLIVER_AREA:
        raise ValueError("degenerate (collinear) point set has no 2D hull")
    return Polygon.from_array(_ring_coords(hull.exterior))


def min_area_rect(points) -> OrientedBox:
    """Minimum-area oriented rectangle via rotating calipers on the hull."""
    pts = np.unique(np.asarray(points, dtype=float), axis=0)
    if pts.shape[0] == 1:
        return OrientedBox((pts[0, 0], pts[0, 1]), 1e-3, 1e-3, 0.0)
    try:
        hull = convex_hull(pts).array
    except ValueError:
        # collinear: orient along the dominant direction
        d = pts - pts.mean(axis=0)
        ang = 0.5 * math.atan2(
            2.0 * float(np.sum(d[:, 0] * d[:, 1])),
            float(np.sum(d[:, 0] ** 2 - d[:, 1] ** 2)),
        )
        hull = pts
        angles = [ang]
    else:
        edges = np.roll(hull, -1, axis=0) - hull
        angles = list(np.arctan2(edges[:, 1], edges[:, 0]))
    best = None
    for ang in angles:
        c, s = math.cos(ang), math.sin(ang)
        rot = np.array([[c, s], [-s, c]])  # rotate by -ang
        proj = hull @ rot.T
        lo, hi = proj.min(axis=0), proj.max(axis=0)
        ext = hi - lo
        a = ext[0] * ext[1]
        if best is None or a < best[0]:
            mid = 0.5 * (lo + hi)
            center = np.array([[c, -s], [s, c]]) @ mid
            best = (a, center, ext, ang)
    _, center, ext, ang = best
    return OrientedBox(
        (center[0], center[1]), max(ext[0], 1e-3), max(ext[1], 1e-3), ang
    )


def box_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two box footprints (pure BEV, height ignored)."""
    inter = area(boolean_op([a.footprint()], [b.footprint()], "intersection"))
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, max(0.0, inter / union))

"""Cross-vehicle occupancy-map defense.

Each vehicle condenses its sweep into a polygonal occupancy map — occupied
hulls with per-track motion, conservative free wedges, everything else
unknown — and broadcasts it.  A receiver synchronizes the maps to its own
timestamp and runs two checks: occupied-vs-free conflicts between vehicles,
and perception results that disagree with the merged map (a box over free
space, or an on-road occupied region no box claims).

Free space is claimed only where consecutive all-ground rings prove the
sweep passed through: per 1-degree sector, a maximal run of ground-only
rings yields a wedge from the furthest point of its innermost ring to the
closest point of its outermost ring (from the sensor itself when the run
starts at ring 0), rejected outright if any object return lands inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import shapely
import shapely.geometry as sgeom

from .cluster import fixed_radius_clusters
from .geometry import (
    EPS_GEO,
    Polygon,
    Region,
    Transform2D,
    apply_transform,
    scale_transform,
)
from .lidar import PointCloud, Pose3

_RANSAC_SEED = 20


@dataclass(frozen=True)
class CadParams:
    """Knobs of map generation (segmentation, sectors, tracking)."""

    ground_tol: float = 0.15          # RANSAC inlier band (m)
    ransac_iters: int = 40
    max_ground_slope: float = 0.2     # |dz/dxy| guard on candidate planes
    cluster_radius: float = 1.0
    min_cluster_size: int = 5
    n_sectors: int = 360
    range_limit: float = 50.0
    affinity_gate: float = 3.0        # centroid distance gate for tracking (m)
    # A single visible face projects to a zero-area line in 2D, so cluster
    # hulls are swelled outward; the free region is eroded a little further
    # than that on every boundary (not just wedge ends — a ray grazing along
    # a face lays free space at near-zero lateral clearance), keeping benign
    # maps conflict-free under ~0.1 m localization noise.
    obstacle_inflation: float = 0.25
    free_margin: float = 0.35


@dataclass(frozen=True)
class CadThresholds:
    """Minimum conflict areas (m^2) before an alert is raised."""

    sigma_occ: float = 0.5
    sigma_spoof: float = 0.5
    sigma_remove: float = 0.5

    def __post_init__(self):
        if min(self.sigma_occ, self.sigma_spoof, self.sigma_remove) < 0:
            raise ValueError("thresholds must be non-negative")


ALERT_KINDS = ("occupancy_conflict", "spoof", "remove")


@dataclass(frozen=True)
class Alert:
    kind: str
    region: tuple[Polygon, ...]
    area: float
    vehicle_ids: tuple[int, ...]
    frame_index: int

    def __post_init__(self):
        if self.kind not in ALERT_KINDS:
            raise ValueError(f"unknown alert kind {self.kind!r}")
        if self.area < 0:
            raise ValueError("alert area must be non-negative")

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "area": round(self.area, 6),
            "frame": self.frame_index,
            "vehicles": list(self.vehicle_ids),
            "region": [p.to_json() for p in self.region],
        }


@dataclass(frozen=True)
class OccupiedRegion:
    polygon: Polygon
    track_id: int
    motion: Transform2D  # per second, world frame


@dataclass
class OccupancyMap:
    """One vehicle's (occupied, free) claim; the remainder is unknown."""

    vehicle_id: int
    timestamp_ms: float
    occupied: list[OccupiedRegion]
    free: list[Polygon]
    sensor_pose: Pose3
    range_limit: float = 50.0

    def occupied_region(self) -> Region:
        return Region.from_polygons([o.polygon for o in self.occupied])

    def free_region(self) -> Region:
        return Region.from_polygons(self.free)

    def to_wire(self) -> dict:
        """Centimeter-quantized JSON payload."""
        return {
            "vid": self.vehicle_id,
            "t_ms": self.timestamp_ms,
            "occupied": [
                {
                    "poly": _quantize(o.polygon),
                    "track": o.track_id,
                    "motion": o.motion.to_json(),
                }
                for o in self.occupied
            ],
            "free": [_quantize(p) for p in self.free],
            "pose": self.sensor_pose.to_json(),
            "range": self.range_limit,
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "OccupancyMap":
        occupied = [
            OccupiedRegion(
                _dequantize(entry["poly"]),
                int(entry["track"]),
                Transform2D.from_json(entry["motion"]),
            )
            for entry in obj["occupied"]
        ]
        free = [_dequantize(p) for p in obj["free"]]
        # quantization can nudge shared boundaries into overlap; re-carve
        occ = Region.from_polygons([o.polygon for o in occupied])
        free = Region.from_polygons(free).difference(occ).to_polygons()
        return cls(
            int(obj["vid"]),
            float(obj["t_ms"]),
            occupied,
            free,
            Pose3.from_json(obj["pose"]),
            float(obj["range"]),
        )


def _quantize(p: Polygon) -> list[list[int]]:
    return [[int(round(x * 100)), int(round(y * 100))] for x, y in p.array]


def _dequantize(coords: list[list[int]]) -> Polygon:
    return Polygon.from_array(np.asarray(coords, dtype=float) / 100.0)


# ---------------------------------------------------------------------------
# Map generation
# ---------------------------------------------------------------------------


@dataclass
class PointSegmentation:
    """Per-point labels: on-road mask, ground indices, object clusters."""

    onroad: np.ndarray            # (N,) bool
    ground: np.ndarray            # indices of ground inliers (on-road)
    clusters: list[np.ndarray]    # index arrays, on-road non-ground

    def object_indices(self) -> np.ndarray:
        """All on-road non-ground returns (clustered or stray)."""
        mask = self.onroad.copy()
        mask[self.ground] = False
        return np.nonzero(mask)[0]


def segment_points(
    cloud: PointCloud, road: Polygon, params: CadParams = CadParams()
) -> PointSegmentation:
    """Drop off-road returns, fit the ground plane, cluster the rest."""
    w = cloud.world_points()
    n = len(w)
    if n == 0:
        return PointSegmentation(np.zeros(0, bool), np.zeros(0, np.int64), [])
    onroad = shapely.contains_xy(road.shapely, w[:, 0], w[:, 1])
    idx = np.nonzero(onroad)[0]
    if len(idx) < 3:
        return PointSegmentation(onroad, np.zeros(0, np.int64), [])
    plane = _ransac_ground(w[idx], params)
    if plane is None:
        return PointSegmentation(onroad, np.zeros(0, np.int64), [])
    a, b, c = plane
    resid = np.abs(w[idx, 2] - (a * w[idx, 0] + b * w[idx, 1] + c))
    ground = idx[resid <= params.ground_tol]
    obj = idx[resid > params.ground_tol]
    clusters = [
        obj[members]
        for members in fixed_radius_clusters(
            w[obj][:, :2], params.cluster_radius, params.min_cluster_size
        )
    ]
    return PointSegmentation(onroad, ground, clusters)


def _ransac_ground(pts: np.ndarray, params: CadParams):
    """Best near-horizontal plane z = ax + by + c by inlier count."""
    rng = np.random.default_rng(_RANSAC_SEED)
    best, best_count = None, -1
    z = pts[:, 2]
    for _ in range(params.ransac_iters):
        i = rng.choice(len(pts), 3, replace=False)
        A = np.column_stack([pts[i, 0], pts[i, 1], np.ones(3)])
        try:
            a, b, c = np.linalg.solve(A, z[i])
        except np.linalg.LinAlgError:
            continue
        if math.hypot(a, b) > params.max_ground_slope:
            continue
        count = int(np.sum(np.abs(z - (a * pts[:, 0] + b * pts[:, 1] + c))
                           <= params.ground_tol))
        if count > best_count:
            best, best_count = (float(a), float(b), float(c)), count
    return best


def segment_space(
    cloud: PointCloud,
    seg: PointSegmentation,
    params: CadParams = CadParams(),
) -> tuple[list[Polygon], list[Polygon]]:
    """Label the 2D plane: cluster hulls occupied, proven wedges free."""
    w = cloud.world_points()
    occupied: list[Polygon] = []
    for members in seg.clusters:
        hull = sgeom.MultiPoint(w[members][:, :2]).convex_hull
        swelled = hull.buffer(params.obstacle_inflation, quad_segs=2)
        occupied.extend(Region.from_shapely(swelled).to_polygons())

    free_quads = _free_wedges(cloud, seg, params)
    obj_idx = seg.object_indices()
    if len(obj_idx) and free_quads:
        ox, oy = w[obj_idx, 0], w[obj_idx, 1]
        free_quads = [
            q for q in free_quads if not shapely.contains_xy(q, ox, oy).any()
        ]

    # Adjacent wedges share their boundary ray only up to floating-point
    # noise; snap to the common grid so the union dissolves instead of
    # leaving hairline cracks that erosion would widen into missing space.
    snapped = [shapely.set_precision(q, EPS_GEO) for q in free_quads]
    free_geom = shapely.union_all(snapped).buffer(
        -params.free_margin, quad_segs=2
    )
    free_reg = Region.from_shapely(free_geom)
    if occupied:
        free_reg = free_reg.difference(Region.from_polygons(occupied))
    return occupied, free_reg.to_polygons()


def _free_wedges(cloud, seg, params) -> list[sgeom.Polygon]:
    """Alg-style sector scan: one quad per maximal ground-only ring run."""
    n_sect = params.n_sectors
    ring = cloud.ring
    n_rings = int(ring.max()) + 1 if len(ring) else 0
    if n_rings == 0:
        return []
    r_local = np.hypot(cloud.xyz[:, 0], cloud.xyz[:, 1])
    bearing = np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0]) % (2 * math.pi)
    sector = np.minimum((bearing / (2 * math.pi) * n_sect).astype(np.int64),
                        n_sect - 1)
    key = sector * n_rings + ring

    size = n_sect * n_rings
    blocked = np.zeros(size, bool)     # any non-ground return ends a run
    gmin = np.full(size, np.inf)
    gmax = np.full(size, -np.inf)

    gmask = np.zeros(len(cloud.xyz), bool)
    gmask[seg.ground] = True
    blocked[key[~gmask]] = True
    np.minimum.at(gmin, key[gmask], r_local[gmask])
    np.maximum.at(gmax, key[gmask], r_local[gmask])

    pose = cloud.sensor_pose
    sx, sy = pose.position[0], pose.position[1]
    step = 2 * math.pi / n_sect
    # Overlap neighbours by half a sector: unions of exactly-abutting wedges
    # leave hairline slits wherever adjacent runs end at different rings, and
    # the free-margin erosion would widen each slit into a dead band.  The
    # angular overreach (<= r * sin(step/2), ~0.22 m at the 50 m cap) stays
    # safely inside that same erosion.
    pad = 0.5 * step
    quads: list[sgeom.Polygon] = []
    for s in range(n_sect):
        base = s * n_rings
        run_start = None
        for r in range(n_rings + 1):
            ground_here = (
                r < n_rings
                and not blocked[base + r]
                and np.isfinite(gmin[base + r])
            )
            if ground_here and run_start is None:
                run_start = r
            elif not ground_here and run_start is not None:
                quad = _wedge(
                    sx, sy, pose.yaw, s * step - pad, (s + 1) * step + pad,
                    0.0 if run_start == 0 else gmax[base + run_start],
                    min(gmin[base + r - 1], params.range_limit),
                )
                if quad is not None:
                    quads.append(quad)
                run_start = None
    return quads


def _wedge(sx, sy, yaw, a_lo, a_hi, r_lo, r_hi):
    if r_hi - r_lo < 1e-6 or r_lo >= r_hi:
        return None
    angles = np.array([a_lo, a_hi]) + yaw
    cs, sn = np.cos(angles), np.sin(angles)
    if r_lo < 1e-9:
        xs = [sx, sx + r_hi * cs[0], sx + r_hi * cs[1]]
        ys = [sy, sy + r_hi * sn[0], sy + r_hi * sn[1]]
    else:
        xs = [sx + r_lo * cs[0], sx + r_hi * cs[0], sx + r_hi * cs[1], sx + r_lo * cs[1]]
        ys = [sy + r_lo * sn[0], sy + r_hi * sn[0], sy + r_hi * sn[1], sy + r_lo * sn[1]]
    return sgeom.Polygon(zip(xs, ys))


# ---------------------------------------------------------------------------
# Motion estimation / tracking
# ---------------------------------------------------------------------------


def _principal_angle(xy: np.ndarray) -> float | None:
    """Leading-axis direction in [0, pi), or None when isotropic."""
    centered = xy - xy.mean(axis=0)
    cov = centered.T @ centered / max(len(xy), 1)
    evals, evecs = np.linalg.eigh(cov)
    if evals[1] - evals[0] < 1e-6 * max(evals[1], 1e-12):
        return None
    vx, vy = evecs[:, 1]
    return math.atan2(vy, vx) % math.pi


def register_clusters(prev_xy: np.ndarray, cur_xy: np.ndarray) -> Transform2D:
    """Rigid prev -> cur: principal-axis rotation plus centroid shift."""
    cp = prev_xy.mean(axis=0)
    cc = cur_xy.mean(axis=0)
    ap = _principal_angle(prev_xy)
    ac = _principal_angle(cur_xy)
    if ap is None or ac is None:
        rot = 0.0
    else:
        rot = ac - ap
        if rot > math.pi / 2:       # axis is direction-free: pick the small turn
            rot -= math.pi
        elif rot <= -math.pi / 2:
            rot += math.pi
    c, s = math.cos(rot), math.sin(rot)
    tx = cc[0] - (c * cp[0] - s * cp[1])
    ty = cc[1] - (s * cp[0] + c * cp[1])
    return Transform2D(rot, (tx, ty))


def estimate_motion(
    prev: list[np.ndarray],
    cur: list[np.ndarray],
    dt_ms: float,
    gate: float = 3.0,
) -> list[tuple[Transform2D, int | None]]:
    """Per current cluster: (motion per second, matched previous index).

    Greedy nearest-centroid matching within `gate`; unmatched clusters get
    identity motion and a None back-pointer (fresh track).
    """
    if dt_ms <= 0:
        raise ValueError("dt_ms must be positive")
    out: list[tuple[Transform2D, int | None]] = [
        (Transform2D.identity(), None) for _ in cur
    ]
    if prev and cur:
        pc = np.array([p.mean(axis=0) for p in prev])
        cc = np.array([c.mean(axis=0) for c in cur])
        d = np.hypot(pc[:, 0, None] - cc[None, :, 0], pc[:, 1, None] - cc[None, :, 1])
        pairs = sorted(
            ((d[i, j], i, j) for i in range(len(prev)) for j in range(len(cur))),
        )
        used_p, used_c = set(), set()
        for dist, i, j in pairs:
            if dist > gate or i in used_p or j in used_c:
                continue
            used_p.add(i)
            used_c.add(j)
            t_frame = register_clusters(prev[i], cur[j])
            out[j] = (scale_transform(t_frame, 1000.0 / dt_ms), i)
    return out


class Tracker:
    """Per-vehicle track-id bookkeeping across consecutive frames."""

    def __init__(self, gate: float = 3.0):
        self.gate = gate
        self._prev: list[np.ndarray] = []
        self._prev_t: float | None = None
        self._ids: list[int] = []
        self._next = 0

    def update(self, clusters: list[np.ndarray], t_ms: float):
        """Returns [(track_id, motion per second)] aligned with `clusters`."""
        if self._prev_t is None or t_ms <= self._prev_t:
            motions = [(Transform2D.identity(), None)] * len(clusters)
        else:
            motions = estimate_motion(
                self._prev, clusters, t_ms - self._prev_t, self.gate
            )
        ids = []
        for motion, src in motions:
            if src is None:
                ids.append(self._next)
                self._next += 1
            else:
                ids.append(self._ids[src])
        self._prev = [np.asarray(c, dtype=float) for c in clusters]
        self._prev_t = t_ms
        self._ids = ids
        return list(zip(ids, (m for m, _ in motions)))


def generate_map(
    cloud: PointCloud,
    road: Polygon,
    tracker: Tracker | None = None,
    params: CadParams = CadParams(),
) -> OccupancyMap:
    """Full single-vehicle pipeline: segment, label space, attach motion."""
    seg = segment_points(cloud, road, params)
    occupied_polys, free = segment_space(cloud, seg, params)
    w = cloud.world_points()
    cluster_xy = [w[m][:, :2] for m in seg.clusters][: len(occupied_polys)]
    if tracker is not None:
        tags = tracker.update(cluster_xy, cloud.timestamp_ms)
    else:
        tags = [(i, Transform2D.identity()) for i in range(len(occupied_polys))]
    occupied = [
        OccupiedRegion(poly, tid, motion)
        for poly, (tid, motion) in zip(occupied_polys, tags)
    ]
    return OccupancyMap(
        cloud.vehicle_id,
        cloud.timestamp_ms,
        occupied,
        free,
        cloud.sensor_pose,
        params.range_limit,
    )


# ---------------------------------------------------------------------------
# Synchronization and the two consistency checks
# ---------------------------------------------------------------------------


def synchronize(maps: list[OccupancyMap], target_t: float) -> list[OccupancyMap]:
    """Advance every occupied region by its motion to the target timestamp.

    Free regions lose whatever the moved occupied regions now sweep, so a
    stale map never claims space free that its own tracks have entered.
    """
    out = []
    for m in maps:
        dt_s = (target_t - m.timestamp_ms) / 1000.0
        if dt_s == 0.0:
            out.append(m)
            continue
        moved = [
            OccupiedRegion(
                apply_transform(o.polygon, scale_transform(o.motion, dt_s)),
                o.track_id,
                o.motion,
            )
            for o in m.occupied
        ]
        free = Region.from_polygons(m.free)
        if moved:
            free = free.difference(
                Region.from_polygons([o.polygon for o in moved])
            )
        out.append(
            OccupancyMap(
                m.vehicle_id, target_t, moved, free.to_polygons(),
                m.sensor_pose, m.range_limit,
            )
        )
    return out


def check_occupancy(
    maps: list[OccupancyMap],
    sigma_occ: float = 0.5,
    frame_index: int = 0,
) -> tuple[list[Alert], OccupancyMap]:
    """Flag occupied-vs-free disagreements; merge, trusting map 0.

    All conflicted area is dropped from the merge regardless of size; only
    components at least `sigma_occ` big are worth an alert.
    """
    if not maps:
        raise ValueError("need at least one map")
    occ = [m.occupied_region() for m in maps]
    free = [m.free_region() for m in maps]

    pieces: list[tuple[Region, frozenset[int]]] = []
    for i in range(len(maps)):
        for j in range(len(maps)):
            if i == j:
                continue
            inter = occ[i].intersection(free[j])
            if not inter.is_empty:
                pieces.append(
                    (inter, frozenset((maps[i].vehicle_id, maps[j].vehicle_id)))
                )
    conflict = Region.empty()
    for piece, _ in pieces:
        conflict = conflict.union(piece)

    alerts = []
    for comp in conflict.components():
        if comp.area < sigma_occ:
            continue
        vids: set[int] = set()
        for piece, tags in pieces:
            if piece.geom.intersects(comp.geom):
                vids |= tags
        alerts.append(
            Alert(
                "occupancy_conflict",
                tuple(comp.to_polygons()),
                comp.area,
                tuple(sorted(vids)),
                frame_index,
            )
        )

    ego = maps[0]
    others_occ = Region.empty()
    others_free = Region.empty()
    for i in range(1, len(maps)):
        others_occ = others_occ.union(occ[i])
        others_free = others_free.union(free[i])
    merged_occ = occ[0].union(others_occ.difference(conflict).difference(free[0]))
    merged_free = free[0].union(others_free.difference(conflict).difference(occ[0]))

    merged = OccupancyMap(
        ego.vehicle_id,
        ego.timestamp_ms,
        [
            OccupiedRegion(p, -1, Transform2D.identity())
            for p in merged_occ.to_polygons()
        ],
        merged_free.to_polygons(),
        ego.sensor_pose,
        max(m.range_limit for m in maps),
    )
    return alerts, merged


def check_perception(
    detections,
    merged: OccupancyMap,
    road: Polygon,
    thresholds: CadThresholds = CadThresholds(),
    frame_index: int = 0,
) -> list[Alert]:
    """Boxes over free space, and on-road occupied space nobody boxed."""
    boxes = Region.from_polygons([d.box.footprint() for d in detections])
    free = merged.free_region()
    occ = merged.occupied_region()
    road_reg = Region.from_polygons([road])

    alerts = []
    for comp in boxes.intersection(free).components():
        if comp.area >= thresholds.sigma_spoof:
            alerts.append(
                Alert(
                    "spoof", tuple(comp.to_polygons()), comp.area,
                    (merged.vehicle_id,), frame_index,
                )
            )
    # Every on-road occupied component must be claimed by at least one box;
    # unclaimed ones are candidate hidden objects.
    for comp in occ.components():
        if boxes.geom.intersects(comp.geom):
            continue
        missed = comp.intersection(road_reg)
        if missed.area >= thresholds.sigma_remove:
            alerts.append(
                Alert(
                    "remove", tuple(missed.to_polygons()), missed.area,
                    (merged.vehicle_id,), frame_index,
                )
            )
    return alerts


@dataclass
class CadFrameResult:
    own_map: OccupancyMap
    alerts: list[Alert]
    merged: OccupancyMap


def run_cad_frame(
    cloud: PointCloud,
    received: list[OccupancyMap],
    detections,
    road: Polygon,
    thresholds: CadThresholds = CadThresholds(),
    params: CadParams = CadParams(),
    tracker: Tracker | None = None,
    frame_index: int = 0,
) -> CadFrameResult:
    """Generate, synchronize, check.  Failures degrade to empty evidence."""
    try:
        own = generate_map(cloud, road, tracker, params)
    except Exception:
        own = OccupancyMap(
            cloud.vehicle_id, cloud.timestamp_ms, [], [],
            cloud.sensor_pose, params.range_limit,
        )
    synced = synchronize([own] + list(received), cloud.timestamp_ms)
    occ_alerts, merged = check_occupancy(synced, thresholds.sigma_occ, frame_index)
    percep_alerts = check_perception(
        detections, merged, road, thresholds, frame_index
    )
    return CadFrameResult(own, occ_alerts + percep_alerts, merged)

"""Physically consistent point-cloud fabrication.

The fabricator owns one vehicle's sweep and edits it so that a phantom
object appears (spoof) or a real one disappears (remove) in the victim's
fused view, while every edited return still lies on a real ray of the
attacker's sensor with at most one return per ray.  The heavy lifting is
non-occlusion ray casting: intersect the attacker's rays with a surface
model of the target and keep every crossing as a candidate return.

A recorded attack can be replayed one frame later against a fresh sweep
(`transform_attack`), which is what makes the attack deployable when the
attacker only has last-frame knowledge of the world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import shapely

from .cluster import fixed_radius_clusters
from .geometry import OrientedBox, Polygon, box_iou, min_area_rect
from .lidar import (
    LidarConfig,
    NonOccludedHits,
    PointCloud,
    Pose3,
    TriangleMesh,
    cast_non_occluded,
    enumerate_rays,
)
from .perception import Detection, DetectorParams, detect_early, fuse_early

REMOVAL_MARGIN = 0.6  # clearance of the cloaking shape around the target (m)
DEFAULT_TARGET_HEIGHT = 1.6


@dataclass(frozen=True)
class TargetRegion:
    """What the attacker wants the victim to believe about one box."""

    box: OrientedBox
    goal: str  # 'spoof' | 'remove'
    height: float = DEFAULT_TARGET_HEIGHT

    def __post_init__(self):
        if self.goal not in ("spoof", "remove"):
            raise ValueError("goal must be 'spoof' or 'remove'")


@dataclass
class RaySwapRecord:
    """Which rays an attack touched and what each now returns.

    Entries with a finite `xyz_world` row are replacements; rows of NaN are
    deletions (the ray keeps no return).  Everything is stored in world
    coordinates of the generation frame so the record can be rigidly
    remapped when the target moves.
    """

    ring: np.ndarray  # (K,)
    azimuth: np.ndarray  # (K,)
    xyz_world: np.ndarray  # (K, 3); NaN rows mark deletions
    target: OrientedBox | None
    goal: str = "spoof"
    frame_index: int | None = None
    vehicle_id: int = 0

    @classmethod
    def empty(cls, goal: str = "spoof") -> "RaySwapRecord":
        return cls(
            np.empty(0, dtype=np.int64),
            np.empty(0, dtype=np.int64),
            np.empty((0, 3)),
            None,
            goal,
        )

    def __len__(self) -> int:
        return len(self.ring)

    @property
    def feasible(self) -> bool:
        """At least one attacker ray reached the target region."""
        return len(self.ring) > 0

    @property
    def n_replaced(self) -> int:
        return int(np.sum(np.isfinite(self.xyz_world[:, 0])))

    @property
    def n_deleted(self) -> int:
        return len(self.ring) - self.n_replaced


def transform_model(
    mesh: TriangleMesh,
    target: OrientedBox,
    margin: float = 0.0,
    height: float | None = None,
) -> TriangleMesh:
    """Place a surface model over a target box.

    The model's BEV bounding box is scaled to the target footprint grown by
    `margin` on every side; aspect distortion is allowed.  When `height` is
    given the model is also stretched vertically (base at z=0).
    """
    lo, hi = mesh.bbox
    dx = max(hi[0] - lo[0], 1e-6)
    dy = max(hi[1] - lo[1], 1e-6)
    dz = max(hi[2] - lo[2], 1e-6)
    sx = (target.length + 2.0 * margin) / dx
    sy = (target.width + 2.0 * margin) / dy
    sz = 1.0 if height is None else (height / dz)
    v = mesh.vertices.copy()
    centre = np.array([0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), lo[2]])
    v = (v - centre) * np.array([sx, sy, sz])
    c, s = math.cos(target.yaw), math.sin(target.yaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    v = v @ rot.T
    v[:, 0] += target.center[0]
    v[:, 1] += target.center[1]
    return TriangleMesh(v, mesh.triangles)


def point_sampling(
    hits: NonOccludedHits,
    benign_origins: np.ndarray,
    sigma_p: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Pick exactly one return per nonempty ray.

    With probability 1 - sigma_p the closest crossing is kept (what a real
    surface would reflect); otherwise one crossing is drawn with weight
    1 / (1 + d^2), d being the distance to the nearest benign sensor, so
    that fabricated points gravitate toward surfaces other vehicles could
    plausibly have measured.  Returns (ring, azimuth, xyz_local, xyz_world).
    """
    if not (0.0 <= sigma_p <= 1.0):
        raise ValueError("sigma_p must be in [0, 1]")
    origins = np.asarray(benign_origins, dtype=float).reshape(-1, 3)
    if len(origins):
        d = np.min(
            np.linalg.norm(hits.xyz_world[:, None, :] - origins[None, :, :], axis=2),
            axis=1,
        )
        weights = 1.0 / (1.0 + d * d)
    else:
        weights = np.ones(len(hits.t))
    sel = np.empty(hits.n_rays_hit, dtype=np.int64)
    for g in range(hits.n_rays_hit):
        s0, s1 = hits.group_start[g], hits.group_start[g + 1]
        if s1 - s0 == 1 or rng.random() >= sigma_p:
            sel[g] = s0  # crossings are sorted nearest-first
        else:
            w = weights[s0:s1]
            sel[g] = s0 + rng.choice(s1 - s0, p=w / w.sum())
    return (
        hits.ring[sel].astype(np.int64),
        hits.azimuth[sel].astype(np.int64),
        hits.xyz_local[sel],
        hits.xyz_world[sel],
    )


def _region_mask(cloud: PointCloud, box: OrientedBox, pad: float) -> np.ndarray:
    """Boolean mask of returns whose world XY falls in the padded box."""
    if len(cloud) == 0:
        return np.zeros(0, dtype=bool)
    w = cloud.world_points()
    poly = box.inflate(pad).footprint().shapely
    return shapely.contains_xy(poly, w[:, 0], w[:, 1])


def _apply_swaps(
    own: PointCloud,
    ring: np.ndarray,
    azimuth: np.ndarray,
    xyz_local: np.ndarray,
    extra_delete: np.ndarray | None,
    cfg: LidarConfig,
) -> PointCloud:
    """Drop own returns on the swapped rays (plus extra indices), append points."""
    n_az = cfg.n_azimuth
    swap_keys = set((ring * n_az + azimuth).tolist())
    own_keys = own.ring * n_az + own.azimuth
    keep = np.fromiter(
        (k not in swap_keys for k in own_keys.tolist()), dtype=bool, count=len(own)
    )
    if extra_delete is not None:
        keep &= ~extra_delete
    out = own.copy()
    out.xyz = np.vstack([own.xyz[keep], xyz_local])
    out.ring = np.concatenate([own.ring[keep], ring])
    out.azimuth = np.concatenate([own.azimuth[keep], azimuth])
    if own.source_id is not None:
        out.source_id = np.concatenate(
            [own.source_id[keep], np.full(len(ring), own.vehicle_id, dtype=np.int64)]
        )
    return out


def fabricate_cloud(
    own: PointCloud,
    target: OrientedBox,
    goal: str,
    mesh: TriangleMesh | None,
    sigma_p: float,
    seed: int,
    cfg: LidarConfig,
    benign_origins: np.ndarray | None = None,
    margin: float = REMOVAL_MARGIN,
    target_height: float = DEFAULT_TARGET_HEIGHT,
) -> tuple[PointCloud, RaySwapRecord]:
    """Edit the attacker's own sweep toward `goal` at `target`.

    spoof  - the model mesh is placed on the target box and its sampled
             surface crossings replace whatever those rays returned.
    remove - returns inside the (margin-grown) target box are deleted; when
             a mesh is given its sampled surface takes their place (the
             cloaking-shape attack), otherwise each deleted ray falls back
             to its ground-plane return when one exists within range.

    An empty record means no attacker ray reached the region (infeasible
    frame); the cloud is then returned unchanged.
    """
    if goal not in ("spoof", "remove"):
        raise ValueError("goal must be 'spoof' or 'remove'")
    rng = np.random.default_rng(seed)
    rays = enumerate_rays(cfg, own.sensor_pose)
    if goal == "spoof":
        placed = transform_model(mesh, target)
        hits = cast_non_occluded(rays, placed)
        if hits.n_rays_hit == 0:
            return own.copy(), RaySwapRecord.empty(goal)
        ring, az, loc, wor = point_sampling(
            hits, benign_origins if benign_origins is not None else np.empty((0, 3)),
            sigma_p, rng,
        )
        cloud = _apply_swaps(own, ring, az, loc, None, cfg)
        record = RaySwapRecord(
            ring, az, wor, target, goal, own.frame_index, own.vehicle_id
        )
        cloud.timestamp_ms = own.timestamp_ms
        return cloud, record

    # removal
    in_region = _region_mask(own, target, margin)
    if mesh is not None:
        placed = transform_model(mesh, target, margin, target_height + margin)
        hits = cast_non_occluded(rays, placed)
        if hits.n_rays_hit == 0 and not np.any(in_region):
            return own.copy(), RaySwapRecord.empty(goal)
        ring, az, loc, wor = point_sampling(
            hits, benign_origins if benign_origins is not None else np.empty((0, 3)),
            sigma_p, rng,
        )
    else:
        # naive baseline: no cloaking surface, deleted rays fall back to the
        # ground return behind the object where the ray geometry allows it
        if not np.any(in_region):
            return own.copy(), RaySwapRecord.empty(goal)
        idx = np.nonzero(in_region)[0]
        r_ring = own.ring[idx]
        r_az = own.azimuth[idx]
        dirs_l = cfg.local_directions()[r_ring * cfg.n_azimuth + r_az]
        dirs_w = dirs_l @ own.sensor_pose.rotation().T
        oz = own.sensor_pose.position[2]
        down = dirs_w[:, 2] < -1e-12
        t_g = np.where(down, -oz / np.where(down, dirs_w[:, 2], -1.0), np.inf)
        ok = t_g <= cfg.max_range
        ring, az = r_ring[ok], r_az[ok]
        loc = t_g[ok, None] * dirs_l[ok]
        wor = own.sensor_pose.to_world(loc) if np.any(ok) else np.empty((0, 3))

    # deletions: region returns on rays that did not get a replacement
    n_az = cfg.n_azimuth
    replaced_keys = set((ring * n_az + az).tolist())
    del_mask = in_region.copy()
    own_keys = own.ring * n_az + own.azimuth
    for i in np.nonzero(in_region)[0]:
        if int(own_keys[i]) in replaced_keys:
            del_mask[i] = False  # replacement already covers this ray
    cloud = _apply_swaps(own, ring, az, loc, in_region, cfg)
    cloud.timestamp_ms = own.timestamp_ms
    del_ring = own.ring[del_mask]
    del_az = own.azimuth[del_mask]
    rec_ring = np.concatenate([ring, del_ring])
    rec_az = np.concatenate([az, del_az])
    rec_xyz = np.vstack([wor, np.full((len(del_ring), 3), np.nan)])
    record = RaySwapRecord(
        rec_ring, rec_az, rec_xyz, target, goal, own.frame_index, own.vehicle_id
    )
    return cloud, record


def transform_attack(
    record: RaySwapRecord,
    fresh_own: PointCloud,
    new_target: OrientedBox,
    cfg: LidarConfig,
) -> tuple[PointCloud, RaySwapRecord]:
    """Replay a one-frame-old attack against a fresh sweep.

    Recorded returns are rigidly carried along with the target (rotation
    about the old centre, then translation); recorded deletions stay
    deletions.  The result keeps one return per ray but replayed points may
    sit slightly off their ray, so validate with a relaxed tolerance.
    """
    if not record.feasible:
        return fresh_own.copy(), replace(record)
    if (
        record.frame_index is not None
        and fresh_own.frame_index is not None
        and abs(fresh_own.frame_index - record.frame_index) > 1
    ):
        raise ValueError("transform_attack only bridges adjacent frames")
    old = record.target
    dyaw = new_target.yaw - old.yaw
    c, s = math.cos(dyaw), math.sin(dyaw)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    keep = np.isfinite(record.xyz_world[:, 0])
    moved = (record.xyz_world[keep] - np.array([*old.center, 0.0])) @ rot.T
    moved += np.array([*new_target.center, 0.0])
    loc = fresh_own.sensor_pose.to_local(moved) if len(moved) else np.empty((0, 3))
    cloud = _apply_swaps(
        fresh_own, record.ring[keep], record.azimuth[keep], loc,
        _region_mask(fresh_own, new_target, REMOVAL_MARGIN)
        if record.goal == "remove"
        else None,
        cfg,
    )
    # rays recorded as deletions must stay silent in the fresh sweep too
    del_ring = record.ring[~keep]
    del_az = record.azimuth[~keep]
    if len(del_ring):
        n_az = cfg.n_azimuth
        dead = set((del_ring * n_az + del_az).tolist())
        keys = cloud.ring * n_az + cloud.azimuth
        keep2 = np.fromiter(
            (k not in dead for k in keys.tolist()), dtype=bool, count=len(cloud)
        )
        cloud.xyz = cloud.xyz[keep2]
        cloud.ring = cloud.ring[keep2]
        cloud.azimuth = cloud.azimuth[keep2]
        if cloud.source_id is not None:
            cloud.source_id = cloud.source_id[keep2]
    cloud.timestamp_ms = fresh_own.timestamp_ms
    new_record = RaySwapRecord(
        record.ring.copy(),
        record.azimuth.copy(),
        np.vstack([moved, np.full((int(np.sum(~keep)), 3), np.nan)]),
        new_target,
        record.goal,
        fresh_own.frame_index,
        record.vehicle_id,
    )
    return cloud, new_record


# ---------------------------------------------------------------------------
# Deliberately naive injection baselines (physics violations by design)
# ---------------------------------------------------------------------------


def naive_dense_cloud(
    own: PointCloud,
    target: OrientedBox,
    mesh: TriangleMesh,
    cfg: LidarConfig,
    mode: str = "near",
    seed: int = 0,
) -> PointCloud:
    """Inject a dense phantom without respecting the attacker's ray geometry.

    mode='near'  - cast from a virtual sensor 5 m from the target and keep
                   every crossing (wrong origin: points sit off the real rays).
    mode='grid'  - fill the target box with a 20 cm lattice (also breaks the
                   one-return-per-ray rule).
    """
    rng = np.random.default_rng(seed)
    if mode == "near":
        bearing = rng.uniform(0, 2 * math.pi)
        vpos = (
            target.center[0] + 5.0 * math.cos(bearing),
            target.center[1] + 5.0 * math.sin(bearing),
            1.8,
        )
        vyaw = math.atan2(target.center[1] - vpos[1], target.center[0] - vpos[0])
        vrays = enumerate_rays(cfg, Pose3(vpos, vyaw))
        hits = cast_non_occluded(vrays, transform_model(mesh, target))
        pts_world = hits.xyz_world
        ring, az = hits.ring, hits.azimuth
    elif mode == "grid":
        xs = np.arange(-0.5 * target.length, 0.5 * target.length + 1e-9, 0.2)
        ys = np.arange(-0.5 * target.width, 0.5 * target.width + 1e-9, 0.2)
        zs = np.arange(0.3, DEFAULT_TARGET_HEIGHT, 0.4)
        gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
        c, s = math.cos(target.yaw), math.sin(target.yaw)
        pts_world = np.column_stack(
            [
                target.center[0] + c * gx.ravel() - s * gy.ravel(),
                target.center[1] + s * gx.ravel() + c * gy.ravel(),
                gz.ravel(),
            ]
        )
        # tag each point with the nearest real ray, so rays repeat
        loc = own.sensor_pose.to_local(pts_world)
        az_f = np.degrees(np.arctan2(loc[:, 1], loc[:, 0])) % 360.0
        az = np.floor(az_f / cfg.azimuth_step).astype(np.int64) % cfg.n_azimuth
        horiz = np.linalg.norm(loc[:, :2], axis=1)
        elev = np.arctan2(loc[:, 2], horiz)
        ring = np.clip(
            np.searchsorted(cfg.ring_elevations(), elev),
            0,
            cfg.ring_count - 1,
        ).astype(np.int64)
    else:
        raise ValueError("mode must be 'near' or 'grid'")
    out = own.copy()
    out.xyz = np.vstack([own.xyz, own.sensor_pose.to_local(pts_world)])
    out.ring = np.concatenate([own.ring, ring])
    out.azimuth = np.concatenate([own.azimuth, az])
    if own.source_id is not None:
        out.source_id = np.concatenate(
            [own.source_id, np.full(len(ring), own.vehicle_id, dtype=np.int64)]
        )
    return out


# ---------------------------------------------------------------------------
# Attacker-side target localization
# ---------------------------------------------------------------------------


def localize_target(
    own: PointCloud,
    near: OrientedBox,
    params: DetectorParams = DetectorParams(),
    max_center_dist: float = 4.0,
) -> OrientedBox | None:
    """Best-effort box for the object the attacker wants to cloak.

    Runs the clustering stage of the early detector on the attacker's own
    sweep with the score gate off (a single viewpoint rarely clears the
    collaborative score) and returns the cluster box nearest to `near`.
    """
    w = own.world_points()
    if len(w) == 0:
        return None
    pts = w[w[:, 2] > params.ground_z_max][:, :2]
    if len(pts) < params.min_cluster_size:
        return None
    best: tuple[float, OrientedBox] | None = None
    for idx in fixed_radius_clusters(pts, params.cluster_radius, params.min_cluster_size):
        box = min_area_rect(pts[idx])
        d = math.hypot(box.center[0] - near.center[0], box.center[1] - near.center[1])
        if d <= max_center_dist and (best is None or d < best[0]):
            best = (d, box)
    return None if best is None else best[1]


# ---------------------------------------------------------------------------
# Evolutionary search for the cloaking shape
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AttackCase:
    """One frozen attack situation used to score candidate shapes."""

    own_cloud: PointCloud
    benign_clouds: tuple[PointCloud, ...]
    target: OrientedBox
    road: Polygon
    benign_origins: np.ndarray
    lidar: LidarConfig
    params: DetectorParams = DetectorParams()


@dataclass(frozen=True)
class AdvShapeSearchConfig:
    population: int = 16
    generations: int = 20
    margin: float = REMOVAL_MARGIN
    sigma_p: float = 0.7
    mutation_scale: float = 0.18
    mutation_prob: float = 0.4
    crossover_prob: float = 0.5
    subdiv: int = 2
    seed: int = 0


def _case_fitness(mesh: TriangleMesh, case: AttackCase, cfg: AdvShapeSearchConfig,
                  seed: int) -> float:
    """Sum of IoU-weighted log(1 - score) over detections touching the target.

    0 is perfect (nothing overlaps the target), more negative is worse.
    """
    fab, rec = fabricate_cloud(
        case.own_cloud, case.target, "remove", mesh, cfg.sigma_p, seed,
        case.lidar, case.benign_origins, cfg.margin,
    )
    fused = fuse_early([fab, *case.benign_clouds])
    dets = _detect_near(fused, case, radius=9.0)
    total = 0.0
    for det in dets:
        iou = box_iou(det.box, case.target)
        if iou > 0.0:
            total += iou * math.log(max(1.0 - det.score, 1e-6))
    return total


def _detect_near(fused: PointCloud, case: AttackCase, radius: float) -> list[Detection]:
    """Early detector restricted to the target's neighbourhood (for speed)."""
    w = fused.world_points()
    cx, cy = case.target.center
    near = (np.abs(w[:, 0] - cx) < radius) & (np.abs(w[:, 1] - cy) < radius)
    sub = PointCloud(
        fused.xyz[near], fused.ring[near], fused.azimuth[near],
        fused.sensor_pose, fused.timestamp_ms, fused.vehicle_id,
        None if fused.source_id is None else fused.source_id[near],
        fused.frame_index,
    )
    return detect_early(sub, case.road, case.params)


def radial_contraction(base: TriangleMesh, pull: float) -> np.ndarray:
    """Contract every vertex toward the mesh centre except the vertical
    columns at footprint corners (both x and y at an extreme).

    Deep pulls turn a cuboid into four corner towers over a sunken core: a
    useful region of the search space, since tower tips pin the cluster
    hull far outside the hidden object while the sunken surface keeps the
    fabricated returns away from that hull.
    """
    lo, hi = base.bbox
    ctr = 0.5 * (lo + hi)
    v = base.vertices.copy()
    x_ext = (np.abs(v[:, 0] - lo[0]) < 1e-9) | (np.abs(v[:, 0] - hi[0]) < 1e-9)
    y_ext = (np.abs(v[:, 1] - lo[1]) < 1e-9) | (np.abs(v[:, 1] - hi[1]) < 1e-9)
    move = ~(x_ext & y_ext)
    v[move] = ctr + pull * (v[move] - ctr)
    return v


def search_adversarial_shape(
    cases: list[AttackCase], cfg: AdvShapeSearchConfig = AdvShapeSearchConfig()
) -> tuple[TriangleMesh, list[float]]:
    """Evolve a universal cloaking surface against a set of frozen cases.

    Elitist (mu + lambda) loop: Gaussian vertex jitter plus uniform
    per-vertex crossover; survivors are the best `population` of parents
    and offspring, so the best fitness never decreases.  The population is
    seeded with a contraction-depth sweep of the cuboid.  Zero generations
    returns the seed cuboid untouched.
    """
    base = TriangleMesh.cuboid(subdiv=cfg.subdiv)
    history: list[float] = []
    if cfg.generations <= 0 or not cases:
        return base, history
    rng = np.random.default_rng(cfg.seed)

    def fitness(mesh: TriangleMesh) -> float:
        return sum(
            _case_fitness(mesh, case, cfg, seed=cfg.seed + 17 * k)
            for k, case in enumerate(cases)
        ) / len(cases)

    def mutate(verts: np.ndarray) -> np.ndarray:
        out = verts.copy()
        pick = rng.random(len(out)) < cfg.mutation_prob
        out[pick] += rng.normal(0.0, cfg.mutation_scale, (int(pick.sum()), 3))
        return out

    pop = [base.vertices.copy()]
    for pull in (0.8, 0.6, 0.45, 0.3, 0.25):
        pop.append(radial_contraction(base, pull))
    while len(pop) < cfg.population:
        pop.append(mutate(pop[rng.integers(0, 6)]))
    pop = pop[: cfg.population]
    scores = [fitness(TriangleMesh(v, base.triangles)) for v in pop]
    order = np.argsort(scores)[::-1]
    pop = [pop[i] for i in order]
    scores = [scores[i] for i in order]
    history.append(scores[0])
    for _gen in range(cfg.generations):
        offspring = []
        for _ in range(cfg.population):
            i, j = rng.integers(0, cfg.population, 2)
            if rng.random() < cfg.crossover_prob:
                mask = rng.random(len(pop[i])) < 0.5
                child = np.where(mask[:, None], pop[i], pop[j])
            else:
                child = pop[i].copy()
            offspring.append(mutate(child))
        cand = pop + offspring
        cand_scores = scores + [
            fitness(TriangleMesh(v, base.triangles)) for v in offspring
        ]
        order = np.argsort(cand_scores)[::-1][: cfg.population]
        pop = [cand[i] for i in order]
        scores = [cand_scores[i] for i in order]
        history.append(scores[0])
    return TriangleMesh(pop[0], base.triangles), history

"""Synthetic spinning LiDAR over a planar world with triangle-mesh obstacles.

The world model is deliberately small: an infinite ground plane at z=0, a
road polygon that scopes where traffic lives, and rigid objects (triangle
meshes, usually closed cuboids) that translate with constant velocity and
rotate with constant yaw rate.

A sensor fires one ray per (ring, azimuth step) pair.  Casting produces at
most one return per ray; points are stored in the sensor frame so that the
physics of a cloud can be checked without trusting any advertised pose.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

from .geometry import EPS_GEO, OrientedBox, Polygon

DEG = math.pi / 180.0

# nominal passenger-car shell used throughout the synthetic scenes (m)
VEHICLE_DIMS = (4.5, 2.0, 1.6)

_DIRECTION_CACHE: dict[tuple, np.ndarray] = {}


@dataclass(frozen=True)
class LidarConfig:
    """Ring/azimuth scan pattern of one spinning sensor."""

    ring_count: int = 64
    vertical_fov: tuple[float, float] = (-25.0, 5.0)  # degrees, low..high
    azimuth_step: float = 0.2  # degrees between columns
    max_range: float = 100.0  # metres
    cycle_ms: float = 100.0  # full revolution period

    def __post_init__(self):
        if self.ring_count < 1:
            raise ValueError("ring_count must be >= 1")
        if self.vertical_fov[0] >= self.vertical_fov[1] and self.ring_count > 1:
            raise ValueError("vertical_fov must be an increasing pair")
        n = 360.0 / self.azimuth_step
        if abs(n - round(n)) > 1e-9:
            raise ValueError("azimuth_step must divide 360 degrees")
        if self.max_range <= 0 or self.cycle_ms <= 0:
            raise ValueError("max_range and cycle_ms must be positive")

    @property
    def n_azimuth(self) -> int:
        return int(round(360.0 / self.azimuth_step))

    @property
    def n_rays(self) -> int:
        return self.ring_count * self.n_azimuth

    def ring_elevations(self) -> np.ndarray:
        """Per-ring elevation angles in radians, ring 0 at the bottom."""
        lo, hi = self.vertical_fov
        if self.ring_count == 1:
            return np.array([0.5 * (lo + hi) * DEG])
        return np.linspace(lo, hi, self.ring_count) * DEG

    def local_directions(self) -> np.ndarray:
        """Unit direction per ray in the sensor frame, shape (n_rays, 3).

        Ray index = ring * n_azimuth + azimuth_index.
        """
        key = (self.ring_count, self.vertical_fov, self.azimuth_step)
        cached = _DIRECTION_CACHE.get(key)
        if cached is None:
            elev = self.ring_elevations()
            azim = np.arange(self.n_azimuth) * self.azimuth_step * DEG
            ce, se = np.cos(elev), np.sin(elev)
            ca, sa = np.cos(azim), np.sin(azim)
            dirs = np.empty((self.ring_count, self.n_azimuth, 3))
            dirs[:, :, 0] = ce[:, None] * ca[None, :]
            dirs[:, :, 1] = ce[:, None] * sa[None, :]
            dirs[:, :, 2] = se[:, None]
            cached = dirs.reshape(-1, 3)
            cached.setflags(write=False)
            _DIRECTION_CACHE[key] = cached
        return cached


@dataclass(frozen=True)
class Pose3:
    """Rigid placement in the world: position plus yaw/pitch/roll (radians)."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def rotation(self) -> np.ndarray:
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        cr, sr = math.cos(self.roll), math.sin(self.roll)
        rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return rz @ ry @ rx

    def to_world(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return pts @ self.rotation().T + np.asarray(self.position)

    def to_local(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return (pts - np.asarray(self.position)) @ self.rotation()

    def is_level(self) -> bool:
        return abs(self.pitch) < 1e-9 and abs(self.roll) < 1e-9

    def to_json(self) -> dict:
        return {
            "position": list(self.position),
            "yaw": self.yaw,
            "pitch": self.pitch,
            "roll": self.roll,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Pose3":
        return cls(tuple(obj["position"]), obj["yaw"], obj["pitch"], obj["roll"])


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle soup; vertices are in the model frame."""

    vertices: np.ndarray  # (V, 3) float
    triangles: np.ndarray  # (T, 3) int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("vertices must be (V, 3)")
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError("triangles must be (T, 3)")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @classmethod
    def cuboid(
        cls,
        length: float = VEHICLE_DIMS[0],
        width: float = VEHICLE_DIMS[1],
        height: float = VEHICLE_DIMS[2],
        subdiv: int = 1,
    ) -> "TriangleMesh":
        """Closed axis-aligned box, centred in x/y, base at z=0.

        `subdiv` splits every face into subdiv^2 quads so that per-vertex
        deformation has useful degrees of freedom.
        """
        hx, hy = 0.5 * length, 0.5 * width
        verts: list = []
        tris: list = []
        index: dict = {}

        def vid(p):
            key = (round(p[0], 9), round(p[1], 9), round(p[2], 9))
            if key not in index:
                index[key] = len(verts)
                verts.append([p[0], p[1], p[2]])
            return index[key]

        def face(origin, du, dv):
            o, u, v = np.asarray(origin), np.asarray(du), np.asarray(dv)
            n = subdiv
            for i in range(n):
                for j in range(n):
                    p00 = o + u * (i / n) + v * (j / n)
                    p10 = o + u * ((i + 1) / n) + v * (j / n)
                    p01 = o + u * (i / n) + v * ((j + 1) / n)
                    p11 = o + u * ((i + 1) / n) + v * ((j + 1) / n)
                    a, b2, c, d = vid(p00), vid(p10), vid(p01), vid(p11)
                    tris.append([a, b2, d])
                    tris.append([a, d, c])

        lx, ly = 2 * hx, 2 * hy
        face((-hx, -hy, 0.0), (lx, 0, 0), (0, ly, 0))          # bottom
        face((-hx, -hy, height), (lx, 0, 0), (0, ly, 0))       # top
        face((-hx, -hy, 0.0), (lx, 0, 0), (0, 0, height))      # y = -hy side
        face((-hx, hy, 0.0), (lx, 0, 0), (0, 0, height))       # y = +hy side
        face((-hx, -hy, 0.0), (0, ly, 0), (0, 0, height))      # x = -hx side
        face((hx, -hy, 0.0), (0, ly, 0), (0, 0, height))       # x = +hx side
        return cls(np.asarray(verts, dtype=float), np.asarray(tris, dtype=np.int64))

    @property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def footprint_dims(self) -> tuple[float, float]:
        lo, hi = self.bbox
        return float(hi[0] - lo[0]), float(hi[1] - lo[1])

    def height(self) -> float:
        lo, hi = self.bbox
        return float(hi[2] - lo[2])

    def transformed(self, pose: Pose3) -> "TriangleMesh":
        return TriangleMesh(pose.to_world(self.vertices), self.triangles)

    def save_obj(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("# triangle mesh\n")
            for v in self.vertices:
                fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
            for t in self.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")

    @classmethod
    def load_obj(cls, path) -> "TriangleMesh":
        verts, tris = [], []
        with open(path, "r", encoding="ascii") as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                    for k in range(1, len(idx) - 1):  # fan-triangulate
                        tris.append([idx[0], idx[k], idx[k + 1]])
        return cls(np.asarray(verts, dtype=float), np.asarray(tris, dtype=np.int64))


@dataclass(frozen=True)
class SceneObject:
    """Rigid object with constant planar velocity and yaw rate."""

    mesh: TriangleMesh
    pose: Pose3
    velocity: tuple[float, float] = (0.0, 0.0)  # m/s in world x/y
    yaw_rate: float = 0.0  # rad/s
    object_id: int = 0

    def footprint_box(self) -> OrientedBox:
        """BEV box of the object at its current pose (model axis aligned)."""
        dx, dy = self.mesh.footprint_dims()
        lo, hi = self.mesh.bbox
        cx = 0.5 * (lo[0] + hi[0])
        cy = 0.5 * (lo[1] + hi[1])
        c = self.pose.to_world(np.array([[cx, cy, 0.0]]))[0]
        return OrientedBox((c[0], c[1]), dx, dy, self.pose.yaw)


@dataclass(frozen=True)
class Scene:
    """Ground plane at z=0, moving rigid objects, and the road polygon."""

    objects: tuple[SceneObject, ...]
    road: Polygon

    def advanced(self, dt_ms: float) -> "Scene":
        return advance_scene(self, dt_ms)


def advance_scene(scene: Scene, dt_ms: float) -> Scene:
    """Propagate every object by its constant velocity / yaw rate."""
    dt = dt_ms / 1000.0
    moved = []
    for obj in scene.objects:
        p = obj.pose
        new_pose = replace(
            p,
            position=(
                p.position[0] + obj.velocity[0] * dt,
                p.position[1] + obj.velocity[1] * dt,
                p.position[2],
            ),
            yaw=p.yaw + obj.yaw_rate * dt,
        )
        moved.append(replace(obj, pose=new_pose))
    return Scene(tuple(moved), scene.road)


# ---------------------------------------------------------------------------
# Point clouds
# ---------------------------------------------------------------------------

_BINARY_MAGIC = b"CPPC1"
_POINT_DTYPE = np.dtype(
    [("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("ring", "<u2"), ("az", "<u2")]
)


@dataclass
class PointCloud:
    """Returns of one sweep (or a fusion of sweeps), points in sensor frame.

    For fused clouds `source_id` records the contributing vehicle per point
    and `sensor_pose` is the shared fusion frame.
    """

    xyz: np.ndarray  # (N, 3) float64, sensor frame
    ring: np.ndarray  # (N,) int
    azimuth: np.ndarray  # (N,) int  (column index, not degrees)
    sensor_pose: Pose3
    timestamp_ms: float
    vehicle_id: int
    source_id: np.ndarray | None = None
    frame_index: int | None = None

    def __post_init__(self):
        self.xyz = np.asarray(self.xyz, dtype=float).reshape(-1, 3)
        self.ring = np.asarray(self.ring, dtype=np.int64).reshape(-1)
        self.azimuth = np.asarray(self.azimuth, dtype=np.int64).reshape(-1)
        if not (len(self.xyz) == len(self.ring) == len(self.azimuth)):
            raise ValueError("xyz/ring/azimuth lengths disagree")
        if self.source_id is not None:
            self.source_id = np.asarray(self.source_id, dtype=np.int64).reshape(-1)
            if len(self.source_id) != len(self.xyz):
                raise ValueError("source_id length disagrees")

    def __len__(self) -> int:
        return len(self.xyz)

    def world_points(self) -> np.ndarray:
        if len(self.xyz) == 0:
            return self.xyz.reshape(0, 3)
        return self.sensor_pose.to_world(self.xyz)

    def copy(self) -> "PointCloud":
        return PointCloud(
            self.xyz.copy(),
            self.ring.copy(),
            self.azimuth.copy(),
            self.sensor_pose,
            self.timestamp_ms,
            self.vehicle_id,
            None if self.source_id is None else self.source_id.copy(),
            self.frame_index,
        )

    # -- serialization ------------------------------------------------------

    def save_text(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(f"# timestamp_ms={self.timestamp_ms} vehicle_id={self.vehicle_id}\n")
            for (x, y, z), r, a in zip(self.xyz, self.ring, self.azimuth):
                fh.write(f"{x:.6f} {y:.6f} {z:.6f} {r} {a}\n")

    @classmethod
    def load_text(cls, path, sensor_pose: Pose3 | None = None) -> "PointCloud":
        ts, vid = 0.0, 0
        xyz, ring, az = [], [], []
        with open(path, "r", encoding="ascii") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    for token in line[1:].split():
                        if token.startswith("timestamp_ms="):
                            ts = float(token.split("=", 1)[1])
                        elif token.startswith("vehicle_id="):
                            vid = int(token.split("=", 1)[1])
                    continue
                parts = line.split()
                xyz.append([float(parts[0]), float(parts[1]), float(parts[2])])
                ring.append(int(parts[3]))
                az.append(int(parts[4]))
        return cls(
            np.asarray(xyz, dtype=float).reshape(-1, 3),
            np.asarray(ring, dtype=np.int64),
            np.asarray(az, dtype=np.int64),
            sensor_pose or Pose3(),
            ts,
            vid,
        )

    def save_binary(self, path) -> None:
        pose = self.sensor_pose
        header = struct.pack(
            "<5sBIdI6d",
            _BINARY_MAGIC,
            1,
            len(self.xyz),
            self.timestamp_ms,
            self.vehicle_id,
            pose.position[0],
            pose.position[1],
            pose.position[2],
            pose.yaw,
            pose.pitch,
            pose.roll,
        )
        rec = np.empty(len(self.xyz), dtype=_POINT_DTYPE)
        rec["x"], rec["y"], rec["z"] = (
            self.xyz[:, 0].astype("<f4"),
            self.xyz[:, 1].astype("<f4"),
            self.xyz[:, 2].astype("<f4"),
        )
        rec["ring"] = self.ring.astype("<u2")
        rec["az"] = self.azimuth.astype("<u2")
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(rec.tobytes())

    @classmethod
    def load_binary(cls, path) -> "PointCloud":
        with open(path, "rb") as fh:
            head = fh.read(struct.calcsize("<5sBIdI6d"))
            magic, _ver, n, ts, vid, px, py, pz, yaw, pitch, roll = struct.unpack(
                "<5sBIdI6d", head
            )
            if magic != _BINARY_MAGIC:
                raise ValueError("not a point-cloud binary (bad magic)")
            rec = np.frombuffer(fh.read(n * _POINT_DTYPE.itemsize), dtype=_POINT_DTYPE)
        xyz = np.column_stack(
            [rec["x"].astype(float), rec["y"].astype(float), rec["z"].astype(float)]
        )
        pose = Pose3((px, py, pz), yaw, pitch, roll)
        return cls(
            xyz, rec["ring"].astype(np.int64), rec["az"].astype(np.int64), pose, ts, int(vid)
        )


# ---------------------------------------------------------------------------
# Ray generation and casting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RayBundle:
    """All rays of one sweep from one sensor placement."""

    origin: np.ndarray  # (3,) world
    dirs_world: np.ndarray  # (N, 3) unit
    dirs_local: np.ndarray  # (N, 3) unit
    ring: np.ndarray  # (N,)
    azimuth: np.ndarray  # (N,)
    config: LidarConfig
    sensor_pose: Pose3


def enumerate_rays(cfg: LidarConfig, sensor: Pose3) -> RayBundle:
    """Materialize the ray set: ring-major, azimuth-minor ordering."""
    local = cfg.local_directions()
    world = local @ sensor.rotation().T
    ring = np.repeat(np.arange(cfg.ring_count), cfg.n_azimuth)
    az = np.tile(np.arange(cfg.n_azimuth), cfg.ring_count)
    return RayBundle(
        np.asarray(sensor.position, dtype=float), world, local, ring, az, cfg, sensor
    )


def _ray_triangles_min(origin, dirs, v0, v1, v2, eps=1e-12):
    """Nearest positive hit distance per ray against a triangle batch.

    Vectorized Möller–Trumbore, two-sided.  Returns (t_min, hit_any).
    """
    e1 = v1 - v0  # (M, 3)
    e2 = v2 - v0
    n_rays, n_tris = len(dirs), len(v0)
    t_min = np.full(n_rays, np.inf)
    if n_tris == 0 or n_rays == 0:
        return t_min
    # batch over triangles to bound the (rays x tris) temporary; the origin
    # is shared by all rays, so tvec/qvec are per-triangle quantities
    max_cells = 4_000_000
    step = max(1, max_cells // max(n_rays, 1))
    for s in range(0, n_tris, step):
        sl = slice(s, min(s + step, n_tris))
        pvec = np.cross(dirs[:, None, :], e2[None, sl, :])  # (N, m, 3)
        det = np.einsum("mk,nmk->nm", e1[sl], pvec)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin[None, :] - v0[sl]  # (m, 3)
        u = np.einsum("mk,nmk->nm", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[sl])  # (m, 3)
        v = np.einsum("nk,mk->nm", dirs, qvec) * inv
        t = np.einsum("mk,mk->m", e2[sl], qvec)[None, :] * inv
        valid = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1.0 + 1e-12) & (t > 1e-9)
        t = np.where(valid, t, np.inf)
        t_min = np.minimum(t_min, t.min(axis=1))
    return t_min


def _ray_triangles_all(origin, dirs, v0, v1, v2, eps=1e-12):
    """All positive hits: returns (ray_idx, t) arrays, unsorted."""
    n_rays, n_tris = len(dirs), len(v0)
    if n_tris == 0 or n_rays == 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    e1 = v1 - v0
    e2 = v2 - v0
    out_idx, out_t = [], []
    max_cells = 4_000_000
    step = max(1, max_cells // max(n_rays, 1))
    for s in range(0, n_tris, step):
        sl = slice(s, min(s + step, n_tris))
        pvec = np.cross(dirs[:, None, :], e2[None, sl, :])
        det = np.einsum("mk,nmk->nm", e1[sl], pvec)
        ok = np.abs(det) > eps
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin[None, :] - v0[sl]
        u = np.einsum("mk,nmk->nm", tvec, pvec) * inv
        qvec = np.cross(tvec, e1[sl])
        v = np.einsum("nk,mk->nm", dirs, qvec) * inv
        t = np.einsum("mk,mk->m", e2[sl], qvec)[None, :] * inv
        valid = ok & (u >= -1e-12) & (v >= -1e-12) & (u + v <= 1.0 + 1e-12) & (t > 1e-9)
        ridx, _ = np.nonzero(valid)
        out_idx.append(ridx)
        out_t.append(t[valid])
    return np.concatenate(out_idx), np.concatenate(out_t)


def _candidate_rays(rays: RayBundle, world_verts: np.ndarray) -> np.ndarray:
    """Indices of rays whose (azimuth, elevation) can possibly hit the mesh."""
    cfg = rays.config
    if not rays.sensor_pose.is_level():
        return np.arange(len(rays.dirs_world))
    o = rays.origin
    center = 0.5 * (world_verts.min(axis=0) + world_verts.max(axis=0))
    rad = float(np.max(np.linalg.norm(world_verts[:, :2] - center[None, :2], axis=1)))
    dxy = np.asarray(center[:2]) - o[:2]
    dist = float(np.hypot(dxy[0], dxy[1]))
    if dist <= rad + 0.5:
        return np.arange(len(rays.dirs_world))
    # azimuth window (sensor-local angles)
    theta_c = math.atan2(dxy[1], dxy[0]) - rays.sensor_pose.yaw
    half = math.asin(min(1.0, rad / dist)) + 2.0 * cfg.azimuth_step * DEG
    n_az = cfg.n_azimuth
    az_c = theta_c / (cfg.azimuth_step * DEG)
    span = half / (cfg.azimuth_step * DEG)
    lo_i = int(math.floor(az_c - span))
    hi_i = int(math.ceil(az_c + span))
    az_ok = np.zeros(n_az, dtype=bool)
    az_ok[np.arange(lo_i, hi_i + 1) % n_az] = True
    # elevation window
    zmin = float(world_verts[:, 2].min()) - o[2]
    zmax = float(world_verts[:, 2].max()) - o[2]
    d_near, d_far = max(dist - rad, 0.1), dist + rad
    phis = [
        math.atan2(zmin, d_near),
        math.atan2(zmin, d_far),
        math.atan2(zmax, d_near),
        math.atan2(zmax, d_far),
    ]
    elev = cfg.ring_elevations()
    pad = (elev[1] - elev[0]) if len(elev) > 1 else 0.0
    ring_ok = (elev >= min(phis) - abs(pad)) & (elev <= max(phis) + abs(pad))
    mask = ring_ok[rays.ring] & az_ok[rays.azimuth]
    return np.nonzero(mask)[0]


def cast_occluded(
    scene: Scene,
    cfg: LidarConfig,
    sensor: Pose3,
    t_ms: float,
    vehicle_id: int = 0,
    frame_index: int | None = None,
) -> PointCloud:
    """First-return sweep: nearest surface (object or ground) along each ray.

    The caller is responsible for advancing the scene to the capture time;
    `t_ms` only stamps the output.
    """
    rays = enumerate_rays(cfg, sensor)
    n = len(rays.dirs_world)
    t_best = np.full(n, np.inf)
    dz = rays.dirs_world[:, 2]
    oz = rays.origin[2]
    going_down = dz < -1e-12
    if oz > 0:
        t_ground = np.where(going_down, -oz / np.where(going_down, dz, -1.0), np.inf)
        t_best = np.minimum(t_best, t_ground)
    for obj in scene.objects:
        wverts = obj.pose.to_world(obj.mesh.vertices)
        cand = _candidate_rays(rays, wverts)
        if len(cand) == 0:
            continue
        tris = obj.mesh.triangles
        t_obj = _ray_triangles_min(
            rays.origin,
            rays.dirs_world[cand],
            wverts[tris[:, 0]],
            wverts[tris[:, 1]],
            wverts[tris[:, 2]],
        )
        t_best[cand] = np.minimum(t_best[cand], t_obj)
    hit = np.isfinite(t_best) & (t_best <= cfg.max_range)
    idx = np.nonzero(hit)[0]
    # points are built in the sensor frame as range * local_direction, so
    # the one-point-per-ray and on-ray invariants hold by construction
    xyz = t_best[idx, None] * rays.dirs_local[idx]
    return PointCloud(
        xyz,
        rays.ring[idx],
        rays.azimuth[idx],
        sensor,
        t_ms,
        vehicle_id,
        frame_index=frame_index,
    )


@dataclass(frozen=True)
class NonOccludedHits:
    """Every mesh intersection per ray, nearest first, occlusion ignored."""

    ray_index: np.ndarray  # (K,) index into the bundle
    ring: np.ndarray  # (K,)
    azimuth: np.ndarray  # (K,)
    t: np.ndarray  # (K,) range along the ray, ascending within a ray
    xyz_local: np.ndarray  # (K, 3) sensor frame
    xyz_world: np.ndarray  # (K, 3)
    group_start: np.ndarray  # (G+1,) slice boundaries per distinct ray
    rays: RayBundle

    @property
    def n_rays_hit(self) -> int:
        return len(self.group_start) - 1

    def groups(self):
        """Yield (ring, azimuth, slice) per ray that has at least one hit."""
        for g in range(self.n_rays_hit):
            s = slice(self.group_start[g], self.group_start[g + 1])
            yield int(self.ring[s.start]), int(self.azimuth[s.start]), s


def cast_non_occluded(
    rays: RayBundle, mesh: TriangleMesh, pose: Pose3 | None = None
) -> NonOccludedHits:
    """Intersect rays with a single mesh, keeping every crossing.

    Occlusion by other scene content is deliberately ignored; this is the
    raw visibility a fabricator works with.
    """
    wverts = mesh.vertices if pose is None else pose.to_world(mesh.vertices)
    cand = _candidate_rays(rays, wverts)
    tris = mesh.triangles
    if len(cand) == 0 or len(tris) == 0:
        empty = np.empty(0, dtype=np.int64)
        return NonOccludedHits(
            empty, empty, empty, np.empty(0), np.empty((0, 3)), np.empty((0, 3)),
            np.zeros(1, dtype=np.int64), rays,
        )
    ridx, t = _ray_triangles_all(
        rays.origin,
        rays.dirs_world[cand],
        wverts[tris[:, 0]],
        wverts[tris[:, 1]],
        wverts[tris[:, 2]],
    )
    ridx = cand[ridx]
    t = np.minimum(t, np.inf)
    keep = t <= rays.config.max_range
    ridx, t = ridx[keep], t[keep]
    if len(ridx) == 0:
        empty = np.empty(0, dtype=np.int64)
        return NonOccludedHits(
            empty, empty, empty, np.empty(0), np.empty((0, 3)), np.empty((0, 3)),
            np.zeros(1, dtype=np.int64), rays,
        )
    order = np.lexsort((t, ridx))
    ridx, t = ridx[order], t[order]
    # drop duplicate crossings of shared triangle edges (same ray, same range)
    if len(t) > 1:
        same = (np.diff(ridx) == 0) & (np.abs(np.diff(t)) < 1e-9)
        keep2 = np.concatenate([[True], ~same])
        ridx, t = ridx[keep2], t[keep2]
    xyz_local = t[:, None] * rays.dirs_local[ridx]
    xyz_world = rays.origin[None, :] + t[:, None] * rays.dirs_world[ridx]
    boundaries = np.nonzero(np.diff(ridx))[0] + 1
    group_start = np.concatenate([[0], boundaries, [len(ridx)]]).astype(np.int64)
    return NonOccludedHits(
        ridx, rays.ring[ridx], rays.azimuth[ridx], t, xyz_local, xyz_world,
        group_start, rays,
    )


# ---------------------------------------------------------------------------
# Physics validation
# ---------------------------------------------------------------------------


def physics_violations(
    cloud: PointCloud, cfg: LidarConfig, on_ray_tol: float = EPS_GEO
) -> list[str]:
    """Check a cloud against the sensor model; returns human-readable issues.

    A fused cloud (source_id set) only gets the per-source uniqueness and
    index-range checks, because sensor-frame ray geometry is lost after
    re-projection into the fusion frame.
    """
    issues: list[str] = []
    n_az = cfg.n_azimuth
    if len(cloud) == 0:
        return issues
    if cloud.ring.min() < 0 or cloud.ring.max() >= cfg.ring_count:
        issues.append("ring index out of range")
    if cloud.azimuth.min() < 0 or cloud.azimuth.max() >= n_az:
        issues.append("azimuth index out of range")
    if issues:
        return issues
    if cloud.source_id is not None:
        key = cloud.source_id * cfg.n_rays + cloud.ring * n_az + cloud.azimuth
    else:
        key = cloud.ring * n_az + cloud.azimuth
    uniq, counts = np.unique(key, return_counts=True)
    dup = int(np.sum(counts > 1))
    if dup:
        issues.append(f"{dup} rays carry more than one return")
    if cloud.source_id is None:
        dirs = cfg.local_directions()[cloud.ring * n_az + cloud.azimuth]
        proj = np.einsum("nk,nk->n", cloud.xyz, dirs)
        perp = cloud.xyz - proj[:, None] * dirs
        off_ray = np.linalg.norm(perp, axis=1)
        bad = int(np.sum((off_ray > on_ray_tol) | (proj <= 0)))
        if bad:
            issues.append(
                f"{bad} points off their ray beyond {on_ray_tol:g} m (max "
                f"{off_ray.max():.3g})"
            )
        ranges = np.linalg.norm(cloud.xyz, axis=1)
        far = int(np.sum(ranges > cfg.max_range + on_ray_tol))
        if far:
            issues.append(f"{far} points beyond max range")
    return issues


def validate_physics(
    cloud: PointCloud, cfg: LidarConfig, on_ray_tol: float = EPS_GEO
) -> bool:
    """True when the cloud is consistent with the one-return-per-ray model."""
    return not physics_violations(cloud, cfg, on_ray_tol)

"""Stand-in collaborative perception heads.

Three fusion styles over the same synthetic world:

* early  - raw clouds are merged, then a cluster-and-score detector runs;
* intermediate - each vehicle rasterizes a 2-channel BEV feature map,
  maps are fused cell-wise by max, and a fixed 3x3 convolutional head
  scores cells (all gradients of this head are available in closed form);
* late   - per-vehicle detection lists are merged by score-keeping NMS.

The detectors are calibrated stand-ins, not learned models: simple enough
to reason about, rich enough that hiding or hallucinating objects takes
genuine work.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
import shapely
import shapely.geometry as sgeom

from .cluster import fixed_radius_clusters
from .geometry import OrientedBox, Polygon, Region, box_iou, min_area_rect
from .lidar import PointCloud, Pose3

_MAP_MAGIC = b"CPFM1"


@dataclass(frozen=True)
class GridSpec:
    """World-frame BEV grid; cell (i, j) spans origin + [i, i+1) x [j, j+1) cells."""

    origin: tuple[float, float]
    cell_size: float = 0.5
    width: int = 128
    height: int = 64

    def __post_init__(self):
        if self.cell_size <= 0 or self.width < 1 or self.height < 1:
            raise ValueError("bad grid spec")

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return (
            int(math.floor((x - self.origin[0]) / self.cell_size)),
            int(math.floor((y - self.origin[1]) / self.cell_size)),
        )

    def cell_center(self, i, j):
        return (
            self.origin[0] + (np.asarray(i) + 0.5) * self.cell_size,
            self.origin[1] + (np.asarray(j) + 0.5) * self.cell_size,
        )

    def cell_box(self, i: int, j: int) -> sgeom.Polygon:
        x0 = self.origin[0] + i * self.cell_size
        y0 = self.origin[1] + j * self.cell_size
        return sgeom.box(x0, y0, x0 + self.cell_size, y0 + self.cell_size)


@dataclass
class FeatureMap:
    """Per-cell features: channel 0 = log(1 + count), channel 1 = max height."""

    grid: GridSpec
    values: np.ndarray  # (width, height, 2) float
    timestamp_ms: float = 0.0
    vehicle_id: int = 0

    HEIGHT_CLAMP = 3.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expect = (self.grid.width, self.grid.height, 2)
        if self.values.shape != expect:
            raise ValueError(f"values must have shape {expect}")

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.grid, self.values.copy(), self.timestamp_ms, self.vehicle_id)

    def save_binary(self, path) -> None:
        g = self.grid
        header = struct.pack(
            "<5sB2dd3IdI",
            _MAP_MAGIC, 1, g.origin[0], g.origin[1], g.cell_size,
            g.width, g.height, 2, self.timestamp_ms, self.vehicle_id,
        )
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.values.astype("<f4").tobytes())

    @classmethod
    def load_binary(cls, path) -> "FeatureMap":
        fmt = "<5sB2dd3IdI"
        with open(path, "rb") as fh:
            magic, _ver, ox, oy, cell, w, h, c, ts, vid = struct.unpack(
                fmt, fh.read(struct.calcsize(fmt))
            )
            if magic != _MAP_MAGIC:
                raise ValueError("not a feature-map binary (bad magic)")
            if c != 2:
                raise ValueError("unsupported channel count")
            vals = np.frombuffer(fh.read(w * h * c * 4), dtype="<f4")
        return cls(
            GridSpec((ox, oy), cell, w, h),
            vals.reshape(w, h, c).astype(float),
            ts,
            int(vid),
        )


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    score: float

    def to_json(self) -> dict:
        return {"box": self.box.to_json(), "score": self.score}

    @classmethod
    def from_json(cls, obj: dict) -> "Detection":
        return cls(OrientedBox.from_json(obj["box"]), obj["score"])


def _default_kernel() -> np.ndarray:
    # channel 0 (density): strong centre, mild neighbourhood support;
    # channel 1 (height): small centre, inhibitory surround.  The surround
    # inhibition is what makes cell scores non-monotone in tall clutter.
    k = np.zeros((2, 3, 3))
    k[0, :, :] = 0.05
    k[0, 1, 1] = 0.60
    k[1, :, :] = -0.35
    k[1, 1, 1] = 0.20
    k.setflags(write=False)
    return k


@dataclass(frozen=True)
class DetectorParams:
    """Tunables of the stand-in detectors (shared across fusion modes)."""

    # clustering (early fusion)
    cluster_radius: float = 0.8
    min_cluster_size: int = 5
    ground_z_max: float = 0.15
    # early scoring: sigmoid(a_density * density_hat + a_coverage * coverage + bias)
    a_density: float = 1.2
    a_coverage: float = 7.0
    score_bias: float = -3.4
    rho_ref: float = 6.0
    min_hull_area: float = 0.25
    cover_band: float = 0.25
    coverage_bins: int = 36
    # shared post-processing
    score_threshold: float = 0.5
    nms_iou: float = 0.1
    # intermediate head
    kernel: np.ndarray = field(default_factory=_default_kernel)
    conv_bias: float = -0.10


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def nms(detections: list[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy non-maximum suppression, highest score first."""
    ordered = sorted(detections, key=lambda d: (-d.score, d.box.center))
    kept: list[Detection] = []
    for det in ordered:
        if all(box_iou(det.box, k.box) <= iou_thresh for k in kept):
            kept.append(det)
    return kept


# ---------------------------------------------------------------------------
# Early fusion
# ---------------------------------------------------------------------------


def fuse_early(clouds: list[PointCloud], target_frame: Pose3 | None = None) -> PointCloud:
    """Merge sweeps into one cloud expressed in `target_frame` (world default).

    Every cloud is lifted through its advertised sensor pose, so pose error
    directly becomes misalignment.  Clouds must agree on frame index.
    """
    if not clouds:
        raise ValueError("nothing to fuse")
    frames = {c.frame_index for c in clouds if c.frame_index is not None}
    if len(frames) > 1:
        raise ValueError(f"refusing to fuse mismatched frame indices: {sorted(frames)}")
    target = target_frame or Pose3()
    xyz, ring, az, src = [], [], [], []
    for c in clouds:
        w = c.world_points()
        xyz.append(target.to_local(w) if len(w) else w)
        ring.append(c.ring)
        az.append(c.azimuth)
        if c.source_id is not None:
            src.append(c.source_id)
        else:
            src.append(np.full(len(c), c.vehicle_id, dtype=np.int64))
    return PointCloud(
        np.vstack(xyz) if xyz else np.empty((0, 3)),
        np.concatenate(ring),
        np.concatenate(az),
        target,
        max(c.timestamp_ms for c in clouds),
        clouds[0].vehicle_id,
        source_id=np.concatenate(src),
        frame_index=next(iter(frames)) if frames else None,
    )


def detect_early(
    cloud: PointCloud, road: Polygon, params: DetectorParams = DetectorParams()
) -> list[Detection]:
    """Cluster non-ground returns and score clusters as objects.

    The score rewards clusters that are dense for their hull and whose hull
    boundary is observed from many directions (several faces were actually
    measured, not just one thin arc of returns).
    """
    w = cloud.world_points()
    if len(w) == 0:
        return []
    keep = w[:, 2] > params.ground_z_max
    pts = w[keep][:, :2]
    if len(pts) < params.min_cluster_size:
        return []
    road_geom = road.shapely
    dets: list[Detection] = []
    for idx in fixed_radius_clusters(pts, params.cluster_radius, params.min_cluster_size):
        cxy = pts[idx]
        score = _cluster_score(cxy, params)
        if score < params.score_threshold:
            continue
        box = min_area_rect(cxy)
        if not road_geom.intersects(sgeom.Point(box.center)):
            continue
        dets.append(Detection(box, float(score)))
    return nms(dets, params.nms_iou)


def _cluster_score(cxy: np.ndarray, params: DetectorParams) -> float:
    n = len(cxy)
    hull = sgeom.MultiPoint(cxy).convex_hull
    hull_area = hull.area if hasattr(hull, "area") else 0.0
    density = n / max(hull_area, params.min_hull_area)
    d_hat = density / (density + params.rho_ref)
    coverage = _boundary_coverage(cxy, hull, params)
    z = params.a_density * d_hat + params.a_coverage * coverage + params.score_bias
    return float(_sigmoid(z))


def _boundary_coverage(cxy: np.ndarray, hull, params: DetectorParams) -> float:
    """Fraction of bearing bins (about the centroid) holding a point that
    lies on (within cover_band of) the cluster's hull boundary."""
    boundary = hull.boundary if hull.geom_type == "Polygon" else hull
    pts = shapely.points(cxy)
    dist = shapely.distance(boundary, pts)
    covered = dist <= params.cover_band
    if not np.any(covered):
        return 0.0
    centroid = cxy.mean(axis=0)
    rel = cxy[covered] - centroid
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    nb = params.coverage_bins
    bins = np.floor((ang + math.pi) / (2 * math.pi) * nb).astype(int)
    bins = np.clip(bins, 0, nb - 1)
    return len(np.unique(bins)) / nb


# ---------------------------------------------------------------------------
# Intermediate fusion
# ---------------------------------------------------------------------------


def extract_features(cloud: PointCloud, grid: GridSpec,
                     ground_z_max: float = 0.15) -> FeatureMap:
    """Rasterize obstacle returns (z above the ground band) onto the grid."""
    vals = np.zeros((grid.width, grid.height, 2))
    w = cloud.world_points()
    if len(w):
        keep = w[:, 2] > ground_z_max
        w = w[keep]
    if len(w):
        i = np.floor((w[:, 0] - grid.origin[0]) / grid.cell_size).astype(np.int64)
        j = np.floor((w[:, 1] - grid.origin[1]) / grid.cell_size).astype(np.int64)
        ok = (i >= 0) & (i < grid.width) & (j >= 0) & (j < grid.height)
        i, j, z = i[ok], j[ok], w[ok, 2]
        np.add.at(vals[:, :, 0], (i, j), 1.0)
        vals[:, :, 0] = np.log1p(vals[:, :, 0])
        zc = np.clip(z, 0.0, FeatureMap.HEIGHT_CLAMP)
        np.maximum.at(vals[:, :, 1], (i, j), zc)
    return FeatureMap(grid, vals, cloud.timestamp_ms, cloud.vehicle_id)


def fuse_intermediate(maps: list[FeatureMap]) -> FeatureMap:
    """Cell-wise, channel-wise maximum across vehicles."""
    vals, _src = fuse_values([m.values for m in maps])
    return FeatureMap(
        maps[0].grid, vals, max(m.timestamp_ms for m in maps), maps[0].vehicle_id
    )


def fuse_values(value_list: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Max-fuse raw grids; also return the argmax source per cell/channel.

    Ties go to the earliest map in the list, which callers exploit by
    putting the map whose gradient they care about first.
    """
    if not value_list:
        raise ValueError("nothing to fuse")
    stack = np.stack(value_list)  # (M, W, H, C)
    src = np.argmax(stack, axis=0)
    fused = np.take_along_axis(stack, src[None, ...], axis=0)[0]
    return fused, src


def objectness(values: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Per-cell logits: 3x3 correlation of the feature channels plus bias."""
    k = params.kernel
    w, h, _c = values.shape
    padded = np.pad(values, ((1, 1), (1, 1), (0, 0)))
    u = np.full((w, h), params.conv_bias)
    for di in range(3):
        for dj in range(3):
            for ch in range(2):
                u += k[ch, di, dj] * padded[di : di + w, dj : dj + h, ch]
    return u


def objectness_backward(grad_u: np.ndarray, params: DetectorParams) -> np.ndarray:
    """Adjoint of `objectness` w.r.t. the fused feature values."""
    k = params.kernel
    w, h = grad_u.shape
    grad_pad = np.zeros((w + 2, h + 2, 2))
    for di in range(3):
        for dj in range(3):
            for ch in range(2):
                grad_pad[di : di + w, dj : dj + h, ch] += k[ch, di, dj] * grad_u
    return grad_pad[1:-1, 1:-1, :]


def grid_components(mask: np.ndarray) -> list[np.ndarray]:
    """8-connected components of a boolean grid as (n, 2) index arrays."""
    comps: list[np.ndarray] = []
    seen = np.zeros_like(mask, dtype=bool)
    w, h = mask.shape
    for i0, j0 in zip(*np.nonzero(mask)):
        if seen[i0, j0]:
            continue
        stack = [(i0, j0)]
        seen[i0, j0] = True
        cells = []
        while stack:
            i, j = stack.pop()
            cells.append((i, j))
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    ni, nj = i + di, j + dj
                    if 0 <= ni < w and 0 <= nj < h and mask[ni, nj] and not seen[ni, nj]:
                        seen[ni, nj] = True
                        stack.append((ni, nj))
        comps.append(np.asarray(sorted(cells), dtype=np.int64))
    return comps


@dataclass(frozen=True)
class Proposal:
    """A connected high-objectness blob before road clipping and NMS."""

    cells: np.ndarray  # (n, 2) grid indices
    box: OrientedBox
    score: float  # max objectness (post-sigmoid) over the blob
    argmax_cell: tuple[int, int]


def proposals_from_scores(
    scores: np.ndarray, grid: GridSpec, threshold: float
) -> list[Proposal]:
    out: list[Proposal] = []
    for cells in grid_components(scores >= threshold):
        i, j = cells[:, 0], cells[:, 1]
        x0 = grid.origin[0] + i * grid.cell_size
        y0 = grid.origin[1] + j * grid.cell_size
        c = grid.cell_size
        corners = np.concatenate(
            [
                np.column_stack([x0, y0]),
                np.column_stack([x0 + c, y0]),
                np.column_stack([x0, y0 + c]),
                np.column_stack([x0 + c, y0 + c]),
            ]
        )
        box = min_area_rect(corners)
        s = scores[i, j]
        k = int(np.argmax(s))
        out.append(
            Proposal(cells, box, float(s[k]), (int(cells[k, 0]), int(cells[k, 1])))
        )
    return out


def detect_intermediate(
    fused: FeatureMap, road: Polygon, params: DetectorParams = DetectorParams()
) -> list[Detection]:
    """Threshold the convolutional objectness and box up the surviving blobs."""
    s = _sigmoid(objectness(fused.values, params))
    road_region = Region.from_polygons([road])
    dets: list[Detection] = []
    for prop in proposals_from_scores(s, fused.grid, params.score_threshold):
        clipped = Region.from_polygons([prop.box.footprint()]).intersection(road_region)
        if clipped.is_empty:
            continue
        rings = clipped.to_polygons()
        verts = np.vstack([r.array for r in rings])
        dets.append(Detection(min_area_rect(verts), prop.score))
    return nms(dets, params.nms_iou)


# ---------------------------------------------------------------------------
# Late fusion
# ---------------------------------------------------------------------------


def detect_late(
    detection_lists: list[list[Detection]], params: DetectorParams = DetectorParams()
) -> list[Detection]:
    """Union of the per-vehicle lists; overlaps keep the highest score."""
    merged = [d for lst in detection_lists for d in lst]
    return nms(merged, params.nms_iou)


# ---------------------------------------------------------------------------
# Matching helpers shared by the evaluation code
# ---------------------------------------------------------------------------


def match_detections(
    detections: list[Detection], truths: list[OrientedBox], iou_thresh: float = 0.3
) -> tuple[int, int, int]:
    """Greedy one-to-one matching; returns (true_pos, false_pos, false_neg)."""
    taken = [False] * len(truths)
    tp = 0
    for det in sorted(detections, key=lambda d: -d.score):
        best, best_iou = -1, iou_thresh
        for gi, gt in enumerate(truths):
            if taken[gi]:
                continue
            iou = box_iou(det.box, gt)
            if iou >= best_iou:
                best, best_iou = gi, iou
        if best >= 0:
            taken[best] = True
            tp += 1
    fp = len(detections) - tp
    fn = len(truths) - tp
    return tp, fp, fn


def best_iou_and_score(
    detections: list[Detection], target: OrientedBox
) -> tuple[float, float]:
    """Highest-IoU overlap with `target` and the best score among overlaps."""
    best_iou, best_score = 0.0, 0.0
    for det in detections:
        iou = box_iou(det.box, target)
        if iou > best_iou:
            best_iou = iou
        if iou > 0.0 and det.score > best_score:
            best_score = det.score
    return best_iou, best_score

"""Fusion and detector tests for all three pipeline styles.

Feature binning is checked against a brute-force double loop, the conv
head's hand-written adjoint against central finite differences, and the
early detector's score against its documented monotonicity.
"""

import math

import numpy as np
import pytest

import oracles
from covp.cluster import fixed_radius_clusters
from covp.geometry import OrientedBox, Polygon, box_iou
from covp.lidar import (
    LidarConfig,
    PointCloud,
    Pose3,
    Scene,
    SceneObject,
    TriangleMesh,
    cast_occluded,
)
from covp.perception import (
    Detection,
    DetectorParams,
    FeatureMap,
    GridSpec,
    best_iou_and_score,
    detect_early,
    detect_intermediate,
    detect_late,
    extract_features,
    fuse_early,
    fuse_intermediate,
    fuse_values,
    match_detections,
    nms,
    objectness,
    objectness_backward,
)

ROAD = Polygon(((-50, -8), (200, -8), (200, 8), (-50, 8)))
CFG = LidarConfig(ring_count=32, vertical_fov=(-25.0, 3.0), azimuth_step=0.5)
GRID = GridSpec((-10.0, -16.0), 0.5, 200, 64)


def multi_view_scene(d=15.0, yaw=0.2):
    scene = Scene(
        (SceneObject(TriangleMesh.cuboid(), Pose3((d, 1.5, 0), yaw), (0, 0), 0, 1),),
        ROAD,
    )
    views = [
        cast_occluded(scene, CFG, Pose3((0, 0, 1.8)), 0.0, 0, 0),
        cast_occluded(scene, CFG, Pose3((d + 12, -4, 1.8), 3.0), 0.0, 1, 0),
        cast_occluded(scene, CFG, Pose3((d - 5, 6, 1.8), -1.2), 0.0, 2, 0),
    ]
    return scene, views


class TestClustering:
    def test_two_blobs_split(self):
        rng = np.random.default_rng(0)
        a = rng.normal((0, 0), 0.2, size=(30, 2))
        b = rng.normal((5, 0), 0.2, size=(25, 2))
        out = fixed_radius_clusters(np.vstack([a, b]), 0.8, 5)
        assert sorted(len(c) for c in out) == [25, 30]

    def test_chain_connectivity(self):
        pts = np.column_stack([np.arange(10) * 0.7, np.zeros(10)])
        out = fixed_radius_clusters(pts, 0.8, 1)
        assert len(out) == 1 and len(out[0]) == 10

    def test_min_size_filter(self):
        pts = np.array([[0.0, 0.0], [0.1, 0.0], [9.0, 9.0]])
        out = fixed_radius_clusters(pts, 0.5, 2)
        assert len(out) == 1 and len(out[0]) == 2


class TestFuseEarly:
    def test_identity_frame_round_trip(self):
        _, views = multi_view_scene()
        fused = fuse_early(views)
        assert len(fused) == sum(len(v) for v in views)
        # world geometry preserved
        back = fused.world_points()
        ref = np.vstack([v.world_points() for v in views])
        assert np.allclose(back, ref, atol=1e-9)
        assert fused.source_id is not None
        assert set(np.unique(fused.source_id)) == {0, 1, 2}

    def test_fusion_into_local_frame(self):
        _, views = multi_view_scene()
        frame = Pose3((3.0, -1.0, 0.0), yaw=0.8)
        fused = fuse_early(views, frame)
        assert np.allclose(
            frame.to_world(fused.xyz),
            np.vstack([v.world_points() for v in views]),
            atol=1e-9,
        )

    def test_mismatched_frame_index_rejected(self):
        _, views = multi_view_scene()
        views[1].frame_index = 3
        with pytest.raises(ValueError):
            fuse_early(views)

    def test_pose_error_shifts_points(self):
        _, views = multi_view_scene()
        v = views[0]
        skewed = PointCloud(
            v.xyz, v.ring, v.azimuth,
            Pose3((0.5, 0.0, 1.8)), v.timestamp_ms, v.vehicle_id,
            frame_index=v.frame_index,
        )
        fused = fuse_early([skewed])
        assert np.allclose(
            fused.world_points()[:, 0], v.world_points()[:, 0] + 0.5, atol=1e-9
        )


class TestFeatures:
    def test_empty_cloud_zero_map(self):
        c = PointCloud(np.empty((0, 3)), [], [], Pose3(), 0.0, 0)
        fm = extract_features(c, GRID)
        assert not np.any(fm.values)

    def test_single_point_single_cell(self):
        c = PointCloud(np.array([[3.3, 0.4, 1.0]]), [0], [0], Pose3(), 0.0, 0)
        fm = extract_features(c, GRID)
        nz = np.nonzero(fm.values[:, :, 0])
        assert len(nz[0]) == 1
        i, j = int(nz[0][0]), int(nz[1][0])
        assert (i, j) == GRID.cell_of(3.3, 0.4)
        assert fm.values[i, j, 0] == pytest.approx(math.log(2.0))
        assert fm.values[i, j, 1] == pytest.approx(1.0)

    def test_counts_match_brute_force(self):
        rng = np.random.default_rng(8)
        pts = np.column_stack([
            rng.uniform(-5, 60, 500), rng.uniform(-14, 14, 500), rng.uniform(0.2, 2.5, 500)
        ])
        c = PointCloud(pts, np.zeros(500), np.zeros(500), Pose3(), 0.0, 0)
        fm = extract_features(c, GRID)
        ref = oracles.brute_force_bins(
            pts[:, :2], GRID.origin, GRID.cell_size, GRID.width, GRID.height
        )
        assert np.allclose(fm.values[:, :, 0], np.log1p(ref), atol=1e-12)

    def test_ground_points_excluded(self):
        pts = np.array([[5.0, 0.0, 0.05], [5.0, 0.0, 1.2]])
        c = PointCloud(pts, [0, 0], [0, 1], Pose3(), 0.0, 0)
        fm = extract_features(c, GRID)
        i, j = GRID.cell_of(5.0, 0.0)
        assert fm.values[i, j, 0] == pytest.approx(math.log(2.0))  # only one point

    def test_height_clamped(self):
        pts = np.array([[5.0, 0.0, 7.5]])
        fm = extract_features(PointCloud(pts, [0], [0], Pose3(), 0.0, 0), GRID)
        i, j = GRID.cell_of(5.0, 0.0)
        assert fm.values[i, j, 1] == pytest.approx(3.0)

    def test_map_binary_round_trip(self, tmp_path):
        _, views = multi_view_scene()
        fm = extract_features(views[0], GRID)
        fm.timestamp_ms, fm.vehicle_id = 123.0, 4
        p = tmp_path / "map.bin"
        fm.save_binary(p)
        back = FeatureMap.load_binary(p)
        assert back.grid == fm.grid
        assert back.timestamp_ms == 123.0 and back.vehicle_id == 4
        assert np.allclose(back.values, fm.values, atol=1e-5)


class TestFuseIntermediate:
    def test_single_map_identity(self):
        _, views = multi_view_scene()
        fm = extract_features(views[0], GRID)
        fused = fuse_intermediate([fm])
        assert np.array_equal(fused.values, fm.values)

    def test_zeros_neutral(self):
        _, views = multi_view_scene()
        fm = extract_features(views[0], GRID)
        zero = FeatureMap(GRID, np.zeros_like(fm.values))
        assert np.array_equal(fuse_intermediate([fm, zero]).values, fm.values)

    def test_commutative_associative(self):
        rng = np.random.default_rng(4)
        ms = [FeatureMap(GridSpec((0, 0), 0.5, 6, 5), rng.uniform(0, 3, (6, 5, 2)))
              for _ in range(3)]
        a = fuse_intermediate([ms[0], fuse_intermediate([ms[1], ms[2]])]).values
        b = fuse_intermediate([fuse_intermediate([ms[2], ms[0]]), ms[1]]).values
        assert np.allclose(a, b, atol=1e-15)

    def test_tie_argmax_prefers_first(self):
        v = np.ones((2, 2, 2))
        _, src = fuse_values([v, v.copy()])
        assert np.all(src == 0)


class TestDetectEarly:
    def test_empty_cloud(self):
        c = PointCloud(np.empty((0, 3)), [], [], Pose3(), 0.0, 0)
        assert detect_early(c, ROAD) == []

    def test_multi_view_car_detected(self):
        scene, views = multi_view_scene(15.0)
        dets = detect_early(fuse_early(views), ROAD)
        gt = scene.objects[0].footprint_box()
        assert len(dets) == 1
        assert box_iou(dets[0].box, gt) > 0.5
        assert dets[0].score > 0.9

    def test_single_view_face_not_detected(self):
        # one sensor sees a single flat face: boundary coverage stays low
        scene, views = multi_view_scene(15.0)
        dets = detect_early(fuse_early([views[0]]), ROAD)
        gt = scene.objects[0].footprint_box()
        assert all(box_iou(d.box, gt) == 0.0 for d in dets)

    def test_off_road_cluster_dropped(self):
        rng = np.random.default_rng(1)
        # a tight well-covered blob far off the road polygon
        ring = rng.uniform(0, 2 * math.pi, 300)
        pts = np.column_stack([
            5 + 1.0 * np.cos(ring), 12 + 1.0 * np.sin(ring), rng.uniform(0.3, 1.4, 300)
        ])
        c = PointCloud(pts, np.zeros(300), np.arange(300), Pose3(), 0.0, 0)
        assert detect_early(c, ROAD) == []
        wide_road = Polygon(((-50, -20), (200, -20), (200, 20), (-50, 20)))
        assert len(detect_early(c, wide_road)) == 1

    def test_score_monotone_in_count_and_coverage(self):
        from covp.perception import _cluster_score

        rng = np.random.default_rng(2)
        params = DetectorParams()
        # ring cluster: points on a box boundary, observed all around
        box = OrientedBox((0, 0), 4.0, 2.0, 0.3)
        per_edge = 40
        pts = []
        corners = box.corners()
        for k in range(4):
            p0, p1 = corners[k], corners[(k + 1) % 4]
            for f in np.linspace(0, 1, per_edge, endpoint=False):
                pts.append(p0 + f * (p1 - p0))
        pts = np.asarray(pts) + rng.normal(0, 0.01, (len(pts), 2))
        full = _cluster_score(pts, params)
        half_arc = _cluster_score(pts[: len(pts) // 4], params)  # one face only
        sparse = _cluster_score(pts[::4], params)
        assert full > sparse > 0.0
        assert full > half_arc

    def test_nms_suppresses_overlaps(self):
        a = Detection(OrientedBox((0, 0), 4, 2, 0.0), 0.9)
        b = Detection(OrientedBox((0.3, 0), 4, 2, 0.0), 0.8)
        c = Detection(OrientedBox((20, 0), 4, 2, 0.0), 0.7)
        kept = nms([a, b, c], 0.1)
        assert [round(d.score, 1) for d in kept] == [0.9, 0.7]


class TestIntermediateHead:
    def test_zero_map_no_detections(self):
        fm = FeatureMap(GRID, np.zeros((GRID.width, GRID.height, 2)))
        assert detect_intermediate(fm, ROAD) == []

    def test_multi_view_car_detected(self):
        scene, views = multi_view_scene(15.0)
        fused = fuse_intermediate([extract_features(v, GRID) for v in views])
        dets = detect_intermediate(fused, ROAD)
        gt = scene.objects[0].footprint_box()
        assert len(dets) == 1
        assert box_iou(dets[0].box, gt) > 0.3
        assert dets[0].score > 0.5

    def test_tall_sparse_halo_suppresses_car(self):
        # raising only the height channel around the car (possible for a
        # max-fused lying map, impossible for benign returns) kills the
        # detection without creating a new one
        scene, views = multi_view_scene(15.0)
        maps = [extract_features(v, GRID) for v in views]
        liar = maps[1].copy()
        ci, cj = GRID.cell_of(15.0, 1.5)
        liar.values[ci - 7 : ci + 8, cj - 5 : cj + 6, 1] = 3.0
        dets = detect_intermediate(fuse_intermediate([liar, maps[0], maps[2]]), ROAD)
        gt = scene.objects[0].footprint_box()
        assert best_iou_and_score(dets, gt) == (0.0, 0.0)

    def test_off_road_blob_clipped(self):
        vals = np.zeros((GRID.width, GRID.height, 2))
        i, j = GRID.cell_of(20.0, -12.0)  # off road
        vals[i - 2 : i + 3, j - 1 : j + 2, 0] = 4.5
        dets = detect_intermediate(FeatureMap(GRID, vals), ROAD)
        assert dets == []

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        params = DetectorParams()
        vals = rng.uniform(0, 3, (7, 6, 2))
        # random adjoint seed defines a scalar function L = sum(g * u(v))
        g = rng.normal(size=(7, 6))

        def scalar(v):
            return float(np.sum(g * objectness(v, params)))

        analytic = objectness_backward(g, params)
        numeric = oracles.central_diff(scalar, vals.copy(), h=1e-5)
        denom = max(1e-12, float(np.max(np.abs(numeric))))
        assert np.max(np.abs(analytic - numeric)) / denom < 1e-6


class TestLateFusion:
    def test_union_of_disjoint_lists(self):
        a = [Detection(OrientedBox((0, 0), 4, 2, 0.0), 0.8)]
        b = [Detection(OrientedBox((20, 0), 4, 2, 0.0), 0.7)]
        assert len(detect_late([a, b])) == 2

    def test_duplicate_keeps_max_score(self):
        box = OrientedBox((5, 0), 4, 2, 0.1)
        a = [Detection(box, 0.6)]
        b = [Detection(box, 0.9)]
        out = detect_late([a, b])
        assert len(out) == 1
        assert out[0].score == pytest.approx(0.9)

    def test_empty_inputs(self):
        assert detect_late([[], []]) == []


class TestMatching:
    def test_counts(self):
        gt = [OrientedBox((0, 0), 4, 2, 0.0), OrientedBox((20, 0), 4, 2, 0.0)]
        dets = [
            Detection(OrientedBox((0.2, 0), 4, 2, 0.0), 0.9),
            Detection(OrientedBox((40, 0), 4, 2, 0.0), 0.8),
        ]
        assert match_detections(dets, gt) == (1, 1, 1)

    def test_best_iou_and_score(self):
        target = OrientedBox((0, 0), 4, 2, 0.0)
        dets = [
            Detection(OrientedBox((0.5, 0), 4, 2, 0.0), 0.7),
            Detection(OrientedBox((30, 0), 4, 2, 0.0), 0.95),
        ]
        iou, score = best_iou_and_score(dets, target)
        assert 0.5 < iou < 1.0
        assert score == pytest.approx(0.7)

"""Fabrication attack tests.

The central oracle: removing an object behind a cuboid cloak with
closest-crossing sampling must reproduce, ray for ray, an honest sweep of a
scene where that cuboid actually stands in the object's place.
"""

import math

import numpy as np
import pytest

from covp.attack_raycast import (
    AdvShapeSearchConfig,
    AttackCase,
    RaySwapRecord,
    fabricate_cloud,
    localize_target,
    naive_dense_cloud,
    point_sampling,
    radial_contraction,
    search_adversarial_shape,
    transform_attack,
    transform_model,
)
from covp.geometry import OrientedBox, Polygon
from covp.lidar import (
    LidarConfig,
    Pose3,
    Scene,
    SceneObject,
    TriangleMesh,
    cast_non_occluded,
    cast_occluded,
    enumerate_rays,
    physics_violations,
    validate_physics,
)
from covp.perception import best_iou_and_score, detect_early, fuse_early

CFG = LidarConfig(ring_count=32, vertical_fov=(-25.0, 3.0), azimuth_step=0.5)
ROAD = Polygon.from_array([[-60.0, -8.0], [60.0, -8.0], [60.0, 8.0], [-60.0, 8.0]])
CAR = TriangleMesh.cuboid()
APOSE = Pose3((-10.0, 3.0, 1.8))
VPOSE = Pose3((0.0, -4.0, 1.8))
TARGET = OrientedBox((12.0, 1.0), 4.5, 2.0, 0.3)


def towers(pull=0.3):
    base = TriangleMesh.cuboid(subdiv=2)
    return TriangleMesh(radial_contraction(base, pull), base.triangles)


class TestTransformModel:
    def test_footprint_matches_target(self):
        placed = transform_model(CAR, TARGET)
        lo, hi = placed.bbox
        # rotate extents back into the box frame
        v = placed.vertices[:, :2] - np.array(TARGET.center)
        c, s = math.cos(-TARGET.yaw), math.sin(-TARGET.yaw)
        v = v @ np.array([[c, -s], [s, c]]).T
        assert v[:, 0].max() - v[:, 0].min() == pytest.approx(4.5, abs=1e-9)
        assert v[:, 1].max() - v[:, 1].min() == pytest.approx(2.0, abs=1e-9)
        assert lo[2] == pytest.approx(0.0, abs=1e-12)

    def test_margin_grows_each_side(self):
        placed = transform_model(CAR, TARGET, margin=0.6, height=2.2)
        v = placed.vertices[:, :2] - np.array(TARGET.center)
        c, s = math.cos(-TARGET.yaw), math.sin(-TARGET.yaw)
        v = v @ np.array([[c, -s], [s, c]]).T
        assert v[:, 0].max() == pytest.approx(2.25 + 0.6, abs=1e-9)
        assert v[:, 1].min() == pytest.approx(-(1.0 + 0.6), abs=1e-9)
        assert placed.vertices[:, 2].max() == pytest.approx(2.2, abs=1e-9)

    def test_aspect_distortion_allowed(self):
        squat = OrientedBox((0.0, 0.0), 8.0, 1.0, 0.0)
        placed = transform_model(CAR, squat)
        lo, hi = placed.bbox
        assert hi[0] - lo[0] == pytest.approx(8.0, abs=1e-9)
        assert hi[1] - lo[1] == pytest.approx(1.0, abs=1e-9)


class TestPointSampling:
    def _hits_two_crossings(self, n_rays=400):
        """Synthetic hit set: every ray has a near and a far crossing."""
        box = transform_model(CAR, OrientedBox((15.0, 0.0), 4.5, 2.0, 0.0))
        rays = enumerate_rays(CFG, Pose3((0.0, 0.0, 1.0)))
        hits = cast_non_occluded(rays, box)
        sizes = np.diff(hits.group_start)
        assert np.all(sizes >= 2)
        return hits

    def test_closest_when_sigma_zero(self):
        hits = self._hits_two_crossings()
        rng = np.random.default_rng(0)
        ring, az, loc, wor = point_sampling(hits, np.empty((0, 3)), 0.0, rng)
        first = hits.group_start[:-1]
        assert np.array_equal(loc, hits.xyz_local[first])
        assert np.array_equal(ring, hits.ring[first])

    def test_exactly_one_point_per_ray(self):
        hits = self._hits_two_crossings()
        ring, az, loc, wor = point_sampling(
            hits, np.empty((0, 3)), 0.7, np.random.default_rng(1)
        )
        keys = ring * CFG.n_azimuth + az
        assert len(np.unique(keys)) == len(keys) == hits.n_rays_hit

    def test_sampling_prefers_surfaces_near_benign_sensor(self):
        # benign sensor sits behind the box, so far crossings carry more weight
        hits = self._hits_two_crossings()
        behind = np.array([[22.0, 0.0, 1.8]])
        rng = np.random.default_rng(2)
        ring, az, loc, wor = point_sampling(hits, behind, 1.0, rng)
        first = hits.xyz_world[hits.group_start[:-1]]
        took_far = np.sum(~np.all(np.isclose(wor, first, atol=1e-12), axis=1))
        frac = took_far / len(wor)
        assert frac > 0.55  # weights 1/(1+d^2) favour the far wall

    def test_sigma_validation(self):
        hits = self._hits_two_crossings()
        with pytest.raises(ValueError):
            point_sampling(hits, np.empty((0, 3)), 1.5, np.random.default_rng(0))


class TestFabricateSpoof:
    def setup_method(self):
        self.scene = Scene(objects=[], road=ROAD)
        self.own = cast_occluded(self.scene, CFG, APOSE, 0.0, 1, 0)
        self.vic = cast_occluded(self.scene, CFG, VPOSE, 0.0, 0, 0)

    def test_physically_valid_and_detected(self):
        fab, rec = fabricate_cloud(
            self.own, TARGET, "spoof", CAR, 0.7, 42, CFG,
            benign_origins=np.array([[0.0, -4.0, 1.8]]),
        )
        assert rec.feasible and rec.n_deleted == 0
        assert validate_physics(fab, CFG)
        fused = fuse_early([fab, self.vic])
        iou, score = best_iou_and_score(detect_early(fused, ROAD), TARGET)
        assert iou > 0.5 and score > 0.5

    def test_points_lie_on_the_phantom(self):
        fab, rec = fabricate_cloud(self.own, TARGET, "spoof", CAR, 0.7, 7, CFG)
        pts = rec.xyz_world
        rel = pts[:, :2] - np.array(TARGET.center)
        c, s = math.cos(-TARGET.yaw), math.sin(-TARGET.yaw)
        rel = rel @ np.array([[c, -s], [s, c]]).T
        assert np.all(np.abs(rel[:, 0]) <= 2.25 + 1e-6)
        assert np.all(np.abs(rel[:, 1]) <= 1.0 + 1e-6)
        assert np.all((pts[:, 2] >= -1e-6) & (pts[:, 2] <= 1.6 + 1e-6))

    def test_infeasible_when_out_of_reach(self):
        far = OrientedBox((500.0, 0.0), 4.5, 2.0, 0.0)
        fab, rec = fabricate_cloud(self.own, far, "spoof", CAR, 0.7, 0, CFG)
        assert not rec.feasible
        assert np.array_equal(fab.xyz, self.own.xyz)

    def test_deterministic_for_fixed_seed(self):
        a, _ = fabricate_cloud(self.own, TARGET, "spoof", CAR, 0.7, 9, CFG)
        b, _ = fabricate_cloud(self.own, TARGET, "spoof", CAR, 0.7, 9, CFG)
        assert np.array_equal(a.xyz, b.xyz)
        c, _ = fabricate_cloud(self.own, TARGET, "spoof", CAR, 0.7, 10, CFG)
        assert not np.array_equal(a.xyz, c.xyz)


class TestFabricateRemove:
    """Closest-crossing cuboid cloaking is checked against honest ray casting
    of the edited scene: the two must agree return for return."""

    def _sorted(self, cloud):
        order = np.lexsort((cloud.azimuth, cloud.ring))
        return cloud.ring[order], cloud.azimuth[order], cloud.xyz[order]

    def test_scene_edit_oracle(self):
        margin = 0.6
        scene = Scene(
            objects=[SceneObject(CAR, Pose3((12.0, 1.0, 0.0), 0.3), object_id=7)],
            road=ROAD,
        )
        own = cast_occluded(scene, CFG, APOSE, 0.0, 1, 0)
        fab, rec = fabricate_cloud(
            own, TARGET, "remove", TriangleMesh.cuboid(), 0.0, 0, CFG,
            margin=margin, target_height=1.6,
        )
        big = TriangleMesh.cuboid(4.5 + 2 * margin, 2.0 + 2 * margin, 1.6 + margin)
        edited = Scene(
            objects=[SceneObject(big, Pose3((12.0, 1.0, 0.0), 0.3), object_id=8)],
            road=ROAD,
        )
        honest = cast_occluded(edited, CFG, APOSE, 0.0, 1, 0)
        ra, aa, xa = self._sorted(fab)
        rb, ab, xb = self._sorted(honest)
        assert np.array_equal(ra, rb) and np.array_equal(aa, ab)
        np.testing.assert_allclose(xa, xb, atol=1e-8)

    def test_no_mesh_baseline_grounds_the_rays(self):
        scene = Scene(
            objects=[SceneObject(CAR, Pose3((12.0, 1.0, 0.0), 0.3), object_id=7)],
            road=ROAD,
        )
        own = cast_occluded(scene, CFG, APOSE, 0.0, 1, 0)
        fab, rec = fabricate_cloud(own, TARGET, "remove", None, 0.0, 0, CFG)
        assert rec.feasible and rec.n_replaced > 0
        assert validate_physics(fab, CFG)
        # nothing above the ground band remains in the target region
        w = fab.world_points()
        import shapely

        inside = shapely.contains_xy(
            TARGET.footprint().shapely, w[:, 0], w[:, 1]
        )
        assert np.all(w[inside, 2] < 0.15)

    def test_cloaked_removal_suppresses_fused_detection(self):
        scene = Scene(
            objects=[SceneObject(CAR, Pose3((12.0, 1.0, 0.0), 0.3), object_id=7)],
            road=ROAD,
        )
        own = cast_occluded(scene, CFG, APOSE, 0.0, 1, 0)
        vic = cast_occluded(scene, CFG, VPOSE, 0.0, 0, 0)
        ben = cast_occluded(scene, CFG, Pose3((26.0, -2.0, 1.8), math.pi), 0.0, 2, 0)
        origins = np.array([[0.0, -4.0, 1.8], [26.0, -2.0, 1.8]])
        # benign fusion sees the car
        iou_b, _ = best_iou_and_score(
            detect_early(fuse_early([own, vic, ben]), ROAD), TARGET
        )
        assert iou_b > 0.5
        for seed in (0, 1):
            fab, rec = fabricate_cloud(
                own, TARGET, "remove", towers(), 0.7, seed, CFG, origins
            )
            assert validate_physics(fab, CFG)
            iou, score = best_iou_and_score(
                detect_early(fuse_early([fab, vic, ben]), ROAD), TARGET
            )
            assert iou == 0.0
        # the plain cuboid cloak is not enough: the car region stays detected
        fab0, _ = fabricate_cloud(
            own, TARGET, "remove", TriangleMesh.cuboid(subdiv=2), 0.7, 0, CFG, origins
        )
        iou0, _ = best_iou_and_score(
            detect_early(fuse_early([fab0, vic, ben]), ROAD), TARGET
        )
        assert iou0 > 0.0


class TestNaiveDense:
    def setup_method(self):
        self.own = cast_occluded(Scene(objects=[], road=ROAD), CFG, APOSE, 0.0, 1, 0)

    def test_near_origin_variant_breaks_ray_geometry(self):
        bad = naive_dense_cloud(self.own, TARGET, CAR, CFG, mode="near", seed=1)
        issues = physics_violations(bad, CFG)
        assert issues and any("ray" in msg for msg in issues)

    def test_grid_variant_repeats_rays(self):
        bad = naive_dense_cloud(self.own, TARGET, CAR, CFG, mode="grid", seed=1)
        issues = physics_violations(bad, CFG)
        assert issues and any("more than one return" in msg for msg in issues)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            naive_dense_cloud(self.own, TARGET, CAR, CFG, mode="tsunami")


class TestTransformAttack:
    def setup_method(self):
        self.scene = Scene(objects=[], road=ROAD)
        self.own0 = cast_occluded(self.scene, CFG, APOSE, 0.0, 1, 0)
        self.own1 = cast_occluded(self.scene, CFG, APOSE, 100.0, 1, 1)

    def test_stationary_replay_is_verbatim(self):
        fab0, rec0 = fabricate_cloud(self.own0, TARGET, "spoof", CAR, 0.7, 42, CFG)
        fab1, rec1 = transform_attack(rec0, self.own1, TARGET, CFG)
        assert np.array_equal(np.sort(fab0.ring), np.sort(fab1.ring))
        np.testing.assert_allclose(
            np.sort(fab0.xyz, axis=0), np.sort(fab1.xyz, axis=0), atol=1e-9
        )
        assert rec1.frame_index == 1

    def test_translated_replay_shifts_points(self):
        fab0, rec0 = fabricate_cloud(self.own0, TARGET, "spoof", CAR, 0.7, 42, CFG)
        shifted = OrientedBox(
            (TARGET.center[0] + 1.0, TARGET.center[1]), 4.5, 2.0, TARGET.yaw
        )
        fab1, rec1 = transform_attack(rec0, self.own1, shifted, CFG)
        np.testing.assert_allclose(
            rec1.xyz_world, rec0.xyz_world + np.array([1.0, 0.0, 0.0]), atol=1e-9
        )
        # replayed points sit close to, but not exactly on, their rays
        assert not physics_violations(fab1, CFG, on_ray_tol=1.0)

    def test_rotated_replay_rotates_about_old_centre(self):
        fab0, rec0 = fabricate_cloud(self.own0, TARGET, "spoof", CAR, 0.7, 42, CFG)
        dyaw = 0.2
        turned = OrientedBox(TARGET.center, 4.5, 2.0, TARGET.yaw + dyaw)
        fab1, rec1 = transform_attack(rec0, self.own1, turned, CFG)
        rel = rec0.xyz_world[:, :2] - np.array(TARGET.center)
        c, s = math.cos(dyaw), math.sin(dyaw)
        expect = rel @ np.array([[c, -s], [s, c]]).T + np.array(TARGET.center)
        np.testing.assert_allclose(rec1.xyz_world[:, :2], expect, atol=1e-9)

    def test_frame_gap_guard(self):
        _, rec0 = fabricate_cloud(self.own0, TARGET, "spoof", CAR, 0.7, 42, CFG)
        stale = self.own1.copy()
        stale.frame_index = 5
        with pytest.raises(ValueError):
            transform_attack(rec0, stale, TARGET, CFG)

    def test_removal_deletions_survive_replay(self):
        scene = Scene(
            objects=[SceneObject(CAR, Pose3((12.0, 1.0, 0.0), 0.3), object_id=7)],
            road=ROAD,
        )
        own0 = cast_occluded(scene, CFG, APOSE, 0.0, 1, 0)
        own1 = cast_occluded(scene, CFG, APOSE, 100.0, 1, 1)
        fab0, rec0 = fabricate_cloud(own0, TARGET, "remove", None, 0.0, 0, CFG)
        assert rec0.n_deleted > 0
        fab1, rec1 = transform_attack(rec0, own1, TARGET, CFG)
        keys1 = set((fab1.ring * CFG.n_azimuth + fab1.azimuth).tolist())
        dead = rec0.ring[~np.isfinite(rec0.xyz_world[:, 0])]
        dead_az = rec0.azimuth[~np.isfinite(rec0.xyz_world[:, 0])]
        for r, a in zip(dead.tolist(), dead_az.tolist()):
            assert r * CFG.n_azimuth + a not in keys1


class TestLocalizeTarget:
    def test_finds_solo_view_cluster(self):
        scene = Scene(
            objects=[SceneObject(CAR, Pose3((12.0, 1.0, 0.0), 0.3), object_id=7)],
            road=ROAD,
        )
        own = cast_occluded(scene, CFG, APOSE, 0.0, 1, 0)
        box = localize_target(own, TARGET.inflate(1.0))
        assert box is not None
        assert math.hypot(
            box.center[0] - TARGET.center[0], box.center[1] - TARGET.center[1]
        ) < 1.5

    def test_none_when_nothing_nearby(self):
        own = cast_occluded(Scene(objects=[], road=ROAD), CFG, APOSE, 0.0, 1, 0)
        assert localize_target(own, TARGET) is None


class TestShapeSearch:
    def _case(self):
        scene = Scene(
            objects=[SceneObject(CAR, Pose3((12.0, 1.0, 0.0), 0.3), object_id=7)],
            road=ROAD,
        )
        own = cast_occluded(scene, CFG, APOSE, 0.0, 1, 0)
        vic = cast_occluded(scene, CFG, VPOSE, 0.0, 0, 0)
        return AttackCase(
            own, (vic,), TARGET, ROAD, np.array([[0.0, -4.0, 1.8]]), CFG
        )

    def test_zero_generations_returns_seed_cuboid(self):
        mesh, hist = search_adversarial_shape(
            [self._case()], AdvShapeSearchConfig(generations=0)
        )
        assert hist == []
        assert np.array_equal(mesh.vertices, TriangleMesh.cuboid(subdiv=2).vertices)

    def test_elitist_history_never_decreases(self):
        mesh, hist = search_adversarial_shape(
            [self._case()],
            AdvShapeSearchConfig(population=6, generations=2, seed=3),
        )
        assert len(hist) == 3
        assert all(b >= a - 1e-12 for a, b in zip(hist, hist[1:]))
        assert hist[-1] > -1e6

    def test_search_is_deterministic(self):
        cfg = AdvShapeSearchConfig(population=4, generations=1, seed=11)
        m1, h1 = search_adversarial_shape([self._case()], cfg)
        m2, h2 = search_adversarial_shape([self._case()], cfg)
        assert np.array_equal(m1.vertices, m2.vertices)
        assert h1 == h2


class TestRecord:
    def test_empty_record(self):
        rec = RaySwapRecord.empty("remove")
        assert not rec.feasible and len(rec) == 0
        assert rec.n_replaced == 0 and rec.n_deleted == 0

    def test_goal_validation(self):
        own = cast_occluded(Scene(objects=[], road=ROAD), CFG, APOSE, 0.0, 1, 0)
        with pytest.raises(ValueError):
            fabricate_cloud(own, TARGET, "teleport", CAR, 0.7, 0, CFG)

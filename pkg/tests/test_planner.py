"""Tests for approach sampling, collision checking, selection, and NMS."""

import json
import math

import numpy as np
import pytest

from tsdfgrasp.contact import AntipodalParams, ContactPair, sample_contact_pairs
from tsdfgrasp.errors import DegenerateGraspVector, EmptyVolume
from tsdfgrasp.geom import (CameraIntrinsics, GraspPose, RigidTransform,
                            compose_grasp_pose, rotation_geodesic)
from tsdfgrasp.isosurface import marching_cubes
from tsdfgrasp.planner import (AnalyticScorer, GripperModel, PlannedGrasp,
                               PlannerParams, Scorer, approach_elevation,
                               check_collision, nms, plan,
                               sample_approach_vectors, select_feasible)
from tsdfgrasp.scene import (PrimitiveShape, SceneSpec, render_depth,
                             sample_viewpoints)
from tsdfgrasp.tsdf import (DEFAULT_VOXEL_SIZE, TsdfVolume, integrate_depth,
                            sample_trilinear)

H = 0.3 / 64
INTR = CameraIntrinsics(160, 120, 110.0, 110.0, 79.5, 59.5)
EX = np.array([1.0, 0.0, 0.0])
EY = np.array([0.0, 1.0, 0.0])
EZ = np.array([0.0, 0.0, 1.0])


def prefilled(sdf_fn, trunc_vox=4):
    """64^3 volume holding an exact clamped signed-distance field."""
    vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), trunc_vox * H)
    sdf = sdf_fn(vol.voxel_centers())
    vol.values[:] = np.clip(sdf, -vol.truncation, vol.truncation).reshape(vol.dims)
    vol.weights[:] = 1.0
    return vol


def sphere_sdf(center, r):
    c = np.asarray(center, dtype=np.float64)
    return lambda p: np.linalg.norm(p - c, axis=-1) - r


def make_pair(p, pp, score=1.0):
    p = np.asarray(p, dtype=np.float64)
    pp = np.asarray(pp, dtype=np.float64)
    width = float(np.linalg.norm(pp - p))
    g = (pp - p) / width
    return ContactPair(p=p, p_prime=pp, g=g, n_p=-g, n_pprime=g,
                       width=width, score=score, sdf_p=0.0, sdf_pprime=0.0)


@pytest.fixture(scope="module")
def fused_sphere():
    shape = PrimitiveShape("sphere", (0.03,), RigidTransform.identity())
    scene = SceneSpec(shapes=(shape,), floor_z=-0.45,
                      workspace=((-0.5,) * 3, (0.5,) * 3), seed=0)
    vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 7 * H)
    views = sample_viewpoints(96, workspace=((-0.15,) * 3, (0.15,) * 3),
                              max_colatitude_deg=150.0)
    for cam in views:
        integrate_depth(vol, render_depth(scene, INTR, cam), INTR, cam)
    return vol


class TestGripperModel:
    def test_vertices_nonempty_and_in_bounding_box(self):
        g = GripperModel()
        v = g.vertices
        assert len(v) > 0
        t = g.finger_thickness
        assert np.all(np.abs(v[:, 0]) <= 0.5 * t + 1e-12)
        assert np.all(np.abs(v[:, 1]) <= 0.5 * g.max_width + t + 1e-12)
        assert np.all(v[:, 2] >= -g.finger_depth - g.palm_depth - 1e-12)
        assert np.all(v[:, 2] <= 1e-12)

    def test_sample_spacing_within_half_voxel(self):
        g = GripperModel()
        for comp in (g._finger, g._palm):
            for axis in range(3):
                coords = np.unique(comp[:, axis])
                if len(coords) > 1:
                    assert np.max(np.diff(coords)) <= 0.5 * DEFAULT_VOXEL_SIZE + 1e-12

    def test_fingers_slide_to_requested_width(self):
        g = GripperModel()
        for width in (0.02, 0.05, g.max_width):
            v = g.vertices_at_width(width)
            # Strictly above the palm's top face so only finger points
            # are selected.
            fingers = v[v[:, 2] > -g.finger_depth + 1e-9]
            inner = np.min(np.abs(fingers[:, 1]))
            assert abs(inner - 0.5 * width) < 1e-12

    def test_width_outside_range_rejected(self):
        g = GripperModel()
        with pytest.raises(ValueError):
            g.vertices_at_width(-0.01)
        with pytest.raises(ValueError):
            g.vertices_at_width(g.max_width + 0.01)

    def test_invalid_parameters_rejected(self):
        with pytest.raises(ValueError):
            GripperModel(max_width=0.0)
        with pytest.raises(ValueError):
            GripperModel(finger_depth=-0.01)
        with pytest.raises(ValueError):
            GripperModel(sample_spacing=DEFAULT_VOXEL_SIZE)

    def test_json_roundtrip(self):
        g = GripperModel(max_width=0.06, finger_depth=0.03,
                         finger_thickness=0.008, palm_depth=0.015,
                         sample_spacing=0.002)
        assert GripperModel.from_json_dict(g.to_json_dict()) == g


class TestApproachVectors:
    def test_vertical_axis_falls_back_to_x(self):
        a = sample_approach_vectors(EZ, 4)
        expect = np.array([[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]],
                          dtype=np.float64)
        assert np.allclose(a, expect, atol=1e-12)

    def test_eight_around_y(self):
        a = sample_approach_vectors(EY, 8)
        assert a.shape == (8, 3)
        assert np.max(np.abs(a @ EY)) < 1e-12
        assert np.allclose(np.linalg.norm(a, axis=1), 1.0)
        dots = [float(a[i] @ a[(i + 1) % 8]) for i in range(8)]
        assert np.allclose(dots, math.cos(math.pi / 4), atol=1e-12)

    def test_zero_phase_is_most_downward(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            g = rng.normal(size=3)
            g /= np.linalg.norm(g)
            if abs(g[2]) > 0.99:
                continue
            a = sample_approach_vectors(g, 6)
            proj = -EZ - np.dot(-EZ, g) * g
            proj /= np.linalg.norm(proj)
            assert np.allclose(a[0], proj, atol=1e-9)
            # No other vector in the fan points more downward.
            assert np.min(a @ EZ) >= float(a[0] @ EZ) - 1e-9

    def test_vectors_sum_to_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            g = rng.normal(size=3)
            g /= np.linalg.norm(g)
            n = int(rng.integers(2, 12))
            a = sample_approach_vectors(g, n)
            assert np.max(np.abs(a.sum(axis=0))) < 1e-9
            assert np.max(np.abs(a @ g)) < 1e-9

    def test_non_unit_axis_rejected(self):
        with pytest.raises(DegenerateGraspVector):
            sample_approach_vectors(1.1 * EX, 4)

    def test_too_few_vectors_rejected(self):
        with pytest.raises(ValueError):
            sample_approach_vectors(EX, 1)

    def test_deterministic(self):
        a = sample_approach_vectors(EY, 8)
        b = sample_approach_vectors(EY, 8)
        assert a.tobytes() == b.tobytes()

    def test_elevation_convention(self):
        assert approach_elevation(-EZ) == 0.0
        assert abs(approach_elevation(EX) - math.pi / 2) < 1e-12
        assert abs(approach_elevation(EZ) - math.pi) < 1e-12


def pose_at(center, approach=-EZ, width=0.04):
    half = 0.5 * width
    # Contacts straddle the center along an axis perpendicular to the
    # approach so compose_grasp_pose reproduces the requested frame.
    g = EY if abs(approach[1]) < 0.9 else EX
    g = g - np.dot(g, approach) * np.asarray(approach, dtype=np.float64)
    g /= np.linalg.norm(g)
    c = np.asarray(center, dtype=np.float64)
    return compose_grasp_pose(c - half * g, c + half * g, approach)


class TestCheckCollision:
    def test_unobserved_volume_is_free(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        assert check_collision(vol, GripperModel(), pose_at((0.0, 0.0, 0.0)))

    def test_palm_inside_sphere_collides(self):
        vol = prefilled(sphere_sdf((0, 0, 0), 0.05))
        gripper = GripperModel()
        # Approach straight down with the palm block centered on the
        # sphere center: the entire body is buried.
        pose = pose_at((0.0, 0.0, -0.05))
        assert not check_collision(vol, gripper, pose)
        pts = pose.transform.apply(gripper.vertices_at_width(pose.width))
        oracle = sphere_sdf((0, 0, -0.0), 0.05)(pts)
        assert oracle.min() < 0.0

    def test_margin_sweep(self):
        r = 0.03
        vol = prefilled(sphere_sdf((0, 0, 0), r), trunc_vox=8)
        gripper = GripperModel()
        width = 0.04
        inner = 0.5 * width + DEFAULT_VOXEL_SIZE
        # Chosen so the closest fingertip check point sits 0.01 m from
        # the sphere surface.
        zc = math.sqrt((r + 0.01) ** 2 - inner ** 2)
        pose = pose_at((0.0, 0.0, zc), width=width)
        pts = pose.transform.apply(
            gripper.vertices_at_width(width + 2 * DEFAULT_VOXEL_SIZE))
        clearance = sphere_sdf((0, 0, 0), r)(pts).min()
        assert 0.008 <= clearance <= 0.012
        assert check_collision(vol, gripper, pose, margin=0.0)
        assert not check_collision(vol, gripper, pose, margin=0.02)

    def test_fingers_checked_at_closing_width(self):
        # A sphere flanked by two low walls (they stop at z = 0.02, so
        # the body above stays clear): the closing-width fingers fit in
        # the gap, fingers at maximum opening would not.
        def sdf(p):
            ball = np.linalg.norm(p, axis=-1) - 0.02
            walls = np.maximum(0.04 - np.abs(p[..., 1]), p[..., 2] - 0.02)
            return np.minimum(ball, walls)

        vol = prefilled(sdf)
        gripper = GripperModel()
        pose = pose_at((0.0, 0.0, 0.0), width=0.04)
        assert check_collision(vol, gripper, pose)
        wide = pose.transform.apply(gripper.vertices_at_width(gripper.max_width))
        inside = vol.contains(wide)
        assert np.any(sample_trilinear(vol, wide[inside]) <= 0.0)


class TestSelectFeasible:
    def test_top_fraction_one_keeps_all(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        vol.weights[:] = 1.0
        pairs = [make_pair((0, -0.01, z), (0, 0.01, z), score=0.5)
                 for z in np.linspace(-0.05, 0.05, 20)]
        counts = {}
        out = select_feasible(vol, GripperModel(), pairs,
                              PlannerParams(top_fraction=1.0), counts=counts)
        assert counts["kept_pairs"] == len(pairs)
        assert {g.pair_index for g in out} == set(range(len(pairs)))

    def test_selection_floor_of_sixteen(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        vol.weights[:] = 1.0
        pairs = [make_pair((0, -0.01, z), (0, 0.01, z), score=0.5)
                 for z in np.linspace(-0.05, 0.05, 40)]
        counts = {}
        select_feasible(vol, GripperModel(), pairs,
                        PlannerParams(top_fraction=0.003), counts=counts)
        # ceil(0.003 * 40) = 1 lifts to the floor of 16.
        assert counts["kept_pairs"] == 16

    def test_pair_ordering_score_then_width_then_index(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        vol.weights[:] = 1.0
        pairs = [
            make_pair((0, -0.02, 0.00), (0, 0.02, 0.00), score=0.8),
            make_pair((0, -0.01, 0.02), (0, 0.01, 0.02), score=0.9),
            make_pair((0, -0.01, -0.02), (0, 0.01, -0.02), score=0.9),
            make_pair((0, -0.015, 0.04), (0, 0.015, 0.04), score=0.9),
        ]
        out = select_feasible(vol, GripperModel(), pairs,
                              PlannerParams(top_fraction=1.0,
                                            max_approach_elevation=0.0,
                                            center_preference=0.0))
        # Narrower pairs first among the 0.9 ties, input order next,
        # then the 0.8 pair.
        assert [g.pair_index for g in out] == [1, 2, 3, 0]

    def test_center_preference_orders_equal_scores(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        vol.weights[:] = 1.0
        far = make_pair((0.04, 0.05, 0), (0.06, 0.05, 0), score=1.0)
        near = make_pair((-0.01, 0, 0), (0.01, 0, 0), score=1.0)
        out = select_feasible(vol, GripperModel(), [far, near],
                              PlannerParams(top_fraction=1.0,
                                            max_approach_elevation=0.0))
        assert [g.pair_index for g in out] == [1, 0]
        assert out[0].score == pytest.approx(1.0)
        assert out[1].score == pytest.approx(1.0 - math.hypot(0.05, 0.05))

    def test_center_preference_yields_to_quality_gap(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        vol.weights[:] = 1.0
        far_good = make_pair((0.04, 0, 0), (0.06, 0, 0), score=1.0)
        near_poor = make_pair((-0.01, 0, 0), (0.01, 0, 0), score=0.9)
        out = select_feasible(vol, GripperModel(), [near_poor, far_good],
                              PlannerParams(top_fraction=1.0,
                                            max_approach_elevation=0.0))
        assert [g.pair_index for g in out] == [1, 0]
        assert out[0].score == pytest.approx(0.95)
        assert out[1].score == pytest.approx(0.9)

    def test_elevation_limit_zero_keeps_only_top_down(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        vol.weights[:] = 1.0
        pairs = [make_pair((-0.01, 0, 0), (0.01, 0, 0))]
        counts = {}
        out = select_feasible(vol, GripperModel(), pairs,
                              PlannerParams(top_fraction=1.0,
                                            max_approach_elevation=0.0),
                              counts=counts)
        assert counts["poses_checked"] == 1
        assert len(out) == 1
        assert np.allclose(out[0].pose.approach_axis, -EZ, atol=1e-12)

    def test_isolated_sphere_most_approaches_free(self, fused_sphere):
        mesh = marching_cubes(fused_sphere)
        pairs = sample_contact_pairs(fused_sphere, mesh, AntipodalParams())
        best = max(pairs, key=lambda p: p.score)
        out = select_feasible(
            fused_sphere, GripperModel(), [best],
            PlannerParams(top_fraction=1.0, max_approach_elevation=math.pi))
        assert len(out) >= 6

    def test_jobs_do_not_change_output(self, fused_sphere):
        mesh = marching_cubes(fused_sphere)
        pairs = sample_contact_pairs(fused_sphere, mesh, AntipodalParams())
        params = PlannerParams()
        a = select_feasible(fused_sphere, GripperModel(), pairs, params, jobs=1)
        b = select_feasible(fused_sphere, GripperModel(), pairs, params, jobs=4)
        assert [g.to_json_dict() for g in a] == [g.to_json_dict() for g in b]


class TestWallFixture:
    def test_only_wall_safe_approaches_survive(self):
        # Sphere at the origin with a solid wall filling x >= 0.04. The
        # gripper body extends opposite the approach direction, so the
        # surviving approaches are those that do not put the body into
        # the wall: approach x-components >= 0.
        def sdf(p):
            ball = np.linalg.norm(p, axis=-1) - 0.02
            wall = 0.04 - p[..., 0]
            return np.minimum(ball, wall)

        vol = prefilled(sdf)
        gripper = GripperModel()
        pair = make_pair((0, -0.02, 0), (0, 0.02, 0))
        params = PlannerParams(top_fraction=1.0,
                               max_approach_elevation=math.pi)
        out = select_feasible(vol, gripper, [pair], params)
        approaches = sample_approach_vectors(pair.g, params.n_approach)
        survivors = np.array([g.pose.approach_axis for g in out])
        assert 0 < len(survivors) < len(approaches)
        assert np.all(survivors[:, 0] >= -1e-9)
        # Every approach with any body excursion toward the wall died.
        toward_body = approaches[approaches[:, 0] < -1e-9]
        assert len(survivors) == len(approaches) - len(toward_body)
        # Volumetric decisions match the analytic oracle pose by pose.
        for a in approaches:
            pose = compose_grasp_pose(pair.p, pair.p_prime, a)
            pts = pose.transform.apply(
                gripper.vertices_at_width(pose.width + 2 * DEFAULT_VOXEL_SIZE))
            oracle_free = bool(sdf(pts).min() > 0.0)
            assert check_collision(vol, gripper, pose) == oracle_free


def tiny_pose(center, yaw=0.0):
    rot = np.array([[math.cos(yaw), -math.sin(yaw), 0.0],
                    [math.sin(yaw), math.cos(yaw), 0.0],
                    [0.0, 0.0, 1.0]])
    base = np.stack([np.cross(EY, EZ), EY, EZ], axis=1)
    return GraspPose(RigidTransform(rot @ base, np.asarray(center, float)), 0.04)


class TestNms:
    def test_identical_poses_keep_best_score(self):
        a = PlannedGrasp(tiny_pose((0, 0, 0)), 0.9, 0)
        b = PlannedGrasp(tiny_pose((0, 0, 0)), 0.8, 1)
        out = nms([b, a], 0.02, math.radians(30))
        assert len(out) == 1
        assert out[0].score == 0.9

    def test_distant_poses_both_survive(self):
        a = PlannedGrasp(tiny_pose((0, 0, 0)), 0.9, 0)
        b = PlannedGrasp(tiny_pose((0.1, 0, 0)), 0.8, 1)
        out = nms([a, b], 0.02, math.radians(30))
        assert len(out) == 2

    def test_near_pose_small_rotation_suppressed(self):
        a = PlannedGrasp(tiny_pose((0, 0, 0)), 0.9, 0)
        b = PlannedGrasp(tiny_pose((0.01, 0, 0), yaw=math.radians(5)), 0.8, 1)
        out = nms([a, b], 0.02, math.radians(30))
        assert len(out) == 1
        assert out[0].score == 0.9

    def test_near_pose_large_rotation_survives(self):
        a = PlannedGrasp(tiny_pose((0, 0, 0)), 0.9, 0)
        b = PlannedGrasp(tiny_pose((0.01, 0, 0), yaw=math.radians(90)), 0.8, 1)
        out = nms([a, b], 0.02, math.radians(30))
        assert len(out) == 2

    def test_equal_scores_keep_first_input(self):
        a = PlannedGrasp(tiny_pose((0, 0, 0)), 0.9, 0)
        b = PlannedGrasp(tiny_pose((0, 0, 0)), 0.9, 1)
        out = nms([a, b], 0.02, math.radians(30))
        assert len(out) == 1
        assert out[0].pair_index == 0


class BadShapeScorer(Scorer):
    def score(self, vol, pairs):
        return np.zeros(len(pairs) + 1)


class OutOfRangeScorer(Scorer):
    def score(self, vol, pairs):
        return np.full(len(pairs), 1.5)


class IndexScorer(Scorer):
    """Deterministic per-pair scores independent of geometry."""

    def score(self, vol, pairs):
        n = len(pairs)
        return (np.arange(n, dtype=np.float64) % 97) / 97.0


class TestPlan:
    def test_unobserved_volume_raises(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        with pytest.raises(EmptyVolume):
            plan(vol)

    def test_surface_free_volume_yields_nothing(self):
        vol = TsdfVolume((-0.15, -0.15, -0.15), H, (64, 64, 64), 4 * H)
        vol.weights[:] = 1.0
        res = plan(vol)
        assert res.grasps == ()
        assert res.counts["vertices"] == 0

    def test_sphere_top_grasp_matches_geometry(self, fused_sphere):
        res = plan(fused_sphere)
        assert res.grasps
        top = res.grasps[0]
        assert abs(top.pose.width - 0.06) <= H
        assert np.linalg.norm(top.pose.center) <= H

    def test_outputs_pass_recheck_and_width_limits(self, fused_sphere):
        gripper = GripperModel()
        params = PlannerParams()
        contact = AntipodalParams()
        res = plan(fused_sphere, gripper, params=params)
        for g in res.grasps:
            assert check_collision(fused_sphere, gripper, g.pose,
                                   params.collision_margin)
            assert contact.min_width <= g.pose.width <= gripper.max_width

    def test_no_near_duplicates_survive(self, fused_sphere):
        params = PlannerParams()
        res = plan(fused_sphere, params=params)
        grasps = res.grasps
        for i in range(len(grasps)):
            for j in range(i + 1, len(grasps)):
                d = np.linalg.norm(grasps[i].pose.center - grasps[j].pose.center)
                r = rotation_geodesic(grasps[i].pose.transform.rotation,
                                      grasps[j].pose.transform.rotation)
                assert d >= params.nms_trans or r >= params.nms_rot

    def test_deterministic_and_jobs_invariant(self, fused_sphere):
        a = plan(fused_sphere)
        b = plan(fused_sphere)
        c = plan(fused_sphere, jobs=2)
        dump = lambda r: json.dumps([g.to_json_dict() for g in r.grasps])
        assert dump(a) == dump(b) == dump(c)

    def test_counts_are_consistent(self, fused_sphere):
        res = plan(fused_sphere)
        c = res.counts
        assert c["final"] == len(res.grasps)
        assert c["final"] <= c["collision_free"] <= c["poses_checked"]
        assert c["poses_checked"] <= c["kept_pairs"] * PlannerParams().n_approach
        assert c["pairs"] <= c["vertices"]
        for key in ("isosurface", "contacts", "scoring", "selection",
                    "nms", "total"):
            assert res.timings[key] >= 0.0

    def test_scorer_output_validated(self, fused_sphere):
        with pytest.raises(ValueError):
            plan(fused_sphere, scorer=BadShapeScorer())
        with pytest.raises(ValueError):
            plan(fused_sphere, scorer=OutOfRangeScorer())

    def test_custom_scorer_drives_ranking(self, fused_sphere):
        scorer = IndexScorer()
        params = PlannerParams(center_preference=0.0)
        res = plan(fused_sphere, scorer=scorer, params=params)
        assert res.grasps
        for g in res.grasps:
            assert abs(g.score - (g.pair_index % 97) / 97.0) < 1e-12
        scores = [g.score for g in res.grasps]
        assert scores == sorted(scores, reverse=True)

    def test_default_ranking_scores_descending(self, fused_sphere):
        res = plan(fused_sphere)
        assert res.grasps
        scores = [g.score for g in res.grasps]
        assert scores == sorted(scores, reverse=True)
        assert all(0.0 <= s <= 1.0 for s in scores)

    def test_planned_grasp_json_roundtrip(self, fused_sphere):
        res = plan(fused_sphere)
        g = res.grasps[0]
        back = PlannedGrasp.from_json_dict(
            json.loads(json.dumps(g.to_json_dict())))
        assert np.allclose(back.pose.transform.matrix(),
                           g.pose.transform.matrix())
        assert back.score == g.score and back.pair_index == g.pair_index


class TestPlannerParams:
    def test_defaults_valid(self):
        p = PlannerParams()
        assert p.n_approach == 8
        assert p.top_fraction == 0.003

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            PlannerParams(n_approach=1)
        with pytest.raises(ValueError):
            PlannerParams(top_fraction=0.0)
        with pytest.raises(ValueError):
            PlannerParams(top_fraction=1.5)
        with pytest.raises(ValueError):
            PlannerParams(nms_trans=-0.01)
        with pytest.raises(ValueError):
            PlannerParams(max_approach_elevation=4.0)

    def test_json_roundtrip(self):
        p = PlannerParams(n_approach=6, top_fraction=0.01,
                          collision_margin=0.005, nms_trans=0.03,
                          nms_rot=0.4, max_approach_elevation=1.2)
        assert PlannerParams.from_json_dict(p.to_json_dict()) == p

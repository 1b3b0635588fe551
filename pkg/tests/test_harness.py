"""Tests for oracle pose metrics, batch evaluation, and replay."""

import json

import numpy as np
import pytest

from tsdfgrasp.contact import AntipodalParams
from tsdfgrasp.geom import (CameraIntrinsics, GraspPose, RigidTransform,
                            compose_grasp_pose)
from tsdfgrasp.harness import (EvalReport, PipelineConfig, ReplayStep,
                               SceneEval, closed_loop_replay, eval_batch,
                               evaluate_scene, oracle_check_collision,
                               oracle_pose_metrics, pose_touches_unobserved,
                               save_report)
from tsdfgrasp.planner import GripperModel, PlannerParams, check_collision
from tsdfgrasp.scene import (DEFAULT_WORKSPACE, PrimitiveShape, SceneSpec,
                             generate_scene, scene_sdf)
from tsdfgrasp.tsdf import (DEFAULT_DIMS, DEFAULT_ORIGIN, DEFAULT_TRUNCATION,
                            DEFAULT_VOXEL_SIZE, TsdfVolume)

GRIPPER = GripperModel()
EZ = np.array([0.0, 0.0, 1.0])

# Quarter-resolution render keeps whole-pipeline tests quick.
FAST_INTRINSICS = CameraIntrinsics(80, 60, 55.0, 55.0, 39.5, 29.5)
FAST_CONFIG = PipelineConfig(n_views=4, intrinsics=FAST_INTRINSICS)


def shape_at(kind, params, center):
    pose = RigidTransform(np.eye(3), np.asarray(center, dtype=np.float64))
    return PrimitiveShape(kind, np.asarray(params, dtype=np.float64), pose)


def single_sphere_scene(radius=0.03, center=(0.0, 0.0, 0.1), seed=1):
    return SceneSpec(shapes=(shape_at("sphere", [radius], center),),
                     floor_z=0.0, workspace=DEFAULT_WORKSPACE, seed=seed)


def empty_scene(seed=2):
    return SceneSpec(shapes=(), floor_z=0.0, workspace=DEFAULT_WORKSPACE,
                     seed=seed)


def prefilled_volume(scene):
    """Fully observed volume holding the exact clamped scene field."""
    vol = TsdfVolume(DEFAULT_ORIGIN, DEFAULT_VOXEL_SIZE, DEFAULT_DIMS,
                     DEFAULT_TRUNCATION)
    ii, jj, kk = np.meshgrid(*(np.arange(d) for d in vol.dims), indexing="ij")
    centers = (np.stack([ii, jj, kk], axis=-1).reshape(-1, 3) + 0.5)
    pts = np.asarray(vol.origin) + centers * vol.voxel_size
    sdf = scene_sdf(scene, pts).reshape(vol.dims)
    vol.values[...] = np.clip(sdf, -vol.truncation, vol.truncation)
    vol.weights[...] = 1.0
    return vol


def random_pose(rng, width=None):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    center = rng.uniform([-0.09, -0.09, 0.01], [0.09, 0.09, 0.18])
    w = float(rng.uniform(0.01, 0.08)) if width is None else width
    return GraspPose(RigidTransform(q, center), w)


class TestOraclePoseMetrics:
    def test_perfect_diametric_sphere_grasp(self):
        scene = single_sphere_scene()
        pose = compose_grasp_pose(np.array([0.03, 0.0, 0.1]),
                                  np.array([-0.03, 0.0, 0.1]), -EZ)
        score, free = oracle_pose_metrics(scene, pose, GRIPPER)
        assert score == pytest.approx(1.0, abs=1e-6)
        assert free

    def test_off_axis_closing_line_lowers_the_score(self):
        # Closing along y through x = 0.01 contacts the r = 0.03 sphere
        # where the normal tilts by acos(sqrt(1 - (d/r)^2)), giving a
        # cosine-product score of exactly 1 - (d/r)^2 = 8/9.
        scene = single_sphere_scene()
        p = np.array([0.01, -0.035, 0.1])
        pose = compose_grasp_pose(p, p + [0.0, 0.07, 0.0], -EZ)
        score, free = oracle_pose_metrics(scene, pose, GRIPPER)
        assert score == pytest.approx(8.0 / 9.0, abs=1e-4)
        assert free

    def test_finger_through_solid_is_colliding(self):
        scene = SceneSpec(
            shapes=(shape_at("box", [0.03, 0.03, 0.02], (0.0, 0.0, 0.05)),),
            floor_z=0.0, workspace=DEFAULT_WORKSPACE, seed=3)
        pose = compose_grasp_pose(np.array([0.0, 0.0, 0.05]),
                                  np.array([0.02, 0.0, 0.05]), -EZ)
        score, free = oracle_pose_metrics(scene, pose, GRIPPER)
        assert not free
        # Both fingers start buried; the first one sits at the box
        # center where the field gradient vanishes, so no usable score.
        assert score == 0.0

    def test_closing_rays_that_miss_score_zero(self):
        scene = single_sphere_scene()
        p = np.array([0.1, 0.1, 0.2])
        pose = compose_grasp_pose(p, p + [0.0, 0.04, 0.0], -EZ)
        score, free = oracle_pose_metrics(scene, pose, GRIPPER)
        assert score == 0.0
        assert free

    def test_contact_found_within_sweep_budget(self):
        # Fingertips start 2 cm off the surface on each side; closing
        # still reaches the sphere well inside the max_width budget.
        scene = single_sphere_scene()
        p = np.array([0.07, 0.0, 0.1])
        pose = compose_grasp_pose(p, p - [0.14, 0.0, 0.0], -EZ)
        score, free = oracle_pose_metrics(
            scene, pose, GripperModel(max_width=0.15))
        assert score == pytest.approx(1.0, abs=1e-6)
        assert free

    def test_default_gripper(self):
        scene = single_sphere_scene()
        pose = compose_grasp_pose(np.array([0.03, 0.0, 0.1]),
                                  np.array([-0.03, 0.0, 0.1]), -EZ)
        score, free = oracle_pose_metrics(scene, pose)
        assert score == pytest.approx(1.0, abs=1e-6)
        assert free


class TestOracleCollision:
    def test_agrees_with_volumetric_on_random_poses(self):
        scene = SceneSpec(
            shapes=(shape_at("sphere", [0.03], (0.0, 0.0, 0.05)),
                    shape_at("box", [0.02, 0.03, 0.02], (0.07, -0.04, 0.02))),
            floor_z=0.0, workspace=DEFAULT_WORKSPACE, seed=4)
        vol = prefilled_volume(scene)
        rng = np.random.default_rng(17)
        n_agree = 0
        bad = []
        for _ in range(100):
            pose = random_pose(rng)
            vol_free = check_collision(vol, GRIPPER, pose)
            orc_free = oracle_check_collision(scene, GRIPPER, pose)
            if vol_free == orc_free:
                n_agree += 1
            elif not (vol_free and not orc_free):
                bad.append(pose)
        assert n_agree >= 95
        # Any disagreement must come from the volumetric side reading
        # free where the dense oracle finds contact, never the reverse.
        assert not bad

    def test_open_fingers_clear_a_thin_slab(self):
        # The pre-close opening adds one voxel per side, so fingers
        # straddle a slab just wider than the pose width.
        scene = SceneSpec(
            shapes=(shape_at("box", [0.01, 0.019, 0.01], (0.0, 0.0, 0.1)),),
            floor_z=0.0, workspace=DEFAULT_WORKSPACE, seed=5)
        pose = compose_grasp_pose(np.array([0.0, 0.019, 0.1]),
                                  np.array([0.0, -0.019, 0.1]), -EZ)
        assert oracle_check_collision(scene, GRIPPER, pose)

    def test_palm_contact_is_caught(self):
        # A block floating beside the grasped sphere overlaps only the
        # palm span (clear of both finger boxes, whose outer faces stay
        # within |x| < 0.025 at this opening).
        scene = SceneSpec(
            shapes=(shape_at("sphere", [0.01], (0.0, 0.0, 0.05)),
                    shape_at("box", [0.01, 0.01, 0.02], (0.04, 0.0, 0.1))),
            floor_z=0.0, workspace=DEFAULT_WORKSPACE, seed=6)
        pose = compose_grasp_pose(np.array([0.01, 0.0, 0.05]),
                                  np.array([-0.01, 0.0, 0.05]), -EZ)
        assert not oracle_check_collision(scene, GRIPPER, pose)
        # Removing the block frees the pose, so the palm was the cause.
        alone = SceneSpec(shapes=scene.shapes[:1], floor_z=0.0,
                          workspace=DEFAULT_WORKSPACE, seed=6)
        assert oracle_check_collision(alone, GRIPPER, pose)


class TestPoseTouchesUnobserved:
    def test_empty_volume_is_unobserved(self):
        vol = TsdfVolume(DEFAULT_ORIGIN, DEFAULT_VOXEL_SIZE, DEFAULT_DIMS,
                         DEFAULT_TRUNCATION)
        pose = random_pose(np.random.default_rng(0), width=0.04)
        assert pose_touches_unobserved(vol, GRIPPER, pose)

    def test_fully_observed_interior_pose(self):
        scene = single_sphere_scene()
        vol = prefilled_volume(scene)
        pose = compose_grasp_pose(np.array([0.03, 0.0, 0.1]),
                                  np.array([-0.03, 0.0, 0.1]), -EZ)
        assert not pose_touches_unobserved(vol, GRIPPER, pose)

    def test_pose_outside_the_volume_counts(self):
        scene = single_sphere_scene()
        vol = prefilled_volume(scene)
        pose = compose_grasp_pose(np.array([0.149, 0.0, 0.1]),
                                  np.array([0.149, 0.04, 0.1]), -EZ)
        assert pose_touches_unobserved(vol, GRIPPER, pose)


class TestPipelineConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.n_views == 20
        assert cfg.plan_jobs == 1
        vol = cfg.new_volume()
        assert vol.dims == tuple(DEFAULT_DIMS)
        assert len(cfg.viewpoints()) == 20

    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(n_views=0)
        with pytest.raises(ValueError):
            PipelineConfig(plan_jobs=0)

    def test_json_roundtrip(self):
        cfg = PipelineConfig(n_views=7, plan_jobs=2,
                             planner_params=PlannerParams(n_approach=6),
                             antipodal_params=AntipodalParams(max_width=0.07),
                             intrinsics=FAST_INTRINSICS,
                             voxel_size=0.005, dims=(32, 32, 32),
                             truncation=0.02)
        back = PipelineConfig.from_json_dict(
            json.loads(json.dumps(cfg.to_json_dict())))
        assert back == cfg

    def test_from_empty_dict_is_default(self):
        assert PipelineConfig.from_json_dict({}) == PipelineConfig()


class TestSceneEvalValidation:
    def test_no_pose_must_match_missing_metrics(self):
        with pytest.raises(ValueError):
            SceneEval(scene_seed=1, clutter=1, n_views=4, no_pose=True,
                      antipodal=0.5, collision_free=True,
                      pose=random_pose(np.random.default_rng(1)),
                      counts={}, timings_ms={})
        with pytest.raises(ValueError):
            SceneEval(scene_seed=1, clutter=1, n_views=4, no_pose=False,
                      antipodal=None, collision_free=None, pose=None,
                      counts={}, timings_ms={})

    def test_score_range(self):
        with pytest.raises(ValueError):
            SceneEval(scene_seed=1, clutter=1, n_views=4, no_pose=False,
                      antipodal=1.5, collision_free=True,
                      pose=random_pose(np.random.default_rng(1)),
                      counts={}, timings_ms={})


@pytest.fixture(scope="module")
def sphere_eval():
    return evaluate_scene(single_sphere_scene(), FAST_CONFIG)


class TestEvaluateScene:
    def test_finds_and_scores_a_pose(self, sphere_eval):
        row = sphere_eval
        assert not row.no_pose
        assert 0.0 <= row.antipodal <= 1.0
        assert row.collision_free in (True, False)
        assert row.clutter == 1
        assert row.counts["final"] >= 1

    def test_timings_present(self, sphere_eval):
        for key in ("render", "fuse", "plan", "metrics", "total"):
            assert sphere_eval.timings_ms[key] >= 0.0

    def test_json_row(self, sphere_eval):
        d = sphere_eval.to_json_dict()
        assert set(d) == {"scene_seed", "clutter", "n_views", "no_pose",
                          "antipodal", "collision_free", "pose", "counts",
                          "timings_ms"}
        assert isinstance(d["pose"]["T"], list)

    def test_featureless_scene_is_no_pose(self):
        row = evaluate_scene(empty_scene(), FAST_CONFIG)
        assert row.no_pose
        assert row.antipodal is None and row.pose is None


@pytest.fixture(scope="module")
def small_report():
    scenes = [generate_scene(seed=41, n_objects=2),
              generate_scene(seed=42, n_objects=2),
              generate_scene(seed=43, n_objects=3)]
    return eval_batch(scenes, FAST_CONFIG)


class TestEvalBatch:
    def test_aggregates_by_clutter_level(self, small_report):
        levels = [agg["clutter"] for agg in small_report.aggregates]
        assert levels == [2, 3]
        assert small_report.aggregates[0]["n_scenes"] == 2
        assert small_report.aggregates[1]["n_scenes"] == 1

    def test_aggregates_recompute_from_rows(self, small_report):
        for agg in small_report.aggregates:
            rows = [r for r in small_report.per_scene
                    if r.clutter == agg["clutter"]]
            scored = [r for r in rows if not r.no_pose]
            assert agg["n_no_pose"] == sum(r.no_pose for r in rows)
            if scored:
                assert agg["antipodal_mean"] == float(
                    np.mean([r.antipodal for r in scored]))
                assert agg["cfr_percent"] == 100.0 * float(
                    np.mean([r.collision_free for r in scored]))
            else:
                assert agg["antipodal_mean"] is None
                assert agg["cfr_percent"] is None

    def test_rows_keep_input_order(self, small_report):
        assert [r.scene_seed for r in small_report.per_scene] == [41, 42, 43]

    def test_jobs_do_not_change_results(self, small_report):
        scenes = [generate_scene(seed=41, n_objects=2),
                  generate_scene(seed=42, n_objects=2),
                  generate_scene(seed=43, n_objects=3)]
        threaded = eval_batch(scenes, FAST_CONFIG, jobs=3)

        def stripped(report):
            d = report.to_json_dict()
            for row in d["per_scene"]:
                row.pop("timings_ms")
            for agg in d["aggregates"]:
                agg.pop("timings_ms_mean")
            return json.dumps(d, sort_keys=True)

        assert stripped(threaded) == stripped(small_report)

    def test_table_layout(self, small_report):
        table = small_report.table()
        lines = table.strip().split("\n")
        assert "AS" in lines[0] and "CFR(%)" in lines[0]
        assert len(lines) == 3
        assert lines[1].split()[0] == "2"

    def test_save_report(self, small_report, tmp_path):
        save_report(small_report, tmp_path / "report.json",
                    tmp_path / "report.txt")
        with open(tmp_path / "report.json") as f:
            data = json.load(f)
        assert data["config"]["n_views"] == 4
        assert len(data["per_scene"]) == 3
        assert (tmp_path / "report.txt").read_text() == small_report.table()

    def test_all_no_pose_level_reports_none(self):
        report = eval_batch([empty_scene()], FAST_CONFIG)
        agg = report.aggregates[0]
        assert agg["n_no_pose"] == 1
        assert agg["antipodal_mean"] is None
        assert agg["cfr_percent"] is None
        assert "-" in report.table()


class TestEvalReportValidation:
    def test_rejects_out_of_range_aggregates(self):
        agg = {"clutter": 2, "n_scenes": 1, "n_no_pose": 0,
               "antipodal_mean": 0.5, "cfr_percent": 123.0,
               "timings_ms_mean": {}, "counts_mean": {}}
        with pytest.raises(ValueError):
            EvalReport(per_scene=(), aggregates=(agg,),
                       config=PipelineConfig())


@pytest.fixture(scope="module")
def replay():
    scene = single_sphere_scene()
    config = PipelineConfig(n_views=5, intrinsics=FAST_INTRINSICS)
    steps = closed_loop_replay(scene, None, config)
    one_shot = evaluate_scene(scene, config)
    return steps, one_shot


class TestClosedLoopReplay:
    def test_one_step_per_view(self, replay):
        steps, _ = replay
        assert [s.n_fused_frames for s in steps] == [1, 2, 3, 4, 5]
        assert all(isinstance(s, ReplayStep) for s in steps)

    def test_final_step_equals_one_shot(self, replay):
        steps, one_shot = replay
        last = steps[-1]
        assert not last.no_pose and not one_shot.no_pose
        assert last.antipodal == one_shot.antipodal
        assert last.collision_free == one_shot.collision_free
        assert (last.pose.transform.matrix().tobytes()
                == one_shot.pose.transform.matrix().tobytes())
        assert last.pose.width == one_shot.pose.width

    def test_no_pose_steps_do_not_stop_the_replay(self):
        steps = closed_loop_replay(
            empty_scene(), None,
            PipelineConfig(n_views=3, intrinsics=FAST_INTRINSICS))
        assert len(steps) == 3
        assert all(s.no_pose for s in steps)

    def test_requires_a_view(self):
        with pytest.raises(ValueError):
            closed_loop_replay(single_sphere_scene(), [], FAST_CONFIG)

    def test_step_json(self, replay):
        steps, _ = replay
        d = steps[-1].to_json_dict()
        assert d["n_fused_frames"] == 5
        assert isinstance(d["pose"]["width"], float)


class TestFusionHelpsProperty:
    def test_more_views_do_not_hurt_aggregate_score(self):
        scenes = [generate_scene(seed=s, n_objects=3) for s in (61, 62, 63)]
        few = eval_batch(scenes, PipelineConfig(
            n_views=1, intrinsics=FAST_INTRINSICS))
        many = eval_batch(scenes, PipelineConfig(
            n_views=12, intrinsics=FAST_INTRINSICS))

        def overall(report):
            rows = [r for r in report.per_scene if not r.no_pose]
            return float(np.mean([r.antipodal for r in rows]))

        assert overall(many) >= overall(few) - 0.02

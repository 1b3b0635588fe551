"""Whole-pipeline evaluation against exact scene geometry.

Planned poses are judged by the analytic scene field rather than the
fused volume: the fingers close along the grasp axis to their true
first contacts (sphere tracing plus bisection on scene_sdf) and the
antipodal score is taken there with exact normals, while collisions are
decided by densely sampling the gripper solid at the pre-close opening.
Batch evaluation fuses, plans, and scores whole scenes and aggregates
score and collision-free rate per clutter level; the closed-loop replay
re-plans after every fused frame.
"""

from __future__ import annotations

import dataclasses
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .contact import AntipodalParams, antipodal_score
from .errors import EmptyVolume
from .geom import CameraIntrinsics, GraspPose
from .planner import (AnalyticScorer, GripperModel, PlannerParams,
                      finger_opening, plan)
from .scene import (DEFAULT_RENDER_INTRINSICS, SceneSpec, render_depth,
                    sample_viewpoints, scene_normal, scene_sdf)
from .tsdf import (DEFAULT_DIMS, DEFAULT_ORIGIN, DEFAULT_TRUNCATION,
                   DEFAULT_VOXEL_SIZE, TsdfVolume, integrate_depth,
                   sample_trilinear_masked)

DEFAULT_EVAL_VIEWS = 20
# Spacing of the dense gripper-solid sampling used by the collision
# oracle, in meters.
ORACLE_SAMPLE_SPACING = 1e-3
# Finger-closing contact search: minimum sphere-trace step and the
# bisection tolerance, both in meters.
TRACE_MIN_STEP = 1e-4
CONTACT_TOL = 1e-6


@dataclass(frozen=True)
class PipelineConfig:
    """Everything needed to turn a scene into an evaluated grasp.

    Bundles the render, fusion, and planning settings so batch runs,
    replays, and the command line all share one reproducible recipe.
    plan_jobs parallelizes collision checking inside a single plan
    call; scene-level parallelism is the `jobs` argument of eval_batch.
    """

    n_views: int = DEFAULT_EVAL_VIEWS
    gripper: GripperModel = GripperModel()
    planner_params: PlannerParams = PlannerParams()
    antipodal_params: AntipodalParams = AntipodalParams()
    intrinsics: CameraIntrinsics = DEFAULT_RENDER_INTRINSICS
    origin: tuple = DEFAULT_ORIGIN
    voxel_size: float = DEFAULT_VOXEL_SIZE
    dims: tuple = DEFAULT_DIMS
    truncation: float = DEFAULT_TRUNCATION
    plan_jobs: int = 1

    def __post_init__(self):
        if not (isinstance(self.n_views, int) and self.n_views >= 1):
            raise ValueError(
                f"n_views must be an int >= 1, got {self.n_views}")
        if not (isinstance(self.plan_jobs, int) and self.plan_jobs >= 1):
            raise ValueError(
                f"plan_jobs must be an int >= 1, got {self.plan_jobs}")

    def new_volume(self) -> TsdfVolume:
        return TsdfVolume(self.origin, self.voxel_size, self.dims,
                          self.truncation)

    def viewpoints(self) -> list:
        return sample_viewpoints(self.n_views)

    def to_json_dict(self) -> dict:
        return {
            "n_views": self.n_views,
            "gripper": self.gripper.to_json_dict(),
            "planner_params": self.planner_params.to_json_dict(),
            "antipodal_params": self.antipodal_params.to_json_dict(),
            "intrinsics": self.intrinsics.to_json_dict(),
            "volume": {"origin": [float(x) for x in self.origin],
                       "voxel_size": self.voxel_size,
                       "dims": [int(d) for d in self.dims],
                       "truncation": self.truncation},
            "plan_jobs": self.plan_jobs,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "PipelineConfig":
        kwargs = {}
        if "n_views" in d:
            kwargs["n_views"] = int(d["n_views"])
        if "plan_jobs" in d:
            kwargs["plan_jobs"] = int(d["plan_jobs"])
        if "gripper" in d:
            kwargs["gripper"] = GripperModel.from_json_dict(d["gripper"])
        if "planner_params" in d:
            kwargs["planner_params"] = PlannerParams.from_json_dict(
                d["planner_params"])
        if "antipodal_params" in d:
            kwargs["antipodal_params"] = AntipodalParams.from_json_dict(
                d["antipodal_params"])
        if "intrinsics" in d:
            kwargs["intrinsics"] = CameraIntrinsics.from_json_dict(
                d["intrinsics"])
        vol = d.get("volume", {})
        if "origin" in vol:
            kwargs["origin"] = tuple(float(x) for x in vol["origin"])
        if "voxel_size" in vol:
            kwargs["voxel_size"] = float(vol["voxel_size"])
        if "dims" in vol:
            kwargs["dims"] = tuple(int(x) for x in vol["dims"])
        if "truncation" in vol:
            kwargs["truncation"] = float(vol["truncation"])
        return PipelineConfig(**kwargs)


def _first_contact(scene: SceneSpec, start: np.ndarray, direction: np.ndarray,
                   budget: float) -> float | None:
    """Arc length to the first surface crossing along a ray, or None.

    Sphere-traces the exact field (steps never overshoot a surface by
    more than TRACE_MIN_STEP), then bisects the bracketing step down to
    CONTACT_TOL. A start already on or inside the surface contacts at 0.
    """
    d = float(scene_sdf(scene, start))
    if d <= 0.0:
        return 0.0
    t = 0.0
    while True:
        t_next = min(t + max(d, TRACE_MIN_STEP), budget)
        d_next = float(scene_sdf(scene, start + t_next * direction))
        if d_next <= 0.0:
            lo, hi = t, t_next
            while hi - lo > CONTACT_TOL:
                mid = 0.5 * (lo + hi)
                if float(scene_sdf(scene, start + mid * direction)) <= 0.0:
                    hi = mid
                else:
                    lo = mid
            return 0.5 * (lo + hi)
        if t_next >= budget:
            return None
        t, d = t_next, d_next


def _dense_gripper(gripper: GripperModel) -> GripperModel:
    return dataclasses.replace(gripper, sample_spacing=ORACLE_SAMPLE_SPACING)


def oracle_check_collision(scene: SceneSpec, gripper: GripperModel,
                           pose: GraspPose) -> bool:
    """True when the densely sampled gripper solid clears the scene.

    The solid is sampled at ORACLE_SAMPLE_SPACING with the fingers at
    the same pre-close opening the volumetric check uses; free means
    every sample has strictly positive exact signed distance.
    """
    dense = _dense_gripper(gripper)
    pts = pose.transform.apply(
        dense.vertices_at_width(finger_opening(gripper, pose.width)))
    return float(np.min(scene_sdf(scene, pts))) > 0.0


def oracle_pose_metrics(scene: SceneSpec, pose: GraspPose,
                        gripper: GripperModel | None = None
                        ) -> tuple[float, bool]:
    """(antipodal score, collision free) for a pose, by exact geometry.

    Each fingertip closes along the grasp axis from its pre-close
    position until it first touches the analytic surface; the score is
    antipodal_score with exact normals at the two touch points, or 0.0
    when either finger sweeps max_width without touching anything.
    Collision is oracle_check_collision at the pre-close pose; the
    approach trajectory is not checked.
    """
    gripper = gripper if gripper is not None else GripperModel()
    g = pose.closing_axis
    center = pose.center
    half = 0.5 * pose.width
    hits = []
    for sign in (-1.0, 1.0):
        start = center + sign * half * g
        t = _first_contact(scene, start, -sign * g, gripper.max_width)
        if t is None:
            hits = None
            break
        hits.append(start - sign * t * g)
    if hits is None:
        score = 0.0
    else:
        n_p = scene_normal(scene, hits[0])
        n_pp = scene_normal(scene, hits[1])
        # A finger buried at a gradient-singular point (a medial-axis
        # location deep inside a solid) has no usable contact normal.
        if min(np.linalg.norm(n_p), np.linalg.norm(n_pp)) < 0.5:
            score = 0.0
        else:
            score = antipodal_score(n_p, n_pp, g)
    return score, oracle_check_collision(scene, gripper, pose)


def pose_touches_unobserved(vol: TsdfVolume, gripper: GripperModel,
                            pose: GraspPose) -> bool:
    """Whether any gripper check point lacks fully observed support.

    True when a check point (at the volumetric check's opening and
    sampling) interpolates from a cell with an unobserved corner or
    falls outside the volume, the two cases where the volumetric check
    reads optimistic free-space values instead of measurements.
    """
    pts = pose.transform.apply(gripper.vertices_at_width(
        finger_opening(gripper, pose.width, vol.voxel_size)))
    _, inside, supported = sample_trilinear_masked(vol, pts)
    return bool(np.any(~inside | ~supported))


def _scene_clutter(scene: SceneSpec) -> int:
    """Requested object count: placed shapes plus skipped placements."""
    return len(scene.shapes) + scene.skipped


@dataclass(frozen=True)
class SceneEval:
    """Outcome of planning and oracle-scoring one scene.

    antipodal, collision_free, and pose are None exactly when no_pose
    is set (the planner returned nothing to evaluate).
    """

    scene_seed: int
    clutter: int
    n_views: int
    no_pose: bool
    antipodal: float | None
    collision_free: bool | None
    pose: GraspPose | None
    counts: dict
    timings_ms: dict

    def __post_init__(self):
        missing = (self.antipodal is None or self.collision_free is None
                   or self.pose is None)
        if self.no_pose != missing:
            raise ValueError("metrics must be absent exactly for no-pose "
                             "evaluations")
        if self.antipodal is not None and not 0.0 <= self.antipodal <= 1.0:
            raise ValueError(
                f"antipodal score {self.antipodal} outside [0, 1]")

    def to_json_dict(self) -> dict:
        return {
            "scene_seed": self.scene_seed,
            "clutter": self.clutter,
            "n_views": self.n_views,
            "no_pose": self.no_pose,
            "antipodal": self.antipodal,
            "collision_free": self.collision_free,
            "pose": None if self.pose is None else self.pose.to_json_dict(),
            "counts": self.counts,
            "timings_ms": self.timings_ms,
        }


@dataclass(frozen=True)
class EvalReport:
    """Per-scene rows plus per-clutter-level aggregate AS/CFR.

    Aggregates are plain means of the per-scene entries (no-pose scenes
    excluded from the score and collision denominators but counted),
    so they can be recomputed from the rows exactly.
    """

    per_scene: tuple
    aggregates: tuple
    config: PipelineConfig

    def __post_init__(self):
        for agg in self.aggregates:
            a, c = agg["antipodal_mean"], agg["cfr_percent"]
            if a is not None and not 0.0 <= a <= 1.0:
                raise ValueError(f"aggregate AS {a} outside [0, 1]")
            if c is not None and not 0.0 <= c <= 100.0:
                raise ValueError(f"aggregate CFR {c} outside [0, 100]")

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_json_dict(),
            "per_scene": [row.to_json_dict() for row in self.per_scene],
            "aggregates": list(self.aggregates),
        }

    def table(self) -> str:
        """Plain-text AS/CFR summary, one row per clutter level."""
        lines = [f"{'clutter':>8} {'scenes':>7} {'no-pose':>8} "
                 f"{'AS':>7} {'CFR(%)':>7}"]
        for agg in self.aggregates:
            as_txt = ("-" if agg["antipodal_mean"] is None
                      else f"{agg['antipodal_mean']:.4f}")
            cfr_txt = ("-" if agg["cfr_percent"] is None
                       else f"{agg['cfr_percent']:.2f}")
            lines.append(f"{agg['clutter']:>8d} {agg['n_scenes']:>7d} "
                         f"{agg['n_no_pose']:>8d} {as_txt:>7} {cfr_txt:>7}")
        return "\n".join(lines) + "\n"


def save_report(report: EvalReport, json_path, table_path=None) -> None:
    """Write a report as JSON, plus the text table when a path is given."""
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(report.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    if table_path is not None:
        with open(table_path, "w", encoding="utf-8") as f:
            f.write(report.table())


def _fuse_views(scene, config, vol, views, timings_ms) -> None:
    for cam in views:
        t0 = time.perf_counter()
        depth = render_depth(scene, config.intrinsics, cam)
        t1 = time.perf_counter()
        integrate_depth(vol, depth, config.intrinsics, cam)
        t2 = time.perf_counter()
        timings_ms["render"] += (t1 - t0) * 1e3
        timings_ms["fuse"] += (t2 - t1) * 1e3


def _plan_and_score(scene, config, vol, timings_ms):
    """(no_pose, antipodal, collision_free, pose, counts) on one volume."""
    t0 = time.perf_counter()
    try:
        result = plan(vol, config.gripper, AnalyticScorer(),
                      config.planner_params, config.antipodal_params,
                      jobs=config.plan_jobs)
        grasps = result.grasps
        counts = dict(result.counts)
    except EmptyVolume:
        grasps = ()
        counts = {}
    timings_ms["plan"] += (time.perf_counter() - t0) * 1e3

    if not grasps:
        timings_ms["metrics"] += 0.0
        return True, None, None, None, counts
    t0 = time.perf_counter()
    top = grasps[0]
    score, free = oracle_pose_metrics(scene, top.pose, config.gripper)
    timings_ms["metrics"] += (time.perf_counter() - t0) * 1e3
    return False, score, free, top.pose, counts


def evaluate_scene(scene: SceneSpec, config: PipelineConfig | None = None
                   ) -> SceneEval:
    """Render, fuse, plan, and oracle-score one scene end to end.

    The planner's top-ranked pose is the one evaluated. A plan with no
    output (including a volume with nothing observed) yields a no-pose
    row rather than an error.
    """
    config = config if config is not None else PipelineConfig()
    timings_ms = {"render": 0.0, "fuse": 0.0, "plan": 0.0, "metrics": 0.0}
    t_start = time.perf_counter()
    vol = config.new_volume()
    _fuse_views(scene, config, vol, config.viewpoints(), timings_ms)
    no_pose, score, free, pose, counts = _plan_and_score(
        scene, config, vol, timings_ms)
    timings_ms["total"] = (time.perf_counter() - t_start) * 1e3
    return SceneEval(scene_seed=scene.seed, clutter=_scene_clutter(scene),
                     n_views=config.n_views, no_pose=no_pose,
                     antipodal=score, collision_free=free, pose=pose,
                     counts=counts, timings_ms=timings_ms)


def _aggregate_level(rows: list) -> dict:
    scored = [r for r in rows if not r.no_pose]
    agg = {
        "clutter": rows[0].clutter,
        "n_scenes": len(rows),
        "n_no_pose": sum(r.no_pose for r in rows),
        "antipodal_mean": (float(np.mean([r.antipodal for r in scored]))
                           if scored else None),
        "cfr_percent": (100.0 * float(np.mean([r.collision_free
                                               for r in scored]))
                        if scored else None),
    }
    timing_keys = sorted({k for r in rows for k in r.timings_ms})
    agg["timings_ms_mean"] = {
        k: float(np.mean([r.timings_ms[k] for r in rows if k in r.timings_ms]))
        for k in timing_keys}
    count_keys = sorted({k for r in rows for k in r.counts})
    agg["counts_mean"] = {
        k: float(np.mean([r.counts[k] for r in rows if k in r.counts]))
        for k in count_keys}
    return agg


def eval_batch(scenes, config: PipelineConfig | None = None,
               jobs: int = 1) -> EvalReport:
    """Evaluate many scenes and aggregate per clutter level.

    Clutter level is each scene's requested object count (placed plus
    skipped), so a scene keeps its level even when placement dropped an
    object. Rows keep the input order; aggregates are sorted by level.
    Results do not depend on jobs.
    """
    config = config if config is not None else PipelineConfig()
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(lambda s: evaluate_scene(s, config), scenes))
    else:
        rows = [evaluate_scene(s, config) for s in scenes]
    by_level: dict = {}
    for row in rows:
        by_level.setdefault(row.clutter, []).append(row)
    aggregates = tuple(_aggregate_level(by_level[lvl])
                       for lvl in sorted(by_level))
    return EvalReport(per_scene=tuple(rows), aggregates=aggregates,
                      config=config)


@dataclass(frozen=True)
class ReplayStep:
    """Plan outcome after fusing the first n_fused_frames views."""

    n_fused_frames: int
    no_pose: bool
    antipodal: float | None
    collision_free: bool | None
    pose: GraspPose | None
    counts: dict

    def to_json_dict(self) -> dict:
        return {
            "n_fused_frames": self.n_fused_frames,
            "no_pose": self.no_pose,
            "antipodal": self.antipodal,
            "collision_free": self.collision_free,
            "pose": None if self.pose is None else self.pose.to_json_dict(),
            "counts": self.counts,
        }


def closed_loop_replay(scene: SceneSpec, views=None,
                       config: PipelineConfig | None = None) -> list:
    """Fuse one view at a time, planning and scoring after each.

    Returns one ReplayStep per view. Steps where the plan comes back
    empty are recorded as no-pose and the replay continues. Because the
    volume is fused incrementally in view order, the final step sees
    exactly the volume a one-shot evaluation over the same views would.
    """
    config = config if config is not None else PipelineConfig()
    views = list(views) if views is not None else config.viewpoints()
    if not views:
        raise ValueError("closed_loop_replay needs at least one view")
    vol = config.new_volume()
    timings_ms = {"render": 0.0, "fuse": 0.0, "plan": 0.0, "metrics": 0.0}
    steps = []
    for k, cam in enumerate(views, start=1):
        _fuse_views(scene, config, vol, [cam], timings_ms)
        no_pose, score, free, pose, counts = _plan_and_score(
            scene, config, vol, timings_ms)
        steps.append(ReplayStep(n_fused_frames=k, no_pose=no_pose,
                                antipodal=score, collision_free=free,
                                pose=pose, counts=counts))
    return steps

"""Grasp pose planning on fused volumes.

Turns scored contact pairs into ranked, collision-free 7-DoF grasp
poses. The stages are approach-vector sampling around each pair's
closing axis, volumetric collision checking of a point-sampled gripper
model, top-fraction selection, and non-maximum suppression.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .contact import AntipodalParams, ContactPair, sample_contact_pairs
from .errors import DegenerateGraspVector
from .geom import GraspPose, compose_grasp_pose, rotation_geodesic
from .isosurface import marching_cubes
from .tsdf import DEFAULT_VOXEL_SIZE, TsdfVolume, sample_trilinear

DEFAULT_N_APPROACH = 8
DEFAULT_TOP_FRACTION = 0.003
DEFAULT_TOP_FLOOR = 16
DEFAULT_NMS_TRANS = 0.02
DEFAULT_NMS_ROT = math.radians(30.0)
DEFAULT_MAX_ELEVATION = math.radians(100.0)
# Score units of ranking penalty per meter of distance from the volume
# center. Separates equal-quality candidates so the top pose stays put
# as more views refine the field, instead of wandering across a flat
# quality plateau on sensor noise.
DEFAULT_CENTER_PREFERENCE = 1.0

# Extra opening past the pair width when placing finger check points,
# in voxels per side. Checking at full opening would reject tight but
# valid grasps; checking at exact width would scrape the object's own
# truncation band.
FINGER_CLEARANCE_VOXELS = 1.0


def _sample_axis(length: float, spacing: float) -> np.ndarray:
    """Grid coordinates covering [0, length] at most `spacing` apart."""
    n = max(2, int(math.ceil(length / spacing)) + 1)
    return np.linspace(0.0, length, n)


def _box_points(lo, hi, spacing: float) -> np.ndarray:
    """Regular point sampling of an axis-aligned box, endpoints included."""
    axes = [_sample_axis(h - l, spacing) + l for l, h in zip(lo, hi)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


@dataclass(frozen=True)
class GripperModel:
    """Parallel-jaw gripper as a point-sampled solid.

    The gripper frame matches GraspPose: y is the closing axis, z the
    approach axis. Fingertips lie in the z=0 plane and the body extends
    toward negative z (fingers first, palm behind them). Each finger is
    a box of square cross section finger_thickness on a side; the palm
    spans the full opening behind the fingers.

    Point samples are spaced at most sample_spacing apart, which must
    not exceed half the default voxel size so nothing slips between
    check points.
    """

    max_width: float = 0.08
    finger_depth: float = 0.04
    finger_thickness: float = 0.01
    palm_depth: float = 0.02
    sample_spacing: float = 0.5 * DEFAULT_VOXEL_SIZE

    def __post_init__(self):
        for name in ("max_width", "finger_depth", "finger_thickness",
                     "palm_depth", "sample_spacing"):
            if not getattr(self, name) > 0.0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.sample_spacing > 0.5 * DEFAULT_VOXEL_SIZE + 1e-12:
            raise ValueError(
                f"sample_spacing {self.sample_spacing} exceeds half a voxel "
                f"({0.5 * DEFAULT_VOXEL_SIZE:.6f}); points could tunnel")
        t = self.finger_thickness
        finger = _box_points((-0.5 * t, 0.0, -self.finger_depth),
                             (0.5 * t, t, 0.0), self.sample_spacing)
        half_span = 0.5 * self.max_width + t
        palm = _box_points(
            (-0.5 * t, -half_span, -self.finger_depth - self.palm_depth),
            (0.5 * t, half_span, -self.finger_depth), self.sample_spacing)
        object.__setattr__(self, "_finger", finger)
        object.__setattr__(self, "_palm", palm)

    def vertices_at_width(self, width: float) -> np.ndarray:
        """Check points with the finger inner faces at +/- width/2."""
        if not 0.0 <= width <= self.max_width + 1e-12:
            raise ValueError(f"width {width} outside [0, {self.max_width}]")
        pos = self._finger + np.array([0.0, 0.5 * width, 0.0])
        neg = pos * np.array([1.0, -1.0, 1.0])
        return np.vstack([pos, neg, self._palm])

    @property
    def vertices(self) -> np.ndarray:
        """Check points at maximum opening, in the gripper frame."""
        return self.vertices_at_width(self.max_width)

    def to_json_dict(self) -> dict:
        return {"max_width": self.max_width,
                "finger_depth": self.finger_depth,
                "finger_thickness": self.finger_thickness,
                "palm_depth": self.palm_depth,
                "sample_spacing": self.sample_spacing}

    @staticmethod
    def from_json_dict(d: dict) -> "GripperModel":
        return GripperModel(**{k: float(d[k]) for k in
                               ("max_width", "finger_depth", "finger_thickness",
                                "palm_depth", "sample_spacing") if k in d})


@dataclass(frozen=True)
class PlannerParams:
    """Knobs for candidate selection, collision checking, and NMS.

    max_approach_elevation is measured from straight down, so 0 allows
    only top-down grasps and values past pi/2 admit sideways ones;
    approaches from below the horizontal stay rejected at the default.

    center_preference discounts a pair's selection value by that many
    score units per meter between its contact midpoint and the volume
    center. This breaks ties across quality plateaus deterministically,
    keeping the top pose stable under incremental fusion; 0 ranks by
    the raw pair score alone.
    """

    n_approach: int = DEFAULT_N_APPROACH
    top_fraction: float = DEFAULT_TOP_FRACTION
    collision_margin: float = 0.0
    nms_trans: float = DEFAULT_NMS_TRANS
    nms_rot: float = DEFAULT_NMS_ROT
    max_approach_elevation: float = DEFAULT_MAX_ELEVATION
    center_preference: float = DEFAULT_CENTER_PREFERENCE

    def __post_init__(self):
        if not (isinstance(self.n_approach, int) and self.n_approach >= 2):
            raise ValueError(f"n_approach must be an int >= 2, got {self.n_approach}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError(f"top_fraction must be in (0, 1], got {self.top_fraction}")
        for name in ("collision_margin", "nms_trans", "nms_rot",
                     "center_preference"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.max_approach_elevation <= math.pi:
            raise ValueError("max_approach_elevation must be in [0, pi], "
                             f"got {self.max_approach_elevation}")

    def to_json_dict(self) -> dict:
        return {"n_approach": self.n_approach,
                "top_fraction": self.top_fraction,
                "collision_margin": self.collision_margin,
                "nms_trans": self.nms_trans,
                "nms_rot": self.nms_rot,
                "max_approach_elevation": self.max_approach_elevation,
                "center_preference": self.center_preference}

    @staticmethod
    def from_json_dict(d: dict) -> "PlannerParams":
        kwargs = {}
        for key in ("top_fraction", "collision_margin", "nms_trans",
                    "nms_rot", "max_approach_elevation",
                    "center_preference"):
            if key in d:
                kwargs[key] = float(d[key])
        if "n_approach" in d:
            kwargs["n_approach"] = int(d["n_approach"])
        return PlannerParams(**kwargs)


@dataclass(frozen=True)
class PlannedGrasp:
    """One ranked planner output.

    score is the selection value the ranking used: the pair's quality
    score minus the center-preference distance penalty, clamped at 0.
    pair_index is the position of the originating contact pair in
    sampling order.
    """

    pose: GraspPose
    score: float
    pair_index: int

    def to_json_dict(self) -> dict:
        return {"T": self.pose.transform.matrix().tolist(),
                "width": self.pose.width,
                "score": self.score,
                "pair_index": self.pair_index}

    @staticmethod
    def from_json_dict(d: dict) -> "PlannedGrasp":
        pose = GraspPose.from_json_dict({"T": d["T"], "width": d["width"]})
        return PlannedGrasp(pose=pose, score=float(d["score"]),
                            pair_index=int(d["pair_index"]))


@dataclass(frozen=True)
class PlanResult:
    """Ranked grasps plus per-stage candidate counts and wall times."""

    grasps: tuple
    counts: dict
    timings: dict

    @property
    def poses(self) -> list:
        return [g.pose for g in self.grasps]


class Scorer:
    """Assigns each contact pair a quality score in [0, 1]."""

    def score(self, vol: TsdfVolume, pairs: list) -> np.ndarray:
        raise NotImplementedError


class AnalyticScorer(Scorer):
    """Keeps the gradient-based antipodal scores the pairs already carry."""

    def score(self, vol: TsdfVolume, pairs: list) -> np.ndarray:
        return np.array([p.score for p in pairs], dtype=np.float64)


def sample_approach_vectors(g, n: int) -> np.ndarray:
    """Unit approach directions evenly spaced in the plane normal to g.

    The zero-phase direction is the projection of world -z onto the
    plane (so the first vector is the most downward-pointing one); when
    g is parallel to z the projection degenerates and world +x is used
    instead.

    Returns an (n, 3) array. Raises DegenerateGraspVector when g is not
    unit length and ValueError when n < 2.
    """
    g = np.asarray(g, dtype=np.float64)
    if abs(float(np.linalg.norm(g)) - 1.0) > 1e-6:
        raise DegenerateGraspVector(f"closing axis is not unit length: {g}")
    if n < 2:
        raise ValueError(f"need at least 2 approach vectors, got {n}")
    ref = np.array([0.0, 0.0, -1.0])
    proj = ref - np.dot(ref, g) * g
    norm = float(np.linalg.norm(proj))
    if norm < 1e-6:
        ref = np.array([1.0, 0.0, 0.0])
        proj = ref - np.dot(ref, g) * g
        norm = float(np.linalg.norm(proj))
    a0 = proj / norm
    b = np.cross(g, a0)
    phase = 2.0 * np.pi * np.arange(n) / n
    vecs = np.cos(phase)[:, None] * a0 + np.sin(phase)[:, None] * b
    return vecs / np.linalg.norm(vecs, axis=1, keepdims=True)


def approach_elevation(a) -> float:
    """Angle in radians between an approach direction and straight down."""
    return float(np.arccos(np.clip(-np.asarray(a, dtype=np.float64)[2], -1.0, 1.0)))


def finger_opening(gripper: GripperModel, width: float,
                   voxel_size: float = DEFAULT_VOXEL_SIZE) -> float:
    """Pre-close finger separation: one voxel of clearance per side."""
    open_w = width + 2.0 * FINGER_CLEARANCE_VOXELS * voxel_size
    return min(open_w, gripper.max_width)


_COARSE_STRIDE = 8


def _poses_collision_free(vol, gripper, poses, width, margin) -> np.ndarray:
    """Vectorized check of several poses sharing one finger opening.

    Runs in two exact stages: every pose is first tested against a
    strided subset of the gripper points, and only poses that clear it
    are tested against the remaining points. A pose is free iff all of
    its points clear the margin, so the split never changes a verdict;
    it only skips the bulk of the sampling for poses the subset already
    proves to collide.
    """
    base = gripper.vertices_at_width(
        finger_opening(gripper, width, vol.voxel_size))
    rots = np.stack([p.transform.rotation for p in poses])
    trans = np.stack([p.transform.translation for p in poses])

    def _all_free(points, rows):
        pts = np.einsum("kij,mj->kmi", rots[rows], points)
        pts += trans[rows, None, :]
        flat = pts.reshape(-1, 3)
        vals = np.full(len(flat), np.inf)
        inside = vol.contains(flat)
        vals[inside] = sample_trilinear(vol, flat[inside])
        return np.all(vals.reshape(len(rows), -1) > margin, axis=1)

    rows = np.arange(len(poses))
    free = _all_free(base[::_COARSE_STRIDE], rows)
    survivors = rows[free]
    if len(survivors):
        rest = np.delete(base, slice(None, None, _COARSE_STRIDE), axis=0)
        if len(rest):
            free[survivors] = _all_free(rest, survivors)
    return free


def check_collision(vol: TsdfVolume, gripper: GripperModel, pose: GraspPose,
                    margin: float = 0.0) -> bool:
    """True when the posed gripper sits entirely in free space.

    Every gripper check point falling inside the volume must sample a
    trilinear value strictly greater than margin; points outside the
    volume bounds count as free. Fingers are placed at the pose's
    closing width plus one voxel of clearance per side, not at the
    maximum opening.
    """
    return bool(_poses_collision_free(vol, gripper, [pose], pose.width, margin)[0])


def _pair_candidates(vol, gripper, pair, pair_index, params, rank_score):
    """Collision-free grasps for one pair, in approach-vector order."""
    poses = []
    for a in sample_approach_vectors(pair.g, params.n_approach):
        if approach_elevation(a) > params.max_approach_elevation + 1e-12:
            continue
        poses.append(compose_grasp_pose(pair.p, pair.p_prime, a))
    if not poses:
        return [], 0
    free = _poses_collision_free(vol, gripper, poses, pair.width,
                                 params.collision_margin)
    grasps = [PlannedGrasp(pose=p, score=rank_score, pair_index=pair_index)
              for p, ok in zip(poses, free) if ok]
    return grasps, len(poses)


def _selection_values(vol, pairs, params) -> np.ndarray:
    """Per-pair ranking value: quality minus the centering penalty."""
    scores = np.array([p.score for p in pairs], dtype=np.float64)
    if params.center_preference == 0.0 or not pairs:
        return scores
    center = np.asarray(vol.origin, dtype=np.float64) \
        + 0.5 * vol.voxel_size * np.asarray(vol.dims, dtype=np.float64)
    mids = np.array([0.5 * (p.p + p.p_prime) for p in pairs])
    dist = np.linalg.norm(mids - center, axis=1)
    return scores - params.center_preference * dist


def select_feasible(vol: TsdfVolume, gripper: GripperModel, pairs: list,
                    params: PlannerParams, jobs: int = 1,
                    counts: dict | None = None) -> list:
    """Collision-checked candidate grasps from the best-ranked pairs.

    Each pair's selection value is its score minus center_preference
    times the distance from its contact midpoint to the volume center.
    Pairs are ordered by that value descending (ties: smaller width
    first, then input order) and the top ceil(top_fraction * count) of
    them kept, with a floor of 16 (or all pairs when fewer exist). Each
    kept pair contributes one candidate pose per approach vector that
    is below the elevation limit and passes check_collision; candidates
    carry the selection value, clamped at 0, as their score.

    Results are deterministic and independent of jobs; pair_index on
    each result refers to the position in the input list.
    """
    values = _selection_values(vol, pairs, params)
    order = sorted(range(len(pairs)),
                   key=lambda i: (-values[i], pairs[i].width, i))
    n_keep = min(len(pairs), max(DEFAULT_TOP_FLOOR,
                                 math.ceil(params.top_fraction * len(pairs))))
    kept = order[:n_keep]

    def one(i):
        return _pair_candidates(vol, gripper, pairs[i], i, params,
                                max(0.0, float(values[i])))

    if jobs > 1 and len(kept) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, kept))
    else:
        results = [one(i) for i in kept]

    out = []
    n_posed = 0
    for grasps, posed in results:
        out.extend(grasps)
        n_posed += posed
    if counts is not None:
        counts["kept_pairs"] = len(kept)
        counts["poses_checked"] = n_posed
        counts["collision_free"] = len(out)
    return out


def nms(candidates: list, nms_trans: float, nms_rot: float) -> list:
    """Greedy non-maximum suppression over planned grasps.

    Repeatedly keeps the highest-scoring remaining candidate and drops
    every other candidate whose pose center is closer than nms_trans
    AND whose rotation is within nms_rot geodesically. Ties preserve
    input order, so the result is deterministic.
    """
    order = sorted(range(len(candidates)),
                   key=lambda i: (-candidates[i].score, i))
    kept = []
    for i in order:
        cand = candidates[i]
        suppressed = False
        for ref in kept:
            near = (np.linalg.norm(cand.pose.center - ref.pose.center)
                    < nms_trans)
            if near and rotation_geodesic(cand.pose.transform.rotation,
                                          ref.pose.transform.rotation) < nms_rot:
                suppressed = True
                break
        if not suppressed:
            kept.append(cand)
    return kept


def plan(vol: TsdfVolume, gripper: GripperModel | None = None,
         scorer: Scorer | None = None, params: PlannerParams | None = None,
         contact_params: AntipodalParams | None = None,
         jobs: int = 1) -> PlanResult:
    """Full pipeline from a fused volume to ranked grasp poses.

    Extracts the isosurface, samples antipodal contact pairs, rescores
    them with the given scorer, ranks them by score discounted with the
    center-preference penalty, collision-checks the top fraction, and
    suppresses near-duplicates. Raises EmptyVolume when the volume has
    no observed voxels; an observed but surface-free volume yields an
    empty result.
    """
    gripper = gripper if gripper is not None else GripperModel()
    scorer = scorer if scorer is not None else AnalyticScorer()
    params = params if params is not None else PlannerParams()
    contact_params = (contact_params if contact_params is not None
                      else AntipodalParams())

    counts: dict = {}
    timings: dict = {}
    t_total = time.perf_counter()

    t0 = time.perf_counter()
    mesh = marching_cubes(vol)
    timings["isosurface"] = time.perf_counter() - t0
    counts["vertices"] = mesh.n_vertices

    t0 = time.perf_counter()
    pairs = sample_contact_pairs(vol, mesh, contact_params)
    timings["contacts"] = time.perf_counter() - t0
    counts["pairs"] = len(pairs)

    t0 = time.perf_counter()
    if pairs:
        scores = np.asarray(scorer.score(vol, pairs), dtype=np.float64)
        if scores.shape != (len(pairs),):
            raise ValueError(f"scorer returned shape {scores.shape} "
                             f"for {len(pairs)} pairs")
        if np.any((scores < 0.0) | (scores > 1.0)):
            raise ValueError("scorer returned values outside [0, 1]")
        pairs = [p.with_score(float(s)) for p, s in zip(pairs, scores)]
    timings["scoring"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    candidates = select_feasible(vol, gripper, pairs, params, jobs=jobs,
                                 counts=counts)
    timings["selection"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ranked = nms(candidates, params.nms_trans, params.nms_rot)
    timings["nms"] = time.perf_counter() - t0
    counts["final"] = len(ranked)
    timings["total"] = time.perf_counter() - t_total

    return PlanResult(grasps=tuple(ranked), counts=counts, timings=timings)

"""Labeled grasp datasets built from analytic shape analysis.

Contact pairs are first matched on each shape's exact surface
(area-uniform samples, analytic normals, exact ray intersections) and
labeled graspable or not. Scene construction transfers the labels into
clutter, where blocked approaches and permuted rematching contribute
negative samples. Finally, fused volume snapshots at several view
counts are written alongside the pairs still visible in each.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .contact import (AntipodalParams, ContactPair, antipodal_score,
                      is_antipodal)
from .errors import MissingShapeLabels
from .geom import RigidTransform, compose_grasp_pose
from .planner import (GripperModel, finger_opening,
                      sample_approach_vectors)
from .scene import (DEFAULT_RENDER_INTRINSICS, PrimitiveShape, SceneSpec,
                    ray_shape_interval, render_depth, sample_viewpoints,
                    save_scene, scene_sdf)
from .tsdf import (DEFAULT_DIMS, DEFAULT_ORIGIN, DEFAULT_TRUNCATION,
                   DEFAULT_VOXEL_SIZE, TsdfVolume, integrate_depth,
                   sample_trilinear, save_volume)

LABEL_POSITIVE = "positive"
LABEL_NEGATIVE = "negative"
PATTERN_UNGRASPABLE = "ungraspable"
PATTERN_ALL_COLLIDING = "all_colliding"
PATTERN_REMATCH = "rematch"
NEGATIVE_PATTERNS = (PATTERN_UNGRASPABLE, PATTERN_ALL_COLLIDING,
                     PATTERN_REMATCH)

DEFAULT_SURFACE_SAMPLES = 400
DEFAULT_VIEW_COUNTS = (5, 10, 14, 19)
# A contact counts as visible when the fused field magnitude there is
# at most this many voxels.
VISIBILITY_VOXELS = 0.5
# Negatives are subsampled down to this many per positive.
MAX_NEGATIVE_RATIO = 3


@dataclass(frozen=True)
class LabeledPair:
    """A contact pair with its grasp label and scene provenance.

    scene_id and shape_id are -1 for shape-frame pairs that have not
    been bound to a scene yet. negative_pattern is present exactly when
    the label is negative.
    """

    pair: ContactPair
    label: str
    negative_pattern: str | None
    scene_id: int
    shape_id: int

    def __post_init__(self):
        if self.label not in (LABEL_POSITIVE, LABEL_NEGATIVE):
            raise ValueError(f"unknown label {self.label!r}")
        has_pattern = self.negative_pattern is not None
        if (self.label == LABEL_NEGATIVE) != has_pattern:
            raise ValueError("negative_pattern must be present exactly for "
                             "negative labels")
        if (self.negative_pattern is not None
                and self.negative_pattern not in NEGATIVE_PATTERNS):
            raise ValueError(f"unknown pattern {self.negative_pattern!r}")

    def to_json_dict(self) -> dict:
        d = self.pair.to_json_dict()
        d["label"] = self.label
        d["negative_pattern"] = self.negative_pattern
        d["scene_id"] = self.scene_id
        d["shape_id"] = self.shape_id
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "LabeledPair":
        return LabeledPair(pair=ContactPair.from_json_dict(d),
                           label=d["label"],
                           negative_pattern=d.get("negative_pattern"),
                           scene_id=int(d["scene_id"]),
                           shape_id=int(d["shape_id"]))


@dataclass(frozen=True)
class DatasetRecord:
    """One volume snapshot plus the labeled pairs visible in it."""

    volume_path: str
    pairs_path: str
    n_fused_frames: int
    pairs: tuple


def save_labeled_jsonl(path, pairs) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for lp in pairs:
            f.write(json.dumps(lp.to_json_dict(), sort_keys=True))
            f.write("\n")


def load_labeled_jsonl(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(LabeledPair.from_json_dict(json.loads(line)))
    return out


def shape_key(shape: PrimitiveShape) -> tuple:
    """Hashable identity of a shape's geometry, ignoring its pose."""
    return (shape.kind, tuple(shape.params.tolist()))


def _surface_normal(shape: PrimitiveShape, points: np.ndarray,
                    eps: float = 1e-6) -> np.ndarray:
    """Unit outward normals by central differences of the shape's field."""
    pts = np.atleast_2d(points)
    g = np.empty_like(pts)
    for k in range(3):
        step = np.zeros(3)
        step[k] = eps
        g[:, k] = shape.sdf(pts + step) - shape.sdf(pts - step)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _approach_point_sets(gripper: GripperModel, pair: ContactPair,
                         n_approach: int):
    """World-frame gripper points for each approach pose of a pair.

    Approach vectors come from sample_approach_vectors around the pair's
    closing axis (no elevation gate: a floor in the scene field already
    rules out poses reaching through it). Fingers are opened one voxel
    past the pair width on each side, as in the volumetric check.
    """
    approaches = sample_approach_vectors(pair.g, n_approach)
    base = gripper.vertices_at_width(finger_opening(gripper, pair.width))
    for a in approaches:
        pose = compose_grasp_pose(pair.p, pair.p_prime, a)
        yield pose.transform.apply(base)


def oracle_free_approaches(sdf_fn, gripper: GripperModel, pair: ContactPair,
                           n_approach: int) -> np.ndarray:
    """Which approach poses place every gripper point in free space."""
    free = [bool(np.min(np.asarray(sdf_fn(pts))) > 0.0)
            for pts in _approach_point_sets(gripper, pair, n_approach)]
    return np.asarray(free, dtype=bool)


def has_free_approach(sdf_fn, gripper: GripperModel, pair: ContactPair,
                      n_approach: int) -> bool:
    """True when any approach pose is collision-free; stops at the first."""
    for pts in _approach_point_sets(gripper, pair, n_approach):
        if float(np.min(np.asarray(sdf_fn(pts)))) > 0.0:
            return True
    return False


def grasp_analysis_shape(shape: PrimitiveShape, gripper: GripperModel,
                         params: AntipodalParams,
                         n_surface_samples: int = DEFAULT_SURFACE_SAMPLES,
                         n_approach: int = 8, seed: int = 0) -> list:
    """Shape-frame contact pairs with graspability labels.

    Surface points are sampled uniformly by area; each is matched to the
    exact exit point of a ray cast inward along its normal. Matches
    outside the width limits are dropped. A pair is labeled positive
    when its analytic antipodal score passes the threshold AND at least
    one approach pose keeps the gripper out of the shape; otherwise it
    is an `ungraspable` negative. The pose is ignored: analysis runs in
    the shape's local frame.
    """
    canonical = PrimitiveShape(shape.kind, shape.params,
                               RigidTransform.identity())
    rng = np.random.default_rng(seed)
    pts, normals = canonical.sample_surface(n_surface_samples, rng)
    out = []
    for p, n in zip(pts, normals):
        span = ray_shape_interval(canonical, p, -n)
        if span is None:
            continue
        width = float(span[1])
        if not params.min_width <= width <= params.max_width:
            continue
        p_prime = p - width * n
        n_pp = _surface_normal(canonical, p_prime)[0]
        g = -n
        score = antipodal_score(n, n_pp, g)
        pair = ContactPair(p=p, p_prime=p_prime, g=g, n_p=n, n_pprime=n_pp,
                           width=width, score=score, sdf_p=0.0, sdf_pprime=0.0)
        graspable = (is_antipodal(pair, params)
                     and has_free_approach(canonical.sdf, gripper, pair,
                                           n_approach))
        out.append(LabeledPair(
            pair=pair,
            label=LABEL_POSITIVE if graspable else LABEL_NEGATIVE,
            negative_pattern=None if graspable else PATTERN_UNGRASPABLE,
            scene_id=-1, shape_id=-1))
    return out


def _bind_to_scene(lp: LabeledPair, pose: RigidTransform, scene_id: int,
                   shape_id: int) -> LabeledPair:
    rot = pose.rotation
    pr = lp.pair
    world = ContactPair(p=pose.apply(pr.p), p_prime=pose.apply(pr.p_prime),
                        g=rot @ pr.g, n_p=rot @ pr.n_p,
                        n_pprime=rot @ pr.n_pprime, width=pr.width,
                        score=pr.score, sdf_p=pr.sdf_p,
                        sdf_pprime=pr.sdf_pprime)
    return LabeledPair(pair=world, label=lp.label,
                       negative_pattern=lp.negative_pattern,
                       scene_id=scene_id, shape_id=shape_id)


def build_scene_labels(scene: SceneSpec, per_shape: dict,
                       gripper: GripperModel, params: AntipodalParams,
                       n_approach: int = 8, seed: int = 0,
                       max_negative_ratio: int = MAX_NEGATIVE_RATIO) -> list:
    """World-frame labeled pairs for one scene.

    per_shape maps shape_key(shape) to the shape-frame labels from
    grasp_analysis_shape. Shape-frame positives stay positive only if
    at least one approach pose clears the whole scene (including the
    floor); the rest become `all_colliding` negatives. Shape-frame
    negatives carry over as `ungraspable`. Extra `rematch` negatives
    permute the second contacts among positives (seeded), skipping any
    combination that reproduces a positive or leaves the width limits.
    Negatives are then subsampled to at most max_negative_ratio per
    positive; a scene with no positives keeps all its negatives. Output
    order: positives, then surviving negatives.

    Raises MissingShapeLabels when a scene shape has no entry.
    """
    def full_scene(q):
        return scene_sdf(scene, q)

    positives = []
    negatives = []
    for shape_id, shape in enumerate(scene.shapes):
        key = shape_key(shape)
        if key not in per_shape:
            raise MissingShapeLabels(f"no labels for shape {key}")
        for lp in per_shape[key]:
            world = _bind_to_scene(lp, shape.pose, scene.seed, shape_id)
            if world.label == LABEL_NEGATIVE:
                negatives.append(world)
            elif has_free_approach(full_scene, gripper, world.pair,
                                   n_approach):
                positives.append(world)
            else:
                negatives.append(replace(
                    world, label=LABEL_NEGATIVE,
                    negative_pattern=PATTERN_ALL_COLLIDING))

    rng = np.random.default_rng(seed)
    if len(positives) >= 2:
        existing = {(lp.pair.p.tobytes(), lp.pair.p_prime.tobytes())
                    for lp in positives}
        perm = rng.permutation(len(positives))
        for i, j in enumerate(perm):
            first = positives[i].pair
            second = positives[int(j)].pair
            diff = second.p_prime - first.p
            width = float(np.linalg.norm(diff))
            if not params.min_width <= width <= params.max_width:
                continue
            if (first.p.tobytes(), second.p_prime.tobytes()) in existing:
                continue
            g = diff / width
            score = antipodal_score(first.n_p, second.n_pprime, g)
            pair = ContactPair(p=first.p, p_prime=second.p_prime, g=g,
                               n_p=first.n_p, n_pprime=second.n_pprime,
                               width=width, score=score,
                               sdf_p=0.0, sdf_pprime=0.0)
            negatives.append(LabeledPair(
                pair=pair, label=LABEL_NEGATIVE,
                negative_pattern=PATTERN_REMATCH,
                scene_id=scene.seed, shape_id=positives[i].shape_id))

    cap = max_negative_ratio * len(positives)
    if positives and len(negatives) > cap:
        idx = np.sort(rng.choice(len(negatives), size=cap, replace=False))
        negatives = [negatives[k] for k in idx]
    return positives + negatives


def verify_positive(lp: LabeledPair, scene: SceneSpec, gripper: GripperModel,
                    params: AntipodalParams, n_approach: int = 8) -> bool:
    """Re-check a positive label from its serialized fields alone.

    The antipodal score is recomputed from the stored contact normals
    (the score field may carry a different scorer's output) and at
    least one approach pose must clear the scene.
    """
    pr = lp.pair
    if antipodal_score(pr.n_p, pr.n_pprime, pr.g) < params.score_threshold:
        return False
    return has_free_approach(lambda q: scene_sdf(scene, q), gripper, pr,
                             n_approach)


def _visible_pairs(vol: TsdfVolume, labels) -> list:
    """Pairs whose both contacts sample within the visibility band."""
    if not labels:
        return []
    limit = VISIBILITY_VOXELS * vol.voxel_size
    pts = np.array([[lp.pair.p, lp.pair.p_prime] for lp in labels])
    flat = pts.reshape(-1, 3)
    vals = np.full(len(flat), np.inf)
    inside = vol.contains(flat)
    vals[inside] = sample_trilinear(vol, flat[inside])
    ok = np.all(np.abs(vals.reshape(-1, 2)) <= limit, axis=1)
    return [lp for lp, keep in zip(labels, ok) if keep]


def emit_dataset(scene: SceneSpec, labels, view_counts, out_dir,
                 intr=None, views=None) -> list:
    """Write volume snapshots and visible-pair files for one scene.

    Depth frames come from the deterministic viewpoint spiral (or the
    poses passed in `views`) and are fused incrementally; at each count
    in ascending view_counts the volume is snapshotted to
    volume_<k>frames.tsdf1 with the pairs still visible in it in
    pairs_<k>frames.jsonl. scene.json and manifest.json complete the
    directory. Returns one DatasetRecord per snapshot.
    """
    view_counts = [int(k) for k in view_counts]
    if view_counts != sorted(view_counts):
        raise ValueError("view_counts must be ascending")
    if view_counts and view_counts[0] < 0:
        raise ValueError("view_counts must be non-negative")
    intr = intr if intr is not None else DEFAULT_RENDER_INTRINSICS
    n_frames = max(view_counts) if view_counts else 0
    if views is None:
        views = sample_viewpoints(n_frames) if n_frames else []
    if len(views) < n_frames:
        raise ValueError(f"need {n_frames} views, got {len(views)}")

    scene_dir = Path(out_dir) / f"scene_{scene.seed}"
    scene_dir.mkdir(parents=True, exist_ok=True)
    save_scene(scene, scene_dir / "scene.json")

    vol = TsdfVolume(DEFAULT_ORIGIN, DEFAULT_VOXEL_SIZE, DEFAULT_DIMS,
                     DEFAULT_TRUNCATION)
    records = []
    rows = []
    fused = 0
    for k in view_counts:
        for cam in views[fused:k]:
            integrate_depth(vol, render_depth(scene, intr, cam), intr, cam)
        fused = k
        volume_name = f"volume_{k}frames.tsdf1"
        pairs_name = f"pairs_{k}frames.jsonl"
        save_volume(vol, scene_dir / volume_name)
        visible = _visible_pairs(vol, labels)
        save_labeled_jsonl(scene_dir / pairs_name, visible)
        records.append(DatasetRecord(volume_path=str(scene_dir / volume_name),
                                     pairs_path=str(scene_dir / pairs_name),
                                     n_fused_frames=k, pairs=tuple(visible)))
        rows.append({
            "n_fused_frames": k,
            "volume": volume_name,
            "pairs": pairs_name,
            "n_pairs": len(visible),
            "n_positive": sum(lp.label == LABEL_POSITIVE for lp in visible),
            "n_negative": sum(lp.label == LABEL_NEGATIVE for lp in visible),
        })

    manifest = {
        "scene_id": scene.seed,
        "n_labels": len(labels),
        "view_counts": view_counts,
        "records": rows,
        "intrinsics": intr.to_json_dict(),
        "volume": {"origin": list(DEFAULT_ORIGIN),
                   "voxel_size": DEFAULT_VOXEL_SIZE,
                   "dims": list(DEFAULT_DIMS),
                   "truncation": DEFAULT_TRUNCATION},
        "visibility_voxels": VISIBILITY_VOXELS,
    }
    with open(scene_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return records

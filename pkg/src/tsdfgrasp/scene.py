"""Synthetic scenes built from analytic SDF primitives.

Provides ground-truth signed-distance queries, depth rendering by sphere
tracing, deterministic hemisphere viewpoint sampling, and seeded clutter
generation with settle-to-support placement. Everything here is exact (or
carries a documented error bound) so it can serve as the oracle side of
reconstruction and grasp tests.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import numpy.typing as npt

from .errors import OutOfBounds
from .geom import CameraIntrinsics, RigidTransform, look_at, pixel_rays
from .tsdf import DepthImage

_F = npt.NDArray[np.floating]

SHAPE_KINDS = ("sphere", "box", "cylinder", "ellipsoid", "capsule")
_PARAM_COUNTS = {"sphere": 1, "box": 3, "cylinder": 2, "ellipsoid": 3,
                 "capsule": 2}
MIN_DIMENSION = 0.01
MAX_DIMENSION = 0.25

DEFAULT_FLOOR_Z = 0.0
DEFAULT_WORKSPACE = ((-0.15, -0.15, -0.04), (0.15, 0.15, 0.26))
DEFAULT_CAMERA_RADIUS = 0.45
# Cameras stay within this angle of the vertical. The cap trades off two
# error sources in the fused volume: near-vertical views measure the sides
# of objects only as background (biasing those voxels toward free space),
# while near-horizontal views strike the floor at grazing incidence and
# inflate its projective distances. 75 degrees with a mild rim bias in the
# spiral (exponent below 1) maximizes near-surface agreement empirically.
DEFAULT_MAX_COLATITUDE_DEG = 75.0
DEFAULT_COLATITUDE_EXPONENT = 0.8
DEFAULT_RENDER_INTRINSICS = CameraIntrinsics(
    width=160, height=120, fx=110.0, fy=110.0, cx=79.5, cy=59.5)

SPHERE_TRACE_MAX_STEPS = 256
SPHERE_TRACE_HIT_EPS = 1e-4
SPHERE_TRACE_MAX_RANGE = 2.0

MAX_PLACEMENT_ATTEMPTS = 200
# Accepted resting placements may interpenetrate neighbours slightly, to
# mimic contact-rich clutter. The gate is checked on sampled surface
# points, so it is kept 0.5 mm tighter than the -2 mm contract to leave
# headroom for sampling gaps.
PLACEMENT_CLEARANCE = -0.0015
_PLACEMENT_SURFACE_POINTS = 1024
_DROP_SCAN_STEP = 0.005

_ELLIPSOID_NEWTON_ITERS = 20
_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def _as_vec3(x) -> _F:
    v = np.asarray(x, dtype=np.float64).reshape(3)
    v.flags.writeable = False
    return v


# ---------------------------------------------------------------------------
# local-frame primitive geometry


def _sphere_sdf(p: _F, r: float) -> _F:
    return np.linalg.norm(p, axis=-1) - r


def _box_sdf(p: _F, h: _F) -> _F:
    q = np.abs(p) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def _cylinder_sdf(p: _F, r: float, hh: float) -> _F:
    dr = np.hypot(p[..., 0], p[..., 1]) - r
    dz = np.abs(p[..., 2]) - hh
    outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
    inside = np.minimum(np.maximum(dr, dz), 0.0)
    return outside + inside


def _capsule_sdf(p: _F, r: float, hh: float) -> _F:
    pz = p[..., 2] - np.clip(p[..., 2], -hh, hh)
    return np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2 + pz ** 2) - r


def _ellipsoid_sdf(p: _F, abc: _F) -> _F:
    """Signed distance to an axis-aligned ellipsoid, via closest-point search.

    The closest surface point from p is x_i = a_i^2 p_i / (t + a_i^2) where
    t is the root of F(t) = sum((a_i p_i / (t + a_i^2))^2) - 1, found with a
    bisection-safeguarded Newton iteration. Points near the medial axis
    (where F has no root above -min(a_i^2)) fall back to the closed-form
    projection onto the shortest-axis cross-section. Error is bounded well
    under 1% of the smallest semi-axis.
    """
    p = np.atleast_2d(p)
    a2 = abc ** 2
    k_min = int(np.argmin(a2))
    w = np.sum((p / abc) ** 2, axis=-1)
    inside = w < 1.0

    lo = np.where(inside, -a2[k_min] + 1e-12, 0.0)
    hi = np.where(inside, 0.0, np.sqrt(np.sum((abc * p) ** 2, axis=-1)))

    def f_val(t):
        return np.sum((abc * p / (t[:, None] + a2)) ** 2, axis=-1) - 1.0

    # Inside points whose F stays below 1 on the whole bracket project onto
    # the shortest axis' cross-section instead (medial-axis region).
    degenerate = inside & (f_val(lo) < 0.0)

    t = 0.5 * (lo + hi)
    for _ in range(_ELLIPSOID_NEWTON_ITERS):
        f = f_val(t)
        fp = np.sum(-2.0 * (abc * p) ** 2 / (t[:, None] + a2) ** 3, axis=-1)
        lo = np.where(f > 0.0, t, lo)
        hi = np.where(f > 0.0, hi, t)
        with np.errstate(divide="ignore", invalid="ignore"):
            t_newton = t - f / fp
        ok = np.isfinite(t_newton) & (t_newton > lo) & (t_newton < hi)
        t = np.where(ok, t_newton, 0.5 * (lo + hi))

    x = a2 * p / (t[:, None] + a2)
    if np.any(degenerate):
        xd = x[degenerate].copy()
        pd = p[degenerate]
        others = [i for i in range(3) if i != k_min]
        xd[:, others] = a2[others] * pd[:, others] / (
            (-a2[k_min]) + a2[others])
        s = 1.0 - np.sum((xd[:, others] / abc[others]) ** 2, axis=-1)
        xd[:, k_min] = abc[k_min] * np.sqrt(np.maximum(s, 0.0)) * np.where(
            pd[:, k_min] >= 0.0, 1.0, -1.0)
        x[degenerate] = xd

    dist = np.linalg.norm(p - x, axis=-1)
    return np.where(inside, -dist, dist)


def _local_sdf(kind: str, params: _F, p: _F) -> _F:
    if kind == "sphere":
        return _sphere_sdf(p, params[0])
    if kind == "box":
        return _box_sdf(p, params)
    if kind == "cylinder":
        return _cylinder_sdf(p, params[0], params[1])
    if kind == "ellipsoid":
        return _ellipsoid_sdf(p, params)
    return _capsule_sdf(p, params[0], params[1])


def _bounding_radius(kind: str, params: _F) -> float:
    if kind == "sphere":
        return float(params[0])
    if kind == "box":
        return float(np.linalg.norm(params))
    if kind == "cylinder":
        return float(np.hypot(params[0], params[1]))
    if kind == "ellipsoid":
        return float(np.max(params))
    return float(params[0] + params[1])


def _local_support(kind: str, params: _F, d: _F) -> float:
    """Support function: max over the shape of d . x, for unit d."""
    if kind == "sphere":
        return float(params[0])
    if kind == "box":
        return float(np.sum(params * np.abs(d)))
    if kind == "cylinder":
        return float(params[0] * np.hypot(d[0], d[1]) + params[1] * abs(d[2]))
    if kind == "ellipsoid":
        return float(np.linalg.norm(params * d))
    return float(params[0] + params[1] * abs(d[2]))


def _unit_sphere_samples(n: int, rng: np.random.Generator) -> _F:
    v = rng.normal(size=(n, 3))
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return v / norms


def _sample_local_surface(kind: str, params: _F, n: int,
                          rng: np.random.Generator):
    """Area-uniform surface samples with outward unit normals, local frame."""
    if kind == "sphere":
        u = _unit_sphere_samples(n, rng)
        return params[0] * u, u
    if kind == "box":
        h = params
        areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]])
        axis = rng.choice(3, size=n, p=areas / areas.sum())
        sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        pts = (rng.random((n, 3)) * 2.0 - 1.0) * h
        normals = np.zeros((n, 3))
        pts[np.arange(n), axis] = sign * h[axis]
        normals[np.arange(n), axis] = sign
        return pts, normals
    if kind == "cylinder":
        r, hh = params
        side_area = 2.0 * math.pi * r * 2.0 * hh
        cap_area = math.pi * r * r
        on_side = rng.random(n) < side_area / (side_area + 2.0 * cap_area)
        phi = rng.random(n) * 2.0 * math.pi
        pts = np.empty((n, 3))
        normals = np.zeros((n, 3))
        cphi, sphi = np.cos(phi), np.sin(phi)
        rad = r * np.sqrt(rng.random(n))
        cap_sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        pts[:, 0] = np.where(on_side, r * cphi, rad * cphi)
        pts[:, 1] = np.where(on_side, r * sphi, rad * sphi)
        pts[:, 2] = np.where(on_side, (rng.random(n) * 2.0 - 1.0) * hh,
                             cap_sign * hh)
        normals[:, 0] = np.where(on_side, cphi, 0.0)
        normals[:, 1] = np.where(on_side, sphi, 0.0)
        normals[:, 2] = np.where(on_side, 0.0, cap_sign)
        return pts, normals
    if kind == "ellipsoid":
        a, b, c = params
        w_max = max(a * b, b * c, a * c)
        pts = np.empty((n, 3))
        got = 0
        while got < n:
            m = max(2 * (n - got), 64)
            u = _unit_sphere_samples(m, rng)
            w = np.sqrt((u[:, 0] * b * c) ** 2 + (u[:, 1] * a * c) ** 2
                        + (u[:, 2] * a * b) ** 2)
            keep = rng.random(m) * w_max < w
            take = min(int(keep.sum()), n - got)
            pts[got:got + take] = (params * u[keep])[:take]
            got += take
        normals = pts / (params ** 2)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        return pts, normals
    # capsule: cylindrical side plus two hemispherical caps
    r, hh = params
    side_area = 2.0 * math.pi * r * 2.0 * hh
    cap_area = 4.0 * math.pi * r * r
    on_side = rng.random(n) < side_area / (side_area + cap_area)
    phi = rng.random(n) * 2.0 * math.pi
    u = _unit_sphere_samples(n, rng)
    pts = np.empty((n, 3))
    normals = np.empty((n, 3))
    cphi, sphi = np.cos(phi), np.sin(phi)
    zc = np.where(u[:, 2] >= 0.0, hh, -hh)
    pts[:, 0] = np.where(on_side, r * cphi, r * u[:, 0])
    pts[:, 1] = np.where(on_side, r * sphi, r * u[:, 1])
    pts[:, 2] = np.where(on_side, (rng.random(n) * 2.0 - 1.0) * hh,
                         r * u[:, 2] + zc)
    normals[:, 0] = np.where(on_side, cphi, u[:, 0])
    normals[:, 1] = np.where(on_side, sphi, u[:, 1])
    normals[:, 2] = np.where(on_side, 0.0, u[:, 2])
    return pts, normals


def _interval_intersect(a, b):
    lo = max(a[0], b[0])
    hi = min(a[1], b[1])
    return (lo, hi) if lo <= hi else None


def _z_slab_interval(oz: float, dz: float, zlo: float, zhi: float):
    if abs(dz) < 1e-15:
        return (-np.inf, np.inf) if zlo <= oz <= zhi else None
    t0 = (zlo - oz) / dz
    t1 = (zhi - oz) / dz
    return (t0, t1) if t0 <= t1 else (t1, t0)


def _quadratic_interval(a: float, b: float, c: float):
    """Solutions of a t^2 + 2 b t + c <= 0 as an interval, or None."""
    if a < 1e-18:
        return (-np.inf, np.inf) if c <= 0.0 else None
    disc = b * b - a * c
    if disc < 0.0:
        return None
    s = math.sqrt(disc)
    return ((-b - s) / a, (-b + s) / a)


def _local_ray_interval(kind: str, params: _F, o: _F, d: _F):
    """Parameter interval where o + t d is inside the shape, or None."""
    if kind == "sphere":
        r = params[0]
        return _quadratic_interval(float(d @ d), float(o @ d),
                                   float(o @ o - r * r))
    if kind == "box":
        iv = (-np.inf, np.inf)
        for k in range(3):
            slab = _z_slab_interval(float(o[k]), float(d[k]),
                                    -float(params[k]), float(params[k]))
            if slab is None:
                return None
            iv = _interval_intersect(iv, slab)
            if iv is None:
                return None
        return iv
    if kind == "cylinder":
        r, hh = params
        side = _quadratic_interval(float(d[0] ** 2 + d[1] ** 2),
                                   float(o[0] * d[0] + o[1] * d[1]),
                                   float(o[0] ** 2 + o[1] ** 2 - r * r))
        if side is None:
            return None
        slab = _z_slab_interval(float(o[2]), float(d[2]), -float(hh),
                                float(hh))
        if slab is None:
            return None
        return _interval_intersect(side, slab)
    if kind == "ellipsoid":
        os = o / params
        ds = d / params
        return _quadratic_interval(float(ds @ ds), float(os @ ds),
                                   float(os @ os - 1.0))
    # capsule: union of a z-clipped cylinder and two clipped cap spheres.
    # The shape is convex, so the union of the piece intervals is one
    # contiguous interval.
    r, hh = params
    pieces = []
    side = _quadratic_interval(float(d[0] ** 2 + d[1] ** 2),
                               float(o[0] * d[0] + o[1] * d[1]),
                               float(o[0] ** 2 + o[1] ** 2 - r * r))
    if side is not None:
        slab = _z_slab_interval(float(o[2]), float(d[2]), -float(hh),
                                float(hh))
        if slab is not None:
            iv = _interval_intersect(side, slab)
            if iv is not None:
                pieces.append(iv)
    for zc in (float(hh), -float(hh)):
        oc = o - np.array([0.0, 0.0, zc])
        cap = _quadratic_interval(float(d @ d), float(oc @ d),
                                  float(oc @ oc - r * r))
        if cap is None:
            continue
        half = ((zc - o[2]) / d[2], np.inf) if abs(d[2]) > 1e-15 else None
        if abs(d[2]) < 1e-15:
            half = (-np.inf, np.inf) if (o[2] >= zc) == (zc > 0) else None
        elif (d[2] > 0) != (zc > 0):
            half = (-np.inf, (zc - o[2]) / d[2])
        if half is None:
            continue
        iv = _interval_intersect(cap, half)
        if iv is not None:
            pieces.append(iv)
    if not pieces:
        return None
    return (min(p[0] for p in pieces), max(p[1] for p in pieces))


# ---------------------------------------------------------------------------
# shapes and scenes


@dataclasses.dataclass(frozen=True)
class PrimitiveShape:
    """One analytic solid: kind, per-kind dimensions (m), local-to-world pose.

    Parameter layout: sphere (radius,), box (hx, hy, hz) half-extents,
    cylinder (radius, half_height), ellipsoid (a, b, c) semi-axes,
    capsule (radius, half_height of the straight segment).
    """

    kind: str
    params: _F
    pose: RigidTransform

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        p = np.asarray(self.params, dtype=np.float64).reshape(-1).copy()
        if p.shape[0] != _PARAM_COUNTS[self.kind]:
            raise ValueError(
                f"{self.kind} takes {_PARAM_COUNTS[self.kind]} parameters, "
                f"got {p.shape[0]}")
        if np.any(p < MIN_DIMENSION) or np.any(p > MAX_DIMENSION):
            raise ValueError(
                f"dimensions must lie in [{MIN_DIMENSION}, {MAX_DIMENSION}] m")
        p.flags.writeable = False
        object.__setattr__(self, "params", p)

    @property
    def bounding_radius(self) -> float:
        return _bounding_radius(self.kind, self.params)

    def sdf(self, points: _F) -> _F:
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        local = np.atleast_2d(self.pose.inverse().apply(pts))
        out = _local_sdf(self.kind, self.params, local)
        return float(out[0]) if single else out

    def support(self, direction: _F) -> float:
        """Extent of the shape from its origin along a world unit vector."""
        d_local = self.pose.rotation.T @ np.asarray(direction, np.float64)
        return _local_support(self.kind, self.params, d_local)

    def sample_surface(self, n: int, rng: np.random.Generator):
        """n area-uniform world-frame surface points and outward normals."""
        pts, normals = _sample_local_surface(self.kind, self.params, n, rng)
        return self.pose.apply(pts), normals @ self.pose.rotation.T

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params.tolist(),
                "T": self.pose.matrix().tolist()}

    @staticmethod
    def from_json_dict(d: dict) -> "PrimitiveShape":
        return PrimitiveShape(kind=d["kind"],
                              params=np.asarray(d["params"], np.float64),
                              pose=RigidTransform.from_matrix(
                                  np.asarray(d["T"], np.float64)))


def ray_shape_interval(shape: PrimitiveShape, origin: _F, direction: _F):
    """(t_enter, t_exit) of a world-frame ray through the shape, or None."""
    inv = shape.pose.inverse()
    o = inv.apply(np.asarray(origin, np.float64))
    d = shape.pose.rotation.T @ np.asarray(direction, np.float64)
    return _local_ray_interval(shape.kind, shape.params, o, d)


@dataclasses.dataclass(frozen=True)
class SceneSpec:
    """Immutable description of one synthetic scene.

    `skipped` counts objects the generator failed to place within the
    attempt budget; it is informational and does not affect geometry.
    """

    shapes: tuple
    floor_z: float
    workspace: tuple
    seed: int
    skipped: int = 0

    def __post_init__(self):
        lo = _as_vec3(self.workspace[0])
        hi = _as_vec3(self.workspace[1])
        if np.any(lo >= hi):
            raise ValueError("workspace must have positive extent")
        object.__setattr__(self, "workspace", (lo, hi))
        object.__setattr__(self, "shapes", tuple(self.shapes))
        for s in self.shapes:
            c = s.pose.translation
            r = s.bounding_radius
            if np.any(c - r < lo - 1e-9) or np.any(c + r > hi + 1e-9):
                raise OutOfBounds(
                    f"{s.kind} bounding sphere leaves the workspace")

    @property
    def center(self) -> _F:
        return 0.5 * (self.workspace[0] + self.workspace[1])

    def to_json_dict(self) -> dict:
        return {"seed": int(self.seed), "floor_z": float(self.floor_z),
                "workspace": {"lo": self.workspace[0].tolist(),
                              "hi": self.workspace[1].tolist()},
                "skipped": int(self.skipped),
                "shapes": [s.to_json_dict() for s in self.shapes]}

    @staticmethod
    def from_json_dict(d: dict) -> "SceneSpec":
        return SceneSpec(
            shapes=tuple(PrimitiveShape.from_json_dict(s)
                         for s in d["shapes"]),
            floor_z=float(d["floor_z"]),
            workspace=(d["workspace"]["lo"], d["workspace"]["hi"]),
            seed=int(d["seed"]), skipped=int(d.get("skipped", 0)))

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    @staticmethod
    def loads(s: str) -> "SceneSpec":
        return SceneSpec.from_json_dict(json.loads(s))


def save_scene(scene: SceneSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(scene.dumps())
        f.write("\n")


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as f:
        return SceneSpec.loads(f.read())


# ---------------------------------------------------------------------------
# scene queries


def _shapes_sdf(shapes, points: _F) -> _F:
    """Min signed distance over a list of shapes (no floor), batched.

    Each shape is evaluated only where its bounding-sphere lower bound beats
    the best upper bound seen so far; skipped points keep a value that is
    provably not the minimum.
    """
    pts = np.atleast_2d(points)
    n = pts.shape[0]
    out = np.full(n, np.inf)
    if not shapes:
        return out
    centers = np.stack([s.pose.translation for s in shapes])
    radii = np.array([s.bounding_radius for s in shapes])
    center_dist = np.linalg.norm(pts[:, None, :] - centers[None, :, :],
                                 axis=-1)
    lower = center_dist - radii[None, :]
    best_upper = np.min(center_dist + radii[None, :], axis=1)
    for i, s in enumerate(shapes):
        mask = lower[:, i] <= best_upper
        if not np.any(mask):
            continue
        out[mask] = np.minimum(out[mask], s.sdf(pts[mask]))
    return out


def scene_sdf(scene: SceneSpec, points: _F) -> _F:
    """Exact signed distance to the union of all shapes and the floor."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    d = np.minimum(_shapes_sdf(scene.shapes, pts),
                   pts[:, 2] - scene.floor_z)
    return float(d[0]) if single else d


def scene_normal(scene: SceneSpec, points: _F, eps: float = 1e-6) -> _F:
    """Unit gradient of scene_sdf by central differences (step eps)."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    g = np.empty_like(pts)
    for k in range(3):
        step = np.zeros(3)
        step[k] = eps
        g[:, k] = scene_sdf(scene, pts + step) - scene_sdf(scene, pts - step)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    g /= norms
    return g[0] if single else g


def render_depth(scene: SceneSpec, intr: CameraIntrinsics,
                 cam_pose: RigidTransform) -> DepthImage:
    """Depth map by sphere tracing scene_sdf from every pixel ray.

    Depth is the camera-frame z of the hit point; pixels that do not hit
    within SPHERE_TRACE_MAX_RANGE (or exhaust the step budget) read 0.
    """
    origin, dirs, dirs_z = pixel_rays(intr, cam_pose)
    d = dirs.reshape(-1, 3)
    n = d.shape[0]
    t = np.zeros(n)
    live = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(SPHERE_TRACE_MAX_STEPS):
        idx = np.nonzero(live)[0]
        if idx.size == 0:
            break
        p = origin[None, :] + t[idx, None] * d[idx]
        s = scene_sdf(scene, p)
        arrived = s < SPHERE_TRACE_HIT_EPS
        hit[idx[arrived]] = True
        live[idx[arrived]] = False
        adv = idx[~arrived]
        t[adv] += s[~arrived]
        overran = t[adv] > SPHERE_TRACE_MAX_RANGE
        live[adv[overran]] = False
    depth = np.where(hit, t * dirs_z.reshape(-1), 0.0)
    return DepthImage(width=intr.width, height=intr.height,
                      data=depth.reshape(dirs_z.shape))


def sample_viewpoints(n: int, workspace=DEFAULT_WORKSPACE,
                      radius: float = DEFAULT_CAMERA_RADIUS,
                      max_colatitude_deg: float = DEFAULT_MAX_COLATITUDE_DEG,
                      colatitude_exponent: float =
                      DEFAULT_COLATITUDE_EXPONENT):
    """n deterministic look-at camera poses on an upper spherical cap.

    Poses spiral outward from the nadir (golden-angle azimuth steps) down
    to max_colatitude_deg, all at `radius` from the workspace center and
    all looking at it. colatitude_exponent shapes the progression of
    cos(colatitude): 1 spreads views uniformly in it, values below 1 push
    more views toward the rim where object flanks are seen well. n=1
    returns the nadir view alone.
    """
    if n < 1:
        raise ValueError("need at least one viewpoint")
    lo = _as_vec3(workspace[0])
    hi = _as_vec3(workspace[1])
    center = 0.5 * (lo + hi)
    cos_max = math.cos(math.radians(max_colatitude_deg))
    poses = []
    for i in range(n):
        frac = 0.0 if n == 1 else (i / (n - 1.0)) ** colatitude_exponent
        c = 1.0 - frac * (1.0 - cos_max)
        s = math.sqrt(max(0.0, 1.0 - c * c))
        phi = i * _GOLDEN_ANGLE
        direction = np.array([s * math.cos(phi), s * math.sin(phi), c])
        poses.append(look_at(center + radius * direction, center))
    return poses


# ---------------------------------------------------------------------------
# clutter generation


@dataclasses.dataclass(frozen=True)
class CatalogEntry:
    """One shape family: kind, sampling weight, per-parameter ranges (m)."""

    kind: str
    weight: float
    param_lo: tuple
    param_hi: tuple


DEFAULT_CATALOG = (
    CatalogEntry("sphere", 1.0, (0.015,), (0.035,)),
    CatalogEntry("box", 1.0, (0.012, 0.012, 0.012), (0.04, 0.04, 0.04)),
    CatalogEntry("cylinder", 1.0, (0.012, 0.015), (0.03, 0.045)),
    CatalogEntry("ellipsoid", 1.0, (0.012, 0.012, 0.012), (0.04, 0.04, 0.04)),
    CatalogEntry("capsule", 1.0, (0.01, 0.012), (0.02, 0.035)),
)

# Columns are world directions of the local axes; each maps local axis k
# to world +z and is a cyclic permutation, so det stays +1.
_AXIS_UP_ROTATIONS = {
    0: np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]),
    1: np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
    2: np.eye(3),
}
# Maps local z to world +x (lying cylinders and capsules).
_AXIS_TO_X = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def _yaw_rotation(psi: float) -> _F:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _sample_orientation(kind: str, rng: np.random.Generator) -> _F:
    yaw = _yaw_rotation(rng.random() * 2.0 * math.pi)
    if kind == "box":
        axis = int(rng.integers(3))
        return yaw @ _AXIS_UP_ROTATIONS[axis]
    if kind in ("cylinder", "capsule"):
        if rng.random() < 0.5:
            return yaw
        return yaw @ _AXIS_TO_X
    return yaw


def _settle_height(shape_kind: str, params: _F, rot: _F, xy: _F,
                   placed, floor_z: float, z_top: float,
                   surface_local: _F) -> float:
    """Drop the candidate vertically and return its resting origin height.

    The candidate descends from z_top; the first height where its sampled
    surface touches an already placed shape (clearance crossing zero,
    refined by bisection) stops it, otherwise it rests on the floor. The
    floor contact height is exact via the support function.
    """
    z_floor = floor_z + _local_support(shape_kind, params,
                                       rot.T @ np.array([0.0, 0.0, -1.0]))
    if not placed:
        return z_floor
    world_surf = surface_local @ rot.T
    world_surf = world_surf + np.array([xy[0], xy[1], 0.0])

    def clearance(z):
        pts = world_surf + np.array([0.0, 0.0, z])
        return float(np.min(_shapes_sdf(placed, pts)))

    if z_top <= z_floor:
        return z_floor
    z_prev = z_top
    c_prev = clearance(z_prev)
    if c_prev < 0.0:
        return z_floor  # start already overlapping; let the gate reject it
    z = z_prev
    while z > z_floor:
        z = max(z - _DROP_SCAN_STEP, z_floor)
        c = clearance(z)
        if c < 0.0:
            lo_z, hi_z = z, z_prev
            for _ in range(24):
                mid = 0.5 * (lo_z + hi_z)
                if clearance(mid) < 0.0:
                    lo_z = mid
                else:
                    hi_z = mid
            return hi_z
        z_prev = z
    return z_floor


def generate_scene(seed: int, n_objects: int, catalog=DEFAULT_CATALOG,
                   floor_z: float = DEFAULT_FLOOR_Z,
                   workspace=DEFAULT_WORKSPACE) -> SceneSpec:
    """Seeded clutter: drop n_objects catalog shapes into the workspace.

    Each object keeps one sampled kind and size, then retries placement
    (fresh position and orientation) until its settled pose clears every
    earlier shape by more than PLACEMENT_CLEARANCE, up to
    MAX_PLACEMENT_ATTEMPTS tries; failures are counted in the result's
    `skipped` field. Same seed, same scene, byte for byte.
    """
    if not 1 <= n_objects <= 30:
        raise ValueError("n_objects must be in [1, 30]")
    rng = np.random.default_rng(seed)
    lo = _as_vec3(workspace[0])
    hi = _as_vec3(workspace[1])
    weights = np.array([e.weight for e in catalog], dtype=np.float64)
    weights /= weights.sum()
    placed = []
    skipped = 0
    for _ in range(n_objects):
        entry = catalog[int(rng.choice(len(catalog), p=weights))]
        params = rng.uniform(np.asarray(entry.param_lo),
                             np.asarray(entry.param_hi))
        surface_local, _ = _sample_local_surface(
            entry.kind, params, _PLACEMENT_SURFACE_POINTS, rng)
        ok = False
        r_b = _bounding_radius(entry.kind, params)
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            rot = _sample_orientation(entry.kind, rng)
            if np.any(lo[:2] + r_b >= hi[:2] - r_b):
                break  # object too large for the workspace footprint
            xy = rng.uniform(lo[:2] + r_b, hi[:2] - r_b)
            z = _settle_height(entry.kind, params, rot, xy, placed,
                               floor_z, float(hi[2]) - r_b, surface_local)
            if z - r_b < lo[2] or z + r_b > hi[2]:
                continue
            pose = RigidTransform(rotation=rot,
                                  translation=np.array([xy[0], xy[1], z]))
            candidate = PrimitiveShape(entry.kind, params, pose)
            if placed:
                pts, _ = candidate.sample_surface(
                    _PLACEMENT_SURFACE_POINTS, rng)
                if float(np.min(_shapes_sdf(placed, pts))) \
                        <= PLACEMENT_CLEARANCE:
                    continue
            placed.append(candidate)
            ok = True
            break
        if not ok:
            skipped += 1
    return SceneSpec(shapes=tuple(placed), floor_z=floor_z,
                     workspace=(lo, hi), seed=int(seed), skipped=skipped)

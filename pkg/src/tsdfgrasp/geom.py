"""Rigid transforms, pinhole cameras, and grasp pose composition.

Conventions used throughout the toolkit:

* World frame: z up, metric units (metres).
* Camera frame: +z optical axis (forward), +x right, +y down. A camera's
  pose maps camera-frame points into the world frame.
* Grasp frame: y is the closing direction between the two contacts, z is
  the approach direction, x = y cross z completes the right-handed frame.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np
import numpy.typing as npt

from .errors import BehindCamera, DegeneratePair, ParallelApproach

_F = npt.NDArray[np.floating]

ROTATION_TOL = 1e-9
MIN_PAIR_SEPARATION = 1e-6
MIN_APPROACH_ANGLE = 1e-3  # rad, between approach hint and the grasp axis


def _as_vec3(x) -> _F:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"expected 3-vector, got shape {v.shape}")
    return v


def unit(v: _F) -> _F:
    """Normalize a vector; raises on near-zero input."""
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero vector")
    return v / n


@dataclasses.dataclass(frozen=True)
class RigidTransform:
    """SE(3) pose: x_world = rotation @ x_local + translation."""

    rotation: _F
    translation: _F

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = _as_vec3(self.translation)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=ROTATION_TOL):
            raise ValueError("rotation is not orthonormal")
        if not np.isclose(np.linalg.det(r), 1.0, atol=ROTATION_TOL):
            raise ValueError("rotation determinant is not +1")
        r = r.copy()
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self @ other: apply `other` first, then `self`."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -(self.rotation.T @ self.translation))

    def apply(self, points: _F) -> _F:
        """Transform one point (3,) or a batch (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def apply_rotation(self, vectors: _F) -> _F:
        v = np.asarray(vectors, dtype=np.float64)
        return v @ self.rotation.T

    def matrix(self) -> _F:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: _F) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {m.shape}")
        return RigidTransform(m[:3, :3], m[:3, 3])

    def to_json_dict(self) -> dict:
        return {"T": self.matrix().tolist()}

    @staticmethod
    def from_json_dict(d: dict) -> "RigidTransform":
        return RigidTransform.from_matrix(np.asarray(d["T"], dtype=np.float64))

    def dumps(self) -> str:
        return json.dumps(self.to_json_dict())

    @staticmethod
    def loads(s: str) -> "RigidTransform":
        return RigidTransform.from_json_dict(json.loads(s))


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics (pixels)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def to_json_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_json_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            int(d["width"]), int(d["height"]),
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
        )


def project_points(intr: CameraIntrinsics, cam_pose: RigidTransform, points: _F):
    """Project world points into the image.

    Returns (u, v, z) arrays; z is camera-frame depth. No bounds or sign
    checks are applied here: callers mask as needed.
    """
    p = np.asarray(points, dtype=np.float64)
    pc = (p - cam_pose.translation) @ cam_pose.rotation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / z + intr.cx
        v = intr.fy * pc[..., 1] / z + intr.cy
    return u, v, z


def project_point(intr: CameraIntrinsics, cam_pose: RigidTransform, point: _F):
    """Project a single world point; raises BehindCamera for z <= 1e-9."""
    u, v, z = project_points(intr, cam_pose, _as_vec3(point))
    if z <= 1e-9:
        raise BehindCamera(f"point depth {z:.3e} is not positive")
    return float(u), float(v), float(z)


def backproject_pixel(intr: CameraIntrinsics, cam_pose: RigidTransform,
                      u: float, v: float, depth: float) -> _F:
    """Invert project_point: pixel coordinates + camera-frame depth -> world."""
    pc = np.array([(u - intr.cx) / intr.fx * depth,
                   (v - intr.cy) / intr.fy * depth,
                   depth])
    return cam_pose.apply(pc)


def pixel_rays(intr: CameraIntrinsics, cam_pose: RigidTransform):
    """Unit ray directions for every pixel center.

    Returns (origins (3,), dirs_world (h, w, 3), dirs_cam_z (h, w)) where
    dirs_cam_z is the z component of the unit camera-frame direction, used
    to convert ray length into z-depth.
    """
    u = np.arange(intr.width, dtype=np.float64)
    v = np.arange(intr.height, dtype=np.float64)
    uu, vv = np.meshgrid(u, v)
    d = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy,
                  np.ones_like(uu)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return cam_pose.translation, d @ cam_pose.rotation.T, d[..., 2]


@dataclasses.dataclass(frozen=True)
class GraspPose:
    """7-DoF parallel-jaw grasp: SE(3) pose plus closing width (m).

    Column 1 of the rotation is the closing direction, column 2 the
    approach direction, column 0 their cross product.
    """

    transform: RigidTransform
    width: float

    def __post_init__(self):
        r = self.transform.rotation
        if not np.allclose(r[:, 0], np.cross(r[:, 1], r[:, 2]), atol=ROTATION_TOL):
            raise ValueError("grasp frame is not right-handed: x != y cross z")
        if not self.width >= 0.0:
            raise ValueError(f"width must be non-negative, got {self.width}")

    @property
    def closing_axis(self) -> _F:
        return self.transform.rotation[:, 1]

    @property
    def approach_axis(self) -> _F:
        return self.transform.rotation[:, 2]

    @property
    def center(self) -> _F:
        return self.transform.translation

    def to_json_dict(self) -> dict:
        return {"T": self.transform.matrix().tolist(), "width": self.width}

    @staticmethod
    def from_json_dict(d: dict) -> "GraspPose":
        return GraspPose(RigidTransform.from_matrix(np.asarray(d["T"])),
                         float(d["width"]))


def compose_grasp_pose(p: _F, p_prime: _F, approach: _F) -> GraspPose:
    """Build a grasp pose from two contact points and an approach hint.

    The closing axis g points from p to p_prime; the approach hint is
    re-orthogonalized against g. The pose center is the contact midpoint
    and the width their separation.

    Raises DegeneratePair when the contacts coincide and ParallelApproach
    when the hint is within 1e-3 rad of the contact line.
    """
    p = _as_vec3(p)
    q = _as_vec3(p_prime)
    a = _as_vec3(approach)
    v = q - p
    width = float(np.linalg.norm(v))
    if width <= MIN_PAIR_SEPARATION:
        raise DegeneratePair(f"contact separation {width:.3e} m is degenerate")
    g = v / width
    a = unit(a)
    a_perp = a - np.dot(a, g) * g
    n_perp = float(np.linalg.norm(a_perp))
    # For unit a, |a_perp| = sin(angle to the contact line).
    if n_perp <= np.sin(MIN_APPROACH_ANGLE):
        raise ParallelApproach("approach direction is parallel to the grasp axis")
    a_hat = a_perp / n_perp
    x = np.cross(g, a_hat)
    rot = np.stack([x, g, a_hat], axis=1)
    center = 0.5 * (p + q)
    return GraspPose(RigidTransform(rot, center), width)


def rotation_geodesic(r1: _F, r2: _F) -> float:
    """Geodesic angle (rad) between two rotation matrices."""
    c = (np.trace(r1.T @ r2) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def look_at(eye: _F, target: _F) -> RigidTransform:
    """Camera pose at `eye` with the optical axis through `target`.

    The image x axis is chosen horizontal (z_cam cross world z); when the
    optical axis is vertical the world x axis is used instead, so the
    result is deterministic everywhere.
    """
    eye = _as_vec3(eye)
    z = unit(_as_vec3(target) - eye)
    xr = np.cross(z, np.array([0.0, 0.0, 1.0]))
    if np.linalg.norm(xr) < 1e-9:
        xr = np.array([1.0, 0.0, 0.0])
    x = unit(xr)
    y = np.cross(z, x)
    return RigidTransform(np.stack([x, y, z], axis=1), eye)

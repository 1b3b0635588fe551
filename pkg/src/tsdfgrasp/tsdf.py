"""Truncated signed-distance volumes fused from depth images.

The volume stores clamped signed distances (positive outside, negative
inside) on a regular voxel grid together with per-voxel observation
weights. Fusion is the classic unit-weight running average of projective
distances along camera rays; unobserved voxels (weight 0) read as
+truncation, i.e. free space, which keeps downstream collision checks
optimistic on purpose.

Voxel centers sit at origin + (index + 0.5) * voxel_size. The sampleable
region for interpolation is the box spanned by the outermost voxel
centers (half a voxel inside the volume bounds on every side).
"""

from __future__ import annotations

import dataclasses
import struct

import numpy as np
import numpy.typing as npt

from .errors import DimensionMismatch, OutOfBounds
from .geom import CameraIntrinsics, RigidTransform, project_points

_F = npt.NDArray[np.floating]

DEFAULT_DIMS = (64, 64, 64)
DEFAULT_VOXEL_SIZE = 0.3 / 64
DEFAULT_ORIGIN = (-0.15, -0.15, -0.04)
DEFAULT_TRUNCATION = 4 * DEFAULT_VOXEL_SIZE
DEFAULT_W_MAX = 64.0

_TSDF1_MAGIC = b"TSDF1\x00\x00\x00"
_TSDF1_VERSION = 1


@dataclasses.dataclass(frozen=True)
class DepthImage:
    """Row-major depth map in metres; 0 marks pixels with no return."""

    width: int
    height: int
    data: _F

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"depth data shape {d.shape} != (height, width) = "
                f"({self.height}, {self.width})")
        if not np.all(np.isfinite(d)):
            raise ValueError("depth data must be finite")
        if np.any(d < 0):
            raise ValueError("depth values must be non-negative")
        d = d.copy()
        d.flags.writeable = False
        object.__setattr__(self, "data", d)


def write_pfm(img: DepthImage, path) -> None:
    """Write a single-channel PFM file (little-endian, bottom-up rows)."""
    with open(path, "wb") as f:
        f.write(f"Pf\n{img.width} {img.height}\n-1.0\n".encode("ascii"))
        f.write(np.flipud(img.data).astype("<f4").tobytes())


def read_pfm(path) -> DepthImage:
    """Read a single-channel PFM file written by write_pfm (or compatible)."""
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise ValueError(f"not a grayscale PFM file: header {header!r}")
        w, h = (int(tok) for tok in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = np.frombuffer(f.read(4 * w * h), dtype=dtype).reshape(h, w)
    return DepthImage(width=w, height=h, data=np.flipud(raw).astype(np.float64))


class TsdfVolume:
    """Axis-aligned TSDF voxel grid with per-voxel observation weights."""

    def __init__(self, origin, voxel_size: float, dims, truncation: float,
                 values: _F | None = None, weights: _F | None = None):
        origin = np.asarray(origin, dtype=np.float64)
        if origin.shape != (3,):
            raise ValueError("origin must be a 3-vector")
        dims = tuple(int(d) for d in dims)
        if len(dims) != 3 or any(d < 2 for d in dims):
            raise ValueError(f"dims must be 3 values >= 2, got {dims}")
        if not voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        if not truncation >= voxel_size:
            raise ValueError("truncation must be at least one voxel")
        self.origin = origin
        self.voxel_size = float(voxel_size)
        self.dims = dims
        self.truncation = float(truncation)
        # float64 in memory: the unit-weight running average is exactly
        # order-insensitive for two frames only if stored values are not
        # rounded between updates. The file format narrows to f32.
        if values is None:
            values = np.full(dims, truncation, dtype=np.float64)
        else:
            values = np.asarray(values, dtype=np.float64)
            if values.shape != dims:
                raise DimensionMismatch(f"values shape {values.shape} != dims {dims}")
        if weights is None:
            weights = np.zeros(dims, dtype=np.float64)
        else:
            weights = np.asarray(weights, dtype=np.float64)
            if weights.shape != dims:
                raise DimensionMismatch(f"weights shape {weights.shape} != dims {dims}")
        if np.any(weights < 0):
            raise ValueError("weights must be non-negative")
        if np.any(np.abs(values) > truncation * (1 + 1e-6)):
            raise ValueError("values must lie within +-truncation")
        self.values = values
        self.weights = weights
        self._centers: _F | None = None

    # ------------------------------------------------------------------ grid

    def voxel_centers(self) -> _F:
        """(N, 3) world voxel centers, flattened in C order.

        Row k matches values.reshape(-1)[k] (z varies fastest).
        """
        if self._centers is None:
            nx, ny, nz = self.dims
            gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz),
                                     indexing="ij")
            idx = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
            self._centers = self.origin + (idx + 0.5) * self.voxel_size
        return self._centers

    def sample_bounds(self) -> tuple[_F, _F]:
        """Min/max corners of the trilinear-sampleable box (voxel centers)."""
        lo = self.origin + 0.5 * self.voxel_size
        hi = self.origin + (np.asarray(self.dims) - 0.5) * self.voxel_size
        return lo, hi

    def contains(self, points: _F) -> npt.NDArray[np.bool_]:
        """True where points lie inside the sampleable box."""
        p = np.asarray(points, dtype=np.float64)
        lo, hi = self.sample_bounds()
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def copy(self) -> "TsdfVolume":
        return TsdfVolume(self.origin, self.voxel_size, self.dims, self.truncation,
                          values=self.values.copy(), weights=self.weights.copy())

    # --------------------------------------------------------------- sampling

    def _gather(self, points: _F, need_support: bool):
        """Trilinear interpolation internals shared by the public ops.

        Returns (values, inside_mask, supported_mask). Points outside the
        sampleable box get value +truncation and inside=False. supported
        is True where all 8 interpolation corners have weight > 0 (only
        computed when need_support is set, else it aliases inside).
        """
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        n = p.shape[0]
        u = (p - self.origin) / self.voxel_size - 0.5
        dims = np.asarray(self.dims)
        # Tolerance keeps this consistent with contains(): a point on the
        # box boundary must not flip outside from division rounding.
        eps = 1e-9
        inside = np.all((u >= -eps) & (u <= dims - 1.0 + eps), axis=-1)
        out = np.full(n, self.truncation, dtype=np.float64)
        if not np.any(inside):
            sup = np.zeros(n, dtype=bool)
            return out, inside, sup
        ui = np.clip(u[inside], 0.0, dims - 1.0)
        i0 = np.clip(np.floor(ui).astype(np.int64), 0, dims - 2)
        f = ui - i0
        x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
        x1, y1, z1 = x0 + 1, y0 + 1, z0 + 1
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        vals = self.values
        c000 = vals[x0, y0, z0]
        c100 = vals[x1, y0, z0]
        c010 = vals[x0, y1, z0]
        c110 = vals[x1, y1, z0]
        c001 = vals[x0, y0, z1]
        c101 = vals[x1, y0, z1]
        c011 = vals[x0, y1, z1]
        c111 = vals[x1, y1, z1]
        c00 = c000 * (1 - fx) + c100 * fx
        c10 = c010 * (1 - fx) + c110 * fx
        c01 = c001 * (1 - fx) + c101 * fx
        c11 = c011 * (1 - fx) + c111 * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out[inside] = c0 * (1 - fz) + c1 * fz
        if need_support:
            w = self.weights
            sup_in = ((w[x0, y0, z0] > 0) & (w[x1, y0, z0] > 0) &
                      (w[x0, y1, z0] > 0) & (w[x1, y1, z0] > 0) &
                      (w[x0, y0, z1] > 0) & (w[x1, y0, z1] > 0) &
                      (w[x0, y1, z1] > 0) & (w[x1, y1, z1] > 0))
            sup = np.zeros(n, dtype=bool)
            sup[inside] = sup_in
        else:
            sup = inside
        return out, inside, sup


def sample_trilinear(vol: TsdfVolume, points: _F) -> float | _F:
    """Trilinear TSDF value at a point (3,) or batch (..., 3).

    Unobserved voxels contribute +truncation. Raises OutOfBounds if any
    query lies outside the box spanned by the voxel centers.
    """
    p = np.asarray(points, dtype=np.float64)
    scalar = p.ndim == 1
    flat = p.reshape(-1, 3)
    vals, inside, _ = vol._gather(flat, need_support=False)
    if not np.all(inside):
        bad = flat[~inside][0]
        raise OutOfBounds(f"point {bad} outside sampleable region")
    if scalar:
        return float(vals[0])
    return vals.reshape(p.shape[:-1])


def sample_trilinear_masked(vol: TsdfVolume, points: _F):
    """(values, inside, supported) with +truncation substituted outside.

    The forgiving variant used by collision checking and ray marching;
    `supported` is True only where all 8 interpolation corners have been
    observed.
    """
    p = np.asarray(points, dtype=np.float64)
    flat = p.reshape(-1, 3)
    vals, inside, sup = vol._gather(flat, need_support=True)
    shape = p.shape[:-1]
    return vals.reshape(shape), inside.reshape(shape), sup.reshape(shape)


def gradient(vol: TsdfVolume, points: _F, clamp_to_bounds: bool = False) -> _F:
    """Central-difference TSDF gradient with step = voxel_size.

    Probe points outside the sampleable box raise OutOfBounds unless
    clamp_to_bounds is set, in which case probes are clamped to the box
    (one-sided differences at the frontier) and the actual probe
    separation is used as the divisor.
    """
    p = np.asarray(points, dtype=np.float64)
    scalar = p.ndim == 1
    flat = p.reshape(-1, 3)
    h = vol.voxel_size
    lo, hi = vol.sample_bounds()
    grad = np.empty_like(flat)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        p_hi = flat + step
        p_lo = flat - step
        if clamp_to_bounds:
            p_hi = np.clip(p_hi, lo, hi)
            p_lo = np.clip(p_lo, lo, hi)
        v_hi = np.asarray(sample_trilinear(vol, p_hi), dtype=np.float64).reshape(-1)
        v_lo = np.asarray(sample_trilinear(vol, p_lo), dtype=np.float64).reshape(-1)
        denom = p_hi[:, axis] - p_lo[:, axis]
        if np.any(denom <= 0):
            raise OutOfBounds("gradient probe collapsed; volume thinner than a voxel")
        grad[:, axis] = (v_hi - v_lo) / denom
    if scalar:
        return grad[0]
    return grad.reshape(p.shape)


def integrate_depth(vol: TsdfVolume, depth: DepthImage, intr: CameraIntrinsics,
                    cam_pose: RigidTransform, w_max: float = DEFAULT_W_MAX) -> None:
    """Fuse one depth frame into the volume (in place).

    Every voxel center that projects to a pixel with a valid (> 0) depth
    gets the projective observation clamp(d - z, -truncation, +truncation);
    observations behind the surface by more than the truncation are
    skipped. Values follow the unit-weight running average and weights
    saturate at w_max.
    """
    if (depth.width, depth.height) != (intr.width, intr.height):
        raise DimensionMismatch(
            f"depth image {depth.width}x{depth.height} does not match "
            f"intrinsics {intr.width}x{intr.height}")
    centers = vol.voxel_centers()
    u, v, z = project_points(intr, cam_pose, centers)
    ui = np.round(u).astype(np.int64)
    vi = np.round(v).astype(np.int64)
    valid = ((z > 1e-9) & (ui >= 0) & (ui < intr.width)
             & (vi >= 0) & (vi < intr.height))
    idx = np.nonzero(valid)[0]
    d = depth.data[vi[idx], ui[idx]]
    has_return = d > 0
    idx = idx[has_return]
    obs = d[has_return] - z[idx]
    near = obs >= -vol.truncation
    idx = idx[near]
    obs = np.minimum(obs[near], vol.truncation)
    vflat = vol.values.reshape(-1)
    wflat = vol.weights.reshape(-1)
    w = wflat[idx]
    vflat[idx] = (w * vflat[idx] + obs) / (w + 1.0)
    wflat[idx] = np.minimum(w + 1.0, float(w_max))


def raycast_zero_crossing(vol: TsdfVolume, origin, direction, max_dist: float,
                          polarity: str = "pos_to_neg"):
    """March a ray through the volume looking for a zero crossing.

    Steps at half-voxel intervals from the origin (which must be inside
    the sampleable region), detects the first sign change of the given
    polarity between consecutive samples, and refines it with one linear
    interpolation. Returns (point, t) or None when the ray exits the
    volume or travels max_dist without a crossing.
    """
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = (d / np.linalg.norm(d)).reshape(1, 3)
    if not vol.contains(o[0]):
        raise OutOfBounds(f"ray origin {o[0]} outside sampleable region")
    hit, t = raycast_batch(vol, o, d, max_dist, polarity)
    if not hit[0]:
        return None
    return o[0] + t[0] * d[0], float(t[0])


def raycast_batch(vol: TsdfVolume, origins: _F, dirs: _F, max_dist: float,
                  polarity: str, observed_only: bool = False):
    """Vectorized zero-crossing search shared by the scalar op.

    With observed_only, samples without full trilinear support are
    transparent: crossings are detected between consecutive supported
    samples, bridging unobserved gaps. Rays die at their first sample
    outside the volume. Returns (hit mask, t array).
    """
    if polarity not in ("pos_to_neg", "neg_to_pos"):
        raise ValueError(f"unknown polarity {polarity!r}")
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    n = o.shape[0]
    step = vol.voxel_size / 2.0
    n_steps = int(np.ceil(max_dist / step)) + 1
    hit = np.zeros(n, dtype=bool)
    t_hit = np.zeros(n, dtype=np.float64)
    dead = np.zeros(n, dtype=bool)
    prev_val = np.zeros(n, dtype=np.float64)
    prev_t = np.zeros(n, dtype=np.float64)
    have_prev = np.zeros(n, dtype=bool)
    for k in range(n_steps):
        t = min(k * step, max_dist)
        live = ~dead & ~hit
        if not np.any(live):
            break
        pts = o[live] + t * d[live]
        vals, inside, sup = vol._gather(pts, need_support=observed_only)
        li = np.nonzero(live)[0]
        dead[li[~inside]] = True
        usable = inside & (sup if observed_only else True)
        ui = li[usable]
        if ui.size:
            cur = vals[usable]
            pv = prev_val[ui]
            ok = have_prev[ui]
            if polarity == "pos_to_neg":
                crossing = ok & (pv > 0) & (cur <= 0)
            else:
                crossing = ok & (pv < 0) & (cur >= 0)
            ci = ui[crossing]
            if ci.size:
                pvc = prev_val[ci]
                cvc = cur[crossing]
                frac = pvc / (pvc - cvc)
                t_hit[ci] = prev_t[ci] + frac * (t - prev_t[ci])
                hit[ci] = True
            rest = ui[~crossing]
            prev_val[rest] = cur[~crossing]
            prev_t[rest] = t
            have_prev[rest] = True
        if t >= max_dist:
            break
    return hit, t_hit


# ------------------------------------------------------------------ file I/O

def save_volume(vol: TsdfVolume, path) -> None:
    """Write the binary TSDF1 volume format.

    Layout: 16-byte magic+version header; origin (3 x f64 LE); voxel_size
    (f64); dims (3 x u32 LE); truncation (f64); then values and weights as
    f32 LE in x-fastest order.
    """
    with open(path, "wb") as f:
        f.write(_TSDF1_MAGIC)
        f.write(struct.pack("<I", _TSDF1_VERSION))
        f.write(b"\x00" * 4)
        f.write(struct.pack("<3d", *vol.origin))
        f.write(struct.pack("<d", vol.voxel_size))
        f.write(struct.pack("<3I", *vol.dims))
        f.write(struct.pack("<d", vol.truncation))
        f.write(np.asarray(vol.values, dtype="<f4").ravel(order="F").tobytes())
        f.write(np.asarray(vol.weights, dtype="<f4").ravel(order="F").tobytes())


def load_volume(path) -> TsdfVolume:
    """Read a TSDF1 volume file written by save_volume."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _TSDF1_MAGIC:
            raise ValueError(f"not a TSDF1 file: magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != _TSDF1_VERSION:
            raise ValueError(f"unsupported TSDF1 version {version}")
        f.read(4)
        origin = struct.unpack("<3d", f.read(24))
        (voxel_size,) = struct.unpack("<d", f.read(8))
        dims = struct.unpack("<3I", f.read(12))
        (truncation,) = struct.unpack("<d", f.read(8))
        count = dims[0] * dims[1] * dims[2]
        values = np.frombuffer(f.read(4 * count), dtype="<f4")
        weights = np.frombuffer(f.read(4 * count), dtype="<f4")
    values = values.reshape(dims, order="F")
    weights = weights.reshape(dims, order="F")
    return TsdfVolume(origin, voxel_size, dims, truncation,
                      values=values, weights=weights)


def default_volume() -> TsdfVolume:
    """Fresh volume over the default 0.3 m workspace at 64^3."""
    return TsdfVolume(DEFAULT_ORIGIN, DEFAULT_VOXEL_SIZE, DEFAULT_DIMS,
                      DEFAULT_TRUNCATION)

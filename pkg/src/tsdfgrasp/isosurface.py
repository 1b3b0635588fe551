"""Zero level set extraction from TSDF volumes.

Runs 256-case marching cubes over the voxel grid, placing one vertex per
sign-changing grid edge by linear interpolation and merging shared edge
vertices exactly. Vertex normals come from the normalized field gradient,
so they point toward positive values (outward) and agree with the field
the rest of the pipeline queries. Cubes touching any unobserved
(weight-0) voxel are skipped rather than filled in, so no surface is
invented at observation frontiers.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import numpy.typing as npt

from ._mc_tables import EDGE_AXIS, EDGE_BASE, EDGE_TABLE, TRIANGLE_TABLE
from .errors import DimensionMismatch, EmptyVolume
from .tsdf import TsdfVolume, gradient

_F = npt.NDArray[np.floating]
_I = npt.NDArray[np.integer]

# Maximum |field value| at an extracted vertex, in voxels. Linear
# interpolation lands each vertex where the trilinear field is near zero;
# the residual comes from the field's curvature within one cell.
VERTEX_FIELD_TOL = 0.25


@dataclasses.dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh on the zero level set with per-vertex normals.

    Attributes:
        vertices: (N, 3) float64 world positions in meters.
        triangles: (M, 3) int64 vertex indices. Winding follows the
            right-hand rule with the face normal on the positive side
            of the field.
        normals: (N, 3) float64 unit vectors, one per vertex, pointing
            toward positive field values (outward).
    """

    vertices: _F
    triangles: _I
    normals: _F

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        t = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if n.shape != v.shape:
            raise DimensionMismatch(
                f"{n.shape[0]} normals for {v.shape[0]} vertices")
        if t.size and (t.min() < 0 or t.max() >= v.shape[0]):
            raise ValueError("triangle indices out of range")
        if n.size:
            lens = np.linalg.norm(n, axis=1)
            worst = float(np.max(np.abs(lens - 1.0)))
            if worst > 1e-6:
                raise ValueError(f"normals must be unit length, off by {worst:g}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        object.__setattr__(self, "normals", n)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


def _empty_mesh() -> SurfaceMesh:
    return SurfaceMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                       np.zeros((0, 3)))


def _corner_views(arr: _F) -> tuple:
    """The 8 cube-corner subarrays, ordered v0..v7.

    v0 sits at the cube origin, v1 = +x, v2 = +x+y, v3 = +y, and v4..v7
    repeat that square shifted by +z, matching the case-index convention
    of the lookup tables.
    """
    return (arr[:-1, :-1, :-1], arr[1:, :-1, :-1],
            arr[1:, 1:, :-1], arr[:-1, 1:, :-1],
            arr[:-1, :-1, 1:], arr[1:, :-1, 1:],
            arr[1:, 1:, 1:], arr[:-1, 1:, 1:])


def marching_cubes(vol: TsdfVolume) -> SurfaceMesh:
    """Extracts the zero isosurface of the observed part of a volume.

    Cubes with any weight-0 corner are skipped. Vertices on shared cube
    edges are merged exactly via a global edge key, so the output is
    watertight wherever the surface is fully observed. Raises
    EmptyVolume if no voxel has been observed; a volume with
    observations but no sign change yields an empty mesh.

    Args:
        vol: fused TSDF volume.

    Returns:
        SurfaceMesh with gradient normals pointing toward positive
        field values.
    """
    if not np.any(vol.weights > 0):
        raise EmptyVolume("volume has no observed voxels")
    nx, ny, nz = vol.dims
    values = vol.values
    observed = vol.weights > 0

    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    fully_observed = np.ones((nx - 1, ny - 1, nz - 1), dtype=bool)
    for bit, (corner_vals, corner_obs) in enumerate(
            zip(_corner_views(values), _corner_views(observed))):
        case |= (corner_vals < 0.0).astype(np.int64) << bit
        fully_observed &= corner_obs

    active = fully_observed & (EDGE_TABLE[case] != 0)
    ci, cj, ck = np.nonzero(active)
    if ci.size == 0:
        return _empty_mesh()
    active_case = case[ci, cj, ck]

    # Global key per (cube, edge): canonical lower endpoint plus axis.
    # Shared edges of neighbouring cubes produce identical keys, which is
    # what merges their interpolated vertices exactly.
    n_grid = nx * ny * nz
    base = np.stack([ci, cj, ck], axis=1)
    endpoint = base[:, None, :] + EDGE_BASE[None, :, :]
    lin = (endpoint[..., 0] * ny + endpoint[..., 1]) * nz + endpoint[..., 2]
    keys = EDGE_AXIS[None, :] * n_grid + lin

    crossed = ((EDGE_TABLE[active_case][:, None] >> np.arange(12)) & 1).astype(bool)
    unique_keys = np.unique(keys[crossed])

    # One interpolated vertex per unique sign-changing grid edge.
    axis = unique_keys // n_grid
    rem = unique_keys % n_grid
    gx = rem // (ny * nz)
    gy = (rem // nz) % ny
    gz = rem % nz
    step = np.eye(3, dtype=np.int64)[axis]
    v1 = values[gx, gy, gz]
    v2 = values[gx + step[:, 0], gy + step[:, 1], gz + step[:, 2]]
    frac = v1 / (v1 - v2)
    lower = np.stack([gx, gy, gz], axis=1)
    vertices = (vol.origin + (lower + 0.5) * vol.voxel_size
                + frac[:, None] * step * vol.voxel_size)

    # Triangles: per-cube edge numbers -> global keys -> vertex rows.
    vertex_of_edge = np.searchsorted(unique_keys, keys)
    tri_edges = TRIANGLE_TABLE[active_case]
    tri_valid = tri_edges >= 0
    tri_vertex = np.take_along_axis(vertex_of_edge,
                                    np.where(tri_valid, tri_edges, 0), axis=1)
    keep = tri_valid.reshape(-1, 3)[:, 0]
    triangles = tri_vertex.reshape(-1, 3)[keep]
    # The tables wind triangles clockwise when seen from the positive
    # side; swap to right-handed faces on the positive (outward) side.
    triangles = triangles[:, ::-1]

    grads = gradient(vol, vertices, clamp_to_bounds=True)
    norms = np.linalg.norm(grads, axis=1)
    normals = grads / np.maximum(norms, 1e-300)[:, None]
    return SurfaceMesh(vertices, triangles, normals)


def save_obj(mesh: SurfaceMesh, path) -> None:
    """Writes an ASCII OBJ file with v, vn and f records."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x:.9g} {y:.9g} {z:.9g}")
    for x, y, z in mesh.normals:
        lines.append(f"vn {x:.9g} {y:.9g} {z:.9g}")
    for a, b, c in mesh.triangles + 1:
        lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def save_ply(mesh: SurfaceMesh, path) -> None:
    """Writes a binary little-endian PLY file with vertex normals."""
    header = "\n".join([
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {mesh.n_vertices}",
        "property float x",
        "property float y",
        "property float z",
        "property float nx",
        "property float ny",
        "property float nz",
        f"element face {mesh.n_triangles}",
        "property list uchar int vertex_indices",
        "end_header",
    ]) + "\n"
    vert = np.hstack([mesh.vertices, mesh.normals]).astype("<f4")
    face = np.zeros(mesh.n_triangles,
                    dtype=[("count", "u1"), ("idx", "<i4", (3,))])
    face["count"] = 3
    face["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(vert.tobytes())
        fh.write(face.tobytes())

"""Contact pair sampling on the TSDF and the antipodal quality score.

Each isosurface vertex launches a ray into the object along its inward
normal, looking for the exit crossing on the far side. A successful
match gives a contact pair (p, p', g) whose quality is the product of
the cosines between the closing direction and the two outward contact
normals: 1 for perfectly opposed normals, 0 for tangential contact.
"""

from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
import numpy.typing as npt

from .errors import NonUnitInput
from .isosurface import SurfaceMesh
from .tsdf import TsdfVolume, gradient, raycast_batch, sample_trilinear

_F = npt.NDArray[np.floating]

DEFAULT_ALPHA = math.radians(18.0)
DEFAULT_MAX_WIDTH = 0.08
DEFAULT_MIN_WIDTH = 0.004

# March origin offset along the inward normal, in voxels: skips the
# launch surface's own zero crossing.
LAUNCH_OFFSET_VOXELS = 1.5
# Fractions of the p -> p' segment probed by the free-space rejection.
MID_SEGMENT_FRACTIONS = (0.25, 0.5, 0.75)
# A mid-segment sample above this many voxels of positive distance means
# the segment left the solid before reaching p' (tunneled across a gap).
MID_SEGMENT_FREE_VOXELS = 0.5
# Both contacts must lie on the isosurface within this many voxels.
CONTACT_FIELD_TOL_VOXELS = 0.25


def _check_unit(v: _F, name: str) -> _F:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise NonUnitInput(f"{name} must be a 3-vector, got shape {v.shape}")
    n = np.linalg.norm(v)
    if abs(n - 1.0) > 1e-6:
        raise NonUnitInput(f"{name} must be unit length, got norm {n:.8f}")
    return v


@dataclasses.dataclass(frozen=True)
class AntipodalParams:
    """Thresholds for accepting a contact pair as antipodal.

    Attributes:
        alpha1, alpha2: half-angle thresholds in radians; a pair passes
            when score >= cos(alpha1) * cos(alpha2).
        max_width: largest accepted contact separation in meters (the
            gripper opening).
        min_width: smallest accepted separation in meters.
    """

    alpha1: float = DEFAULT_ALPHA
    alpha2: float = DEFAULT_ALPHA
    max_width: float = DEFAULT_MAX_WIDTH
    min_width: float = DEFAULT_MIN_WIDTH

    def __post_init__(self):
        for name, a in (("alpha1", self.alpha1), ("alpha2", self.alpha2)):
            if not 0.0 < a < math.pi / 2:
                raise ValueError(f"{name} must lie in (0, pi/2), got {a}")
        if not 0.0 <= self.min_width < self.max_width:
            raise ValueError(
                f"need 0 <= min_width < max_width, got "
                f"[{self.min_width}, {self.max_width}]")

    @property
    def score_threshold(self) -> float:
        return math.cos(self.alpha1) * math.cos(self.alpha2)

    def to_json_dict(self) -> dict:
        return {"alpha1": self.alpha1, "alpha2": self.alpha2,
                "max_width": self.max_width, "min_width": self.min_width}

    @staticmethod
    def from_json_dict(d: dict) -> "AntipodalParams":
        base = AntipodalParams()
        return AntipodalParams(
            alpha1=float(d.get("alpha1", base.alpha1)),
            alpha2=float(d.get("alpha2", base.alpha2)),
            max_width=float(d.get("max_width", base.max_width)),
            min_width=float(d.get("min_width", base.min_width)))


@dataclasses.dataclass(frozen=True)
class ContactPair:
    """Two opposed contact points with the closing direction between them.

    Attributes:
        p: first contact (an isosurface vertex), meters.
        p_prime: matched opposite contact, meters.
        g: unit closing direction from p to p_prime.
        n_p, n_pprime: outward unit surface normals at the contacts.
        width: contact separation in meters.
        score: antipodal quality in [0, 1].
        sdf_p, sdf_pprime: field values at the contacts, meters.
    """

    p: _F
    p_prime: _F
    g: _F
    n_p: _F
    n_pprime: _F
    width: float
    score: float
    sdf_p: float
    sdf_pprime: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).reshape(3)
        q = np.asarray(self.p_prime, dtype=np.float64).reshape(3)
        g = np.asarray(self.g, dtype=np.float64).reshape(3)
        n1 = np.asarray(self.n_p, dtype=np.float64).reshape(3)
        n2 = np.asarray(self.n_pprime, dtype=np.float64).reshape(3)
        width = float(self.width)
        sep = float(np.linalg.norm(q - p))
        if abs(sep - width) > 1e-9:
            raise ValueError(f"width {width} != contact separation {sep}")
        if width <= 0.0:
            raise ValueError("contacts coincide")
        if np.max(np.abs(g - (q - p) / width)) > 1e-9:
            raise ValueError("g is not the unit direction from p to p_prime")
        for name, n in (("n_p", n1), ("n_pprime", n2)):
            if abs(np.linalg.norm(n) - 1.0) > 1e-6:
                raise ValueError(f"{name} must be unit length")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "p_prime", q)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "n_p", n1)
        object.__setattr__(self, "n_pprime", n2)
        object.__setattr__(self, "width", width)
        object.__setattr__(self, "score", float(self.score))
        object.__setattr__(self, "sdf_p", float(self.sdf_p))
        object.__setattr__(self, "sdf_pprime", float(self.sdf_pprime))

    @classmethod
    def _from_consistent(cls, p, p_prime, g, n_p, n_pprime, width, score,
                         sdf_p, sdf_pprime) -> "ContactPair":
        """Builds a pair without rerunning the invariant checks.

        Only for internal batch paths whose vectorized math produces
        every field exactly as __post_init__ would verify it; all array
        arguments must already be float64 vectors of length 3.
        """
        pair = object.__new__(cls)
        object.__setattr__(pair, "p", p)
        object.__setattr__(pair, "p_prime", p_prime)
        object.__setattr__(pair, "g", g)
        object.__setattr__(pair, "n_p", n_p)
        object.__setattr__(pair, "n_pprime", n_pprime)
        object.__setattr__(pair, "width", width)
        object.__setattr__(pair, "score", score)
        object.__setattr__(pair, "sdf_p", sdf_p)
        object.__setattr__(pair, "sdf_pprime", sdf_pprime)
        return pair

    def with_score(self, score: float) -> "ContactPair":
        """Copy with a new score; the validated geometry is reused."""
        s = float(score)
        if not 0.0 <= s <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {s}")
        return ContactPair._from_consistent(
            self.p, self.p_prime, self.g, self.n_p, self.n_pprime,
            self.width, s, self.sdf_p, self.sdf_pprime)

    def to_json_dict(self) -> dict:
        return {
            "p": self.p.tolist(),
            "pp": self.p_prime.tolist(),
            "g": self.g.tolist(),
            "np": self.n_p.tolist(),
            "npp": self.n_pprime.tolist(),
            "width": self.width,
            "score": self.score,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ContactPair":
        return ContactPair(
            p=np.asarray(d["p"], dtype=np.float64),
            p_prime=np.asarray(d["pp"], dtype=np.float64),
            g=np.asarray(d["g"], dtype=np.float64),
            n_p=np.asarray(d["np"], dtype=np.float64),
            n_pprime=np.asarray(d["npp"], dtype=np.float64),
            width=float(d["width"]),
            score=float(d["score"]),
            sdf_p=float(d.get("sdf_p", 0.0)),
            sdf_pprime=float(d.get("sdf_pp", 0.0)))


def antipodal_score(n_p: _F, n_pprime: _F, g: _F) -> float:
    """Product-of-cosines antipodal quality for one contact pair.

    s = clamp(-g . n_p, 0, 1) * clamp(g . n_pprime, 0, 1): 1 when the
    outward normals exactly oppose each other along the closing
    direction, 0 for tangential or same-sided contact. Clamping at 0
    keeps two wrong-sided normals from multiplying into a false
    positive. Raises NonUnitInput when any input is not unit length
    within 1e-6.
    """
    n1 = _check_unit(n_p, "n_p")
    n2 = _check_unit(n_pprime, "n_pprime")
    gv = _check_unit(g, "g")
    c1 = min(max(-float(np.dot(gv, n1)), 0.0), 1.0)
    c2 = min(max(float(np.dot(gv, n2)), 0.0), 1.0)
    return c1 * c2


def _scores_batch(n_p: _F, n_pprime: _F, g: _F) -> _F:
    c1 = np.clip(-np.einsum("ij,ij->i", g, n_p), 0.0, 1.0)
    c2 = np.clip(np.einsum("ij,ij->i", g, n_pprime), 0.0, 1.0)
    return c1 * c2


def is_antipodal(pair: ContactPair, params: AntipodalParams) -> bool:
    """True when the pair's score meets the (inclusive) threshold."""
    return pair.score >= params.score_threshold


def sample_contact_pairs(vol: TsdfVolume, mesh: SurfaceMesh,
                         params: AntipodalParams) -> list[ContactPair]:
    """Matches an opposite contact for every isosurface vertex.

    For each vertex p with outward normal n, a ray starts 1.5 voxels
    inside the surface and marches along -n for at most max_width,
    looking for the negative-to-positive crossing where it exits the far
    side. Unobserved samples are transparent to the march, so thick
    objects whose cores were never measured can still be crossed. A
    candidate is dropped when no crossing is found, the separation falls
    outside [min_width, max_width], either contact is off the zero level
    set, or a mid-segment probe (25/50/75% of p -> p') reads more than
    +0.5 voxel of distance, which means the segment left the solid
    before p' (for example across the gap between two objects, or
    through an interior too deep to have been observed).

    Returns pairs in mesh vertex order; vertices without a valid match
    are skipped. The empty list is a valid result.
    """
    if mesh.n_vertices == 0:
        return []
    h = vol.voxel_size
    p = mesh.vertices
    n = mesh.normals
    origins = p - LAUNCH_OFFSET_VOXELS * h * n
    hit, t_hit = raycast_batch(vol, origins, -n, params.max_width,
                               "neg_to_pos", observed_only=True)
    idx = np.nonzero(hit)[0]
    if idx.size == 0:
        return []
    p_hit = p[idx]
    n_hit = n[idx]
    p_prime = origins[idx] - t_hit[idx, None] * n_hit
    delta = p_prime - p_hit
    width = np.linalg.norm(delta, axis=1)
    ok = (width >= params.min_width) & (width <= params.max_width)

    # Both contacts must sit on the isosurface. Vertices can sit a float
    # epsilon outside the sampleable box on the outermost grid edges;
    # those are boundary artifacts and are dropped with the same gate.
    sdf_p = np.full(idx.shape, np.inf)
    inside_p = vol.contains(p_hit)
    sdf_p[inside_p] = sample_trilinear(vol, p_hit[inside_p])
    sdf_pp = np.full(idx.shape, np.inf)
    inside = vol.contains(p_prime)
    sdf_pp[inside] = sample_trilinear(vol, p_prime[inside])
    tol = CONTACT_FIELD_TOL_VOXELS * h
    ok &= (np.abs(sdf_p) <= tol) & (np.abs(sdf_pp) <= tol)

    # Free-space rejection along the segment.
    fracs = np.asarray(MID_SEGMENT_FRACTIONS)
    mids = p_hit[:, None, :] + fracs[None, :, None] * delta[:, None, :]
    flat = mids.reshape(-1, 3)
    flat_inside = vol.contains(flat)
    vals = np.full(flat.shape[0], np.inf)
    vals[flat_inside] = sample_trilinear(vol, flat[flat_inside])
    mid_ok = np.all(vals.reshape(-1, len(fracs))
                    <= MID_SEGMENT_FREE_VOXELS * h, axis=1)
    ok &= mid_ok

    keep = np.nonzero(ok)[0]
    if keep.size == 0:
        return []
    g = delta[keep] / width[keep, None]
    grads = gradient(vol, p_prime[keep], clamp_to_bounds=True)
    mags = np.linalg.norm(grads, axis=1)
    ok_grad = mags > 1e-12
    n_pp = np.zeros_like(grads)
    n_pp[ok_grad] = grads[ok_grad] / mags[ok_grad, None]
    scores = _scores_batch(n_hit[keep], n_pp, g)

    pairs = []
    for row in range(keep.size):
        if not ok_grad[row]:
            continue
        k = keep[row]
        pairs.append(ContactPair._from_consistent(
            p_hit[k], p_prime[k], g[row], n_hit[k], n_pp[row],
            float(width[k]), float(scores[row]),
            float(sdf_p[k]), float(sdf_pp[k])))
    return pairs


def save_pairs_jsonl(pairs: list[ContactPair], path) -> None:
    """Writes one JSON object per line, keys sorted for reproducibility."""
    with open(path, "w") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair.to_json_dict(), sort_keys=True) + "\n")


def load_pairs_jsonl(path) -> list[ContactPair]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                pairs.append(ContactPair.from_json_dict(json.loads(line)))
    return pairs

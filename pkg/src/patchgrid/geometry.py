"""Points, rigid reference frames built from atom triples, and frame transforms.

A frame is an orthonormal, right-handed coordinate system anchored at an
atom. For a residue the anchors are (CA, N, C): the origin sits on CA,
the first axis points from CA to N, the third axis is normal to the
anchor plane, and the second completes the right-handed basis. Any point
expressed in such a frame is invariant under rigid motion of the whole
structure, which is what makes grid hashing pose-independent.

Everything here is a pure function over immutable values; all operations
are safe to call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import CollinearAtoms

# Normalized cross-product magnitude below which three anchors are treated
# as collinear. Structure files carry 3 decimals, so 1e-8 cleanly separates
# degenerate from valid triples.
COLLINEARITY_TOL = 1e-8

# Minimum pairwise anchor separation in Angstroms.
MIN_SEPARATION = 1e-8


class Point3(NamedTuple):
    """A 3D point in Angstroms. Components must be finite."""

    x: float
    y: float
    z: float


@dataclass(frozen=True)
class AtomRecord:
    """One atom of a structure, in file order.

    ``atom_ordinal`` is the 0-based position within the parent structure and
    ``residue_ordinal`` the 0-based index of the residue the atom belongs to
    (non-decreasing in file order). ``chain_id`` and ``residue_seq`` retain
    the source-file residue identity so annotated residue references can be
    resolved back to atoms.
    """

    atom_ordinal: int
    element: str
    atom_name: str
    residue_ordinal: int
    residue_name: str
    position: Point3
    chain_id: str = "A"
    residue_seq: int = 0


@dataclass(frozen=True, eq=False)
class RigidFrame:
    """Orthonormal right-handed frame: origin plus basis rows (e1, e2, e3)."""

    origin: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "basis", np.asarray(self.basis, dtype=np.float64))


def _as_vec(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64)


def frame_from_triple(a, b, c) -> RigidFrame:
    """Build the frame anchored at ``a`` from three non-collinear points.

    origin = a; e1 = unit(b - a); e3 = unit(e1 x (c - a)); e2 = e3 x e1.

    Raises CollinearAtoms when the triple is (nearly) collinear or any two
    anchors (nearly) coincide.
    """
    a = _as_vec(a)
    b = _as_vec(b)
    c = _as_vec(c)
    if not (np.isfinite(a).all() and np.isfinite(b).all() and np.isfinite(c).all()):
        raise ValueError("frame anchors must be finite")
    v1 = b - a
    v2 = c - a
    d_ab = math.sqrt(float(v1 @ v1))
    d_ac = math.sqrt(float(v2 @ v2))
    v_bc = c - b
    d_bc = math.sqrt(float(v_bc @ v_bc))
    if d_ab < MIN_SEPARATION or d_ac < MIN_SEPARATION or d_bc < MIN_SEPARATION:
        raise CollinearAtoms("anchor atoms closer than %g A" % MIN_SEPARATION)
    cr = np.cross(v1, v2)
    if math.sqrt(float(cr @ cr)) / (d_ab * d_ac) < COLLINEARITY_TOL:
        raise CollinearAtoms("anchor atoms are collinear")
    e1 = v1 / d_ab
    e3 = np.cross(e1, v2)
    e3 = e3 / math.sqrt(float(e3 @ e3))
    e2 = np.cross(e3, e1)
    return RigidFrame(origin=a, basis=np.array([e1, e2, e3]))


def to_frame_coords(frame: RigidFrame, p) -> Point3:
    """Express point ``p`` in ``frame``: basis @ (p - origin)."""
    q = frame.basis @ (_as_vec(p) - frame.origin)
    return Point3(float(q[0]), float(q[1]), float(q[2]))


def from_frame_coords(frame: RigidFrame, q) -> Point3:
    """Inverse of to_frame_coords: origin + basis^T @ q."""
    p = frame.origin + frame.basis.T @ _as_vec(q)
    return Point3(float(p[0]), float(p[1]), float(p[2]))


def transform_points(frame: RigidFrame, points: np.ndarray) -> np.ndarray:
    """Express an (n, 3) array of points in ``frame``.

    This is the single transform kernel used by both the disk engine and the
    in-memory baseline so the two paths agree bit for bit.
    """
    return (np.asarray(points, dtype=np.float64) - frame.origin) @ frame.basis.T


def point_norms(points: np.ndarray) -> np.ndarray:
    """Euclidean norm per row of an (n, 3) array."""
    p = np.asarray(points, dtype=np.float64)
    return np.sqrt((p * p).sum(axis=1))


def distance(p, q) -> float:
    """Euclidean distance between two points."""
    d = _as_vec(p) - _as_vec(q)
    return math.sqrt(float(d @ d))


def positions_array(atoms: Sequence[AtomRecord]) -> np.ndarray:
    """Stack atom positions into an (n, 3) float64 array."""
    return np.array([atom.position for atom in atoms], dtype=np.float64).reshape(-1, 3)

"""Seeded synthetic structures for oracle comparison and acceptance runs.

Two families of inputs are generated here:

* fully random proteins/patches (``random_protein``, ``planted_instance``)
  for engine-vs-baseline equivalence, where any geometry is fair game
  because both paths share the same floats; and

* lattice-aligned patches (``lattice_patch``, ``lattice_query``) whose
  frame coordinates sit either exactly on cell boundaries (anchor zeros,
  which the quantizer snaps) or half a cell away from them. Matches against
  such patches are stable under arbitrary rigid motion of the query, which
  is what the pose-invariance checks require.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import AtomRecord, Point3, positions_array, transform_points
from .grid import BOUNDARY_SNAP, GridParams
from .ingest import OriginTag, Patch, Protein
from .preprocess import residue_frames

_RESIDUE_NAMES = ("ALA", "GLY", "SER", "LEU", "VAL", "THR", "ASP", "LYS")
_EXTRA_ATOM_NAMES = ("O", "CB", "CG", "CD", "OG", "NZ", "SD", "CE", "OD1", "ND2")


def random_rotation(rng: random.Random) -> np.ndarray:
    """Uniformly random rotation matrix (det +1) from a random quaternion."""
    u1, u2, u3 = rng.random(), rng.random(), rng.random()
    w = math.sqrt(1 - u1) * math.sin(2 * math.pi * u2)
    x = math.sqrt(1 - u1) * math.cos(2 * math.pi * u2)
    y = math.sqrt(u1) * math.sin(2 * math.pi * u3)
    z = math.sqrt(u1) * math.cos(2 * math.pi * u3)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rigid_motion(rng: random.Random, max_translation: float = 50.0) -> tuple[np.ndarray, np.ndarray]:
    rotation = random_rotation(rng)
    translation = np.array([rng.uniform(-max_translation, max_translation) for _ in range(3)])
    return rotation, translation


def move_atoms(atoms: Sequence[AtomRecord], rotation: np.ndarray, translation: np.ndarray) -> tuple[AtomRecord, ...]:
    points = positions_array(atoms) @ rotation.T + translation
    moved = []
    for atom, row in zip(atoms, points):
        moved.append(
            AtomRecord(
                atom_ordinal=atom.atom_ordinal,
                element=atom.element,
                atom_name=atom.atom_name,
                residue_ordinal=atom.residue_ordinal,
                residue_name=atom.residue_name,
                position=Point3(float(row[0]), float(row[1]), float(row[2])),
                chain_id=atom.chain_id,
                residue_seq=atom.residue_seq,
            )
        )
    return tuple(moved)


def move_protein(protein: Protein, rotation: np.ndarray, translation: np.ndarray,
                 new_id: str | None = None) -> Protein:
    return Protein(
        protein_id=new_id or protein.protein_id,
        atoms=move_atoms(protein.atoms, rotation, translation),
    )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / math.sqrt(float(v @ v))


def _random_direction(rng: random.Random) -> np.ndarray:
    while True:
        v = np.array([rng.gauss(0, 1) for _ in range(3)])
        n = float(v @ v)
        if n > 1e-6:
            return v / math.sqrt(n)


def random_residue_atoms(
    rng: random.Random,
    residue_ordinal: int,
    first_atom_ordinal: int,
    center: np.ndarray,
    n_extra_atoms: int,
    chain_id: str = "A",
) -> list[AtomRecord]:
    """One residue with well-separated, non-collinear CA/N/C anchors plus
    ``n_extra_atoms`` atoms scattered within ~2.5 A of the CA."""
    residue_name = rng.choice(_RESIDUE_NAMES)
    u = _random_direction(rng)
    # Second anchor direction kept 35..145 degrees away from the first.
    while True:
        v = _random_direction(rng)
        cosang = float(u @ v)
        if abs(cosang) < 0.82:
            break
    ca = center
    n_pos = center + rng.uniform(1.3, 1.6) * u
    c_pos = center + rng.uniform(1.3, 1.6) * v
    atoms = []
    specs = [("CA", "C", ca), ("N", "N", n_pos), ("C", "C", c_pos)]
    for i in range(n_extra_atoms):
        offset = np.array([rng.uniform(-2.5, 2.5) for _ in range(3)])
        specs.append((_EXTRA_ATOM_NAMES[i % len(_EXTRA_ATOM_NAMES)], "C", center + offset))
    for i, (name, element, pos) in enumerate(specs):
        atoms.append(
            AtomRecord(
                atom_ordinal=first_atom_ordinal + i,
                element=element,
                atom_name=name,
                residue_ordinal=residue_ordinal,
                residue_name=residue_name,
                position=Point3(float(pos[0]), float(pos[1]), float(pos[2])),
                chain_id=chain_id,
                residue_seq=residue_ordinal + 1,
            )
        )
    return atoms


def random_protein(
    rng: random.Random,
    protein_id: str,
    n_residues: int,
    extra_atoms: tuple[int, int] = (1, 5),
    spacing: float = 4.0,
) -> Protein:
    atoms: list[AtomRecord] = []
    span = max(10.0, spacing * n_residues ** (1 / 3) * 2.0)
    for r in range(n_residues):
        center = np.array([rng.uniform(0, span) for _ in range(3)])
        atoms.extend(
            random_residue_atoms(
                rng, r, len(atoms), center, rng.randint(*extra_atoms)
            )
        )
    return Protein(protein_id=protein_id, atoms=tuple(atoms))


def random_patch(
    rng: random.Random,
    patch_id: str,
    source_protein_id: str,
    n_residues: int,
    extra_atoms: tuple[int, int] = (1, 5),
) -> Patch:
    protein = random_protein(rng, source_protein_id, n_residues, extra_atoms, spacing=3.0)
    return Patch(
        patch_id=patch_id,
        source_protein_id=source_protein_id,
        atoms=protein.atoms,
        origin_tag=OriginTag.SiteRecord,
    )


@dataclass
class SyntheticInstance:
    params: GridParams
    patches: list[Patch]
    query: Protein
    planted_patch_ids: list[str]


def planted_instance(
    seed: int,
    n_patches: int = 8,
    patch_residues: tuple[int, int] = (1, 3),
    extra_atoms: tuple[int, int] = (1, 5),
    query_noise_residues: int = 6,
    n_planted: int | None = None,
    delta: float = 1.0,
    bits_per_axis: int = 21,
) -> SyntheticInstance:
    """A random database plus a query containing rigidly moved copies of a
    subset of the patches, padded with unrelated noise residues."""
    rng = random.Random(seed)
    params = GridParams(delta=delta, bits_per_axis=bits_per_axis)
    patches = [
        random_patch(
            rng,
            patch_id=f"P{idx:03d}_0",
            source_protein_id=f"P{idx:03d}",
            n_residues=rng.randint(*patch_residues),
            extra_atoms=extra_atoms,
        )
        for idx in range(n_patches)
    ]
    if n_planted is None:
        n_planted = rng.randint(1, max(1, n_patches // 2))
    planted = rng.sample(patches, k=min(n_planted, len(patches)))

    atoms: list[AtomRecord] = []
    residue_base = 0
    for patch in planted:
        rotation, translation = rigid_motion(rng)
        moved = move_atoms(patch.atoms, rotation, translation)
        residue_map: dict[int, int] = {}
        for atom in moved:
            if atom.residue_ordinal not in residue_map:
                residue_map[atom.residue_ordinal] = residue_base + len(residue_map)
            atoms.append(
                AtomRecord(
                    atom_ordinal=len(atoms),
                    element=atom.element,
                    atom_name=atom.atom_name,
                    residue_ordinal=residue_map[atom.residue_ordinal],
                    residue_name=atom.residue_name,
                    position=atom.position,
                    chain_id="Q",
                    residue_seq=residue_map[atom.residue_ordinal] + 1,
                )
            )
        residue_base += len(residue_map)
    for _ in range(query_noise_residues):
        center = np.array([rng.uniform(-80, 80) for _ in range(3)])
        atoms.extend(
            random_residue_atoms(
                rng, residue_base, len(atoms), center, rng.randint(*extra_atoms), chain_id="Q"
            )
        )
        residue_base += 1
    query = Protein(protein_id=f"QRY{seed}", atoms=tuple(atoms))
    return SyntheticInstance(
        params=params,
        patches=patches,
        query=query,
        planted_patch_ids=[p.patch_id for p in planted],
    )


# ---------------------------------------------------------------------------
# Lattice-aligned construction for pose-invariance checks


def _half_cell(k: int, delta: float) -> float:
    # Odd multiple of delta/2: the midpoint of cell k.
    return (k + 0.5) * delta


def lattice_patch(
    patch_id: str,
    source_protein_id: str,
    delta: float,
    rng: random.Random,
    n_extra_atoms: int = 4,
    max_cell: int = 3,
    radius_bump: float = 0.0,
) -> Patch:
    """Single-residue patch whose own frame coordinates are all either exact
    anchor zeros or cell midpoints, so matches survive any rigid motion.

    Built directly in the frame's canonical pose: CA at the origin, N on the
    first axis, C in the first/second-axis plane. ``radius_bump`` adds one
    far atom, letting one patch dominate the database mps.
    """
    coords: list[tuple[str, float, float, float]] = [
        ("CA", 0.0, 0.0, 0.0),
        ("N", _half_cell(1, delta), 0.0, 0.0),
        ("C", _half_cell(0, delta), _half_cell(2, delta), 0.0),
    ]
    used = {(0, 0, 0), (1, 0, 0), (0, 2, 0)}
    for i in range(n_extra_atoms):
        while True:
            cell = (
                rng.randint(-max_cell, max_cell),
                rng.randint(-max_cell, max_cell),
                rng.randint(-max_cell, max_cell),
            )
            if cell not in used:
                used.add(cell)
                break
        coords.append(
            (
                _EXTRA_ATOM_NAMES[i % len(_EXTRA_ATOM_NAMES)],
                _half_cell(cell[0], delta),
                _half_cell(cell[1], delta),
                _half_cell(cell[2], delta),
            )
        )
    if radius_bump > 0:
        k = int(math.ceil(radius_bump / delta)) + max_cell + 2
        coords.append(("SD", _half_cell(k, delta), _half_cell(0, delta), _half_cell(0, delta)))
    atoms = tuple(
        AtomRecord(
            atom_ordinal=i,
            element=name[:1],
            atom_name=name,
            residue_ordinal=0,
            residue_name="GLY",
            position=Point3(x, y, z),
            chain_id="A",
            residue_seq=1,
        )
        for i, (name, x, y, z) in enumerate(coords)
    )
    return Patch(
        patch_id=patch_id,
        source_protein_id=source_protein_id,
        atoms=atoms,
        origin_tag=OriginTag.SiteRecord,
    )


def lattice_query(
    patches: Sequence[Patch],
    rng: random.Random,
    separation: float,
    protein_id: str = "LATQ",
) -> Protein:
    """A query containing one rigidly moved copy of each patch, spaced far
    enough apart that cross-frame coordinates exceed any realistic mps."""
    atoms: list[AtomRecord] = []
    residue_base = 0
    for i, patch in enumerate(patches):
        rotation = random_rotation(rng)
        translation = np.array([ (i + 1) * separation, 0.0, 0.0 ])
        moved = move_atoms(patch.atoms, rotation, translation)
        residue_map: dict[int, int] = {}
        for atom in moved:
            if atom.residue_ordinal not in residue_map:
                residue_map[atom.residue_ordinal] = residue_base + len(residue_map)
            atoms.append(
                AtomRecord(
                    atom_ordinal=len(atoms),
                    element=atom.element,
                    atom_name=atom.atom_name,
                    residue_ordinal=residue_map[atom.residue_ordinal],
                    residue_name=atom.residue_name,
                    position=atom.position,
                    chain_id="Q",
                    residue_seq=residue_map[atom.residue_ordinal] + 1,
                )
            )
        residue_base += len(residue_map)
    return Protein(protein_id=protein_id, atoms=tuple(atoms))


def margin_violations(
    protein: Protein,
    params: GridParams,
    mps: float,
    margin_factor: float = 0.1,
) -> int:
    """Count query entries whose frame coordinates sit in the quantization
    dead zone (farther than the snap width but closer than margin_factor *
    delta to a cell boundary) or hug the mps clip sphere. Zero means the
    query's matches are stable under rigid motion."""
    violations = 0
    frames = residue_frames(protein.atoms)
    points = positions_array(protein.atoms)
    clip_eps = 1e-6
    for _, frame in frames:
        coords = transform_points(frame, points)
        radii = np.sqrt((coords * coords).sum(axis=1))
        violations += int(((np.abs(radii - mps) < clip_eps) & (radii > 0)).sum())
        surviving = coords[radii <= mps]
        if not len(surviving):
            continue
        q = surviving / params.delta
        dist = np.abs(surviving - np.rint(q) * params.delta)
        bad = (dist > BOUNDARY_SNAP) & (dist < margin_factor * params.delta)
        violations += int(bad.any(axis=1).sum())
    return violations

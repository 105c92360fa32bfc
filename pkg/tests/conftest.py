"""Shared helpers: fixed-width structure text writers and corpus builders."""

from __future__ import annotations

import random

from patchgrid.geometry import AtomRecord
from patchgrid.ingest import OriginTag, Patch, Protein
from patchgrid.synthetic import random_protein


def _place(line: list[str], start_col: int, text: str) -> None:
    # start_col is 1-based, as in the format documentation.
    for i, ch in enumerate(text):
        line[start_col - 1 + i] = ch


def atom_line(
    serial: int,
    name: str,
    residue_name: str,
    chain_id: str,
    residue_seq: int,
    x: float,
    y: float,
    z: float,
    element: str = "",
    altloc: str = " ",
    record: str = "ATOM",
) -> str:
    line = [" "] * 80
    _place(line, 1, f"{record:<6}")
    _place(line, 7, f"{serial:>5}")
    _place(line, 13, f"{name:<4}")
    _place(line, 17, altloc)
    _place(line, 18, f"{residue_name:>3}")
    _place(line, 22, chain_id)
    _place(line, 23, f"{residue_seq:>4}")
    _place(line, 31, f"{x:8.3f}")
    _place(line, 39, f"{y:8.3f}")
    _place(line, 47, f"{z:8.3f}")
    if element:
        _place(line, 77, f"{element:>2}")
    return "".join(line).rstrip() + "\n"


def site_lines(site_id: str, residues: list[tuple[str, str, int]]) -> list[str]:
    """One or more SITE records naming (residue_name, chain_id, residue_seq)."""
    lines = []
    for block_start in range(0, len(residues), 4):
        block = residues[block_start : block_start + 4]
        line = [" "] * 80
        _place(line, 1, "SITE")
        _place(line, 8, f"{block_start // 4 + 1:>3}")
        _place(line, 12, f"{site_id:<3}")
        _place(line, 16, f"{len(residues):>2}")
        col = 19
        for residue_name, chain_id, residue_seq in block:
            _place(line, col, f"{residue_name:>3}")
            _place(line, col + 4, chain_id)
            _place(line, col + 5, f"{residue_seq:>4}")
            col += 11
        lines.append("".join(line).rstrip() + "\n")
    return lines


def structure_text(protein: Protein, sites: dict[str, list[AtomRecord]] | None = None) -> str:
    """Render a protein (and optional SITE records over its residues) as
    fixed-width structure-file text at 3-decimal coordinate precision."""
    lines = []
    for site_id, atoms in (sites or {}).items():
        residues = []
        seen = set()
        for atom in atoms:
            key = (atom.residue_name, atom.chain_id, atom.residue_seq)
            if key not in seen:
                seen.add(key)
                residues.append(key)
        lines.extend(site_lines(site_id, residues))
    for atom in protein.atoms:
        lines.append(
            atom_line(
                serial=atom.atom_ordinal + 1,
                name=atom.atom_name,
                residue_name=atom.residue_name,
                chain_id=atom.chain_id,
                residue_seq=atom.residue_seq,
                x=atom.position.x,
                y=atom.position.y,
                z=atom.position.z,
                element=atom.element,
            )
        )
    return "".join(lines)


def window_patch(protein: Protein, patch_id: str, first_residue: int, n_residues: int) -> Patch:
    """A patch cut verbatim from a contiguous residue window of a protein."""
    wanted = set(range(first_residue, first_residue + n_residues))
    atoms = tuple(a for a in protein.atoms if a.residue_ordinal in wanted)
    return Patch(
        patch_id=patch_id,
        source_protein_id=protein.protein_id,
        atoms=atoms,
        origin_tag=OriginTag.SiteRecord,
    )


def corpus(seed: int, n_proteins: int = 6, residues: tuple[int, int] = (5, 9),
           patches_per_protein: int = 2):
    """Random proteins plus verbatim window patches cut from them."""
    rng = random.Random(seed)
    proteins = []
    patches = []
    for i in range(n_proteins):
        protein = random_protein(rng, f"SRC{i}", rng.randint(*residues))
        proteins.append(protein)
        for j in range(patches_per_protein):
            first = rng.randint(0, max(0, protein.residue_count - 2))
            patches.append(
                window_patch(protein, f"{protein.protein_id}_{j}", first, rng.randint(1, 2))
            )
    return proteins, patches

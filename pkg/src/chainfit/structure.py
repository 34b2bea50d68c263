"""Fixed-column PDB-subset parsing and chain-partitioned coordinate storage.

Only ATOM/HETATM records are read. Chains are kept in file order and each
chain must occupy one contiguous block of records; coordinates are stored as
an immutable (N, 3) float64 array in angstroms.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyStructureError,
    PDBParseError,
    UnknownChainError,
)

_RECORD_PREFIXES = ("ATOM  ", "HETATM")

# Fixed column slices of the PDB format (0-based, end-exclusive).
_ATOM_NAME = slice(12, 16)
_RES_NAME = slice(17, 20)
_CHAIN_ID = 21
_RES_SEQ = slice(22, 26)
_COORD_X = slice(30, 38)
_COORD_Y = slice(38, 46)
_COORD_Z = slice(46, 54)


@dataclass(frozen=True)
class AtomicStructure:
    """Atom coordinates partitioned into contiguous chains.

    Attributes
    ----------
    coords : (N, 3) float64 array, read-only, angstroms.
    atom_names, res_names : per-atom labels in file order.
    res_seqs : per-atom residue numbers.
    chain_ids : one identifier per chain, in order of first appearance.
    chain_ranges : per-chain [start, stop) index ranges; they partition [0, N).
    """

    coords: np.ndarray
    atom_names: tuple[str, ...]
    res_names: tuple[str, ...]
    res_seqs: tuple[int, ...]
    chain_ids: tuple[str, ...]
    chain_ranges: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must have shape (N, 3), got {coords.shape}")
        if coords.shape[0] == 0:
            raise EmptyStructureError("structure has no atoms")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords contain non-finite values")
        n = coords.shape[0]
        if not (len(self.atom_names) == len(self.res_names) == len(self.res_seqs) == n):
            raise ValueError("per-atom label lengths do not match coords")
        if len(self.chain_ids) != len(self.chain_ranges):
            raise ValueError("chain_ids and chain_ranges lengths differ")
        if len(set(self.chain_ids)) != len(self.chain_ids):
            raise ValueError("duplicate chain identifiers")
        expected_start = 0
        for cid, (start, stop) in zip(self.chain_ids, self.chain_ranges):
            if start != expected_start or stop <= start:
                raise ValueError(f"chain {cid!r} range ({start}, {stop}) does not tile [0, N)")
            expected_start = stop
        if expected_start != n:
            raise ValueError("chain ranges do not cover all atoms")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def n_atoms(self) -> int:
        return self.coords.shape[0]

    @property
    def n_chains(self) -> int:
        return len(self.chain_ids)

    def chain_range(self, chain_id: str) -> tuple[int, int]:
        try:
            idx = self.chain_ids.index(chain_id)
        except ValueError:
            raise UnknownChainError(
                f"chain {chain_id!r} not in structure (has {', '.join(self.chain_ids)})"
            ) from None
        return self.chain_ranges[idx]

    def chain_slice(self, chain_id: str) -> slice:
        start, stop = self.chain_range(chain_id)
        return slice(start, stop)

    def chain_coords(self, chain_id: str) -> np.ndarray:
        return self.coords[self.chain_slice(chain_id)]

    def chain_size(self, chain_id: str) -> int:
        start, stop = self.chain_range(chain_id)
        return stop - start

    def flat_coords(self) -> np.ndarray:
        """Coordinates flattened atom-major: (x0, y0, z0, x1, ...)."""
        return self.coords.reshape(-1)

    def with_coords(self, coords: np.ndarray) -> "AtomicStructure":
        """Same topology and labels with replaced coordinates."""
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape != self.coords.shape:
            raise ValueError(
                f"replacement coords shape {coords.shape} != {self.coords.shape}"
            )
        return AtomicStructure(
            coords=coords.copy(),
            atom_names=self.atom_names,
            res_names=self.res_names,
            res_seqs=self.res_seqs,
            chain_ids=self.chain_ids,
            chain_ranges=self.chain_ranges,
        )

    def select_atoms(self, atom_name: str) -> "AtomicStructure":
        """Keep only atoms with the given name; chains left empty are dropped."""
        keep = [i for i, name in enumerate(self.atom_names) if name == atom_name]
        if not keep:
            raise EmptyStructureError(f"no atoms named {atom_name!r}")
        chain_ids: list[str] = []
        chain_ranges: list[tuple[int, int]] = []
        cursor = 0
        for cid, (start, stop) in zip(self.chain_ids, self.chain_ranges):
            count = sum(1 for i in keep if start <= i < stop)
            if count:
                chain_ids.append(cid)
                chain_ranges.append((cursor, cursor + count))
                cursor += count
        idx = np.asarray(keep, dtype=np.intp)
        return AtomicStructure(
            coords=self.coords[idx],
            atom_names=tuple(self.atom_names[i] for i in keep),
            res_names=tuple(self.res_names[i] for i in keep),
            res_seqs=tuple(self.res_seqs[i] for i in keep),
            chain_ids=tuple(chain_ids),
            chain_ranges=tuple(chain_ranges),
        )


def center_of_mass(structure: AtomicStructure, chain_id: str | None = None) -> np.ndarray:
    """Unweighted mean position of a chain, or of the whole structure."""
    coords = structure.coords if chain_id is None else structure.chain_coords(chain_id)
    return coords.mean(axis=0)


def parse_structure(text: str) -> AtomicStructure:
    """Parse ATOM/HETATM records from PDB-format text.

    Raises PDBParseError with the offending line number on malformed records
    or if a chain identifier appears in two separate blocks.
    """
    coords: list[tuple[float, float, float]] = []
    atom_names: list[str] = []
    res_names: list[str] = []
    res_seqs: list[int] = []
    chain_ids: list[str] = []
    chain_starts: list[int] = []
    seen_chains: set[str] = set()
    current_chain: str | None = None

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.startswith(_RECORD_PREFIXES):
            continue
        if len(line) < 54:
            raise PDBParseError(f"line {lineno}: record too short for coordinates")
        chain = line[_CHAIN_ID]
        try:
            x = float(line[_COORD_X])
            y = float(line[_COORD_Y])
            z = float(line[_COORD_Z])
        except ValueError:
            raise PDBParseError(f"line {lineno}: malformed coordinate field") from None
        res_field = line[_RES_SEQ].strip()
        try:
            res_seq = int(res_field) if res_field else 0
        except ValueError:
            raise PDBParseError(f"line {lineno}: malformed residue number") from None
        if chain != current_chain:
            if chain in seen_chains:
                raise PDBParseError(
                    f"line {lineno}: chain {chain!r} reappears after another chain; "
                    "chains must be contiguous"
                )
            seen_chains.add(chain)
            chain_ids.append(chain)
            chain_starts.append(len(coords))
            current_chain = chain
        coords.append((x, y, z))
        atom_names.append(line[_ATOM_NAME].strip())
        res_names.append(line[_RES_NAME].strip())
        res_seqs.append(res_seq)

    if not coords:
        raise EmptyStructureError("no ATOM/HETATM records found")

    n = len(coords)
    ranges = tuple(
        (start, chain_starts[i + 1] if i + 1 < len(chain_starts) else n)
        for i, start in enumerate(chain_starts)
    )
    return AtomicStructure(
        coords=np.asarray(coords, dtype=np.float64),
        atom_names=tuple(atom_names),
        res_names=tuple(res_names),
        res_seqs=tuple(res_seqs),
        chain_ids=tuple(chain_ids),
        chain_ranges=ranges,
    )


def parse_structure_file(path: str | Path) -> AtomicStructure:
    return parse_structure(Path(path).read_text())


def _format_atom_line(serial: int, name: str, res_name: str, chain: str,
                      res_seq: int, pos: np.ndarray) -> str:
    name_field = name if len(name) >= 4 else f" {name:<3s}"
    element = next((c for c in name if c.isalpha()), "C")
    return (
        f"ATOM  {serial % 100000:5d} {name_field:<4.4s} {res_name:<3.3s} "
        f"{chain[:1]}{res_seq % 10000:4d}    "
        f"{pos[0]:8.3f}{pos[1]:8.3f}{pos[2]:8.3f}  1.00  0.00          "
        f"{element:>2s}"
    )


def write_structure(structure: AtomicStructure) -> str:
    """Render the structure back to PDB-format text (3-decimal coordinates)."""
    lines: list[str] = []
    serial = 1
    for cid, (start, stop) in zip(structure.chain_ids, structure.chain_ranges):
        for i in range(start, stop):
            lines.append(_format_atom_line(
                serial, structure.atom_names[i], structure.res_names[i],
                cid, structure.res_seqs[i], structure.coords[i],
            ))
            serial += 1
        lines.append("TER")
    lines.append("END")
    return "\n".join(lines) + "\n"


def write_structure_file(structure: AtomicStructure, path: str | Path) -> None:
    Path(path).write_text(write_structure(structure))


def write_multi_model(structures: list[AtomicStructure], path: str | Path) -> None:
    """Write several conformations of the same topology as PDB MODEL blocks."""
    parts: list[str] = []
    for i, structure in enumerate(structures, start=1):
        body = write_structure(structure)
        body = body[: body.rindex("END")]  # single END goes at the very end
        parts.append(f"MODEL     {i:4d}\n{body}ENDMDL\n")
    Path(path).write_text("".join(parts) + "END\n")

"""Compact random test structures: confined Calpha walks grouped into chains.

These are not meant to be physical proteins; they provide connected,
non-degenerate elastic networks at controllable sizes for tests and demos.
"""

from __future__ import annotations

import numpy as np

from .nma import ENMConfig, chain_bases
from .structure import AtomicStructure


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def chain_walk_coords(n_atoms: int, rng: np.random.Generator, step: float = 3.8,
                      radius: float = 11.0,
                      center: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Persistent random walk with fixed step length confined to a sphere."""
    center_arr = np.asarray(center, dtype=np.float64)
    pos = center_arr.copy()
    coords = [pos.copy()]
    direction = _unit(rng.normal(size=3))
    for _ in range(n_atoms - 1):
        direction = _unit(direction + 0.9 * rng.normal(size=3))
        nxt = pos + step * direction
        if np.linalg.norm(nxt - center_arr) > radius:
            direction = _unit(center_arr - pos + 0.5 * rng.normal(size=3))
            nxt = pos + step * direction
        pos = nxt
        coords.append(pos.copy())
    return np.asarray(coords)


def toy_structure(chain_sizes: tuple[int, ...] = (90, 90), seed: int = 0,
                  spacing: float = 22.0, radius: float = 11.0) -> AtomicStructure:
    """Globular multi-chain Calpha structure; chain centers spaced along x."""
    rng = np.random.default_rng(seed)
    coords_parts = []
    chain_ids = []
    chain_ranges = []
    cursor = 0
    for index, size in enumerate(chain_sizes):
        center = (index * spacing, 0.0, 0.0)
        coords_parts.append(chain_walk_coords(size, rng, radius=radius, center=center))
        chain_ids.append(chr(ord("A") + index))
        chain_ranges.append((cursor, cursor + size))
        cursor += size
    n = cursor
    return AtomicStructure(
        coords=np.concatenate(coords_parts, axis=0),
        atom_names=("CA",) * n,
        res_names=("ALA",) * n,
        res_seqs=tuple(range(1, n + 1)),
        chain_ids=tuple(chain_ids),
        chain_ranges=tuple(chain_ranges),
    )


def mode_perturbed(structure: AtomicStructure, enm: ENMConfig, draw_rms: float,
                   rng: np.random.Generator, n_soft: int = 3,
                   sweeps: int = 12) -> AtomicStructure:
    """Deform each chain along its softest normal modes, self-consistently.

    The initial displacement (draw_rms angstroms RMS per chain, random
    direction over the n_soft softest modes) is repeatedly projected onto the
    mode span recomputed at the displaced geometry. The fixed point is a
    deformation that the deformed structure's own normal-mode basis can
    represent, which is what makes it recoverable by a mode-weight fit
    against that structure; a raw draw loses much of itself to basis mixing.
    The projections shed the inexpressible part, so the final amplitude is
    somewhat below draw_rms.
    """
    if draw_rms < 0:
        raise ValueError(f"draw_rms must be non-negative, got {draw_rms}")
    bases = chain_bases(structure, enm)
    displacement = np.zeros_like(structure.coords)
    for cid, (start, stop) in zip(structure.chain_ids, structure.chain_ranges):
        modes = bases[cid].modes[:, :n_soft]
        direction = rng.standard_normal(modes.shape[1])
        direction /= np.linalg.norm(direction)
        amplitude = draw_rms * np.sqrt(stop - start)
        displacement[start:stop] = (modes @ (direction * amplitude)).reshape(-1, 3)
    for _ in range(sweeps):
        displaced = structure.with_coords(structure.coords + displacement)
        bases = chain_bases(displaced, enm)
        for cid, (start, stop) in zip(structure.chain_ids, structure.chain_ranges):
            modes = bases[cid].modes
            flat = displacement[start:stop].reshape(-1)
            displacement[start:stop] = (modes @ (modes.T @ flat)).reshape(-1, 3)
    return structure.with_coords(structure.coords + displacement)


def displaced_reference(structure: AtomicStructure, enm: ENMConfig,
                        rotation_deg: float, draw_rms: float,
                        rng: np.random.Generator, n_soft: int = 3) -> AtomicStructure:
    """A deliberately wrong starting model: mode-deformed, chains counter-rotated.

    Benchmark fits start from a reference that differs from the imaged
    molecule by a normal-mode deformation plus alternating +/-rotation_deg
    rotations of each chain about z through its center of mass — the kind of
    systematic chain-level offset a whole-structure mode basis cannot undo.
    """
    displaced = mode_perturbed(structure, enm, draw_rms, rng, n_soft=n_soft)
    coords = displaced.coords.copy()
    for index, (start, stop) in enumerate(displaced.chain_ranges):
        angle = np.deg2rad(rotation_deg if index % 2 == 0 else -rotation_deg)
        cos_a, sin_a = np.cos(angle), np.sin(angle)
        rotation = np.array([[cos_a, -sin_a, 0.0], [sin_a, cos_a, 0.0], [0.0, 0.0, 1.0]])
        pivot = coords[start:stop].mean(axis=0)
        coords[start:stop] = (coords[start:stop] - pivot) @ rotation.T + pivot
    return displaced.with_coords(coords)

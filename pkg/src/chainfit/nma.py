"""Anisotropic elastic-network model: Hessian assembly and normal-mode bases.

The network connects every atom pair within a distance cutoff with a harmonic
spring. The 3n x 3n Hessian of the quadratic energy has, for a connected pair
(j, k) at reference displacement dr = r_j - r_k, the off-diagonal block
-gamma * outer(dr, dr) / |dr|^2; diagonal blocks make every block row sum to
zero. Rigid-body motions span its null space and are excluded from the basis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, DegenerateGeometryError, DimensionMismatchError
from .structure import AtomicStructure

_NULL_TOLERANCE_FACTOR = 1e-6  # eigenvalues below this fraction of the max are rigid-body


@dataclass(frozen=True)
class ENMConfig:
    """Elastic-network parameters: cutoff (angstrom), spring constant, mode count."""

    cutoff: float = 15.0
    gamma: float = 1.0
    num_modes: int = 20

    def __post_init__(self) -> None:
        if not self.cutoff > 0:
            raise ConfigError(f"cutoff must be positive, got {self.cutoff}")
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if not (isinstance(self.num_modes, int) and self.num_modes >= 1):
            raise ConfigError(f"num_modes must be a positive integer, got {self.num_modes}")


@dataclass(frozen=True)
class NormalModeBasis:
    """Orthonormal elastic modes above the rigid-body null space.

    modes : (3n, K) columns sorted by ascending eigenvalue.
    eigenvalues : (K,) spring-energy curvatures, all positive.
    reference : (3n,) flattened coordinates the basis was computed at.
    """

    modes: np.ndarray
    eigenvalues: np.ndarray
    reference: np.ndarray

    def __post_init__(self) -> None:
        modes = np.ascontiguousarray(self.modes, dtype=np.float64)
        eigenvalues = np.ascontiguousarray(self.eigenvalues, dtype=np.float64)
        reference = np.ascontiguousarray(self.reference, dtype=np.float64)
        if modes.ndim != 2:
            raise ValueError(f"modes must be 2D, got shape {modes.shape}")
        dim, k = modes.shape
        if dim % 3 != 0 or dim == 0:
            raise ValueError(f"mode dimension {dim} is not a multiple of 3")
        if eigenvalues.shape != (k,):
            raise ValueError("eigenvalues length does not match mode count")
        if reference.shape != (dim,):
            raise ValueError("reference length does not match mode dimension")
        if k and np.any(np.diff(eigenvalues) < 0):
            raise ValueError("eigenvalues must be non-decreasing")
        if k and np.any(eigenvalues <= 0):
            raise ValueError("eigenvalues must be positive above the null space")
        for arr, name in ((modes, "modes"), (eigenvalues, "eigenvalues"), (reference, "reference")):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contain non-finite values")
            arr.setflags(write=False)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "eigenvalues", eigenvalues)
        object.__setattr__(self, "reference", reference)

    @property
    def n_atoms(self) -> int:
        return self.reference.shape[0] // 3

    @property
    def n_modes(self) -> int:
        return self.modes.shape[1]


def build_hessian(coords: np.ndarray, config: ENMConfig) -> np.ndarray:
    """Assemble the elastic-network Hessian for one set of coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must have shape (n, 3), got {coords.shape}")
    n = coords.shape[0]
    if n < 2:
        raise ValueError("an elastic network needs at least two atoms")
    diff = coords[:, None, :] - coords[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diff, diff)
    cutoff2 = config.cutoff * config.cutoff
    pair_i, pair_j = np.nonzero(np.triu(dist2 <= cutoff2, k=1))
    hessian = np.zeros((3 * n, 3 * n))
    for i, j in zip(pair_i.tolist(), pair_j.tolist()):
        d2 = dist2[i, j]
        if d2 < 1e-16:
            raise DegenerateGeometryError(
                f"atoms {i} and {j} coincide; pairwise spring is undefined"
            )
        dr = diff[i, j]
        block = (-config.gamma / d2) * np.outer(dr, dr)
        si, sj = slice(3 * i, 3 * i + 3), slice(3 * j, 3 * j + 3)
        hessian[si, sj] = block
        hessian[sj, si] = block
        hessian[si, si] -= block
        hessian[sj, sj] -= block
    return hessian


def compute_modes(hessian: np.ndarray, reference: np.ndarray, num_modes: int) -> NormalModeBasis:
    """Eigendecompose the Hessian and keep the softest non-rigid modes.

    Raises CapacityError when fewer than num_modes elastic modes exist; the
    message reports how many are available.
    """
    hessian = np.asarray(hessian, dtype=np.float64)
    if hessian.ndim != 2 or hessian.shape[0] != hessian.shape[1]:
        raise ValueError(f"hessian must be square, got {hessian.shape}")
    if not np.allclose(hessian, hessian.T, atol=1e-10):
        raise ValueError("hessian is not symmetric")
    reference = np.asarray(reference, dtype=np.float64).reshape(-1)
    if reference.shape[0] != hessian.shape[0]:
        raise ValueError("reference length does not match hessian dimension")
    eigenvalues, eigenvectors = np.linalg.eigh(hessian)
    max_eig = eigenvalues[-1]
    if max_eig <= 0:
        raise CapacityError("hessian has no positive eigenvalues; structure has no elastic modes")
    elastic = eigenvalues >= _NULL_TOLERANCE_FACTOR * max_eig
    available = int(np.count_nonzero(elastic))
    if num_modes > available:
        raise CapacityError(
            f"requested {num_modes} modes but only {available} elastic modes exist"
        )
    idx = np.nonzero(elastic)[0][:num_modes]
    return NormalModeBasis(
        modes=eigenvectors[:, idx],
        eigenvalues=eigenvalues[idx],
        reference=reference,
    )


def deform(basis: NormalModeBasis, mode_weights: np.ndarray) -> np.ndarray:
    """Displace the reference along the basis: reference + modes @ weights."""
    weights = np.asarray(mode_weights, dtype=np.float64).reshape(-1)
    if weights.shape[0] != basis.n_modes:
        raise DimensionMismatchError(
            f"got {weights.shape[0]} mode weights for a basis of {basis.n_modes} modes"
        )
    if not np.all(np.isfinite(weights)):
        raise ValueError("mode weights contain non-finite values")
    if not weights.any():
        return basis.reference.copy()
    return basis.reference + basis.modes @ weights


def chain_basis(structure: AtomicStructure, chain_id: str, config: ENMConfig) -> NormalModeBasis:
    """Normal-mode basis of one chain, built on its own coordinates."""
    coords = structure.chain_coords(chain_id)
    hessian = build_hessian(coords, config)
    return compute_modes(hessian, coords.reshape(-1), config.num_modes)


def chain_bases(structure: AtomicStructure, config: ENMConfig) -> dict[str, NormalModeBasis]:
    """Per-chain normal-mode bases for every chain in the structure."""
    return {cid: chain_basis(structure, cid, config) for cid in structure.chain_ids}


def whole_basis(structure: AtomicStructure, config: ENMConfig) -> NormalModeBasis:
    """Normal-mode basis of the full structure treated as one elastic network."""
    hessian = build_hessian(structure.coords, config)
    return compute_modes(hessian, structure.flat_coords(), config.num_modes)


def mode_variance_fractions(eigenvalues: np.ndarray) -> np.ndarray:
    """Cumulative fraction of predicted fluctuation variance per mode.

    An elastic mode with curvature lambda contributes variance proportional to
    1/lambda, so soft modes dominate; useful for choosing how many modes to keep.
    """
    eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
    if eigenvalues.size == 0:
        return np.zeros(0)
    inv = 1.0 / eigenvalues
    return np.cumsum(inv) / inv.sum()


def save_basis(path: str | Path, basis: NormalModeBasis, config: ENMConfig) -> None:
    """Write a basis as little-endian float64 binary plus a JSON sidecar.

    Layout: int64 header (n_atoms, n_modes), then reference (3n), eigenvalues
    (K), and modes written column by column. The sidecar at <path>.json records
    the ENM parameters and shape for loaders.
    """
    path = Path(path)
    header = np.asarray([basis.n_atoms, basis.n_modes], dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(basis.reference.astype("<f8").tobytes())
        fh.write(basis.eigenvalues.astype("<f8").tobytes())
        fh.write(np.asfortranarray(basis.modes.astype("<f8")).tobytes(order="F"))
    sidecar = {
        "format": "chainfit-basis-v1",
        "n_atoms": basis.n_atoms,
        "n_modes": basis.n_modes,
        "cutoff": config.cutoff,
        "gamma": config.gamma,
        "num_modes": config.num_modes,
        "eigenvalues": basis.eigenvalues.tolist(),
        "cumulative_variance_fraction": mode_variance_fractions(basis.eigenvalues).tolist(),
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_basis(path: str | Path) -> tuple[NormalModeBasis, ENMConfig]:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise FileNotFoundError(f"missing basis sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    config = ENMConfig(
        cutoff=float(sidecar["cutoff"]),
        gamma=float(sidecar["gamma"]),
        num_modes=int(sidecar["num_modes"]),
    )
    raw = path.read_bytes()
    n_atoms, n_modes = (int(v) for v in np.frombuffer(raw[:16], dtype="<i8"))
    dim = 3 * n_atoms
    floats = np.frombuffer(raw[16:], dtype="<f8")
    expected = dim + n_modes + dim * n_modes
    if floats.shape[0] != expected:
        raise ValueError(f"basis file holds {floats.shape[0]} floats, expected {expected}")
    reference = floats[:dim]
    eigenvalues = floats[dim:dim + n_modes]
    modes = floats[dim + n_modes:].reshape((dim, n_modes), order="F")
    return NormalModeBasis(modes=modes, eigenvalues=eigenvalues, reference=reference), config

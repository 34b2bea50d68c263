"""Per-chain rigid transforms built from unconstrained rotation parameters.

A rotation is parameterized by two free 3-vectors (v1, v2): Gram-Schmidt
orthonormalization gives the first two columns of R and their cross product
the third. The map is smooth wherever v1 and the component of v2 orthogonal
to v1 are nonzero, which makes it convenient for gradient-based fitting.

A chain transform rotates about a fixed pivot (the chain's reference center
of mass) and then translates: y = R (x - pivot) + pivot + t.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import DegenerateInputError, DimensionMismatchError
from .nma import NormalModeBasis, deform
from .structure import AtomicStructure, center_of_mass

_EPS = 1e-12


def gram_schmidt_rotation(v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Rotation matrix whose columns are the orthonormalized (v1, v2, v1 x v2)."""
    v1 = np.asarray(v1, dtype=np.float64).reshape(3)
    v2 = np.asarray(v2, dtype=np.float64).reshape(3)
    n1 = np.linalg.norm(v1)
    if n1 < _EPS:
        raise DegenerateInputError("v1 is numerically zero")
    w1 = v1 / n1
    residual = v2 - (v2 @ w1) * w1
    n2 = np.linalg.norm(residual)
    if n2 < _EPS:
        raise DegenerateInputError("v2 is numerically parallel to v1")
    w2 = residual / n2
    w3 = np.cross(w1, w2)
    return np.stack([w1, w2, w3], axis=1)


def gram_schmidt_batch(v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """Vectorized gram_schmidt_rotation over a leading batch axis: (B, 3) -> (B, 3, 3)."""
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1 = np.linalg.norm(v1, axis=1, keepdims=True)
    if np.any(n1 < _EPS):
        raise DegenerateInputError("v1 is numerically zero")
    w1 = v1 / n1
    residual = v2 - np.sum(v2 * w1, axis=1, keepdims=True) * w1
    n2 = np.linalg.norm(residual, axis=1, keepdims=True)
    if np.any(n2 < _EPS):
        raise DegenerateInputError("v2 is numerically parallel to v1")
    w2 = residual / n2
    w3 = np.cross(w1, w2)
    return np.stack([w1, w2, w3], axis=2)


def gram_schmidt_backward(v1: np.ndarray, v2: np.ndarray,
                          grad_rotation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate d(loss)/dR through gram_schmidt_batch to (v1, v2) gradients.

    All arguments carry a leading batch axis; grad_rotation is (B, 3, 3) with
    the same column convention as the forward pass.
    """
    v1 = np.asarray(v1, dtype=np.float64)
    v2 = np.asarray(v2, dtype=np.float64)
    n1 = np.linalg.norm(v1, axis=1, keepdims=True)
    w1 = v1 / n1
    dot12 = np.sum(v2 * w1, axis=1, keepdims=True)
    residual = v2 - dot12 * w1
    n2 = np.linalg.norm(residual, axis=1, keepdims=True)
    w2 = residual / n2

    g1 = grad_rotation[:, :, 0]
    g2 = grad_rotation[:, :, 1]
    g3 = grad_rotation[:, :, 2]

    # w3 = w1 x w2 feeds back into both factors.
    d_w1 = g1 + np.cross(w2, g3)
    d_w2 = g2 + np.cross(g3, w1)

    # w2 = residual / |residual|
    d_residual = (d_w2 - np.sum(d_w2 * w2, axis=1, keepdims=True) * w2) / n2

    # residual = v2 - (v2 . w1) w1
    d_v2 = d_residual - np.sum(d_residual * w1, axis=1, keepdims=True) * w1
    d_w1 = d_w1 - np.sum(d_residual * w1, axis=1, keepdims=True) * v2 - dot12 * d_residual

    # w1 = v1 / |v1|
    d_v1 = (d_w1 - np.sum(d_w1 * w1, axis=1, keepdims=True) * w1) / n1
    return d_v1, d_v2


def _check_rotation(rotation: np.ndarray) -> np.ndarray:
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=1e-10):
        raise ValueError("rotation is not orthonormal")
    if np.linalg.det(rotation) < 0:
        raise ValueError("rotation has negative determinant")
    return rotation


@dataclass(frozen=True)
class ChainTransform:
    """Rigid motion of one chain: rotate about pivot, then translate.

    v1/v2 are the unconstrained parameters that generated the rotation; they
    are kept so a fit result can be serialized and resumed exactly.
    """

    v1: np.ndarray
    v2: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    pivot: np.ndarray

    def __post_init__(self) -> None:
        rotation = _check_rotation(self.rotation)
        for name in ("v1", "v2", "translation", "pivot"):
            value = np.asarray(getattr(self, name), dtype=np.float64).reshape(3)
            if not np.all(np.isfinite(value)):
                raise ValueError(f"{name} contains non-finite values")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        rotation = rotation.copy()
        rotation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)

    @classmethod
    def from_vectors(cls, v1: np.ndarray, v2: np.ndarray, translation: np.ndarray,
                     pivot: np.ndarray) -> "ChainTransform":
        return cls(v1=np.asarray(v1, dtype=np.float64),
                   v2=np.asarray(v2, dtype=np.float64),
                   rotation=gram_schmidt_rotation(v1, v2),
                   translation=translation, pivot=pivot)

    @classmethod
    def from_rotation(cls, rotation: np.ndarray, translation: np.ndarray,
                      pivot: np.ndarray) -> "ChainTransform":
        rotation = _check_rotation(rotation)
        return cls(v1=rotation[:, 0], v2=rotation[:, 1], rotation=rotation,
                   translation=translation, pivot=pivot)

    @classmethod
    def identity(cls, pivot: np.ndarray) -> "ChainTransform":
        return cls.from_rotation(np.eye(3), np.zeros(3), pivot)

    @property
    def is_identity(self) -> bool:
        return (np.array_equal(self.rotation, np.eye(3))
                and not self.translation.any())


def apply_chain_transform(coords: np.ndarray, transform: ChainTransform) -> np.ndarray:
    """y = R (x - pivot) + pivot + t, applied row-wise to (n, 3) coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    if transform.is_identity:
        return coords.copy()
    centered = coords - transform.pivot
    return centered @ transform.rotation.T + transform.pivot + transform.translation


@dataclass(frozen=True)
class LatentState:
    """Per-chain deformation weights and rigid transforms, plus optional pose.

    mode_weights and transforms are ordered like the chains of the structure
    they act on. The pose is the image-level projection orientation; it is
    carried through generation but never part of per-chain fitting.
    """

    mode_weights: tuple[np.ndarray, ...]
    transforms: tuple[ChainTransform, ...]
    pose_rotation: np.ndarray | None = None
    pose_translation: np.ndarray | None = None

    def __post_init__(self) -> None:
        if len(self.mode_weights) != len(self.transforms):
            raise ValueError("mode_weights and transforms must have one entry per chain")
        weights = tuple(np.asarray(w, dtype=np.float64).reshape(-1) for w in self.mode_weights)
        for w in weights:
            w.setflags(write=False)
        object.__setattr__(self, "mode_weights", weights)
        if (self.pose_rotation is None) != (self.pose_translation is None):
            raise ValueError("pose rotation and translation must be set together")
        if self.pose_rotation is not None:
            rotation = _check_rotation(self.pose_rotation).copy()
            rotation.setflags(write=False)
            object.__setattr__(self, "pose_rotation", rotation)
            translation = np.asarray(self.pose_translation, dtype=np.float64).reshape(2)
            translation.setflags(write=False)
            object.__setattr__(self, "pose_translation", translation)

    @property
    def n_chains(self) -> int:
        return len(self.transforms)

    def to_json_dict(self) -> dict:
        out: dict = {
            "chains": [
                {
                    "mode_weights": w.tolist(),
                    "v1": t.v1.tolist(),
                    "v2": t.v2.tolist(),
                    "translation": t.translation.tolist(),
                    "pivot": t.pivot.tolist(),
                }
                for w, t in zip(self.mode_weights, self.transforms)
            ]
        }
        if self.pose_rotation is not None:
            out["pose"] = {
                "rotation": self.pose_rotation.tolist(),
                "translation": self.pose_translation.tolist(),
            }
        return out

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "LatentState":
        weights = []
        transforms = []
        for entry in data["chains"]:
            weights.append(np.asarray(entry["mode_weights"], dtype=np.float64))
            transforms.append(ChainTransform.from_vectors(
                v1=np.asarray(entry["v1"], dtype=np.float64),
                v2=np.asarray(entry["v2"], dtype=np.float64),
                translation=np.asarray(entry["translation"], dtype=np.float64),
                pivot=np.asarray(entry["pivot"], dtype=np.float64),
            ))
        pose = data.get("pose")
        return cls(
            mode_weights=tuple(weights),
            transforms=tuple(transforms),
            pose_rotation=None if pose is None else np.asarray(pose["rotation"], dtype=np.float64),
            pose_translation=None if pose is None else np.asarray(pose["translation"], dtype=np.float64),
        )


def identity_latents(reference: AtomicStructure,
                     bases: Mapping[str, NormalModeBasis]) -> LatentState:
    """All-zero weights and identity transforms for every chain of reference."""
    weights = []
    transforms = []
    for cid in reference.chain_ids:
        weights.append(np.zeros(bases[cid].n_modes))
        transforms.append(ChainTransform.identity(center_of_mass(reference, cid)))
    return LatentState(mode_weights=tuple(weights), transforms=tuple(transforms))


def compose_structure(reference: AtomicStructure,
                      bases: Mapping[str, NormalModeBasis],
                      latents: LatentState) -> AtomicStructure:
    """Deform each chain along its modes, then apply its rigid transform.

    A chain with zero weights and an identity transform comes out bit-identical
    to the reference.
    """
    if latents.n_chains != reference.n_chains:
        raise DimensionMismatchError(
            f"latents cover {latents.n_chains} chains, structure has {reference.n_chains}"
        )
    out = np.empty_like(reference.coords)
    for idx, cid in enumerate(reference.chain_ids):
        if cid not in bases:
            raise DimensionMismatchError(f"no basis provided for chain {cid!r}")
        basis = bases[cid]
        ref_coords = reference.chain_coords(cid)
        if basis.reference.shape[0] != ref_coords.size:
            raise DimensionMismatchError(
                f"basis for chain {cid!r} has {basis.n_atoms} atoms, chain has {ref_coords.shape[0]}"
            )
        if not np.allclose(basis.reference, ref_coords.reshape(-1), atol=1e-9):
            raise DimensionMismatchError(
                f"basis for chain {cid!r} was computed on different reference coordinates"
            )
        try:
            deformed = deform(basis, latents.mode_weights[idx]).reshape(-1, 3)
        except DimensionMismatchError as exc:
            raise DimensionMismatchError(f"chain {cid!r}: {exc}") from None
        out[reference.chain_slice(cid)] = apply_chain_transform(deformed, latents.transforms[idx])
    return reference.with_coords(out)


def project_to_rotation(matrix: np.ndarray) -> np.ndarray:
    """Closest proper rotation to an arbitrary 3x3 matrix (Frobenius norm, via SVD)."""
    matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 3)
    u, _, vt = np.linalg.svd(matrix)
    rotation = u @ vt
    if np.linalg.det(rotation) < 0:
        u[:, -1] = -u[:, -1]
        rotation = u @ vt
    return rotation


def rotation_angle_deg(rotation: np.ndarray) -> float:
    """Magnitude of a rotation in degrees, from its trace."""
    rotation = np.asarray(rotation, dtype=np.float64)
    cos_angle = (np.trace(rotation) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(cos_angle, -1.0, 1.0))))

"""Reconstruction accuracy metrics and latent-space analysis.

RMSD is computed on fixed atom order without alignment (poses are known by
construction). Error maps compare the per-atom means of ground-truth and
fitted conformations. PCA runs on extracted latent blocks: per-chain mode
weights, or the rigid block vectorized as (row-major flattened rotation,
translation), 12 numbers per chain.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DimensionMismatchError, EmptyInputError
from .rigid import ChainTransform, gram_schmidt_rotation, project_to_rotation
from .structure import AtomicStructure

_HIST_BIN = 0.5  # angstrom bin width of error histograms


def _coords_of(value) -> np.ndarray:
    coords = getattr(value, "coords", value)
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"expected (N, 3) coordinates, got shape {coords.shape}")
    return coords


def rmsd(a, b) -> float:
    """Root-mean-square deviation over corresponding atoms, angstroms."""
    ca = _coords_of(a)
    cb = _coords_of(b)
    if ca.shape != cb.shape:
        raise DimensionMismatchError(f"atom counts differ: {ca.shape[0]} vs {cb.shape[0]}")
    delta = ca - cb
    return float(np.sqrt(np.mean(np.sum(delta * delta, axis=1))))


@dataclass(frozen=True)
class ErrorMap:
    """Per-atom distance between mean GT and mean fitted conformations."""

    per_atom: np.ndarray
    hist_counts: np.ndarray
    bin_edges: np.ndarray

    @property
    def max_error(self) -> float:
        return float(self.per_atom.max())


def error_map(gt_structures: Sequence, fitted_structures: Sequence) -> ErrorMap:
    """Distance between the two per-atom means, histogrammed at 0.5 angstrom."""
    gt_list = [_coords_of(s) for s in gt_structures]
    fit_list = [_coords_of(s) for s in fitted_structures]
    if not gt_list or not fit_list:
        raise EmptyInputError("error_map needs at least one structure on each side")
    if len(gt_list) != len(fit_list):
        raise DimensionMismatchError(
            f"{len(gt_list)} GT structures vs {len(fit_list)} fitted")
    shape = gt_list[0].shape
    for coords in gt_list + fit_list:
        if coords.shape != shape:
            raise DimensionMismatchError("structures have inconsistent atom counts")
    gt_mean = np.mean(gt_list, axis=0)
    fit_mean = np.mean(fit_list, axis=0)
    per_atom = np.linalg.norm(gt_mean - fit_mean, axis=1)
    top = max(float(per_atom.max()), _HIST_BIN)
    edges = np.arange(0.0, top + _HIST_BIN, _HIST_BIN)
    counts, edges = np.histogram(per_atom, bins=edges)
    return ErrorMap(per_atom=per_atom, hist_counts=counts, bin_edges=edges)


@dataclass(frozen=True)
class PCAResult:
    """Principal components of a latent block.

    components : (dim, p), orthonormal columns, descending variance.
    explained_variance_pct : per component, percentages of total variance.
    projected : (n, p) scores of the input samples.
    mean : (dim,) sample mean removed before decomposition.
    """

    components: np.ndarray
    explained_variance_pct: np.ndarray
    projected: np.ndarray
    mean: np.ndarray


def pca(samples: np.ndarray, n_components: int | None = None) -> PCAResult:
    """Mean-centered PCA via eigendecomposition of the sample covariance."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise ValueError(f"samples must be (n, dim), got shape {samples.shape}")
    n, dim = samples.shape
    if n < 2:
        raise EmptyInputError(f"PCA needs at least 2 samples, got {n}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    eigenvectors = eigenvectors[:, order]
    total = float(eigenvalues.sum())
    if total <= 0:
        warnings.warn("latent block has zero variance; PCA scores are all zero")
        pct = np.zeros(dim)
    else:
        pct = 100.0 * eigenvalues / total
    p = dim if n_components is None else min(n_components, dim)
    components = eigenvectors[:, :p]
    return PCAResult(
        components=components,
        explained_variance_pct=pct[:p],
        projected=centered @ components,
        mean=mean,
    )


def _entry_latents(entry) -> Mapping:
    latents = entry.latents if hasattr(entry, "latents") else entry["latents"]
    if latents is None:
        raise EmptyInputError("entry has no latents (failed fit)")
    return latents


def _iter_entries(reports) -> list:
    entries = getattr(reports, "entries", reports)
    good = []
    for entry in entries:
        error = entry.error if hasattr(entry, "error") else entry.get("error")
        if error is None:
            good.append(entry)
    return good


def rigid_block_vector(latents: Mapping, chain_index: int) -> np.ndarray:
    """Rigid block of one chain as 12 numbers: row-major R, then t."""
    chain = latents["chains"][chain_index]
    rotation = gram_schmidt_rotation(np.asarray(chain["v1"]), np.asarray(chain["v2"]))
    return np.concatenate([rotation.reshape(-1), np.asarray(chain["translation"], dtype=np.float64)])


def alpha_block_vector(latents: Mapping, chain_index: int) -> np.ndarray:
    """Mode-weight block of one chain."""
    return np.asarray(latents["chains"][chain_index]["mode_weights"], dtype=np.float64)


def latent_block_matrix(reports, block: str, chain_index: int) -> np.ndarray:
    """Stack one latent block across all successful entries of a report."""
    if block not in ("alpha", "rigid"):
        raise ValueError(f"block must be 'alpha' or 'rigid', got {block!r}")
    extract = alpha_block_vector if block == "alpha" else rigid_block_vector
    rows = []
    for entry in _iter_entries(reports):
        latents = _entry_latents(entry)
        if "chains" not in latents:
            raise EmptyInputError(
                "whole-structure fits have no per-chain latent blocks for PCA")
        if chain_index >= len(latents["chains"]):
            raise DimensionMismatchError(
                f"chain index {chain_index} out of range "
                f"({len(latents['chains'])} chains)")
        rows.append(extract(latents, chain_index))
    if not rows:
        raise EmptyInputError("no successful fit entries to analyze")
    return np.asarray(rows)


def latent_pca(reports, block: str, chain_index: int = 0,
               n_components: int | None = None) -> PCAResult:
    """PCA of one latent block ('alpha' or 'rigid') of one chain across a report."""
    return pca(latent_block_matrix(reports, block, chain_index), n_components)


def traverse_pc(result: PCAResult, pc_index: int,
                quantiles: Iterable[float]) -> list[np.ndarray]:
    """Latent vectors mean + q-th score quantile along one component."""
    quantiles = list(quantiles)
    if not 0 <= pc_index < result.components.shape[1]:
        raise IndexError(f"pc_index {pc_index} out of range")
    for q in quantiles:
        if not 0 < q < 1:
            raise ValueError(f"quantiles must lie in (0, 1), got {q}")
    scores = result.projected[:, pc_index]
    component = result.components[:, pc_index]
    return [result.mean + float(np.quantile(scores, q)) * component for q in quantiles]


def rigid_vector_to_transform(vector: np.ndarray, pivot: np.ndarray) -> ChainTransform:
    """Decode a 12-number rigid block back to a valid transform.

    PCA traversals leave SO(3); the rotation part is projected back via SVD.
    """
    vector = np.asarray(vector, dtype=np.float64).reshape(12)
    rotation = project_to_rotation(vector[:9].reshape(3, 3))
    return ChainTransform.from_rotation(rotation, vector[9:], pivot)

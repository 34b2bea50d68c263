"""Per-image latent recovery by first-order descent through the full decoder.

The decoder maps a flat parameter vector (per-chain mode weights, rotation
vectors, translations; or whole-structure mode weights) to atom coordinates
and then to a rendered image; the loss is pixel-wise MSE against the target.
Gradients are analytic end to end: Gaussian splat -> global pose -> chain
transform -> Gram-Schmidt -> mode weights.

Everything batched is elementwise per image, and every derived RNG stream is
keyed by (seed, image index, restart), so results are identical regardless of
how images are grouped into batches or spread over worker threads. Batches
are formed by fixed-size contiguous index ranges for the same reason.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, DimensionMismatchError, DivergenceError
from .imaging import ImageStack, ImagingConfig, splat_gradients, splat_images
from .nma import ENMConfig, NormalModeBasis, chain_bases, whole_basis
from .rigid import (
    ChainTransform,
    apply_chain_transform,
    compose_structure,
    gram_schmidt_backward,
    gram_schmidt_batch,
)
from .structure import AtomicStructure, center_of_mass

FIT_MODES = ("N_whole", "cN", "cR", "cRT", "full")

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8
_RESTART_MAX_DEG = 10.0


@dataclass(frozen=True)
class FitConfig:
    """Which latent blocks to optimize and how.

    mode selects the latent blocks: whole-structure modes (N_whole), per-chain
    modes (cN), per-chain rotations (cR), rotations plus translations (cRT),
    or everything per chain (full). num_modes is per chain, or the whole-
    structure count for N_whole. step_decay linearly shrinks the step to
    (1 - step_decay) of its initial value by the last iteration.

    Steps are preconditioned so that one unit of step moves atoms by roughly
    one angstrom RMS regardless of which block a parameter belongs to; step is
    therefore an atomic displacement rate, not a raw parameter increment.
    lowpass_px, when set, fits against Gaussian-smoothed images (model and
    target alike), trading resolution for noise suppression.

    prior_weight adds a ridge penalty prior_weight * d^2 to the objective,
    where d is the RMS atomic displacement (in angstroms, per parameter) away
    from the prior center. At low SNR a per-image maximum-likelihood fit
    scatters far beyond the true heterogeneity, so a displacement prior is
    what makes per-image estimates usable; weight 0 disables it.

    passes > 1 prepends a stack-wide consensus fit: one shared parameter
    vector descends the batch-averaged gradient over round-robin minibatches,
    which raises the gradient signal-to-noise by the batch size and recovers
    corrections common to every image (for example a source model whose chains
    sit rotated relative to the imaged molecule). The per-image passes then
    start from the consensus latents and shrink toward them with prior_weight;
    passes > 2 re-center on the mean fitted latents between per-image passes.
    """

    mode: str = "full"
    num_modes: int = 50
    step: float = 0.01
    iterations: int = 500
    grad_tol: float = 1e-6
    restarts: int = 1
    seed: int = 0
    step_decay: float = 0.0
    monotone: bool = False
    batch_size: int = 64
    lowpass_px: float | None = None
    prior_weight: float = 0.0
    passes: int = 1

    def __post_init__(self) -> None:
        if self.mode not in FIT_MODES:
            raise ConfigError(f"mode must be one of {FIT_MODES}, got {self.mode!r}")
        if self.uses_modes and not (isinstance(self.num_modes, int) and self.num_modes >= 1):
            raise ConfigError(f"num_modes must be a positive integer, got {self.num_modes}")
        if not self.step > 0:
            raise ConfigError(f"step must be positive, got {self.step}")
        if not (isinstance(self.iterations, int) and self.iterations >= 1):
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if not self.grad_tol >= 0:
            raise ConfigError(f"grad_tol must be non-negative, got {self.grad_tol}")
        if not (isinstance(self.restarts, int) and self.restarts >= 1):
            raise ConfigError(f"restarts must be >= 1, got {self.restarts}")
        if not 0 <= self.step_decay < 1:
            raise ConfigError(f"step_decay must be in [0, 1), got {self.step_decay}")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lowpass_px is not None and not self.lowpass_px > 0:
            raise ConfigError(f"lowpass_px must be positive or None, got {self.lowpass_px}")
        if not self.prior_weight >= 0:
            raise ConfigError(f"prior_weight must be non-negative, got {self.prior_weight}")
        if not (isinstance(self.passes, int) and self.passes >= 1):
            raise ConfigError(f"passes must be >= 1, got {self.passes}")

    @property
    def uses_modes(self) -> bool:
        return self.mode in ("N_whole", "cN", "full")

    @property
    def uses_rotation(self) -> bool:
        return self.mode in ("cR", "cRT", "full")

    @property
    def uses_translation(self) -> bool:
        return self.mode in ("cRT", "full")

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "num_modes": self.num_modes if self.uses_modes else None,
            "step": self.step,
            "iterations": self.iterations,
            "grad_tol": self.grad_tol,
            "restarts": self.restarts,
            "seed": self.seed,
            "step_decay": self.step_decay,
            "monotone": self.monotone,
            "batch_size": self.batch_size,
            "lowpass_px": self.lowpass_px,
            "prior_weight": self.prior_weight,
            "passes": self.passes,
        }


@dataclass
class _ChainBlock:
    chain_id: str
    start: int
    stop: int
    reference: np.ndarray          # (n_c, 3)
    pivot: np.ndarray              # (3,)
    modes: np.ndarray | None       # (3 n_c, K) or None
    alpha_offset: int = -1
    rot_offset: int = -1
    trans_offset: int = -1

    @property
    def n_modes(self) -> int:
        return 0 if self.modes is None else self.modes.shape[1]


class DecoderModel:
    """Differentiable map from flat parameters to coordinates and images.

    For N_whole the parameter vector is the whole-structure mode weights; for
    chain modes it is the concatenation, chain by chain, of the active blocks
    [mode weights][v1 v2][t]. Frozen blocks are not represented at all, which
    keeps them exactly at identity.

    param_scales holds, per parameter, the increment that moves atoms by about
    one angstrom RMS over the whole structure; the optimizers use it as a
    diagonal preconditioner so mode weights, rotation vectors, and chain
    translations descend at comparable atomic-displacement rates.
    """

    def __init__(self, reference: AtomicStructure,
                 bases: Mapping[str, NormalModeBasis] | NormalModeBasis | None,
                 config: FitConfig, imaging: ImagingConfig) -> None:
        self.reference = reference
        self.config = config
        self.imaging = imaging
        self.whole_modes: np.ndarray | None = None
        self.blocks: list[_ChainBlock] = []

        if config.mode == "N_whole":
            if not isinstance(bases, NormalModeBasis):
                raise ConfigError("N_whole mode needs a whole-structure NormalModeBasis")
            self._check_basis(bases, reference.coords, "whole structure")
            if config.num_modes > bases.n_modes:
                raise DimensionMismatchError(
                    f"requested {config.num_modes} modes, basis has {bases.n_modes}")
            self.whole_modes = bases.modes[:, :config.num_modes]
            self.n_params = config.num_modes
            # a unit mode weight moves atoms by 1/sqrt(N) RMS
            self.param_scales = np.full(self.n_params, math.sqrt(reference.n_atoms))
            self.prior_center = np.zeros(self.n_params)
            return

        offset = 0
        scales: list[np.ndarray] = []
        for cid in reference.chain_ids:
            start, stop = reference.chain_range(cid)
            chain_coords = reference.chain_coords(cid)
            block = _ChainBlock(
                chain_id=cid, start=start, stop=stop,
                reference=chain_coords, pivot=center_of_mass(reference, cid),
                modes=None,
            )
            n_total = reference.n_atoms
            n_c = stop - start
            if config.uses_modes:
                if not isinstance(bases, Mapping) or cid not in bases:
                    raise ConfigError(f"mode {config.mode} needs a basis for chain {cid!r}")
                basis = bases[cid]
                self._check_basis(basis, chain_coords, f"chain {cid!r}")
                if config.num_modes > basis.n_modes:
                    raise DimensionMismatchError(
                        f"requested {config.num_modes} modes for chain {cid!r}, "
                        f"basis has {basis.n_modes}")
                block.modes = basis.modes[:, :config.num_modes]
                block.alpha_offset = offset
                offset += config.num_modes
                scales.append(np.full(config.num_modes, math.sqrt(n_total)))
            if config.uses_rotation:
                block.rot_offset = offset
                offset += 6
                # a small rotation-vector change of d rotates by ~d radians,
                # moving chain atoms by ~d * gyration radius RMS
                radii = np.linalg.norm(chain_coords - block.pivot, axis=1)
                gyration = math.sqrt(np.mean(radii * radii) * (2.0 / 3.0))
                gyration = max(gyration, 1e-6)
                scales.append(np.full(6, math.sqrt(n_total / n_c) / gyration))
            if config.uses_translation:
                block.trans_offset = offset
                offset += 3
                scales.append(np.full(3, math.sqrt(n_total / n_c)))
            self.blocks.append(block)
        self.n_params = offset
        if offset == 0:
            raise ConfigError(f"mode {config.mode} leaves no parameters to optimize")
        self.param_scales = np.concatenate(scales)
        self.prior_center = self.initial_params(1)[0]

    @staticmethod
    def _check_basis(basis: NormalModeBasis, coords: np.ndarray, label: str) -> None:
        if basis.reference.shape[0] != coords.size:
            raise DimensionMismatchError(f"basis for {label} has wrong atom count")
        if not np.allclose(basis.reference, coords.reshape(-1), atol=1e-9):
            raise DimensionMismatchError(
                f"basis for {label} was computed on different reference coordinates")

    def initial_params(self, batch: int) -> np.ndarray:
        params = np.zeros((batch, self.n_params))
        for block in self.blocks:
            if block.rot_offset >= 0:
                params[:, block.rot_offset] = 1.0      # v1 = (1, 0, 0)
                params[:, block.rot_offset + 4] = 1.0  # v2 = (0, 1, 0)
        return params

    def perturb_params(self, params: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Restart jitter: rotate each chain's (v1, v2) by up to 10 degrees."""
        params = params.copy()
        for block in self.blocks:
            if block.rot_offset < 0:
                continue
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            angle = rng.uniform(0.0, math.radians(_RESTART_MAX_DEG))
            k = np.array([
                [0.0, -axis[2], axis[1]],
                [axis[2], 0.0, -axis[0]],
                [-axis[1], axis[0], 0.0],
            ])
            rot = np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)
            o = block.rot_offset
            params[:, o:o + 3] = params[:, o:o + 3] @ rot.T
            params[:, o + 3:o + 6] = params[:, o + 3:o + 6] @ rot.T
        return params

    def decode_coords(self, params: np.ndarray) -> tuple[np.ndarray, list]:
        """Parameters (B, P) -> coordinates (B, N, 3) plus per-chain cache."""
        batch = params.shape[0]
        n = self.reference.n_atoms
        if self.whole_modes is not None:
            flat = self.reference.flat_coords()[None] + params @ self.whole_modes.T
            return flat.reshape(batch, n, 3), []
        coords = np.empty((batch, n, 3))
        cache = []
        for block in self.blocks:
            n_c = block.stop - block.start
            if block.alpha_offset >= 0:
                alpha = params[:, block.alpha_offset:block.alpha_offset + block.n_modes]
                x = (block.reference.reshape(-1)[None] + alpha @ block.modes.T)
                x = x.reshape(batch, n_c, 3)
            else:
                x = np.broadcast_to(block.reference, (batch, n_c, 3))
            if block.rot_offset >= 0:
                o = block.rot_offset
                v1 = params[:, o:o + 3]
                v2 = params[:, o + 3:o + 6]
                rotation = gram_schmidt_batch(v1, v2)
                y = np.einsum("bij,bnj->bni", rotation, x - block.pivot) + block.pivot
            else:
                rotation = None
                y = np.array(x, copy=True)
            if block.trans_offset >= 0:
                y += params[:, None, block.trans_offset:block.trans_offset + 3]
            coords[:, block.start:block.stop] = y
            cache.append((x, rotation))
        return coords, cache

    def backprop(self, params: np.ndarray, cache: list,
                 grad_coords: np.ndarray) -> np.ndarray:
        """d(loss)/d(coords) (B, N, 3) -> d(loss)/d(params) (B, P)."""
        batch = params.shape[0]
        if self.whole_modes is not None:
            return grad_coords.reshape(batch, -1) @ self.whole_modes
        grad = np.zeros((batch, self.n_params))
        for block, (x, rotation) in zip(self.blocks, cache):
            g = grad_coords[:, block.start:block.stop]
            if block.trans_offset >= 0:
                grad[:, block.trans_offset:block.trans_offset + 3] = g.sum(axis=1)
            if block.rot_offset >= 0:
                o = block.rot_offset
                grad_rotation = np.einsum("bni,bnj->bij", g, x - block.pivot)
                d_v1, d_v2 = gram_schmidt_backward(
                    params[:, o:o + 3], params[:, o + 3:o + 6], grad_rotation)
                grad[:, o:o + 3] = d_v1
                grad[:, o + 3:o + 6] = d_v2
                g = np.einsum("bji,bnj->bni", rotation, g)
            if block.alpha_offset >= 0:
                grad[:, block.alpha_offset:block.alpha_offset + block.n_modes] = \
                    g.reshape(batch, -1) @ block.modes
        return grad

    def loss_and_grad(self, params: np.ndarray, targets: np.ndarray,
                      rotations: np.ndarray, translations: np.ndarray,
                      center: np.ndarray | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
        """Per-image objective and its gradient with respect to the parameters.

        The objective is the pixel MSE, plus the displacement ridge around
        center when prior_weight is nonzero. In multi-pass fits the first
        pass (center is None) stays unregularized so that the pooled center
        estimated from it is unbiased; later passes shrink toward that
        center. Single-pass fits shrink toward the identity latents.
        """
        coords, cache = self.decode_coords(params)
        rendered = splat_images(coords, rotations, translations, self.imaging)
        residual = rendered - targets
        loss = np.mean(residual * residual, axis=(1, 2))
        upstream = residual * (2.0 / residual[0].size)
        grad_coords = splat_gradients(coords, rotations, translations, self.imaging, upstream)
        grad = self.backprop(params, cache, grad_coords)
        weight = self.config.prior_weight
        if weight > 0:
            if center is None:
                if self.config.passes > 1:
                    return loss, grad
                center = self.prior_center
            offset = (params - center) / self.param_scales
            loss = loss + weight * np.sum(offset * offset, axis=1)
            grad = grad + (2.0 * weight) * offset / self.param_scales
        return loss, grad

    def latents_json(self, params: np.ndarray) -> dict:
        """JSON-ready latent description of a single image's parameters (P,)."""
        if self.whole_modes is not None:
            return {"whole": {"mode_weights": params.tolist()}}
        chains = []
        for block in self.blocks:
            if block.alpha_offset >= 0:
                alpha = params[block.alpha_offset:block.alpha_offset + block.n_modes]
            else:
                alpha = np.zeros(0)
            if block.rot_offset >= 0:
                o = block.rot_offset
                v1 = params[o:o + 3]
                v2 = params[o + 3:o + 6]
            else:
                v1 = np.array([1.0, 0.0, 0.0])
                v2 = np.array([0.0, 1.0, 0.0])
            if block.trans_offset >= 0:
                t = params[block.trans_offset:block.trans_offset + 3]
            else:
                t = np.zeros(3)
            chains.append({
                "chain_id": block.chain_id,
                "mode_weights": alpha.tolist(),
                "v1": v1.tolist(),
                "v2": v2.tolist(),
                "translation": t.tolist(),
                "pivot": block.pivot.tolist(),
            })
        return {"chains": chains}

    def coords_from_params(self, params: np.ndarray) -> np.ndarray:
        """Decoded coordinates (N, 3) of a single parameter vector (P,)."""
        return self.decode_coords(np.asarray(params, dtype=np.float64)[None])[0][0]


@dataclass
class FitEntry:
    """Outcome of fitting one image."""

    index: int
    latents: dict | None
    final_mse: float | None
    iterations: int
    loss_trace: list[float]
    rmsd_to_gt: float | None = None
    error: str | None = None
    params: np.ndarray | None = field(default=None, repr=False, compare=False)

    def to_json_dict(self) -> dict:
        return {
            "index": self.index,
            "latents": self.latents,
            "final_mse": self.final_mse,
            "iterations": self.iterations,
            "loss_trace": self.loss_trace,
            "rmsd_to_gt": self.rmsd_to_gt,
            "error": self.error,
        }


@dataclass
class FitReport:
    """Per-image fit entries plus aggregate statistics."""

    config: dict
    entries: list[FitEntry]
    summary: dict

    def to_json_dict(self) -> dict:
        return {
            "config": self.config,
            "entries": [entry.to_json_dict() for entry in self.entries],
            "summary": self.summary,
        }


def _adam_descent(model: DecoderModel, params: np.ndarray, targets: np.ndarray,
                  rotations: np.ndarray, translations: np.ndarray, config: FitConfig,
                  center: np.ndarray | None = None):
    """Lockstep adaptive-moment descent over a batch of independent problems.

    Per-image early stopping freezes a row without touching the others; all
    state updates are elementwise per row, so each image's trajectory is
    independent of its batch companions.
    """
    batch = params.shape[0]
    total = config.iterations
    moment1 = np.zeros_like(params)
    moment2 = np.zeros_like(params)
    alive = np.ones(batch, dtype=bool)
    diverged = np.zeros(batch, dtype=bool)
    diverged_iter = np.full(batch, -1)
    iterations_used = np.zeros(batch, dtype=int)
    traces = np.zeros((batch, total + 1))
    step_span = max(total - 1, 1)
    fallback = model.initial_params(1)[0]

    for t in range(total + 1):
        finite_rows = np.isfinite(params).all(axis=1)
        if finite_rows.all():
            loss, grad = model.loss_and_grad(params, targets, rotations, translations, center)
        else:
            safe = np.where(finite_rows[:, None], params, fallback)
            loss, grad = model.loss_and_grad(safe, targets, rotations, translations, center)
            loss = np.where(finite_rows, loss, np.nan)
        traces[:, t] = loss
        bad = alive & ~np.isfinite(loss)
        if bad.any():
            diverged |= bad
            diverged_iter[bad] = t
            alive &= ~bad
        grad_norm = np.linalg.norm(grad, axis=1)
        stopped = alive & (grad_norm < config.grad_tol)
        alive &= ~stopped
        if t == total or not alive.any():
            break
        moment1 = _ADAM_BETA1 * moment1 + (1 - _ADAM_BETA1) * grad
        moment2 = _ADAM_BETA2 * moment2 + (1 - _ADAM_BETA2) * grad * grad
        m_hat = moment1 / (1 - _ADAM_BETA1 ** (t + 1))
        v_hat = moment2 / (1 - _ADAM_BETA2 ** (t + 1))
        step = config.step * (1 - config.step_decay * t / step_span)
        delta = step * model.param_scales * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        params = np.where(alive[:, None], params - delta, params)
        iterations_used[alive] = t + 1
    return params, traces, iterations_used, diverged, diverged_iter


def _monotone_descent(model: DecoderModel, params: np.ndarray, targets: np.ndarray,
                      rotations: np.ndarray, translations: np.ndarray, config: FitConfig,
                      center: np.ndarray | None = None):
    """Backtracking gradient descent; the accepted-loss sequence never increases."""
    batch = params.shape[0]
    assert batch == 1, "monotone mode runs images one at a time"
    total = config.iterations
    loss, grad = model.loss_and_grad(params, targets, rotations, translations, center)
    if not np.isfinite(loss[0]):
        traces = np.full((1, total + 1), np.nan)
        return params, traces, np.zeros(1, dtype=int), \
            np.ones(1, dtype=bool), np.zeros(1, dtype=int)
    trace = [loss[0]]
    step = config.step
    used = 0
    for t in range(total):
        if np.linalg.norm(grad) < config.grad_tol:
            break
        accepted = False
        while step >= 1e-18:
            candidate = params - step * model.param_scales ** 2 * grad
            c_loss, c_grad = model.loss_and_grad(candidate, targets, rotations,
                                                 translations, center)
            if np.isfinite(c_loss[0]) and c_loss[0] <= loss[0]:
                params, loss, grad = candidate, c_loss, c_grad
                step *= 1.5
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        trace.append(loss[0])
        used = t + 1
    traces = np.full((1, total + 1), np.nan)
    traces[0, :len(trace)] = trace
    return params, traces, np.asarray([used]), np.zeros(1, dtype=bool), np.full(1, -1)


def _consensus_stage(model: DecoderModel, targets: np.ndarray, rotations: np.ndarray,
                     translations: np.ndarray, config: FitConfig,
                     params: np.ndarray, iterations: int,
                     mask: np.ndarray | None = None) -> np.ndarray:
    """One Adam run of the shared-parameter fit over round-robin minibatches."""
    ranges = _batch_ranges(targets.shape[0], config.batch_size)
    if not ranges:
        return params
    moment1 = np.zeros_like(params)
    moment2 = np.zeros_like(params)
    step_span = max(iterations - 1, 1)
    for t in range(iterations):
        sel = ranges[t % len(ranges)]
        tiled = np.tile(params, (sel.stop - sel.start, 1))
        loss, grads = model.loss_and_grad(
            tiled, targets[sel.start:sel.stop],
            rotations[sel.start:sel.stop], translations[sel.start:sel.stop])
        if not np.all(np.isfinite(loss)):
            break
        grad = grads.mean(axis=0)
        if mask is not None:
            grad = grad * mask
        if np.linalg.norm(grad) < config.grad_tol:
            break
        moment1 = _ADAM_BETA1 * moment1 + (1 - _ADAM_BETA1) * grad
        moment2 = _ADAM_BETA2 * moment2 + (1 - _ADAM_BETA2) * grad * grad
        m_hat = moment1 / (1 - _ADAM_BETA1 ** (t + 1))
        v_hat = moment2 / (1 - _ADAM_BETA2 ** (t + 1))
        step = config.step * (1 - config.step_decay * t / step_span)
        candidate = params - step * model.param_scales * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
        if not np.all(np.isfinite(candidate)):
            break
        params = candidate
    return params


def _consensus_fit(model: DecoderModel, targets: np.ndarray, rotations: np.ndarray,
                   translations: np.ndarray, config: FitConfig) -> np.ndarray:
    """Fit one shared parameter vector against the whole stack.

    Round-robin minibatch Adam: each iteration renders one batch and steps the
    shared parameters along the batch-averaged gradient, so corrections common
    to every image accumulate while per-image noise averages out. When the
    parameterization mixes rigid-body and mode-weight blocks, the first half
    of the budget aligns the rigid blocks alone (coarse-to-fine registration);
    deformations then refine from a rigidly aligned start instead of
    compensating misalignment. Runs unregularized; the result seeds the
    per-image prior of later passes.
    """
    params = model.initial_params(1)[0]
    rigid_mask = np.ones_like(params)
    for block in model.blocks:
        if block.alpha_offset >= 0:
            rigid_mask[block.alpha_offset:block.alpha_offset + block.n_modes] = 0.0
    # each iteration renders a single batch, so the consensus pass is cheap
    # next to a per-image pass; give it twice the per-image budget (with a
    # floor that keeps the coarse alignment's travel range intact even when
    # per-image budgets are trimmed) so the stage split leaves each stage a
    # full iteration count
    total = max(2 * config.iterations, 300)
    if rigid_mask.all() or not rigid_mask.any():
        return _consensus_stage(model, targets, rotations, translations,
                                config, params, total)
    first = total // 2
    params = _consensus_stage(model, targets, rotations, translations,
                              config, params, first, mask=rigid_mask)
    return _consensus_stage(model, targets, rotations, translations,
                            config, params, total - first)


def _fit_batch(model: DecoderModel, indices: Sequence[int], targets: np.ndarray,
               rotations: np.ndarray, translations: np.ndarray,
               config: FitConfig, center: np.ndarray | None = None) -> list[FitEntry]:
    """Fit one fixed batch of images, including restarts and best-of selection.

    center, when given, is both the starting point and the ridge center.
    """
    batch = len(indices)
    targets = np.asarray(targets, dtype=np.float64)
    descent = _monotone_descent if config.monotone else _adam_descent

    best_params = None
    best_loss = np.full(batch, np.inf)
    best_traces = None
    best_iters = np.zeros(batch, dtype=int)
    best_diverged = np.ones(batch, dtype=bool)
    best_div_iter = np.full(batch, -1)

    for restart in range(config.restarts):
        if center is None:
            params = model.initial_params(batch)
        else:
            params = np.tile(center, (batch, 1))
        if restart > 0:
            for row, image_index in enumerate(indices):
                rng = np.random.default_rng([config.seed, image_index, restart])
                params[row] = model.perturb_params(params[row][None], rng)[0]
        params, traces, iters, diverged, div_iter = descent(
            model, params, targets, rotations, translations, config, center)
        final = np.array([traces[row, min(iters[row], config.iterations)]
                          for row in range(batch)])
        final = np.where(diverged, np.inf, final)
        better = final < best_loss
        if best_params is None:
            best_params = params.copy()
            best_traces = traces.copy()
            take = np.ones(batch, dtype=bool)
        else:
            take = better
        best_params[take] = params[take]
        best_traces[take] = traces[take]
        best_loss[take] = final[take]
        best_iters[take] = iters[take]
        improved_or_first = take | (restart == 0)
        best_diverged[improved_or_first] = diverged[improved_or_first]
        best_div_iter[improved_or_first] = div_iter[improved_or_first]

    entries = []
    for row, image_index in enumerate(indices):
        if best_diverged[row]:
            entries.append(FitEntry(
                index=image_index, latents=None, final_mse=None,
                iterations=int(best_iters[row]),
                loss_trace=[],
                error=(f"non-finite loss at iteration {int(best_div_iter[row])} "
                       f"with step {config.step}"),
            ))
            continue
        n_trace = int(best_iters[row]) + 1
        entries.append(FitEntry(
            index=image_index,
            latents=model.latents_json(best_params[row]),
            final_mse=float(best_loss[row]),
            iterations=int(best_iters[row]),
            loss_trace=[float(v) for v in best_traces[row, :n_trace]],
            params=best_params[row].copy(),
        ))
    return entries


def structure_from_latents(reference: AtomicStructure, latents: Mapping,
                           bases: Mapping[str, NormalModeBasis] | None = None,
                           whole: NormalModeBasis | None = None) -> AtomicStructure:
    """Recompose a structure from a fit entry's JSON latent description.

    Chain-mode latents need per-chain bases only when mode weights are present;
    whole-structure latents need the whole-structure basis.
    """
    if "whole" in latents:
        if whole is None:
            raise ConfigError("whole-structure latents need the whole-structure basis")
        alpha = np.asarray(latents["whole"]["mode_weights"], dtype=np.float64)
        if alpha.shape[0] > whole.n_modes:
            raise DimensionMismatchError(
                f"latents carry {alpha.shape[0]} weights, basis has {whole.n_modes} modes")
        flat = whole.reference + whole.modes[:, :alpha.shape[0]] @ alpha
        return reference.with_coords(flat.reshape(-1, 3))

    chains = latents["chains"]
    if len(chains) != reference.n_chains:
        raise DimensionMismatchError(
            f"latents cover {len(chains)} chains, structure has {reference.n_chains}")
    coords = np.empty_like(reference.coords)
    for block, cid in zip(chains, reference.chain_ids):
        chain_slice = reference.chain_slice(cid)
        alpha = np.asarray(block["mode_weights"], dtype=np.float64)
        if alpha.size:
            if bases is None or cid not in bases:
                raise ConfigError(f"latents for chain {cid!r} carry mode weights but no basis given")
            basis = bases[cid]
            if alpha.shape[0] > basis.n_modes:
                raise DimensionMismatchError(
                    f"chain {cid!r}: {alpha.shape[0]} weights vs {basis.n_modes} modes")
            deformed = (basis.reference + basis.modes[:, :alpha.shape[0]] @ alpha).reshape(-1, 3)
        else:
            deformed = reference.coords[chain_slice]
        transform = ChainTransform.from_vectors(
            v1=np.asarray(block["v1"], dtype=np.float64),
            v2=np.asarray(block["v2"], dtype=np.float64),
            translation=np.asarray(block["translation"], dtype=np.float64),
            pivot=np.asarray(block["pivot"], dtype=np.float64),
        )
        coords[chain_slice] = apply_chain_transform(deformed, transform)
    return reference.with_coords(coords)


def build_bases(source_reference: AtomicStructure, config: FitConfig,
                enm: ENMConfig | None = None):
    """Normal-mode bases matching the fit mode; None when no modes are used."""
    if not config.uses_modes:
        return None
    if enm is None:
        enm = ENMConfig(num_modes=config.num_modes)
    if enm.num_modes < config.num_modes:
        raise ConfigError("enm.num_modes must be >= config.num_modes")
    if config.mode == "N_whole":
        return whole_basis(source_reference, enm)
    return chain_bases(source_reference, enm)


def _lowpass_setup(targets: np.ndarray, imaging: ImagingConfig,
                   config: FitConfig) -> tuple[np.ndarray, ImagingConfig]:
    """Smooth the targets and widen the render PSF to match."""
    if config.lowpass_px is None:
        return targets, imaging
    smoothed = gaussian_filter(targets, sigma=(0, config.lowpass_px, config.lowpass_px),
                               mode="constant")
    base = imaging.psf_sigma if imaging.psf_sigma is not None else 0.0
    effective = math.sqrt(base * base + config.lowpass_px ** 2)
    return smoothed, replace(imaging, psf_sigma=effective)


def fit_image(image: np.ndarray, pose: tuple[np.ndarray, np.ndarray],
              source_reference: AtomicStructure, bases,
              config: FitConfig, imaging: ImagingConfig) -> FitEntry:
    """Fit a single image; raises DivergenceError on non-finite loss."""
    targets = np.asarray(image, dtype=np.float64)[None]
    targets, imaging = _lowpass_setup(targets, imaging, config)
    model = DecoderModel(source_reference, bases, config, imaging)
    rotation, translation = pose
    rotations = np.asarray(rotation, dtype=np.float64)[None]
    translations = np.asarray(translation, dtype=np.float64).reshape(1, 2)
    center = None
    for _ in range(config.passes):
        entries = _fit_batch(model, [0], targets, rotations, translations, config, center)
        entry = entries[0]
        if entry.error is not None:
            raise DivergenceError(entry.error)
        center = entry.params
    return entry


def _batch_ranges(n: int, batch_size: int) -> list[range]:
    return [range(start, min(start + batch_size, n)) for start in range(0, n, batch_size)]


def fit_stack(stack: ImageStack, source_reference: AtomicStructure, config: FitConfig,
              bases=None, gt_reference: AtomicStructure | None = None,
              gt_bases: Mapping[str, NormalModeBasis] | None = None,
              enm: ENMConfig | None = None, threads: int = 1) -> FitReport:
    """Fit every image of a stack independently and aggregate the results.

    Per-image divergences become failure records instead of aborting the run.
    When the stack carries ground-truth latents and gt_reference/gt_bases are
    given, per-image RMSD against the ground-truth conformation is reported.
    """
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    if bases is None:
        bases = build_bases(source_reference, config, enm)
    n = stack.n_images
    targets = stack.images.astype(np.float64)
    targets, imaging = _lowpass_setup(targets, stack.config, config)
    model = DecoderModel(source_reference, bases, config, imaging)

    entries: list[FitEntry] = [None] * n  # type: ignore[list-item]
    ranges = _batch_ranges(n, config.batch_size)
    center: np.ndarray | None = None

    for pass_index in range(config.passes):
        if config.passes > 1 and pass_index == 0:
            # stack-wide consensus fit; becomes start point and prior center
            # for the per-image passes (single-threaded, so thread-invariant)
            center = _consensus_fit(model, targets, stack.rotations,
                                    stack.translations, config)
            continue

        def run_batch(indices: range) -> list[FitEntry]:
            return _fit_batch(model, list(indices), targets[indices.start:indices.stop],
                              stack.rotations[indices.start:indices.stop],
                              stack.translations[indices.start:indices.stop],
                              config, center)

        if threads == 1 or len(ranges) <= 1:
            batch_results = [run_batch(r) for r in ranges]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                batch_results = list(pool.map(run_batch, ranges))
        for result in batch_results:
            for entry in result:
                entries[entry.index] = entry
        if pass_index + 1 == config.passes:
            break
        fitted = [e.params for e in entries if e.error is None and e.params is not None]
        if not fitted:
            break
        # pooled center for the next pass; entries are already index-ordered
        center = np.mean(np.asarray(fitted), axis=0)

    with_gt = (stack.gt_latents is not None and gt_reference is not None
               and gt_bases is not None)
    if with_gt:
        for entry in entries:
            if entry.error is not None or entry.params is None:
                continue
            gt_structure = compose_structure(
                gt_reference, gt_bases, stack.gt_latents[entry.index])
            fitted = model.coords_from_params(entry.params)
            delta = fitted - gt_structure.coords
            entry.rmsd_to_gt = float(np.sqrt(np.mean(np.sum(delta * delta, axis=1))))

    ok = [e for e in entries if e.error is None]
    failures = [e for e in entries if e.error is not None]
    summary: dict = {
        "n_images": n,
        "n_failed": len(failures),
        "mean_final_mse": float(np.mean([e.final_mse for e in ok])) if ok else None,
    }
    rmsds = [e.rmsd_to_gt for e in ok if e.rmsd_to_gt is not None]
    if rmsds:
        arr = np.asarray(rmsds)
        summary["rmsd_mean"] = float(arr.mean())
        summary["rmsd_median"] = float(np.median(arr))
        summary["rmsd_std"] = float(arr.std())
        summary["rmsd_max"] = float(arr.max())
    return FitReport(config=config.to_json_dict(), entries=entries, summary=summary)

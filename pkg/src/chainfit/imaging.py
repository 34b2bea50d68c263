"""Weak-phase style image formation: Gaussian-blob projection with gradients.

Each atom contributes a unit-amplitude isotropic 3D Gaussian; an isotropic
Gaussian projects along the beam axis to a 2D Gaussian with the same sigma, so
images are evaluated in closed form without a voxel grid. The projected center
of atom j under pose (R, t) is

    u_j = (R x_j)_xy / pixel_size + (D // 2) + t      (pixels; x -> column, y -> row)

and the clean image is I(p) = sum_j exp(-|p - u_j|^2 / (2 sigma_px^2)) with
sigma_px = blob_sigma / pixel_size. Evaluation is windowed: pixels farther
than window_sigmas standard deviations from an atom center are exact zeros.
An optional isotropic Gaussian PSF is applied after projection, and additive
Gaussian noise is calibrated against the mean squared pixel value.

Rendering and its gradients are batched over a leading image axis; all
arithmetic is elementwise per image, so results never depend on how images
are grouped into batches by callers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, UndefinedSNRError
from .rigid import LatentState, _check_rotation

_CLIP = 1.0e6  # pixel-coordinate clamp before integer window placement


@dataclass(frozen=True)
class ImagingConfig:
    """Camera and density parameters for the renderer.

    image_size : D, image is D x D pixels.
    pixel_size : angstroms per pixel.
    blob_sigma : per-atom Gaussian width, angstroms.
    psf_sigma : optional lens blur width, pixels.
    snr_db : optional target signal-to-noise ratio for added noise, dB.
    window_sigmas : per-atom evaluation radius in units of blob_sigma;
        pixels beyond it are exact zeros (default 7, tail < 3e-11).
    """

    image_size: int = 128
    pixel_size: float = 1.0
    blob_sigma: float = 1.5
    psf_sigma: float | None = None
    snr_db: float | None = None
    window_sigmas: float = 7.0

    def __post_init__(self) -> None:
        if not (isinstance(self.image_size, int) and self.image_size >= 16):
            raise ConfigError(f"image_size must be an integer >= 16, got {self.image_size}")
        if not self.pixel_size > 0:
            raise ConfigError(f"pixel_size must be positive, got {self.pixel_size}")
        if not self.blob_sigma > 0:
            raise ConfigError(f"blob_sigma must be positive, got {self.blob_sigma}")
        if self.psf_sigma is not None and not self.psf_sigma > 0:
            raise ConfigError(f"psf_sigma must be positive or None, got {self.psf_sigma}")
        if not self.window_sigmas >= 3.0:
            raise ConfigError(f"window_sigmas must be >= 3, got {self.window_sigmas}")

    @property
    def sigma_px(self) -> float:
        return self.blob_sigma / self.pixel_size

    @property
    def window_radius(self) -> int:
        return max(2, math.ceil(self.window_sigmas * self.sigma_px))


def _as_batched(coords: np.ndarray, rotations: np.ndarray,
                translations: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    coords = np.asarray(coords, dtype=np.float64)
    rotations = np.asarray(rotations, dtype=np.float64)
    translations = np.asarray(translations, dtype=np.float64)
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ValueError(f"coords must be (B, N, 3), got {coords.shape}")
    b = coords.shape[0]
    if rotations.shape != (b, 3, 3):
        raise ValueError(f"rotations must be ({b}, 3, 3), got {rotations.shape}")
    if translations.shape != (b, 2):
        raise ValueError(f"translations must be ({b}, 2), got {translations.shape}")
    return coords, rotations, translations


def _window_geometry(coords, rotations, translations, config):
    """Projected centers plus the windowed Gaussian factors shared by both passes."""
    d = config.image_size
    sigma = config.sigma_px
    r = config.window_radius
    w = 2 * r + 1
    pad = r + 1
    dp = d + 2 * pad
    center = d // 2

    projected = np.einsum("bij,bnj->bni", rotations, coords)
    u = projected[:, :, :2] / config.pixel_size
    u += center + translations[:, None, :]
    if not np.all(np.isfinite(u)):
        raise ValueError("projected coordinates are non-finite")

    # Window placement in the padded frame; clamping only activates for atoms
    # already far outside the image, whose Gaussian factors vanish anyway.
    base = np.floor(np.clip(u, -_CLIP, _CLIP)).astype(np.int64) - r + pad
    np.clip(base, 0, dp - w, out=base)
    offsets = np.arange(w)
    cols = base[:, :, 0, None] + offsets          # (B, N, W), padded-frame columns
    rows = base[:, :, 1, None] + offsets
    dx = (cols - pad) - u[:, :, 0, None]          # pixel position minus atom center
    dy = (rows - pad) - u[:, :, 1, None]
    scale = -0.5 / (sigma * sigma)
    gx = np.exp(scale * dx * dx)
    gy = np.exp(scale * dy * dy)
    return u, cols, rows, dx, dy, gx, gy, pad, dp


def splat_images(coords: np.ndarray, rotations: np.ndarray, translations: np.ndarray,
                 config: ImagingConfig) -> np.ndarray:
    """Render a batch of images: coords (B, N, 3), poses per image -> (B, D, D)."""
    coords, rotations, translations = _as_batched(coords, rotations, translations)
    b = coords.shape[0]
    d = config.image_size
    _, cols, rows, _, _, gx, gy, pad, dp = _window_geometry(
        coords, rotations, translations, config)

    patches = gy[:, :, :, None] * gx[:, :, None, :]          # (B, N, W, W)
    image_index = np.arange(b, dtype=np.int64)[:, None, None]
    flat = ((image_index * dp + rows)[:, :, :, None] * dp + cols[:, :, None, :])
    canvas = np.bincount(flat.ravel(), weights=patches.ravel(),
                         minlength=b * dp * dp).reshape(b, dp, dp)
    images = canvas[:, pad:pad + d, pad:pad + d]
    if config.psf_sigma is not None:
        images = gaussian_filter(images, sigma=(0.0, config.psf_sigma, config.psf_sigma),
                                 mode="constant")
    return np.ascontiguousarray(images)


def splat_gradients(coords: np.ndarray, rotations: np.ndarray, translations: np.ndarray,
                    config: ImagingConfig, upstream: np.ndarray) -> np.ndarray:
    """Backpropagate d(loss)/d(image) to per-atom coordinate gradients.

    upstream is (B, D, D); returns (B, N, 3) gradients with respect to the
    pre-pose atom coordinates (the pose rotation is part of the chain).
    """
    coords, rotations, translations = _as_batched(coords, rotations, translations)
    b, n = coords.shape[:2]
    d = config.image_size
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (b, d, d):
        raise ValueError(f"upstream must be ({b}, {d}, {d}), got {upstream.shape}")
    _, cols, rows, dx, dy, gx, gy, pad, dp = _window_geometry(
        coords, rotations, translations, config)

    if config.psf_sigma is not None:
        # The Gaussian PSF is self-adjoint, so its backward pass is itself.
        upstream = gaussian_filter(upstream, sigma=(0.0, config.psf_sigma, config.psf_sigma),
                                   mode="constant")
    padded = np.zeros((b, dp, dp))
    padded[:, pad:pad + d, pad:pad + d] = upstream
    image_index = np.arange(b, dtype=np.int64)[:, None, None, None]
    patches = padded[image_index, rows[:, :, :, None], cols[:, :, None, :]]  # (B, N, W, W)

    inv_var = 1.0 / (config.sigma_px * config.sigma_px)
    row_sum = np.einsum("bnyx,bny->bnx", patches, gy)
    du_x = np.einsum("bnx,bnx->bn", row_sum, gx * dx) * inv_var
    col_sum = np.einsum("bnyx,bnx->bny", patches, gx)
    du_y = np.einsum("bny,bny->bn", col_sum, gy * dy) * inv_var

    grad_projected = np.zeros((b, n, 3))
    grad_projected[:, :, 0] = du_x
    grad_projected[:, :, 1] = du_y
    grad_projected /= config.pixel_size
    return np.einsum("bji,bnj->bni", rotations, grad_projected)


def _pose_arrays(pose: tuple[np.ndarray, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    rotation, translation = pose
    rotation = _check_rotation(rotation)
    translation = np.asarray(translation, dtype=np.float64).reshape(2)
    return rotation, translation


def _structure_coords(structure) -> np.ndarray:
    coords = getattr(structure, "coords", structure)
    return np.asarray(coords, dtype=np.float64)


def render_clean(structure, pose: tuple[np.ndarray, np.ndarray],
                 config: ImagingConfig) -> np.ndarray:
    """Noise-free D x D image of one structure under one pose."""
    rotation, translation = _pose_arrays(pose)
    coords = _structure_coords(structure)
    return splat_images(coords[None], rotation[None], translation[None], config)[0]


def render_gradients(structure, pose: tuple[np.ndarray, np.ndarray],
                     config: ImagingConfig, upstream: np.ndarray) -> np.ndarray:
    """Per-atom coordinate gradients of sum(upstream * image)."""
    rotation, translation = _pose_arrays(pose)
    coords = _structure_coords(structure)
    return splat_gradients(coords[None], rotation[None], translation[None],
                           config, np.asarray(upstream)[None])[0]


def count_out_of_view(structure, pose: tuple[np.ndarray, np.ndarray],
                      config: ImagingConfig) -> int:
    """Number of atoms whose projected center falls outside the image."""
    rotation, translation = _pose_arrays(pose)
    coords = _structure_coords(structure)
    projected = coords @ rotation.T
    u = projected[:, :2] / config.pixel_size + config.image_size // 2 + translation
    inside = (u >= 0) & (u <= config.image_size - 1)
    return int(np.count_nonzero(~inside.all(axis=1)))


def add_noise(image: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise with variance P_signal / 10^(snr_db/10).

    P_signal is the mean squared pixel value of the input image.
    """
    image = np.asarray(image, dtype=np.float64)
    power = float(np.mean(image * image))
    if not np.isfinite(power) or power <= 0:
        raise UndefinedSNRError("signal power is zero; SNR-calibrated noise is undefined")
    sigma = math.sqrt(power * 10.0 ** (-snr_db / 10.0))
    return image + rng.normal(0.0, sigma, size=image.shape)


@dataclass
class ImageStack:
    """A simulated dataset: images, per-image poses, and generation metadata.

    images : (n, D, D) float32.
    rotations : (n, 3, 3) global pose rotations.
    translations : (n, 2) in-plane shifts, pixels.
    config : the ImagingConfig used for rendering (includes snr_db).
    gt_latents : optional per-image ground-truth LatentState.
    morph_s : optional per-image morph parameter in [0, 1].
    """

    images: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    config: ImagingConfig
    seed: int | None = None
    gt_latents: list[LatentState] | None = None
    morph_s: np.ndarray | None = None
    out_of_view_atoms: int = 0

    def __post_init__(self) -> None:
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        if self.images.ndim != 3 or self.images.shape[1] != self.images.shape[2]:
            raise ValueError(f"images must be (n, D, D), got {self.images.shape}")
        if self.images.shape[1] != self.config.image_size:
            raise ValueError("image shape does not match config.image_size")
        n = self.images.shape[0]
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.translations = np.ascontiguousarray(self.translations, dtype=np.float64)
        if self.rotations.shape != (n, 3, 3):
            raise ValueError(f"rotations must be ({n}, 3, 3), got {self.rotations.shape}")
        if self.translations.shape != (n, 2):
            raise ValueError(f"translations must be ({n}, 2), got {self.translations.shape}")
        for rotation in self.rotations:
            _check_rotation(rotation)
        if self.gt_latents is not None and len(self.gt_latents) != n:
            raise ValueError("gt_latents length does not match image count")
        if self.morph_s is not None:
            self.morph_s = np.ascontiguousarray(self.morph_s, dtype=np.float64)
            if self.morph_s.shape != (n,):
                raise ValueError(f"morph_s must be ({n},), got {self.morph_s.shape}")

    @property
    def n_images(self) -> int:
        return self.images.shape[0]


_POSE_CONVENTION = ("u = (R @ x)_xy / pixel_size + D//2 + t; "
                    "x -> column, y -> row; beam along +z")


def save_stack(stack: ImageStack, directory: str | Path) -> None:
    """Write the on-disk container: meta.json, images.f32, poses.json, gt_latents.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "chainfit-stack-v1",
        "n_images": stack.n_images,
        "image_size": stack.config.image_size,
        "pixel_size": stack.config.pixel_size,
        "blob_sigma": stack.config.blob_sigma,
        "psf_sigma": stack.config.psf_sigma,
        "snr_db": stack.config.snr_db,
        "window_sigmas": stack.config.window_sigmas,
        "seed": stack.seed,
        "pose_convention": _POSE_CONVENTION,
        "out_of_view_atoms": stack.out_of_view_atoms,
    }
    if stack.morph_s is not None:
        meta["morph_s"] = stack.morph_s.tolist()
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (directory / "images.f32").write_bytes(stack.images.astype("<f4").tobytes())
    poses = {
        "rotations": stack.rotations.tolist(),
        "translations": stack.translations.tolist(),
    }
    (directory / "poses.json").write_text(json.dumps(poses, sort_keys=True) + "\n")
    if stack.gt_latents is not None:
        payload = [latent.to_json_dict() for latent in stack.gt_latents]
        (directory / "gt_latents.json").write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_stack(directory: str | Path) -> ImageStack:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"not an image stack directory (no meta.json): {directory}")
    meta = json.loads(meta_path.read_text())
    config = ImagingConfig(
        image_size=int(meta["image_size"]),
        pixel_size=float(meta["pixel_size"]),
        blob_sigma=float(meta["blob_sigma"]),
        psf_sigma=None if meta.get("psf_sigma") is None else float(meta["psf_sigma"]),
        snr_db=None if meta.get("snr_db") is None else float(meta["snr_db"]),
        window_sigmas=float(meta.get("window_sigmas", 7.0)),
    )
    n = int(meta["n_images"])
    d = config.image_size
    raw = (directory / "images.f32").read_bytes()
    images = np.frombuffer(raw, dtype="<f4")
    if images.size != n * d * d:
        raise ValueError(f"images.f32 holds {images.size} floats, expected {n * d * d}")
    images = images.reshape(n, d, d).copy()
    poses = json.loads((directory / "poses.json").read_text())
    gt_path = directory / "gt_latents.json"
    gt_latents = None
    if gt_path.exists():
        gt_latents = [LatentState.from_json_dict(entry)
                      for entry in json.loads(gt_path.read_text())]
    morph_s = meta.get("morph_s")
    return ImageStack(
        images=images,
        rotations=np.asarray(poses["rotations"], dtype=np.float64),
        translations=np.asarray(poses["translations"], dtype=np.float64),
        config=config,
        seed=meta.get("seed"),
        gt_latents=gt_latents,
        morph_s=None if morph_s is None else np.asarray(morph_s, dtype=np.float64),
        out_of_view_atoms=int(meta.get("out_of_view_atoms", 0)),
    )

"""Synthetic heterogeneous dataset generation.

Each image gets its own conformation: per-chain mode weights drawn from a
two-component (or general) Gaussian mixture and scaled by sqrt(N / K_gen),
plus a small random rotation of each chain about its center of mass. The
global pose is uniform over SO(3) with an in-plane shift, and noise is
calibrated to a target SNR.

Every image consumes exactly one RNG stream derived from
(seed, split index, image index), so generation order and worker count can
never change the output bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CapacityError, ConfigError, DimensionMismatchError
from .imaging import ImageStack, ImagingConfig, add_noise, count_out_of_view, render_clean, save_stack
from .nma import ENMConfig, NormalModeBasis, chain_bases, save_basis
from .rigid import ChainTransform, LatentState, compose_structure
from .structure import AtomicStructure, center_of_mass, write_structure_file

_SPLITS = ("train", "val", "test")
_MORPH_STREAM = 3  # split indices 0..2 belong to train/val/test


@dataclass(frozen=True)
class GMMComponent:
    weight: float
    mean: float
    std: float

    def __post_init__(self) -> None:
        if not 0 <= self.weight <= 1:
            raise ConfigError(f"component weight must be in [0, 1], got {self.weight}")
        if not self.std > 0:
            raise ConfigError(f"component std must be positive, got {self.std}")


@dataclass(frozen=True)
class HeterogeneityRecipe:
    """Parameters of the synthetic conformational distribution.

    num_modes : K_gen, number of softest modes excited per chain.
    gmm : mixture components for the raw weight draw d; the applied weight is
        sqrt(N / K_gen) * d with N the total atom count.
    rotation_half_angles_deg : per-axis half-angle; each chain is rotated about
        its CoM by angles drawn uniformly in [-theta, +theta] per axis.
    """

    num_modes: int = 15
    gmm: tuple[GMMComponent, ...] = (
        GMMComponent(0.5, 0.0, 0.25),
        GMMComponent(0.5, 2.5, 0.25),
    )
    rotation_half_angles_deg: tuple[float, float, float] = (5.0, 5.0, 5.0)
    train_count: int = 50000
    val_count: int = 5000
    test_count: int = 5000
    snr_db: float | None = -20.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (isinstance(self.num_modes, int) and self.num_modes >= 1):
            raise ConfigError(f"num_modes must be a positive integer, got {self.num_modes}")
        if not self.gmm:
            raise ConfigError("gmm must have at least one component")
        total = sum(c.weight for c in self.gmm)
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"gmm weights must sum to 1, got {total}")
        if len(self.rotation_half_angles_deg) != 3:
            raise ConfigError("rotation_half_angles_deg needs one value per axis")
        if any(theta < 0 for theta in self.rotation_half_angles_deg):
            raise ConfigError("rotation half-angles must be non-negative")
        for name in ("train_count", "val_count", "test_count"):
            count = getattr(self, name)
            if not (isinstance(count, int) and count >= 1):
                raise ConfigError(f"{name} must be a positive integer, got {count}")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")

    @property
    def counts(self) -> dict[str, int]:
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}

    def to_json_dict(self) -> dict:
        return {
            "num_modes": self.num_modes,
            "gmm": [{"weight": c.weight, "mean": c.mean, "std": c.std} for c in self.gmm],
            "rotation_half_angles_deg": list(self.rotation_half_angles_deg),
            "counts": self.counts,
            "snr_db": self.snr_db,
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping) -> "HeterogeneityRecipe":
        kwargs: dict = {}
        if "num_modes" in data:
            kwargs["num_modes"] = int(data["num_modes"])
        if "gmm" in data:
            kwargs["gmm"] = tuple(
                GMMComponent(float(c["weight"]), float(c["mean"]), float(c["std"]))
                for c in data["gmm"]
            )
        if "rotation_half_angles_deg" in data:
            kwargs["rotation_half_angles_deg"] = tuple(
                float(v) for v in data["rotation_half_angles_deg"])
        counts = data.get("counts", {})
        for split in _SPLITS:
            if split in counts:
                kwargs[f"{split}_count"] = int(counts[split])
        if "snr_db" in data:
            kwargs["snr_db"] = None if data["snr_db"] is None else float(data["snr_db"])
        if "seed" in data:
            kwargs["seed"] = int(data["seed"])
        return cls(**kwargs)


def load_recipe(path: str | Path) -> HeterogeneityRecipe:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"recipe {path} is not valid JSON: {exc}") from None
    return HeterogeneityRecipe.from_json_dict(data)


def gmm_sample(recipe: HeterogeneityRecipe, rng: np.random.Generator,
               size: int) -> np.ndarray:
    """Draw raw mixture values d: a component per draw, then N(mean, std^2)."""
    weights = np.asarray([c.weight for c in recipe.gmm])
    means = np.asarray([c.mean for c in recipe.gmm])
    stds = np.asarray([c.std for c in recipe.gmm])
    which = rng.choice(len(recipe.gmm), size=size, p=weights)
    return rng.normal(means[which], stds[which])


def rotation_xyz(angles_rad: np.ndarray) -> np.ndarray:
    """Rotation about fixed lab axes composed as Rz @ Ry @ Rx."""
    ax, ay, az = (float(a) for a in angles_rad)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_z @ rot_y @ rot_x


def sample_chain_rotation(half_angles_deg: tuple[float, float, float],
                          rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis angles uniform in [-theta, +theta] and the composed rotation."""
    half = np.radians(np.asarray(half_angles_deg, dtype=np.float64))
    angles = rng.uniform(-half, half)
    return angles, rotation_xyz(angles)


def random_pose(rng: np.random.Generator, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform SO(3) rotation (normalized Gaussian quaternion) and in-plane shift.

    The shift is uniform in [-D/16, +D/16] pixels per axis.
    """
    quat = rng.normal(size=4)
    quat /= np.linalg.norm(quat)
    w, x, y, z = quat
    rotation = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])
    half_range = image_size / 16.0
    translation = rng.uniform(-half_range, half_range, size=2)
    return rotation, translation


def sample_conformation(reference: AtomicStructure,
                        bases: Mapping[str, NormalModeBasis],
                        recipe: HeterogeneityRecipe,
                        rng: np.random.Generator) -> tuple[AtomicStructure, LatentState]:
    """One heterogeneous conformation plus the exact latents that produced it.

    Mode weights fill the first num_modes slots of each chain's basis (zeros
    beyond); each chain is then rotated about its reference CoM.
    """
    scale = np.sqrt(reference.n_atoms / recipe.num_modes)
    weights = []
    transforms = []
    for cid in reference.chain_ids:
        basis = bases[cid]
        if recipe.num_modes > basis.n_modes:
            raise CapacityError(
                f"recipe excites {recipe.num_modes} modes but chain {cid!r} basis has "
                f"only {basis.n_modes}"
            )
        alpha = np.zeros(basis.n_modes)
        alpha[:recipe.num_modes] = scale * gmm_sample(recipe, rng, recipe.num_modes)
        _, rotation = sample_chain_rotation(recipe.rotation_half_angles_deg, rng)
        pivot = center_of_mass(reference, cid)
        weights.append(alpha)
        transforms.append(ChainTransform.from_rotation(rotation, np.zeros(3), pivot))
    latents = LatentState(mode_weights=tuple(weights), transforms=tuple(transforms))
    return compose_structure(reference, bases, latents), latents


def _render_one(reference: AtomicStructure, bases, recipe: HeterogeneityRecipe,
                imaging: ImagingConfig, split_index: int, image_index: int):
    """Fully deterministic single-image generation from its derived RNG stream."""
    rng = np.random.default_rng([recipe.seed, split_index, image_index])
    conformation, latents = sample_conformation(reference, bases, recipe, rng)
    pose = random_pose(rng, imaging.image_size)
    image = render_clean(conformation, pose, imaging)
    if recipe.snr_db is not None:
        image = add_noise(image, recipe.snr_db, rng)
    stray = count_out_of_view(conformation, pose, imaging)
    latents = LatentState(mode_weights=latents.mode_weights, transforms=latents.transforms,
                          pose_rotation=pose[0], pose_translation=pose[1])
    return image, latents, stray


def generate_dataset(gt_reference: AtomicStructure,
                     recipe: HeterogeneityRecipe,
                     imaging: ImagingConfig,
                     out_path: str | Path | None,
                     enm: ENMConfig | None = None) -> dict[str, ImageStack]:
    """Generate train/val/test stacks; returns them keyed by split name.

    When out_path is given, each split is saved to <out_path>/<split>/ and the
    ground-truth reference plus its per-chain bases are stored alongside
    (gt_reference.pdb, gt_bases/) so fits can be scored later.
    """
    if enm is None:
        enm = ENMConfig(num_modes=recipe.num_modes)
    elif enm.num_modes < recipe.num_modes:
        raise ConfigError("enm.num_modes must be >= recipe.num_modes")
    bases = chain_bases(gt_reference, enm)
    imaging = replace(imaging, snr_db=recipe.snr_db)
    stacks: dict[str, ImageStack] = {}
    for split_index, split in enumerate(_SPLITS):
        count = recipe.counts[split]
        images = np.empty((count, imaging.image_size, imaging.image_size), dtype=np.float32)
        rotations = np.empty((count, 3, 3))
        translations = np.empty((count, 2))
        latents: list[LatentState] = []
        stray_total = 0
        for i in range(count):
            image, image_latents, stray = _render_one(
                gt_reference, bases, recipe, imaging, split_index, i)
            images[i] = image
            rotations[i] = image_latents.pose_rotation
            translations[i] = image_latents.pose_translation
            latents.append(image_latents)
            stray_total += stray
        stacks[split] = ImageStack(
            images=images, rotations=rotations, translations=translations,
            config=imaging, seed=recipe.seed, gt_latents=latents,
            out_of_view_atoms=stray_total,
        )
    if out_path is not None:
        out_path = Path(out_path)
        out_path.mkdir(parents=True, exist_ok=True)
        for split, stack in stacks.items():
            save_stack(stack, out_path / split)
        write_structure_file(gt_reference, out_path / "gt_reference.pdb")
        bases_dir = out_path / "gt_bases"
        bases_dir.mkdir(exist_ok=True)
        for cid, basis in bases.items():
            save_basis(bases_dir / f"chain_{cid}.basis", basis, enm)
        (out_path / "recipe.json").write_text(
            json.dumps(recipe.to_json_dict(), indent=2, sort_keys=True) + "\n")
    return stacks


def generate_morph_dataset(conf_a: AtomicStructure,
                           conf_b: AtomicStructure,
                           num_steps: int,
                           imaging: ImagingConfig,
                           out_path: str | Path | None,
                           images_per_step: int = 1,
                           seed: int = 0) -> ImageStack:
    """Images along the linear path X(s) = (1-s) A + s B, s equally spaced in [0, 1]."""
    if num_steps < 2:
        raise ConfigError(f"num_steps must be >= 2, got {num_steps}")
    if images_per_step < 1:
        raise ConfigError(f"images_per_step must be >= 1, got {images_per_step}")
    if conf_a.n_atoms != conf_b.n_atoms or conf_a.chain_ranges != conf_b.chain_ranges \
            or conf_a.chain_ids != conf_b.chain_ids:
        raise DimensionMismatchError("morph endpoints differ in atom count or chain layout")
    steps = np.linspace(0.0, 1.0, num_steps)
    count = num_steps * images_per_step
    images = np.empty((count, imaging.image_size, imaging.image_size), dtype=np.float32)
    rotations = np.empty((count, 3, 3))
    translations = np.empty((count, 2))
    morph_s = np.empty(count)
    stray_total = 0
    for step_index, s in enumerate(steps):
        coords = (1.0 - s) * conf_a.coords + s * conf_b.coords
        conformation = conf_a.with_coords(coords)
        for j in range(images_per_step):
            index = step_index * images_per_step + j
            rng = np.random.default_rng([seed, _MORPH_STREAM, index])
            pose = random_pose(rng, imaging.image_size)
            image = render_clean(conformation, pose, imaging)
            if imaging.snr_db is not None:
                image = add_noise(image, imaging.snr_db, rng)
            images[index] = image
            rotations[index], translations[index] = pose
            morph_s[index] = s
            stray_total += count_out_of_view(conformation, pose, imaging)
    stack = ImageStack(
        images=images, rotations=rotations, translations=translations,
        config=imaging, seed=seed, morph_s=morph_s, out_of_view_atoms=stray_total,
    )
    if out_path is not None:
        save_stack(stack, Path(out_path))
    return stack

"""Per-chain normal-mode and rigid-body fitting of cryo-EM style projections."""

__version__ = "0.1.0"

from .analysis import (
    ErrorMap,
    PCAResult,
    error_map,
    latent_pca,
    pca,
    rmsd,
    traverse_pc,
)
from .datagen import (
    GMMComponent,
    HeterogeneityRecipe,
    generate_dataset,
    generate_morph_dataset,
    gmm_sample,
    sample_conformation,
)
from .errors import (
    ChainfitError,
    ConfigError,
    DegenerateGeometryError,
    DegenerateInputError,
    DivergenceError,
    PDBParseError,
)
from .fitter import FitConfig, FitEntry, FitReport, fit_image, fit_stack
from .imaging import (
    ImageStack,
    ImagingConfig,
    add_noise,
    load_stack,
    render_clean,
    render_gradients,
    save_stack,
)
from .nma import (
    ENMConfig,
    NormalModeBasis,
    build_hessian,
    chain_bases,
    compute_modes,
    deform,
    load_basis,
    save_basis,
    whole_basis,
)
from .rigid import (
    ChainTransform,
    LatentState,
    apply_chain_transform,
    compose_structure,
    gram_schmidt_rotation,
)
from .structure import (
    AtomicStructure,
    center_of_mass,
    parse_structure,
    parse_structure_file,
    write_structure,
    write_structure_file,
)
from .toy import displaced_reference, mode_perturbed, toy_structure

__all__ = [
    "AtomicStructure",
    "ChainTransform",
    "ChainfitError",
    "ConfigError",
    "DegenerateGeometryError",
    "DegenerateInputError",
    "DivergenceError",
    "ENMConfig",
    "ErrorMap",
    "FitConfig",
    "FitEntry",
    "FitReport",
    "GMMComponent",
    "HeterogeneityRecipe",
    "ImageStack",
    "ImagingConfig",
    "LatentState",
    "NormalModeBasis",
    "PCAResult",
    "PDBParseError",
    "add_noise",
    "apply_chain_transform",
    "build_hessian",
    "center_of_mass",
    "chain_bases",
    "compose_structure",
    "compute_modes",
    "deform",
    "displaced_reference",
    "error_map",
    "fit_image",
    "fit_stack",
    "generate_dataset",
    "generate_morph_dataset",
    "gmm_sample",
    "gram_schmidt_rotation",
    "latent_pca",
    "load_basis",
    "load_stack",
    "mode_perturbed",
    "parse_structure",
    "parse_structure_file",
    "pca",
    "render_clean",
    "render_gradients",
    "rmsd",
    "sample_conformation",
    "save_basis",
    "save_stack",
    "toy_structure",
    "traverse_pc",
    "whole_basis",
    "write_structure",
    "write_structure_file",
]

"""Command-line interface: nma, simulate, morph, fit, analyze, export-pdb.

Every run validates its configuration before writing anything and leaves a
manifest (resolved config, seed, input hashes, version, wall clock) next to
its outputs. Exit codes: 0 success, 1 usage or configuration error, 2
runtime or data error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    error_map,
    latent_block_matrix,
    pca,
    rigid_vector_to_transform,
    traverse_pc,
)
from .datagen import (
    HeterogeneityRecipe,
    generate_dataset,
    generate_morph_dataset,
    load_recipe,
)
from .errors import ChainfitError, ConfigError, EmptyInputError
from .fitter import (
    FIT_MODES,
    FitConfig,
    FitReport,
    fit_stack,
    structure_from_latents,
)
from .imaging import ImagingConfig, load_stack
from .nma import ENMConfig, chain_bases, load_basis, mode_variance_fractions, save_basis, whole_basis
from .rigid import compose_structure
from .structure import (
    AtomicStructure,
    parse_structure_file,
    write_multi_model,
    write_structure_file,
)

_STACK_FILES = ("meta.json", "images.f32", "poses.json", "gt_latents.json")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _resolve_seed(explicit: int | None, fallback: int | None) -> int | None:
    if explicit is not None:
        return explicit
    env = os.environ.get("CHAINFIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"CHAINFIT_SEED must be an integer, got {env!r}") from None
    return fallback


def _load_structure(path: str, ca_only: bool) -> AtomicStructure:
    structure = parse_structure_file(path)
    return structure.select_atoms("CA") if ca_only else structure


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _input_hashes(paths: list[Path]) -> dict[str, str]:
    hashes: dict[str, str] = {}
    for path in paths:
        if path.is_dir():
            for name in _STACK_FILES:
                member = path / name
                if member.exists():
                    hashes[str(member)] = _sha256(member)
        elif path.exists():
            hashes[str(path)] = _sha256(path)
    return hashes


def _write_manifest(target: Path, subcommand: str, config: dict, seed,
                    inputs: list[Path], started: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": _input_hashes(inputs),
        "wall_clock_s": round(time.time() - started, 3),
    }
    if target.is_dir():
        path = target / "manifest.json"
    else:
        path = Path(str(target) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "chainfit"
    import matplotlib.pyplot as plt

    return plt


def _save_scatter(path: Path, x, y, xlabel: str, ylabel: str, title: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.scatter(x, y, s=10, alpha=0.5, linewidths=0)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _save_histogram(path: Path, counts, edges, xlabel: str, title: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("atoms")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)


def _imaging_from_args(args) -> ImagingConfig:
    return ImagingConfig(
        image_size=args.size,
        pixel_size=args.pixel_size,
        blob_sigma=args.blob_sigma,
        psf_sigma=args.psf_sigma,
        snr_db=args.snr,
        window_sigmas=args.window_sigmas,
    )


def _add_imaging_flags(parser) -> None:
    parser.add_argument("--size", type=int, default=128, help="image side length, pixels")
    parser.add_argument("--pixel-size", type=float, default=1.0, help="angstroms per pixel")
    parser.add_argument("--blob-sigma", type=float, default=1.5,
                        help="atom Gaussian width, angstroms")
    parser.add_argument("--psf-sigma", type=float, default=None,
                        help="optional Gaussian PSF width, pixels")
    parser.add_argument("--window-sigmas", type=float, default=7.0,
                        help="per-atom evaluation radius in blob sigmas")
    parser.add_argument("--snr", type=float, default=None, help="target SNR in dB")


def _add_enm_flags(parser) -> None:
    parser.add_argument("--cutoff", type=float, default=15.0,
                        help="elastic network cutoff, angstroms")
    parser.add_argument("--gamma", type=float, default=1.0, help="spring constant")


def _find_gt(stack_dir: Path):
    """Locate gt_reference.pdb and gt_bases/ in the stack dir or its parent."""
    for base in (stack_dir, stack_dir.parent):
        pdb = base / "gt_reference.pdb"
        bases_dir = base / "gt_bases"
        if pdb.exists() and bases_dir.is_dir():
            reference = parse_structure_file(pdb)
            bases = {}
            for basis_path in sorted(bases_dir.glob("chain_*.basis")):
                cid = basis_path.stem.removeprefix("chain_")
                bases[cid], _ = load_basis(basis_path)
            if bases:
                return reference, bases
    return None, None


def cmd_nma(args) -> int:
    started = time.time()
    structure = _load_structure(args.pdb, args.ca_only)
    config = ENMConfig(cutoff=args.cutoff, gamma=args.gamma, num_modes=args.k)
    out = Path(args.out)
    if args.whole:
        bases = {"whole": whole_basis(structure, config)}
    else:
        bases = chain_bases(structure, config)
    out.mkdir(parents=True, exist_ok=True)
    for name, basis in bases.items():
        path = out / (f"{name}.basis" if name == "whole" else f"chain_{name}.basis")
        save_basis(path, basis, config)
        fractions = mode_variance_fractions(basis.eigenvalues)
        print(f"{name}: {basis.n_atoms} atoms, {basis.n_modes} modes, "
              f"eigenvalues [{basis.eigenvalues[0]:.6g} .. {basis.eigenvalues[-1]:.6g}], "
              f"cumulative variance fraction at K: {fractions[-1]:.4f}")
    _write_manifest(out, "nma",
                    {"cutoff": config.cutoff, "gamma": config.gamma, "num_modes": config.num_modes,
                     "whole": args.whole, "ca_only": args.ca_only},
                    None, [Path(args.pdb)], started)
    return 0


def cmd_simulate(args) -> int:
    started = time.time()
    recipe = load_recipe(args.recipe)
    seed = _resolve_seed(args.seed, None)
    if seed is not None:
        recipe = replace(recipe, seed=seed)
    if args.snr is not None:
        recipe = replace(recipe, snr_db=args.snr)
    imaging = _imaging_from_args(args)
    structure = _load_structure(args.pdb, args.ca_only)
    enm = ENMConfig(cutoff=args.cutoff, gamma=args.gamma, num_modes=recipe.num_modes)
    out = Path(args.out)
    stacks = generate_dataset(structure, recipe, imaging, out, enm=enm)
    for split, stack in stacks.items():
        print(f"{split}: {stack.n_images} images at {stack.config.image_size} px, "
              f"snr_db={stack.config.snr_db}, out-of-view atoms: {stack.out_of_view_atoms}")
    _write_manifest(out, "simulate",
                    {"recipe": recipe.to_json_dict(),
                     "imaging": {"image_size": imaging.image_size,
                                 "pixel_size": imaging.pixel_size,
                                 "blob_sigma": imaging.blob_sigma,
                                 "psf_sigma": imaging.psf_sigma,
                                 "window_sigmas": imaging.window_sigmas},
                     "enm": {"cutoff": enm.cutoff, "gamma": enm.gamma},
                     "ca_only": args.ca_only},
                    recipe.seed, [Path(args.recipe), Path(args.pdb)], started)
    return 0


def cmd_morph(args) -> int:
    started = time.time()
    conf_a = _load_structure(args.pdb_a, args.ca_only)
    conf_b = _load_structure(args.pdb_b, args.ca_only)
    imaging = _imaging_from_args(args)
    seed = _resolve_seed(args.seed, 0)
    out = Path(args.out)
    stack = generate_morph_dataset(conf_a, conf_b, args.steps, imaging, out,
                                   images_per_step=args.images_per_step, seed=seed)
    print(f"morph: {stack.n_images} images over {args.steps} steps, "
          f"snr_db={imaging.snr_db}")
    _write_manifest(out, "morph",
                    {"steps": args.steps, "images_per_step": args.images_per_step,
                     "imaging": {"image_size": imaging.image_size,
                                 "pixel_size": imaging.pixel_size,
                                 "blob_sigma": imaging.blob_sigma,
                                 "psf_sigma": imaging.psf_sigma,
                                 "snr_db": imaging.snr_db,
                                 "window_sigmas": imaging.window_sigmas},
                     "ca_only": args.ca_only},
                    seed, [Path(args.pdb_a), Path(args.pdb_b)], started)
    return 0


def cmd_fit(args) -> int:
    started = time.time()
    stack_dir = Path(args.stack)
    stack = load_stack(stack_dir)
    source = _load_structure(args.pdb, args.ca_only)
    seed = _resolve_seed(args.seed, 0)
    config = FitConfig(
        mode=args.mode, num_modes=args.k, step=args.step, iterations=args.iterations,
        grad_tol=args.grad_tol, restarts=args.restarts, seed=seed,
        step_decay=args.step_decay, monotone=args.monotone, batch_size=args.batch_size,
        lowpass_px=args.lowpass_px, prior_weight=args.prior_weight, passes=args.passes,
    )
    enm = ENMConfig(cutoff=args.cutoff, gamma=args.gamma,
                    num_modes=args.k if config.uses_modes else 1)
    gt_reference = gt_bases = None
    if not args.no_gt:
        gt_reference, gt_bases = _find_gt(stack_dir)
    report = fit_stack(stack, source, config, gt_reference=gt_reference,
                       gt_bases=gt_bases, enm=enm, threads=args.threads)
    payload = report.to_json_dict()
    payload["cli"] = {
        "stack": str(stack_dir),
        "pdb": str(args.pdb),
        "ca_only": args.ca_only,
        "enm_cutoff": args.cutoff,
        "enm_gamma": args.gamma,
    }
    out = Path(args.out)
    out.write_text(json.dumps(payload, sort_keys=True) + "\n")
    summary = report.summary
    line = (f"fit {config.mode}: {summary['n_images']} images, "
            f"{summary['n_failed']} failed, mean MSE {summary['mean_final_mse']}")
    if "rmsd_mean" in summary:
        line += f", RMSD mean {summary['rmsd_mean']:.4f} A"
    print(line)
    _write_manifest(out, "fit", payload["cli"] | report.config, seed,
                    [stack_dir, Path(args.pdb)], started)
    return 0


def _load_report(path: str) -> dict:
    report_path = Path(path)
    if not report_path.exists():
        raise FileNotFoundError(f"report not found: {report_path}")
    try:
        data = json.loads(report_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"report {report_path} is not valid JSON: {exc}") from None
    if "entries" not in data or "config" not in data:
        raise ConfigError(f"{report_path} is not a fit report")
    return data


def _parse_pca_spec(spec: str) -> tuple[str, int]:
    block, _, chain = spec.partition(":")
    if block not in ("alpha", "rigid"):
        raise ConfigError(f"--pca block must be 'alpha' or 'rigid', got {block!r}")
    if not chain:
        return block, 0
    try:
        index = int(chain)
    except ValueError:
        raise ConfigError(f"--pca chain must be a 1-based integer, got {chain!r}") from None
    if index < 1:
        raise ConfigError(f"--pca chain must be >= 1, got {index}")
    return block, index - 1


def _report_entries(data: dict) -> list[dict]:
    entries = [e for e in data["entries"] if e.get("error") is None]
    if not entries:
        raise EmptyInputError("report has no successful fit entries")
    return entries


def _bases_for_report(data: dict, source: AtomicStructure, args):
    """Rebuild the bases a report's latents refer to, from its recorded config."""
    config = data["config"]
    cli_info = data.get("cli", {})
    cutoff = args.cutoff if args.cutoff is not None else cli_info.get("enm_cutoff", 15.0)
    gamma = args.gamma if args.gamma is not None else cli_info.get("enm_gamma", 1.0)
    num_modes = config.get("num_modes")
    if num_modes is None:
        return None, None
    enm = ENMConfig(cutoff=cutoff, gamma=gamma, num_modes=num_modes)
    if config["mode"] == "N_whole":
        return None, whole_basis(source, enm)
    return chain_bases(source, enm), None


def cmd_analyze(args) -> int:
    started = time.time()
    reports = [_load_report(path) for path in args.report]
    for data in reports:
        _report_entries(data)  # empty reports are a data error
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for path, data in zip(args.report, reports):
        summary = data["summary"]
        rows.append([
            path, data["config"]["mode"], summary.get("n_images"),
            summary.get("n_failed"), summary.get("mean_final_mse"),
            summary.get("rmsd_mean"), summary.get("rmsd_median"),
            summary.get("rmsd_std"), summary.get("rmsd_max"),
        ])
    _write_csv(out / "rmsd_summary.csv",
               ["report", "mode", "n_images", "n_failed", "mean_final_mse",
                "rmsd_mean", "rmsd_median", "rmsd_std", "rmsd_max"], rows)
    inputs = [Path(p) for p in args.report]

    if args.pca:
        block, chain_index = _parse_pca_spec(args.pca)
        data = reports[0]
        entries = _report_entries(data)
        matrix = latent_block_matrix(entries, block, chain_index)
        result = pca(matrix)
        indices = [e["index"] for e in entries]
        n_show = min(result.components.shape[1], 8)
        _write_csv(out / "pca_scores.csv",
                   ["index"] + [f"pc{i + 1}" for i in range(n_show)],
                   [[idx] + [float(v) for v in score[:n_show]]
                    for idx, score in zip(indices, result.projected)])
        _write_csv(out / "pca_variance.csv",
                   ["component", "explained_pct"],
                   [[i + 1, float(v)] for i, v in enumerate(result.explained_variance_pct)])
        y = result.projected[:, 1] if result.projected.shape[1] > 1 \
            else np.zeros(len(indices))
        pc2_pct = (f"{result.explained_variance_pct[1]:.1f}"
                   if len(result.explained_variance_pct) > 1 else "0.0")
        _save_scatter(out / "pca_scatter.svg", result.projected[:, 0], y,
                      f"PC1 ({result.explained_variance_pct[0]:.1f}%)",
                      f"PC2 ({pc2_pct}%)",
                      f"{block} block, chain {chain_index + 1}")

        if args.traverse:
            if args.pdb is None:
                raise ConfigError("--traverse needs --pdb to recompose structures")
            quantiles = [float(tok) for tok in args.traverse.split(",") if tok]
            vectors = traverse_pc(result, 0, quantiles)
            source = _load_structure(args.pdb, args.ca_only)
            bases, whole = _bases_for_report(data, source, args)
            template = entries[0]["latents"]
            structures = []
            for vector in vectors:
                latents = _traversal_latents(template, block, chain_index, vector)
                structures.append(structure_from_latents(source, latents, bases, whole))
            write_multi_model(structures, out / "traversal.pdb")
            _write_csv(out / "traversal_quantiles.csv",
                       ["quantile", "pc1_score"],
                       [[q, float(np.quantile(result.projected[:, 0], q))]
                        for q in quantiles])
            inputs.append(Path(args.pdb))

    if args.error_map:
        if args.stack is None or args.pdb is None:
            raise ConfigError("--error-map needs --stack and --pdb")
        data = reports[0]
        entries = _report_entries(data)
        stack_dir = Path(args.stack)
        stack = load_stack(stack_dir)
        gt_reference, gt_bases = _find_gt(stack_dir)
        if gt_reference is None or stack.gt_latents is None:
            raise ChainfitError(f"stack {stack_dir} has no ground-truth sidecars")
        source = _load_structure(args.pdb, args.ca_only)
        bases, whole = _bases_for_report(data, source, args)
        gts, fits = [], []
        for entry in entries:
            gts.append(compose_structure(gt_reference, gt_bases,
                                         stack.gt_latents[entry["index"]]))
            fits.append(structure_from_latents(source, entry["latents"], bases, whole))
        emap = error_map(gts, fits)
        _write_csv(out / "error_map.csv",
                   ["atom_index", "chain", "error_angstrom"],
                   [[i, _chain_of(gt_reference, i), float(v)]
                    for i, v in enumerate(emap.per_atom)])
        _save_histogram(out / "error_histogram.svg", emap.hist_counts, emap.bin_edges,
                        "per-atom error (A)", "mean-conformation error map")
        inputs.extend([stack_dir, Path(args.pdb)])

    _write_manifest(out, "analyze",
                    {"reports": list(args.report), "pca": args.pca,
                     "traverse": args.traverse, "error_map": args.error_map},
                    None, inputs, started)
    return 0


def _chain_of(structure: AtomicStructure, atom_index: int) -> str:
    for cid, (start, stop) in zip(structure.chain_ids, structure.chain_ranges):
        if start <= atom_index < stop:
            return cid
    return "?"


def _traversal_latents(template: dict, block: str, chain_index: int,
                       vector: np.ndarray) -> dict:
    """Identity latents except the traversed block of the chosen chain."""
    chains = []
    for i, entry in enumerate(template["chains"]):
        chain = {
            "chain_id": entry.get("chain_id"),
            "mode_weights": [],
            "v1": [1.0, 0.0, 0.0],
            "v2": [0.0, 1.0, 0.0],
            "translation": [0.0, 0.0, 0.0],
            "pivot": entry["pivot"],
        }
        if i == chain_index:
            if block == "alpha":
                chain["mode_weights"] = [float(v) for v in vector]
            else:
                transform = rigid_vector_to_transform(
                    vector, np.asarray(entry["pivot"], dtype=np.float64))
                chain["v1"] = transform.v1.tolist()
                chain["v2"] = transform.v2.tolist()
                chain["translation"] = transform.translation.tolist()
        chains.append(chain)
    return {"chains": chains}


def cmd_export_pdb(args) -> int:
    started = time.time()
    data = _load_report(args.report)
    entries = _report_entries(data)
    source = _load_structure(args.pdb, args.ca_only)
    bases, whole = _bases_for_report(data, source, args)
    if args.indices:
        wanted = {int(tok) for tok in args.indices.split(",") if tok}
        entries = [e for e in entries if e["index"] in wanted]
        if not entries:
            raise EmptyInputError("no requested indices present in the report")
    structures = [structure_from_latents(source, e["latents"], bases, whole)
                  for e in entries]
    out = Path(args.out)
    if args.mean:
        mean_coords = np.mean([s.coords for s in structures], axis=0)
        write_structure_file(source.with_coords(mean_coords), out)
    else:
        write_multi_model(structures, out)
    print(f"wrote {1 if args.mean else len(structures)} model(s) to {out}")
    _write_manifest(out, "export-pdb",
                    {"report": args.report, "indices": args.indices, "mean": args.mean},
                    None, [Path(args.report), Path(args.pdb)], started)
    return 0


def _build_parser() -> _Parser:
    parser = _Parser(prog="chainfit",
                     description="Per-chain normal-mode and rigid-body fitting "
                                 "of cryo-EM style 2D projections")
    parser.add_argument("--version", action="version", version=f"chainfit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("nma", help="compute normal-mode bases")
    p.add_argument("--pdb", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=20, help="modes to keep")
    p.add_argument("--whole", action="store_true",
                   help="one whole-structure basis instead of per-chain bases")
    p.add_argument("--ca-only", action="store_true")
    _add_enm_flags(p)
    p.set_defaults(handler=cmd_nma)

    p = sub.add_parser("simulate", help="generate a synthetic heterogeneous dataset")
    p.add_argument("--recipe", required=True, help="heterogeneity recipe JSON")
    p.add_argument("--pdb", required=True, help="ground-truth reference structure")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ca-only", action="store_true")
    _add_imaging_flags(p)
    _add_enm_flags(p)
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("morph", help="generate images along a linear morph")
    p.add_argument("--pdb-a", required=True)
    p.add_argument("--pdb-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--images-per-step", type=int, default=1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ca-only", action="store_true")
    _add_imaging_flags(p)
    p.set_defaults(handler=cmd_morph)

    p = sub.add_parser("fit", help="fit per-image latents to a stack")
    p.add_argument("--stack", required=True, help="image stack directory")
    p.add_argument("--pdb", required=True, help="source reference structure")
    p.add_argument("--out", required=True, help="fit report JSON path")
    p.add_argument("--mode", choices=FIT_MODES, default="full")
    p.add_argument("--k", type=int, default=50, help="modes per chain (or whole)")
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--iterations", type=int, default=500)
    p.add_argument("--grad-tol", type=float, default=1e-6)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--step-decay", type=float, default=0.0)
    p.add_argument("--monotone", action="store_true",
                   help="backtracking line search instead of adaptive moments")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--prior-weight", type=float, default=0.0,
                   help="ridge toward the prior center, in squared-angstrom units")
    p.add_argument("--passes", type=int, default=1,
                   help=">1 prepends a stack-wide consensus fit that centers the prior")
    p.add_argument("--lowpass-px", type=float, default=None,
                   help="fit against images smoothed by this Gaussian sigma (pixels)")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ca-only", action="store_true")
    p.add_argument("--no-gt", action="store_true",
                   help="skip ground-truth RMSD even if sidecars exist")
    _add_enm_flags(p)
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("analyze", help="summaries, PCA, traversals, error maps")
    p.add_argument("--report", action="append", required=True,
                   help="fit report JSON (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--pca", default=None, metavar="BLOCK:CHAIN",
                   help="'alpha:1' or 'rigid:2' (1-based chain index)")
    p.add_argument("--traverse", default=None, metavar="Q1,Q2,...",
                   help="PC1 score quantiles to recompose (needs --pca and --pdb)")
    p.add_argument("--error-map", action="store_true",
                   help="per-atom error map (needs --stack and --pdb)")
    p.add_argument("--stack", default=None)
    p.add_argument("--pdb", default=None)
    p.add_argument("--ca-only", action="store_true")
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("export-pdb", help="recompose fitted structures to PDB")
    p.add_argument("--report", required=True)
    p.add_argument("--pdb", required=True, help="source reference structure")
    p.add_argument("--out", required=True)
    p.add_argument("--indices", default=None, help="comma-separated image indices")
    p.add_argument("--mean", action="store_true", help="export the mean fitted structure")
    p.add_argument("--ca-only", action="store_true")
    p.add_argument("--cutoff", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.set_defaults(handler=cmd_export_pdb)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"chainfit: config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"chainfit: {exc}", file=sys.stderr)
        return 2
    except ChainfitError as exc:
        print(f"chainfit: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"chainfit: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

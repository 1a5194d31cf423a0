"""
Two-view reconstruction of a scene bundle.

Runs the forward pass (and per-scene fitting when steps > 0) on the first
two views, fuses the surfel field into a mesh and writes every artifact:

    intermediates/splats.ply
    intermediates/<name>_coarse_depth.pfm   1/4-resolution softmax depth
    intermediates/<name>_depth.pfm          upsampled depth used for the splats
    intermediates/<name>_confidence.pfm     upsampled confidence
    intermediates/<name>_normal.pfm         rendered camera-frame normals
    intermediates/trace.csv                 loss trace (fitting only)
    intermediates/tsdf.bin                  fused volume
    intermediates/run.yaml                  resolved configuration
    mesh/mesh.ply
    metrics/reconstruct.json
"""

import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from surfel_core.fit import FitReport, fit_scene, forward_reconstruct
from surfel_core.geometry import ImageGrid, View
from surfel_core.meshing import extract_mesh_and_volume
from surfel_core.rasterizer import RenderConfig, render
from surfel_core.scene_synth import OracleRender, perturb_normals
from surfel_io.bundle import BundleLayout, SceneBundle, load_bundle
from surfel_io.config import RunConfig, add_run_arguments, run_config_from_args, save_run_config
from surfel_io.formats import SchemaError, write_json, write_mesh_ply, write_pfm, write_splats, write_trace_csv, write_tsdf
from surfel_io.utils import EXIT_OK, StageError, report_error, stage


def show_banner():
    """Display the reconstruction banner"""
    print()
    print("=" * 70)
    print("               Two-View Surfel Reconstruction              ")
    print("=" * 70)
    print()


def pseudo_normals(bundle: SceneBundle, noise_deg: float, seed: int, verbose: bool = False) -> List[ImageGrid]:
    """
    Camera-frame normal targets for every view.

    GT normals are used when the bundle has them, optionally perturbed by
    `noise_deg` degrees; otherwise zero maps (surfels face the camera).
    """
    if bundle.gt_normals is None:
        if verbose:
            print("[WARN] bundle has no normal maps: surfels start camera-facing")
        return [ImageGrid(np.zeros((v.intrinsics.height, v.intrinsics.width, 3))) for v in bundle.views]
    if noise_deg <= 0:
        return list(bundle.gt_normals)
    out = []
    for k, normal in enumerate(bundle.gt_normals):
        depth = bundle.gt_depths[k] if bundle.gt_depths is not None else ImageGrid(
            (np.linalg.norm(normal.data, axis=-1) > 0).astype(np.float64))
        view = bundle.views[k]
        oracle = OracleRender(view.image, depth, normal)
        out.append(perturb_normals(oracle, noise_deg, seed + k).normal)
    return out


def run_reconstruct(bundle_root: Path, cfg: RunConfig, out_dir: Optional[Path] = None,
                    heldout: bool = False, verbose: bool = True) -> Dict[str, Any]:
    """
    Reconstruct a bundle and write all artifacts.

    Returns:
        Stats dict (splat count, trace endpoints, mesh size, output root)

    Raises:
        StageError: labelled with the failing stage (load, forward, fit,
            mesh, write)
    """
    with stage("load"):
        bundle = load_bundle(bundle_root)
        if len(bundle) < 2:
            raise SchemaError(f"{bundle.layout.cameras}: views: reconstruction needs at least 2 views, "
                              f"got {len(bundle)}")
        views: List[View] = list(bundle.views)
        if cfg.overrides_range():
            views = [v.with_range(cfg.near, cfg.far) for v in views]
        normals = pseudo_normals(bundle, cfg.normal_noise, cfg.seed, verbose)
    layout = BundleLayout(out_dir if out_dir is not None else bundle.root)
    layout.create()
    sources = views[:2]
    fit_cfg = cfg.fit_config(verbose=verbose)

    if verbose:
        print(f"[Config] preset {cfg.preset}: D={cfg.depth_bins}, steps={cfg.steps}, "
              f"voxel {cfg.voxel_size}, trunc {cfg.truncation}")
        print(f"[Config] sources: {bundle.names[0]}, {bundle.names[1]}"
              + (f" (+{len(views) - 2} held-out)" if heldout and len(views) > 2 else ""))
        print()

    report: Optional[FitReport] = None
    if cfg.steps == 0:
        with stage("forward"):
            fwd = forward_reconstruct(sources[0], sources[1], normals[:2], fit_cfg)
        field = fwd.field
    else:
        with stage("fit"):
            report = fit_scene(sources[0], sources[1], normals[:2], fit_cfg,
                               heldout_views=views[2:] if heldout else ())
        fwd = report.forward
        field = report.field
    if verbose and fwd.skipped:
        print(f"[WARN] {fwd.skipped} pixels skipped (non-positive depth)")

    with stage("mesh"):
        mesh, vol = extract_mesh_and_volume(field, sources, cfg.tsdf_config(), verbose)

    with stage("write"):
        inter = layout.intermediates
        write_splats(layout.splats, field)
        rcfg = RenderConfig(depth_statistic=cfg.depth_statistic)
        for k, name in enumerate(bundle.names[:2]):
            write_pfm(inter / f"{name}_coarse_depth.pfm", fwd.coarse_depths[k])
            write_pfm(inter / f"{name}_depth.pfm", fwd.depths[k])
            write_pfm(inter / f"{name}_confidence.pfm", fwd.confidences_full[k])
            write_pfm(inter / f"{name}_normal.pfm", render(field, sources[k], rcfg).normal)
        if report is not None:
            write_trace_csv(inter / "trace.csv", report.trace)
        if vol is not None:
            write_tsdf(inter / "tsdf.bin", vol)
        save_run_config(cfg, inter / "run.yaml")
        write_mesh_ply(layout.mesh, mesh)

        stats: Dict[str, Any] = {
            "bundle": Path(bundle_root).name,
            "preset": cfg.preset,
            "splats": len(field),
            "skipped_pixels": int(fwd.skipped),
            "degenerate_baseline": bool(fwd.degenerate_baseline),
            "mean_confidence": [float(c.grid.data.mean()) for c in fwd.confidences],
            "steps": cfg.steps,
            "mesh_vertices": int(mesh.vertices.shape[0]),
            "mesh_faces": int(mesh.faces.shape[0]),
        }
        if report is not None:
            stats["initial_loss"] = report.initial.total
            stats["final_loss"] = report.final.total
            stats["initial_photometric"] = report.initial.pho
            stats["final_photometric"] = report.final.pho
        write_json(layout.metrics / "reconstruct.json", stats)

    if verbose:
        if mesh.is_empty:
            print("[WARN] extracted mesh is empty")
        print(f"[OK] {len(field)} splats, mesh with {mesh.faces.shape[0]} faces -> {layout.mesh}")
    stats["root"] = str(layout.root)
    return stats


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    import argparse

    parser = argparse.ArgumentParser(description='Reconstruct a mesh from the first two views of a bundle')
    parser.add_argument('bundle', type=str, help='Bundle directory (with inputs/cameras.json)')
    parser.add_argument('--heldout', action='store_true', help='Supervise photometric loss with the extra views')
    parser.add_argument('--quiet', action='store_true', help='Only print errors')
    add_run_arguments(parser)

    args = parser.parse_args(argv)
    verbose = not args.quiet
    if verbose:
        show_banner()

    try:
        with stage("config"):
            cfg = run_config_from_args(args)
        run_reconstruct(Path(args.bundle), cfg, Path(cfg.out) if cfg.out else None, args.heldout, verbose)
    except StageError as e:
        return report_error(e)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())

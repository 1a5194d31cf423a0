"""
Loss ablation on a synthetic bundle.

Fits the same two views once per variant, extracts a mesh and evaluates it
against the bundle's GT mesh:

    full          weighted Chamfer + normal loss (default objective)
    plain_cd      unweighted Chamfer + normal loss
    no_cd         no point-cloud regulariser
    no_normal     weighted Chamfer, no normal supervision
    forward_only  the feed-forward field without fitting

Writes metrics/ablate/<variant>.json and the aggregate metrics/ablate.csv.
"""

import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from surfel_core.fit import fit_scene, forward_reconstruct
from surfel_core.meshing import extract_mesh
from surfel_core.models import ChamferMode
from surfel_bench.evaluate import EmptyAfterCullError, evaluate_meshes
from surfel_bench.evaluation import metric_record, write_metric_record, write_metrics_csv
from surfel_io.bundle import BundleLayout, load_bundle
from surfel_io.config import RunConfig, add_run_arguments, run_config_from_args
from surfel_io.formats import SchemaError
from surfel_io.reconstruct import pseudo_normals
from surfel_io.utils import EXIT_OK, StageError, report_error, stage


# name -> (chamfer mode, normal loss on, fitted)
VARIANTS: Dict[str, Tuple[ChamferMode, bool, bool]] = {
    "full": (ChamferMode.WEIGHTED, True, True),
    "plain_cd": (ChamferMode.PLAIN, True, True),
    "no_cd": (ChamferMode.OFF, True, True),
    "no_normal": (ChamferMode.WEIGHTED, False, True),
    "forward_only": (ChamferMode.WEIGHTED, True, False),
}


def show_banner():
    """Display the ablation banner"""
    print()
    print("=" * 70)
    print("               Loss Ablation                               ")
    print("=" * 70)
    print()


def run_ablation(bundle_root: Path, cfg: RunConfig, variants: Optional[Sequence[str]] = None,
                 out_dir: Optional[Path] = None, verbose: bool = True) -> List[Dict[str, Any]]:
    """
    Run each variant and write its metric record.

    Returns:
        Records in variant order; a variant whose mesh is empty inside the
        frustums gets status "empty_after_cull" and no mesh metrics.
    """
    names = list(variants) if variants else list(VARIANTS)
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants: {', '.join(unknown)} (expected: {', '.join(VARIANTS)})")

    with stage("load"):
        bundle = load_bundle(bundle_root)
        if len(bundle) < 2:
            raise SchemaError(f"{bundle.layout.cameras}: views: ablation needs at least 2 views")
        if bundle.gt_mesh is None:
            raise SchemaError(f"{bundle.layout.inputs}: gt mesh: ablation needs a ground-truth mesh")
        views = list(bundle.views)
        if cfg.overrides_range():
            views = [v.with_range(cfg.near, cfg.far) for v in views]
        normals = pseudo_normals(bundle, cfg.normal_noise, cfg.seed, verbose)
    sources = views[:2]
    layout = BundleLayout(out_dir if out_dir is not None else bundle.root)
    scene = bundle.root.name

    records = []
    for name in names:
        mode, use_normal, fitted = VARIANTS[name]
        fit_cfg = cfg.fit_config(chamfer_mode=mode, use_normal_loss=use_normal)
        extra: Dict[str, Any] = {"variant": name, "chamfer_mode": mode.value, "normal_loss": use_normal,
                                 "steps": cfg.steps if fitted else 0}
        with stage(name):
            if fitted and cfg.steps > 0:
                report = fit_scene(sources[0], sources[1], normals[:2], fit_cfg)
                field = report.field
                extra.update(initial_loss=report.initial.total, final_loss=report.final.total,
                             initial_photometric=report.initial.pho, final_photometric=report.final.pho)
            else:
                field = forward_reconstruct(sources[0], sources[1], normals[:2], fit_cfg).field
            mesh = extract_mesh(field, sources, cfg.tsdf_config())
            try:
                metrics = evaluate_meshes(mesh, bundle.gt_mesh, sources, cfg.tau, cfg.samples, cfg.seed)
                extra["status"] = "ok"
            except EmptyAfterCullError:
                metrics = None
                extra["status"] = "empty_after_cull"

        record = metric_record(scene, cfg.preset, metrics, **extra)
        records.append(record)
        with stage("write"):
            write_metric_record(layout.metrics / "ablate" / f"{name}.json", record)
        if verbose:
            if metrics is None:
                print(f"[WARN] {name:<13} mesh empty after culling")
            else:
                print(f"[Ablate] {name:<13} CD {metrics.cd:.5f}  F1 {metrics.f1:.4f}")

    with stage("write"):
        write_metrics_csv(layout.metrics / "ablate.csv", records)
    if verbose:
        print(f"[OK] {len(records)} records -> {layout.metrics / 'ablate.csv'}")
    return records


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    import argparse

    parser = argparse.ArgumentParser(description='Compare loss variants on one bundle')
    parser.add_argument('bundle', type=str, help='Bundle directory with a GT mesh')
    parser.add_argument('--variants', type=str, nargs='+', default=None, choices=list(VARIANTS),
                        help='Variants to run (default: all)')
    parser.add_argument('--quiet', action='store_true', help='Only print errors')
    add_run_arguments(parser)

    args = parser.parse_args(argv)
    verbose = not args.quiet
    if verbose:
        show_banner()

    try:
        with stage("config"):
            cfg = run_config_from_args(args)
        if verbose:
            print(f"[Config] preset {cfg.preset}: steps {cfg.steps}, D={cfg.depth_bins}, "
                  f"tau {cfg.tau}, {cfg.samples} samples")
            print()
        run_ablation(Path(args.bundle), cfg, args.variants, Path(cfg.out) if cfg.out else None, verbose)
    except StageError as e:
        return report_error(e)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())

"""
Evaluate a reconstructed mesh against ground truth.

Both meshes are culled to the input camera frustums, sampled by area and
compared with Chamfer distance and F1 at tau. When the cameras reference
GT depth / normal maps and predicted maps exist (<name>_depth.pfm,
<name>_normal.pfm from reconstruct), depth and normal metrics are added.

Usage:
    surfel-bench eval BUNDLE
    surfel-bench eval --pred mesh.ply --gt gt.ply --cameras cameras.json --out eval.json
"""

import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from surfel_core.geometry import View
from surfel_core.meshing import frustum_cull, split_long_faces
from surfel_core.models import TriangleMesh
from surfel_core.utils import normalize_vectors
from surfel_bench.evaluation import (
    DepthMetrics,
    MeshMetrics,
    NormalMetrics,
    depth_metrics,
    mesh_metrics,
    metric_record,
    normal_metrics,
    sample_mesh,
    write_metric_record,
)
from surfel_io.bundle import BundleLayout
from surfel_io.config import resolve_run_config
from surfel_io.formats import SchemaError, read_cameras, read_mesh, read_pfm
from surfel_io.utils import EXIT_OK, StageError, report_error, stage


class EmptyAfterCullError(RuntimeError):
    """A mesh has no faces left inside the evaluation frustums."""


def show_banner():
    """Display the evaluation banner"""
    print()
    print("=" * 70)
    print("               Mesh Evaluation                             ")
    print("=" * 70)
    print()


def evaluate_meshes(pred: TriangleMesh, gt: TriangleMesh, views: Sequence[View], tau: float,
                    samples: int, seed: int = 0) -> MeshMetrics:
    """
    Cull both meshes to the views, sample `samples` points from each and
    compare. Faces longer than tau are split before culling. Both meshes
    are sampled with the same seed.

    Raises:
        EmptyAfterCullError: either mesh is empty inside the frustums
    """
    if not tau > 0:
        raise ValueError(f"invalid threshold: tau must be > 0, got {tau}")
    culled = {}
    for name, mesh in (("ground-truth", gt), ("predicted", pred)):
        kept = frustum_cull(split_long_faces(mesh, tau), views)
        if kept.is_empty:
            raise EmptyAfterCullError(f"{name} mesh is empty after frustum culling "
                                      f"({mesh.faces.shape[0]} faces before)")
        culled[name] = kept
    return mesh_metrics(sample_mesh(culled["predicted"], samples, seed),
                        sample_mesh(culled["ground-truth"], samples, seed), tau)


def _pooled(parts: List[Tuple[float, float, int]]) -> Tuple[float, float, int]:
    total = sum(n for _, _, n in parts)
    a = sum(x * n for x, _, n in parts) / total
    b = sum(y * n for _, y, n in parts) / total
    return float(a), float(b), int(total)


def map_metrics(cameras_path: Path, pred_dir: Path) -> Tuple[Optional[DepthMetrics], Optional[NormalMetrics],
                                                              List[Dict[str, Any]]]:
    """
    Depth and normal metrics over every view that has both a GT map (from
    cameras.json) and a predicted map in pred_dir. Pixel-pooled over views.
    """
    records = read_cameras(cameras_path)
    base = Path(cameras_path).parent
    depth_parts, normal_parts, per_view = [], [], []
    for rec in records:
        entry: Dict[str, Any] = {"name": rec.name}
        pred_depth = pred_dir / f"{rec.name}_depth.pfm"
        if rec.depth is not None and pred_depth.exists():
            gt = read_pfm(base / rec.depth).plane()
            pred = read_pfm(pred_depth).plane()
            mask = (gt > 0) & (pred > 0)
            if mask.any():
                m = depth_metrics(pred, gt, mask)
                depth_parts.append((m.abs_rel, m.abs_diff, m.pixels))
                entry["depth"] = {"abs_rel": m.abs_rel, "abs_diff": m.abs_diff, "pixels": m.pixels}
        pred_normal = pred_dir / f"{rec.name}_normal.pfm"
        if rec.normal is not None and pred_normal.exists():
            gt_n, gt_norm = normalize_vectors(read_pfm(base / rec.normal).data)
            pred_n, pred_norm = normalize_vectors(read_pfm(pred_normal).data)
            mask = (gt_norm > 0.5) & (pred_norm > 1e-6)
            if mask.any():
                m = normal_metrics(pred_n, gt_n, mask)
                normal_parts.append((m.mean_deg, m.frac_lt30, m.pixels))
                entry["normal"] = {"mean_deg": m.mean_deg, "frac_lt30": m.frac_lt30, "pixels": m.pixels}
        if len(entry) > 1:
            per_view.append(entry)
    depth = DepthMetrics(*_pooled(depth_parts)) if depth_parts else None
    normal = NormalMetrics(*_pooled(normal_parts)) if normal_parts else None
    return depth, normal, per_view


def run_eval(pred_path: Path, gt_path: Path, cameras_path: Path, out_path: Path,
             tau: float, samples: int, seed: int = 0, pred_maps: Optional[Path] = None,
             scene: Optional[str] = None, preset: Optional[str] = None,
             verbose: bool = True) -> Dict[str, Any]:
    """
    Evaluate one prediction and write its metric record.

    Returns:
        The record written to out_path

    Raises:
        StageError: load / cull / maps / write failures; an empty mesh
            after culling fails the "cull" stage with exit code 1
    """
    with stage("load"):
        pred = read_mesh(pred_path)
        gt = read_mesh(gt_path)
        views = [r.view for r in read_cameras(cameras_path)]

    with stage("cull"):
        metrics = evaluate_meshes(pred, gt, views, tau, samples, seed)

    depth = normal = None
    per_view: List[Dict[str, Any]] = []
    if pred_maps is not None and Path(pred_maps).is_dir():
        with stage("maps"):
            depth, normal, per_view = map_metrics(cameras_path, Path(pred_maps))

    record = metric_record(
        scene or Path(gt_path).parent.parent.name, preset, metrics, depth, normal,
        pred=Path(pred_path).name, gt=Path(gt_path).name, views=len(views), seed=seed,
    )
    if per_view:
        record["per_view"] = per_view
    with stage("write"):
        write_metric_record(out_path, record)

    if verbose:
        print(f"[Eval] {len(views)} views, {samples} samples per mesh, tau {tau}")
        print(f"    CD {metrics.cd:.6f}  P {metrics.precision:.4f}  R {metrics.recall:.4f}  F1 {metrics.f1:.4f}")
        if depth is not None:
            print(f"    depth  AbsRel {depth.abs_rel:.4f}  AbsDiff {depth.abs_diff:.4f}")
        if normal is not None:
            print(f"    normal mean {normal.mean_deg:.2f} deg  <30deg {normal.frac_lt30:.4f}")
        print(f"[OK] metrics written to {out_path}")
    return record


def _resolve_paths(args) -> Dict[str, Optional[Path]]:
    layout = BundleLayout(args.bundle) if args.bundle else None
    paths = {
        "pred": Path(args.pred) if args.pred else (layout.mesh if layout else None),
        "gt": Path(args.gt) if args.gt else (layout.gt_mesh() if layout else None),
        "cameras": Path(args.cameras) if args.cameras else (layout.cameras if layout else None),
        "out": Path(args.out) if args.out else (layout.metrics / "eval.json" if layout else None),
        "maps": Path(args.pred_maps) if args.pred_maps else (layout.intermediates if layout else None),
    }
    for key, flag in (("pred", "--pred"), ("gt", "--gt"), ("cameras", "--cameras"), ("out", "--out")):
        if paths[key] is None:
            raise SchemaError(f"{flag}: required when no bundle (or no GT mesh in it) is given")
    return paths


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    import argparse

    parser = argparse.ArgumentParser(description='Evaluate a reconstructed mesh against ground truth')
    parser.add_argument('bundle', type=str, nargs='?', default=None,
                        help='Bundle directory (defaults for every path below)')
    parser.add_argument('--pred', type=str, default=None, help='Predicted mesh (PLY/OBJ)')
    parser.add_argument('--gt', type=str, default=None, help='Ground-truth mesh (PLY/OBJ)')
    parser.add_argument('--cameras', type=str, default=None, help='cameras.json used for culling')
    parser.add_argument('--pred-maps', type=str, default=None,
                        help='Directory with <name>_depth.pfm / <name>_normal.pfm predictions')
    parser.add_argument('--scene', type=str, default=None, help='Scene id stored in the record')
    parser.add_argument('--preset', type=str, default=None, help='Preset providing tau / samples defaults')
    parser.add_argument('--tau', type=float, default=None, help='F1 distance threshold')
    parser.add_argument('--samples', type=int, default=None, help='Points sampled per mesh')
    parser.add_argument('--seed', type=int, default=None, help='Sampling seed')
    parser.add_argument('--out', type=str, default=None, help='Metrics JSON path')
    parser.add_argument('--quiet', action='store_true', help='Only print errors')

    args = parser.parse_args(argv)
    verbose = not args.quiet
    if verbose:
        show_banner()

    try:
        with stage("config"):
            cfg = resolve_run_config(args.preset, {"tau": args.tau, "samples": args.samples, "seed": args.seed})
            paths = _resolve_paths(args)
        scene = args.scene or (Path(args.bundle).name if args.bundle else None)
        run_eval(paths["pred"], paths["gt"], paths["cameras"], paths["out"], cfg.tau, cfg.samples, cfg.seed,
                 paths["maps"], scene, cfg.preset, verbose)
    except StageError as e:
        return report_error(e)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())

"""
Render a stored splat field from a camera.

Writes <out>.png (RGB), <out>_depth.pfm and <out>_normal.pfm (camera frame).
"""

import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from surfel_core.models import DepthStatistic
from surfel_core.rasterizer import RenderConfig, render
from surfel_io.formats import SchemaError, read_cameras, read_splats, write_pfm, write_png
from surfel_io.utils import EXIT_OK, StageError, report_error, stage


def show_banner():
    """Display the render banner"""
    print()
    print("=" * 70)
    print("               Surfel Field Rendering                      ")
    print("=" * 70)
    print()


def output_paths(out: Path) -> Dict[str, Path]:
    out = Path(out)
    stem = out.with_suffix("") if out.suffix.lower() == ".png" else out
    return {
        "rgb": stem.with_name(stem.name + ".png"),
        "depth": stem.with_name(stem.name + "_depth.pfm"),
        "normal": stem.with_name(stem.name + "_normal.pfm"),
    }


def run_render(splats_path: Path, cameras_path: Path, out: Path, view: str = "0",
               depth_statistic: DepthStatistic = DepthStatistic.EXPECTED,
               verbose: bool = True) -> Dict[str, Any]:
    """
    Render one camera of a cameras.json file.

    Args:
        view: camera name, or its index in the file
    """
    with stage("load"):
        field = read_splats(splats_path)
        records = read_cameras(cameras_path)
        by_name = {r.name: r for r in records}
        if view in by_name:
            record = by_name[view]
        elif view.isdigit() and int(view) < len(records):
            record = records[int(view)]
        else:
            raise SchemaError(f"{cameras_path}: views: no camera named or indexed {view!r}")

    with stage("render"):
        result = render(field, record.view, RenderConfig(depth_statistic=depth_statistic))

    paths = output_paths(out)
    with stage("write"):
        write_png(paths["rgb"], result.rgb)
        write_pfm(paths["depth"], result.depth)
        write_pfm(paths["normal"], result.normal)

    coverage = float(result.acc.data.mean())
    if verbose:
        intr = record.view.intrinsics
        print(f"[Render] {len(field)} splats -> {record.name} ({intr.width}x{intr.height})")
        if coverage < 1e-6:
            print("[WARN] nothing visible from this camera")
        print(f"[OK] wrote {paths['rgb']}, {paths['depth'].name}, {paths['normal'].name}")
    return {"splats": len(field), "view": record.name, "mean_acc": coverage,
            **{k: str(p) for k, p in paths.items()}}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    import argparse

    parser = argparse.ArgumentParser(description='Render RGB, depth and normals of a splat field')
    parser.add_argument('splats', type=str, help='Splat field PLY')
    parser.add_argument('cameras', type=str, help='cameras.json')
    parser.add_argument('--view', type=str, default='0', help='Camera name or index (default: 0)')
    parser.add_argument('--out', type=str, required=True, help='Output prefix (<out>.png, <out>_depth.pfm, ...)')
    parser.add_argument('--depth-statistic', choices=[s.value for s in DepthStatistic],
                        default=DepthStatistic.EXPECTED.value, help='Rendered depth statistic')
    parser.add_argument('--quiet', action='store_true', help='Only print errors')

    args = parser.parse_args(argv)
    verbose = not args.quiet
    if verbose:
        show_banner()

    try:
        run_render(Path(args.splats), Path(args.cameras), Path(args.out), args.view,
                   DepthStatistic(args.depth_statistic), verbose)
    except StageError as e:
        return report_error(e)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())

"""
Scene bundles: the fixed on-disk layout shared by every subcommand.

    <root>/inputs/cameras.json
    <root>/inputs/images/<name>.png
    <root>/inputs/depth/<name>.pfm        optional GT depth
    <root>/inputs/normals/<name>.pfm      optional GT camera-frame normals
    <root>/inputs/gt.ply                  optional GT mesh (or gt.obj)
    <root>/intermediates/                 splats, per-view maps, loss trace, TSDF dump
    <root>/mesh/mesh.ply
    <root>/metrics/                       JSON records and CSV aggregates
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

from surfel_core.geometry import ImageGrid, View
from surfel_core.models import TriangleMesh
from surfel_io.formats import (
    CameraRecord,
    SchemaError,
    read_cameras,
    read_mesh,
    read_pfm,
    read_png,
    write_cameras,
    write_mesh_ply,
    write_pfm,
    write_png,
)


@dataclass(frozen=True)
class BundleLayout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def inputs(self) -> Path:
        return self.root / "inputs"

    @property
    def intermediates(self) -> Path:
        return self.root / "intermediates"

    @property
    def mesh_dir(self) -> Path:
        return self.root / "mesh"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def cameras(self) -> Path:
        return self.inputs / "cameras.json"

    @property
    def mesh(self) -> Path:
        return self.mesh_dir / "mesh.ply"

    @property
    def splats(self) -> Path:
        return self.intermediates / "splats.ply"

    def gt_mesh(self) -> Optional[Path]:
        for name in ("gt.ply", "gt.obj"):
            if (self.inputs / name).exists():
                return self.inputs / name
        return None

    def create(self):
        for d in (self.inputs, self.intermediates, self.mesh_dir, self.metrics):
            d.mkdir(parents=True, exist_ok=True)


@dataclass(frozen=True, eq=False)
class SceneBundle:
    """Posed input views with optional ground truth, as loaded from disk."""
    layout: BundleLayout
    names: List[str]
    views: List[View]
    gt_mesh: Optional[TriangleMesh] = None
    gt_depths: Optional[List[ImageGrid]] = None
    gt_normals: Optional[List[ImageGrid]] = None
    records: List[CameraRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.views)

    @property
    def root(self) -> Path:
        return self.layout.root

    def cameras_only(self) -> List[View]:
        return [v.without_image() for v in self.views]


def _resolve(base: Path, relative: str, what: str, source: Path) -> Path:
    path = base / relative
    if not path.exists():
        raise SchemaError(f"{source}: {what}: file not found: {path}")
    return path


def load_bundle(root, require_images: bool = True) -> SceneBundle:
    """
    Load and validate a bundle.

    Raises:
        SchemaError: missing or malformed cameras.json, missing referenced
            files, or images whose size disagrees with their camera
    """
    layout = BundleLayout(root)
    if not layout.cameras.exists():
        raise SchemaError(f"{layout.cameras}: missing camera file")
    records = read_cameras(layout.cameras)
    base = layout.cameras.parent

    views, depths, normals = [], [], []
    for i, rec in enumerate(records):
        image = None
        if rec.image is not None:
            image = read_png(_resolve(base, rec.image, f"views[{i}].image", layout.cameras))
            intr = rec.view.intrinsics
            if (image.width, image.height) != (intr.width, intr.height):
                raise SchemaError(
                    f"{layout.cameras}: views[{i}].image: {image.width}x{image.height} image for a "
                    f"{intr.width}x{intr.height} camera"
                )
        elif require_images:
            raise SchemaError(f"{layout.cameras}: views[{i}].image: missing image path")
        views.append(View(image, rec.view.intrinsics, rec.view.pose, rec.view.near, rec.view.far))

        for key, out, channels in (("depth", depths, 1), ("normal", normals, 3)):
            rel = getattr(rec, key)
            if rel is None:
                continue
            grid = read_pfm(_resolve(base, rel, f"views[{i}].{key}", layout.cameras))
            if grid.data.shape != (rec.view.intrinsics.height, rec.view.intrinsics.width, channels):
                raise SchemaError(f"{layout.cameras}: views[{i}].{key}: map shape {grid.data.shape} "
                                  f"does not match the camera")
            out.append(grid)

    for name, maps in (("depth", depths), ("normal", normals)):
        if maps and len(maps) != len(records):
            raise SchemaError(f"{layout.cameras}: {name}: given for some views but not all")

    gt_path = layout.gt_mesh()
    return SceneBundle(
        layout=layout,
        names=[r.name for r in records],
        views=views,
        gt_mesh=read_mesh(gt_path) if gt_path is not None else None,
        gt_depths=depths or None,
        gt_normals=normals or None,
        records=records,
    )


def view_name(index: int) -> str:
    return f"view_{index:03d}"


def write_bundle(root, views: Sequence[View], gt_mesh: Optional[TriangleMesh] = None,
                 gt_depths: Optional[Sequence[ImageGrid]] = None,
                 gt_normals: Optional[Sequence[ImageGrid]] = None,
                 names: Optional[Sequence[str]] = None) -> BundleLayout:
    """Write inputs/ for a set of posed images (and optional ground truth)."""
    layout = BundleLayout(root)
    layout.create()
    names = list(names) if names is not None else [view_name(i) for i in range(len(views))]
    if len(names) != len(views):
        raise ValueError(f"shape mismatch: {len(names)} names for {len(views)} views")

    records = []
    for i, (name, view) in enumerate(zip(names, views)):
        if view.image is None:
            raise ValueError(f"view {name} has no image to write")
        image_rel = f"images/{name}.png"
        write_png(layout.inputs / image_rel, view.image)
        depth_rel = normal_rel = None
        if gt_depths is not None:
            depth_rel = f"depth/{name}.pfm"
            write_pfm(layout.inputs / depth_rel, gt_depths[i])
        if gt_normals is not None:
            normal_rel = f"normals/{name}.pfm"
            write_pfm(layout.inputs / normal_rel, gt_normals[i])
        records.append(CameraRecord(name, view.without_image(), image_rel, depth_rel, normal_rel))
    write_cameras(layout.cameras, records)
    if gt_mesh is not None:
        write_mesh_ply(layout.inputs / "gt.ply", gt_mesh)
    return layout

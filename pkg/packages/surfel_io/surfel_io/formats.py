"""
On-disk formats for scene bundles and pipeline artifacts.

    PNG      8-bit RGB images (values in [0, 1] quantised to 1/255)
    PFM      float maps; little-endian, rows stored bottom to top ("Pf" = 1
             channel, "PF" = 3 channels, scale -1.0)
    PLY      splat fields and triangle meshes (binary little-endian, float64)
    OBJ      triangle meshes (text, via trimesh)
    JSON     cameras.json (schema version 1) and metric records
    TSDF     raw volume dump: magic line, JSON header line, float32 tsdf then
             float32 weight, both little-endian C order
    CSV      fit loss traces

Every writer is deterministic, so write -> read -> write reproduces the same
bytes.
"""

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TypedDict, Union

import numpy as np
import trimesh
from PIL import Image
from plyfile import PlyData, PlyElement
from trimesh.exchange.obj import export_obj

from surfel_core.fit import LossRecord
from surfel_core.geometry import CameraIntrinsics, CameraPose, ImageGrid, UnitQuaternion, View
from surfel_core.meshing import TsdfVolume
from surfel_core.models import SplatField, TriangleMesh


PathLike = Union[str, Path]

CAMERAS_VERSION = 1
TSDF_MAGIC = b"SURFEL-TSDF\n"
SPLAT_PLY_COMMENT = "surfel field v1"


class SchemaError(ValueError):
    """A file on disk does not match its documented layout."""


# ============================================================================
# CAMERA SCHEMA
# ============================================================================

class CameraEntry(TypedDict, total=False):
    """One view in cameras.json."""
    name: str                       # Unique view name, e.g. "view_000"
    image: str                      # PNG path relative to cameras.json
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    q: List[float]                  # World-to-camera rotation, wxyz
    t: List[float]                  # World-to-camera translation
    near: float
    far: float
    depth: str                      # Optional GT depth PFM (camera z, 0 = no surface)
    normal: str                     # Optional GT normal PFM (camera frame)


class CamerasFile(TypedDict):
    """Complete content of cameras.json."""
    version: int
    views: List[CameraEntry]


@dataclass(frozen=True, eq=False)
class CameraRecord:
    """A validated cameras.json entry; `view` carries no image."""
    name: str
    view: View
    image: Optional[str] = None
    depth: Optional[str] = None
    normal: Optional[str] = None


_NUMBER_FIELDS = ("fx", "fy", "cx", "cy", "near", "far")
_PATH_FIELDS = ("image", "depth", "normal")


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _check_vector(source, i: int, entry: dict, name: str, length: int) -> List[float]:
    value = entry.get(name)
    if not isinstance(value, list) or len(value) != length or not all(_is_number(c) for c in value):
        raise SchemaError(f"{source}: views[{i}].{name}: expected a list of {length} numbers, got {value!r}")
    return [float(c) for c in value]


def parse_cameras(doc: Any, source: PathLike = "cameras.json") -> List[CameraRecord]:
    """Validate a decoded cameras.json document and build its views."""
    if not isinstance(doc, dict):
        raise SchemaError(f"{source}: top level must be an object")
    if doc.get("version") != CAMERAS_VERSION:
        raise SchemaError(f"{source}: version: expected {CAMERAS_VERSION}, got {doc.get('version')!r}")
    entries = doc.get("views")
    if not isinstance(entries, list) or not entries:
        raise SchemaError(f"{source}: views: expected a non-empty list")

    records, names = [], set()
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise SchemaError(f"{source}: views[{i}]: expected an object")
        name = entry.get("name")
        if not isinstance(name, str) or not name:
            raise SchemaError(f"{source}: views[{i}].name: expected a non-empty string")
        if name in names:
            raise SchemaError(f"{source}: views[{i}].name: duplicate view name {name!r}")
        names.add(name)
        for key in ("width", "height"):
            value = entry.get(key)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise SchemaError(f"{source}: views[{i}].{key}: expected a positive integer, got {value!r}")
        for key in _NUMBER_FIELDS:
            if not _is_number(entry.get(key)):
                raise SchemaError(f"{source}: views[{i}].{key}: expected a number, got {entry.get(key)!r}")
        for key in _PATH_FIELDS:
            if key in entry and not isinstance(entry[key], str):
                raise SchemaError(f"{source}: views[{i}].{key}: expected a relative path string")
        q = _check_vector(source, i, entry, "q", 4)
        t = _check_vector(source, i, entry, "t", 3)

        try:
            intr = CameraIntrinsics(float(entry["fx"]), float(entry["fy"]), float(entry["cx"]),
                                    float(entry["cy"]), entry["width"], entry["height"])
        except ValueError as e:
            raise SchemaError(f"{source}: views[{i}] intrinsics: {e}") from e
        try:
            pose = CameraPose(UnitQuaternion(*q), tuple(t))
        except ValueError as e:
            raise SchemaError(f"{source}: views[{i}].q: {e}") from e
        try:
            view = View(None, intr, pose, float(entry["near"]), float(entry["far"]))
        except ValueError as e:
            raise SchemaError(f"{source}: views[{i}].near/far: {e}") from e
        records.append(CameraRecord(name, view, entry.get("image"), entry.get("depth"), entry.get("normal")))
    return records


def camera_entry(record: CameraRecord) -> CameraEntry:
    intr = record.view.intrinsics
    q = record.view.pose.q
    entry: CameraEntry = {
        "name": record.name,
        "width": int(intr.width),
        "height": int(intr.height),
        "fx": float(intr.fx),
        "fy": float(intr.fy),
        "cx": float(intr.cx),
        "cy": float(intr.cy),
        "q": [float(q.w), float(q.x), float(q.y), float(q.z)],
        "t": [float(c) for c in record.view.pose.t],
        "near": float(record.view.near),
        "far": float(record.view.far),
    }
    for key in _PATH_FIELDS:
        value = getattr(record, key)
        if value is not None:
            entry[key] = value
    return entry


def read_cameras(path: PathLike) -> List[CameraRecord]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from e
    return parse_cameras(doc, path)


def write_cameras(path: PathLike, records: Sequence[CameraRecord]):
    doc: CamerasFile = {"version": CAMERAS_VERSION, "views": [camera_entry(r) for r in records]}
    write_json(path, doc)


# ============================================================================
# JSON / CSV
# ============================================================================

def write_json(path: PathLike, record: Dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(record, f, indent=2, allow_nan=False)
        f.write("\n")


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON: {e}") from e


TRACE_COLUMNS = ("step", "pho", "wcd", "normal", "total")


def write_trace_csv(path: PathLike, trace: Sequence[LossRecord]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for r in trace:
            writer.writerow([r.step, repr(r.pho), repr(r.wcd), repr(r.normal), repr(r.total)])


def read_trace_csv(path: PathLike) -> List[LossRecord]:
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as f:
        rows = list(csv.reader(f))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise SchemaError(f"{path}: header: expected {','.join(TRACE_COLUMNS)}")
    try:
        return [LossRecord(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4])) for r in rows[1:]]
    except (ValueError, IndexError) as e:
        raise SchemaError(f"{path}: malformed trace row: {e}") from e


# ============================================================================
# IMAGES
# ============================================================================

def _as_data(grid) -> np.ndarray:
    data = grid.data if isinstance(grid, ImageGrid) else np.asarray(grid, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def write_png(path: PathLike, grid):
    """Write a 1- or 3-channel grid with values in [0, 1] as an 8-bit PNG."""
    data = _as_data(grid)
    if data.shape[2] not in (1, 3):
        raise ValueError(f"PNG needs 1 or 3 channels, got {data.shape[2]}")
    pixels = np.round(np.clip(data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PNG")


def read_png(path: PathLike) -> ImageGrid:
    """8-bit PNG as a 3-channel grid in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as e:
        if not path.exists():
            raise
        raise SchemaError(f"{path}: unreadable image: {e}") from e
    return ImageGrid(pixels / 255.0)


def write_pfm(path: PathLike, grid):
    data = _as_data(grid)
    channels = data.shape[2]
    if channels not in (1, 3):
        raise ValueError(f"PFM needs 1 or 3 channels, got {channels}")
    height, width = data.shape[:2]
    header = f"{'PF' if channels == 3 else 'Pf'}\n{width} {height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(data[::-1], dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + body)


def read_pfm(path: PathLike) -> ImageGrid:
    path = Path(path)
    raw = path.read_bytes()
    lines, offset = [], 0
    for _ in range(3):
        end = raw.find(b"\n", offset)
        if end < 0:
            raise SchemaError(f"{path}: truncated PFM header")
        lines.append(raw[offset:end].decode("ascii", errors="replace").strip())
        offset = end + 1

    kind, size, scale_text = lines
    if kind not in ("PF", "Pf"):
        raise SchemaError(f"{path}: magic: expected PF or Pf, got {kind!r}")
    try:
        width, height = (int(x) for x in size.split())
        scale = float(scale_text)
    except ValueError as e:
        raise SchemaError(f"{path}: malformed PFM header: {e}") from e
    if width <= 0 or height <= 0 or scale == 0:
        raise SchemaError(f"{path}: invalid PFM size or scale")

    channels = 3 if kind == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = width * height * channels
    if len(raw) - offset != 4 * count:
        raise SchemaError(f"{path}: payload is {len(raw) - offset} bytes, expected {4 * count}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(height, width, channels)
    return ImageGrid(data[::-1].astype(np.float64))


# ============================================================================
# PLY / OBJ
# ============================================================================

_SPLAT_DTYPE = [
    ("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
    ("scale_0", "<f8"), ("scale_1", "<f8"),
    ("rot_0", "<f8"), ("rot_1", "<f8"), ("rot_2", "<f8"), ("rot_3", "<f8"),
    ("opacity", "<f8"),
    ("red", "<f8"), ("green", "<f8"), ("blue", "<f8"),
    ("view_index", "<i4"), ("pixel_u", "<i4"), ("pixel_v", "<i4"),
]


def write_splats(path: PathLike, field: SplatField):
    """Splat field as binary PLY: raw (not activated) parameter values."""
    rows = np.empty(len(field), dtype=_SPLAT_DTYPE)
    for k, name in enumerate(("x", "y", "z")):
        rows[name] = field.mu[:, k]
    rows["scale_0"], rows["scale_1"] = field.scales[:, 0], field.scales[:, 1]
    for k in range(4):
        rows[f"rot_{k}"] = field.quats[:, k]
    rows["opacity"] = field.opacity
    for k, name in enumerate(("red", "green", "blue")):
        rows[name] = field.colors[:, k]
    rows["view_index"] = field.view_index
    rows["pixel_u"], rows["pixel_v"] = field.pixels[:, 0], field.pixels[:, 1]

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PlyData([PlyElement.describe(rows, "vertex")], byte_order="<",
            comments=[SPLAT_PLY_COMMENT]).write(str(path))


def _read_ply(path: Path) -> PlyData:
    try:
        return PlyData.read(str(path), mmap=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise SchemaError(f"{path}: unreadable PLY: {e}") from e


def _element_names(ply: PlyData) -> set:
    return {el.name for el in ply.elements}


def read_splats(path: PathLike) -> SplatField:
    path = Path(path)
    ply = _read_ply(path)
    if "vertex" not in _element_names(ply):
        raise SchemaError(f"{path}: missing 'vertex' element")
    v = ply["vertex"].data
    missing = [name for name, _ in _SPLAT_DTYPE if name not in v.dtype.names]
    if missing:
        raise SchemaError(f"{path}: vertex properties missing: {', '.join(missing)}")

    def cols(*names):
        return np.stack([np.asarray(v[n], dtype=np.float64) for n in names], axis=1)

    try:
        return SplatField(
            mu=cols("x", "y", "z"),
            scales=cols("scale_0", "scale_1"),
            quats=cols("rot_0", "rot_1", "rot_2", "rot_3"),
            opacity=np.asarray(v["opacity"], dtype=np.float64),
            colors=cols("red", "green", "blue"),
            view_index=np.asarray(v["view_index"], dtype=np.int64),
            pixels=np.stack([v["pixel_u"], v["pixel_v"]], axis=1).astype(np.int64),
        )
    except ValueError as e:
        raise SchemaError(f"{path}: invalid splat values: {e}") from e


def write_mesh_ply(path: PathLike, mesh: TriangleMesh, text: bool = False):
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if mesh.vertex_normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    verts = np.empty(mesh.vertices.shape[0], dtype=fields)
    for k, name in enumerate(("x", "y", "z")):
        verts[name] = mesh.vertices[:, k]
    if mesh.vertex_normals is not None:
        for k, name in enumerate(("nx", "ny", "nz")):
            verts[name] = mesh.vertex_normals[:, k]
    faces = np.empty(mesh.faces.shape[0], dtype=[("vertex_indices", "<i4", (3,))])
    faces["vertex_indices"] = mesh.faces

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    elements = [PlyElement.describe(verts, "vertex"),
                PlyElement.describe(faces, "face", len_types={"vertex_indices": "u1"})]
    PlyData(elements, text=text, byte_order="<").write(str(path))


def read_mesh_ply(path: PathLike) -> TriangleMesh:
    path = Path(path)
    ply = _read_ply(path)
    if not {"vertex", "face"} <= _element_names(ply):
        raise SchemaError(f"{path}: mesh PLY needs 'vertex' and 'face' elements")
    v = ply["vertex"].data
    vertices = np.stack([np.asarray(v[n], dtype=np.float64) for n in ("x", "y", "z")], axis=1)
    normals = None
    if all(n in v.dtype.names for n in ("nx", "ny", "nz")):
        normals = np.stack([np.asarray(v[n], dtype=np.float64) for n in ("nx", "ny", "nz")], axis=1)

    f = ply["face"].data
    prop = "vertex_indices" if "vertex_indices" in f.dtype.names else "vertex_index"
    if prop not in f.dtype.names:
        raise SchemaError(f"{path}: face element has no vertex_indices property")
    polys = [np.asarray(p, dtype=np.int64) for p in f[prop]]
    faces = _triangulate(polys, path)
    try:
        return TriangleMesh(vertices, faces, normals)
    except ValueError as e:
        raise SchemaError(f"{path}: {e}") from e


def _triangulate(polys: Sequence[np.ndarray], path: Path) -> np.ndarray:
    tris = []
    for p in polys:
        if p.size < 3:
            raise SchemaError(f"{path}: face with {p.size} vertices")
        for k in range(1, p.size - 1):
            tris.append((p[0], p[k], p[k + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def write_mesh_obj(path: PathLike, mesh: TriangleMesh):
    # fixed 17 decimals; dyadic coordinates survive a round trip exactly
    tm = trimesh.Trimesh(mesh.vertices, mesh.faces, process=False)
    text = export_obj(tm, include_normals=False, include_color=False, include_texture=False, digits=17)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def read_mesh_obj(path: PathLike) -> TriangleMesh:
    path = Path(path)
    try:
        tm = trimesh.load(str(path), file_type="obj", force="mesh", process=False, maintain_order=True)
    except (ValueError, IndexError, KeyError) as e:
        raise SchemaError(f"{path}: malformed OBJ ({e})") from e
    if not isinstance(tm, trimesh.Trimesh):
        raise SchemaError(f"{path}: no triangle mesh in OBJ")
    try:
        return TriangleMesh(np.asarray(tm.vertices, dtype=np.float64).reshape(-1, 3),
                            np.asarray(tm.faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as e:
        raise SchemaError(f"{path}: {e}") from e


def read_mesh(path: PathLike) -> TriangleMesh:
    """Load a triangle mesh from .ply or .obj."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return read_mesh_ply(path)
    if suffix == ".obj":
        return read_mesh_obj(path)
    raise SchemaError(f"{path}: unsupported mesh format {suffix!r} (expected .ply or .obj)")


def write_mesh(path: PathLike, mesh: TriangleMesh):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        write_mesh_obj(path, mesh)
    else:
        write_mesh_ply(path, mesh)


# ============================================================================
# TSDF DUMP
# ============================================================================

def write_tsdf(path: PathLike, vol: TsdfVolume):
    header = {
        "version": 1,
        "dims": list(vol.dims),
        "origin": [float(c) for c in vol.origin],
        "voxel_size": float(vol.voxel_size),
        "truncation": float(vol.truncation),
        "dtype": "<f4",
        "order": "C",
    }
    payload = (np.ascontiguousarray(vol.tsdf, dtype="<f4").tobytes()
               + np.ascontiguousarray(vol.weight, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(TSDF_MAGIC + json.dumps(header).encode("ascii") + b"\n" + payload)


def read_tsdf(path: PathLike) -> TsdfVolume:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(TSDF_MAGIC):
        raise SchemaError(f"{path}: magic: not a TSDF dump")
    end = raw.find(b"\n", len(TSDF_MAGIC))
    if end < 0:
        raise SchemaError(f"{path}: truncated header")
    try:
        header = json.loads(raw[len(TSDF_MAGIC):end].decode("ascii"))
        dims = tuple(int(d) for d in header["dims"])
        origin = [float(c) for c in header["origin"]]
        voxel_size = float(header["voxel_size"])
        truncation = float(header["truncation"])
    except (ValueError, KeyError, TypeError) as e:
        raise SchemaError(f"{path}: header: {e}") from e
    if len(dims) != 3 or min(dims) <= 0:
        raise SchemaError(f"{path}: dims: expected 3 positive sizes, got {dims}")

    count = int(np.prod(dims))
    offset = end + 1
    if len(raw) - offset != 8 * count:
        raise SchemaError(f"{path}: payload is {len(raw) - offset} bytes, expected {8 * count}")
    tsdf = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims)
    weight = np.frombuffer(raw, dtype="<f4", count=count, offset=offset + 4 * count).reshape(dims)
    try:
        return TsdfVolume(origin, voxel_size, dims, tsdf.astype(np.float64), weight.astype(np.float64), truncation)
    except ValueError as e:
        raise SchemaError(f"{path}: {e}") from e

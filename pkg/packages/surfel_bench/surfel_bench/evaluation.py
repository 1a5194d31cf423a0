"""
Reconstruction metrics.

- mesh: Chamfer distance plus precision / recall / F1 at a distance
  threshold tau, on area-weighted point samples of both meshes
- depth: AbsRel and AbsDiff over a validity mask
- normal: mean angular error (degrees) and the fraction below 30 degrees
- render diagnostics: PSNR and SSIM

Metric records are plain dicts written as JSON (one per run) and
aggregated into CSV.
"""

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import trimesh

from surfel_core.geometry import ImageGrid
from surfel_core.losses import nearest_neighbors, ssim
from surfel_core.models import PointCloud, TriangleMesh
from surfel_io.formats import write_json


DEFAULT_TAU = 0.05
DEFAULT_SAMPLES = 100_000
NORMAL_THRESHOLD_DEG = 30.0
RECORD_VERSION = 1

Points = Union[PointCloud, np.ndarray]


@dataclass(frozen=True)
class MeshMetrics:
    cd: float
    precision: float
    recall: float
    f1: float
    tau: float
    samples: int


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    abs_diff: float
    pixels: int


@dataclass(frozen=True)
class NormalMetrics:
    mean_deg: float
    frac_lt30: float
    pixels: int


# ============================================================================
# MESH SAMPLING AND POINT-CLOUD METRICS
# ============================================================================

def sample_mesh(mesh: TriangleMesh, n: int, seed: int = 0) -> PointCloud:
    """
    n points uniformly distributed over the mesh surface.

    trimesh draws faces with probability proportional to area, then a
    uniform point inside each drawn face; the same seed gives the same cloud.
    """
    if mesh.is_empty:
        raise ValueError("empty mesh")
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    if not mesh.face_areas().sum() > 0:
        raise ValueError("empty mesh: all faces are degenerate")

    tm = trimesh.Trimesh(mesh.vertices, mesh.faces, process=False)
    points, _ = trimesh.sample.sample_surface(tm, n, seed=seed)
    return PointCloud(np.asarray(points, dtype=np.float64))


def _points(cloud: Points) -> np.ndarray:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("empty cloud")
    return pts


def f_score(precision: float, recall: float) -> float:
    if precision + recall <= 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def mesh_metrics(pred: Points, gt: Points, tau: float = DEFAULT_TAU) -> MeshMetrics:
    """
    Symmetric Chamfer distance and F1 between a predicted and a GT cloud.

    precision: fraction of pred points with a GT point closer than tau
    recall:    fraction of GT points with a pred point closer than tau
    """
    if not tau > 0:
        raise ValueError(f"invalid threshold: tau must be > 0, got {tau}")
    p, g = _points(pred), _points(gt)
    d_pred, _ = nearest_neighbors(p, g)
    d_gt, _ = nearest_neighbors(g, p)
    cd = 0.5 * (float(np.mean(d_pred)) + float(np.mean(d_gt)))
    precision = float(np.mean(d_pred < tau))
    recall = float(np.mean(d_gt < tau))
    return MeshMetrics(cd, precision, recall, f_score(precision, recall), float(tau), int(g.shape[0]))


# ============================================================================
# DEPTH AND NORMAL MAPS
# ============================================================================

def _map(grid, channels: int) -> np.ndarray:
    data = grid.data if isinstance(grid, ImageGrid) else np.asarray(grid, dtype=np.float64)
    if channels == 1 and data.ndim == 3 and data.shape[-1] == 1:
        data = data[..., 0]
    return data


def _mask(mask, shape) -> np.ndarray:
    m = _map(mask, 1).astype(bool)
    if m.shape != shape:
        raise ValueError(f"shape mismatch: mask {m.shape} vs map {shape}")
    if not m.any():
        raise ValueError("empty mask")
    return m


def depth_metrics(pred, gt, mask) -> DepthMetrics:
    """AbsRel = mean(|pred - gt| / gt), AbsDiff = mean(|pred - gt|) over the mask."""
    p, g = _map(pred, 1), _map(gt, 1)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    m = _mask(mask, g.shape)
    if np.any(g[m] <= 0):
        raise ValueError("non-positive depth: ground truth must be > 0 on the mask")
    diff = np.abs(p[m] - g[m])
    return DepthMetrics(float(np.mean(diff / g[m])), float(np.mean(diff)), int(m.sum()))


def angular_error_deg(pred, gt) -> np.ndarray:
    """Per-pixel angle between unit normals, degrees."""
    cos = np.clip(np.sum(pred * gt, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(cos))


def normal_metrics(pred, gt, mask) -> NormalMetrics:
    p, g = _map(pred, 3), _map(gt, 3)
    if p.shape != g.shape or p.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    m = _mask(mask, g.shape[:-1])
    angles = angular_error_deg(p[m], g[m])
    return NormalMetrics(float(np.mean(angles)), float(np.mean(angles < NORMAL_THRESHOLD_DEG)), int(m.sum()))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    x, y = _map(a, 3), _map(b, 3)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


# ============================================================================
# RECORDS
# ============================================================================

def metric_record(scene: str, preset: Optional[str], mesh: Optional[MeshMetrics] = None,
                  depth: Optional[DepthMetrics] = None, normal: Optional[NormalMetrics] = None,
                  **extra: Any) -> Dict[str, Any]:
    """
    One JSON-ready record.

    {"version", "scene", "preset", "tau", "samples",
     "mesh": {cd, precision, recall, f1} | null,
     "depth": {abs_rel, abs_diff, pixels} | null,
     "normal": {mean_deg, frac_lt30, pixels} | null, ...extra}
    """
    record: Dict[str, Any] = {
        "version": RECORD_VERSION,
        "scene": scene,
        "preset": preset,
        "tau": mesh.tau if mesh is not None else None,
        "samples": mesh.samples if mesh is not None else None,
        "mesh": None,
        "depth": asdict(depth) if depth is not None else None,
        "normal": asdict(normal) if normal is not None else None,
    }
    if mesh is not None:
        record["mesh"] = {k: v for k, v in asdict(mesh).items() if k not in ("tau", "samples")}
    record.update(extra)
    return record


def write_metric_record(path, record: Dict[str, Any]):
    write_json(path, record)


def _flatten(record: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in record.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        elif isinstance(value, (list, tuple)):
            flat[name] = " ".join(repr(v) for v in value)
        else:
            flat[name] = "" if value is None else value
    return flat


def write_metrics_csv(path, records: Sequence[Dict[str, Any]]) -> List[str]:
    """
    Aggregate records into one CSV row each (nested keys dotted, e.g.
    mesh.cd). Columns are the union over records in first-seen order.
    """
    rows = [_flatten(r) for r in records]
    columns: List[str] = []
    for row in rows:
        columns.extend(k for k in row if k not in columns)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, restval="", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return columns


__all__ = [
    "DEFAULT_SAMPLES",
    "DEFAULT_TAU",
    "DepthMetrics",
    "MeshMetrics",
    "NormalMetrics",
    "angular_error_deg",
    "depth_metrics",
    "f_score",
    "mesh_metrics",
    "metric_record",
    "normal_metrics",
    "psnr",
    "sample_mesh",
    "ssim",
    "write_metric_record",
    "write_metrics_csv",
]

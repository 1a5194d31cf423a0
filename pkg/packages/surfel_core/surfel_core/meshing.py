"""
Surface extraction from a surfel field.

Depth maps rendered at the input poses (plus slerp-interpolated poses) are
fused into a truncated signed distance volume; marching cubes extracts the
zero level set and the result is culled to the input view frustums.
"""

import time
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from skimage import measure

from surfel_core.geometry import View, bilinear_sample, interpolate_pose, pixel_grid, project_points, unproject_pixels
from surfel_core.models import DepthStatistic, PointCloud, SplatField, TriangleMesh
from surfel_core.rasterizer import RenderConfig, render
from surfel_core.utils import show_progress


@dataclass(frozen=True)
class TsdfConfig:
    voxel_size: float = 0.01
    truncation: float = 0.08
    n_interp: int = 6
    acc_threshold: float = 0.5
    padding: int = 4
    depth_statistic: DepthStatistic = DepthStatistic.EXPECTED
    max_voxels: int = 64_000_000
    far_fraction: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "depth_statistic", DepthStatistic(self.depth_statistic))
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.truncation < self.voxel_size:
            raise ValueError(f"truncation {self.truncation} must be >= voxel_size {self.voxel_size}")
        if self.n_interp < 0:
            raise ValueError(f"n_interp must be >= 0, got {self.n_interp}")


@dataclass(frozen=True, eq=False)
class TsdfVolume:
    """
    Voxel grid with sample points at origin + index * voxel_size.

    tsdf holds normalised signed distances in [-1, 1] (positive in front of
    the surface), weight the number of observations per voxel.
    """
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    tsdf: np.ndarray
    weight: np.ndarray
    truncation: float

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        if self.truncation < self.voxel_size:
            raise ValueError("truncation must be >= voxel_size")
        if self.tsdf.shape != self.dims or self.weight.shape != self.dims:
            raise ValueError(f"shape mismatch: tsdf {self.tsdf.shape} / weight {self.weight.shape} vs dims {self.dims}")

    @classmethod
    def empty(cls, origin, dims, voxel_size: float, truncation: float) -> "TsdfVolume":
        dims = tuple(int(d) for d in dims)
        return cls(origin, voxel_size, dims, np.ones(dims), np.zeros(dims), truncation)

    def voxel_centers(self) -> np.ndarray:
        """World positions of every voxel sample, X x Y x Z x 3."""
        axes = [np.arange(n, dtype=np.float64) for n in self.dims]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return self.origin + grid * self.voxel_size


# ============================================================================
# FUSION
# ============================================================================

def tsdf_integrate(vol: TsdfVolume, depth, view: View,
                   acc=None, acc_threshold: float = 0.5) -> TsdfVolume:
    """
    Fuse one depth map (unit frame weight) into a copy of `vol`.

    Depth is sampled bilinearly where all four neighbouring pixels are valid
    (depth > 0 and, when `acc` is given, acc >= acc_threshold). Voxels further
    than one truncation behind the observed surface are left untouched.
    """
    d = depth.plane() if hasattr(depth, "plane") else np.asarray(depth, dtype=np.float64)
    valid_px = d > 0
    if acc is not None:
        a = acc.plane() if hasattr(acc, "plane") else np.asarray(acc, dtype=np.float64)
        valid_px &= a >= acc_threshold
    centers = vol.voxel_centers().reshape(-1, 3)
    uv, z = project_points(centers, view.intrinsics, view.pose)
    front = z > 0
    uv = np.where(front[:, None], uv, np.nan)
    sampled, inside = bilinear_sample(np.where(valid_px, d, 0.0)[..., None], uv[:, 0], uv[:, 1])
    support, _ = bilinear_sample(valid_px.astype(np.float64)[..., None], uv[:, 0], uv[:, 1])
    # all four bilinear neighbours must be valid
    usable = front & inside & (support[:, 0] >= 1.0 - 1e-9)
    surface = sampled[:, 0]
    sdf = surface - z
    update = usable & (sdf >= -vol.truncation)

    obs = np.clip(sdf[update] / vol.truncation, -1.0, 1.0)
    tsdf = vol.tsdf.reshape(-1).copy()
    weight = vol.weight.reshape(-1).copy()
    w_old = weight[update]
    tsdf[update] = (tsdf[update] * w_old + obs) / (w_old + 1.0)
    weight[update] = w_old + 1.0
    return replace(vol, tsdf=tsdf.reshape(vol.dims), weight=weight.reshape(vol.dims))


# ============================================================================
# MARCHING CUBES
# ============================================================================

def _refine_vertices(verts: np.ndarray, tsdf: np.ndarray) -> np.ndarray:
    """Re-interpolate each vertex on its grid edge in float64."""
    out = verts.astype(np.float64).copy()
    frac = np.abs(out - np.round(out))
    axis = np.argmax(frac, axis=1)
    base = np.round(out).astype(np.int64)
    rows = np.arange(out.shape[0])
    lo = np.floor(out[rows, axis]).astype(np.int64)
    base[rows, axis] = lo
    upper = base.copy()
    upper[rows, axis] = np.minimum(lo + 1, np.array(tsdf.shape)[axis] - 1)
    a = tsdf[base[:, 0], base[:, 1], base[:, 2]]
    b = tsdf[upper[:, 0], upper[:, 1], upper[:, 2]]
    crossing = (a != b) & (np.sign(a) != np.sign(b))
    t = np.where(crossing, a / np.where(crossing, a - b, 1.0), out[rows, axis] - lo)
    out[rows, axis] = lo + t
    return out


def marching_cubes(vol: TsdfVolume) -> TriangleMesh:
    """
    Zero level set of the volume.

    Only cells whose 8 corners all have weight > 0 contribute; a volume
    without a sign change yields an empty mesh.
    """
    observed = vol.weight > 0
    if not observed.any():
        return TriangleMesh.empty()
    values = vol.tsdf[observed]
    if not (values.min() < 0.0 < values.max()):
        return TriangleMesh.empty()
    if min(vol.dims) < 2:
        return TriangleMesh.empty()

    try:
        verts, faces, normals, _ = measure.marching_cubes(
            vol.tsdf.astype(np.float64), level=0.0, mask=observed,
            method="lewiner", allow_degenerate=False,
        )
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    if faces.shape[0] == 0:
        return TriangleMesh.empty()

    verts = _refine_vertices(verts, vol.tsdf)
    cell = np.floor(verts[faces].mean(axis=1)).astype(np.int64)
    cell = np.clip(cell, 0, np.array(vol.dims) - 2)
    keep = np.ones(faces.shape[0], dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                keep &= observed[cell[:, 0] + dx, cell[:, 1] + dy, cell[:, 2] + dz]

    mesh = TriangleMesh(vol.origin + verts * vol.voxel_size, faces, normals)
    keep &= mesh.face_areas() > 1e-12 * vol.voxel_size ** 2
    return mesh.select_faces(keep)


# ============================================================================
# CULLING
# ============================================================================

def in_frustum(points: np.ndarray, view: View) -> np.ndarray:
    """Points with depth in [near, far] that project inside the image bounds."""
    intr = view.intrinsics
    uv, z = project_points(points, intr, view.pose)
    ok = (z >= view.near) & (z <= view.far)
    with np.errstate(invalid="ignore"):
        ok &= (uv[:, 0] >= -0.5) & (uv[:, 0] <= intr.width - 0.5)
        ok &= (uv[:, 1] >= -0.5) & (uv[:, 1] <= intr.height - 0.5)
    return ok


def frustum_cull(geometry: Union[TriangleMesh, PointCloud], views: Sequence[View]):
    """Keep faces (by centroid) or points inside at least one view frustum."""
    if not views:
        raise ValueError("frustum_cull needs at least one view")
    if isinstance(geometry, TriangleMesh):
        if geometry.is_empty:
            return geometry
        centroids = geometry.face_centroids()
        keep = np.zeros(centroids.shape[0], dtype=bool)
        for view in views:
            keep |= in_frustum(centroids, view)
        return geometry.select_faces(keep)
    keep = np.zeros(len(geometry), dtype=bool)
    for view in views:
        keep |= in_frustum(geometry.points, view)
    return geometry.subset(keep)


def split_long_faces(mesh: TriangleMesh, max_edge: float) -> TriangleMesh:
    """
    Midpoint-split faces (1 -> 4) until no edge is longer than max_edge.

    Centroid culling of a coarse mesh (a plane made of two triangles) is only
    as fine as its faces; splitting first bounds the culling error by
    max_edge. The surface and its area are unchanged. Split meshes come back
    as a triangle soup without vertex attributes; a mesh with no long edge
    is returned as is.
    """
    if not max_edge > 0:
        raise ValueError(f"max_edge must be > 0, got {max_edge}")
    tri = mesh.triangles()

    def longest(t):
        return np.linalg.norm(t - np.roll(t, -1, axis=1), axis=2).max(axis=1)

    if mesh.is_empty or not np.any(longest(tri) > max_edge):
        return mesh
    done = []
    while tri.shape[0]:
        long = longest(tri) > max_edge
        done.append(tri[~long])
        a, b, c = tri[long, 0], tri[long, 1], tri[long, 2]
        ab, bc, ca = 0.5 * (a + b), 0.5 * (b + c), 0.5 * (c + a)
        tri = np.concatenate([np.stack(corners, axis=1)
                              for corners in ((a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca))])
    soup = np.concatenate(done)
    return TriangleMesh(soup.reshape(-1, 3), np.arange(3 * soup.shape[0]).reshape(-1, 3))


# ============================================================================
# EXTRACTION
# ============================================================================

def fusion_views(views: Sequence[View], n_interp: int = 6) -> List[View]:
    """Input views followed by n_interp slerp views between the first two."""
    out = list(views)
    if len(views) >= 2 and n_interp > 0:
        a, b = views[0], views[1]
        for k in range(1, n_interp + 1):
            pose = interpolate_pose(a.pose, b.pose, k / (n_interp + 1))
            out.append(View(None, a.intrinsics, pose, a.near, a.far))
    return out


def _frustum_corners(view: View, near: float, far: float) -> np.ndarray:
    intr = view.intrinsics
    u = np.array([-0.5, intr.width - 0.5, intr.width - 0.5, -0.5])
    v = np.array([-0.5, -0.5, intr.height - 0.5, intr.height - 0.5])
    corners = [unproject_pixels(u, v, np.full(4, depth), intr, view.pose) for depth in (near, far)]
    return np.concatenate(corners)


def fuse_field(field: SplatField, views: Sequence[View], cfg: Optional[TsdfConfig] = None,
               verbose: bool = False) -> Optional[TsdfVolume]:
    """
    Render depth at every fusion pose and integrate into a volume fitted to
    the union of their frustums. Returns None when nothing is visible.
    """
    cfg = cfg or TsdfConfig()
    if len(field) == 0:
        raise ValueError("extract_mesh needs a non-empty splat field")
    rcfg = RenderConfig(depth_statistic=cfg.depth_statistic)
    frames = []
    for view in fusion_views(views, cfg.n_interp):
        out = render(field, view, rcfg)
        d = out.depth.plane()
        valid = (out.acc.plane() >= cfg.acc_threshold) & (d > 0)
        if valid.any():
            frames.append((view, out, float(d[valid].max())))
    if not frames:
        if verbose:
            print("[WARN] no rendered coverage: empty mesh")
        return None

    corners = []
    for view, _, max_depth in frames:
        far = min(cfg.far_fraction * view.far, max_depth + cfg.truncation)
        corners.append(_frustum_corners(view, view.near, max(far, view.near)))
    corners = np.concatenate(corners)
    pad = cfg.padding * cfg.voxel_size
    lo = corners.min(axis=0) - pad
    hi = corners.max(axis=0) + pad
    dims = np.ceil((hi - lo) / cfg.voxel_size).astype(np.int64) + 1
    n_voxels = int(np.prod(dims))
    if n_voxels > cfg.max_voxels:
        raise ValueError(f"volume too large: {n_voxels} voxels exceeds max_voxels={cfg.max_voxels}")

    vol = TsdfVolume.empty(lo, dims, cfg.voxel_size, cfg.truncation)
    if verbose:
        print(f"[Mesh] volume {tuple(dims)} at voxel {cfg.voxel_size}, {len(frames)} frames")
    start = time.time()
    for i, (view, out, _) in enumerate(frames, start=1):
        vol = tsdf_integrate(vol, out.depth, view, out.acc, cfg.acc_threshold)
        if verbose:
            show_progress(i, len(frames), start, prefix="    ")
    return vol


def extract_mesh_and_volume(field: SplatField, views: Sequence[View], cfg: Optional[TsdfConfig] = None,
                            verbose: bool = False) -> Tuple[TriangleMesh, Optional[TsdfVolume]]:
    """extract_mesh() plus the fused volume (None when nothing is visible)."""
    vol = fuse_field(field, views, cfg, verbose)
    if vol is None:
        return TriangleMesh.empty(), None
    return frustum_cull(marching_cubes(vol), views), vol


def extract_mesh(field: SplatField, views: Sequence[View], cfg: Optional[TsdfConfig] = None,
                 verbose: bool = False) -> TriangleMesh:
    """Fuse rendered depth, run marching cubes and cull to the input frustums."""
    return extract_mesh_and_volume(field, views, cfg, verbose)[0]

"""
Analytic synthetic scenes.

Builds textured ground-truth meshes (plane, box room, sphere room) and renders
exact images, depth maps and camera-frame normal maps by ray casting. The
renders serve as pseudo ground truth for normal supervision and as the
evaluation oracle; nothing here shares code with the rasterizer.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from surfel_core.geometry import (
    CameraIntrinsics,
    CameraPose,
    ImageGrid,
    View,
    camera_rays,
    camera_to_world,
    pixel_grid,
    world_to_camera,
)
from surfel_core.models import SceneKind, TexturePattern, TriangleMesh
from surfel_core.utils import normalize_vectors


# Möller–Trumbore tolerances
_DET_EPS = 1e-14
_EDGE_EPS = 1e-12
_Z_EPS = 1e-9

_GOLDEN = 0x9E3779B97F4A7C15
_MIX_Y = 0xC2B2AE3D27D4EB4F
_MIX_Z = 0x165667B19E3779F9
_MIX_SEED = 0xD6E8FEB86659FD93

BLANK_GREY = 0.5


@dataclass(frozen=True)
class TextureSpec:
    """
    Procedural solid texture evaluated at world positions.

    blank_band: optional (axis, lo, hi); points with lo <= p[axis] <= hi are flat grey.
    """
    pattern: TexturePattern = TexturePattern.NOISE_STRIPES
    frequency: float = 6.0
    blank_band: Optional[Tuple[int, float, float]] = None
    octaves: int = 3

    def __post_init__(self):
        if not self.frequency > 0:
            raise ValueError(f"texture frequency must be > 0, got {self.frequency}")
        object.__setattr__(self, "pattern", TexturePattern(self.pattern))
        if self.blank_band is not None:
            axis, lo, hi = self.blank_band
            if axis not in (0, 1, 2) or not lo < hi:
                raise ValueError(f"invalid blank band {self.blank_band}")


@dataclass(frozen=True)
class SceneSpec:
    """
    Synthetic scene description.

    dimensions: (width, height) for a plane in z = 0, (sx, sy, sz) for a box
    room centred at the origin, (radius,) for a sphere room centred at the origin.
    """
    kind: SceneKind
    dimensions: Tuple[float, ...]
    texture: TextureSpec = field(default_factory=TextureSpec)
    seed: int = 0
    subdivisions: int = 4

    def __post_init__(self):
        object.__setattr__(self, "kind", SceneKind(self.kind))
        dims = tuple(float(d) for d in self.dimensions)
        expected = {SceneKind.TEXTURED_PLANE: 2, SceneKind.BOX_ROOM: 3, SceneKind.SPHERE_ROOM: 1}[self.kind]
        if len(dims) != expected:
            raise ValueError(f"dimensions: {self.kind.value} needs {expected} values, got {len(dims)}")
        if min(dims) <= 0:
            raise ValueError(f"dimensions must be positive, got {dims}")
        if self.subdivisions < 0:
            raise ValueError(f"subdivisions must be >= 0, got {self.subdivisions}")
        object.__setattr__(self, "dimensions", dims)


@dataclass(frozen=True, eq=False)
class OracleRender:
    """Exact image, camera-space depth (0 = no hit) and camera-frame normals."""
    image: ImageGrid
    depth: ImageGrid
    normal: ImageGrid

    @property
    def valid(self) -> np.ndarray:
        return self.depth.plane() > 0


# ============================================================================
# PROCEDURAL TEXTURE
# ============================================================================

def _lattice_hash(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray, seed: int) -> np.ndarray:
    """splitmix64-style hash of integer lattice points -> uniform [0, 1)."""
    h = (ix.astype(np.int64).view(np.uint64) * np.uint64(_GOLDEN)
         ^ iy.astype(np.int64).view(np.uint64) * np.uint64(_MIX_Y)
         ^ iz.astype(np.int64).view(np.uint64) * np.uint64(_MIX_Z)
         ^ np.uint64((seed * _MIX_SEED) & 0xFFFFFFFFFFFFFFFF))
    h ^= h >> np.uint64(30)
    h *= np.uint64(0xBF58476D1CE4E5B9)
    h ^= h >> np.uint64(27)
    h *= np.uint64(0x94D049BB133111EB)
    h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """Smooth lattice value noise in [0, 1] at (N, 3) points (unit lattice)."""
    base = np.floor(points)
    frac = points - base
    smooth = frac * frac * (3.0 - 2.0 * frac)
    base = base.astype(np.int64)
    out = np.zeros(points.shape[0])
    for corner in range(8):
        offset = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        lattice = base + offset
        weight = np.prod(np.where(offset == 1, smooth, 1.0 - smooth), axis=1)
        out += weight * _lattice_hash(lattice[:, 0], lattice[:, 1], lattice[:, 2], seed)
    return out


def texture_color(texture: TextureSpec, points: np.ndarray, seed: int = 0) -> np.ndarray:
    """RGB in [0, 1] of the solid texture at world points (N, 3)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    scaled = points * texture.frequency
    rgb = np.empty((points.shape[0], 3))
    stripe_dir = np.array([1.0, 0.6, 0.3]) / np.linalg.norm([1.0, 0.6, 0.3])
    for c in range(3):
        stream = seed * 3 + c
        noise = np.zeros(points.shape[0])
        total = 0.0
        for octave in range(texture.octaves):
            amp = 0.5 ** octave
            noise += amp * value_noise(scaled * (2.0 ** octave) + 17.0 * c, stream)
            total += amp
        noise /= total
        phase = 2.0 * np.pi * (scaled @ stripe_dir) + 2.0 * np.pi * c / 3.0
        stripes = 0.5 + 0.5 * np.sin(phase)
        if texture.pattern == TexturePattern.NOISE:
            value = noise
        elif texture.pattern == TexturePattern.STRIPES:
            value = stripes
        else:
            value = 0.65 * noise + 0.35 * stripes
        rgb[:, c] = np.clip(0.5 + 1.6 * (value - 0.5), 0.0, 1.0)
    if texture.blank_band is not None:
        axis, lo, hi = texture.blank_band
        blank = (points[:, axis] >= lo) & (points[:, axis] <= hi)
        rgb[blank] = BLANK_GREY
    return rgb


# ============================================================================
# SCENE MESHES
# ============================================================================

def _orient_inward(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Flip faces whose normal points away from the origin."""
    tri = vertices[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    outward = np.sum(normals * tri.mean(axis=1), axis=1) > 0
    faces = faces.copy()
    faces[outward] = faces[outward][:, [0, 2, 1]]
    return faces


def _spherical_texcoords(vertices: np.ndarray) -> np.ndarray:
    unit, _ = normalize_vectors(vertices)
    u = 0.5 + np.arctan2(unit[:, 0], unit[:, 2]) / (2.0 * np.pi)
    v = 0.5 - np.arcsin(np.clip(unit[:, 1], -1.0, 1.0)) / np.pi
    return np.stack([u, v], axis=1)


def _icosphere(subdivisions: int) -> Tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    vertices = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]

    for _ in range(subdivisions):
        midpoints = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in midpoints:
                m = vertices[a] + vertices[b]
                vertices.append(m / np.linalg.norm(m))
                midpoints[key] = len(vertices) - 1
            return midpoints[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return np.array(vertices), np.array(faces, dtype=np.int64)


def make_scene(spec: SceneSpec) -> TriangleMesh:
    """Ground-truth mesh for a scene spec. Rooms are closed with inward-facing triangles."""
    if spec.kind == SceneKind.TEXTURED_PLANE:
        sx, sy = spec.dimensions
        vertices = np.array([
            [-sx / 2, -sy / 2, 0.0],
            [sx / 2, -sy / 2, 0.0],
            [sx / 2, sy / 2, 0.0],
            [-sx / 2, sy / 2, 0.0],
        ])
        # Front side faces -z, where the benchmark cameras sit.
        faces = np.array([[0, 2, 1], [0, 3, 2]], dtype=np.int64)
        texcoords = vertices[:, :2] / np.array([sx, sy]) + 0.5
        return TriangleMesh(vertices, faces, np.tile([0.0, 0.0, -1.0], (4, 1)), texcoords)

    if spec.kind == SceneKind.BOX_ROOM:
        half = np.array(spec.dimensions) / 2.0
        corners = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64)
        vertices = (corners * 2.0 - 1.0) * half
        quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
        faces = np.array([tri for a, b, c, d in quads for tri in ((a, b, c), (a, c, d))], dtype=np.int64)
        faces = _orient_inward(vertices, faces)
        return TriangleMesh(vertices, faces, -normalize_vectors(vertices)[0], _spherical_texcoords(vertices))

    radius = spec.dimensions[0]
    unit, faces = _icosphere(spec.subdivisions)
    vertices = unit * radius
    faces = _orient_inward(vertices, faces)
    return TriangleMesh(vertices, faces, -unit, _spherical_texcoords(vertices))


# ============================================================================
# RAY CASTING
# ============================================================================

def _intersect_triangle(rays: np.ndarray, v0: np.ndarray, v1: np.ndarray, v2: np.ndarray) -> np.ndarray:
    """
    Möller–Trumbore from the camera origin along rays (P, 3) with z = 1.

    Returns the hit parameter t (= camera depth) or inf on a miss.
    """
    e1 = v1 - v0
    e2 = v2 - v0
    pvec = np.cross(rays, e2)
    det = pvec @ e1
    t = np.full(rays.shape[0], np.inf)
    ok = np.abs(det) > _DET_EPS
    if not np.any(ok):
        return t
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = -v0
    a = (pvec @ tvec) * inv
    qvec = np.cross(tvec, e1)
    b = (rays @ qvec) * inv
    hit_t = float(e2 @ qvec) * inv
    hit = ok & (a >= -_EDGE_EPS) & (b >= -_EDGE_EPS) & (a + b <= 1.0 + _EDGE_EPS) & (hit_t > _Z_EPS)
    t[hit] = hit_t[hit]
    return t


def raycast_render(mesh: TriangleMesh, view: View, texture: TextureSpec, seed: int = 0) -> OracleRender:
    """
    Exact nearest-hit render of a mesh.

    Hits outside [near, far] count as misses; misses have depth 0, black
    colour and zero normal. Normals are face normals in the camera frame,
    flipped to face the camera.
    """
    intr = view.intrinsics
    H, W = intr.height, intr.width
    u, v = pixel_grid(H, W)
    rays = camera_rays(u, v, intr).reshape(-1, 3)
    verts_cam = world_to_camera(mesh.vertices, view.pose)

    best_t = np.full(H * W, np.inf)
    best_face = np.full(H * W, -1, dtype=np.int64)
    for f, (i0, i1, i2) in enumerate(mesh.faces):
        tri = verts_cam[[i0, i1, i2]]
        z = tri[:, 2]
        if np.all(z <= _Z_EPS):
            continue
        if np.all(z > _Z_EPS):
            pu = intr.fx * tri[:, 0] / z + intr.cx
            pv = intr.fy * tri[:, 1] / z + intr.cy
            x0 = max(int(np.floor(pu.min())), 0)
            x1 = min(int(np.ceil(pu.max())), W - 1)
            y0 = max(int(np.floor(pv.min())), 0)
            y1 = min(int(np.ceil(pv.max())), H - 1)
            if x0 > x1 or y0 > y1:
                continue
            ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
            idx = (ys * W + xs).ravel()
        else:
            idx = np.arange(H * W)
        t = _intersect_triangle(rays[idx], tri[0], tri[1], tri[2])
        closer = t < best_t[idx]
        best_t[idx[closer]] = t[closer]
        best_face[idx[closer]] = f

    hit = np.isfinite(best_t) & (best_t >= view.near) & (best_t <= view.far)
    depth = np.where(hit, best_t, 0.0)

    points_cam = rays * depth[:, None]
    world_points = camera_to_world(points_cam[hit], view.pose)
    image = np.zeros((H * W, 3))
    image[hit] = texture_color(texture, world_points, seed)

    face_n = normalize_vectors(mesh.face_normals())[0]
    normals = np.zeros((H * W, 3))
    n_cam = face_n[best_face[hit]] @ view.pose.rotation.T
    facing = np.sum(n_cam * points_cam[hit], axis=1) > 0
    n_cam[facing] *= -1.0
    normals[hit] = normalize_vectors(n_cam)[0]

    return OracleRender(
        image=ImageGrid(image.reshape(H, W, 3)),
        depth=ImageGrid(depth.reshape(H, W, 1)),
        normal=ImageGrid(normals.reshape(H, W, 3)),
    )


def perturb_normals(render: OracleRender, sigma_deg: float, seed: int = 0) -> OracleRender:
    """
    Rotate each valid normal about a random tangent axis by |N(0, sigma)| degrees.

    Draws are made for every pixel in row-major order from a Philox stream,
    so the noise at a pixel depends only on (seed, pixel index).
    """
    if sigma_deg < 0:
        raise ValueError(f"sigma_deg must be >= 0, got {sigma_deg}")
    if sigma_deg == 0:
        return render
    normals = render.normal.data.reshape(-1, 3)
    n_pix = normals.shape[0]
    rng = np.random.Generator(np.random.Philox(key=seed))
    angles = np.abs(rng.normal(0.0, np.deg2rad(sigma_deg), size=n_pix))
    axes = rng.normal(size=(n_pix, 3))
    valid = render.valid.reshape(-1)

    n = normals[valid]
    r = axes[valid]
    tangent = r - n * np.sum(n * r, axis=1, keepdims=True)
    tangent, _ = normalize_vectors(tangent)
    rotated = Rotation.from_rotvec(tangent * angles[valid][:, None]).apply(n)
    out = normals.copy()
    out[valid] = normalize_vectors(rotated)[0]
    return OracleRender(render.image, render.depth, ImageGrid(out.reshape(render.normal.data.shape)))


def finite_difference_normals(depth: ImageGrid, view: View) -> Tuple[np.ndarray, np.ndarray]:
    """
    Camera-frame normals from central differences of back-projected depth.

    Returns (normals H x W x 3, valid H x W); valid pixels have a fully
    valid 3 x 3 neighbourhood.
    """
    intr = view.intrinsics
    d = depth.plane()
    u, v = pixel_grid(intr.height, intr.width)
    points = camera_rays(u, v, intr) * d[..., None]
    du = np.zeros_like(points)
    dv = np.zeros_like(points)
    du[:, 1:-1] = points[:, 2:] - points[:, :-2]
    dv[1:-1, :] = points[2:, :] - points[:-2, :]
    normals, _ = normalize_vectors(np.cross(du, dv))
    facing = np.sum(normals * points, axis=-1) > 0
    normals[facing] *= -1.0

    hit = d > 0
    valid = np.zeros_like(hit)
    valid[1:-1, 1:-1] = hit[1:-1, 1:-1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            valid[1:-1, 1:-1] &= hit[1 + dy:d.shape[0] - 1 + dy, 1 + dx:d.shape[1] - 1 + dx]
    return np.where(valid[..., None], normals, 0.0), valid


# ============================================================================
# STANDARD VIEWS
# ============================================================================

def benchmark_views(spec: SceneSpec, n_views: int = 2, width: int = 64, height: int = 64,
                    focal: float = 1.0, baseline: Optional[float] = None,
                    distance: float = 2.0, near: Optional[float] = None,
                    far: Optional[float] = None) -> List[View]:
    """
    Standard image-less views for a scene kind.

    All cameras look along world +z and are translated along x, centred on
    x = 0. The plane is viewed from z = -distance; rooms are viewed from
    inside, a quarter of the way from the centre to the back wall.
    """
    if n_views < 1:
        raise ValueError(f"n_views must be >= 1, got {n_views}")
    intr = CameraIntrinsics(fx=focal * width, fy=focal * width, cx=width / 2.0, cy=height / 2.0,
                            width=width, height=height)
    if spec.kind == SceneKind.TEXTURED_PLANE:
        z_cam = -distance
        default_baseline = 0.25 * distance
        default_near, default_far = 0.25 * distance, 4.0 * distance
    elif spec.kind == SceneKind.BOX_ROOM:
        z_cam = -0.25 * spec.dimensions[2]
        default_baseline = 0.1 * spec.dimensions[0]
        default_near, default_far = 0.05, 2.0 * max(spec.dimensions)
    else:
        z_cam = -0.25 * spec.dimensions[0]
        default_baseline = 0.1 * spec.dimensions[0]
        default_near, default_far = 0.05, 4.0 * spec.dimensions[0]

    baseline = default_baseline if baseline is None else baseline
    near = default_near if near is None else near
    far = default_far if far is None else far
    views = []
    for k in range(n_views):
        x = (k - (n_views - 1) / 2.0) * baseline
        pose = CameraPose.from_center(np.eye(3), (x, 0.0, z_cam))
        views.append(View(image=None, intrinsics=intr, pose=pose, near=near, far=far))
    return views

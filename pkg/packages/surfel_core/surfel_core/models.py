"""
Data models for the surfel pipeline.

Shared containers passed between modules: enumerations, point clouds,
triangle meshes, surfel fields, normal predictions and loss settings.
Camera types live in surfel_core.geometry.
"""

from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from surfel_core.geometry import UnitQuaternion, quats_to_normals


class SceneKind(str, Enum):
    TEXTURED_PLANE = "textured_plane"
    BOX_ROOM = "box_room"
    SPHERE_ROOM = "sphere_room"


class TexturePattern(str, Enum):
    NOISE = "noise"
    STRIPES = "stripes"
    NOISE_STRIPES = "noise+stripes"


class DepthSpacing(str, Enum):
    INVERSE = "inverse"
    LINEAR = "linear"


class CostAggregation(str, Enum):
    NCC = "ncc"
    CORRELATION = "correlation"


class DepthStatistic(str, Enum):
    EXPECTED = "expected"
    MEDIAN = "median"


class ChamferMode(str, Enum):
    WEIGHTED = "weighted"
    PLAIN = "plain"
    OFF = "off"


# ============================================================================
# POINT CLOUDS AND MESHES
# ============================================================================

@dataclass(frozen=True, eq=False)
class PointCloud:
    """World-space points with optional per-point weights in [0, 1]."""
    points: np.ndarray
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite points")
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
            if w.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"shape mismatch: {w.shape[0]} weights for {pts.shape[0]} points"
                )
            if not np.all(np.isfinite(w)):
                raise ValueError("point cloud contains non-finite weights")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return self.points.shape[0]

    def subset(self, mask: np.ndarray) -> "PointCloud":
        weights = self.weights[mask] if self.weights is not None else None
        return PointCloud(self.points[mask], weights)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh with optional per-vertex normals and texture coordinates."""
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: Optional[np.ndarray] = None
    texcoords: Optional[np.ndarray] = None

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= verts.shape[0]):
            raise ValueError("face index out of range")
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "faces", faces)
        for name, width in (("vertex_normals", 3), ("texcoords", 2)):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=np.float64).reshape(-1, width)
                if value.shape[0] != verts.shape[0]:
                    raise ValueError(f"shape mismatch: {name} has {value.shape[0]} rows")
                object.__setattr__(self, name, value)

    @classmethod
    def empty(cls) -> "TriangleMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def is_empty(self) -> bool:
        return self.faces.shape[0] == 0

    def triangles(self) -> np.ndarray:
        """Corner positions per face, F x 3 x 3."""
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        """Unnormalized face normals (cross product of edges), F x 3."""
        tri = self.triangles()
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(), axis=1)

    def face_centroids(self) -> np.ndarray:
        return self.triangles().mean(axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def select_faces(self, keep: np.ndarray) -> "TriangleMesh":
        """Keep the masked faces and drop vertices no longer referenced."""
        faces = self.faces[keep]
        used = np.unique(faces)
        remap = np.full(self.vertices.shape[0], -1, dtype=np.int64)
        remap[used] = np.arange(used.shape[0])
        normals = self.vertex_normals[used] if self.vertex_normals is not None else None
        texcoords = self.texcoords[used] if self.texcoords is not None else None
        return TriangleMesh(self.vertices[used], remap[faces], normals, texcoords)

    def euler_characteristic(self) -> int:
        edges = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        n_edges = np.unique(np.sort(edges, axis=1), axis=0).shape[0]
        n_vertices = np.unique(self.faces).shape[0]
        return n_vertices - n_edges + self.faces.shape[0]


# ============================================================================
# SURFELS
# ============================================================================

@dataclass(frozen=True)
class Splat2D:
    """One 2D Gaussian surfel."""
    mu: Tuple[float, float, float]
    s: Tuple[float, float]
    q: UnitQuaternion
    alpha: float
    c: Tuple[float, float, float]

    def __post_init__(self):
        if min(self.s) <= 0:
            raise ValueError(f"splat scales must be positive, got {self.s}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"splat opacity outside [0, 1]: {self.alpha}")
        if not np.all(np.isfinite(np.concatenate([self.mu, self.s, self.c]))):
            raise ValueError("splat contains non-finite values")


@dataclass(frozen=True, eq=False)
class SplatField:
    """
    Array-backed collection of 2D Gaussian surfels.

    Per splat: centre `mu` (N,3), tangential scales `scales` (N,2), wxyz
    quaternion `quats` (N,4), opacity (N,), RGB `colors` (N,3) and its
    provenance: source view index (N,) and source pixel (u, v) (N,2).
    """
    mu: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray
    view_index: np.ndarray
    pixels: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.mu).reshape(-1, 3).shape[0]
        shapes = {"mu": 3, "scales": 2, "quats": 4, "colors": 3, "pixels": 2}
        for name, width in shapes.items():
            dtype = np.int64 if name == "pixels" else np.float64
            arr = np.asarray(getattr(self, name), dtype=dtype).reshape(-1, width)
            if arr.shape[0] != n:
                raise ValueError(f"shape mismatch: {name} has {arr.shape[0]} rows for {n} splats")
            object.__setattr__(self, name, arr)
        opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        view_index = np.asarray(self.view_index, dtype=np.int64).reshape(-1)
        if opacity.shape[0] != n or view_index.shape[0] != n:
            raise ValueError("shape mismatch: opacity/view_index length differs from splat count")
        object.__setattr__(self, "opacity", opacity)
        object.__setattr__(self, "view_index", view_index)
        self.validate()

    def validate(self):
        if not all(np.all(np.isfinite(a)) for a in (self.mu, self.scales, self.quats, self.opacity, self.colors)):
            raise ValueError("splat field contains non-finite values")
        if self.scales.size and self.scales.min() <= 0:
            raise ValueError("splat scales must be positive")
        if self.opacity.size and (self.opacity.min() < 0 or self.opacity.max() > 1):
            raise ValueError("splat opacity outside [0, 1]")
        norms = np.linalg.norm(self.quats, axis=1)
        if norms.size and np.abs(norms - 1.0).max() > 1e-9:
            raise ValueError("splat quaternions are not unit")

    def __len__(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def empty(cls) -> "SplatField":
        return cls(np.zeros((0, 3)), np.zeros((0, 2)), np.zeros((0, 4)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0, dtype=np.int64), np.zeros((0, 2), dtype=np.int64))

    @classmethod
    def from_splats(cls, splats: Sequence[Splat2D], view_index=None, pixels=None) -> "SplatField":
        n = len(splats)
        if n == 0:
            return cls.empty()
        return cls(
            mu=np.array([sp.mu for sp in splats]),
            scales=np.array([sp.s for sp in splats]),
            quats=np.array([sp.q.as_array() for sp in splats]),
            opacity=np.array([sp.alpha for sp in splats]),
            colors=np.array([sp.c for sp in splats]),
            view_index=np.zeros(n, dtype=np.int64) if view_index is None else view_index,
            pixels=np.zeros((n, 2), dtype=np.int64) if pixels is None else pixels,
        )

    @classmethod
    def concatenate(cls, fields: Sequence["SplatField"]) -> "SplatField":
        if not fields:
            return cls.empty()
        return cls(*(np.concatenate([getattr(f, name) for f in fields])
                     for name in ("mu", "scales", "quats", "opacity", "colors", "view_index", "pixels")))

    def splat(self, i: int) -> Splat2D:
        return Splat2D(
            mu=tuple(self.mu[i]),
            s=tuple(self.scales[i]),
            q=UnitQuaternion.normalized(*self.quats[i]),
            alpha=float(self.opacity[i]),
            c=tuple(self.colors[i]),
        )

    def to_splats(self) -> List[Splat2D]:
        return [self.splat(i) for i in range(len(self))]

    def normals(self) -> np.ndarray:
        return quats_to_normals(self.quats)

    def subset(self, mask: np.ndarray) -> "SplatField":
        return SplatField(self.mu[mask], self.scales[mask], self.quats[mask], self.opacity[mask],
                          self.colors[mask], self.view_index[mask], self.pixels[mask])

    def with_params(self, **params) -> "SplatField":
        return replace(self, **params)


# ============================================================================
# NORMAL PREDICTION AND LOSS SETTINGS
# ============================================================================

NORMAL_SCALE_FACTORS = (4, 2, 1)


@dataclass(frozen=True, eq=False)
class NormalPrediction:
    """
    Per-pixel unit normals and concentrations at 1/4, 1/2 and full resolution.

    normals[k] is H_k x W_k x 3, kappa[k] is H_k x W_k.
    """
    normals: Tuple[np.ndarray, ...]
    kappa: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.normals) != len(self.kappa):
            raise ValueError("shape mismatch: normals and kappa scale counts differ")
        normals = tuple(np.asarray(n, dtype=np.float64) for n in self.normals)
        kappa = tuple(np.asarray(k, dtype=np.float64) for k in self.kappa)
        for n, k in zip(normals, kappa):
            if n.shape[:2] != k.shape or n.shape[-1] != 3:
                raise ValueError(f"shape mismatch: normals {n.shape} vs kappa {k.shape}")
            if np.any(k <= 0):
                raise ValueError("non-positive kappa in normal prediction")
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "kappa", kappa)

    @property
    def n_scales(self) -> int:
        return len(self.normals)


@dataclass(frozen=True)
class SamplingConfig:
    """
    Kappa-guided pixel sampling: the beta*N lowest-kappa pixels plus random extras.

    N is `n` when given, otherwise floor(fraction * pixel count).
    """
    beta: float = 0.7
    n: Optional[int] = None
    fraction: float = 0.4

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.n is not None and self.n < 1:
            raise ValueError(f"sample budget must be >= 1, got {self.n}")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"sample fraction must be in (0, 1], got {self.fraction}")

    def budget(self, pixel_count: int) -> int:
        if self.n is not None:
            return self.n
        return max(1, int(np.floor(self.fraction * pixel_count)))


@dataclass(frozen=True)
class LossWeights:
    """Total = w1*pho + w2*wcd + w3*normal; pho = w11*MSE + w12*(1 - SSIM)."""
    w1: float = 1.0
    w2: float = 5e-3
    w3: float = 5e-3
    w11: float = 1.0
    w12: float = 0.1

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w11", "w12"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")

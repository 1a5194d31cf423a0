"""
Camera geometry for the surfel pipeline.

Pinhole intrinsics, world-to-camera poses, unit quaternions, image grids,
projection/unprojection and plane-induced warping.

Conventions (inherited by every other module):
- poses map world points into the camera frame: x_cam = R @ x_world + t
- right-handed camera frame, +z forward, +x right, +y down
- pixel (0, 0) is the top-left pixel, pixel centres sit on integer coordinates
"""

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation, Slerp


QUAT_TOL = 1e-9
NORMAL_TOL = 1e-6
# Below this value of (1 + n_z) the shortest arc from +z is undefined.
ANTIPODAL_EPS = 1e-12
# Slack for bilinear samples that land a rounding error outside the image.
BORDER_TOL = 1e-6


# ============================================================================
# QUATERNION ALGEBRA (vectorised, wxyz order)
# ============================================================================

def quats_to_matrices(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for an array of unit quaternions (..., 4) -> (..., 3, 3)."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[..., 0, 1] = 2.0 * (x * y - w * z)
    R[..., 0, 2] = 2.0 * (x * z + w * y)
    R[..., 1, 0] = 2.0 * (x * y + w * z)
    R[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[..., 1, 2] = 2.0 * (y * z - w * x)
    R[..., 2, 0] = 2.0 * (x * z - w * y)
    R[..., 2, 1] = 2.0 * (y * z + w * x)
    R[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def quats_to_normals(quats: np.ndarray) -> np.ndarray:
    """Third column of R(q): the surfel normal R(q) @ (0, 0, 1)."""
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        2.0 * (x * z + w * y),
        2.0 * (y * z - w * x),
        1.0 - 2.0 * (x * x + y * y),
    ], axis=-1)


def normals_to_quats(normals: np.ndarray) -> np.ndarray:
    """
    Shortest-arc quaternions taking +z onto each normal (..., 3) -> (..., 4).

    The antipode n = (0, 0, -1) has no unique shortest arc; it maps to the
    180 degree rotation about +x.
    """
    n = np.asarray(normals, dtype=np.float64)
    nx, ny, nz = np.moveaxis(n, -1, 0)
    w = 1.0 + nz
    q = np.stack([w, -ny, nx, np.zeros_like(w)], axis=-1)
    antipodal = w < ANTIPODAL_EPS
    norm = np.linalg.norm(q, axis=-1)
    norm = np.where(antipodal, 1.0, norm)
    q = q / norm[..., None]
    flip_x = np.array([0.0, 1.0, 0.0, 0.0])
    return np.where(antipodal[..., None], flip_x, q)


def normalize_quats(quats: np.ndarray) -> np.ndarray:
    q = np.asarray(quats, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


# ============================================================================
# TYPES
# ============================================================================

@dataclass(frozen=True)
class UnitQuaternion:
    """Rotation quaternion (w, x, y, z) with |q| = 1 within 1e-9."""
    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        norm = float(np.sqrt(self.w ** 2 + self.x ** 2 + self.y ** 2 + self.z ** 2))
        if not np.isfinite(norm) or abs(norm - 1.0) > QUAT_TOL:
            raise ValueError(f"quaternion is not unit: |q| = {norm!r}")

    @classmethod
    def identity(cls) -> "UnitQuaternion":
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def normalized(cls, w: float, x: float, y: float, z: float) -> "UnitQuaternion":
        q = normalize_quats(np.array([w, x, y, z], dtype=np.float64))
        return cls(*(float(c) for c in q))

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "UnitQuaternion":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls.normalized(np.cos(half), *(np.sin(half) * axis))

    @classmethod
    def from_matrix(cls, R: np.ndarray) -> "UnitQuaternion":
        x, y, z, w = Rotation.from_matrix(np.asarray(R, dtype=np.float64)).as_quat()
        if w < 0.0:
            w, x, y, z = -w, -x, -y, -z
        return cls.normalized(w, x, y, z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def to_matrix(self) -> np.ndarray:
        return quats_to_matrices(self.as_array())


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive (fx={self.fx}, fy={self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of an image area-downsampled by an integer factor."""
        if self.width % factor or self.height % factor:
            raise ValueError(
                f"non-divisible size: {self.width}x{self.height} by factor {factor}"
            )
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx + 0.5) / factor - 0.5,
            cy=(self.cy + 0.5) / factor - 0.5,
            width=self.width // factor,
            height=self.height // factor,
        )


@dataclass(frozen=True, eq=False)
class CameraPose:
    """World-to-camera rigid transform: x_cam = R(q) @ x_world + t."""
    q: UnitQuaternion
    t: Tuple[float, float, float]

    def __post_init__(self):
        t = tuple(float(c) for c in np.asarray(self.t, dtype=np.float64).reshape(3))
        object.__setattr__(self, "t", t)
        R = self.rotation
        if (np.abs(R.T @ R - np.eye(3)).max() > QUAT_TOL
                or abs(np.linalg.det(R) - 1.0) > QUAT_TOL):
            raise ValueError("pose rotation is not orthonormal")

    @classmethod
    def identity(cls) -> "CameraPose":
        return cls(UnitQuaternion.identity(), (0.0, 0.0, 0.0))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> "CameraPose":
        return cls(UnitQuaternion.from_matrix(R), tuple(np.asarray(t, dtype=np.float64)))

    @classmethod
    def from_center(cls, R: np.ndarray, center) -> "CameraPose":
        """Pose from a world-to-camera rotation and the camera centre in world space."""
        q = UnitQuaternion.from_matrix(R)
        R = q.to_matrix()
        return cls(q, tuple(-R @ np.asarray(center, dtype=np.float64)))

    @classmethod
    def look_at(cls, center, target, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at `center` looking at `target`; `up` is the world up (image -y)."""
        center = np.asarray(center, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - center
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R_cw = np.stack([right, down, forward], axis=1)
        return cls.from_center(R_cw.T, center)

    @property
    def rotation(self) -> np.ndarray:
        return self.q.to_matrix()

    @property
    def translation(self) -> np.ndarray:
        return np.array(self.t, dtype=np.float64)

    @property
    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """Row-major H x W x C float image."""
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image grid must be HxWxC, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image grid contains non-finite values")
        object.__setattr__(self, "data", arr)

    @classmethod
    def constant(cls, height: int, width: int, channels: int, value: float) -> "ImageGrid":
        return cls(np.full((height, width, channels), float(value)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self) -> np.ndarray:
        """The single channel of a 1-channel grid as an H x W array."""
        if self.channels != 1:
            raise ValueError(f"expected a 1-channel grid, got {self.channels} channels")
        return self.data[:, :, 0]


@dataclass(frozen=True, eq=False)
class View:
    """A posed image with its depth range. `image` is None for render-only cameras."""
    image: Optional[ImageGrid]
    intrinsics: CameraIntrinsics
    pose: CameraPose
    near: float
    far: float

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValueError(f"invalid depth range: near={self.near}, far={self.far}")
        if self.image is not None:
            if (self.image.width, self.image.height) != (self.intrinsics.width, self.intrinsics.height):
                raise ValueError(
                    f"image {self.image.width}x{self.image.height} does not match intrinsics "
                    f"{self.intrinsics.width}x{self.intrinsics.height}"
                )

    @property
    def camera_center(self) -> np.ndarray:
        return self.pose.camera_center

    def with_range(self, near: float, far: float) -> "View":
        return replace(self, near=near, far=far)

    def without_image(self) -> "View":
        return replace(self, image=None)

    def downscaled(self, factor: int) -> "View":
        return downscale_view(self, factor)


# ============================================================================
# SINGLE-QUATERNION OPERATIONS
# ============================================================================

def quat_to_normal(q: UnitQuaternion) -> np.ndarray:
    """n = R(q) @ (0, 0, 1)."""
    return quats_to_normals(q.as_array())


def normal_to_quat(n) -> UnitQuaternion:
    """Minimal rotation taking (0, 0, 1) to n; (0, 0, -1) maps to 180 deg about x."""
    n = np.asarray(n, dtype=np.float64).reshape(3)
    norm = float(np.linalg.norm(n))
    if abs(norm - 1.0) > NORMAL_TOL:
        raise ValueError(f"normal is not unit: |n| = {norm!r}")
    return UnitQuaternion.normalized(*normals_to_quats(n))


# ============================================================================
# PROJECTION
# ============================================================================

def pixel_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Integer pixel-centre coordinates (u, v), each H x W."""
    u, v = np.meshgrid(np.arange(width, dtype=np.float64),
                       np.arange(height, dtype=np.float64))
    return u, v


def world_to_camera(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    return np.asarray(points, dtype=np.float64) @ pose.rotation.T + pose.translation


def camera_to_world(points: np.ndarray, pose: CameraPose) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation


def project_points(points: np.ndarray, intr: CameraIntrinsics,
                   pose: CameraPose) -> Tuple[np.ndarray, np.ndarray]:
    """
    Project world points (..., 3) to pixels (..., 2) and camera depths (...).

    Points with camera z <= 0 get non-finite pixels; callers mask on depth.
    """
    pc = world_to_camera(points, pose)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[..., 0] / z + intr.cx
        v = intr.fy * pc[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1), z


def project(point, intr: CameraIntrinsics, pose: CameraPose) -> Tuple[np.ndarray, float]:
    """Project one world point through K [R | t]."""
    pc = world_to_camera(np.asarray(point, dtype=np.float64).reshape(3), pose)
    if pc[2] <= 0:
        raise ValueError(f"behind camera: camera-space z = {pc[2]!r}")
    pixel = np.array([intr.fx * pc[0] / pc[2] + intr.cx,
                      intr.fy * pc[1] / pc[2] + intr.cy])
    return pixel, float(pc[2])


def camera_rays(u: np.ndarray, v: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray directions scaled so that their z component is 1."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def unproject_pixels(u: np.ndarray, v: np.ndarray, depth: np.ndarray,
                     intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """World points for pixel arrays at the given camera depths."""
    pc = camera_rays(u, v, intr) * np.asarray(depth, dtype=np.float64)[..., None]
    return camera_to_world(pc, pose)


def unproject(pixel, depth: float, intr: CameraIntrinsics, pose: CameraPose) -> np.ndarray:
    """Back-project one pixel at a camera depth to a world point."""
    if not depth > 0:
        raise ValueError(f"non-positive depth: {depth!r}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    return unproject_pixels(np.array(u), np.array(v), np.array(depth), intr, pose)


# ============================================================================
# RESAMPLING
# ============================================================================

def bilinear_sample(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bilinear samples of an H x W x C array at (u, v).

    Returns (values, valid); samples outside [0, W-1] x [0, H-1] are zero and
    flagged invalid.
    """
    H, W, C = image.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = (np.isfinite(u) & np.isfinite(v)
             & (u >= -BORDER_TOL) & (u <= W - 1 + BORDER_TOL)
             & (v >= -BORDER_TOL) & (v <= H - 1 + BORDER_TOL))
    uc = np.clip(np.where(valid, u, 0.0), 0.0, W - 1)
    vc = np.clip(np.where(valid, v, 0.0), 0.0, H - 1)
    coords = np.stack([vc.ravel(), uc.ravel()])
    out = np.empty(u.shape + (C,))
    for c in range(C):
        sampled = ndimage.map_coordinates(image[:, :, c], coords, order=1, mode="nearest")
        out[..., c] = sampled.reshape(u.shape)
    out[~valid] = 0.0
    return out, valid


def homography_warp(src: ImageGrid, view_src: View, view_dst: View,
                    depth: float) -> Tuple[ImageGrid, np.ndarray]:
    """
    Warp `src` (seen by view_src) into view_dst through the fronto-parallel
    plane z = depth of view_dst's camera.

    Returns the warped grid (view_dst resolution) and its validity mask.
    """
    if not depth > 0:
        raise ValueError(f"non-positive depth: {depth!r}")
    intr = view_dst.intrinsics
    u, v = pixel_grid(intr.height, intr.width)
    points = unproject_pixels(u, v, np.full(u.shape, float(depth)), intr, view_dst.pose)
    uv, z = project_points(points, view_src.intrinsics, view_src.pose)
    uv = np.where((z > 0)[..., None], uv, np.nan)
    values, valid = bilinear_sample(src.data, uv[..., 0], uv[..., 1])
    return ImageGrid(values), valid


def downsample(grid: ImageGrid, factor: int) -> ImageGrid:
    """Area-average pooling by an integer factor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    H, W, C = grid.data.shape
    if H % factor or W % factor:
        raise ValueError(f"non-divisible size: {W}x{H} by factor {factor}")
    if factor == 1:
        return grid
    blocks = grid.data.reshape(H // factor, factor, W // factor, factor, C)
    return ImageGrid(blocks.mean(axis=(1, 3)))


def upsample(grid: ImageGrid, factor: int) -> ImageGrid:
    """Bilinear upsampling by an integer factor (pixel-centre aligned, edge clamped)."""
    factor = int(factor)
    if factor == 1:
        return grid
    H, W, C = grid.data.shape
    u, v = pixel_grid(H * factor, W * factor)
    us = np.clip((u + 0.5) / factor - 0.5, 0.0, W - 1)
    vs = np.clip((v + 0.5) / factor - 0.5, 0.0, H - 1)
    values, _ = bilinear_sample(grid.data, us, vs)
    return ImageGrid(values)


def downscale_view(view: View, factor: int) -> View:
    """The same camera at 1/factor resolution (image pooled when present)."""
    image = downsample(view.image, factor) if view.image is not None else None
    return replace(view, image=image, intrinsics=view.intrinsics.scaled(factor))


def interpolate_pose(pose_a: CameraPose, pose_b: CameraPose, s: float) -> CameraPose:
    """Slerp the rotations and linearly blend the camera centres, s in [0, 1]."""
    quats = np.stack([pose_a.q.as_array(), pose_b.q.as_array()])
    rotations = Rotation.from_quat(quats[:, [1, 2, 3, 0]])
    R = Slerp([0.0, 1.0], rotations)([float(s)]).as_matrix()[0]
    center = (1.0 - s) * pose_a.camera_center + s * pose_b.camera_center
    return CameraPose.from_center(R, center)

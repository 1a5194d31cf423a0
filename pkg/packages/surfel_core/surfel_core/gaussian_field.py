"""
Pixel-aligned 2D Gaussian surfel construction.
"""

from typing import Tuple

import numpy as np

from surfel_core.geometry import ImageGrid, View, normals_to_quats, pixel_grid, unproject_pixels
from surfel_core.models import SplatField
from surfel_core.utils import normalize_vectors


DEFAULT_ALPHA0 = 0.8
DEFAULT_SCALE_MULT = 1.0


def build_pixel_aligned(depth: ImageGrid, normal: ImageGrid, view: View,
                        alpha0: float = DEFAULT_ALPHA0, scale_mult: float = DEFAULT_SCALE_MULT,
                        view_index: int = 0) -> Tuple[SplatField, int]:
    """
    One surfel per pixel with depth > 0.

    Args:
        depth: 1-channel camera depth at the view's resolution (0 = invalid)
        normal: 3-channel camera-frame unit normals
        view: source view; its image supplies colours (grey when absent)
        alpha0: initial opacity
        scale_mult: isotropic scale = scale_mult * depth / fx
        view_index: provenance tag stored on every splat

    Returns:
        (field, skipped) where skipped counts pixels with depth <= 0
    """
    intr = view.intrinsics
    if (depth.width, depth.height) != (intr.width, intr.height) or normal.data.shape[:2] != depth.data.shape[:2]:
        raise ValueError("shape mismatch: depth/normal maps must match the view resolution")
    if not 0.0 <= alpha0 <= 1.0:
        raise ValueError(f"alpha0 must be in [0, 1], got {alpha0}")
    if not scale_mult > 0:
        raise ValueError(f"scale_mult must be > 0, got {scale_mult}")

    d = depth.plane()
    valid = d > 0
    skipped = int(valid.size - valid.sum())
    u, v = pixel_grid(intr.height, intr.width)

    mu = unproject_pixels(u[valid], v[valid], d[valid], intr, view.pose)
    n_cam, norm = normalize_vectors(normal.data[valid])
    if np.any(norm <= 1e-12):
        raise ValueError("zero normal at a pixel with valid depth")
    n_world = n_cam @ view.pose.rotation
    quats = normals_to_quats(n_world)

    scale = scale_mult * d[valid] / intr.fx
    if view.image is not None:
        colors = view.image.data[valid]
    else:
        colors = np.full((mu.shape[0], 3), 0.5)

    field = SplatField(
        mu=mu,
        scales=np.stack([scale, scale], axis=1),
        quats=quats,
        opacity=np.full(mu.shape[0], float(alpha0)),
        colors=np.clip(colors, 0.0, 1.0),
        view_index=np.full(mu.shape[0], view_index, dtype=np.int64),
        pixels=np.stack([u[valid], v[valid]], axis=1).astype(np.int64),
    )
    return field, skipped


def field_normals(field: SplatField) -> np.ndarray:
    """World-space unit normal R(q) e_z per splat."""
    return field.normals()

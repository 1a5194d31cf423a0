"""
Differentiable 2D Gaussian surfel rasterizer.

Each pixel ray is intersected exactly with every candidate splat's plane.
The intersection's tangent-frame coordinates give a Gaussian weight, and
splats are alpha-blended front to back in a global per-view order (centre
depth, then splat index). Outputs RGB, alpha-normalised depth and normal,
and accumulated opacity. render_backward returns exact analytic gradients of
a scalar loss with respect to every splat parameter, given upstream
per-pixel gradients.

Camera-frame quantities per splat:
    mu_c = R mu + t,  A_j = R a_j  (a_j = columns of R(q))
    z = (A_3 . mu_c) / (A_3 . d),  p = z d - mu_c
    lu = A_1 . p / s_1,  lv = A_2 . p / s_2,  g = exp(-(lu^2 + lv^2) / 2)
    w = min(alpha g, clip)
with d the pixel ray scaled to unit z.
"""

from dataclasses import dataclass
from typing import List, Optional, Union

import numpy as np

from surfel_core.geometry import ImageGrid, View, camera_rays, quats_to_matrices
from surfel_core.models import DepthStatistic, SplatField


_DEN_EPS = 1e-8
_Z_EPS = 1e-8


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    weight_clip: float = 0.999
    acc_eps: float = 1e-4
    depth_statistic: DepthStatistic = DepthStatistic.EXPECTED
    background: float = 0.0
    cull_sigma: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "depth_statistic", DepthStatistic(self.depth_statistic))
        if self.tile_size < 1:
            raise ValueError(f"tile_size must be >= 1, got {self.tile_size}")
        if not 0.0 < self.weight_clip < 1.0:
            raise ValueError(f"weight_clip must be in (0, 1), got {self.weight_clip}")


@dataclass(frozen=True, eq=False)
class SplatParams:
    """
    Raw splat parameter arrays. Quaternions need not be unit; the renderer
    normalises them, so gradients w.r.t. `quats` are those of q / |q|.
    """
    mu: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray

    @classmethod
    def from_field(cls, field: SplatField) -> "SplatParams":
        return cls(field.mu, field.scales, field.quats, field.opacity, field.colors)

    def __len__(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True, eq=False)
class RenderOutput:
    rgb: ImageGrid
    depth: ImageGrid
    normal: ImageGrid
    acc: ImageGrid


@dataclass(frozen=True, eq=False)
class RenderUpstream:
    """dL/d(output) per pixel; None means zero."""
    rgb: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    normal: Optional[np.ndarray] = None
    acc: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class RenderGradients:
    mu: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RenderGradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 2)), np.zeros((n, 4)), np.zeros(n), np.zeros((n, 3)))

    def __add__(self, other: "RenderGradients") -> "RenderGradients":
        return RenderGradients(self.mu + other.mu, self.scales + other.scales, self.quats + other.quats,
                               self.opacity + other.opacity, self.colors + other.colors)

    def as_dict(self) -> dict:
        return {"mu": self.mu, "s": self.scales, "q": self.quats, "alpha": self.opacity, "c": self.colors}


@dataclass(frozen=True, eq=False)
class TileBin:
    """Pixel rectangle [x0, x1) x [y0, y1) and its splats in blending order."""
    x0: int
    x1: int
    y0: int
    y1: int
    indices: np.ndarray


Splats = Union[SplatField, SplatParams]


# ============================================================================
# CAMERA-SPACE SETUP
# ============================================================================

@dataclass(frozen=True, eq=False)
class _CameraSplats:
    mu_c: np.ndarray        # (N, 3)
    axes: np.ndarray        # (N, 3, 3), columns A_1, A_2, A_3
    num: np.ndarray         # (N,)  A_3 . mu_c
    side: np.ndarray        # (N,)  +1 / -1 so that side * A_3 faces the camera
    quat_hat: np.ndarray    # (N, 4)
    quat_norm: np.ndarray   # (N,)
    scales: np.ndarray
    opacity: np.ndarray
    colors: np.ndarray


def _as_params(splats: Splats) -> SplatParams:
    return SplatParams.from_field(splats) if isinstance(splats, SplatField) else splats


def _prepare(params: SplatParams, view: View) -> _CameraSplats:
    R = view.pose.rotation
    quat_norm = np.linalg.norm(params.quats, axis=1)
    quat_hat = params.quats / quat_norm[:, None]
    mu_c = params.mu @ R.T + view.pose.translation
    axes = np.einsum("ij,njk->nik", R, quats_to_matrices(quat_hat))
    num = np.sum(axes[:, :, 2] * mu_c, axis=1)
    side = np.where(num > 0, -1.0, 1.0)
    return _CameraSplats(mu_c, axes, num, side, quat_hat, quat_norm,
                         np.asarray(params.scales, dtype=np.float64),
                         np.asarray(params.opacity, dtype=np.float64),
                         np.asarray(params.colors, dtype=np.float64))


def _footprints(cam: _CameraSplats, view: View, k_sigma: float):
    """Pixel bounding boxes (umin, umax, vmin, vmax) of the k-sigma squares."""
    intr = view.intrinsics
    n = cam.mu_c.shape[0]
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=np.float64)
    offsets = k_sigma * (signs[None, :, 0, None] * cam.scales[:, None, 0, None] * cam.axes[:, None, :, 0]
                         + signs[None, :, 1, None] * cam.scales[:, None, 1, None] * cam.axes[:, None, :, 1])
    corners = cam.mu_c[:, None, :] + offsets
    cz = corners[:, :, 2]
    front = np.all(cz > _Z_EPS, axis=1)
    safe_z = np.where(cz > _Z_EPS, cz, 1.0)
    cu = intr.fx * corners[:, :, 0] / safe_z + intr.cx
    cv = intr.fy * corners[:, :, 1] / safe_z + intr.cy
    bbox = np.stack([cu.min(axis=1), cu.max(axis=1), cv.min(axis=1), cv.max(axis=1)], axis=1)
    full = np.array([-np.inf, np.inf, -np.inf, np.inf])
    return np.where(front[:, None], bbox, full) if n else np.zeros((0, 4))


def _cull_and_sort(cam: _CameraSplats, view: View, cfg: RenderConfig) -> List[TileBin]:
    intr = view.intrinsics
    H, W = intr.height, intr.width
    n = cam.mu_c.shape[0]
    depth = cam.mu_c[:, 2]
    bbox = _footprints(cam, view, cfg.cull_sigma)
    alive = (depth > _Z_EPS) & (bbox[:, 1] >= -0.5) & (bbox[:, 0] <= W - 0.5) \
        & (bbox[:, 3] >= -0.5) & (bbox[:, 2] <= H - 0.5)
    index = np.arange(n)
    order = np.lexsort((index, depth))
    order = order[alive[order]]

    bins = []
    T = cfg.tile_size
    b = bbox[order]
    for y0 in range(0, H, T):
        y1 = min(y0 + T, H)
        for x0 in range(0, W, T):
            x1 = min(x0 + T, W)
            hit = (b[:, 1] >= x0 - 0.5) & (b[:, 0] <= x1 - 0.5) & (b[:, 3] >= y0 - 0.5) & (b[:, 2] <= y1 - 0.5)
            bins.append(TileBin(x0, x1, y0, y1, order[hit]))
    return bins


def cull_and_sort(splats: Splats, view: View, cfg: Optional[RenderConfig] = None) -> List[TileBin]:
    """
    Per-tile candidate lists.

    Drops splats whose centre is behind the camera or whose cull_sigma
    footprint misses the image; survivors are ordered by centre depth with
    splat index as tie-break.
    """
    cfg = cfg or RenderConfig()
    params = _as_params(splats)
    return _cull_and_sort(_prepare(params, view), view, cfg)


# ============================================================================
# PER-TILE EVALUATION
# ============================================================================

@dataclass(eq=False)
class _TileState:
    rays: np.ndarray
    idx: np.ndarray
    ok: np.ndarray
    den: np.ndarray
    z: np.ndarray
    p: np.ndarray
    lu: np.ndarray
    lv: np.ndarray
    g: np.ndarray
    raw: np.ndarray
    w: np.ndarray
    T: np.ndarray
    T_final: np.ndarray
    omega: np.ndarray
    normals: np.ndarray


def _tile_state(cam: _CameraSplats, idx: np.ndarray, rays: np.ndarray, cfg: RenderConfig) -> _TileState:
    A = cam.axes[idx]
    A1, A2, A3 = A[:, :, 0], A[:, :, 1], A[:, :, 2]
    mu_c = cam.mu_c[idx]
    s = cam.scales[idx]

    den = rays @ A3.T
    ok = np.abs(den) > _DEN_EPS
    z = cam.num[idx][None, :] / np.where(ok, den, 1.0)
    ok &= z > _Z_EPS
    z = np.where(ok, z, 0.0)
    p = z[:, :, None] * rays[:, None, :] - mu_c[None, :, :]
    p = np.where(ok[:, :, None], p, 0.0)
    lu = np.sum(p * A1[None], axis=-1) / s[None, :, 0]
    lv = np.sum(p * A2[None], axis=-1) / s[None, :, 1]
    g = np.exp(-0.5 * (lu * lu + lv * lv))
    raw = cam.opacity[idx][None, :] * g
    w = np.where(ok, np.minimum(raw, cfg.weight_clip), 0.0)

    T_incl = np.cumprod(1.0 - w, axis=1)
    T = np.concatenate([np.ones((rays.shape[0], 1)), T_incl[:, :-1]], axis=1)
    omega = w * T
    normals = cam.side[idx][:, None] * A3
    return _TileState(rays, idx, ok, den, z, p, lu, lv, g, raw, w, T, T_incl[:, -1], omega, normals)


def _tile_rays(tile: TileBin, view: View) -> np.ndarray:
    v, u = np.mgrid[tile.y0:tile.y1, tile.x0:tile.x1]
    return camera_rays(u.ravel().astype(np.float64), v.ravel().astype(np.float64), view.intrinsics)


# ============================================================================
# FORWARD
# ============================================================================

def render(splats: Splats, view: View, cfg: Optional[RenderConfig] = None) -> RenderOutput:
    """Render RGB, depth, normal (camera frame) and accumulated opacity."""
    cfg = cfg or RenderConfig()
    params = _as_params(splats)
    intr = view.intrinsics
    H, W = intr.height, intr.width
    rgb = np.full((H, W, 3), float(cfg.background))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    acc = np.zeros((H, W))
    if len(params) == 0:
        return _pack(rgb, depth, normal, acc)

    cam = _prepare(params, view)
    for tile in _cull_and_sort(cam, view, cfg):
        if tile.indices.size == 0:
            continue
        st = _tile_state(cam, tile.indices, _tile_rays(tile, view), cfg)
        shape = (tile.y1 - tile.y0, tile.x1 - tile.x0)
        colors = cam.colors[tile.indices]

        tile_rgb = np.sum(st.omega[:, :, None] * colors[None], axis=1) + st.T_final[:, None] * cfg.background
        tile_acc = np.clip(np.sum(st.omega, axis=1), 0.0, 1.0)
        has = tile_acc > cfg.acc_eps
        inv = np.where(has, 1.0 / np.where(has, tile_acc, 1.0), 0.0)
        if cfg.depth_statistic == DepthStatistic.MEDIAN:
            crossed = np.concatenate([st.T[:, 1:], st.T_final[:, None]], axis=1) < 0.5
            first = np.argmax(crossed, axis=1)
            tile_depth = np.where(crossed.any(axis=1), st.z[np.arange(st.z.shape[0]), first], 0.0)
        else:
            tile_depth = np.sum(st.omega * st.z, axis=1) * inv
        tile_normal = np.sum(st.omega[:, :, None] * st.normals[None], axis=1) * inv[:, None]

        rgb[tile.y0:tile.y1, tile.x0:tile.x1] = tile_rgb.reshape(shape + (3,))
        depth[tile.y0:tile.y1, tile.x0:tile.x1] = tile_depth.reshape(shape)
        normal[tile.y0:tile.y1, tile.x0:tile.x1] = tile_normal.reshape(shape + (3,))
        acc[tile.y0:tile.y1, tile.x0:tile.x1] = tile_acc.reshape(shape)
    return _pack(rgb, depth, normal, acc)


def _pack(rgb, depth, normal, acc) -> RenderOutput:
    return RenderOutput(ImageGrid(rgb), ImageGrid(depth), ImageGrid(normal), ImageGrid(acc))


# ============================================================================
# BACKWARD
# ============================================================================

def _rotation_jacobian(q: np.ndarray) -> np.ndarray:
    """dR(q)/dq for unit wxyz quaternions, (N, 4, 3, 3)."""
    w, x, y, z = q.T
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dw = mat([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    dx = mat([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    dy = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    dz = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    return np.stack([dw, dx, dy, dz], axis=1)


def _upstream_tile(arr: Optional[np.ndarray], tile: TileBin, channels: int) -> np.ndarray:
    P = (tile.y1 - tile.y0) * (tile.x1 - tile.x0)
    if arr is None:
        return np.zeros((P, channels)) if channels > 1 else np.zeros(P)
    block = np.asarray(arr, dtype=np.float64)[tile.y0:tile.y1, tile.x0:tile.x1]
    return block.reshape(P, channels) if channels > 1 else block.reshape(P)


def render_backward(splats: Splats, view: View, cfg: Optional[RenderConfig],
                    upstream: RenderUpstream) -> RenderGradients:
    """
    Gradients of sum(upstream * outputs) w.r.t. mu, scales, quats, opacity, colors.

    Exact for the forward pass above, including the acc normalisation of
    depth and normal. Median depth is not differentiable and rejects a
    depth upstream.
    """
    cfg = cfg or RenderConfig()
    params = _as_params(splats)
    n = len(params)
    if n == 0:
        return RenderGradients.zeros(0)
    if cfg.depth_statistic == DepthStatistic.MEDIAN and upstream.depth is not None:
        raise ValueError("median depth is forward-only; no depth gradient available")

    cam = _prepare(params, view)
    g_mu_c = np.zeros((n, 3))
    g_axes = np.zeros((n, 3, 3))
    g_s = np.zeros((n, 2))
    g_alpha = np.zeros(n)
    g_c = np.zeros((n, 3))

    for tile in _cull_and_sort(cam, view, cfg):
        idx = tile.indices
        if idx.size == 0:
            continue
        st = _tile_state(cam, idx, _tile_rays(tile, view), cfg)
        G_c = _upstream_tile(upstream.rgb, tile, 3)
        G_D = _upstream_tile(upstream.depth, tile, 1)
        G_n = _upstream_tile(upstream.normal, tile, 3)
        G_a = _upstream_tile(upstream.acc, tile, 1)

        colors = cam.colors[idx]
        A = cam.axes[idx]
        A1, A2, A3 = A[:, :, 0], A[:, :, 1], A[:, :, 2]
        s = cam.scales[idx]
        alpha = cam.opacity[idx]

        acc = np.sum(st.omega, axis=1)
        has = acc > cfg.acc_eps
        inv = np.where(has, 1.0 / np.where(has, acc, 1.0), 0.0)
        depth_out = np.sum(st.omega * st.z, axis=1) * inv
        normal_out = np.sum(st.omega[:, :, None] * st.normals[None], axis=1) * inv[:, None]
        gD = G_D * inv
        gN = G_n * inv[:, None]
        G_acc = G_a - gD * depth_out - np.sum(gN * normal_out, axis=1)

        # per-splat scalar feature seen by the loss at each pixel
        a = (G_c @ colors.T + G_acc[:, None] + gD[:, None] * st.z + gN @ st.normals.T)
        a_bg = np.sum(G_c, axis=1) * cfg.background
        contrib = st.omega * a
        suffix = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1]
        after = suffix - contrib + (st.T_final * a_bg)[:, None]
        dw = st.T * a - after / (1.0 - st.w)
        dw = np.where(st.ok & (st.raw < cfg.weight_clip), dw, 0.0)

        g_alpha[idx] += np.sum(dw * st.g, axis=0)
        dg = dw * alpha[None, :]
        dlu = -dg * st.g * st.lu / s[None, :, 0]
        dlv = -dg * st.g * st.lv / s[None, :, 1]
        g_s[idx, 0] += -np.sum(dlu * st.lu, axis=0)
        g_s[idx, 1] += -np.sum(dlv * st.lv, axis=0)

        dp = dlu[:, :, None] * A1[None] + dlv[:, :, None] * A2[None]
        dz = st.omega * gD[:, None] + np.sum(dp * st.rays[:, None, :], axis=-1)
        dz = np.where(st.ok, dz, 0.0)
        den = np.where(st.ok, st.den, 1.0)
        dz_den = dz / den

        g_mu_c[idx] += np.sum(dz_den[:, :, None] * A3[None] - dp, axis=0)
        g_axes[idx, :, 0] += np.sum(dlu[:, :, None] * st.p, axis=0)
        g_axes[idx, :, 1] += np.sum(dlv[:, :, None] * st.p, axis=0)
        g_axes[idx, :, 2] += (-np.sum(dz_den[:, :, None] * st.p, axis=0)
                              + cam.side[idx][:, None] * (st.omega.T @ gN))
        g_c[idx] += st.omega.T @ G_c

    R = view.pose.rotation
    g_mu = g_mu_c @ R
    g_rot = np.einsum("ji,njk->nik", R, g_axes)
    g_qhat = np.einsum("nkrc,nrc->nk", _rotation_jacobian(cam.quat_hat), g_rot)
    radial = np.sum(g_qhat * cam.quat_hat, axis=1, keepdims=True)
    g_q = (g_qhat - cam.quat_hat * radial) / cam.quat_norm[:, None]
    return RenderGradients(g_mu, g_s, g_q, g_alpha, g_c)

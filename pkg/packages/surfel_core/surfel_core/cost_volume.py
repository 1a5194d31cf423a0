"""
Plane-sweep cost volumes.

Hand-crafted 8-channel descriptors at 1/4 resolution, depth-candidate
ladders, plane-sweep matching between two views, softmax-weighted coarse
depth and the max-probability confidence map.
"""

from dataclasses import dataclass
from typing import Iterator, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import softmax

from surfel_core.geometry import (
    ImageGrid,
    View,
    downsample,
    downscale_view,
    homography_warp,
    pixel_grid,
    unproject_pixels,
)
from surfel_core.models import CostAggregation, DepthSpacing, PointCloud


FEATURE_STRIDE = 4
FEATURE_CHANNELS = 8
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
# same low-pass skimage.transform.rescale applies before downscaling
ANTIALIAS_SIGMA = (FEATURE_STRIDE - 1) / 2.0
_STD_EPS = 1e-12
_FLAT_VAR = 1e-10


@dataclass(frozen=True)
class CostVolumeConfig:
    """
    Aggregation of plane-sweep matches into depth logits.

    aggregation: NCC scores each hypothesis by zero-mean normalized
        correlation over a window; CORRELATION keeps the raw sqrt(C)-scaled
        dot products
    window: side of the NCC neighbourhood
    smoothing: side of the spatial box filter over scores (1 disables it)
    evidence_floor: NCC score that counts as no evidence; weaker matches and
        invalid warps get logit 0, a perfect match gets the full gain
    gain: multiplier on the aggregated scores; None means 3 ln D, which gives
        a perfect match D^3 times the weight of an evidence-free candidate
    invalid_logit: CORRELATION logit for warps that leave the source image
    """
    aggregation: CostAggregation = CostAggregation.NCC
    window: int = 3
    smoothing: int = 3
    evidence_floor: float = 0.5
    gain: Optional[float] = None
    invalid_logit: float = -10.0

    def __post_init__(self):
        object.__setattr__(self, "aggregation", CostAggregation(self.aggregation))
        if self.smoothing < 1:
            raise ValueError(f"smoothing must be >= 1, got {self.smoothing}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0.0 <= self.evidence_floor < 1.0:
            raise ValueError(f"evidence_floor must lie in [0, 1), got {self.evidence_floor}")
        if self.gain is not None and not self.gain > 0:
            raise ValueError(f"gain must be > 0, got {self.gain}")

    def gain_for(self, count: int) -> float:
        return float(self.gain) if self.gain is not None else 3.0 * float(np.log(count))


@dataclass(frozen=True, eq=False)
class FeatureMap:
    grid: ImageGrid

    @property
    def channels(self) -> int:
        return self.grid.channels

    @property
    def height(self) -> int:
        return self.grid.height

    @property
    def width(self) -> int:
        return self.grid.width


@dataclass(frozen=True, eq=False)
class DepthCandidates:
    """Strictly increasing depth hypotheses, D >= 2."""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] < 2:
            raise ValueError(f"need at least 2 depth candidates, got {values.shape[0]}")
        if not np.all(np.diff(values) > 0) or values[0] <= 0:
            raise ValueError("depth candidates must be positive and strictly increasing")
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return self.values.shape[0]

    def spacing_at(self, depth) -> np.ndarray:
        """Gap between the two candidates bracketing each depth (clamped at the ends)."""
        depth = np.asarray(depth, dtype=np.float64)
        k = np.clip(np.searchsorted(self.values, depth), 1, self.count - 1)
        return self.values[k] - self.values[k - 1]


@dataclass(frozen=True, eq=False)
class CostVolume:
    """Per-pixel logits over the candidate ladder, h x w x D."""
    logits: np.ndarray
    candidates: DepthCandidates

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 3 or logits.shape[2] != self.candidates.count:
            raise ValueError(
                f"shape mismatch: logits {logits.shape} for {self.candidates.count} candidates"
            )
        if not np.all(np.isfinite(logits)):
            raise ValueError("cost volume contains non-finite logits")
        object.__setattr__(self, "logits", logits)


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Max softmax probability per pixel, in (0, 1]."""
    grid: ImageGrid

    def __post_init__(self):
        data = self.grid.data
        if data.size and (data.min() <= 0 or data.max() > 1.0):
            raise ValueError("confidence values must lie in (0, 1]")


# ============================================================================
# FEATURES
# ============================================================================

def raw_descriptor(image: ImageGrid) -> ImageGrid:
    """
    Unstandardised 8-channel descriptor at 1/4 resolution.

    Channels: luma, d/dx, d/dy, 3x3 mean, 3x3 std, d2/dx2, d2/dy2, d2/dxdy,
    computed at full resolution, Gaussian low-passed and area-pooled.
    """
    if image.channels != 3:
        raise ValueError(f"expected a 3-channel image, got {image.channels}")
    luma = image.data @ LUMA_WEIGHTS
    gy, gx = np.gradient(luma)
    mean3 = ndimage.uniform_filter(luma, size=3, mode="nearest")
    sq3 = ndimage.uniform_filter(luma * luma, size=3, mode="nearest")
    std3 = np.sqrt(np.maximum(sq3 - mean3 * mean3, 0.0))
    gxx = np.gradient(gx, axis=1)
    gyy = np.gradient(gy, axis=0)
    gxy = np.gradient(gx, axis=0)
    stack = np.stack([luma, gx, gy, mean3, std3, gxx, gyy, gxy], axis=-1)
    stack = ndimage.gaussian_filter(stack, sigma=(ANTIALIAS_SIGMA, ANTIALIAS_SIGMA, 0.0), mode="nearest")
    return downsample(ImageGrid(stack), FEATURE_STRIDE)


def extract_features(image: ImageGrid) -> FeatureMap:
    """Raw descriptor with every channel standardised; constant channels become 0."""
    data = raw_descriptor(image).data
    mean = data.mean(axis=(0, 1))
    std = data.std(axis=(0, 1))
    flat = std <= _STD_EPS
    standardized = (data - mean) / np.where(flat, 1.0, std)
    standardized[:, :, flat] = 0.0
    return FeatureMap(ImageGrid(standardized))


# ============================================================================
# CANDIDATES AND VOLUMES
# ============================================================================

def make_candidates(near: float, far: float, count: int,
                    spacing: DepthSpacing = DepthSpacing.INVERSE) -> DepthCandidates:
    """D depths from near to far, uniform in 1/d (default) or in d; endpoints exact."""
    if not (0 < near < far):
        raise ValueError(f"invalid range: near={near}, far={far}")
    if count < 2:
        raise ValueError(f"invalid range: need at least 2 candidates, got {count}")
    if DepthSpacing(spacing) == DepthSpacing.LINEAR:
        values = np.linspace(near, far, count)
    else:
        values = 1.0 / np.linspace(1.0 / near, 1.0 / far, count)
    values[0], values[-1] = near, far
    return DepthCandidates(values)


def feature_view(view: View, features: FeatureMap) -> View:
    """The image-less camera of `view` at the resolution of its feature map."""
    factor = view.intrinsics.width // features.width
    if factor * features.width != view.intrinsics.width or factor * features.height != view.intrinsics.height:
        raise ValueError(
            f"shape mismatch: feature map {features.width}x{features.height} vs "
            f"view {view.intrinsics.width}x{view.intrinsics.height}"
        )
    return downscale_view(view.without_image(), factor)


def _sweep(F_i: FeatureMap, F_j: FeatureMap, view_i: View, view_j: View,
           candidates: DepthCandidates) -> Iterator[Tuple[int, np.ndarray, np.ndarray]]:
    """(k, F_j warped into view_i at d_k, validity) for every candidate."""
    vi = feature_view(view_i, F_i)
    vj = feature_view(view_j, F_j)
    for k, depth in enumerate(candidates.values):
        warped, mask = homography_warp(F_j.grid, vj, vi, depth)
        yield k, warped.data, mask


def _check_pair(F_i: FeatureMap, F_j: FeatureMap) -> None:
    if F_i.grid.data.shape != F_j.grid.data.shape:
        raise ValueError(f"shape mismatch: {F_i.grid.data.shape} vs {F_j.grid.data.shape}")


def correlation_volume(F_i: FeatureMap, F_j: FeatureMap, view_i: View, view_j: View,
                       candidates: DepthCandidates,
                       invalid_logit: float = -10.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Raw plane-sweep logits <F_i, warp(F_j, d_k)> / sqrt(C).

    Returns (logits h x w x D, valid h x w x D); invalid warps hold invalid_logit.
    """
    _check_pair(F_i, F_j)
    scale = 1.0 / np.sqrt(F_i.channels)
    h, w = F_i.height, F_i.width
    logits = np.empty((h, w, candidates.count))
    valid = np.empty((h, w, candidates.count), dtype=bool)
    for k, warped, mask in _sweep(F_i, F_j, view_i, view_j, candidates):
        dot = np.sum(F_i.grid.data * warped, axis=-1) * scale
        logits[:, :, k] = np.where(mask, dot, invalid_logit)
        valid[:, :, k] = mask
    return logits, valid


def _window_mean(x: np.ndarray, size: int) -> np.ndarray:
    return ndimage.uniform_filter(x, size=(size, size) + (1,) * (x.ndim - 2), mode="constant")


def normalized_correlation(a: np.ndarray, b: np.ndarray, valid: np.ndarray, window: int) -> np.ndarray:
    """
    Zero-mean normalized correlation of two h x w x C maps over window x window
    neighbourhoods, using only samples where `valid` holds.

    Each channel is centred on its window mean; the score is the cosine of
    the stacked residuals, in [-1, 1]. Flat or empty windows score 0.
    """
    m = valid.astype(np.float64)[..., None]
    n = _window_mean(m, window)
    safe = np.where(n > 0, n, 1.0)
    mean_a = _window_mean(m * a, window) / safe
    mean_b = _window_mean(m * b, window) / safe
    cov = np.sum(_window_mean(m * a * b, window) / safe - mean_a * mean_b, axis=-1)
    var_a = np.sum(_window_mean(m * a * a, window) / safe - mean_a * mean_a, axis=-1)
    var_b = np.sum(_window_mean(m * b * b, window) / safe - mean_b * mean_b, axis=-1)
    flat = (var_a <= _FLAT_VAR) | (var_b <= _FLAT_VAR) | (n[..., 0] <= 0)
    denom = np.sqrt(np.where(flat, 1.0, var_a * var_b))
    return np.where(flat, 0.0, np.clip(cov / denom, -1.0, 1.0))


def ncc_volume(F_i: FeatureMap, F_j: FeatureMap, view_i: View, view_j: View,
               candidates: DepthCandidates, window: int = 3) -> Tuple[np.ndarray, np.ndarray]:
    """Windowed NCC of F_i against warp(F_j, d_k): (scores h x w x D, valid h x w x D)."""
    _check_pair(F_i, F_j)
    h, w = F_i.height, F_i.width
    scores = np.zeros((h, w, candidates.count))
    valid = np.empty((h, w, candidates.count), dtype=bool)
    for k, warped, mask in _sweep(F_i, F_j, view_i, view_j, candidates):
        scores[:, :, k] = np.where(mask, normalized_correlation(F_i.grid.data, warped, mask, window), 0.0)
        valid[:, :, k] = mask
    return scores, valid


def _masked_box(values: np.ndarray, valid: np.ndarray, size: int, fill: float) -> np.ndarray:
    """Spatial box average over valid entries; invalid entries become `fill`."""
    if size > 1:
        box = (size, size, 1)
        total = ndimage.uniform_filter(np.where(valid, values, 0.0), size=box, mode="nearest")
        count = ndimage.uniform_filter(valid.astype(np.float64), size=box, mode="nearest")
        values = total / np.where(count > 0, count, 1.0)
    return np.where(valid, values, fill)


def build_cost_volume(F_i: FeatureMap, F_j: FeatureMap, view_i: View, view_j: View,
                      candidates: DepthCandidates,
                      cfg: Optional[CostVolumeConfig] = None) -> CostVolume:
    """
    Matching scores aggregated by a spatial box filter and scaled by the gain.

    The box filter averages valid entries only, so border pixels never
    borrow evidence from their neighbours. With NCC aggregation, scores at
    or below the evidence floor and invalid warps all get logit 0: a pixel
    with no convincing match keeps a flat distribution however few of its
    hypotheses can be checked.
    """
    cfg = cfg or CostVolumeConfig()
    gain = cfg.gain_for(candidates.count)
    if cfg.aggregation == CostAggregation.CORRELATION:
        logits, valid = correlation_volume(F_i, F_j, view_i, view_j, candidates, cfg.invalid_logit)
        return CostVolume(_masked_box(logits, valid, cfg.smoothing, cfg.invalid_logit) * gain, candidates)

    scores, valid = ncc_volume(F_i, F_j, view_i, view_j, candidates, cfg.window)
    scores = _masked_box(scores, valid, cfg.smoothing, 0.0)
    evidence = np.clip((scores - cfg.evidence_floor) / (1.0 - cfg.evidence_floor), 0.0, 1.0)
    return CostVolume(np.where(valid, evidence, 0.0) * gain, candidates)


# ============================================================================
# DEPTH AND CONFIDENCE
# ============================================================================

def depth_probabilities(vol: CostVolume) -> np.ndarray:
    return softmax(vol.logits, axis=-1)


def softmax_depth(vol: CostVolume) -> ImageGrid:
    """Expected depth under the per-pixel softmax over candidates."""
    values = vol.candidates.values
    probs = depth_probabilities(vol)
    depth = np.sum(probs * values, axis=-1)
    return ImageGrid(np.clip(depth, values[0], values[-1]))


def confidence_map(vol: CostVolume) -> ConfidenceMap:
    """Max softmax probability per pixel, in [1/D, 1]."""
    probs = depth_probabilities(vol)
    conf = np.clip(probs.max(axis=-1), 1.0 / vol.candidates.count, 1.0)
    return ConfidenceMap(ImageGrid(conf))


def backproject_depth(depth: ImageGrid, view: View,
                      weights: Optional[ImageGrid] = None) -> PointCloud:
    """
    One world point per pixel with depth > 0, in row-major pixel order.

    `view` must have the depth map's resolution; `weights` (same size) are
    attached per point when given.
    """
    intr = view.intrinsics
    if (depth.width, depth.height) != (intr.width, intr.height):
        raise ValueError(
            f"shape mismatch: depth {depth.width}x{depth.height} vs view {intr.width}x{intr.height}"
        )
    d = depth.plane()
    valid = d > 0
    u, v = pixel_grid(intr.height, intr.width)
    points = unproject_pixels(u[valid], v[valid], d[valid], intr, view.pose)
    w = weights.plane()[valid] if weights is not None else None
    return PointCloud(points, w)

"""
Training objectives with analytic gradients.

- chamfer / weighted_chamfer: symmetric mean nearest-neighbour Euclidean
  distance between two clouds, optionally weighted per point (weights are
  constants: no gradient flows into them)
- angmf_nll: angular von Mises-Fisher negative log-likelihood of a normal
  with concentration kappa
- uncertainty_sample / normal_loss: kappa-guided pixel sampling and the
  three-scale normal objective
- photometric: w11 * MSE + w12 * (1 - SSIM), gradient w.r.t. the prediction
- total_loss: the weighted sum of the three terms
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import expit

from surfel_core.geometry import ImageGrid
from surfel_core.models import LossWeights, NormalPrediction, PointCloud, SamplingConfig


NN_CANDIDATES = 8
TIE_RTOL = 1e-9
TIE_ATOL = 1e-12
ARCCOS_CLAMP = 1.0 - 1e-7
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


# ============================================================================
# NEAREST NEIGHBOURS AND CHAMFER
# ============================================================================

def nearest_neighbors(query: np.ndarray, reference: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Euclidean nearest neighbour of each query point in `reference`.

    Distances are recomputed exactly for the kd-tree's candidates; equal
    distances resolve to the lowest reference index.

    Returns:
        (distances (N,), indices (N,))
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if query.shape[0] == 0 or reference.shape[0] == 0:
        raise ValueError("empty cloud")
    k = min(NN_CANDIDATES, reference.shape[0])
    tree = cKDTree(reference)
    kd_dist, cand = tree.query(query, k=k)
    kd_dist = np.asarray(kd_dist).reshape(query.shape[0], k)
    cand = np.asarray(cand).reshape(query.shape[0], k)
    dist = np.linalg.norm(query[:, None, :] - reference[cand], axis=-1)
    best = dist.min(axis=1)
    tied = dist == best[:, None]
    index = np.where(tied, cand, reference.shape[0]).min(axis=1)

    # ties may extend past the k candidates: resolve those rows over the full ball
    radius = best * (1.0 + TIE_RTOL) + TIE_ATOL
    crowded = np.flatnonzero((k < reference.shape[0]) & (kd_dist[:, -1] <= radius))
    for row in crowded:
        members = np.asarray(tree.query_ball_point(query[row], radius[row]), dtype=np.int64)
        d = np.linalg.norm(query[row] - reference[members], axis=-1)
        best[row] = d.min()
        index[row] = members[d == best[row]].min()
    return best, index


@dataclass(frozen=True, eq=False)
class ChamferResult:
    value: float
    grad_p1: np.ndarray
    grad_p2: np.ndarray


def _directed(src: np.ndarray, dst: np.ndarray, weights: np.ndarray):
    """(1/N) sum_i m_i |src_i - dst_nn(i)| and its gradients w.r.t. src and dst."""
    dist, nn = nearest_neighbors(src, dst)
    n = src.shape[0]
    value = np.sum(weights * dist) / n
    diff = src - dst[nn]
    # coincident points get a zero subgradient
    safe = np.where(dist > 0, dist, 1.0)
    unit = np.where((dist > 0)[:, None], diff / safe[:, None], 0.0)
    g_src = (weights / n)[:, None] * unit
    g_dst = np.zeros_like(dst)
    np.add.at(g_dst, nn, -g_src)
    return value, g_src, g_dst


def _chamfer(P1: PointCloud, P2: PointCloud, w1: np.ndarray, w2: np.ndarray) -> ChamferResult:
    if len(P1) == 0 or len(P2) == 0:
        raise ValueError("empty cloud")
    v12, g1a, g2a = _directed(P1.points, P2.points, w1)
    v21, g2b, g1b = _directed(P2.points, P1.points, w2)
    return ChamferResult(0.5 * (v12 + v21), 0.5 * (g1a + g1b), 0.5 * (g2a + g2b))


def chamfer(P1: PointCloud, P2: PointCloud) -> ChamferResult:
    """L = 1/2 (mean_i min_j |p1_i - p2_j| + mean_j min_i |p2_j - p1_i|)."""
    return _chamfer(P1, P2, np.ones(len(P1)), np.ones(len(P2)))


def weighted_chamfer(P1: PointCloud, P2: PointCloud) -> ChamferResult:
    """Chamfer with per-point weights on each directed term, divided by raw counts."""
    if P1.weights is None or P2.weights is None:
        raise ValueError("missing weights")
    return _chamfer(P1, P2, P1.weights, P2.weights)


# ============================================================================
# ANGULAR VON MISES-FISHER NLL
# ============================================================================

@dataclass(frozen=True, eq=False)
class AngmfResult:
    value: np.ndarray
    grad_n: np.ndarray
    grad_kappa: np.ndarray


def angmf_nll(n, kappa, n_hat) -> AngmfResult:
    """
    -log(k^2 + 1) + log(1 + exp(-k pi)) + k arccos(n . n_hat), elementwise.

    n and n_hat are (..., 3) unit normals, kappa is (...). The value uses the
    exact angle; the gradient clamps the cosine at 1 - 1e-7 (zero slope
    beyond it). grad_n is projected onto the tangent plane at n.
    """
    n = np.asarray(n, dtype=np.float64)
    n_hat = np.asarray(n_hat, dtype=np.float64)
    kappa = np.asarray(kappa, dtype=np.float64)
    if np.any(kappa <= 0):
        raise ValueError("non-positive kappa")
    cos = np.sum(n * n_hat, axis=-1)
    theta = np.arccos(np.clip(cos, -1.0, 1.0))
    value = -np.log1p(kappa * kappa) + np.logaddexp(0.0, -kappa * np.pi) + kappa * theta

    inside = np.abs(cos) < ARCCOS_CLAMP
    dtheta = np.where(inside, -1.0 / np.sqrt(np.where(inside, 1.0 - cos * cos, 1.0)), 0.0)
    g = (kappa * dtheta)[..., None] * n_hat
    grad_n = g - n * np.sum(n * g, axis=-1, keepdims=True)
    grad_kappa = -2.0 * kappa / (kappa * kappa + 1.0) - np.pi * expit(-kappa * np.pi) + theta
    return AngmfResult(value, grad_n, grad_kappa)


# ============================================================================
# KAPPA-GUIDED SAMPLING AND NORMAL LOSS
# ============================================================================

def uncertainty_sample(kappa_map, cfg: SamplingConfig, seed: int,
                       valid: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Flat pixel indices: the floor(beta N) lowest-kappa pixels (ties by
    index) followed by N - floor(beta N) distinct uniform draws from the rest.
    """
    kappa = kappa_map.plane() if isinstance(kappa_map, ImageGrid) else np.asarray(kappa_map, dtype=np.float64)
    flat = kappa.reshape(-1)
    candidates = np.arange(flat.shape[0]) if valid is None else np.flatnonzero(np.asarray(valid).reshape(-1))
    n = cfg.budget(candidates.shape[0])
    if n > candidates.shape[0]:
        raise ValueError(f"sample budget N={n} exceeds pixel count {candidates.shape[0]}")
    n_low = int(np.floor(cfg.beta * n + 1e-9))
    order = np.argsort(flat[candidates], kind="stable")
    lowest = candidates[order[:n_low]]
    rest = np.sort(candidates[order[n_low:]])
    rng = np.random.default_rng(seed)
    extra = rng.choice(rest, size=n - n_low, replace=False) if n > n_low else np.zeros(0, dtype=np.int64)
    return np.concatenate([lowest, extra]).astype(np.int64)


@dataclass(frozen=True, eq=False)
class NormalLossResult:
    value: float
    grad_normals: List[np.ndarray]
    grad_kappa: List[np.ndarray]
    samples: List[np.ndarray]


def normal_loss(pred: NormalPrediction, pseudo_gt: Sequence[np.ndarray], cfg: SamplingConfig,
                seed: int, valid: Optional[Sequence[np.ndarray]] = None) -> NormalLossResult:
    """
    Mean over scales of the average angmf_nll on each scale's sampled pixels.

    Scale k samples with seed + k. Gradients are dense per scale (zero off the
    sampled set).
    """
    if len(pseudo_gt) != pred.n_scales:
        raise ValueError(f"shape mismatch: {len(pseudo_gt)} target scales for {pred.n_scales} predicted")
    n_scales = pred.n_scales
    total = 0.0
    grads_n, grads_k, samples = [], [], []
    for k in range(n_scales):
        normals = pred.normals[k]
        kappa = pred.kappa[k]
        target = np.asarray(pseudo_gt[k], dtype=np.float64)
        if target.shape != normals.shape:
            raise ValueError(f"shape mismatch at scale {k}: {target.shape} vs {normals.shape}")
        mask = None if valid is None else valid[k]
        idx = uncertainty_sample(kappa, cfg, seed + k, mask)
        flat_n = normals.reshape(-1, 3)
        res = angmf_nll(flat_n[idx], kappa.reshape(-1)[idx], target.reshape(-1, 3)[idx])
        total += float(np.mean(res.value)) / n_scales

        scale = 1.0 / (n_scales * idx.shape[0])
        g_n = np.zeros_like(flat_n)
        g_k = np.zeros(flat_n.shape[0])
        np.add.at(g_n, idx, res.grad_n * scale)
        np.add.at(g_k, idx, res.grad_kappa * scale)
        grads_n.append(g_n.reshape(normals.shape))
        grads_k.append(g_k.reshape(kappa.shape))
        samples.append(idx)
    return NormalLossResult(total, grads_n, grads_k, samples)


# ============================================================================
# PHOTOMETRIC
# ============================================================================

def _window(x: np.ndarray) -> np.ndarray:
    """11x11 Gaussian window per channel, zero padded (a symmetric operator)."""
    return ndimage.gaussian_filter(x, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0),
                                   truncate=SSIM_RADIUS / SSIM_SIGMA, mode="constant")


def _ssim_terms(x: np.ndarray, y: np.ndarray):
    mu_x, mu_y = _window(x), _window(y)
    sxx = _window(x * x) - mu_x * mu_x
    syy = _window(y * y) - mu_y * mu_y
    sxy = _window(x * y) - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * sxy + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = sxx + syy + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def _as_array(img) -> np.ndarray:
    return img.data if isinstance(img, ImageGrid) else np.asarray(img, dtype=np.float64)


def ssim(I, I_hat) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5)."""
    x, y = _as_array(I), _as_array(I_hat)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


@dataclass(frozen=True, eq=False)
class PhotometricResult:
    value: float
    grad: np.ndarray
    mse: float
    ssim: float


def photometric(I, I_hat, w11: float = 1.0, w12: float = 0.1) -> PhotometricResult:
    """
    w11 * MSE(I, I_hat) + w12 * (1 - SSIM(I, I_hat)).

    `I` is the target, `I_hat` the prediction; `grad` is dL/dI_hat.
    """
    x, y = _as_array(I), _as_array(I_hat)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    count = x.size
    diff = y - x
    mse = float(np.sum(diff * diff) / count)
    grad = w11 * 2.0 * diff / count

    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y)
    den = b1 * b2
    S = a1 * a2 / den
    ssim_value = float(np.mean(S))
    if w12 != 0.0:
        dS_dmu_y = (2.0 * mu_x * a2 - 2.0 * mu_x * a1) / den - S * (2.0 * mu_y / b1 - 2.0 * mu_y / b2)
        dS_dexy = 2.0 * a1 / den
        dS_deyy = -S / b2
        d_ssim = (_window(dS_dmu_y) + x * _window(dS_dexy) + 2.0 * y * _window(dS_deyy)) / count
        grad = grad - w12 * d_ssim
    value = w11 * mse + w12 * (1.0 - ssim_value)
    return PhotometricResult(value, grad, mse, ssim_value)


def total_loss(pho: float, wcd: float, normal: float, w: LossWeights) -> float:
    return w.w1 * pho + w.w2 * wcd + w.w3 * normal

"""
Reconstruction driver.

forward_reconstruct runs the non-learned forward pass (features, cost
volumes, coarse depth and confidence, pixel-aligned surfels from both
views). fit_scene then optimises every surfel parameter per scene with Adam
under the total objective: photometric on the source views, weighted
Chamfer on the surfel centres grouped by source view, and the kappa-guided
normal loss on rendered normals.
"""

import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from surfel_core.cost_volume import (
    ConfidenceMap,
    CostVolume,
    CostVolumeConfig,
    FEATURE_STRIDE,
    build_cost_volume,
    confidence_map,
    extract_features,
    make_candidates,
    softmax_depth,
)
from surfel_core.gaussian_field import DEFAULT_ALPHA0, DEFAULT_SCALE_MULT, build_pixel_aligned
from surfel_core.geometry import ImageGrid, View, normalize_quats, upsample
from surfel_core.losses import (
    chamfer,
    normal_loss,
    photometric,
    total_loss,
    weighted_chamfer,
)
from surfel_core.models import (
    NORMAL_SCALE_FACTORS,
    ChamferMode,
    DepthSpacing,
    LossWeights,
    NormalPrediction,
    PointCloud,
    SamplingConfig,
    SplatField,
)
from surfel_core.rasterizer import RenderConfig, RenderUpstream, SplatParams, render, render_backward
from surfel_core.utils import normalize_backward, normalize_vectors, show_progress


KAPPA_FLOOR = 1e-4
MIN_SCALE = 1e-6
DEGENERATE_BASELINE = 1e-9
NORMAL_VALID_ACC = 0.5


class NonFiniteLossError(RuntimeError):
    """Raised when a loss component becomes NaN or infinite during fitting."""


@dataclass(frozen=True)
class LearningRates:
    """Per-class Adam step sizes; `mu` is relative to the median scene depth."""
    mu: float = 1e-4
    s: float = 5e-3
    q: float = 1e-3
    alpha: float = 5e-2
    c: float = 1e-2
    kappa: float = 1e-2

    def __post_init__(self):
        for name in ("mu", "s", "q", "alpha", "c", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"learning rate {name} must be > 0")


@dataclass(frozen=True)
class FitConfig:
    steps: int = 500
    lr: LearningRates = field(default_factory=LearningRates)
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    depth_bins: int = 128
    spacing: DepthSpacing = DepthSpacing.INVERSE
    cost_volume: CostVolumeConfig = field(default_factory=CostVolumeConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    alpha0: float = DEFAULT_ALPHA0
    scale_mult: float = DEFAULT_SCALE_MULT
    chamfer_mode: ChamferMode = ChamferMode.WEIGHTED
    use_normal_loss: bool = True
    verbose: bool = False

    def __post_init__(self):
        object.__setattr__(self, "spacing", DepthSpacing(self.spacing))
        object.__setattr__(self, "chamfer_mode", ChamferMode(self.chamfer_mode))
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"Adam betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.eps > 0:
            raise ValueError(f"Adam eps must be > 0, got {self.eps}")


@dataclass(frozen=True, eq=False)
class ForwardResult:
    field: SplatField
    coarse_depths: List[ImageGrid]
    confidences: List[ConfidenceMap]
    depths: List[ImageGrid]
    confidences_full: List[ImageGrid]
    cost_volumes: List[CostVolume]
    degenerate_baseline: bool
    skipped: int


@dataclass(frozen=True)
class LossRecord:
    step: int
    pho: float
    wcd: float
    normal: float
    total: float


@dataclass(frozen=True, eq=False)
class FitReport:
    trace: List[LossRecord]
    field: SplatField
    forward: Optional[ForwardResult]
    wall_time: float
    kappa: List[List[np.ndarray]] = field(default_factory=list)

    @property
    def initial(self) -> LossRecord:
        return self.trace[0]

    @property
    def final(self) -> LossRecord:
        return self.trace[-1]

    @property
    def degenerate_baseline(self) -> bool:
        return self.forward is not None and self.forward.degenerate_baseline


# ============================================================================
# FORWARD PASS
# ============================================================================

def _camera_normals(pseudo: ImageGrid) -> ImageGrid:
    """Unit camera-frame normals; unknown (zero) entries face the camera."""
    unit, norm = normalize_vectors(pseudo.data)
    unit[norm <= 1e-12] = (0.0, 0.0, -1.0)
    return ImageGrid(unit)


def forward_reconstruct(view1: View, view2: View, pseudo_normals: Sequence[ImageGrid],
                        cfg: Optional[FitConfig] = None) -> ForwardResult:
    """
    Two-view forward pass with zero optimisation.

    Each view is swept against the other; the coarse 1/4-resolution depth is
    upsampled x4 and back-projected into pixel-aligned surfels oriented by
    the view's pseudo-GT normals.
    """
    cfg = cfg or FitConfig()
    views = [view1, view2]
    if len(pseudo_normals) != 2:
        raise ValueError(f"expected 2 pseudo-normal maps, got {len(pseudo_normals)}")
    for v in views:
        if v.image is None:
            raise ValueError("forward_reconstruct needs views with images")

    baseline = float(np.linalg.norm(view1.camera_center - view2.camera_center))
    degenerate = baseline < DEGENERATE_BASELINE
    if degenerate:
        print("[WARN] degenerate baseline: the two views share a camera centre")

    features = [extract_features(v.image) for v in views]
    fields, coarse, confs, depths, confs_full, volumes = [], [], [], [], [], []
    skipped = 0
    for i in (0, 1):
        j = 1 - i
        cands = make_candidates(views[i].near, views[i].far, cfg.depth_bins, cfg.spacing)
        vol = build_cost_volume(features[i], features[j], views[i], views[j], cands, cfg.cost_volume)
        depth_q = softmax_depth(vol)
        conf_q = confidence_map(vol)
        depth = upsample(depth_q, FEATURE_STRIDE)
        conf = ImageGrid(np.clip(upsample(conf_q.grid, FEATURE_STRIDE).data, 1.0 / cands.count, 1.0))
        splats, n_skipped = build_pixel_aligned(depth, _camera_normals(pseudo_normals[i]), views[i],
                                                cfg.alpha0, cfg.scale_mult, view_index=i)
        if cfg.verbose:
            print(f"[CostVolume] view {i}: {vol.logits.shape[0]}x{vol.logits.shape[1]}x{cands.count}, "
                  f"mean confidence {conf_q.grid.data.mean():.4f}")
        fields.append(splats)
        coarse.append(depth_q)
        confs.append(conf_q)
        depths.append(depth)
        confs_full.append(conf)
        volumes.append(vol)
        skipped += n_skipped

    return ForwardResult(SplatField.concatenate(fields), coarse, confs, depths, confs_full, volumes,
                         degenerate, skipped)


# ============================================================================
# ADAM
# ============================================================================

@dataclass(frozen=True, eq=False)
class AdamState:
    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float, beta2: float, eps: float, t: int) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; `t` is the 1-based step count."""
    if param.shape != grad.shape:
        raise ValueError(f"shape mismatch: param {param.shape} vs grad {grad.shape}")
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v)


class AdamOptimizer:
    """Adam over named parameter groups, each with its own learning rate."""

    def __init__(self, lrs: Dict[str, float], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state: Dict[str, AdamState] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        self.t += 1
        updated = {}
        for name, value in params.items():
            state = self.state.get(name) or AdamState.zeros_like(value)
            updated[name], self.state[name] = adam_step(
                value, grads[name], state, self.lrs[name], self.beta1, self.beta2, self.eps, self.t
            )
        return updated


# ============================================================================
# OBJECTIVE
# ============================================================================

def _block_mean(a: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return a
    H, W = a.shape[:2]
    return a.reshape(H // f, f, W // f, f, *a.shape[2:]).mean(axis=(1, 3))


def _block_mean_adjoint(g: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return g
    return np.repeat(np.repeat(g, f, axis=0), f, axis=1) / (f * f)


def _block_all(mask: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return mask
    H, W = mask.shape
    return mask.reshape(H // f, f, W // f, f).all(axis=(1, 3))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _kappa_rho_init(shape) -> np.ndarray:
    # softplus(rho) + floor = 1
    return np.full(shape, np.log(np.expm1(1.0 - KAPPA_FLOOR)))


def _pyramid_targets(pseudo: ImageGrid):
    unit, norm = normalize_vectors(pseudo.data)
    has = norm > 0.5
    targets, known = [], []
    for f in NORMAL_SCALE_FACTORS:
        t_unit, t_norm = normalize_vectors(_block_mean(unit, f))
        targets.append(t_unit)
        known.append(_block_all(has, f) & (t_norm > 1e-6))
    return targets, known


@dataclass(eq=False)
class _Objective:
    views: List[View]
    pho_views: List[View]
    targets: List[List[np.ndarray]]
    known: List[List[np.ndarray]]
    confidences: List[Optional[ImageGrid]]
    cfg: FitConfig

    def evaluate(self, params: SplatParams, view_index: np.ndarray, pixels: np.ndarray,
                 rhos: List[List[np.ndarray]], step: int):
        cfg = self.cfg
        w = cfg.weights
        rcfg = cfg.render
        n = len(params)
        g_mu = np.zeros((n, 3))
        grads = None
        g_rhos = [[np.zeros_like(r) for r in per_view] for per_view in rhos]

        # photometric + normal terms share one render per view
        pho = 0.0
        normal_value = 0.0
        n_pho = len(self.pho_views)
        use_normal = cfg.use_normal_loss and w.w3 > 0
        for k, view in enumerate(self.pho_views):
            out = render(params, view, rcfg)
            res = photometric(view.image, out.rgb, w.w11, w.w12)
            pho += res.value / n_pho
            upstream_rgb = res.grad * (w.w1 / n_pho)
            upstream_normal = None
            if use_normal and k < len(self.views):
                value, g_normal, g_rho = self._normal_term(out, k, rhos[k], step)
                normal_value += value / len(self.views)
                upstream_normal = g_normal * (w.w3 / len(self.views))
                for s, g in enumerate(g_rho):
                    g_rhos[k][s] = g * (w.w3 / len(self.views))
            g = render_backward(params, view, rcfg, RenderUpstream(rgb=upstream_rgb, normal=upstream_normal))
            grads = g if grads is None else grads + g

        wcd = 0.0
        if cfg.chamfer_mode != ChamferMode.OFF and w.w2 > 0 and len(self.views) >= 2:
            wcd, g_wcd = self._chamfer_term(params.mu, view_index, pixels)
            g_mu += g_wcd * w.w2

        total = total_loss(pho, wcd, normal_value, w)
        return (pho, wcd, normal_value, total), grads, g_mu, g_rhos

    def _normal_term(self, out, k: int, rho: List[np.ndarray], step: int):
        n_full, norm_full = normalize_vectors(out.normal.data)
        visible = (out.acc.plane() > NORMAL_VALID_ACC) & (norm_full > 1e-12)
        preds, norms, kappas, valid = [], [], [], []
        for s, f in enumerate(NORMAL_SCALE_FACTORS):
            pooled = _block_mean(n_full, f)
            unit, norm = normalize_vectors(pooled)
            preds.append(unit)
            norms.append(norm)
            kappas.append(_softplus(rho[s]) + KAPPA_FLOOR)
            valid.append(_block_all(visible, f) & self.known[k][s] & (norm > 1e-6))

        if not all(v.any() for v in valid):
            return 0.0, np.zeros_like(n_full), [np.zeros_like(r) for r in rho]

        seed = self.cfg.seed + 7919 * step + 104729 * k
        res = normal_loss(NormalPrediction(tuple(preds), tuple(kappas)), self.targets[k],
                          self.cfg.sampling, seed, valid)
        g_full = np.zeros_like(n_full)
        for s, f in enumerate(NORMAL_SCALE_FACTORS):
            g_pooled = normalize_backward(preds[s], norms[s], res.grad_normals[s])
            g_full += _block_mean_adjoint(g_pooled, f)
        g_normal = normalize_backward(n_full, norm_full, g_full)
        g_rho = [res.grad_kappa[s] * expit(rho[s]) for s in range(len(rho))]
        return res.value, g_normal, g_rho

    def _chamfer_term(self, mu: np.ndarray, view_index: np.ndarray, pixels: np.ndarray):
        clouds = []
        for k in (0, 1):
            mask = view_index == k
            if not mask.any():
                return 0.0, np.zeros_like(mu)
            conf = self.confidences[k]
            if conf is not None:
                px = pixels[mask]
                weights = conf.plane()[px[:, 1], px[:, 0]]
            else:
                weights = np.ones(int(mask.sum()))
            clouds.append((mask, PointCloud(mu[mask], weights)))
        (m1, P1), (m2, P2) = clouds
        res = weighted_chamfer(P1, P2) if self.cfg.chamfer_mode == ChamferMode.WEIGHTED else chamfer(P1, P2)
        g = np.zeros_like(mu)
        g[m1] += res.grad_p1
        g[m2] += res.grad_p2
        return res.value, g


# ============================================================================
# FITTING
# ============================================================================

def _project(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    params["quats"] = normalize_quats(params["quats"])
    params["scales"] = np.maximum(params["scales"], MIN_SCALE)
    params["opacity"] = np.clip(params["opacity"], 0.0, 1.0)
    params["colors"] = np.clip(params["colors"], 0.0, 1.0)
    return params


def optimize_field(field: SplatField, views: Sequence[View], pseudo_normals: Sequence[ImageGrid],
                   cfg: Optional[FitConfig] = None,
                   confidences: Optional[Sequence[ImageGrid]] = None,
                   heldout_views: Sequence[View] = (),
                   forward: Optional[ForwardResult] = None) -> FitReport:
    """
    Adam on every surfel parameter under the total objective.

    The trace holds steps + 1 records: the objective before each update and
    after the last one.
    """
    cfg = cfg or FitConfig()
    views = list(views)
    if len(pseudo_normals) != len(views):
        raise ValueError(f"expected {len(views)} pseudo-normal maps, got {len(pseudo_normals)}")
    for v in list(views) + list(heldout_views):
        if v.image is None:
            raise ValueError("fitting needs views with images")
    start = time.time()

    use_normal = cfg.use_normal_loss and cfg.weights.w3 > 0
    pyramids = [_pyramid_targets(p) for p in pseudo_normals] if use_normal else []
    objective = _Objective(
        views=views,
        pho_views=views + list(heldout_views),
        targets=[t for t, _ in pyramids],
        known=[k for _, k in pyramids],
        confidences=list(confidences) if confidences is not None else [None] * len(views),
        cfg=cfg,
    )
    shapes = [[t.shape[:2] for t in targets] for targets in objective.targets]
    rhos = [[_kappa_rho_init(s) for s in per_view] for per_view in shapes]

    depths = [np.median(field.mu[field.view_index == k] @ v.pose.rotation[2] + v.pose.t[2])
              for k, v in enumerate(views) if np.any(field.view_index == k)]
    scene_scale = float(np.median(depths)) if depths else 1.0
    lrs = {"mu": cfg.lr.mu * scene_scale, "scales": cfg.lr.s, "quats": cfg.lr.q,
           "opacity": cfg.lr.alpha, "colors": cfg.lr.c}
    params = {"mu": field.mu.copy(), "scales": field.scales.copy(), "quats": field.quats.copy(),
              "opacity": field.opacity.copy(), "colors": field.colors.copy()}
    for k, per_view in enumerate(rhos):
        for s, rho in enumerate(per_view):
            name = f"rho_{k}_{s}"
            lrs[name] = cfg.lr.kappa
            params[name] = rho
    optimizer = AdamOptimizer(lrs, cfg.beta1, cfg.beta2, cfg.eps)

    if cfg.verbose:
        print(f"[Fit] {len(field)} splats, {cfg.steps} steps, scene scale {scene_scale:.4f}")

    trace: List[LossRecord] = []
    for step in range(cfg.steps + 1):
        current = SplatParams(params["mu"], params["scales"], params["quats"], params["opacity"], params["colors"])
        rho_lists = [[params[f"rho_{k}_{s}"] for s in range(len(per_view))] for k, per_view in enumerate(rhos)]
        (pho, wcd, nrm, total), grads, g_mu, g_rhos = objective.evaluate(
            current, field.view_index, field.pixels, rho_lists, step
        )
        if not all(np.isfinite(x) for x in (pho, wcd, nrm, total)):
            raise NonFiniteLossError(
                f"non-finite loss at step {step}: pho={pho}, wcd={wcd}, normal={nrm}, total={total}"
            )
        trace.append(LossRecord(step, float(pho), float(wcd), float(nrm), float(total)))
        if cfg.verbose:
            show_progress(step + 1, cfg.steps + 1, start, prefix="    ")
        if step == cfg.steps:
            break

        grad_dict = {"mu": grads.mu + g_mu, "scales": grads.scales, "quats": grads.quats,
                     "opacity": grads.opacity, "colors": grads.colors}
        for k, per_view in enumerate(g_rhos):
            for s, g in enumerate(per_view):
                grad_dict[f"rho_{k}_{s}"] = g
        params = _project(optimizer.step(params, grad_dict))

    if cfg.verbose:
        print(f"[Fit] total {trace[0].total:.6f} -> {trace[-1].total:.6f} "
              f"(pho {trace[0].pho:.6f} -> {trace[-1].pho:.6f})")

    fitted = field.with_params(mu=params["mu"], scales=params["scales"], quats=params["quats"],
                               opacity=params["opacity"], colors=params["colors"])
    kappa = [[_softplus(params[f"rho_{k}_{s}"]) + KAPPA_FLOOR for s in range(len(per_view))]
             for k, per_view in enumerate(rhos)]
    return FitReport(trace, fitted, forward, time.time() - start, kappa)


def fit_scene(view1: View, view2: View, pseudo_normals: Sequence[ImageGrid],
              cfg: Optional[FitConfig] = None, heldout_views: Sequence[View] = ()) -> FitReport:
    """forward_reconstruct followed by optimize_field on the two source views."""
    cfg = cfg or FitConfig()
    fwd = forward_reconstruct(view1, view2, pseudo_normals, cfg)
    return optimize_field(fwd.field, [view1, view2], pseudo_normals, cfg,
                          confidences=fwd.confidences_full, heldout_views=heldout_views, forward=fwd)

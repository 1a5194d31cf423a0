"""
Gradient verification for every differentiable operation.

Compares analytic gradients with central finite differences on seeded
random instances:

    mu, s, q, alpha, c    rasterizer (render_backward), random upstream on
                          RGB, depth, normal and accumulated opacity
    chamfer               d/d(both clouds)
    weighted_chamfer      d/d(both clouds), random per-point weights
    angmf_nll             d/dn (tangent) and d/dkappa
    photometric           d/d(prediction), MSE + SSIM

The relative error of an instance is |analytic - numeric| / |numeric|
(2-norms over the whole gradient); a class passes when its worst instance
is within the tolerance. --torch additionally re-states the losses in
float64 torch and compares against autograd.
"""

import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from surfel_core.geometry import CameraIntrinsics, CameraPose, View, normals_to_quats
from surfel_core.losses import SSIM_C1, SSIM_C2, SSIM_RADIUS, SSIM_SIGMA, angmf_nll, chamfer, photometric, weighted_chamfer
from surfel_core.models import PointCloud
from surfel_core.rasterizer import RenderConfig, RenderUpstream, SplatParams, render, render_backward
from surfel_core.utils import show_progress
from surfel_io.formats import write_json
from surfel_io.utils import EXIT_FAILURE, EXIT_OK, StageError, report_error, stage


RASTER_CLASSES = ("mu", "s", "q", "alpha", "c")
LOSS_CLASSES = ("chamfer", "weighted_chamfer", "angmf_nll", "photometric")
PARAM_CLASSES = RASTER_CLASSES + LOSS_CLASSES

DEFAULT_TOLERANCE = 1e-3
DEFAULT_SEEDS = 20

_RASTER_ATTR = {"mu": "mu", "s": "scales", "q": "quats", "alpha": "opacity", "c": "colors"}
_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class GradcheckSizes:
    splats: int = 5
    image: int = 8
    points: int = 12
    normals: int = 16
    photo: int = 8

    def __post_init__(self):
        for name in ("splats", "image", "points", "normals", "photo"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class GradcheckReport:
    worst: Dict[str, float]
    worst_seed: Dict[str, int]
    tolerance: float
    seeds: List[int]
    torch_worst: Dict[str, float] = field(default_factory=dict)
    injected: Optional[str] = None
    wall_time: float = 0.0

    @property
    def failures(self) -> List[str]:
        bad = [k for k in PARAM_CLASSES if self.worst.get(k, 0.0) > self.tolerance]
        bad += [f"torch:{k}" for k, v in self.torch_worst.items() if v > self.tolerance]
        return bad

    @property
    def passed(self) -> bool:
        return not self.failures

    def as_dict(self) -> Dict:
        return {
            "tolerance": self.tolerance,
            "seeds": self.seeds,
            "injected": self.injected,
            "passed": self.passed,
            "failures": self.failures,
            "worst": self.worst,
            "worst_seed": self.worst_seed,
            "torch_worst": self.torch_worst,
        }


def show_banner():
    """Display the gradcheck banner"""
    print()
    print("=" * 70)
    print("               Gradient Verification                       ")
    print("=" * 70)
    print()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), _NORM_FLOOR))


def central_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h_rel: float = 0.0,
                       h_abs: float = 1e-6) -> np.ndarray:
    """Numeric gradient of a scalar function, one coordinate at a time."""
    grad = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        h = max(h_abs, h_rel * abs(x[idx]))
        plus, minus = x.copy(), x.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2.0 * h)
    return grad


def _sign(name: str, inject: Optional[str]) -> float:
    return -1.0 if inject == name else 1.0


# ============================================================================
# RANDOM INSTANCES
# ============================================================================

def gradcheck_view(size: int) -> View:
    intr = CameraIntrinsics(fx=float(size), fy=float(size), cx=size / 2.0, cy=size / 2.0, width=size, height=size)
    return View(None, intr, CameraPose.identity(), 0.1, 20.0)


def random_splats(rng: np.random.Generator, n: int) -> SplatParams:
    """Roughly camera-facing splats 1.5-2.5 units in front of an identity camera."""
    normals = rng.normal(size=(n, 3)) * 0.4
    normals[:, 2] = -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return SplatParams(
        mu=np.column_stack([rng.uniform(-0.3, 0.3, n), rng.uniform(-0.3, 0.3, n), rng.uniform(1.5, 2.5, n)]),
        scales=rng.uniform(0.2, 0.5, size=(n, 2)),
        quats=normals_to_quats(normals) * rng.uniform(0.8, 1.2, size=(n, 1)),
        opacity=rng.uniform(0.3, 0.8, n),
        colors=rng.uniform(0.1, 0.9, size=(n, 3)),
    )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ============================================================================
# PER-CLASS CHECKS
# ============================================================================

def check_rasterizer(seed: int, sizes: GradcheckSizes, inject: Optional[str] = None) -> Dict[str, float]:
    rng = np.random.default_rng(seed)
    view = gradcheck_view(sizes.image)
    cfg = RenderConfig()
    params = random_splats(rng, sizes.splats)
    H = W = sizes.image
    up = RenderUpstream(rgb=rng.normal(size=(H, W, 3)), depth=rng.normal(size=(H, W)),
                        normal=rng.normal(size=(H, W, 3)), acc=rng.normal(size=(H, W)))

    def objective(p: SplatParams) -> float:
        out = render(p, view, cfg)
        return float(np.sum(up.rgb * out.rgb.data) + np.sum(up.depth * out.depth.plane())
                     + np.sum(up.normal * out.normal.data) + np.sum(up.acc * out.acc.plane()))

    analytic = render_backward(params, view, cfg, up)
    errors = {}
    for name in RASTER_CLASSES:
        attr = _RASTER_ATTR[name]
        base = {k: getattr(params, k) for k in _RASTER_ATTR.values()}

        def fn(x, attr=attr, base=base):
            return objective(SplatParams(**{**base, attr: x}))

        numeric = central_difference(fn, getattr(params, attr), h_rel=1e-4, h_abs=1e-4)
        errors[name] = relative_error(_sign(name, inject) * getattr(analytic, attr), numeric)
    return errors


def check_chamfer(seed: int, sizes: GradcheckSizes, weighted: bool, inject: Optional[str] = None) -> float:
    rng = np.random.default_rng(seed)
    name = "weighted_chamfer" if weighted else "chamfer"
    n1, n2 = sizes.points, max(1, sizes.points - 3)
    p1, p2 = rng.normal(size=(n1, 3)), rng.normal(size=(n2, 3))
    w1 = rng.uniform(size=n1) if weighted else None
    w2 = rng.uniform(size=n2) if weighted else None
    loss = weighted_chamfer if weighted else chamfer

    res = loss(PointCloud(p1, w1), PointCloud(p2, w2))
    fd1 = central_difference(lambda x: loss(PointCloud(x, w1), PointCloud(p2, w2)).value, p1)
    fd2 = central_difference(lambda x: loss(PointCloud(p1, w1), PointCloud(x, w2)).value, p2)
    sign = _sign(name, inject)
    return relative_error(sign * np.concatenate([res.grad_p1, res.grad_p2]), np.concatenate([fd1, fd2]))


def check_angmf(seed: int, sizes: GradcheckSizes, inject: Optional[str] = None) -> float:
    rng = np.random.default_rng(seed)
    n = _unit(rng.normal(size=(sizes.normals, 3)))
    n_hat = _unit(rng.normal(size=(sizes.normals, 3)))
    kappa = rng.uniform(0.1, 5.0, sizes.normals)
    res = angmf_nll(n, kappa, n_hat)

    h = 1e-6
    fd_kappa = (angmf_nll(n, kappa + h, n_hat).value - angmf_nll(n, kappa - h, n_hat).value) / (2 * h)
    # derivative along the sphere: perturb, renormalise
    fd_n = np.zeros_like(n)
    for c in range(3):
        step = np.zeros(3)
        step[c] = h
        fd_n[:, c] = (angmf_nll(_unit(n + step), kappa, n_hat).value
                      - angmf_nll(_unit(n - step), kappa, n_hat).value) / (2 * h)
    analytic = np.concatenate([res.grad_n.ravel(), res.grad_kappa])
    return relative_error(_sign("angmf_nll", inject) * analytic, np.concatenate([fd_n.ravel(), fd_kappa]))


def check_photometric(seed: int, sizes: GradcheckSizes, inject: Optional[str] = None) -> float:
    rng = np.random.default_rng(seed)
    shape = (sizes.photo, sizes.photo, 3)
    target, pred = rng.uniform(size=shape), rng.uniform(size=shape)
    res = photometric(target, pred, 1.0, 0.1)
    numeric = central_difference(lambda x: photometric(target, x, 1.0, 0.1).value, pred)
    return relative_error(_sign("photometric", inject) * res.grad, numeric)


# ============================================================================
# TORCH RE-STATEMENTS
# ============================================================================

def _torch_window(torch, x):
    """Separable zero-padded Gaussian over H and W of an (H, W, C) tensor."""
    r = SSIM_RADIUS
    taps = torch.arange(-r, r + 1, dtype=torch.float64)
    kernel = torch.exp(-0.5 * (taps / SSIM_SIGMA) ** 2)
    kernel = kernel / kernel.sum()
    y = x.permute(2, 0, 1).unsqueeze(1)
    y = torch.nn.functional.conv2d(y, kernel.view(1, 1, 1, -1), padding=(0, r))
    y = torch.nn.functional.conv2d(y, kernel.view(1, 1, -1, 1), padding=(r, 0))
    return y.squeeze(1).permute(1, 2, 0)


def torch_photometric(torch, target, pred, w11: float = 1.0, w12: float = 0.1):
    mse = torch.mean((pred - target) ** 2)
    mu_x, mu_y = _torch_window(torch, target), _torch_window(torch, pred)
    sxx = _torch_window(torch, target * target) - mu_x * mu_x
    syy = _torch_window(torch, pred * pred) - mu_y * mu_y
    sxy = _torch_window(torch, target * pred) - mu_x * mu_y
    s = ((2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
         / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)))
    return w11 * mse + w12 * (1.0 - torch.mean(s))


def torch_chamfer(torch, p1, p2, w1=None, w2=None):
    d = torch.cdist(p1, p2)
    d12 = d.min(dim=1).values
    d21 = d.min(dim=0).values
    if w1 is not None:
        d12, d21 = w1 * d12, w2 * d21
    return 0.5 * (d12.sum() / p1.shape[0] + d21.sum() / p2.shape[0])


def torch_angmf(torch, n, kappa, n_hat):
    cos = torch.clamp((n * n_hat).sum(-1), -1.0, 1.0)
    value = -torch.log1p(kappa * kappa) + torch.nn.functional.softplus(-kappa * np.pi) + kappa * torch.acos(cos)
    return value.sum()


def torch_cross_check(seed: int, sizes: GradcheckSizes, inject: Optional[str] = None) -> Dict[str, float]:
    """Relative error of each analytic loss gradient against torch autograd."""
    import torch

    rng = np.random.default_rng(seed)

    def T(a):
        return torch.tensor(a, dtype=torch.float64, requires_grad=True)

    errors = {}

    for name, weighted in (("chamfer", False), ("weighted_chamfer", True)):
        p1, p2 = rng.normal(size=(sizes.points, 3)), rng.normal(size=(max(1, sizes.points - 3), 3))
        w1 = rng.uniform(size=p1.shape[0]) if weighted else None
        w2 = rng.uniform(size=p2.shape[0]) if weighted else None
        res = (weighted_chamfer if weighted else chamfer)(PointCloud(p1, w1), PointCloud(p2, w2))
        t1, t2 = T(p1), T(p2)
        tw = (torch.tensor(w1), torch.tensor(w2)) if weighted else (None, None)
        torch_chamfer(torch, t1, t2, *tw).backward()
        ref = np.concatenate([t1.grad.numpy(), t2.grad.numpy()])
        errors[name] = relative_error(_sign(name, inject) * np.concatenate([res.grad_p1, res.grad_p2]), ref)

    n = _unit(rng.normal(size=(sizes.normals, 3)))
    n_hat = _unit(rng.normal(size=(sizes.normals, 3)))
    kappa = rng.uniform(0.1, 5.0, sizes.normals)
    res = angmf_nll(n, kappa, n_hat)
    tn, tk = T(n), T(kappa)
    torch_angmf(torch, tn, tk, torch.tensor(n_hat)).backward()
    g = tn.grad.numpy()
    g_tangent = g - n * np.sum(n * g, axis=-1, keepdims=True)
    ref = np.concatenate([g_tangent.ravel(), tk.grad.numpy()])
    errors["angmf_nll"] = relative_error(
        _sign("angmf_nll", inject) * np.concatenate([res.grad_n.ravel(), res.grad_kappa]), ref)

    shape = (sizes.photo, sizes.photo, 3)
    target, pred = rng.uniform(size=shape), rng.uniform(size=shape)
    res = photometric(target, pred, 1.0, 0.1)
    tp = T(pred)
    torch_photometric(torch, torch.tensor(target), tp).backward()
    errors["photometric"] = relative_error(_sign("photometric", inject) * res.grad, tp.grad.numpy())
    return errors


# ============================================================================
# SUITE
# ============================================================================

def run_gradcheck(seed: int = 0, n_seeds: int = DEFAULT_SEEDS, sizes: Optional[GradcheckSizes] = None,
                  tolerance: float = DEFAULT_TOLERANCE, inject: Optional[str] = None,
                  use_torch: bool = False, verbose: bool = False) -> GradcheckReport:
    """
    Run every class on seeds seed, seed + 1, ..., seed + n_seeds - 1.

    Args:
        inject: negate the analytic gradient of this class (mutation check)
    """
    sizes = sizes or GradcheckSizes()
    if n_seeds < 1:
        raise ValueError(f"n_seeds must be >= 1, got {n_seeds}")
    if inject is not None and inject not in PARAM_CLASSES:
        raise ValueError(f"unknown parameter class {inject!r} (expected one of: {', '.join(PARAM_CLASSES)})")

    seeds = list(range(seed, seed + n_seeds))
    worst = {k: 0.0 for k in PARAM_CLASSES}
    worst_seed = {k: seeds[0] for k in PARAM_CLASSES}
    torch_worst: Dict[str, float] = {}

    def record(target: Dict[str, float], name: str, err: float, s: int):
        if not np.isfinite(err) or err > target.get(name, -1.0):
            target[name] = err
            if target is worst:
                worst_seed[name] = s

    start = time.time()
    for i, s in enumerate(seeds, start=1):
        for name, err in check_rasterizer(s, sizes, inject).items():
            record(worst, name, err, s)
        record(worst, "chamfer", check_chamfer(s, sizes, False, inject), s)
        record(worst, "weighted_chamfer", check_chamfer(s, sizes, True, inject), s)
        record(worst, "angmf_nll", check_angmf(s, sizes, inject), s)
        record(worst, "photometric", check_photometric(s, sizes, inject), s)
        if use_torch:
            for name, err in torch_cross_check(s, sizes, inject).items():
                record(torch_worst, name, err, s)
        if verbose:
            show_progress(i, len(seeds), start, prefix="    ")
    return GradcheckReport(worst, worst_seed, tolerance, seeds, torch_worst, inject, time.time() - start)


def print_report(report: GradcheckReport):
    print()
    print(f"{'class':<20}{'worst rel. error':>18}  {'seed':>6}")
    print("-" * 50)
    for name in PARAM_CLASSES:
        err = report.worst[name]
        tag = "[OK]" if err <= report.tolerance else "[FAIL]"
        print(f"{name:<20}{err:>18.3e}  {report.worst_seed[name]:>6}  {tag}")
    for name, err in report.torch_worst.items():
        tag = "[OK]" if err <= report.tolerance else "[FAIL]"
        print(f"{'torch:' + name:<20}{err:>18.3e}  {'':>6}  {tag}")
    print()
    print(f"{len(report.seeds)} seeds, tolerance {report.tolerance:g}, {report.wall_time:.1f}s")


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main CLI entry point"""
    import argparse

    parser = argparse.ArgumentParser(description='Finite-difference check of every analytic gradient')
    parser.add_argument('--seed', type=int, default=0, help='First seed (default: 0)')
    parser.add_argument('--seeds', type=int, default=DEFAULT_SEEDS, help='Instances per class (default: 20)')
    parser.add_argument('--splats', type=int, default=5, help='Splats per rasterizer instance')
    parser.add_argument('--size', type=int, default=8, help='Rasterizer image size')
    parser.add_argument('--points', type=int, default=12, help='Points per Chamfer cloud')
    parser.add_argument('--tolerance', type=float, default=DEFAULT_TOLERANCE, help='Max relative error')
    parser.add_argument('--inject-sign-flip', type=str, default=None, metavar='CLASS',
                        help=f'Negate one analytic gradient ({", ".join(PARAM_CLASSES)})')
    parser.add_argument('--torch', action='store_true', help='Also compare losses against torch autograd')
    parser.add_argument('--out', type=str, default=None, help='Write the report as JSON')
    parser.add_argument('--quiet', action='store_true', help='Only print errors')

    args = parser.parse_args(argv)
    verbose = not args.quiet
    if verbose:
        show_banner()

    try:
        with stage("config"):
            sizes = GradcheckSizes(splats=args.splats, image=args.size, points=args.points)
            if args.inject_sign_flip is not None and args.inject_sign_flip not in PARAM_CLASSES:
                raise ValueError(f"unknown parameter class {args.inject_sign_flip!r}")
        if verbose:
            print(f"[Config] seeds {args.seed}..{args.seed + args.seeds - 1}, tolerance {args.tolerance:g}")
            if args.inject_sign_flip:
                print(f"[WARN] injecting a sign flip into {args.inject_sign_flip}")
        with stage("gradcheck"):
            report = run_gradcheck(args.seed, args.seeds, sizes, args.tolerance, args.inject_sign_flip,
                                   args.torch, verbose)
        if args.out:
            with stage("write"):
                write_json(Path(args.out), report.as_dict())
    except StageError as e:
        return report_error(e)

    if verbose:
        print_report(report)
    if not report.passed:
        for name in report.failures:
            key = name.split(":", 1)[-1]
            source = report.torch_worst if name.startswith("torch:") else report.worst
            print(f"[ERROR] gradcheck: {name} worst relative error {source[key]:.3e} > {report.tolerance:g}")
        return EXIT_FAILURE
    if verbose:
        print("[OK] all gradients within tolerance")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())

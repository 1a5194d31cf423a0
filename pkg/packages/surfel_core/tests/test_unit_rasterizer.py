"""
Unit Test: differentiable surfel rasterizer (rasterizer.py)

Forward closed forms, permutation invariance, culling order, finite-difference
gradient checks and the oracle re-render of a pixel-aligned field.
"""

import numpy as np

from surfel_core.gaussian_field import build_pixel_aligned
from surfel_core.geometry import CameraIntrinsics, CameraPose, View, normals_to_quats
from surfel_core.losses import photometric
from surfel_core.models import SceneKind, SplatField
from surfel_core.rasterizer import (
    RenderConfig,
    RenderUpstream,
    SplatParams,
    cull_and_sort,
    render,
    render_backward,
)
from surfel_core.scene_synth import SceneSpec, TextureSpec, make_scene, raycast_render


def _view(size=16, f=16.0):
    intr = CameraIntrinsics(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)
    return View(None, intr, CameraPose.identity(), 0.1, 20.0)


def _field(mu, scales, normals, opacity, colors):
    mu = np.asarray(mu, dtype=float).reshape(-1, 3)
    n = mu.shape[0]
    return SplatField(
        mu=mu,
        scales=np.asarray(scales, dtype=float).reshape(n, 2),
        quats=normals_to_quats(np.asarray(normals, dtype=float).reshape(n, 3)),
        opacity=np.asarray(opacity, dtype=float).reshape(n),
        colors=np.asarray(colors, dtype=float).reshape(n, 3),
        view_index=np.zeros(n, dtype=np.int64),
        pixels=np.zeros((n, 2), dtype=np.int64),
    )


def _random_scene(rng, n=5):
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


def test_single_splat_center():
    print("\n" + "=" * 70)
    print("TEST: render() single fronto-parallel splat")
    print("=" * 70)

    view = _view()
    field = _field((0, 0, 2), (0.5, 0.5), (0, 0, -1), 1.0, (0.2, 0.4, 0.6))
    out = render(field, view)
    rgb = out.rgb.data[8, 8]
    assert np.allclose(rgb, (0.2, 0.4, 0.6), atol=1e-3)
    assert abs(out.depth.plane()[8, 8] - 2.0) < 1e-12
    assert np.allclose(out.normal.data[8, 8], (0, 0, -1), atol=1e-12)
    assert out.acc.plane()[8, 8] >= 0.999 - 1e-12
    print(f"  ✓ rgb {rgb}, depth 2, acc {out.acc.plane()[8, 8]:.4f}")

    empty = render(SplatField.empty(), view)
    assert np.all(empty.acc.data == 0) and np.all(empty.rgb.data == 0)


def test_full_occlusion():
    print("\n" + "=" * 70)
    print("TEST: render() front splat occludes the back one")
    print("=" * 70)

    view = _view()
    front = _field((0, 0, 2), (0.5, 0.5), (0, 0, -1), 1.0, (1.0, 0.0, 0.0))
    both = _field([(0, 0, 3), (0, 0, 2)], [(0.5, 0.5)] * 2, [(0, 0, -1)] * 2, [1.0, 1.0],
                  [(0.0, 0.0, 1.0), (1.0, 0.0, 0.0)])
    a = render(front, view)
    b = render(both, view)
    assert np.max(np.abs(a.rgb.data[8, 8] - b.rgb.data[8, 8])) < 2e-3
    assert abs(b.depth.plane()[8, 8] - 2.0) < 2e-3
    print("  ✓ centre pixel matches the front splat alone")


def test_permutation_invariance_and_acc_range():
    print("\n" + "=" * 70)
    print("TEST: render() permutation invariance, acc in [0, 1], monotone acc")
    print("=" * 70)

    rng = np.random.default_rng(11)
    view = _view(size=40, f=40.0)
    params = _random_scene(rng, n=30)
    field = SplatField(params.mu, params.scales, params.quats / np.linalg.norm(params.quats, axis=1, keepdims=True),
                       params.opacity, params.colors, np.zeros(30, dtype=np.int64), np.zeros((30, 2), dtype=np.int64))
    perm = rng.permutation(30)
    a = render(field, view)
    b = render(field.subset(perm), view)
    for name in ("rgb", "depth", "normal", "acc"):
        assert np.array_equal(getattr(a, name).data, getattr(b, name).data)
    print("  ✓ permuted field renders bitwise-identically")

    small_tiles = render(field, view, RenderConfig(tile_size=7))
    assert np.allclose(small_tiles.rgb.data, a.rgb.data, atol=1e-12)
    print("  ✓ tile size has no effect on the image")

    acc = a.acc.plane()
    assert acc.min() >= 0.0 and acc.max() <= 1.0
    extra = SplatField.concatenate([field, _field((0.1, 0.0, 1.8), (0.4, 0.4), (0, 0, -1), 0.7, (1, 1, 1))])
    assert np.all(render(extra, view).acc.plane() >= acc - 1e-12)
    print("  ✓ adding a splat never lowers acc")


def test_cull_and_sort():
    print("\n" + "=" * 70)
    print("TEST: cull_and_sort()")
    print("=" * 70)

    view = _view()
    field = _field([(0, 0, 2), (0, 0, -2), (0.1, 0, 2), (0, 0, 1)], [(0.3, 0.3)] * 4,
                   [(0, 0, -1)] * 4, [0.5] * 4, [(0.5, 0.5, 0.5)] * 4)
    bins = cull_and_sort(field, view, RenderConfig(tile_size=16))
    assert len(bins) == 1
    assert list(bins[0].indices) == [3, 0, 2]
    print("  ✓ behind-camera splat dropped; depth order with index tie-break")

    far_off = _field((50.0, 0, 2), (0.1, 0.1), (0, 0, -1), 0.5, (0.5, 0.5, 0.5))
    assert all(b.indices.size == 0 for b in cull_and_sort(far_off, view))
    bins = cull_and_sort(field, view, RenderConfig(tile_size=4))
    assert all(b.indices.size <= len(field) for b in bins)


def test_backward_trivial_cases():
    print("\n" + "=" * 70)
    print("TEST: render_backward() zero upstream and colour optimum")
    print("=" * 70)

    rng = np.random.default_rng(3)
    view = _view(size=8, f=8.0)
    params = _random_scene(rng)
    g = render_backward(params, view, None, RenderUpstream())
    for arr in g.as_dict().values():
        assert np.all(arr == 0.0)
    print("  ✓ zero upstream -> zero gradients")

    single = _field((0, 0, 2), (0.5, 0.5), (0, 0, -1), 0.9, (0.3, 0.5, 0.7))
    target = render(single, view).rgb
    res = photometric(target, target)
    grads = render_backward(single, view, None, RenderUpstream(rgb=res.grad))
    assert np.max(np.abs(grads.colors)) < 1e-12
    print("  ✓ colour gradient vanishes at the target")


def _objective(params, view, cfg, up):
    out = render(params, view, cfg)
    return (np.sum(up.rgb * out.rgb.data) + np.sum(up.depth * out.depth.plane())
            + np.sum(up.normal * out.normal.data) + np.sum(up.acc * out.acc.plane()))


def _finite_difference(params, view, cfg, up, name, h_rel=1e-4):
    base = getattr(params, name)
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        h = h_rel * max(1.0, abs(base[idx]))
        values = []
        for sign in (1.0, -1.0):
            arr = base.copy()
            arr[idx] += sign * h
            fields = {k: getattr(params, k) for k in ("mu", "scales", "quats", "opacity", "colors")}
            fields[name] = arr
            values.append(_objective(SplatParams(**fields), view, cfg, up))
        grad[idx] = (values[0] - values[1]) / (2 * h)
    return grad


def test_backward_matches_finite_differences():
    """Random 5-splat scenes on an 8x8 image, every parameter class"""

    print("\n" + "=" * 70)
    print("TEST: render_backward() vs central finite differences")
    print("=" * 70)

    view = _view(size=8, f=8.0)
    cfg = RenderConfig()
    for seed in range(3):
        rng = np.random.default_rng(100 + seed)
        params = _random_scene(rng)
        up = RenderUpstream(
            rgb=rng.normal(size=(8, 8, 3)),
            depth=rng.normal(size=(8, 8)),
            normal=rng.normal(size=(8, 8, 3)),
            acc=rng.normal(size=(8, 8)),
        )
        analytic = render_backward(params, view, cfg, up)
        for name, attr in (("mu", "mu"), ("s", "scales"), ("q", "quats"), ("alpha", "opacity"), ("c", "colors")):
            a = getattr(analytic, attr)
            fd = _finite_difference(params, view, cfg, up, attr)
            rel = np.linalg.norm(a - fd) / max(np.linalg.norm(fd), 1e-8)
            assert rel <= 1e-3, f"seed {seed}, {name}: relative error {rel:.2e}"
        print(f"  ✓ seed {seed}: all parameter classes within 1e-3")


def test_oracle_box_rerender():
    """Pixel-aligned field from oracle depth/normals re-renders its source view"""

    print("\n" + "=" * 70)
    print("TEST: oracle box-room re-render")
    print("=" * 70)

    texture = TextureSpec(pattern="noise", frequency=0.25, octaves=1)
    spec = SceneSpec(SceneKind.BOX_ROOM, (4.0, 3.0, 2.5), texture)
    intr = CameraIntrinsics(fx=24, fy=24, cx=24, cy=24, width=48, height=48)
    view = View(None, intr, CameraPose.look_at((0.3, 0.2, -0.4), (1.0, 0.5, 1.0)), 0.01, 20.0)
    oracle = raycast_render(make_scene(spec), view, texture)
    source = View(oracle.image, intr, view.pose, view.near, view.far)
    field, skipped = build_pixel_aligned(oracle.depth, oracle.normal, source)
    assert skipped == 0

    out = render(field, view)
    mse = float(np.mean((out.rgb.data - oracle.image.data) ** 2))
    psnr = 10 * np.log10(1.0 / mse)
    gt = oracle.depth.plane()
    rel = np.abs(out.depth.plane() - gt) / gt
    print(f"  PSNR {psnr:.2f} dB, mean rel depth error {rel.mean():.5f}, median {np.median(rel):.2e}")
    assert psnr >= 30.0
    assert rel.mean() <= 0.01
    assert np.median(rel) <= 0.01

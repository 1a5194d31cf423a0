"""
Unit Test: plane-sweep cost volumes (cost_volume.py)

Descriptor, candidate ladders, correlation logits and the closed forms of
softmax depth and confidence.
"""

import numpy as np
import pytest

from surfel_core.cost_volume import (
    FEATURE_CHANNELS,
    CostVolume,
    CostVolumeConfig,
    DepthCandidates,
    FeatureMap,
    backproject_depth,
    build_cost_volume,
    confidence_map,
    correlation_volume,
    extract_features,
    make_candidates,
    normalized_correlation,
    raw_descriptor,
    softmax_depth,
)
from surfel_core.geometry import CameraIntrinsics, CameraPose, ImageGrid, View, pixel_grid, project_points
from surfel_core.models import CostAggregation, DepthSpacing, SceneKind
from surfel_core.scene_synth import SceneSpec, make_scene, raycast_render


def _volume(logits, values):
    logits = np.asarray(logits, dtype=float)
    return CostVolume(logits.reshape(1, 1, -1), DepthCandidates(values))


def test_descriptor_examples():
    print("\n" + "=" * 70)
    print("TEST: raw_descriptor()/extract_features()")
    print("=" * 70)

    const = ImageGrid.constant(16, 16, 3, 0.4)
    raw = raw_descriptor(const).data
    assert raw.shape == (4, 4, FEATURE_CHANNELS)
    assert np.all(raw[:, :, [1, 2, 5, 6, 7]] == 0.0)
    assert np.all(raw[:, :, 4] < 1e-6)
    assert np.all(extract_features(const).grid.data[:, :, [1, 2]] == 0.0)
    print("  ✓ constant image -> zero gradient channels")

    u, _ = pixel_grid(16, 32)
    ramp = ImageGrid(np.repeat((u / 32.0)[..., None], 3, axis=2))
    raw = raw_descriptor(ramp).data
    assert np.allclose(raw[:, :, 1], 1.0 / 32.0) and np.all(raw[:, :, 1] > 0)
    assert np.allclose(raw[:, :, 2], 0.0)
    print("  ✓ horizontal ramp -> constant positive x-gradient, zero y-gradient")

    rng = np.random.default_rng(0)
    img = ImageGrid(rng.uniform(size=(32, 32, 3)))
    a = extract_features(img).grid.data
    b = extract_features(ImageGrid(img.data.copy())).grid.data
    assert np.array_equal(a, b)
    assert np.allclose(a.mean(axis=(0, 1)), 0.0, atol=1e-12)
    assert np.allclose(a.std(axis=(0, 1)), 1.0, atol=1e-9)
    print("  ✓ deterministic, standardised")

    with pytest.raises(ValueError):
        raw_descriptor(ImageGrid.constant(8, 8, 1, 0.0))


def test_make_candidates_examples():
    print("\n" + "=" * 70)
    print("TEST: make_candidates()")
    print("=" * 70)

    c = make_candidates(1.0, 100.0, 2, DepthSpacing.LINEAR)
    assert list(c.values) == [1.0, 100.0]

    c = make_candidates(1.0, 3.0, 3, DepthSpacing.INVERSE)
    assert np.allclose(c.values, [1.0, 1.5, 3.0])
    assert c.values[0] == 1.0 and c.values[-1] == 3.0

    c = make_candidates(0.5, 80.0, 128)
    assert c.count == 128 and np.all(np.diff(c.values) > 0)
    assert c.values[0] == 0.5 and c.values[-1] == 80.0
    print("  ✓ endpoints exact, strictly increasing")

    for near, far, d in ((2.0, 1.0, 8), (0.0, 1.0, 8), (1.0, 2.0, 1)):
        with pytest.raises(ValueError, match="invalid range"):
            make_candidates(near, far, d)

    c = DepthCandidates([1.0, 2.0, 4.0])
    assert list(c.spacing_at([1.5, 3.0, 10.0])) == [1.0, 2.0, 2.0]


def test_correlation_examples():
    print("\n" + "=" * 70)
    print("TEST: correlation_volume()/build_cost_volume() raw correlation")
    print("=" * 70)

    intr = CameraIntrinsics(fx=32, fy=32, cx=16, cy=16, width=32, height=32)
    view = View(None, intr, CameraPose.identity(), 1.0, 10.0)
    rng = np.random.default_rng(2)
    F = FeatureMap(ImageGrid(rng.normal(size=(8, 8, 8))))
    cands = make_candidates(1.0, 10.0, 16)
    raw_cfg = CostVolumeConfig(aggregation=CostAggregation.CORRELATION, smoothing=1, gain=1.0)

    logits, valid = correlation_volume(F, F, view, view, cands)
    assert valid.all()
    expected = np.sum(F.grid.data ** 2, axis=-1) / np.sqrt(8)
    assert np.allclose(logits, expected[..., None], atol=1e-9)
    print("  ✓ identical features, identity pose: every logit is |f|^2/sqrt(C)")

    raw = build_cost_volume(F, F, view, view, cands, raw_cfg)
    assert np.allclose(raw.logits, logits)

    zero = FeatureMap(ImageGrid(np.zeros((8, 8, 8))))
    for cfg in (raw_cfg, CostVolumeConfig()):
        assert np.all(build_cost_volume(zero, zero, view, view, cands, cfg).logits == 0.0)
    print("  ✓ zero features -> zero logits")

    shifted = View(None, intr, CameraPose.from_center(np.eye(3), (2.0, 0, 0)), 1.0, 10.0)
    logits, valid = correlation_volume(F, F, view, shifted, cands)
    assert not valid.all()
    assert np.all(logits[~valid] == -10.0)
    smoothed = CostVolumeConfig(aggregation=CostAggregation.CORRELATION, gain=2.0)
    vol = build_cost_volume(F, F, view, shifted, cands, smoothed)
    assert np.all(vol.logits[~valid] == -20.0)
    print("  ✓ invalid warps hold the sentinel through raw aggregation")

    with pytest.raises(ValueError):
        correlation_volume(F, FeatureMap(ImageGrid(np.zeros((8, 4, 8)))), view, view, cands)


def test_normalized_correlation_examples():
    print("\n" + "=" * 70)
    print("TEST: normalized_correlation()")
    print("=" * 70)

    rng = np.random.default_rng(4)
    a = rng.normal(size=(10, 12, 8))
    valid = np.ones((10, 12), dtype=bool)
    assert np.allclose(normalized_correlation(a, 2.0 * a + 3.0, valid, 3), 1.0, atol=1e-9)
    assert np.allclose(normalized_correlation(a, -a, valid, 3), -1.0, atol=1e-9)
    print("  ✓ positive affine copy -> 1, negated copy -> -1")

    flat = normalized_correlation(a, np.full_like(a, 0.7), valid, 3)
    assert np.all(flat == 0.0)
    assert np.all(normalized_correlation(a, a, np.zeros_like(valid), 3) == 0.0)
    print("  ✓ flat or empty windows score 0")

    # invalid samples are ignored, not treated as zeros
    b = a.copy()
    b[:, :6] = 0.0
    half = np.ones_like(valid)
    half[:, :6] = False
    scores = normalized_correlation(a, b, half, 3)
    assert np.allclose(scores[:, 7:], 1.0, atol=1e-9)

    window_1 = normalized_correlation(a, rng.normal(size=a.shape), valid, 1)
    assert np.all(np.abs(window_1) <= 1.0)


def test_ncc_cost_volume():
    print("\n" + "=" * 70)
    print("TEST: build_cost_volume() NCC aggregation")
    print("=" * 70)

    cfg = CostVolumeConfig()
    assert cfg.aggregation == CostAggregation.NCC
    assert abs(cfg.gain_for(128) - 3.0 * np.log(128)) < 1e-12
    assert CostVolumeConfig(gain=5.0).gain_for(128) == 5.0

    intr = CameraIntrinsics(fx=32, fy=32, cx=16, cy=16, width=32, height=32)
    view = View(None, intr, CameraPose.identity(), 1.0, 10.0)
    rng = np.random.default_rng(2)
    F = FeatureMap(ImageGrid(rng.normal(size=(8, 8, 8))))
    cands = make_candidates(1.0, 10.0, 16)

    same = build_cost_volume(F, F, view, view, cands)
    assert np.allclose(same.logits, cfg.gain_for(16), atol=1e-9)
    print("  ✓ identical features, identity pose: every hypothesis is a perfect match")

    # nothing to match: partly unverifiable pixels must stay uniform
    shifted = View(None, intr, CameraPose.from_center(np.eye(3), (2.0, 0, 0)), 1.0, 10.0)
    blank = FeatureMap(ImageGrid(np.zeros((8, 8, 8))))
    _, valid = correlation_volume(F, blank, view, shifted, cands)
    partial = valid.any(axis=-1) & ~valid.all(axis=-1)
    assert partial.any()
    conf = confidence_map(build_cost_volume(F, blank, view, shifted, cands)).grid.plane()
    assert np.all(conf == 1.0 / 16)
    raw_cfg = CostVolumeConfig(aggregation=CostAggregation.CORRELATION, gain=1.0)
    raw_conf = confidence_map(build_cost_volume(F, blank, view, shifted, cands, raw_cfg)).grid.plane()
    assert np.all(raw_conf[partial] > 1.0 / 16)
    print("  ✓ invalid warps and weak matches carry no evidence (the raw sentinel does not)")

    for bad in ({"window": 0}, {"smoothing": 0}, {"evidence_floor": 1.0}, {"gain": 0.0}):
        with pytest.raises(ValueError):
            CostVolumeConfig(**bad)


def test_softmax_depth_closed_forms():
    print("\n" + "=" * 70)
    print("TEST: softmax_depth()")
    print("=" * 70)

    values = np.linspace(1.0, 4.0, 8)
    for k in (0, 3, 7):
        logits = np.zeros(8)
        logits[k] = 50.0
        assert abs(softmax_depth(_volume(logits, values)).data[0, 0, 0] - values[k]) < 1e-6
    assert abs(softmax_depth(_volume([0.0, 0.0, 0.0], [1.0, 2.0, 3.0])).data[0, 0, 0] - 2.0) < 1e-12
    assert abs(softmax_depth(_volume([0.0, np.log(3.0)], [1.0, 2.0])).data[0, 0, 0] - 1.75) < 1e-12
    print("  ✓ one-hot, uniform and two-candidate cases")

    rng = np.random.default_rng(5)
    cands = DepthCandidates(np.sort(rng.uniform(1, 20, 32)) + np.arange(32) * 1e-3)
    logits = rng.normal(scale=30.0, size=(6, 6, 32))
    depth = softmax_depth(CostVolume(logits, cands)).plane()
    assert depth.min() >= cands.values[0] and depth.max() <= cands.values[-1]
    print("  ✓ convex combination of candidates")


def test_confidence_closed_forms():
    print("\n" + "=" * 70)
    print("TEST: confidence_map()")
    print("=" * 70)

    values = make_candidates(1.0, 100.0, 128).values
    uniform = confidence_map(_volume(np.zeros(128), values)).grid.data
    assert uniform[0, 0, 0] == 1.0 / 128
    logits = np.zeros(128)
    logits[40] = 50.0
    assert confidence_map(_volume(logits, values)).grid.data[0, 0, 0] > 1 - 1e-12
    print("  ✓ uniform -> 1/128 exactly, one-hot -> 1")

    rng = np.random.default_rng(9)
    cands = make_candidates(1.0, 5.0, 16)
    logits = rng.normal(scale=5.0, size=(5, 5, 16))
    shift = rng.normal(scale=100.0, size=(5, 5, 1))
    v0, v1 = CostVolume(logits, cands), CostVolume(logits + shift, cands)
    assert np.max(np.abs(softmax_depth(v0).data - softmax_depth(v1).data)) < 1e-9
    c0, c1 = confidence_map(v0).grid.data, confidence_map(v1).grid.data
    assert np.max(np.abs(c0 - c1)) < 1e-9
    assert c0.min() >= 1.0 / 16 and c0.max() <= 1.0
    print("  ✓ per-pixel shift invariance, range [1/D, 1]")


def test_backproject_depth_examples():
    print("\n" + "=" * 70)
    print("TEST: backproject_depth()")
    print("=" * 70)

    intr = CameraIntrinsics(fx=20, fy=20, cx=8, cy=6, width=16, height=12)
    view = View(None, intr, CameraPose.identity(), 0.1, 10.0)
    cloud = backproject_depth(ImageGrid.constant(12, 16, 1, 2.5), view)
    assert len(cloud) == 16 * 12
    assert np.allclose(cloud.points[:, 2], 2.5)

    pose = CameraPose(CameraPose.look_at((0.2, 0.1, -1), (0, 0, 2)).q, (0.3, -0.2, 0.5))
    view = View(None, intr, pose, 0.1, 10.0)
    weights = ImageGrid(np.arange(16 * 12, dtype=float).reshape(12, 16) / 200.0)
    depth = np.full((12, 16), 3.0)
    depth[0, :4] = 0.0
    cloud = backproject_depth(ImageGrid(depth), view, weights)
    uv, z = project_points(cloud.points, intr, pose)
    u, v = pixel_grid(12, 16)
    keep = depth > 0
    assert np.max(np.abs(uv[:, 0] - u[keep])) < 1e-9
    assert np.max(np.abs(uv[:, 1] - v[keep])) < 1e-9
    assert np.array_equal(cloud.weights, weights.plane()[keep])
    print("  ✓ plane, row-major roundtrip, weights aligned")

    spec = SceneSpec(SceneKind.BOX_ROOM, (4.0, 3.0, 2.5))
    box_view = View(None, CameraIntrinsics(fx=12, fy=12, cx=12, cy=12, width=24, height=24),
                    CameraPose.look_at((0.5, 0.2, 0.1), (2, 1, 1)), 0.01, 20.0)
    render = raycast_render(make_scene(spec), box_view, spec.texture)
    pts = backproject_depth(render.depth, box_view).points
    half = np.array(spec.dimensions) / 2
    excess = np.max(np.abs(pts) - half, axis=1)
    assert np.max(np.abs(excess)) < 1e-6
    print("  ✓ oracle box depth back-projects onto the walls")

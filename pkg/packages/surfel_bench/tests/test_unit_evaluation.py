"""
Unit Test: reconstruction metrics (evaluation.py)

Worked examples, brute-force oracles, argument-swap and rigid-motion
invariance, and the JSON / CSV record writers.
"""

import csv
import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from surfel_core.models import PointCloud, TriangleMesh
from surfel_bench.evaluation import (
    depth_metrics,
    mesh_metrics,
    metric_record,
    normal_metrics,
    psnr,
    sample_mesh,
    write_metric_record,
    write_metrics_csv,
)


def _brute_force(pred, gt, tau):
    d = np.linalg.norm(pred[:, None, :] - gt[None, :, :], axis=-1)
    d_pred, d_gt = d.min(axis=1), d.min(axis=0)
    p, r = np.mean(d_pred < tau), np.mean(d_gt < tau)
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return 0.5 * (d_pred.mean() + d_gt.mean()), p, r, f1


def test_sample_mesh():
    print("\n" + "=" * 70)
    print("TEST: sample_mesh()")
    print("=" * 70)

    square = TriangleMesh([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)], [(0, 1, 2), (0, 2, 3)])
    pts = sample_mesh(square, 10_000, seed=0).points
    assert pts.shape == (10_000, 3)
    assert np.all(np.abs(pts.mean(axis=0)[:2] - 0.5) < 0.02) and np.all(pts[:, 2] == 0.0)
    print(f"  ✓ unit square centroid {pts.mean(axis=0)[:2].round(4).tolist()}")

    tri = TriangleMesh([(0, 0, 0), (2, 0, 0), (0, 1, 0)], [(0, 1, 2)])
    p = sample_mesh(tri, 2000, seed=3).points
    assert np.all(p[:, 0] >= -1e-12) and np.all(p[:, 1] >= -1e-12)
    assert np.all(p[:, 0] / 2 + p[:, 1] <= 1 + 1e-12)
    print("  ✓ single triangle: every sample inside")

    assert np.array_equal(sample_mesh(square, 500, seed=7).points, sample_mesh(square, 500, seed=7).points)
    assert not np.array_equal(sample_mesh(square, 500, seed=7).points, sample_mesh(square, 500, seed=8).points)
    print("  ✓ deterministic per seed")

    with pytest.raises(ValueError, match="empty mesh"):
        sample_mesh(TriangleMesh.empty(), 10)


def test_mesh_metrics_examples():
    print("\n" + "=" * 70)
    print("TEST: mesh_metrics() worked examples")
    print("=" * 70)

    cloud = np.random.default_rng(0).normal(size=(50, 3))
    same = mesh_metrics(cloud, cloud, 0.05)
    assert (same.cd, same.precision, same.recall, same.f1) == (0.0, 1.0, 1.0, 1.0)
    print("  ✓ pred = gt -> cd 0, p = r = f1 = 1")

    m = mesh_metrics(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0.0, 0, 0]]), 0.5)
    assert m.precision == 0.5 and m.recall == 1.0
    assert m.f1 == pytest.approx(2.0 / 3.0, abs=1e-15)
    assert m.cd == 0.25 and m.tau == 0.5 and m.samples == 1
    print("  ✓ two-point example: p 0.5, r 1, f1 2/3, cd 0.25")

    other = np.random.default_rng(1).normal(size=(40, 3)) + 5.0
    saturated = mesh_metrics(cloud, other, 1e9)
    assert saturated.precision == 1.0 and saturated.recall == 1.0
    far = mesh_metrics(cloud, other, 1e-3)
    assert far.precision == 0.0 and far.recall == 0.0 and far.f1 == 0.0
    print("  ✓ huge tau saturates, disjoint clouds give f1 0")

    with pytest.raises(ValueError, match="empty cloud"):
        mesh_metrics(np.zeros((0, 3)), cloud)
    with pytest.raises(ValueError, match="empty cloud"):
        mesh_metrics(PointCloud(cloud), PointCloud(np.zeros((0, 3))))
    with pytest.raises(ValueError, match="invalid threshold"):
        mesh_metrics(cloud, cloud, 0.0)


def test_mesh_metrics_match_brute_force():
    """Random clouds of at most 200 points"""

    print("\n" + "=" * 70)
    print("TEST: mesh_metrics() vs O(n^2) brute force")
    print("=" * 70)

    rng = np.random.default_rng(11)
    for _ in range(100):
        pred = rng.normal(size=(rng.integers(1, 201), 3))
        gt = rng.normal(size=(rng.integers(1, 201), 3))
        tau = rng.uniform(0.05, 1.0)
        m = mesh_metrics(pred, gt, tau)
        cd, p, r, f1 = _brute_force(pred, gt, tau)
        assert abs(m.cd - cd) <= 1e-9
        assert (m.precision, m.recall) == (p, r)
        assert m.f1 == pytest.approx(f1, abs=1e-15)
    print("  ✓ 100 random pairs: exact fractions, cd within 1e-9")


def test_mesh_metrics_invariances():
    print("\n" + "=" * 70)
    print("TEST: mesh_metrics() swap and rigid-motion invariance")
    print("=" * 70)

    rng = np.random.default_rng(12)
    for _ in range(20):
        pred, gt = rng.normal(size=(80, 3)), rng.normal(size=(60, 3))
        a, b = mesh_metrics(pred, gt, 0.3), mesh_metrics(gt, pred, 0.3)
        assert (a.precision, a.recall) == (b.recall, b.precision)
        assert a.cd == b.cd and a.f1 == pytest.approx(b.f1, abs=1e-15)

        R = Rotation.random(random_state=int(rng.integers(1 << 30))).as_matrix()
        t = rng.normal(size=3) * 10
        moved = mesh_metrics(pred @ R.T + t, gt @ R.T + t, 0.3)
        assert abs(moved.cd - a.cd) <= 1e-9
        assert abs(moved.precision - a.precision) <= 1e-9 and abs(moved.recall - a.recall) <= 1e-9
    print("  ✓ swap exchanges precision and recall, rigid motion changes nothing")


def test_depth_metrics():
    print("\n" + "=" * 70)
    print("TEST: depth_metrics()")
    print("=" * 70)

    gt = np.full((4, 5), 3.0)
    mask = np.ones((4, 5), dtype=bool)
    same = depth_metrics(gt, gt, mask)
    assert (same.abs_rel, same.abs_diff) == (0.0, 0.0)
    double = depth_metrics(2 * gt, gt, mask)
    assert (double.abs_rel, double.abs_diff) == (1.0, 3.0) and double.pixels == 20
    print("  ✓ pred = gt -> (0, 0); pred = 2 gt, gt = 3 -> (1.0, 3.0)")

    rng = np.random.default_rng(5)
    gt = rng.uniform(0.5, 5.0, (6, 7))
    pred = gt + rng.normal(size=(6, 7))
    mask = rng.uniform(size=(6, 7)) < 0.5
    m = depth_metrics(pred, gt, mask)
    assert abs(m.abs_rel - np.mean(np.abs(pred - gt)[mask] / gt[mask])) <= 1e-12
    assert abs(m.abs_diff - np.mean(np.abs(pred - gt)[mask])) <= 1e-12
    print("  ✓ random mask matches the masked mean")

    with pytest.raises(ValueError, match="empty mask"):
        depth_metrics(pred, gt, np.zeros((6, 7), dtype=bool))
    gt[0, 0] = 0.0
    with pytest.raises(ValueError, match="non-positive depth"):
        depth_metrics(pred, gt, np.ones((6, 7), dtype=bool))
    with pytest.raises(ValueError, match="shape mismatch"):
        depth_metrics(pred[:2], gt, mask)


def test_normal_metrics():
    print("\n" + "=" * 70)
    print("TEST: normal_metrics()")
    print("=" * 70)

    rng = np.random.default_rng(6)
    gt = rng.normal(size=(4, 6, 3))
    gt /= np.linalg.norm(gt, axis=-1, keepdims=True)
    mask = np.ones((4, 6), dtype=bool)

    same = normal_metrics(gt, gt, mask)
    assert same.mean_deg == pytest.approx(0.0, abs=1e-5) and same.frac_lt30 == 1.0
    flipped = normal_metrics(-gt, gt, mask)
    assert flipped.mean_deg == pytest.approx(180.0, abs=1e-5) and flipped.frac_lt30 == 0.0
    print("  ✓ pred = gt -> 0 deg; pred = -gt -> 180 deg")

    z = np.zeros((2, 4, 3))
    z[..., 2] = 1.0
    half = z.copy()
    half[1] = (np.sin(np.pi / 4), 0.0, np.cos(np.pi / 4))
    m = normal_metrics(half, z, np.ones((2, 4), dtype=bool))
    assert m.mean_deg == pytest.approx(22.5, abs=1e-6) and m.frac_lt30 == 0.5 and m.pixels == 8
    print("  ✓ half exact, half at 45 deg -> 22.5 deg, fraction 0.5")

    sub = rng.uniform(size=(4, 6)) < 0.5
    sub[0, 0] = True
    pred = rng.normal(size=(4, 6, 3))
    pred /= np.linalg.norm(pred, axis=-1, keepdims=True)
    m = normal_metrics(pred, gt, sub)
    angles = np.degrees(np.arccos(np.clip(np.sum(pred * gt, axis=-1), -1, 1)))[sub]
    assert abs(m.mean_deg - angles.mean()) <= 1e-9
    assert m.frac_lt30 == np.mean(angles < 30.0)

    with pytest.raises(ValueError, match="empty mask"):
        normal_metrics(gt, gt, np.zeros((4, 6), dtype=bool))


def test_psnr():
    img = np.random.default_rng(8).uniform(size=(8, 8, 3))
    assert psnr(img, img) == float("inf")
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)


def test_metric_records(tmp_path):
    print("\n" + "=" * 70)
    print("TEST: metric records (JSON + CSV)")
    print("=" * 70)

    m = mesh_metrics(np.array([[0.0, 0, 0], [1.0, 0, 0]]), np.array([[0.0, 0, 0]]), 0.5)
    d = depth_metrics(np.full((2, 2), 2.0), np.full((2, 2), 1.0), np.ones((2, 2), dtype=bool))
    record = metric_record("plane", "scannet", m, d, None, variant="full")
    assert record["mesh"] == {"cd": 0.25, "precision": 0.5, "recall": 1.0, "f1": m.f1}
    assert record["tau"] == 0.5 and record["samples"] == 1 and record["normal"] is None
    assert record["depth"] == {"abs_rel": 1.0, "abs_diff": 1.0, "pixels": 4}

    write_metric_record(tmp_path / "m" / "a.json", record)
    assert json.loads((tmp_path / "m" / "a.json").read_text()) == record
    print("  ✓ JSON record: version, scene, preset, tau, samples, mesh, depth, normal")

    empty = metric_record("plane", "scannet", None, status="empty_after_cull")
    columns = write_metrics_csv(tmp_path / "all.csv", [record, empty])
    with open(tmp_path / "all.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    assert columns[:3] == ["version", "scene", "preset"]
    assert "mesh.cd" in columns and "status" in columns
    assert rows[0]["mesh.cd"] == "0.25" and rows[1]["mesh.cd"] == "" and rows[1]["status"] == "empty_after_cull"
    print("  ✓ CSV aggregate with dotted columns and blank cells for missing values")

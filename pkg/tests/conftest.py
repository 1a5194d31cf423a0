"""
Pytest configuration and shared fixtures for the workspace test suite

This file is automatically discovered by pytest and provides:
- sys.path entries for every package under packages/
- Oracle scene fixtures shared by the end-to-end tests
- Marker registration and auto-marking by file-name prefix
"""

import pytest
import sys
from pathlib import Path

# Add every package to the Python path so tests run without an install
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))
for _package in ("surfel_core", "surfel_io", "surfel_bench"):
    sys.path.insert(0, str(PROJECT_ROOT / "packages" / _package))


@pytest.fixture
def project_root():
    """Fixture providing the project root directory"""
    return PROJECT_ROOT


@pytest.fixture
def oracle_scene():
    """
    Factory fixture: oracle-rendered views of an analytic scene.

    Returns a callable (spec, size, **view_kwargs) -> (mesh, views, renders)
    where views carry the rendered images.
    """
    from surfel_core.geometry import View
    from surfel_core.scene_synth import benchmark_views, make_scene, raycast_render

    def build(spec, size=32, **view_kwargs):
        mesh = make_scene(spec)
        views, renders = [], []
        for cam in benchmark_views(spec, width=size, height=size, **view_kwargs):
            oracle = raycast_render(mesh, cam, spec.texture, spec.seed)
            views.append(View(oracle.image, cam.intrinsics, cam.pose, cam.near, cam.far))
            renders.append(oracle)
        return mesh, views, renders

    return build


def pytest_configure(config):
    """Pytest configuration hook - runs before test collection"""
    config.addinivalue_line(
        "markers", "unit: mark test as a unit test"
    )
    config.addinivalue_line(
        "markers", "integration: mark test as an integration test"
    )
    config.addinivalue_line(
        "markers", "e2e: mark test as an end-to-end test"
    )
    config.addinivalue_line(
        "markers", "slow: mark test as slow running"
    )


def pytest_collection_modifyitems(config, items):
    """Auto-add markers based on test file names"""
    for item in items:
        if "test_unit_" in item.nodeid:
            item.add_marker(pytest.mark.unit)
        elif "test_int_" in item.nodeid:
            item.add_marker(pytest.mark.integration)
        elif "test_e2e_" in item.nodeid:
            item.add_marker(pytest.mark.e2e)
            item.add_marker(pytest.mark.slow)

"""
surfel_core: numerical engine for two-view surfel reconstruction

Camera geometry, analytic oracle scenes, plane-sweep cost volumes,
pixel-aligned 2D Gaussian surfels, a differentiable surfel rasterizer,
training losses, per-scene fitting and TSDF meshing.
"""

from surfel_core.__version__ import __version__

__all__ = ["__version__"]

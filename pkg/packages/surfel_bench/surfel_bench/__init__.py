"""
surfel_bench: metrics and verification tools

Mesh, depth and normal metrics, the eval subcommand, the finite-difference
gradient suite and the loss ablation runner.
"""

__version__ = "1.0.0"

__all__ = ["__version__"]

"""
surfel_io: scene bundles, file formats and pipeline commands

Reads and writes PNG/PFM/PLY/OBJ/JSON artifacts, resolves run presets and
provides the synth, reconstruct and render subcommands.
"""

__version__ = "1.0.0"

__all__ = ["__version__"]

"""Wide volumetric residual networks for voxel shape classification."""

__version__ = "0.1.0"

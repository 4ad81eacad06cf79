"""Point-queryable volumetric TSDF reconstruction on synthetic scenes."""

__version__ = "0.1.0"

"""Climate-field downscaling with a residual slim vision transformer and tile-wise attention."""

__version__ = "0.1.0"

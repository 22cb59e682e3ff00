"""Monte Carlo batch-norm uncertainty for single-image super-resolution, in numpy."""

__version__ = "0.1.0"

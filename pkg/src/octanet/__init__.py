"""Two-stage retinal OCTA vessel segmentation, evaluation and fractal analysis."""

__version__ = "0.1.0"
